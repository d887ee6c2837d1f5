//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::autograd::{Grads, ParamStore};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Tensors that are never decayed: vectors (biases, norm affines) and the
/// position table.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2 && name != "pos_embed"
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        AdamW {
            betas,
            eps,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.eps as f32);
        for (name, p) in params.params_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.len() != p.len() {
                return Err(shape_err!("gradient for {name}: {} vs {}", g.len(), p.len()));
            }
            let decay = if decays(name, p.shape()) {
                (lr * self.weight_decay) as f32
            } else {
                0.0
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *x -= decay * *x;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *x -= step_size * *m / denom;
            }
        }
        Ok(())
    }

    /// Moments as named tensors for checkpointing.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor<f32>> {
        let mut out = BTreeMap::new();
        for (prefix, map) in [("adam.m.", &self.m), ("adam.v.", &self.v)] {
            for (k, val) in map {
                out.insert(
                    format!("{prefix}{k}"),
                    Tensor::from_vec(&[val.len()], val.clone()).expect("1-d"),
                );
            }
        }
        out
    }

    pub fn load_state_tensors(&mut self, state: &BTreeMap<String, Tensor<f32>>, t: u64) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (k, val) in state {
            if let Some(name) = k.strip_prefix("adam.m.") {
                self.m.insert(name.to_string(), val.data().to_vec());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                self.v.insert(name.to_string(), val.data().to_vec());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        p.insert("b", Tensor::from_vec(&[2], vec![0.1, -0.1]).unwrap());
        p
    }

    fn grads() -> Grads {
        let mut g = Grads::new();
        g.insert("w".into(), Tensor::from_vec(&[2, 2], vec![0.3, -0.1, 0.0, 2.0]).unwrap());
        g.insert("b".into(), Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        g
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = store();
        let before = p.clone();
        let mut opt = AdamW::new((0.9, 0.95), 1e-8, 0.05);
        opt.step(&mut p, &grads(), 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // after one step mhat = g and vhat = g^2, so the move is lr·g/(|g|+eps)
        let mut p = store();
        let mut opt = AdamW::new((0.9, 0.95), 1e-8, 0.05);
        let lr = 1e-2;
        opt.step(&mut p, &grads(), lr).unwrap();
        let w = p.get("w").unwrap().data();
        let want = 1.0 * (1.0 - lr * 0.05) - lr * 0.3 / (0.3 + 1e-8);
        assert!((w[0] as f64 - want).abs() < 1e-6);
        // biases are not decayed
        let b = p.get("b").unwrap().data();
        assert!((b[0] as f64 - (0.1 - lr)).abs() < 1e-6);
        assert_eq!(w[2], 0.5 * (1.0 - (lr * 0.05) as f32));
    }

    #[test]
    fn state_round_trip() {
        let mut p = store();
        let mut opt = AdamW::new((0.9, 0.95), 1e-8, 0.05);
        opt.step(&mut p, &grads(), 1e-3).unwrap();
        let mut other = AdamW::new((0.9, 0.95), 1e-8, 0.05);
        other.load_state_tensors(&opt.state_tensors(), opt.t);
        assert_eq!(other, opt);
    }
}
