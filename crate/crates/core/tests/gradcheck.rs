//! Finite-difference checks of every differentiable op.

use std::sync::Arc;

use imlvit::autograd::{gather_index, BnStats, Graph, ResizeGeom, Var};
use imlvit::{Rng, Tensor};

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn rand_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| (rng.normal() * scale) as f32)
}

fn probe(out: &Var, r: &[f32]) -> f64 {
    out.data().iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn check(name: &str, inputs: Vec<Tensor<f32>>, f: &Build, tol: f64) {
    let mut rng = Rng::new(99);
    let mut g = Graph::new(true);
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &leaves);
    let r: Vec<f32> = (0..out.len()).map(|_| rng.normal() as f32).collect();
    let loss = g.scalar_with_grad(&out, probe(&out, &r) as f32, r.clone()).unwrap();
    let grads = g.backward(&loss).unwrap();

    let h = 1e-2f32;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(&leaves[k]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        for i in 0..t.len() {
            let eval = |delta: f32| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, u)| {
                        let mut u = u.clone();
                        if j == k {
                            u.data_mut()[i] += delta;
                        }
                        Var::constant(u)
                    })
                    .collect();
                let mut g2 = Graph::new(false);
                probe(&f(&mut g2, &vars), &r)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h as f64);
            let a = analytic[i] as f64;
            let err = (a - numeric).abs() / (1.0 + numeric.abs());
            assert!(err < tol, "{name}: input {k}[{i}] analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn linear_with_bias() {
    let mut rng = Rng::new(1);
    let ins = vec![
        rand_tensor(&[5, 4], &mut rng, 1.0),
        rand_tensor(&[3, 4], &mut rng, 1.0),
        rand_tensor(&[3], &mut rng, 1.0),
    ];
    check("linear", ins, &|g, v| g.linear(&v[0], &v[1], Some(&v[2])).unwrap(), 1e-2);
}

#[test]
fn add_and_broadcast() {
    let mut rng = Rng::new(2);
    let ins = vec![
        rand_tensor(&[6, 3], &mut rng, 1.0),
        rand_tensor(&[6, 3], &mut rng, 1.0),
        rand_tensor(&[2, 3], &mut rng, 1.0),
    ];
    check(
        "add",
        ins,
        &|g, v| {
            let s = g.add(&v[0], &v[1]).unwrap();
            g.add_broadcast(&s, &v[2]).unwrap()
        },
        1e-2,
    );
}

#[test]
fn layer_norm() {
    let mut rng = Rng::new(3);
    let ins = vec![
        rand_tensor(&[4, 6], &mut rng, 1.0),
        rand_tensor(&[6], &mut rng, 1.0),
        rand_tensor(&[6], &mut rng, 1.0),
    ];
    check("layer_norm", ins, &|g, v| g.layer_norm(&v[0], &v[1], &v[2], 1e-6).unwrap(), 2e-2);
}

#[test]
fn batch_norm_batch_stats() {
    let mut rng = Rng::new(4);
    let ins = vec![
        rand_tensor(&[7, 3], &mut rng, 1.0),
        rand_tensor(&[3], &mut rng, 1.0),
        rand_tensor(&[3], &mut rng, 1.0),
    ];
    check(
        "batch_norm",
        ins,
        &|g, v| g.batch_norm(&v[0], &v[1], &v[2], BnStats::Batch, 1e-5).unwrap().0,
        2e-2,
    );
}

#[test]
fn batch_norm_running_stats() {
    let mut rng = Rng::new(5);
    let ins = vec![
        rand_tensor(&[5, 3], &mut rng, 1.0),
        rand_tensor(&[3], &mut rng, 1.0),
        rand_tensor(&[3], &mut rng, 1.0),
    ];
    check(
        "batch_norm_running",
        ins,
        &|g, v| {
            let stats = BnStats::Running {
                mean: &[0.1, -0.2, 0.3],
                var: &[1.5, 0.5, 2.0],
            };
            g.batch_norm(&v[0], &v[1], &v[2], stats, 1e-5).unwrap().0
        },
        1e-2,
    );
}

#[test]
fn gelu_and_relu() {
    let mut rng = Rng::new(6);
    // keep relu inputs away from the kink
    let x = Tensor::from_fn(&[4, 5], |i| {
        let v = rng.normal() as f32;
        if v.abs() < 0.1 {
            0.5 + i as f32 * 0.01
        } else {
            v
        }
    });
    check(
        "gelu_relu",
        vec![x],
        &|g, v| {
            let a = g.gelu(&v[0]).unwrap();
            let b = g.relu(&v[0]).unwrap();
            g.add(&a, &b).unwrap()
        },
        1e-2,
    );
}

#[test]
fn gather_and_concat() {
    let mut rng = Rng::new(7);
    let ins = vec![rand_tensor(&[4, 3], &mut rng, 1.0), rand_tensor(&[6, 2], &mut rng, 1.0)];
    let idx = gather_index([Some(2), None, Some(0), Some(2), Some(3), Some(1)]);
    check(
        "gather_concat",
        ins,
        &move |g, v| {
            let a = g.gather_rows(&v[0], Arc::clone(&idx)).unwrap();
            g.concat_cols(&[a, v[1].clone()]).unwrap()
        },
        1e-2,
    );
}

#[test]
fn attention_global() {
    let mut rng = Rng::new(8);
    let ins = vec![rand_tensor(&[2 * 5, 3 * 4], &mut rng, 0.7)];
    check("attention", ins, &|g, v| g.attention(&v[0], 5, 2, None).unwrap(), 2e-2);
}

#[test]
fn attention_masked_keys() {
    let mut rng = Rng::new(9);
    let ins = vec![rand_tensor(&[2 * 4, 3 * 4], &mut rng, 0.7)];
    let mask = Arc::new(vec![true, true, false, true, true, false, false, true]);
    check(
        "attention_masked",
        ins,
        &move |g, v| g.attention(&v[0], 4, 2, Some(Arc::clone(&mask))).unwrap(),
        2e-2,
    );
}

#[test]
fn conv3x3_and_1x1() {
    let mut rng = Rng::new(10);
    let (n, h, w, cin, cout) = (2, 3, 4, 2, 3);
    let ins = vec![
        rand_tensor(&[n * h * w, cin], &mut rng, 1.0),
        rand_tensor(&[cout, 9 * cin], &mut rng, 0.5),
        rand_tensor(&[cout], &mut rng, 1.0),
        rand_tensor(&[cout, cin], &mut rng, 0.5),
    ];
    check(
        "conv",
        ins,
        &move |g, v| {
            let a = g.conv2d(&v[0], &v[1], Some(&v[2]), n, h, w, 3).unwrap();
            let b = g.conv2d(&v[0], &v[3], None, n, h, w, 1).unwrap();
            g.add(&a, &b).unwrap()
        },
        2e-2,
    );
}

#[test]
fn max_pool() {
    // distinct values so the argmax is stable under the probe step
    let mut order: Vec<usize> = (0..2 * 4 * 4 * 2).collect();
    Rng::new(11).shuffle(&mut order);
    let x = Tensor::from_vec(&[32, 2], order.iter().map(|&i| i as f32 * 0.1).collect()).unwrap();
    check("max_pool", vec![x], &|g, v| g.max_pool2(&v[0], 2, 4, 4).unwrap(), 1e-2);
}

#[test]
fn resize_up_and_down() {
    let mut rng = Rng::new(12);
    let ins = vec![rand_tensor(&[2 * 3 * 4, 2], &mut rng, 1.0)];
    check(
        "resize",
        ins,
        &|g, v| {
            let up = ResizeGeom { n: 2, c: 2, h: 3, w: 4, h2: 7, w2: 9 };
            let a = g.resize_bilinear(&v[0], up).unwrap();
            let down = ResizeGeom { n: 2, c: 2, h: 7, w: 9, h2: 2, w2: 3 };
            g.resize_bilinear(&a, down).unwrap()
        },
        1e-2,
    );
}

#[test]
fn reshape_keeps_tracking() {
    let mut rng = Rng::new(13);
    let ins = vec![rand_tensor(&[2, 6], &mut rng, 1.0), rand_tensor(&[3, 4], &mut rng, 1.0)];
    check(
        "reshape",
        ins,
        &|g, v| {
            let x = v[0].reshape(&[4, 3]).unwrap();
            let w = v[1].reshape(&[4, 3]).unwrap();
            g.linear(&x, &w, None).unwrap()
        },
        1e-2,
    );
}
