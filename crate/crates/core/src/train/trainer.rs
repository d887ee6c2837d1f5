use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamW;
use super::schedule::lr_schedule;
use crate::autograd::{BnUpdate, Ctx, Grads};
use crate::data::{augment, AugmentationPolicy, Sample};
use crate::error::{Error, Result};
use crate::loss::{batch_loss, LossConfig, LossParts, Target};
use crate::metrics::{evaluate_dataset, MetricsReport};
use crate::model::{checkpoint, head, stack, ImlVit};
use crate::morphology::pick_k;
use crate::padding::pad_to_canvas;
use crate::tensor::{Rng, Tensor};

pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

/// Padded canvases and their targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub targets: Vec<Target>,
}

impl Batch {
    /// Pads each sample onto the canvas. The band radius is scaled to the
    /// sample's own resolution unless `edge_k` fixes it.
    pub fn from_samples(samples: &[Sample], canvas: (usize, usize), edge_k: Option<usize>) -> Result<Self> {
        let mut images = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            let p = pad_to_canvas(s, canvas)?;
            let k = edge_k.unwrap_or_else(|| pick_k(&s.mask));
            targets.push(Target::new(p.mask, Some(k))?);
            images.push(p.image);
        }
        let refs: Vec<&Tensor<f32>> = images.iter().collect();
        Ok(Batch {
            images: stack(&refs)?,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Loss, parameter gradients and batch-norm observations of one micro-batch.
pub struct Gradient {
    pub parts: LossParts,
    pub grads: Grads,
    pub bn_updates: Vec<BnUpdate>,
}

pub fn compute_gradient(model: &ImlVit, batch: &Batch, loss: &LossConfig) -> Result<Gradient> {
    let mut ctx = Ctx::train(&model.params);
    let out = model.forward(&mut ctx, &batch.images)?;
    let (node, parts) = batch_loss(&mut ctx.graph, &out.full, &batch.targets, loss)?;
    let grads = ctx.backward(&node)?;
    Ok(Gradient {
        parts,
        grads,
        bn_updates: std::mem::take(&mut ctx.bn_updates),
    })
}

/// Mean objective of a batch without recording anything.
pub fn evaluate_loss(model: &ImlVit, batch: &Batch, loss: &LossConfig, train_mode: bool) -> Result<LossParts> {
    let mut ctx = Ctx::new(&model.params, false, train_mode);
    let out = model.forward(&mut ctx, &batch.images)?;
    Ok(batch_loss(&mut ctx.graph, &out.full, &batch.targets, loss)?.1)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub train_loss: LossParts,
    pub val_f1: f64,
    pub val_auc: Option<f64>,
}

/// Counters and bookkeeping persisted with the last checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer updates applied.
    pub step: u64,
    pub micro_step: u64,
    /// Next epoch to run.
    pub epoch: usize,
    pub best_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_best: usize,
    pub history: Vec<EpochRecord>,
    /// Total loss of every micro-batch.
    pub loss_log: Vec<f64>,
}

/// Owns the model and optimizer for a run.
pub struct Trainer {
    pub model: ImlVit,
    pub cfg: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentationPolicy,
    pub opt: AdamW,
    pub state: TrainState,
    pending: Option<Grads>,
    pending_count: usize,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Where `best/` and `last/` checkpoints go.
    pub out_dir: Option<PathBuf>,
    /// Stop (as if interrupted) once this many epochs have completed.
    pub halt_after_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub state: TrainState,
    pub best_report: Option<MetricsReport>,
    pub stopped_early: bool,
}

impl Trainer {
    pub fn new(model: ImlVit, cfg: TrainConfig, loss: LossConfig, augment: AugmentationPolicy) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        let opt = AdamW::new(cfg.betas, cfg.adam_eps, cfg.weight_decay);
        Ok(Trainer {
            model,
            cfg,
            loss,
            augment,
            opt,
            state: TrainState::default(),
            pending: None,
            pending_count: 0,
        })
    }

    /// Restores model, optimizer and counters from a `last` checkpoint.
    pub fn resume(dir: &Path, cfg: TrainConfig, loss: LossConfig, augment: AugmentationPolicy) -> Result<Self> {
        let (model, ck) = ImlVit::load(dir)?;
        let raw = ck.extra.get("train_state").cloned().ok_or_else(|| {
            Error::Checkpoint(format!("{}: no training state to resume from", dir.display()))
        })?;
        let state: TrainState = serde_json::from_value(raw)
            .map_err(|e| Error::Checkpoint(format!("{}: training state: {e}", dir.display())))?;
        let mut t = Trainer::new(model, cfg, loss, augment)?;
        t.opt.load_state_tensors(&ck.state, state.step);
        t.state = state;
        Ok(t)
    }

    /// One micro-batch: accumulate its gradient and apply an update once
    /// `accumulate` micro-batches are pending.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<LossParts> {
        let g = compute_gradient(&self.model, batch, &self.loss)?;
        if !g.parts.is_finite() {
            return Err(Error::NonFinite {
                step: self.state.micro_step as usize,
                total: g.parts.total,
                seg: g.parts.seg,
                edge: g.parts.edge,
            });
        }
        self.state.micro_step += 1;
        self.state.loss_log.push(g.parts.total);
        head::apply_bn_updates(&mut self.model.params, &g.bn_updates)?;
        match &mut self.pending {
            None => self.pending = Some(g.grads),
            Some(acc) => {
                for (name, t) in g.grads {
                    match acc.get_mut(&name) {
                        Some(a) => a.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                        None => {
                            acc.insert(name, t);
                        }
                    }
                }
            }
        }
        self.pending_count += 1;
        if self.pending_count >= self.cfg.accumulate {
            self.flush(lr)?;
        }
        Ok(g.parts)
    }

    /// Applies any pending gradient (averaged over its micro-batches).
    pub fn flush(&mut self, lr: f64) -> Result<bool> {
        let Some(mut acc) = self.pending.take() else {
            return Ok(false);
        };
        let scale = 1.0 / self.pending_count as f32;
        if self.pending_count > 1 {
            for t in acc.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
        self.pending_count = 0;
        self.opt.step(&mut self.model.params, &acc, lr)?;
        self.state.step += 1;
        Ok(true)
    }

    fn steps_left(&self) -> bool {
        self.cfg.max_steps.is_none_or(|m| self.state.step < m as u64)
    }

    /// Augmented micro-batches of one epoch; the draws depend only on the
    /// seed, the epoch and each sample's id.
    pub fn epoch_batches(&self, train: &[Sample], epoch: usize) -> Result<Vec<Batch>> {
        let root = Rng::new(self.cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.derive(&format!("order/{epoch}")).shuffle(&mut order);
        order
            .chunks(self.cfg.micro_batch)
            .map(|idx| {
                let samples = idx
                    .iter()
                    .map(|&i| {
                        let s = &train[i];
                        let mut rng = root.derive(&format!("augment/{epoch}/{}/{i}", s.source_id));
                        augment(s, &self.augment, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Batch::from_samples(&samples, self.model.cfg.canvas, self.cfg.edge_k)
            })
            .collect()
    }

    fn save_last(&self, out: &Path) -> Result<()> {
        let extra = serde_json::json!({
            "train_state": self.state,
            "train_config": self.cfg,
            "loss_config": self.loss,
        });
        checkpoint::save(
            &out.join(LAST_DIR),
            Some(&self.model.cfg),
            &self.model.params,
            &self.opt.state_tensors(),
            extra,
        )
    }

    fn save_best(&self, out: &Path, report: &MetricsReport) -> Result<()> {
        let extra = serde_json::json!({
            "epoch": self.state.best_epoch,
            "val_f1": report.f1,
            "val_auc": report.auc,
        });
        checkpoint::save(
            &out.join(BEST_DIR),
            Some(&self.model.cfg),
            &self.model.params,
            &Default::default(),
            extra,
        )
    }

    /// Epoch loop with validation after every epoch and early stopping.
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        opts: &FitOptions,
        on_epoch: &mut dyn FnMut(&EpochRecord),
    ) -> Result<FitReport> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "need non-empty train and validation splits, got {} and {}",
                train.len(),
                val.len()
            )));
        }
        let mut best_report = None;
        let mut stopped_early = false;
        while self.state.epoch < self.cfg.epochs && self.steps_left() {
            let epoch = self.state.epoch;
            let batches = self.epoch_batches(train, epoch)?;
            let per_epoch = batches.len().div_ceil(self.cfg.accumulate);
            let mut sums = LossParts::default();
            let mut lr = 0.0;
            let mut seen = 0usize;
            for (i, b) in batches.iter().enumerate() {
                if !self.steps_left() {
                    break;
                }
                let update = i / self.cfg.accumulate;
                lr = lr_schedule(epoch as f64 + update as f64 / per_epoch as f64, &self.cfg);
                let p = self.train_step(b, lr)?;
                sums.total += p.total;
                sums.seg += p.seg;
                sums.edge += p.edge;
                seen += 1;
            }
            self.flush(lr)?;
            let report = evaluate_dataset(&self.model, val, "val", self.cfg.threshold)?;
            let n = seen.max(1) as f64;
            let rec = EpochRecord {
                epoch,
                steps: self.state.step,
                lr,
                train_loss: LossParts {
                    total: sums.total / n,
                    seg: sums.seg / n,
                    edge: sums.edge / n,
                },
                val_f1: report.f1,
                val_auc: report.auc,
            };
            self.state.history.push(rec.clone());
            self.state.epoch += 1;
            if self.state.best_f1.is_none_or(|b| report.f1 > b) {
                self.state.best_f1 = Some(report.f1);
                self.state.best_epoch = Some(epoch);
                self.state.epochs_since_best = 0;
                if let Some(out) = &opts.out_dir {
                    self.save_best(out, &report)?;
                }
                best_report = Some(report);
            } else {
                self.state.epochs_since_best += 1;
            }
            if let Some(out) = &opts.out_dir {
                self.save_last(out)?;
            }
            on_epoch(&rec);
            if self.state.epochs_since_best >= self.cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
            if opts.halt_after_epoch.is_some_and(|h| self.state.epoch >= h) {
                break;
            }
        }
        Ok(FitReport {
            state: self.state.clone(),
            best_report,
            stopped_early,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synthetic_samples, SynthOptions};
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.canvas = (64, 64);
        c.embed_dim = 16;
        c.depth = 2;
        c.num_heads = 2;
        c.global_block_indexes = vec![1];
        c.pyramid_dim = 8;
        c.head.decoder_dim = 8;
        c
    }

    fn samples(n: usize) -> Vec<Sample> {
        let opts = SynthOptions {
            n,
            height: 64,
            width: 64,
            authentic: 0,
            test_every: 0,
            seed: 3,
        };
        synthetic_samples(&opts).unwrap().into_iter().map(|s| s.0).collect()
    }

    #[test]
    fn patience_zero_stops_after_one_eval() {
        let data = samples(2);
        let cfg = TrainConfig {
            epochs: 5,
            warmup_epochs: 1,
            accumulate: 1,
            early_stop_patience: 0,
            ..TrainConfig::default()
        };
        let model = ImlVit::new(tiny(), 0).unwrap();
        let mut t = Trainer::new(model, cfg, LossConfig::default(), AugmentationPolicy::identity()).unwrap();
        let r = t.fit(&data, &data, &FitOptions::default(), &mut |_| {}).unwrap();
        assert_eq!(r.state.history.len(), 1);
        assert!(r.stopped_early);
    }

    #[test]
    fn empty_split_is_rejected() {
        let model = ImlVit::new(tiny(), 0).unwrap();
        let mut t = Trainer::new(model, TrainConfig::default(), LossConfig::default(), AugmentationPolicy::identity()).unwrap();
        assert!(t.fit(&[], &samples(1), &FitOptions::default(), &mut |_| {}).is_err());
    }

    #[test]
    fn small_step_lowers_batch_loss() {
        let mut mc = tiny();
        mc.head.norm_kind = crate::model::NormKind::Layer;
        let data = samples(2);
        let batch = Batch::from_samples(&data, mc.canvas, None).unwrap();
        let model = ImlVit::new(mc, 1).unwrap();
        let cfg = TrainConfig {
            accumulate: 1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let loss = LossConfig::default();
        let before = evaluate_loss(&model, &batch, &loss, true).unwrap().total;
        let mut t = Trainer::new(model, cfg, loss.clone(), AugmentationPolicy::identity()).unwrap();
        t.train_step(&batch, 1e-4).unwrap();
        let after = evaluate_loss(&t.model, &batch, &loss, true).unwrap().total;
        assert!(after < before, "{after} >= {before}");
    }
}
