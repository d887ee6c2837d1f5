use super::config::TrainConfig;

/// Learning rate at a (fractional) epoch: linear warmup from 0 to `base_lr`,
/// then a half-cosine from `base_lr` down to `min_lr` at `epochs`.
pub fn lr_schedule(epoch: f64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs as f64;
    if epoch < warm {
        return cfg.base_lr * epoch / warm;
    }
    let span = cfg.epochs as f64 - warm;
    let progress = if span > 0.0 {
        ((epoch - warm) / span).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let w = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.base_lr * w + cfg.min_lr * (1.0 - w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0.0, &c), 0.0);
        assert_eq!(lr_schedule(4.0, &c), 1e-4);
        assert_eq!(lr_schedule(200.0, &c), 5e-7);
        assert_eq!(lr_schedule(2.0, &c), 5e-5);
        let mid = lr_schedule(102.0, &c);
        assert!((mid - (1e-4 + 5e-7) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn no_warmup() {
        let c = TrainConfig {
            warmup_epochs: 0,
            epochs: 10,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0.0, &c), c.base_lr);
        assert_eq!(lr_schedule(10.0, &c), c.min_lr);
    }
}
