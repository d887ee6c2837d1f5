use std::collections::BTreeMap;

use imlvit::autograd::ParamStore;
use imlvit::data::synth::synthetic_samples;
use imlvit::data::{Sample, SynthOptions};
use imlvit::loss::LossConfig;
use imlvit::model::checkpoint::{self, apply_pretrained, read_meta, TensorKind};
use imlvit::model::{build_pyramid, encode, load_pretrained, predict, upsample_full, ImlVit, ModelConfig, NormKind};
use imlvit::train::{compute_gradient, Batch};
use imlvit::{Error, Rng, Tensor};

fn tiny(norm: NormKind) -> ModelConfig {
    let mut c = ModelConfig::toy();
    c.canvas = (64, 64);
    c.embed_dim = 16;
    c.depth = 2;
    c.num_heads = 2;
    c.window_size = 2;
    c.global_block_indexes = vec![1];
    c.pyramid_dim = 8;
    c.head.decoder_dim = 8;
    c.head.norm_kind = norm;
    c
}

fn samples(n: usize, side: usize) -> Vec<Sample> {
    let opts = SynthOptions {
        n,
        height: side,
        width: side,
        authentic: 0,
        test_every: 0,
        seed: 8,
    };
    synthetic_samples(&opts).unwrap().into_iter().map(|s| s.0).collect()
}

fn image(side: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(&[3, side, side], |_| rng.uniform() as f32)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = ImlVit::new(tiny(NormKind::Batch), 3).unwrap();
    let mut state = BTreeMap::new();
    state.insert("adam.m.pos_embed".to_string(), Tensor::from_fn(&[5], |i| i as f32 * 0.25 - 1.0));
    let extra = serde_json::json!({"note": "round trip", "step": 7});
    checkpoint::save(dir.path(), Some(&model.cfg), &model.params, &state, extra.clone()).unwrap();

    let meta = read_meta(dir.path()).unwrap();
    assert_eq!(meta.format_version, 1);
    assert!(meta.tensors.iter().any(|t| t.kind == TensorKind::Buffer));
    assert!(meta.tensors.iter().any(|t| t.kind == TensorKind::State));

    let (back, ck) = ImlVit::load(dir.path()).unwrap();
    assert_eq!(back.cfg, model.cfg);
    assert_eq!(back.params, model.params);
    assert_eq!(ck.state, state);
    assert_eq!(ck.extra, extra);
    let img = image(64, 1);
    let (a, b) = (model.predict_logits(&img).unwrap(), back.predict_logits(&img).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    // overwriting leaves a loadable checkpoint and no staging directory behind
    let other = ImlVit::new(tiny(NormKind::Batch), 4).unwrap();
    other.save(dir.path()).unwrap();
    assert_eq!(ImlVit::load(dir.path()).unwrap().0.params, other.params);
    let parent = dir.path().parent().unwrap();
    let stray = std::fs::read_dir(parent)
        .unwrap()
        .filter_map(|e| e.ok())
        .any(|e| e.file_name().to_string_lossy().ends_with(".partial"));
    assert!(!stray);
}

#[test]
fn load_rejects_mismatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let model = ImlVit::new(tiny(NormKind::Batch), 0).unwrap();
    let mut cfg = model.cfg.clone();
    cfg.embed_dim = 32;
    checkpoint::save(dir.path(), Some(&cfg), &model.params, &BTreeMap::new(), serde_json::Value::Null).unwrap();
    assert!(matches!(ImlVit::load(dir.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn pretrained_encoder_loads_with_resampling_and_extras() {
    let dir = tempfile::tempdir().unwrap();
    let mut src_cfg = tiny(NormKind::Batch);
    src_cfg.canvas = (128, 128);
    let src = ImlVit::new(src_cfg, 11).unwrap();
    let mut store = ParamStore::new();
    for (name, t) in src.params.params() {
        if !(name.starts_with("sfpn.") || name.starts_with("head.")) {
            store.insert(name.clone(), t.clone());
        }
    }
    store.insert("decoder.mask_token", Tensor::zeros(&[1, 1, 16]));
    checkpoint::save(dir.path(), None, &store, &BTreeMap::new(), serde_json::Value::Null).unwrap();

    let mut model = ImlVit::new(tiny(NormKind::Batch), 12).unwrap();
    let init = model.params.clone();
    let report = load_pretrained(dir.path(), &mut model).unwrap();
    assert_eq!(report.ignored, vec!["decoder.mask_token".to_string()]);
    assert_eq!(report.pos_embed_resampled, Some(((8, 8), (4, 4))));
    assert!(report.copied.iter().any(|n| n == "blocks.0.attn.qkv.weight"));
    assert!(!report.initialized.is_empty());
    assert!(report.initialized.iter().all(|n| n.starts_with("sfpn.") || n.starts_with("head.")));
    assert_eq!(model.params.get("pos_embed").unwrap().shape(), &[1, 16, 16]);
    for n in &report.initialized {
        assert_eq!(model.params.get(n).unwrap(), init.get(n).unwrap());
    }
    assert_eq!(
        model.params.get("blocks.1.mlp.fc2.weight").unwrap(),
        src.params.get("blocks.1.mlp.fc2.weight").unwrap()
    );
    assert!(model.predict_proba(&image(64, 2)).unwrap().data().iter().all(|v| v.is_finite()));
}

#[test]
fn pretrained_without_encoder_tensor_fails() {
    let src = ImlVit::new(tiny(NormKind::Batch), 1).unwrap();
    let mut store = ParamStore::new();
    for (name, t) in src.params.params() {
        if name != "blocks.0.norm1.weight" {
            store.insert(name.clone(), t.clone());
        }
    }
    let mut model = ImlVit::new(tiny(NormKind::Batch), 2).unwrap();
    let err = apply_pretrained(&store, &mut model).unwrap_err();
    assert!(err.to_string().contains("blocks.0.norm1.weight"), "{err}");
}

#[test]
fn pyramid_branches_are_independent() {
    let cfg = tiny(NormKind::Batch);
    let mut model = ImlVit::new(cfg.clone(), 5).unwrap();
    let img = image(64, 3);
    let ge = encode(&model.params, &img, &cfg).unwrap();
    let before = build_pyramid(&model.params, &ge, &cfg).unwrap();
    let names: Vec<String> = model.params.with_prefix("sfpn.scale2.").map(|(n, _)| n.clone()).collect();
    assert!(!names.is_empty());
    for n in names {
        model.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 0.1);
    }
    let after = build_pyramid(&model.params, &ge, &cfg).unwrap();
    for j in 0..5 {
        let same = before.maps[j].data == after.maps[j].data;
        assert_eq!(same, j != 1, "level {j}");
    }
}

#[test]
fn every_parameter_gets_a_gradient() {
    let data = samples(2, 64);
    for norm in [NormKind::Layer, NormKind::Batch] {
        let model = ImlVit::new(tiny(norm), 6).unwrap();
        let batch = Batch::from_samples(&data, model.cfg.canvas, None).unwrap();
        let g = compute_gradient(&model, &batch, &LossConfig::default()).unwrap();
        for (name, p) in model.params.params() {
            let gr = g.grads.get(name).unwrap_or_else(|| panic!("{norm:?}: no gradient for {name}"));
            assert_eq!(gr.shape(), p.shape(), "{name}");
            assert!(gr.data().iter().all(|v| v.is_finite()), "{name}");
            let peak = gr.data().iter().fold(0f32, |m, v| m.max(v.abs()));
            if norm == NormKind::Batch && name == "head.fuse.bias" {
                // batch statistics cancel a per-channel shift exactly
                assert!(peak < 1e-6, "{name}: {peak}");
            } else {
                assert!(peak > 0.0, "{norm:?}: zero gradient for {name}");
            }
        }
        if norm == NormKind::Batch {
            assert_eq!(g.bn_updates.len(), 1);
        }
    }
}

#[test]
fn zero_prediction_weights_give_constant_bias() {
    let cfg = tiny(NormKind::Batch);
    let mut model = ImlVit::new(cfg.clone(), 9).unwrap();
    model.params.get_mut("head.pred.weight").unwrap().data_mut().fill(0.0);
    model.params.get_mut("head.pred.bias").unwrap().data_mut()[0] = -1.25;
    let img = image(64, 4);
    let (_, pyr) = model.features(&img).unwrap();
    let logits = predict(&model.params, &pyr, &cfg).unwrap();
    assert_eq!(logits.shape(), &[1, 16, 16]);
    assert!(logits.data().iter().all(|&v| v == -1.25));
    let p = model.predict_proba(&img).unwrap();
    let want = 1.0 / (1.0 + 1.25f32.exp());
    assert!(p.data().iter().all(|&v| (v - want).abs() < 1e-7));
}

#[test]
fn batched_forward_matches_single_images() {
    let cfg = tiny(NormKind::Layer);
    let model = ImlVit::new(cfg, 10).unwrap();
    let data = samples(3, 64);
    let batch = Batch::from_samples(&data, model.cfg.canvas, None).unwrap();
    let mut ctx = imlvit::autograd::Ctx::eval(&model.params);
    let out = model.forward(&mut ctx, &batch.images).unwrap();
    let plane = 64 * 64;
    for (i, s) in data.iter().enumerate() {
        let single = model.predict_logits(&s.image).unwrap();
        let rows = &out.full.value().data()[i * plane..(i + 1) * plane];
        let d = single.data().iter().zip(rows).fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(d < 1e-4, "image {i}: {d}");
    }
}

#[test]
fn upsampling_keeps_interior_ramps() {
    let t = Tensor::from_fn(&[1, 6, 6], |i| (i % 6) as f32 * 2.0 + 1.0);
    let up = upsample_full(&t).unwrap();
    assert_eq!(up.shape(), &[1, 24, 24]);
    // away from the clamped borders, columns step by 0.5 per output pixel
    for y in 0..24 {
        for x in 2..21 {
            let d = up.data()[y * 24 + x + 1] - up.data()[y * 24 + x];
            assert!((d - 0.5).abs() < 1e-5, "({y},{x}): {d}");
        }
    }
    // 4x4 means of the upsampled ramp recover the original samples
    for y in 0..6 {
        for x in 1..5 {
            let mut s = 0.0;
            for dy in 0..4 {
                for dx in 0..4 {
                    s += up.data()[(4 * y + dy) * 24 + 4 * x + dx];
                }
            }
            assert!((s / 16.0 - t.data()[y * 6 + x]).abs() < 1e-5);
        }
    }
}
