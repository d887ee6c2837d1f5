//! `imlvit` command-line tool: training, evaluation, prediction, robustness
//! sweeps, edge-mask inspection, plots and synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use imlvit::data::{
    decode_mask, generate_dataset, load_image, load_manifest, save_gray_png, save_mask_png, DatasetManifest, Sample,
    Split, SynthOptions,
};
use imlvit::metrics::{evaluate_dataset, predict_sample};
use imlvit::model::{load_pretrained, ImlVit, ModelConfig, PYRAMID_STRIDES};
use imlvit::morphology::{edge_mask, pick_k};
use imlvit::padding::pad_to_canvas;
use imlvit::robustness::{sweep, AttackKind, AttackSpec, RobustnessCurve};
use imlvit::train::{FitOptions, RunConfig, Trainer};
use imlvit::{viz, Error, Result};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "imlvit", version, about = "Image manipulation localization with a plain ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest and write a JSON report.
    Eval(EvalArgs),
    /// Predict one image and write probability, mask, overlay and feature maps.
    Predict(PredictArgs),
    /// Sweep a JPEG or blur attack over a dataset.
    Attack(AttackArgs),
    /// Compute the boundary band of a mask PNG.
    EdgeMask(EdgeMaskArgs),
    /// Render a robustness curve or an image's feature maps.
    Viz(VizArgs),
    /// Generate a synthetic tampering dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON config file (keys mirror the run config).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override as `dotted.key=json`, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Model preset applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    /// Edge-loss weight; same as `--set loss.lambda=<v>`.
    #[arg(long)]
    edge_lambda: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training manifest (JSONL).
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest; defaults to the test split of `--manifest`.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Output directory for `best/`, `last/` and the run history.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint whose encoder weights initialize the model.
    #[arg(long)]
    init_ckpt: Option<PathBuf>,
    /// Continue from `<out>/last`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// `jpeg` or `gaussian_blur`.
    #[arg(long)]
    kind: AttackKind,
    /// Comma-separated strengths; defaults depend on the kind.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<f64>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Curve path (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct EdgeMaskArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Band half-width; picked from the mask size when omitted.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct VizArgs {
    /// Robustness curve JSON to plot.
    #[arg(long, conflicts_with_all = ["ckpt", "image"])]
    curve: Option<PathBuf>,
    /// Checkpoint for feature-map rendering (with `--image`).
    #[arg(long, requires = "image")]
    ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    image: Option<PathBuf>,
    /// PNG path for a curve, directory for feature maps.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 640)]
    width: u32,
    #[arg(long, default_value_t = 400)]
    height: u32,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Image side length.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Leading images left authentic.
    #[arg(long, default_value_t = 0)]
    authentic: usize,
    /// Every n-th image goes to the test split (0: none).
    #[arg(long, default_value_t = 4)]
    test_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    overwrite: bool,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} not found", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} not found", path.display())))
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `overwrite`.
fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.is_file() {
        return Err(invalid(format!("{} is a file, expected a directory", dir.display())));
    }
    let non_empty = dir.is_dir() && fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
    if non_empty && !overwrite {
        return Err(invalid(format!("{} is not empty; pass --overwrite to replace its outputs", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Checks a file output and creates its parent directory.
fn prepare_file(path: &Path, overwrite: bool) -> Result<()> {
    if path.is_dir() {
        return Err(invalid(format!("{} is a directory, expected a file path", path.display())));
    }
    if path.exists() && !overwrite {
        return Err(invalid(format!("{} exists; pass --overwrite to replace it", path.display())));
    }
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| io_err(p, e)),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// `out.json` → `out.config.json`, next to a file output.
fn config_sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.config.json"))
}

fn echo_config(path: &Path, command: &str, body: Value) -> Result<()> {
    let mut v = json!({ "command": command, "version": env!("CARGO_PKG_VERSION") });
    if let (Some(obj), Value::Object(extra)) = (v.as_object_mut(), body) {
        obj.extend(extra);
    }
    write_json(path, v)
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, val) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, val, out);
            }
        }
        _ => out.push(format!("{prefix}={v}")),
    }
}

/// Defaults, then preset, then config file, then `--set`, then `--edge-lambda`.
fn effective_run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &args.preset {
        cfg.model = ModelConfig::preset(p)?;
    }
    if let Some(path) = &args.config {
        require_file(path, "config file")?;
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !v.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        let mut pairs = Vec::new();
        flatten("", &v, &mut pairs);
        cfg = cfg.with_overrides(&pairs)?;
    }
    cfg = cfg.with_overrides(&args.overrides)?;
    if let Some(l) = args.edge_lambda {
        cfg.loss.lambda = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(manifest: &DatasetManifest, split: SplitArg) -> Result<Vec<Sample>> {
    match split {
        SplitArg::All => manifest.load_all(),
        SplitArg::Train => manifest.load_split(Split::Train),
        SplitArg::Test => manifest.load_split(Split::Test),
    }
}

fn open_manifest(path: &Path) -> Result<DatasetManifest> {
    require_file(path, "manifest")?;
    load_manifest(path)
}

fn open_checkpoint(dir: &Path) -> Result<ImlVit> {
    require_dir(dir, "checkpoint")?;
    Ok(ImlVit::load(dir)?.0)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = effective_run_config(&a.cfg)?;
    let manifest = open_manifest(&a.manifest)?;
    let (train, val) = match &a.val_manifest {
        Some(v) => {
            let train = if manifest.split(Split::Train).is_empty() {
                manifest.load_all()?
            } else {
                manifest.load_split(Split::Train)?
            };
            (train, open_manifest(v)?.load_all()?)
        }
        None => (manifest.load_split(Split::Train)?, manifest.load_split(Split::Test)?),
    };
    if train.is_empty() || val.is_empty() {
        return Err(invalid(format!(
            "need non-empty training and validation sets, got {} and {} images",
            train.len(),
            val.len()
        )));
    }
    let mut trainer = if a.resume {
        let last = a.out.join("last");
        require_dir(&last, "resume checkpoint")?;
        Trainer::resume(&last, cfg.train.clone(), cfg.loss.clone(), cfg.augment.clone())?
    } else {
        prepare_dir(&a.out, a.overwrite)?;
        let mut model = ImlVit::new(cfg.model.clone(), cfg.train.seed)?;
        if let Some(init) = &a.init_ckpt {
            require_dir(init, "initial checkpoint")?;
            let report = load_pretrained(init, &mut model)?;
            write_json(&a.out.join("pretrained_load.json"), serde_json::to_value(&report)?)?;
        }
        Trainer::new(model, cfg.train.clone(), cfg.loss.clone(), cfg.augment.clone())?
    };
    echo_config(
        &a.out.join("effective_config.json"),
        "train",
        json!({
            "manifest": a.manifest,
            "val_manifest": a.val_manifest,
            "init_ckpt": a.init_ckpt,
            "resume": a.resume,
            "run": cfg,
        }),
    )?;
    eprintln!("training on {} images, validating on {}", train.len(), val.len());
    let opts = FitOptions {
        out_dir: Some(a.out.clone()),
        halt_after_epoch: None,
    };
    let report = trainer.fit(&train, &val, &opts, &mut |r| {
        eprintln!(
            "epoch {:>4}  step {:>6}  lr {:.3e}  loss {:.4} (seg {:.4}, edge {:.4})  val F1 {:.4}",
            r.epoch, r.steps, r.lr, r.train_loss.total, r.train_loss.seg, r.train_loss.edge, r.val_f1
        )
    })?;
    write_json(&a.out.join("history.json"), serde_json::to_value(&report.state.history)?)?;
    println!(
        "{}",
        json!({
            "best_f1": report.state.best_f1,
            "best_epoch": report.state.best_epoch,
            "steps": report.state.step,
            "stopped_early": report.stopped_early,
        })
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(invalid(format!("threshold {} outside [0, 1]", a.threshold)));
    }
    prepare_file(&a.report, a.overwrite)?;
    let model = open_checkpoint(&a.ckpt)?;
    let manifest = open_manifest(&a.manifest)?;
    let samples = load_split(&manifest, a.split)?;
    let name = a.manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = evaluate_dataset(&model, &samples, &name, a.threshold)?;
    write_json(&a.report, serde_json::to_value(&report)?)?;
    echo_config(
        &config_sidecar(&a.report),
        "eval",
        json!({
            "ckpt": a.ckpt,
            "manifest": a.manifest,
            "split": format!("{:?}", a.split).to_lowercase(),
            "threshold": a.threshold,
            "model": model.cfg,
        }),
    )?;
    println!("{}", json!({"dataset": report.dataset, "n_images": report.n_images, "f1": report.f1, "auc": report.auc}));
    Ok(())
}

/// File names written by `predict`, in order.
fn predict_file_names() -> Vec<String> {
    let mut names: Vec<String> = ["prob.png", "mask.png", "overlay.png", "feat_vit.png"].map(String::from).to_vec();
    names.extend(PYRAMID_STRIDES.iter().map(|s| format!("feat_sfpn_s{s}.png")));
    names
}

fn render_features(model: &ImlVit, image: &imlvit::Tensor<f32>, out: &Path) -> Result<()> {
    let padded = pad_to_canvas(&Sample::authentic(image.clone(), "input")?, model.cfg.canvas)?;
    let (ge, pyramid) = model.features(&padded.image)?;
    viz::save_gray(&viz::visualize_feature_map(&ge)?, &out.join("feat_vit.png"))?;
    for (fm, s) in pyramid.maps.iter().zip(PYRAMID_STRIDES) {
        viz::save_gray(&viz::visualize_feature_map(fm)?, &out.join(format!("feat_sfpn_s{s}.png")))?;
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(invalid(format!("threshold {} outside [0, 1]", a.threshold)));
    }
    require_file(&a.image, "image")?;
    prepare_dir(&a.out, a.overwrite)?;
    let model = open_checkpoint(&a.ckpt)?;
    let image = load_image(&a.image)?;
    let sample = Sample::authentic(image.clone(), a.image.display().to_string())?;
    let prob = predict_sample(&model, &sample)?;
    save_gray_png(&prob, &a.out.join("prob.png"))?;
    save_mask_png(&prob.map(|p| p as f64 >= a.threshold), &a.out.join("mask.png"))?;
    viz::save_rgb(&viz::overlay(&image, &prob, a.threshold)?, &a.out.join("overlay.png"))?;
    render_features(&model, &image, &a.out)?;
    echo_config(
        &a.out.join("effective_config.json"),
        "predict",
        json!({
            "ckpt": a.ckpt,
            "image": a.image,
            "threshold": a.threshold,
            "files": predict_file_names(),
            "model": model.cfg,
        }),
    )?;
    println!("wrote {} files to {}", predict_file_names().len(), a.out.display());
    Ok(())
}

fn attack(a: AttackArgs) -> Result<()> {
    let spec = if a.levels.is_empty() {
        AttackSpec::default_for(a.kind)
    } else {
        AttackSpec {
            kind: a.kind,
            levels: a.levels.clone(),
        }
    };
    spec.validate()?;
    prepare_file(&a.out, a.overwrite)?;
    let model = open_checkpoint(&a.ckpt)?;
    let samples = load_split(&open_manifest(&a.manifest)?, a.split)?;
    if samples.is_empty() {
        return Err(invalid(format!("{} has no images in the selected split", a.manifest.display())));
    }
    let curve = sweep(&model, &samples, &spec)?;
    write_json(&a.out, serde_json::to_value(&curve)?)?;
    echo_config(
        &config_sidecar(&a.out),
        "attack",
        json!({
            "ckpt": a.ckpt,
            "manifest": a.manifest,
            "split": format!("{:?}", a.split).to_lowercase(),
            "spec": spec,
            "model": model.cfg,
        }),
    )?;
    for p in &curve.points {
        println!("level {:>6}  F1 {:.4}", p.level, p.f1);
    }
    println!("baseline F1 {:.4}", curve.baseline_f1);
    Ok(())
}

fn edge(a: EdgeMaskArgs) -> Result<()> {
    require_file(&a.input, "mask")?;
    if a.k == Some(0) {
        return Err(invalid("k must be at least 1"));
    }
    prepare_file(&a.out, a.overwrite)?;
    let mask = decode_mask(&a.input)?;
    let k = a.k.unwrap_or_else(|| pick_k(&mask));
    let band = edge_mask(&mask, k)?;
    save_mask_png(&band.data, &a.out)?;
    echo_config(
        &config_sidecar(&a.out),
        "edge-mask",
        json!({ "in": a.input, "k": k, "band_pixels": band.data.count_true() }),
    )?;
    println!("k = {k}, {} band pixels", band.data.count_true());
    Ok(())
}

fn viz_cmd(a: VizArgs) -> Result<()> {
    match (&a.curve, &a.ckpt, &a.image) {
        (Some(curve), None, None) => {
            require_file(curve, "curve")?;
            if a.width < 64 || a.height < 64 {
                return Err(invalid("plot must be at least 64x64"));
            }
            prepare_file(&a.out, a.overwrite)?;
            let text = fs::read_to_string(curve).map_err(|e| io_err(curve, e))?;
            let c: RobustnessCurve = serde_json::from_str(&text)?;
            viz::save_rgb(&viz::render_curve(&c, a.width, a.height), &a.out)?;
            echo_config(
                &config_sidecar(&a.out),
                "viz",
                json!({ "curve": curve, "width": a.width, "height": a.height }),
            )
        }
        (None, Some(ckpt), Some(image)) => {
            require_file(image, "image")?;
            prepare_dir(&a.out, a.overwrite)?;
            let model = open_checkpoint(ckpt)?;
            render_features(&model, &load_image(image)?, &a.out)?;
            echo_config(
                &a.out.join("effective_config.json"),
                "viz",
                json!({ "ckpt": ckpt, "image": image, "model": model.cfg }),
            )
        }
        _ => Err(invalid("viz needs either --curve or both --ckpt and --image")),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    prepare_dir(&a.out, a.overwrite)?;
    let opts = SynthOptions {
        n: a.n,
        height: a.size,
        width: a.size,
        authentic: a.authentic,
        test_every: a.test_every,
        seed: a.seed,
    };
    let manifest = generate_dataset(&a.out, &opts)?;
    echo_config(&a.out.join("effective_config.json"), "synth", json!({ "options": opts }))?;
    println!("{}", serde_json::to_string(&manifest.counts())?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Attack(a) => attack(a),
        Command::EdgeMask(a) => edge(a),
        Command::Viz(a) => viz_cmd(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
