//! Checkpoint directories: `meta.json` plus one raw little-endian `f32` blob
//! per tensor under `tensors/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::ImlVit;
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::imageops::resize_bicubic_grid;
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
    /// Anything else the writer wants to persist (optimizer moments, ...).
    State,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: Option<ModelConfig>,
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Everything read back from a checkpoint directory.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Option<ModelConfig>,
    pub extra: serde_json::Value,
    pub params: ParamStore,
    pub state: BTreeMap<String, Tensor<f32>>,
}

fn blob_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes a checkpoint, replacing any previous content of `dir`'s tensor
/// files. The directory is assembled next to `dir` and renamed into place.
pub fn save(
    dir: &Path,
    config: Option<&ModelConfig>,
    params: &ParamStore,
    state: &BTreeMap<String, Tensor<f32>>,
    extra: serde_json::Value,
) -> Result<()> {
    let tmp = tmp_sibling(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let tdir = tmp.join("tensors");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let groups = [
        (TensorKind::Param, params.params()),
        (TensorKind::Buffer, params.buffers()),
        (TensorKind::State, state),
    ];
    let mut tensors = Vec::new();
    for (kind, map) in groups {
        for (name, t) in map {
            let file = format!("{:05}.bin", tensors.len());
            let path = tdir.join(&file);
            fs::write(&path, blob_bytes(t)).map_err(|e| Error::io(&path, e))?;
            tensors.push(TensorEntry {
                name: name.clone(),
                kind,
                shape: t.shape().to_vec(),
                file,
            });
        }
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config: config.cloned(),
        extra,
        tensors,
    };
    let mpath = tmp.join(META_FILE);
    fs::write(&mpath, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&mpath, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let mpath = dir.join(META_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {}",
            mpath.display(),
            meta.format_version
        )));
    }
    Ok(meta)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let meta = read_meta(dir)?;
    let mut params = ParamStore::new();
    let mut state = BTreeMap::new();
    for e in &meta.tensors {
        let path = dir.join("tensors").join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::Checkpoint(format!(
                "{}: {} bytes for tensor {} of shape {:?}",
                path.display(),
                bytes.len(),
                e.name,
                e.shape
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(&e.shape, data)?;
        match e.kind {
            TensorKind::Param => params.insert(e.name.clone(), t),
            TensorKind::Buffer => params.insert_buffer(e.name.clone(), t),
            TensorKind::State => {
                state.insert(e.name.clone(), t);
            }
        }
    }
    Ok(Checkpoint {
        config: meta.config,
        extra: meta.extra,
        params,
        state,
    })
}

/// What [`load_pretrained`] did with each tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub copied: Vec<String>,
    /// Source names with no counterpart in the model, left unused.
    pub ignored: Vec<String>,
    /// Pyramid/head tensors absent from the source, kept at initialization.
    pub initialized: Vec<String>,
    /// `(from, to)` token grids when the position embedding was resampled.
    pub pos_embed_resampled: Option<((usize, usize), (usize, usize))>,
}

fn is_encoder(name: &str) -> bool {
    !(name.starts_with("sfpn.") || name.starts_with("head."))
}

/// Resamples a `[1, T, D]` position table (optionally led by a class token)
/// to `gh × gw` positions with bicubic interpolation.
pub fn resample_pos_embed(src: &Tensor<f32>, gh: usize, gw: usize) -> Result<(Tensor<f32>, (usize, usize))> {
    let (t, d) = match src.shape() {
        &[1, t, d] | &[t, d] => (t, d),
        s => return Err(Error::Checkpoint(format!("pos_embed shape {s:?}"))),
    };
    let side = |n: usize| {
        let s = (n as f64).sqrt().round() as usize;
        (s * s == n && s > 0).then_some(s)
    };
    let (skip, s) = match (side(t), t.checked_sub(1).and_then(side)) {
        (Some(s), _) => (0, s),
        (None, Some(s)) => (1, s),
        _ => {
            return Err(Error::Checkpoint(format!(
                "pos_embed with {t} tokens is not a square grid"
            )))
        }
    };
    let grid = &src.data()[skip * d..];
    let out = if (s, s) == (gh, gw) {
        grid.to_vec()
    } else {
        resize_bicubic_grid(grid, s, s, d, gh, gw)?
    };
    Ok((Tensor::from_vec(&[1, gh * gw, d], out)?, (s, s)))
}

/// Loads encoder weights from a checkpoint into a freshly initialized model.
///
/// Every encoder tensor must be present with a matching shape, except the
/// position embedding, which is resampled to the model's token grid. Pyramid
/// and head tensors are copied when present and shape-compatible.
pub fn load_pretrained(dir: &Path, model: &mut ImlVit) -> Result<LoadReport> {
    let ck = load(dir)?;
    apply_pretrained(&ck.params, model)
}

pub fn apply_pretrained(src: &ParamStore, model: &mut ImlVit) -> Result<LoadReport> {
    let (gh, gw) = model.cfg.grid();
    let mut report = LoadReport::default();
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    let names: Vec<String> = model.params.params().keys().cloned().collect();
    for name in &names {
        let want = model.params.get(name)?.shape().to_vec();
        let Some(t) = src.params().get(name) else {
            if is_encoder(name) {
                missing.push(name.clone());
            } else {
                report.initialized.push(name.clone());
            }
            continue;
        };
        let t = if name == "pos_embed" {
            let (r, from) = resample_pos_embed(t, gh, gw)?;
            if from != (gh, gw) {
                report.pos_embed_resampled = Some((from, (gh, gw)));
            }
            r
        } else if name == "patch_embed.proj.weight" && t.len() == want.iter().product::<usize>() {
            t.reshape(&want)?
        } else {
            t.clone()
        };
        if t.shape() != want.as_slice() {
            if !is_encoder(name) {
                report.initialized.push(name.clone());
                continue;
            }
            mismatched.push(format!("{name}: {:?} vs {:?}", t.shape(), want));
            continue;
        }
        *model.params.get_mut(name).expect("listed above") = t;
        report.copied.push(name.clone());
    }
    for (name, t) in src.buffers() {
        if let Some(b) = model.params.buffer_mut(name) {
            if b.shape() == t.shape() {
                *b = t.clone();
                report.copied.push(name.clone());
            }
        }
    }
    if !missing.is_empty() || !mismatched.is_empty() {
        let mut msg = String::new();
        if !missing.is_empty() {
            msg += &format!("missing tensors: {}", missing.join(", "));
        }
        if !mismatched.is_empty() {
            if !msg.is_empty() {
                msg += "; ";
            }
            msg += &format!("shape mismatches: {}", mismatched.join(", "));
        }
        return Err(Error::Checkpoint(msg));
    }
    report.ignored = src
        .params()
        .keys()
        .chain(src.buffers().keys())
        .filter(|n| model.params.params().get(*n).is_none() && model.params.buffer(n).is_err())
        .cloned()
        .collect();
    Ok(report)
}
