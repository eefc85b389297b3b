//! Portable checkpoints: a directory with `manifest.json` and `weights.bin`.
//!
//! `weights.bin` holds every tensor as little-endian `f32` in row-major
//! order, back to back in manifest order. Values are rounded to `f32` on the
//! way out, so save -> load -> save reproduces both files byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::data::write_atomic;
use crate::denoiser::{AdapterConfig, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::guidance::{ClassifierConfig, SspClassifier};
use crate::schedule::ScheduleSpec;
use crate::training::{AdamW, OptimizerConfig};
use crate::vocab::Vocab;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

const ADAM_M: &str = "optimizer.m.";
const ADAM_V: &str = "optimizer.v.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: u64,
    /// Byte length.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub tensors: BTreeMap<String, TensorInfo>,
}

/// In-memory checkpoint; tensor order is the on-disk order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub tensors: Vec<(String, Array2<f64>)>,
}

fn err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut weights = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, t) in &self.tensors {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
            let offset = weights.len() as u64;
            for &v in t.iter() {
                weights.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let info = TensorInfo {
                dtype: "f32".into(),
                shape: vec![t.nrows(), t.ncols()],
                offset,
                length: weights.len() as u64 - offset,
            };
            if tensors.insert(name.clone(), info).is_some() {
                return Err(Error::InvalidInput(format!("duplicate tensor name {name}")));
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            step: self.step,
            tensors,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        Ok((json, weights))
    }

    /// Writes both files atomically; the manifest goes last.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, weights) = self.encode()?;
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(WEIGHTS), &weights)?;
        write_atomic(&dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let weights_path = dir.join(WEIGHTS);
        let text = std::fs::read(&manifest_path).map_err(|e| err(&manifest_path, e.to_string()))?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| err(&manifest_path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(err(
                &manifest_path,
                format!("unsupported format_version {}", manifest.format_version),
            ));
        }
        let weights = std::fs::read(&weights_path).map_err(|e| err(&weights_path, e.to_string()))?;
        let mut order: Vec<(&String, &TensorInfo)> = manifest.tensors.iter().collect();
        order.sort_by_key(|(_, info)| info.offset);
        let mut cursor = 0u64;
        let mut tensors = Vec::with_capacity(order.len());
        for (name, info) in order {
            if info.dtype != "f32" {
                return Err(err(&manifest_path, format!("{name}: unsupported dtype {}", info.dtype)));
            }
            let [rows, cols] = info.shape[..] else {
                return Err(err(&manifest_path, format!("{name}: expected a 2-d shape")));
            };
            if info.offset != cursor {
                return Err(err(&manifest_path, format!("{name}: byte ranges do not tile {WEIGHTS}")));
            }
            if info.length != (rows * cols * 4) as u64 {
                return Err(err(&manifest_path, format!("{name}: length does not match shape")));
            }
            let end = cursor + info.length;
            let bytes = weights
                .get(cursor as usize..end as usize)
                .ok_or_else(|| err(&weights_path, format!("{name}: truncated")))?;
            let values: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(err(&weights_path, format!("{name}: non-finite value")));
            }
            let t = Array2::from_shape_vec((rows, cols), values).expect("length checked");
            tensors.push((name.clone(), t));
            cursor = end;
        }
        if cursor != weights.len() as u64 {
            return Err(err(&weights_path, format!("{} trailing bytes", weights.len() as u64 - cursor)));
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            step: manifest.step,
            tensors,
        })
    }
}

fn copy_params(ckpt: &Checkpoint, params: &mut ParamStore, source: &Path) -> Result<()> {
    for entry in params.entries_mut() {
        let t = ckpt
            .tensor(&entry.name)
            .ok_or_else(|| err(source, format!("missing tensor {}", entry.name)))?;
        if t.dim() != entry.value.dim() {
            return Err(err(
                source,
                format!("{}: shape {:?}, model expects {:?}", entry.name, t.dim(), entry.value.dim()),
            ));
        }
        entry.value.assign(t);
    }
    Ok(())
}

fn check_no_extra(ckpt: &Checkpoint, params: &ParamStore, prefixes: &[&str], source: &Path) -> Result<()> {
    for (name, _) in &ckpt.tensors {
        let known = params.find(name).is_some()
            || prefixes.iter().any(|p| name.strip_prefix(p).is_some_and(|rest| params.find(rest).is_some()));
        if !known {
            return Err(err(source, format!("unexpected tensor {name}")));
        }
    }
    Ok(())
}

/// Everything needed to rebuild a denoiser around its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserMeta {
    /// Every vocabulary symbol in id order, specials included.
    pub vocab: Vec<String>,
    pub schedule: ScheduleSpec,
    pub model: DenoiserConfig,
    pub adapter: Option<AdapterConfig>,
    pub optimizer: Option<OptimizerConfig>,
    pub optimizer_step: u64,
}

/// A restored denoiser plus whatever travelled with it.
pub struct LoadedDenoiser {
    pub model: Denoiser,
    pub vocab: Vocab,
    pub schedule: ScheduleSpec,
    pub optimizer: Option<AdamW>,
    pub step: u64,
}

pub const DENOISER_KIND: &str = "denoiser";
pub const CLASSIFIER_KIND: &str = "ssp-classifier";

pub fn save_denoiser(
    dir: &Path,
    model: &Denoiser,
    vocab: &Vocab,
    schedule: ScheduleSpec,
    optimizer: Option<&AdamW>,
    step: u64,
) -> Result<()> {
    let meta = DenoiserMeta {
        vocab: vocab.symbols().to_vec(),
        schedule,
        model: model.config().clone(),
        adapter: model.adapter_config().cloned(),
        optimizer: optimizer.map(|o| o.config.clone()),
        optimizer_step: optimizer.map_or(0, |o| o.step),
    };
    let mut tensors: Vec<(String, Array2<f64>)> =
        model.params().entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect();
    if let Some(opt) = optimizer {
        for (prefix, moments) in [(ADAM_M, &opt.m), (ADAM_V, &opt.v)] {
            for (e, m) in model.params().entries().iter().zip(moments) {
                tensors.push((format!("{prefix}{}", e.name), m.clone()));
            }
        }
    }
    Checkpoint {
        kind: DENOISER_KIND.into(),
        config: serde_json::to_value(&meta)?,
        step,
        tensors,
    }
    .save(dir)
}

pub fn load_denoiser(dir: &Path) -> Result<LoadedDenoiser> {
    let ckpt = Checkpoint::load(dir)?;
    let source = dir.join(MANIFEST);
    if ckpt.kind != DENOISER_KIND {
        return Err(err(&source, format!("expected a {DENOISER_KIND} checkpoint, found {}", ckpt.kind)));
    }
    let meta: DenoiserMeta =
        serde_json::from_value(ckpt.config.clone()).map_err(|e| err(&source, format!("config: {e}")))?;
    let vocab = Vocab::new(&meta.vocab)?;
    if vocab.symbols() != meta.vocab.as_slice() {
        return Err(err(&source, "vocabulary does not round-trip"));
    }
    let mut model = Denoiser::new(meta.model.clone(), &vocab, 0)?;
    if let Some(adapter) = &meta.adapter {
        model.attach_adapter(adapter.clone(), 0)?;
    }
    copy_params(&ckpt, model.params_mut(), &source)?;
    check_no_extra(&ckpt, model.params(), &[ADAM_M, ADAM_V], &source)?;
    let optimizer = match meta.optimizer {
        Some(config) => {
            let mut opt = AdamW::new(config, model.params());
            opt.step = meta.optimizer_step;
            for (prefix, moments) in [(ADAM_M, &mut opt.m), (ADAM_V, &mut opt.v)] {
                for (e, m) in model.params().entries().iter().zip(moments.iter_mut()) {
                    let name = format!("{prefix}{}", e.name);
                    let t = ckpt.tensor(&name).ok_or_else(|| err(&source, format!("missing tensor {name}")))?;
                    if t.dim() != m.dim() {
                        return Err(err(&source, format!("{name}: shape mismatch")));
                    }
                    m.assign(t);
                }
            }
            Some(opt)
        }
        None => None,
    };
    Ok(LoadedDenoiser {
        model,
        vocab,
        schedule: meta.schedule,
        optimizer,
        step: ckpt.step,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierMeta {
    pub vocab: Vec<String>,
    pub classifier: ClassifierConfig,
}

pub fn save_classifier(dir: &Path, model: &SspClassifier, vocab: &Vocab) -> Result<()> {
    let meta = ClassifierMeta {
        vocab: vocab.symbols().to_vec(),
        classifier: model.config().clone(),
    };
    Checkpoint {
        kind: CLASSIFIER_KIND.into(),
        config: serde_json::to_value(&meta)?,
        step: 0,
        tensors: model.params().entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect(),
    }
    .save(dir)
}

pub fn load_classifier(dir: &Path) -> Result<(SspClassifier, Vocab)> {
    let ckpt = Checkpoint::load(dir)?;
    let source: PathBuf = dir.join(MANIFEST);
    if ckpt.kind != CLASSIFIER_KIND {
        return Err(err(&source, format!("expected a {CLASSIFIER_KIND} checkpoint, found {}", ckpt.kind)));
    }
    let meta: ClassifierMeta =
        serde_json::from_value(ckpt.config.clone()).map_err(|e| err(&source, format!("config: {e}")))?;
    let vocab = Vocab::new(&meta.vocab)?;
    let mut model = SspClassifier::new(meta.classifier, vocab.size());
    copy_params(&ckpt, model.params_mut(), &source)?;
    check_no_extra(&ckpt, model.params(), &[], &source)?;
    Ok((model, vocab))
}
