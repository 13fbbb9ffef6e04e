//! Named parameter tensors, their initialization, and the on-disk
//! checkpoint format.
//!
//! A checkpoint directory holds `manifest.json` (array of
//! `{name, shape, dtype: "f32", byte_offset}`) plus `weights.bin`
//! (little-endian f32, contiguous row-major tensors in manifest order).
//! In memory everything stays f64.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::TransformerConfig;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Weight-decay class of a tensor: projections and embeddings decay,
/// biases and layer-norm parameters do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Debug, Clone)]
struct Entry {
    tensor: Tensor,
    kind: ParamKind,
}

/// All trainable tensors, in a stable manifest order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Entry>,
}

/// Gradients aligned with a [`ParamStore`] manifest. Parameters a loss
/// does not reach carry exact zeros.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    pub grads: IndexMap<String, Tensor>,
}

impl GradStore {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    /// Largest absolute gradient entry (diagnostics).
    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

const INIT_SIGMA: f64 = 0.02;

impl ParamStore {
    /// Fresh parameters for a config: truncated normal (sigma 0.02)
    /// projections and embeddings, zero biases and norm offsets, unit
    /// norm gains. Deterministic per seed.
    pub fn init(config: &TransformerConfig, seed: u64) -> Result<Self> {
        Self::init_with_sigma(config, seed, INIT_SIGMA)
    }

    /// Same layout with a caller-chosen init scale. The gradient-check
    /// suite uses a larger sigma so no pathway gradient drowns in the
    /// finite-difference noise floor.
    pub fn init_with_sigma(config: &TransformerConfig, seed: u64, sigma: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::derive(seed, Stream::ParamInit, 0);
        let mut store = ParamStore::default();

        let mut weight = |store: &mut ParamStore, name: String, dims: &[usize]| {
            let mut t = Tensor::zeros(dims);
            for v in t.data_mut() {
                *v = rng::trunc_normal(&mut rng, sigma);
            }
            store.insert(name, t, ParamKind::Weight);
        };
        let bias = |store: &mut ParamStore, name: String, n: usize| {
            store.insert(name, Tensor::zeros(&[n]), ParamKind::Bias);
        };
        let norm = |store: &mut ParamStore, name: &str, n: usize| {
            store.insert(
                format!("{name}.g"),
                Tensor::from_vec(&[n], vec![1.0; n]),
                ParamKind::Norm,
            );
            store.insert(format!("{name}.o"), Tensor::zeros(&[n]), ParamKind::Norm);
        };

        let d = config.d_model;
        let dd = config.d_decoder;
        let grid = config.grid_side();
        let pdim = config.patch_dim();

        weight(&mut store, "embed.cls".into(), &[1, d]);
        weight(&mut store, "embed.modality".into(), &[2, d]);
        for m in ["face", "bio"] {
            weight(&mut store, format!("{m}.proj.w"), &[pdim, d]);
            bias(&mut store, format!("{m}.proj.b"), d);
            weight(&mut store, format!("{m}.pos_row"), &[grid, d]);
            weight(&mut store, format!("{m}.pos_col"), &[grid, d]);
        }
        for i in 0..config.enc_layers {
            Self::init_block(&mut store, &format!("enc.{i}"), d, config.mlp_hidden(d), &mut weight, &bias, &norm);
        }
        weight(&mut store, "dec.bridge.w".into(), &[d, dd]);
        bias(&mut store, "dec.bridge.b".into(), dd);
        weight(&mut store, "dec.mask".into(), &[1, dd]);
        for m in ["face", "bio"] {
            weight(&mut store, format!("dec.{m}.pos_row"), &[grid, dd]);
            weight(&mut store, format!("dec.{m}.pos_col"), &[grid, dd]);
        }
        for i in 0..config.dec_layers {
            Self::init_block(&mut store, &format!("dec.{i}"), dd, config.mlp_hidden(dd), &mut weight, &bias, &norm);
        }
        weight(&mut store, "dec.head.w".into(), &[dd, pdim]);
        bias(&mut store, "dec.head.b".into(), pdim);
        weight(&mut store, "match.w".into(), &[d, 1]);
        bias(&mut store, "match.b".into(), 1);
        if let Some(n_classes) = config.n_classes {
            weight(&mut store, "cls_head.w1".into(), &[d, d]);
            bias(&mut store, "cls_head.b1".into(), d);
            weight(&mut store, "cls_head.w2".into(), &[d, n_classes]);
            bias(&mut store, "cls_head.b2".into(), n_classes);
        }
        Ok(store)
    }

    fn init_block(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        hidden: usize,
        weight: &mut impl FnMut(&mut ParamStore, String, &[usize]),
        bias: &impl Fn(&mut ParamStore, String, usize),
        norm: &impl Fn(&mut ParamStore, &str, usize),
    ) {
        norm(store, &format!("{prefix}.ln1"), width);
        for w in ["wq", "wk", "wv", "wo"] {
            weight(store, format!("{prefix}.attn.{w}"), &[width, width]);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            bias(store, format!("{prefix}.attn.{b}"), width);
        }
        norm(store, &format!("{prefix}.ln2"), width);
        weight(store, format!("{prefix}.mlp.w1"), &[width, hidden]);
        bias(store, format!("{prefix}.mlp.b1"), hidden);
        weight(store, format!("{prefix}.mlp.w2"), &[hidden, width]);
        bias(store, format!("{prefix}.mlp.b2"), width);
    }

    fn insert(&mut self, name: String, tensor: Tensor, kind: ParamKind) {
        let prev = self.entries.insert(name.clone(), Entry { tensor, kind });
        debug_assert!(prev.is_none(), "duplicate parameter {name}");
    }

    /// Attach a freshly initialized classification head (fine-tuning on
    /// top of a pretrained checkpoint).
    pub fn add_classifier(&mut self, config: &TransformerConfig, seed: u64) -> Result<()> {
        let n_classes = config
            .n_classes
            .ok_or_else(|| Error::config("config has no n_classes for the classifier head"))?;
        if self.entries.contains_key("cls_head.w1") {
            return Err(Error::config("classifier head already present"));
        }
        let d = config.d_model;
        let mut rng = rng::derive(seed, Stream::ParamInit, 1);
        for (name, dims, kind) in [
            ("cls_head.w1", vec![d, d], ParamKind::Weight),
            ("cls_head.b1", vec![d], ParamKind::Bias),
            ("cls_head.w2", vec![d, n_classes], ParamKind::Weight),
            ("cls_head.b2", vec![n_classes], ParamKind::Bias),
        ] {
            let mut t = Tensor::zeros(&dims);
            if kind == ParamKind::Weight {
                for v in t.data_mut() {
                    *v = rng::trunc_normal(&mut rng, INIT_SIGMA);
                }
            }
            self.insert(name.to_string(), t, kind);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::config(format!("missing parameter tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::config(format!("missing parameter tensor `{name}`")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter().map(|(n, e)| (n, &e.tensor))
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Zero-filled gradient store over this manifest.
    pub fn zero_grads(&self) -> GradStore {
        GradStore {
            grads: self
                .entries
                .iter()
                .map(|(n, e)| (n.clone(), Tensor::zeros(e.tensor.dims())))
                .collect(),
        }
    }

    pub fn ensure_all_finite(&self) -> Result<()> {
        for (name, e) in &self.entries {
            e.tensor.ensure_finite(name)?;
        }
        Ok(())
    }

    // ---- checkpoint io ----

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = Vec::with_capacity(self.entries.len());
        let mut blob: Vec<u8> = Vec::new();
        for (name, e) in &self.entries {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: e.tensor.dims().to_vec(),
                dtype: "f32".to_string(),
                byte_offset: blob.len() as u64,
            });
            for &v in e.tensor.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::parse(format!("manifest encode: {e}")))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        std::fs::write(dir.join("weights.bin"), blob)?;
        Ok(())
    }

    /// Load a checkpoint, validating every name and shape against the
    /// store layout this config implies.
    pub fn load_checkpoint(dir: &Path, config: &TransformerConfig) -> Result<Self> {
        let mut store = Self::init(config, 0)?;
        let json = std::fs::read(dir.join("manifest.json"))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&json)
            .map_err(|e| Error::parse(format!("manifest decode: {e}")))?;
        if manifest.len() != store.entries.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, config expects {}",
                manifest.len(),
                store.entries.len()
            )));
        }
        let blob = std::fs::read(dir.join("weights.bin"))?;
        for entry in &manifest {
            if entry.dtype != "f32" {
                return Err(Error::config(format!(
                    "tensor `{}` has dtype {}, expected f32",
                    entry.name, entry.dtype
                )));
            }
            let target = store.get_mut(&entry.name).map_err(|_| {
                Error::config(format!("checkpoint tensor `{}` not in config manifest", entry.name))
            })?;
            if target.dims() != entry.shape.as_slice() {
                return Err(Error::config(format!(
                    "tensor `{}` has shape {:?}, config expects {:?}",
                    entry.name,
                    entry.shape,
                    target.dims()
                )));
            }
            let start = entry.byte_offset as usize;
            let end = start + 4 * target.len();
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| Error::parse(format!("weights.bin truncated at `{}`", entry.name)))?;
            for (i, chunk) in bytes.chunks_exact(4).enumerate() {
                target.data_mut()[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
        }
        store.ensure_all_finite()?;
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}
