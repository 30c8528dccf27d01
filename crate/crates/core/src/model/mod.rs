//! The transformer encoder with swappable embedding sets, parameter groups
//! with freeze masks, adapters, and task heads.

mod embedding;
mod transformer;

pub use embedding::EmbeddingSet;
pub use transformer::{
    ClsForward, ForwardCore, MlmNspForward, Provenance, SpanForward, TransformerModel,
};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::tokenize::LanguageId;

/// Encoder geometry and the lexical-transfer switches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Bottleneck width of the residual adapters; 0 = no adapters.
    #[serde(default)]
    pub adapter_size: usize,
    /// Tie the MLM output projection to the active token embeddings so an
    /// embedding swap also swaps the MLM vocabulary.
    #[serde(default = "default_true")]
    pub tie_mlm_output: bool,
    /// Learn one position table per language instead of a shared one.
    #[serde(default)]
    pub lang_specific_positions: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Minutes-scale CPU defaults.
    pub fn desk_default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_seq_len: 32,
            adapter_size: 0,
            tie_mlm_output: true,
            lang_specific_positions: false,
        }
    }

    /// The full-scale geometry stays a legal configuration.
    pub fn bert_base() -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            max_seq_len: 512,
            adapter_size: 0,
            tie_mlm_output: true,
            lang_specific_positions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.adapter_size >= self.d_model {
            return Err(Error::config(format!(
                "adapter_size {} must be below d_model {}",
                self.adapter_size, self.d_model
            )));
        }
        if self.max_seq_len < 8 {
            return Err(Error::config("max_seq_len must be at least 8"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Scope of a position-embedding table.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosScope {
    Shared,
    Lang(LanguageId),
}

/// Task heads that own parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Mlm,
    Nsp,
    Classifier,
    Span,
}

/// Parameter-group tag: the unit of the freeze/unfreeze choreography.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupTag {
    TokenEmb(LanguageId),
    PosEmb(PosScope),
    SegEmb,
    SpecialEmb,
    Body,
    Adapters,
    Head(HeadKind),
}

impl std::fmt::Display for GroupTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupTag::TokenEmb(l) => write!(f, "token_emb({l})"),
            GroupTag::PosEmb(PosScope::Shared) => write!(f, "pos_emb(shared)"),
            GroupTag::PosEmb(PosScope::Lang(l)) => write!(f, "pos_emb({l})"),
            GroupTag::SegEmb => write!(f, "seg_emb"),
            GroupTag::SpecialEmb => write!(f, "special_emb"),
            GroupTag::Body => write!(f, "body"),
            GroupTag::Adapters => write!(f, "adapters"),
            GroupTag::Head(h) => write!(f, "head({h:?})"),
        }
    }
}

/// A named tensor with gradient buffer, freeze flag, and group tag.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tag: GroupTag,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Every model parameter, in insertion order; each parameter belongs to
/// exactly one group.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tag: GroupTag, tensor: Tensor<T>) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.params[i] = Parameter {
                name,
                tag,
                tensor,
                trainable: self.params[i].trainable,
            };
            return i;
        }
        let i = self.params.len();
        self.index.insert(name.clone(), i);
        self.params.push(Parameter {
            name,
            tag,
            tensor,
            trainable: true,
        });
        i
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter<T>> {
        let i = self.index.remove(name)?;
        let p = self.params.remove(i);
        self.index.clear();
        for (j, q) in self.params.iter().enumerate() {
            self.index.insert(q.name.clone(), j);
        }
        Some(p)
    }

    pub fn idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.idx(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        let i = self.idx(name)?;
        Some(&mut self.params[i])
    }

    pub fn by_idx(&self, i: usize) -> &Parameter<T> {
        &self.params[i]
    }

    pub fn by_idx_mut(&mut self, i: usize) -> &mut Parameter<T> {
        &mut self.params[i]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn tags(&self) -> Vec<GroupTag> {
        let mut tags = Vec::new();
        for p in &self.params {
            if !tags.contains(&p.tag) {
                tags.push(p.tag.clone());
            }
        }
        tags
    }

    /// Make exactly the named groups trainable; everything else freezes.
    /// Unknown tags are a configuration error.
    pub fn set_trainable_tags(&mut self, tags: &[GroupTag]) -> Result<()> {
        let known = self.tags();
        for t in tags {
            if !known.contains(t) {
                return Err(Error::config(format!("unknown parameter group `{t}`")));
            }
        }
        for p in &mut self.params {
            p.trainable = tags.contains(&p.tag);
        }
        Ok(())
    }

    pub fn trainable_tags(&self) -> Vec<GroupTag> {
        let mut tags = Vec::new();
        for p in &self.params {
            if p.trainable && !tags.contains(&p.tag) {
                tags.push(p.tag.clone());
            }
        }
        tags
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Content hash of one parameter's value bytes (little-endian).
    pub fn hash_param(p: &Parameter<T>) -> String {
        let mut bytes = Vec::with_capacity(p.tensor.numel() * (T::BITS as usize / 8));
        for &v in p.tensor.data() {
            v.write_le(&mut bytes);
        }
        hex_digest(&bytes)
    }

    /// name -> content hash, sorted by name.
    pub fn hash_all(&self) -> std::collections::BTreeMap<String, String> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), Self::hash_param(p)))
            .collect()
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Standard normal draw (Box-Muller), deterministic for a seeded RNG.
pub(crate) fn gaussian<R: rand::Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

pub(crate) fn normal_tensor<T: Real, R: rand::Rng>(
    shape: Vec<usize>,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(gaussian(rng) * std))
        .collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk_default().validate().is_ok());
        assert!(ModelConfig::bert_base().validate().is_ok());
        let mut bad = ModelConfig::desk_default();
        bad.d_model = 65;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::desk_default();
        bad.adapter_size = bad.d_model;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn set_trainable_rejects_unknown_groups() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", GroupTag::Body, Tensor::zeros(vec![2, 2]));
        let err = store
            .set_trainable_tags(&[GroupTag::Adapters])
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        store.set_trainable_tags(&[GroupTag::Body]).unwrap();
        assert!(store.get("a").unwrap().trainable);
        store.set_trainable_tags(&[]).unwrap();
        assert!(!store.get("a").unwrap().trainable);
    }

    #[test]
    fn param_hash_changes_with_content() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", GroupTag::Body, Tensor::zeros(vec![2]));
        let h0 = ParamStore::hash_param(store.get("w").unwrap());
        store.get_mut("w").unwrap().tensor.data_mut()[0] = 1.0;
        let h1 = ParamStore::hash_param(store.get("w").unwrap());
        assert_ne!(h0, h1);
    }

    #[test]
    fn gaussian_moments_are_sane() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| gaussian(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
