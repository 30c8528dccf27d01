//! Checkpoints and metrics logs with bit-exact round-trips.
//!
//! A checkpoint is one file: magic bytes, a version word, a JSON index
//! header (config, parameter-group table, vocabulary references, freeze
//! audit, trainer metadata), then the raw tensor section. Tensors are
//! written little-endian in name order, so the content hash of a checkpoint
//! is stable across platforms. Vocabularies are stored as sidecar files
//! referenced by content hash; the loader verifies the hashes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    hex_digest, GroupTag, ModelConfig, ParamStore, Provenance, TransformerModel,
};
use crate::numerics::{Real, Tensor};
use crate::tokenize::{LanguageId, VocabScope, Vocabulary};

const MAGIC: &[u8; 8] = b"XFLBCKPT";
const VERSION: u32 = 1;

/// One freeze-audit entry: which groups were trainable during a phase, and
/// every parameter's content hash before and after. Sufficient to re-verify
/// freeze discipline from the checkpoint alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub phase: String,
    pub trainable: Vec<GroupTag>,
    pub step_range: (usize, usize),
    pub hashes_before: BTreeMap<String, String>,
    pub hashes_after: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Group tag and freeze flag for model parameters; extra tensors
    /// (optimizer state) carry no tag.
    tag: Option<GroupTag>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: u8,
    config: ModelConfig,
    active_language: LanguageId,
    n_classes: Option<usize>,
    noise_sigma: f64,
    provenance: Provenance,
    /// language -> (sidecar file name, content hash)
    vocabs: BTreeMap<LanguageId, (String, String)>,
    tensors: Vec<TensorEntry>,
    audit: Vec<AuditRecord>,
    /// Trainer/pipeline metadata (optimizer config, RNG states, step).
    extra: serde_json::Value,
}

/// In-memory checkpoint: everything needed to rebuild a model plus the
/// trainer extras a resume needs.
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub active_language: LanguageId,
    pub n_classes: Option<usize>,
    pub noise_sigma: f64,
    pub provenance: Provenance,
    pub vocabs: BTreeMap<LanguageId, Vocabulary>,
    pub params: Vec<(String, GroupTag, bool, Tensor<T>)>,
    pub extra_tensors: BTreeMap<String, Tensor<T>>,
    pub audit: Vec<AuditRecord>,
    pub extra: serde_json::Value,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_model(
        model: &TransformerModel<T>,
        audit: Vec<AuditRecord>,
        extra_tensors: BTreeMap<String, Tensor<T>>,
        extra: serde_json::Value,
    ) -> Self {
        let params = model
            .store()
            .iter()
            .map(|p| (p.name.clone(), p.tag.clone(), p.trainable, p.tensor.clone()))
            .collect();
        let vocabs = model
            .languages()
            .into_iter()
            .map(|l| {
                let v = model.vocab(&l).expect("listed language").clone();
                (l, v)
            })
            .collect();
        Checkpoint {
            config: model.config().clone(),
            active_language: model.active_language().clone(),
            n_classes: model.n_classes(),
            noise_sigma: model.embedding_noise_sigma(),
            provenance: model.provenance.clone(),
            vocabs,
            params,
            extra_tensors,
            audit,
            extra,
        }
    }

    /// Rebuild the model. When `expected_config` is given, a mismatch is a
    /// configuration error.
    pub fn into_model(self, expected_config: Option<&ModelConfig>) -> Result<TransformerModel<T>> {
        if let Some(expected) = expected_config {
            if *expected != self.config {
                return Err(Error::config(
                    "checkpoint ModelConfig does not match the expected configuration",
                ));
            }
        }
        let mut store = ParamStore::new();
        for (name, tag, trainable, tensor) in self.params {
            let idx = store.insert(name, tag, tensor);
            store.by_idx_mut(idx).trainable = trainable;
        }
        TransformerModel::from_parts(
            self.config,
            store,
            self.vocabs,
            self.active_language,
            self.n_classes,
            self.noise_sigma,
            self.provenance,
        )
    }

    /// Write the container plus one vocabulary sidecar per language. The
    /// sidecars are content-addressed (`vocab.<lang>.<hash16>`) so the
    /// container bytes are independent of where it is saved.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut vocab_refs = BTreeMap::new();
        for (lang, vocab) in &self.vocabs {
            let bytes = vocab.to_bytes();
            let hash = hex_digest(&bytes);
            let sidecar_name = format!("vocab.{lang}.{}", &hash[..16]);
            let sidecar = path.with_file_name(&sidecar_name);
            std::fs::write(&sidecar, &bytes)?;
            vocab_refs.insert(lang.clone(), (sidecar_name, hash));
        }

        // One table over params and extra tensors, sorted by name.
        let mut entries: Vec<TensorEntry> = self
            .params
            .iter()
            .map(|(name, tag, trainable, tensor)| TensorEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                tag: Some(tag.clone()),
                trainable: *trainable,
            })
            .collect();
        entries.extend(self.extra_tensors.iter().map(|(name, tensor)| TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            tag: None,
            trainable: false,
        }));
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        if entries.windows(2).any(|w| w[0].name == w[1].name) {
            return Err(Error::Integrity("duplicate tensor name".into()));
        }

        let header = Header {
            dtype: T::BITS,
            config: self.config.clone(),
            active_language: self.active_language.clone(),
            n_classes: self.n_classes,
            noise_sigma: self.noise_sigma,
            provenance: self.provenance.clone(),
            vocabs: vocab_refs,
            tensors: entries,
            audit: self.audit.clone(),
            extra: self.extra.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut body = Vec::new();
        body.extend_from_slice(MAGIC);
        body.extend_from_slice(&VERSION.to_le_bytes());
        body.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        body.extend_from_slice(&header_bytes);
        let lookup: BTreeMap<&str, &Tensor<T>> = self
            .params
            .iter()
            .map(|(n, _, _, t)| (n.as_str(), t))
            .chain(self.extra_tensors.iter().map(|(n, t)| (n.as_str(), t)))
            .collect();
        for entry in &header.tensors {
            let tensor = lookup[entry.name.as_str()];
            for &v in tensor.data() {
                v.write_le(&mut body);
            }
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)
            .map_err(|_| Error::Integrity("file too short for magic bytes".into()))?;
        if &magic != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word)
            .map_err(|_| Error::Integrity("truncated version word".into()))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Integrity(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let mut len = [0u8; 8];
        file.read_exact(&mut len)
            .map_err(|_| Error::Integrity("truncated header length".into()))?;
        let header_len = u64::from_le_bytes(len) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)
            .map_err(|_| Error::Integrity("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        if header.dtype != T::BITS {
            return Err(Error::config(format!(
                "checkpoint stores {}-bit reals, loader expects {}-bit",
                header.dtype,
                T::BITS
            )));
        }

        let word_bytes = T::BITS as usize / 8;
        let mut params = Vec::new();
        let mut extra_tensors = BTreeMap::new();
        for entry in &header.tensors {
            let numel: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; numel * word_bytes];
            file.read_exact(&mut raw).map_err(|_| {
                Error::Integrity(format!(
                    "tensor `{}` is truncated (expected {} values)",
                    entry.name, numel
                ))
            })?;
            let data: Vec<T> = raw.chunks(word_bytes).map(T::read_le).collect();
            let tensor = Tensor::new(entry.shape.clone(), data).map_err(|_| {
                Error::Integrity(format!(
                    "tensor `{}` length does not match its shape {:?}",
                    entry.name, entry.shape
                ))
            })?;
            match &entry.tag {
                Some(tag) => params.push((entry.name.clone(), tag.clone(), entry.trainable, tensor)),
                None => {
                    extra_tensors.insert(entry.name.clone(), tensor);
                }
            }
        }
        let mut trailing = Vec::new();
        file.read_to_end(&mut trailing)?;
        if !trailing.is_empty() {
            return Err(Error::Integrity(format!(
                "{} unexpected trailing bytes",
                trailing.len()
            )));
        }

        let mut vocabs = BTreeMap::new();
        for (lang, (sidecar_name, expected_hash)) in &header.vocabs {
            let sidecar = path.with_file_name(sidecar_name);
            let bytes = std::fs::read(&sidecar).map_err(|e| {
                Error::Integrity(format!(
                    "vocabulary sidecar `{}` unreadable: {e}",
                    sidecar.display()
                ))
            })?;
            let actual = hex_digest(&bytes);
            if actual != *expected_hash {
                return Err(Error::Integrity(format!(
                    "vocabulary `{lang}` hash mismatch: checkpoint references {expected_hash}, file has {actual}"
                )));
            }
            let vocab = Vocabulary::load(&sidecar, VocabScope::Lang(lang.clone()))?;
            vocabs.insert(lang.clone(), vocab);
        }

        Ok(Checkpoint {
            config: header.config,
            active_language: header.active_language,
            n_classes: header.n_classes,
            noise_sigma: header.noise_sigma,
            provenance: header.provenance,
            vocabs,
            params,
            extra_tensors,
            audit: header.audit,
            extra: header.extra,
        })
    }
}

/// Convenience wrappers for the plain save/load-a-model cycle.
pub fn save_checkpoint<T: Real>(model: &TransformerModel<T>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, Vec::new(), BTreeMap::new(), serde_json::Value::Null).save(path)
}

pub fn load_checkpoint<T: Real>(
    path: &Path,
    expected_config: Option<&ModelConfig>,
) -> Result<TransformerModel<T>> {
    Checkpoint::<T>::load(path)?.into_model(expected_config)
}

/// Append-only JSON-lines metrics log; every record is flushed on write.
pub struct MetricsLog {
    writer: std::io::BufWriter<std::fs::File>,
    pub path: PathBuf,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(MetricsLog {
            writer: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn append<R: Serialize>(&mut self, record: &R) -> Result<()> {
        let line = serde_json::to_string(record)?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Parse every line of a JSON-lines file.
pub fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>> {
    let body = std::fs::read_to_string(path)?;
    body.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
