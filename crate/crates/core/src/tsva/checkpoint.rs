//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `TSVACKPT`, a little-endian `u64` header length,
//! a JSON header (format version, network config, tensor table, training
//! metadata, optional optimizer scalars), then every tensor as contiguous
//! little-endian `f64` values at the offsets the table gives.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, BnStats, ParamId, Tensor4};
use crate::scalar::Scalar;
use crate::tsva::{EpochLog, TsvaConfig, TsvaModel};

const MAGIC: &[u8; 8] = b"TSVACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub delta_d_um: f64,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: u64,
    /// Number of `f64` values.
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TsvaConfig,
    tensors: Vec<TensorEntry>,
    metadata: TrainingMeta,
    optimizer: Option<OptimizerHeader>,
}

/// A model with its training metadata and, optionally, optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: TsvaModel<T>,
    pub meta: TrainingMeta,
    pub optimizer: Option<AdamState<T>>,
}

struct Writer {
    entries: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl Writer {
    fn push<T: Scalar>(&mut self, name: String, shape: Vec<usize>, values: &[T]) {
        self.entries.push(TensorEntry {
            name,
            shape,
            offset: self.data.len() as u64,
            len: values.len() as u64,
        });
        for v in values {
            self.data.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
}

fn truncated(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt checkpoint: {what}"))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: TsvaModel<T>) -> Self {
        Self {
            model,
            meta: TrainingMeta::default(),
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer {
            entries: Vec::new(),
            data: Vec::new(),
        };
        let params = &self.model.params;
        for p in params.iter() {
            w.push(format!("param/{}", p.name), p.value.shape().to_vec(), p.value.as_slice());
        }
        for (layer, stats) in &self.model.bn {
            let c = stats.running_mean.len();
            w.push(format!("bn/{layer}/running_mean"), vec![c], &stats.running_mean);
            w.push(format!("bn/{layer}/running_var"), vec![c], &stats.running_var);
        }
        let optimizer = self.optimizer.as_ref().map(|st| {
            for id in params.ids() {
                let p = params.get(id);
                w.push(format!("adam_m/{}", p.name), p.value.shape().to_vec(), st.first_moment(id).as_slice());
                w.push(format!("adam_v/{}", p.name), p.value.shape().to_vec(), st.second_moment(id).as_slice());
            }
            OptimizerHeader {
                learning_rate: st.learning_rate,
                beta1: st.beta1,
                beta2: st.beta2,
                epsilon: st.epsilon,
                step: st.step,
            }
        });
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.model.config,
            tensors: w.entries,
            metadata: self.meta.clone(),
            optimizer,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + w.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(truncated("missing preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = 16usize
            .checked_add(usize::try_from(header_len).map_err(|_| truncated("header length"))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| truncated("header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        header.config.validate()?;
        let data = &bytes[header_end..];

        let mut tensors = std::collections::BTreeMap::new();
        for e in &header.tensors {
            let start = usize::try_from(e.offset).map_err(|_| truncated(&e.name))?;
            let end = usize::try_from(e.len)
                .ok()
                .and_then(|n| n.checked_mul(8))
                .and_then(|n| n.checked_add(start))
                .filter(|&end| end <= data.len())
                .ok_or_else(|| truncated(&e.name))?;
            if e.shape.iter().product::<usize>() as u64 != e.len {
                return Err(Error::Checkpoint(format!("{}: shape and length disagree", e.name)));
            }
            let values: Vec<T> = data[start..end]
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            tensors.insert(e.name.clone(), (e.shape.clone(), values));
        }

        // a freshly built model fixes the expected names and shapes
        let mut model = TsvaModel::<T>::build(header.config, 0)?;
        let mut take = |name: String, shape: Vec<usize>| -> Result<Vec<T>> {
            let (s, v) = tensors
                .remove(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks {name}")))?;
            if s != shape {
                return Err(Error::ConfigMismatch(format!("{name}: shape {s:?}, expected {shape:?}")));
            }
            Ok(v)
        };
        let ids: Vec<ParamId> = model.params.ids().collect();
        for &id in &ids {
            let p = model.params.get_mut(id);
            let shape = p.value.shape();
            p.value = Tensor4::from_vec(shape, take(format!("param/{}", p.name), shape.to_vec())?)?;
        }
        let layers: Vec<String> = model.bn.keys().cloned().collect();
        for layer in layers {
            let c = model.bn[&layer].running_mean.len();
            let running_mean = take(format!("bn/{layer}/running_mean"), vec![c])?;
            let running_var = take(format!("bn/{layer}/running_var"), vec![c])?;
            model.bn.insert(layer, BnStats { running_mean, running_var });
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(h) => {
                let mut st = AdamState::new(&model.params, h.learning_rate);
                st.beta1 = h.beta1;
                st.beta2 = h.beta2;
                st.epsilon = h.epsilon;
                st.step = h.step;
                for &id in &ids {
                    let p = model.params.get(id);
                    let shape = p.value.shape();
                    let m = take(format!("adam_m/{}", p.name), shape.to_vec())?;
                    let v = take(format!("adam_v/{}", p.name), shape.to_vec())?;
                    let (fm, sm) = st.moments_mut(id);
                    *fm = Tensor4::from_vec(shape, m)?;
                    *sm = Tensor4::from_vec(shape, v)?;
                }
                Some(st)
            }
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::ConfigMismatch(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            model,
            meta: header.metadata,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Saves the model alone.
pub fn save_checkpoint<T: Scalar>(model: &TsvaModel<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(model.clone()).save(path)
}

/// Loads the model, ignoring any metadata and optimizer state.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<TsvaModel<T>> {
    Ok(Checkpoint::load(path)?.model)
}
