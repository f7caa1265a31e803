//! Self-describing binary checkpoint.
//!
//! Layout: magic, `u32` version, `u64` metadata length, JSON metadata,
//! `u64` entry count, entries sorted by name (`u32` name length, name, dtype
//! tag, `u32` ndim, `u64` dims, raw little-endian bytes), and a trailing
//! SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::Selector;
use crate::model::Layer;
use crate::popup::BinaryMask;
use crate::tensor::{DType, Element, Tensor};
use crate::train::{param_name, MetricsRow, TrainState};

pub const MAGIC: &[u8; 8] = b"EDGEPOP\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayType {
    F32,
    F64,
    U8,
}

impl ArrayType {
    fn tag(self) -> u8 {
        match self {
            ArrayType::F32 => DType::F32.tag(),
            ArrayType::F64 => DType::F64.tag(),
            ArrayType::U8 => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            2 => Ok(ArrayType::U8),
            t => match DType::from_tag(t) {
                Some(DType::F32) => Ok(ArrayType::F32),
                Some(DType::F64) => Ok(ArrayType::F64),
                None => Err(Error::Format(format!("unknown dtype tag {t}"))),
            },
        }
    }

    fn size(self) -> usize {
        match self {
            ArrayType::F32 => 4,
            ArrayType::F64 => 8,
            ArrayType::U8 => 1,
        }
    }

    fn of<T: Element>() -> Self {
        match T::DTYPE {
            DType::F32 => ArrayType::F32,
            DType::F64 => ArrayType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawArray {
    pub dtype: ArrayType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawArray {
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        RawArray {
            dtype: ArrayType::of::<T>(),
            shape: t.shape().to_vec(),
            bytes: t.to_le_bytes(),
        }
    }

    pub fn from_mask(m: &BinaryMask) -> Self {
        RawArray {
            dtype: ArrayType::U8,
            shape: m.shape().to_vec(),
            bytes: m.bits().iter().map(|&b| b as u8).collect(),
        }
    }

    pub fn to_tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        if self.dtype != ArrayType::of::<T>() {
            return Err(Error::Format(format!(
                "array `{name}` has dtype {:?}, expected {:?}",
                self.dtype,
                T::DTYPE
            )));
        }
        Tensor::from_le_bytes(self.shape.clone(), &self.bytes)
    }

    pub fn to_mask(&self, name: &str) -> Result<BinaryMask> {
        if self.dtype != ArrayType::U8 {
            return Err(Error::Format(format!("array `{name}` is not a u8 mask")));
        }
        BinaryMask::new(self.shape.clone(), self.bytes.iter().map(|&b| b != 0).collect())
            .map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub crate_version: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub seed: u64,
    pub optimizer_steps: u64,
    pub input_shape: Vec<usize>,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: BTreeMap<String, RawArray>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.meta.format_version.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(a.dtype.tag());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&a.bytes);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not an edgepop checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checkpoint digest mismatch (file corrupted)".into()));
        }
        let meta_len = r.len()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
        if meta.format_version != version {
            return Err(Error::Format("metadata version disagrees with header".into()));
        }
        let count = r.len()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let dtype = ArrayType::from_tag(r.u8()?)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("array `{name}` is too large")))?;
            let data = r.take(n)?.to_vec();
            arrays.insert(
                name,
                RawArray {
                    dtype,
                    shape,
                    bytes: data,
                },
            );
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after the last array".into()));
        }
        Ok(Checkpoint { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn get(&self, name: &str) -> Result<&RawArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks array `{name}`")))
    }

    /// Snapshot of a run: weights, selector tensors, masks, batch norm
    /// buffers and optimizer state.
    pub fn capture<T: Element>(cfg: &TrainConfig, state: &TrainState<T>) -> Result<Self> {
        let mut arrays = BTreeMap::new();
        let model = &state.model;
        for (i, (w, sel)) in model.masked_layers().enumerate() {
            arrays.insert(format!("layer{i}/weights"), RawArray::from_tensor(w));
            match sel {
                Selector::Popup { scores, .. } => {
                    arrays.insert(param_name(i, sel), RawArray::from_tensor(&scores.scores));
                }
                Selector::Stochastic { mask, .. } => {
                    arrays.insert(param_name(i, sel), RawArray::from_tensor(&mask.logits));
                }
                Selector::Dense => {}
            }
            arrays.insert(
                format!("layer{i}/mask"),
                RawArray::from_mask(&sel.current_mask(w.shape())?),
            );
        }
        for (j, layer) in model.layers.iter().enumerate() {
            if let Layer::BatchNorm(bn) = layer {
                let c = bn.channels();
                arrays.insert(
                    format!("bn{j}/running_mean"),
                    RawArray::from_tensor(&Tensor::new(vec![c], bn.running_mean.clone())?),
                );
                arrays.insert(
                    format!("bn{j}/running_var"),
                    RawArray::from_tensor(&Tensor::new(vec![c], bn.running_var.clone())?),
                );
            }
        }
        for (name, bufs) in state.optim.buffers() {
            for (b, t) in bufs.iter().enumerate() {
                arrays.insert(format!("optim/{name}/{b}"), RawArray::from_tensor(t));
            }
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                config: cfg.clone(),
                config_hash: cfg.hash(),
                epoch: state.epoch,
                seed: cfg.seed,
                optimizer_steps: state.optim.steps(),
                input_shape: model.input_shape.clone(),
                metrics: state.metrics.rows.clone(),
            },
            arrays,
        })
    }

    /// Rebuilds the run state from the stored config and arrays.
    pub fn restore<T: Element>(&self) -> Result<TrainState<T>> {
        let cfg = &self.meta.config;
        if cfg.hash() != self.meta.config_hash {
            return Err(Error::Format("stored config does not match its hash".into()));
        }
        if cfg.precision.dtype() != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {:?} tensors, requested {:?}",
                cfg.precision.dtype(),
                T::DTYPE
            )));
        }
        let mut state = TrainState::<T>::init(cfg, &self.meta.input_shape)?;
        let load = |name: &str, target: &mut Tensor<T>| -> Result<()> {
            let t = self.get(name)?.to_tensor::<T>(name)?;
            if t.shape() != target.shape() {
                return Err(Error::Format(format!(
                    "array `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    target.shape()
                )));
            }
            *target = t;
            Ok(())
        };
        let names: Vec<String> = state
            .model
            .masked_layers()
            .enumerate()
            .map(|(i, (_, s))| param_name(i, s))
            .collect();
        for ((i, (w, sel)), pname) in state.model.masked_layers_mut().enumerate().zip(&names) {
            load(&format!("layer{i}/weights"), w)?;
            match sel {
                Selector::Popup { scores, .. } => load(pname, &mut scores.scores)?,
                Selector::Stochastic { mask, .. } => load(pname, &mut mask.logits)?,
                Selector::Dense => {}
            }
        }
        for (j, layer) in state.model.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm(bn) = layer {
                let mean = self.get(&format!("bn{j}/running_mean"))?.to_tensor::<T>("bn mean")?;
                let var = self.get(&format!("bn{j}/running_var"))?.to_tensor::<T>("bn var")?;
                bn.running_mean = mean.into_data();
                bn.running_var = var.into_data();
            }
        }
        let mut buffers: BTreeMap<String, Vec<Tensor<T>>> = BTreeMap::new();
        for (name, a) in self.arrays.range("optim/".to_string()..) {
            let Some(rest) = name.strip_prefix("optim/") else { break };
            let (pname, idx) = rest
                .rsplit_once('/')
                .ok_or_else(|| Error::Format(format!("bad optimizer entry `{name}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Format(format!("bad optimizer entry `{name}`")))?;
            let bufs = buffers.entry(pname.to_string()).or_default();
            if bufs.len() != idx {
                return Err(Error::Format(format!("optimizer buffers of `{pname}` out of order")));
            }
            bufs.push(a.to_tensor(name)?);
        }
        state.optim.restore(buffers, self.meta.optimizer_steps);
        state.epoch = self.meta.epoch;
        state.metrics.rows = self.meta.metrics.clone();
        // stored weights are the initial ones for frozen layers
        state.initial_weight_hashes = state.model.weight_hashes();
        let masks = state.model.masks()?;
        for (i, ((_, sel), current)) in state.model.masked_layers().zip(masks).enumerate() {
            let stored = self.get(&format!("layer{i}/mask"))?.to_mask("mask")?;
            if matches!(sel, Selector::Popup { .. }) && stored != current {
                return Err(Error::Format(format!(
                    "stored mask of layer {i} disagrees with its scores"
                )));
            }
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::rng::RngStream;
    use crate::train::train;

    fn cfg(alg: &str) -> TrainConfig {
        TrainConfig::from_toml(&format!(
            r#"
algorithm = "{alg}"
k = 0.5
epochs = 2
seed = 1
[arch]
name = "mlp"
width_multiplier = "1/16"
[init]
kind = "kaiming_normal"
[optimizer]
lr = 0.05
momentum = 0.9
[dataset]
name = "blobs"
batch_size = 10
classes = 3
dim = 6
per_class = 10
"#
        ))
        .unwrap()
    }

    fn trained(alg: &str) -> (TrainConfig, TrainState<f32>) {
        let c = cfg(alg);
        let (tr, te) = synth_blobs(3, 6, 10, 1.0, &RngStream::new(0)).unwrap();
        let st = train::<f32>(&c, &tr, &te, |_| Ok(())).unwrap();
        (c, st)
    }

    #[test]
    fn save_load_save_is_bitwise_identical() {
        for alg in ["edge_popup", "zhou", "dense_sgd"] {
            let (c, st) = trained(alg);
            let a = Checkpoint::capture(&c, &st).unwrap().to_bytes();
            let loaded = Checkpoint::from_bytes(&a).unwrap();
            let restored = loaded.restore::<f32>().unwrap();
            assert_eq!(restored.model, st.model, "{alg}");
            let b = Checkpoint::capture(&c, &restored).unwrap().to_bytes();
            assert_eq!(a, b, "{alg}");
        }
    }

    #[test]
    fn corruption_and_version_are_format_errors() {
        let (c, st) = trained("edge_popup");
        let bytes = Checkpoint::capture(&c, &st).unwrap().to_bytes();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Format(_))));
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        let e = Checkpoint::from_bytes(&versioned).unwrap_err();
        assert!(matches!(e, Error::Format(ref m) if m.contains("version")), "{e}");
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap().restore::<f64>(),
            Err(Error::Format(_))
        ));
    }
}
