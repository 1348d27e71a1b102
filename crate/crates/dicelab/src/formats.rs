//! Little-endian binary artifact formats. Every file starts with a 4-byte
//! magic and a u32 version; all writes go through [`atomic_write`].

use std::fs;
use std::io::Write;
use std::path::Path;

use dicelab_core::clustering::{Codebook, FeatureDump, LabelSequence, SoftLabelSequence};
use dicelab_core::losses::ProjectionSet;
use dicelab_core::model::{Encoder, ModelConfig, ParamSet};
use dicelab_core::train::TrainState;
use dicelab_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DICE";
pub const FEATURES_MAGIC: &[u8; 4] = b"DFEA";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"DCBK";
pub const LABELS_MAGIC: &[u8; 4] = b"DLAB";
pub const SOFT_LABELS_MAGIC: &[u8; 4] = b"DSFT";
pub const WAVES_MAGIC: &[u8; 4] = b"DWAV";

/// Writes to a sibling temp file, syncs, then renames over `path`, so a
/// failed write never leaves a partial artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.at(path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).at(path)?))
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(VERSION);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.len_u32(b.len());
        self.buf.extend_from_slice(b);
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn u16s(&mut self, v: &[u16]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    /// Checks magic and version.
    pub fn new(buf: &'a [u8], magic: &[u8; 4], path: &'a Path) -> Result<Self> {
        let mut r = Self { buf, pos: 0, path };
        if r.take(4)? != magic {
            return Err(Error::format(
                path,
                format!("not a {} file", String::from_utf8_lossy(magic)),
            ));
        }
        let v = r.u32()?;
        if v != VERSION {
            return Err(Error::format(path, format!("unsupported version {v}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "bad length"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        let raw = self.take(n.checked_mul(2).ok_or_else(|| Error::format(self.path, "bad length"))?)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor<f32>> {
        let n = shape.iter().product();
        let data = self.f32s(n)?;
        Ok(Tensor::new(shape, data)?)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        self.path
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).at(path)
}

/// Layer mapping of a projection set; the matrices live in the tensor list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionLayout {
    pub student_layers: Vec<usize>,
    pub teacher_layers: Vec<usize>,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub step: usize,
    /// sha256 of the canonical training-config JSON.
    pub config_digest: String,
    pub seed: u64,
    pub projection: Option<ProjectionLayout>,
}

/// Model weights, projections and optimizer moments at a step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn encoder(&self) -> Result<Encoder> {
        Ok(Encoder::new(self.header.model.clone(), self.state.encoder.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.bytes(&serde_json::to_vec(&self.header).expect("header serializes"));
        let st = &self.state;
        let mut named: Vec<(String, &Tensor<f32>)> = st
            .encoder
            .names
            .iter()
            .cloned()
            .zip(&st.encoder.tensors)
            .collect();
        if let Some(p) = &st.proj {
            named.extend(p.weights.iter().enumerate().map(|(i, t)| (format!("feat_proj.{i}"), t)));
        }
        let count = named.len();
        for (i, t) in st.adam_m.iter().enumerate() {
            named.push((format!("adam.m.{i}"), t));
        }
        for (i, t) in st.adam_v.iter().enumerate() {
            named.push((format!("adam.v.{i}"), t));
        }
        debug_assert_eq!(named.len(), 3 * count);
        w.len_u32(named.len());
        for (name, t) in named {
            w.bytes(name.as_bytes());
            w.len_u32(t.shape().len());
            for d in t.shape() {
                w.u64(*d as u64);
            }
            w.f32s(t.data());
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(buf, CHECKPOINT_MAGIC, path)?;
        let header: CheckpointHeader = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let n = r.usize()?;
        let mut encoder = ParamSet::new();
        let mut proj = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let ndim = r.usize()?;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let t = r.tensor(shape)?;
            if name.starts_with("feat_proj.") {
                proj.push(t);
            } else if name.starts_with("adam.m.") {
                adam_m.push(t);
            } else if name.starts_with("adam.v.") {
                adam_v.push(t);
            } else {
                encoder.push(name, t);
            }
        }
        r.finish()?;
        dicelab_core::model::check_params(&header.model, &encoder)?;
        let proj = match (&header.projection, proj.is_empty()) {
            (Some(l), _) => Some(ProjectionSet::new(
                l.student_layers.clone(),
                l.teacher_layers.clone(),
                proj,
                l.alphas.clone(),
            )?),
            (None, true) => None,
            (None, false) => return Err(Error::format(path, "projection tensors without a layout")),
        };
        let state = TrainState {
            step: header.step,
            encoder,
            proj,
            adam_m,
            adam_v,
        };
        if state.adam_m.len() != state.tensors().count() || state.adam_v.len() != state.adam_m.len() {
            return Err(Error::format(path, "optimizer state does not match the parameters"));
        }
        Ok(Self { header, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

pub fn features_to_bytes(dump: &FeatureDump) -> Vec<u8> {
    let mut w = Writer::new(FEATURES_MAGIC);
    w.len_u32(dump.dim);
    w.len_u32(dump.items.len());
    for item in &dump.items {
        w.u32(item.id);
        w.len_u32(item.frames.rows());
        w.f32s(item.frames.data());
    }
    w.finish()
}

pub fn write_features(path: &Path, dump: &FeatureDump) -> Result<()> {
    atomic_write(path, &features_to_bytes(dump))
}

pub fn read_features(path: &Path) -> Result<FeatureDump> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, FEATURES_MAGIC, path)?;
    let dim = r.usize()?;
    let count = r.usize()?;
    let mut dump = FeatureDump::new(dim);
    for _ in 0..count {
        let id = r.u32()?;
        let t = r.usize()?;
        dump.push(id, r.tensor(vec![t, dim])?)?;
    }
    r.finish()?;
    Ok(dump)
}

pub fn codebook_to_bytes(cb: &Codebook) -> Vec<u8> {
    let mut w = Writer::new(CODEBOOK_MAGIC);
    w.len_u32(cb.k());
    w.len_u32(cb.dim());
    w.f64(cb.inertia);
    w.u64(cb.seed);
    w.u64(cb.iterations as u64);
    w.u64(cb.samples as u64);
    w.len_u32(cb.history.len());
    for h in &cb.history {
        w.f64(*h);
    }
    w.f32s(cb.centroids.data());
    w.finish()
}

pub fn write_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    atomic_write(path, &codebook_to_bytes(cb))
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, CODEBOOK_MAGIC, path)?;
    let k = r.usize()?;
    let dim = r.usize()?;
    let inertia = r.f64()?;
    let seed = r.u64()?;
    let iterations = r.u64()? as usize;
    let samples = r.u64()? as usize;
    let nh = r.usize()?;
    let history = (0..nh).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let centroids = r.tensor(vec![k, dim])?;
    r.finish()?;
    Ok(Codebook {
        centroids,
        inertia,
        iterations,
        seed,
        samples,
        history,
    })
}

pub fn labels_to_bytes(k: usize, labels: &[LabelSequence]) -> Vec<u8> {
    let mut w = Writer::new(LABELS_MAGIC);
    w.len_u32(k);
    w.len_u32(labels.len());
    for s in labels {
        w.u32(s.utterance_id);
        w.len_u32(s.labels.len());
        w.u16s(&s.labels);
    }
    w.finish()
}

pub fn write_labels(path: &Path, k: usize, labels: &[LabelSequence]) -> Result<()> {
    atomic_write(path, &labels_to_bytes(k, labels))
}

/// Returns `(K, sequences)`.
pub fn read_labels(path: &Path) -> Result<(usize, Vec<LabelSequence>)> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, LABELS_MAGIC, path)?;
    let k = r.usize()?;
    let count = r.usize()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let utterance_id = r.u32()?;
        let t = r.usize()?;
        let labels = r.u16s(t)?;
        if let Some(z) = labels.iter().find(|&&z| z as usize >= k) {
            return Err(Error::format(path, format!("label {z} outside {k} classes")));
        }
        out.push(LabelSequence { utterance_id, labels });
    }
    r.finish()?;
    Ok((k, out))
}

/// Probabilities are stored as f32; rows are renormalized in f64 on load.
pub fn soft_labels_to_bytes(tau: f64, k: usize, labels: &[SoftLabelSequence]) -> Vec<u8> {
    let mut w = Writer::new(SOFT_LABELS_MAGIC);
    w.f64(tau);
    w.len_u32(labels.len());
    for s in labels {
        debug_assert_eq!(s.k, k);
        w.u32(s.utterance_id);
        w.len_u32(s.frames());
        w.len_u32(k);
        let probs: Vec<f32> = s.probs.iter().map(|p| *p as f32).collect();
        w.f32s(&probs);
    }
    w.finish()
}

pub fn write_soft_labels(path: &Path, tau: f64, k: usize, labels: &[SoftLabelSequence]) -> Result<()> {
    atomic_write(path, &soft_labels_to_bytes(tau, k, labels))
}

pub fn read_soft_labels(path: &Path) -> Result<Vec<SoftLabelSequence>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, SOFT_LABELS_MAGIC, path)?;
    let tau = r.f64()?;
    let count = r.usize()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let utterance_id = r.u32()?;
        let t = r.usize()?;
        let k = r.usize()?;
        if k == 0 {
            return Err(Error::format(path, "soft labels with K = 0"));
        }
        let raw = r.f32s(t * k)?;
        let mut probs: Vec<f64> = raw.iter().map(|p| *p as f64).collect();
        for row in probs.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|p| *p /= s);
            }
        }
        out.push(SoftLabelSequence {
            utterance_id,
            k,
            tau,
            probs,
        });
    }
    r.finish()?;
    Ok(out)
}
