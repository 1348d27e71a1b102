//! On-disk corpus: `corpus.json` manifest plus a single waveform store.

use std::fs;
use std::path::{Path, PathBuf};

use dicelab_core::corpus::{frame_truth, synthesize, utterance_identity, CorpusConfig, Segment, Utterance, Voicebank};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::formats::{atomic_write, sha256_hex, Reader, Writer, WAVES_MAGIC};

pub const MANIFEST_FILE: &str = "corpus.json";
pub const WAVES_FILE: &str = "waveforms.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub id: u32,
    pub seed: u64,
    pub speaker_id: u16,
    pub num_samples: usize,
    /// Byte offset of the first sample in the waveform store.
    pub offset: u64,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub waveforms: String,
    pub waveforms_sha256: String,
    pub utterances: Vec<UtteranceEntry>,
}

/// A loaded corpus with all waveforms in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Synthesizes every utterance, in parallel when a rayon pool allows it.
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let bank = Voicebank::new(cfg)?;
        let utterances = (0..cfg.n_utts)
            .into_par_iter()
            .map(|id| {
                let (seed, spk) = utterance_identity(cfg, id);
                synthesize(cfg, &bank, id, seed, spk)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (waves, entries) = encode_waves(&utterances);
        let manifest = CorpusManifest {
            config: cfg.clone(),
            waveforms: WAVES_FILE.into(),
            waveforms_sha256: sha256_hex(&waves),
            utterances: entries,
        };
        Ok(Self { manifest, utterances })
    }

    /// Writes the waveform store, then the manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (waves, _) = encode_waves(&self.utterances);
        atomic_write(&dir.join(&self.manifest.waveforms), &waves)?;
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        atomic_write(&dir.join(MANIFEST_FILE), &json)
    }

    /// Loads from a corpus directory or a path to its manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = manifest_path(path);
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let text = fs::read(&manifest_path).at(&manifest_path)?;
        let manifest: CorpusManifest = serde_json::from_slice(&text)
            .map_err(|e| Error::format(&manifest_path, format!("bad corpus manifest: {e}")))?;
        manifest.config.validate()?;
        let waves_path = dir.join(&manifest.waveforms);
        let buf = fs::read(&waves_path).at(&waves_path)?;
        if sha256_hex(&buf) != manifest.waveforms_sha256 {
            return Err(Error::format(&waves_path, "digest does not match the corpus manifest"));
        }
        let mut utterances = Vec::with_capacity(manifest.utterances.len());
        for (i, e) in manifest.utterances.iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::format(&manifest_path, "utterance ids must be dense from 0"));
            }
            let start = e.offset as usize;
            let end = start + 4 * e.num_samples;
            let raw = buf
                .get(start..end)
                .ok_or_else(|| Error::format(&waves_path, format!("utterance {} out of range", e.id)))?;
            let samples: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            utterances.push(Utterance {
                id: i,
                seed: e.seed,
                speaker_id: e.speaker_id,
                frame_truth: frame_truth(&e.segments, e.num_samples),
                samples,
                segments: e.segments.clone(),
            });
        }
        check_store_layout(&buf, &manifest, &waves_path)?;
        Ok(Self { manifest, utterances })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.manifest.config
    }

    pub fn frames(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.num_frames()).collect()
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.to_path_buf()
    } else {
        path.join(MANIFEST_FILE)
    }
}

/// Store layout: magic, version, count, then per utterance `(id, n, n × f32)`.
fn encode_waves(utts: &[Utterance]) -> (Vec<u8>, Vec<UtteranceEntry>) {
    let mut w = Writer::new(WAVES_MAGIC);
    w.len_u32(utts.len());
    let mut entries = Vec::with_capacity(utts.len());
    let mut offset = 12u64;
    for u in utts {
        w.u32(u.id as u32);
        w.len_u32(u.samples.len());
        w.f32s(&u.samples);
        entries.push(UtteranceEntry {
            id: u.id as u32,
            seed: u.seed,
            speaker_id: u.speaker_id,
            num_samples: u.samples.len(),
            offset: offset + 8,
            segments: u.segments.clone(),
        });
        offset += 8 + 4 * u.samples.len() as u64;
    }
    (w.finish(), entries)
}

fn check_store_layout(buf: &[u8], manifest: &CorpusManifest, path: &Path) -> Result<()> {
    let mut r = Reader::new(buf, WAVES_MAGIC, path)?;
    if r.usize()? != manifest.utterances.len() {
        return Err(Error::format(path, "utterance count differs from the manifest"));
    }
    for e in &manifest.utterances {
        if r.u32()? != e.id || r.usize()? != e.num_samples {
            return Err(Error::format(path, format!("record {} differs from the manifest", e.id)));
        }
        r.f32s(e.num_samples)?;
    }
    r.finish()
}
