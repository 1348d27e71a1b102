//! Deterministic speech-like corpus with known frame labels and speakers.
//!
//! An utterance is a run of 100–400 ms segments. Each segment voices one
//! pseudo-phoneme: a bank of 2–3 sinusoids at the phoneme's formant-like
//! frequencies, warped by the speaker's filter factor and mixed with the
//! speaker's pitch harmonics. White noise is added at a fixed SNR.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

pub const SAMPLE_RATE: usize = 16_000;
/// Samples per 20 ms frame; also the encoder's total conv stride.
pub const FRAME_HOP: usize = 320;
pub const MAX_PHONEMES: usize = 64;
pub const MAX_SPEAKERS: usize = 64;

const MIN_SEGMENT: usize = SAMPLE_RATE / 10; // 100 ms
const MAX_SEGMENT: usize = SAMPLE_RATE * 2 / 5; // 400 ms
const FADE: usize = SAMPLE_RATE / 200; // 5 ms
const PEAK: f64 = 0.9;

// Stream tags.
const TAG_PHONEMES: u64 = 0x5048;
const TAG_SPEAKERS: u64 = 0x5350;
const TAG_UTTERANCE: u64 = 0x5554;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_utts: usize,
    pub phonemes: usize,
    pub speakers: usize,
    pub seed: u64,
    #[serde(default = "default_min_secs")]
    pub min_secs: f64,
    #[serde(default = "default_max_secs")]
    pub max_secs: f64,
    #[serde(default = "default_snr")]
    pub snr_db: f64,
}

fn default_min_secs() -> f64 {
    1.0
}
fn default_max_secs() -> f64 {
    4.0
}
fn default_snr() -> f64 {
    20.0
}

impl CorpusConfig {
    pub fn new(n_utts: usize, phonemes: usize, speakers: usize, seed: u64) -> Self {
        Self {
            n_utts,
            phonemes,
            speakers,
            seed,
            min_secs: default_min_secs(),
            max_secs: default_max_secs(),
            snr_db: default_snr(),
        }
    }

    /// Fixed-length utterances.
    pub fn with_duration(mut self, secs: f64) -> Self {
        self.min_secs = secs;
        self.max_secs = secs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_utts == 0 {
            return Err(Error::config("n_utts must be at least 1"));
        }
        if self.phonemes < 2 || self.phonemes > MAX_PHONEMES {
            return Err(Error::config(format!(
                "phoneme count {} outside [2, {}]",
                self.phonemes, MAX_PHONEMES
            )));
        }
        if self.speakers < 1 || self.speakers > MAX_SPEAKERS {
            return Err(Error::config(format!(
                "speaker count {} outside [1, {}]",
                self.speakers, MAX_SPEAKERS
            )));
        }
        if !(self.min_secs >= 0.025 && self.min_secs <= self.max_secs && self.max_secs <= 60.0) {
            return Err(Error::config(format!(
                "duration range [{}, {}] s is invalid",
                self.min_secs, self.max_secs
            )));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::config("snr_db must be finite"));
        }
        Ok(())
    }
}

/// Formant-like sinusoid bank for one pseudo-phoneme.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeTemplate {
    pub freqs: Vec<f64>,
    pub amps: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerProfile {
    pub pitch_hz: f64,
    /// Multiplies every formant frequency.
    pub warp: f64,
}

/// The corpus-level randomness: phoneme templates and speaker profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct Voicebank {
    pub phonemes: Vec<PhonemeTemplate>,
    pub speakers: Vec<SpeakerProfile>,
}

impl Voicebank {
    pub fn new(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(&[cfg.seed, TAG_PHONEMES]);
        let phonemes = (0..cfg.phonemes)
            .map(|_| {
                let mut freqs = alloc::vec![
                    rng.random_range(250.0..900.0),
                    rng.random_range(1000.0..2500.0),
                ];
                let mut amps = alloc::vec![rng.random_range(0.35..0.55), rng.random_range(0.15..0.35)];
                if rng.random_bool(0.5) {
                    freqs.push(rng.random_range(2600.0..3800.0));
                    amps.push(rng.random_range(0.05..0.2));
                }
                PhonemeTemplate { freqs, amps }
            })
            .collect();
        let mut rng = stream(&[cfg.seed, TAG_SPEAKERS]);
        let speakers = (0..cfg.speakers)
            .map(|_| SpeakerProfile {
                pitch_hz: rng.random_range(90.0..260.0),
                warp: rng.random_range(0.9..1.1),
            })
            .collect();
        Ok(Self { phonemes, speakers })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub phoneme: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub seed: u64,
    pub speaker_id: u16,
    pub samples: Vec<f32>,
    pub segments: Vec<Segment>,
    /// Pseudo-phoneme per 20 ms frame.
    pub frame_truth: Vec<u16>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.samples.len() / FRAME_HOP
    }
}

/// Label of the segment covering each frame's center sample.
pub fn frame_truth(segments: &[Segment], num_samples: usize) -> Vec<u16> {
    let frames = num_samples / FRAME_HOP;
    let mut out = Vec::with_capacity(frames);
    let mut seg = 0;
    for t in 0..frames {
        let center = t * FRAME_HOP + FRAME_HOP / 2;
        while seg + 1 < segments.len() && center >= segments[seg].start + segments[seg].len {
            seg += 1;
        }
        out.push(segments[seg].phoneme);
    }
    out
}

/// Seed and speaker assigned to utterance `id`.
pub fn utterance_identity(cfg: &CorpusConfig, id: usize) -> (u64, u16) {
    (
        derive_seed(&[cfg.seed, TAG_UTTERANCE, id as u64]),
        (id % cfg.speakers) as u16,
    )
}

/// Renders one utterance. Identical `(seed, speaker_id)` give identical output.
pub fn synthesize(
    cfg: &CorpusConfig,
    bank: &Voicebank,
    id: usize,
    seed: u64,
    speaker_id: u16,
) -> Result<Utterance> {
    let speaker = *bank
        .speakers
        .get(speaker_id as usize)
        .ok_or_else(|| Error::config(format!("speaker {} not in bank", speaker_id)))?;
    let mut rng = stream(&[seed]);
    let min_len = (cfg.min_secs * SAMPLE_RATE as f64) as usize;
    let max_len = (cfg.max_secs * SAMPLE_RATE as f64) as usize;
    let n = if max_len > min_len {
        rng.random_range(min_len..=max_len)
    } else {
        min_len
    };

    let mut segments = Vec::new();
    let mut pos = 0;
    while pos < n {
        let len = rng.random_range(MIN_SEGMENT..=MAX_SEGMENT).min(n - pos);
        let phoneme = rng.random_range(0..bank.phonemes.len()) as u16;
        segments.push(Segment {
            start: pos,
            len,
            phoneme,
        });
        pos += len;
    }

    let mut signal = alloc::vec![0.0f64; n];
    let two_pi = 2.0 * core::f64::consts::PI;
    for seg in &segments {
        let tpl = &bank.phonemes[seg.phoneme as usize];
        let gain = rng.random_range(0.8..1.2);
        let phases: Vec<f64> = tpl.freqs.iter().map(|_| rng.random_range(0.0..two_pi)).collect();
        let pitch_phase = rng.random_range(0.0..two_pi);
        for i in 0..seg.len {
            let t = (seg.start + i) as f64 / SAMPLE_RATE as f64;
            let mut v = 0.0;
            for ((f, a), ph) in tpl.freqs.iter().zip(&tpl.amps).zip(&phases) {
                v += a * libm::sin(two_pi * f * speaker.warp * t + ph);
            }
            for (h, a) in [(1.0, 0.15), (2.0, 0.08), (3.0, 0.04)] {
                v += a * libm::sin(two_pi * h * speaker.pitch_hz * t + pitch_phase);
            }
            let edge = i.min(seg.len - 1 - i);
            let env = if edge < FADE {
                0.5 - 0.5 * libm::cos(core::f64::consts::PI * edge as f64 / FADE as f64)
            } else {
                1.0
            };
            signal[seg.start + i] = gain * env * v;
        }
    }

    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let s = PEAK / peak;
        signal.iter_mut().for_each(|v| *v *= s);
    }
    let power = signal.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    let noise_std = libm::sqrt(power / libm::pow(10.0, cfg.snr_db / 10.0));
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::config(format!("{e}")))?;
        for v in signal.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let samples = signal.iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect();
    let frame_truth = frame_truth(&segments, n);
    Ok(Utterance {
        id,
        seed,
        speaker_id,
        samples,
        segments,
        frame_truth,
    })
}

/// Generates the whole corpus in utterance-id order.
pub fn generate(cfg: &CorpusConfig) -> Result<(Voicebank, Vec<Utterance>)> {
    let bank = Voicebank::new(cfg)?;
    let utts = (0..cfg.n_utts)
        .map(|id| {
            let (seed, spk) = utterance_identity(cfg, id);
            synthesize(cfg, &bank, id, seed, spk)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((bank, utts))
}
