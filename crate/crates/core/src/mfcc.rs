//! MFCC + Δ + ΔΔ features at the encoder's 50 Hz frame rate.
//!
//! 25 ms Hann window centred on each 20 ms hop, 512-point FFT, 26 HTK mel
//! filters over 0–8 kHz, log energies, orthonormal DCT-II to 13 cepstra, then
//! regression deltas over ±2 frames with edge clamping.

use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{FRAME_HOP, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WINDOW: usize = 400;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 26;
pub const N_CEPS: usize = 13;
pub const MFCC_DIM: usize = 3 * N_CEPS;
const DELTA_WIDTH: usize = 2;
const ENERGY_FLOOR: f64 = 1e-10;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Reusable FFT tables, window and filterbank.
#[derive(Debug, Clone)]
pub struct MfccExtractor {
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    dct: Vec<f64>,
    twiddles: Vec<(f64, f64)>,
}

impl Default for MfccExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MfccExtractor {
    pub fn new() -> Self {
        let window = (0..WINDOW)
            .map(|n| {
                0.5 - 0.5 * libm::cos(2.0 * core::f64::consts::PI * n as f64 / (WINDOW - 1) as f64)
            })
            .collect();

        let bins = N_FFT / 2 + 1;
        let mel_max = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let filters = (0..N_MELS)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .filter_map(|k| {
                        let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
                        let w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid));
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();

        let mut dct = vec![0.0; N_CEPS * N_MELS];
        for i in 0..N_CEPS {
            let scale = if i == 0 {
                libm::sqrt(1.0 / N_MELS as f64)
            } else {
                libm::sqrt(2.0 / N_MELS as f64)
            };
            for m in 0..N_MELS {
                dct[i * N_MELS + m] = scale
                    * libm::cos(core::f64::consts::PI * i as f64 * (m as f64 + 0.5) / N_MELS as f64);
            }
        }

        let twiddles = (0..N_FFT / 2)
            .map(|k| {
                let a = -2.0 * core::f64::consts::PI * k as f64 / N_FFT as f64;
                (libm::cos(a), libm::sin(a))
            })
            .collect();

        Self {
            window,
            filters,
            dct,
            twiddles,
        }
    }

    /// `[T × 39]` with `T = floor(len / 320)`.
    pub fn compute(&self, samples: &[f32]) -> Result<Tensor<f32>> {
        if samples.len() < WINDOW {
            return Err(Error::Length {
                needed: WINDOW,
                got: samples.len(),
            });
        }
        let frames = samples.len() / FRAME_HOP;
        let offset = (WINDOW - FRAME_HOP) / 2;
        let mut ceps = vec![0.0f64; frames * N_CEPS];
        let mut re = vec![0.0f64; N_FFT];
        let mut im = vec![0.0f64; N_FFT];
        let mut log_mel = [0.0f64; N_MELS];

        for t in 0..frames {
            re.iter_mut().for_each(|v| *v = 0.0);
            im.iter_mut().for_each(|v| *v = 0.0);
            let start = (t * FRAME_HOP) as isize - offset as isize;
            for n in 0..WINDOW {
                let idx = start + n as isize;
                if idx >= 0 && (idx as usize) < samples.len() {
                    re[n] = samples[idx as usize] as f64 * self.window[n];
                }
            }
            self.fft(&mut re, &mut im);
            for (m, filt) in self.filters.iter().enumerate() {
                let e: f64 = filt
                    .iter()
                    .map(|&(k, w)| w * (re[k] * re[k] + im[k] * im[k]))
                    .sum();
                log_mel[m] = libm::log(e.max(ENERGY_FLOOR));
            }
            for i in 0..N_CEPS {
                ceps[t * N_CEPS + i] = self.dct[i * N_MELS..(i + 1) * N_MELS]
                    .iter()
                    .zip(&log_mel)
                    .map(|(d, l)| d * l)
                    .sum();
            }
        }

        let d1 = deltas(&ceps, frames, N_CEPS);
        let d2 = deltas(&d1, frames, N_CEPS);
        let mut out = Vec::with_capacity(frames * MFCC_DIM);
        for t in 0..frames {
            for src in [&ceps, &d1, &d2] {
                out.extend(src[t * N_CEPS..(t + 1) * N_CEPS].iter().map(|v| *v as f32));
            }
        }
        Tensor::new(vec![frames, MFCC_DIM], out)
    }

    /// In-place iterative radix-2 FFT of length `N_FFT`.
    fn fft(&self, re: &mut [f64], im: &mut [f64]) {
        let n = N_FFT;
        let mut j = 0;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..len / 2 {
                    let (wr, wi) = self.twiddles[k * step];
                    let (a, b) = (start + k, start + k + len / 2);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

fn deltas(x: &[f64], frames: usize, dim: usize) -> Vec<f64> {
    let denom: f64 = 2.0 * (1..=DELTA_WIDTH).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = vec![0.0; x.len()];
    for t in 0..frames {
        for n in 1..=DELTA_WIDTH {
            let next = (t + n).min(frames - 1);
            let prev = t.saturating_sub(n);
            for i in 0..dim {
                out[t * dim + i] += n as f64 * (x[next * dim + i] - x[prev * dim + i]);
            }
        }
        for i in 0..dim {
            out[t * dim + i] /= denom;
        }
    }
    out
}

/// MFCC features of a waveform with a default extractor.
pub fn mfcc(samples: &[f32]) -> Result<Tensor<f32>> {
    MfccExtractor::new().compute(samples)
}
