//! Probe runs against a corpus on disk.

use dicelab_core::model::Encoder;
use dicelab_core::probes::{probe_train, ProbeConfig, ProbeResult, ProbeTask, ProbeUtterance};
use dicelab_core::Tensor;

use crate::error::Result;
use crate::features::all_layers;
use crate::store::Corpus;

pub fn classes(corpus: &Corpus, task: ProbeTask) -> usize {
    match task {
        ProbeTask::Phoneme => corpus.config().phonemes,
        ProbeTask::Speaker => corpus.config().speakers,
    }
}

/// Probe inputs from arbitrary per-utterance layer stacks.
pub fn probe_data(corpus: &Corpus, layers: Vec<Vec<Tensor<f32>>>) -> Vec<ProbeUtterance> {
    corpus
        .utterances
        .iter()
        .zip(layers)
        .map(|(u, layers)| ProbeUtterance {
            id: u.id as u32,
            layers,
            frame_truth: u.frame_truth.clone(),
            speaker: u.speaker_id,
        })
        .collect()
}

/// Probes every layer of a frozen encoder.
pub fn probe_encoder(encoder: &Encoder, corpus: &Corpus, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let data = probe_data(corpus, all_layers(encoder, corpus)?);
    Ok(probe_train(&data, classes(corpus, cfg.task), cfg)?)
}
