//! Frame features for clustering: MFCCs or a frozen encoder layer.

use dicelab_core::clustering::FeatureDump;
use dicelab_core::mfcc::{MfccExtractor, MFCC_DIM};
use dicelab_core::model::{Encoder, LayerFeatures};
use dicelab_core::probes::encoder_layers;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::Corpus;

fn collect(dim: usize, corpus: &Corpus, rows: Vec<dicelab_core::Tensor<f32>>) -> Result<FeatureDump> {
    let mut dump = FeatureDump::new(dim);
    for (u, t) in corpus.utterances.iter().zip(rows) {
        dump.push(u.id as u32, t)?;
    }
    Ok(dump)
}

pub fn mfcc_features(corpus: &Corpus) -> Result<FeatureDump> {
    let ex = MfccExtractor::new();
    let rows = corpus
        .utterances
        .par_iter()
        .map(|u| ex.compute(&u.samples))
        .collect::<Result<Vec<_>, _>>()?;
    collect(MFCC_DIM, corpus, rows)
}

/// Clean-input activations of `layer` (0 = conv embeddings).
pub fn teacher_features(encoder: &Encoder, corpus: &Corpus, layer: usize) -> Result<FeatureDump> {
    if layer > encoder.cfg.layers {
        return Err(Error::config(format!(
            "layer {layer} out of range for a {}-layer model",
            encoder.cfg.layers
        )));
    }
    let rows = corpus
        .utterances
        .par_iter()
        .map(|u| encoder.layer_features(&u.samples, layer))
        .collect::<Result<Vec<_>, _>>()?;
    collect(encoder.cfg.dim, corpus, rows)
}

/// Every layer's clean-input activations, per utterance.
pub fn all_layers(encoder: &Encoder, corpus: &Corpus) -> Result<Vec<LayerFeatures>> {
    Ok(corpus
        .utterances
        .par_iter()
        .map(|u| encoder_layers(encoder, &u.samples))
        .collect::<Result<Vec<_>, _>>()?)
}
