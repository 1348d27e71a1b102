use dicelab_core::clustering::{assign_hard, kmeans_fit, purity, FeatureDump, KMeansConfig};
use dicelab_core::corpus::{generate, CorpusConfig};
use dicelab_core::mfcc::{MfccExtractor, MFCC_DIM};

#[test]
fn mfcc_frames_align_with_truth() {
    let cfg = CorpusConfig::new(30, 6, 3, 11);
    let (_, utts) = generate(&cfg).unwrap();
    let ex = MfccExtractor::new();
    for u in &utts {
        let f = ex.compute(&u.samples).unwrap();
        assert_eq!(f.rows(), u.frame_truth.len());
        assert!(f.all_finite());
    }
}

#[test]
fn pseudo_phonemes_are_kmeans_separable() {
    let cfg = CorpusConfig::new(60, 4, 4, 5).with_duration(2.0);
    let (_, utts) = generate(&cfg).unwrap();
    let ex = MfccExtractor::new();
    let mut dump = FeatureDump::new(MFCC_DIM);
    let mut truth = Vec::new();
    for u in &utts {
        dump.push(u.id as u32, ex.compute(&u.samples).unwrap()).unwrap();
        truth.extend_from_slice(&u.frame_truth);
    }
    let cb = kmeans_fit(&dump, &KMeansConfig::new(4, 1)).unwrap();
    let labels: Vec<u16> = assign_hard(&cb, &dump)
        .unwrap()
        .into_iter()
        .flat_map(|l| l.labels)
        .collect();
    let p = purity(&labels, &truth, 4, 4);
    println!("purity {p:.3}");
    assert!(p > 0.6, "purity {p}");
}
