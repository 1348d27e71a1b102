use dicelab_core::clustering::{
    assign_hard, kmeans_fit, soft_labels, Codebook, FeatureDump, KMeansConfig,
};
use dicelab_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum inertia over all 2^n two-cluster labelings, each scored at its
/// induced centroids.
fn exhaustive_two_means(points: &[[f32; 2]]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) - 1 {
        let mut inertia = 0.0;
        for side in [true, false] {
            let members: Vec<[f64; 2]> = (0..n)
                .filter(|&i| ((mask >> i) & 1 == 1) == side)
                .map(|i| [points[i][0] as f64, points[i][1] as f64])
                .collect();
            let cx = members.iter().map(|p| p[0]).sum::<f64>() / members.len() as f64;
            let cy = members.iter().map(|p| p[1]).sum::<f64>() / members.len() as f64;
            inertia += members
                .iter()
                .map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2))
                .sum::<f64>();
        }
        best = best.min(inertia);
    }
    best
}

fn dump(points: &[Vec<f32>]) -> FeatureDump {
    let dim = points[0].len();
    let mut d = FeatureDump::new(dim);
    let flat = points.iter().flatten().copied().collect();
    d.push(0, Tensor::new(vec![points.len(), dim], flat).unwrap()).unwrap();
    d
}

#[test]
fn two_means_matches_exhaustive_partition() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let pts: Vec<[f32; 2]> = (0..8)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let oracle = exhaustive_two_means(&pts);
        let cb = kmeans_fit(
            &dump(&pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>()),
            &KMeansConfig::new(2, seed),
        )
        .unwrap();
        assert!(
            (cb.inertia - oracle).abs() < 1e-9,
            "seed {seed}: kmeans {} vs exhaustive {}",
            cb.inertia,
            oracle
        );
    }
}

#[test]
fn hard_labels_match_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dim = 6;
    let cents: Vec<f32> = (0..10 * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let cb = Codebook {
        centroids: Tensor::new(vec![10, dim], cents.clone()).unwrap(),
        inertia: 0.0,
        iterations: 0,
        seed: 0,
        samples: 0,
        history: vec![],
    };
    let frames: Vec<f32> = (0..1000 * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut d = FeatureDump::new(dim);
    d.push(0, Tensor::new(vec![1000, dim], frames.clone()).unwrap()).unwrap();
    let got = assign_hard(&cb, &d).unwrap();
    for t in 0..1000 {
        let f = &frames[t * dim..(t + 1) * dim];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..10 {
            let c = &cents[j * dim..(j + 1) * dim];
            let dist: f64 = f.iter().zip(c).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        assert_eq!(got[0].labels[t] as usize, best);
    }
}

#[test]
fn cold_soft_labels_agree_with_hard_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dim = 4;
    let k = 8;
    let cents: Vec<f32> = (0..k * dim).map(|_| rng.random_range(-5.0..5.0)).collect();
    let cb = Codebook {
        centroids: Tensor::new(vec![k, dim], cents).unwrap(),
        inertia: 0.0,
        iterations: 0,
        seed: 0,
        samples: 0,
        history: vec![],
    };
    let frames: Vec<f32> = (0..1000 * dim).map(|_| rng.random_range(-5.0..5.0)).collect();
    let mut d = FeatureDump::new(dim);
    d.push(0, Tensor::new(vec![1000, dim], frames).unwrap()).unwrap();
    let hard = assign_hard(&cb, &d).unwrap();
    let soft = soft_labels(&cb, &d, 1e-3).unwrap();
    for t in 0..1000 {
        let row = soft[0].row(t);
        let argmax = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        assert_eq!(argmax as u16, hard[0].labels[t]);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
