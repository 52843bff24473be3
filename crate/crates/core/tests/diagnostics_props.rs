use dlab_core::data::{DataConfig, InverseIndex, Renderer, ShapeBank};
use dlab_core::diagnostics::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn renderer(k: usize) -> (Renderer, InverseIndex) {
    let cfg = DataConfig { image_size: 16, identities: k, viewpoints: Some(12), ..DataConfig::default() };
    let bank = ShapeBank::generate(k, 9).unwrap();
    let index = InverseIndex::build(&bank, &cfg).unwrap();
    (Renderer::new(bank, cfg).unwrap(), index)
}

#[test]
fn random_features_score_chance_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
    let features: Vec<Vec<f64>> = (0..1000).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
    let map = nn_map(&features, &labels).unwrap();
    assert!((map - 0.1).abs() < 0.05, "{map}");
}

#[test]
fn pca_preserves_distances_of_planar_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let basis = DMatrix::from_fn(6, 6, |_, _| rng.random::<f64>() - 0.5).qr().q();
    let pts: Vec<[f64; 2]> = (0..50).map(|_| [3.0 * rng.random::<f64>(), rng.random::<f64>()]).collect();
    let features: Vec<Vec<f64>> = pts
        .iter()
        .map(|p| (0..6).map(|j| p[0] * basis[(j, 0)] + p[1] * basis[(j, 1)] + 0.7).collect())
        .collect();
    let emb = pca_embed(&features).unwrap();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    for i in 0..pts.len() {
        for j in 0..i {
            let d0 = dist(&features[i], &features[j]);
            let d1 = dist(&emb[i], &emb[j]);
            assert!((d0 - d1).abs() < 1e-8, "{d0} vs {d1}");
        }
    }
}

#[test]
fn copy_oracle_mismatch_rate_is_one_minus_one_over_k() {
    let (r, index) = renderer(4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let stat = common_stat(&CopyVSource, &r, &index, 10_000, &mut rng).unwrap();
    assert_eq!(stat.stat_real, 0.0);
    assert_eq!(stat.rejected, 0);
    assert!((stat.stat_fake - 0.75).abs() < 0.02, "{stat:?}");
}

#[test]
fn ideal_oracle_is_perfect() {
    let (r, index) = renderer(4);
    let ideal = IdealTransfer { renderer: &r, index: &index };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(common_stat(&ideal, &r, &index, 300, &mut rng).unwrap().stat_fake, 0.0);
    assert_eq!(transfer_error(&ideal, &r, 100, &mut rng).unwrap(), 0.0);
    assert_eq!(shortcut_index(&ideal, &r, 100, &mut rng).unwrap(), 0.0);
    assert_eq!(shortcut_index(&CopyVSource, &r, 100, &mut rng).unwrap(), 1.0);
    assert!(transfer_error(&CopyVSource, &r, 100, &mut rng).unwrap() > 0.0);
}

fn clustered(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..60).map(|i| i % 4).collect();
    let features = labels
        .iter()
        .map(|&l| (0..5).map(|j| if j == l { 1.0 } else { 0.0 } + 0.6 * rng.random::<f64>()).collect())
        .collect();
    (features, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn map_is_invariant_to_rotation_scale_and_shift(seed in 0u64..1000, scale in 0.01f64..100.0, shift in -5.0f64..5.0) {
        let (features, labels) = clustered(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let q = DMatrix::from_fn(5, 5, |_, _| rng.random::<f64>() - 0.5).qr().q();
        let moved: Vec<Vec<f64>> = features
            .iter()
            .map(|f| (0..5).map(|i| scale * (0..5).map(|j| q[(i, j)] * f[j]).sum::<f64>() + shift).collect())
            .collect();
        let a = nn_map(&features, &labels).unwrap();
        let b = nn_map(&moved, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
