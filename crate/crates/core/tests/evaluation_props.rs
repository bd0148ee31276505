//! Helix distance against brute force, and invariances of the metrics.

use latentcf::autodiff::Tensor;
use latentcf::autoencoder::Autoencoder;
use latentcf::datasets::{helix_distance, helix_point, HELIX_MAX, HELIX_MIN};
use latentcf::evaluation::{im1, knn_target_agreement, IM1_EPSILON};
use latentcf::nn::{Activation, Mlp};
use proptest::prelude::*;

const BRUTE_POINTS: usize = 1_000_000;

fn brute_force_distance(p: &[f64]) -> f64 {
    let step = (HELIX_MAX - HELIX_MIN) / (BRUTE_POINTS - 1) as f64;
    (0..BRUTE_POINTS)
        .map(|i| {
            let q = helix_point(HELIX_MIN + step * i as f64);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Linear autoencoder reconstructing `x` as `factor · x`.
fn scaling_autoencoder(factor: f64) -> Autoencoder {
    let eye = |c: f64| {
        let mut d = vec![0.0; 9];
        for i in 0..3 {
            d[4 * i] = c;
        }
        Tensor::new(d, vec![3, 3]).unwrap()
    };
    let enc = Mlp::from_parts(vec![3, 3], Activation::Tanh, vec![eye(factor)], vec![Tensor::zeros(&[3])]).unwrap();
    let dec = Mlp::from_parts(vec![3, 3], Activation::Tanh, vec![eye(1.0)], vec![Tensor::zeros(&[3])]).unwrap();
    Autoencoder::from_parts(enc, dec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn helix_distance_matches_brute_force(
        s in -4.5..4.5f64,
        dir in prop::collection::vec(-1.0..1.0f64, 3),
        r in 0.05..1.5f64,
    ) {
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let c = helix_point(s.clamp(HELIX_MIN, HELIX_MAX));
        let p: Vec<f64> = (0..3).map(|i| c[i] + r * dir[i] / norm).collect();
        let fast = helix_distance(&p);
        let brute = brute_force_distance(&p);
        prop_assert!(fast <= brute + 1e-12, "{fast} vs {brute}");
        prop_assert!(brute - fast < 1e-6, "{fast} vs {brute}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn knn_agreement_is_permutation_invariant(
        rows in prop::collection::vec((prop::collection::vec(-3.0..3.0f64, 3), 0u8..2), 12..40),
        x in prop::collection::vec(-3.0..3.0f64, 3),
        k in 1usize..12,
        rotate in 0usize..40,
    ) {
        let build = |rows: &[(Vec<f64>, u8)]| {
            let data: Vec<f64> = rows.iter().flat_map(|(p, _)| p.clone()).collect();
            let labels: Vec<u8> = rows.iter().map(|(_, l)| *l).collect();
            (Tensor::new(data, vec![rows.len(), 3]).unwrap(), labels)
        };
        let (reference, labels) = build(&rows);
        let mut permuted = rows.clone();
        permuted.rotate_left(rotate % rows.len());
        permuted.reverse();
        let (reference_p, labels_p) = build(&permuted);
        for target in [0u8, 1] {
            let a = knn_target_agreement(&x, &reference, &labels, k, target).unwrap();
            let b = knn_target_agreement(&x, &reference_p, &labels_p, k, target).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn im1_is_scale_covariant(
        x in prop::collection::vec(-3.0..3.0f64, 3),
        ft in 0.0..0.9f64,
        fs in 0.0..0.9f64,
        c in 0.5..4.0f64,
    ) {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-2);
        let (target, source) = (scaling_autoencoder(ft), scaling_autoencoder(fs));
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        let a = im1(&x, &target, &source, IM1_EPSILON).unwrap();
        let b = im1(&scaled, &target, &source, IM1_EPSILON).unwrap();
        prop_assert!((a - b).abs() <= 1e-6 * a.max(1.0), "{a} vs {b}");
        let exact_a = im1(&x, &target, &source, 0.0).unwrap();
        let exact_b = im1(&scaled, &target, &source, 0.0).unwrap();
        prop_assert!((exact_a - exact_b).abs() <= 1e-12 * exact_a.max(1.0), "{exact_a} vs {exact_b}");
    }
}
