//! Flow invertibility, log-determinants against a dense determinant, the
//! change-of-variables identity and the metric spectrum against nalgebra.

use latentcf::autodiff::jacobian;
use latentcf::flow::{alternating_masks, base_log_prob, CouplingLayer, FlowModel};
use latentcf::geometry::{inverse_metric, spectrum, DEFAULT_RATIO_CUT};
use latentcf::linalg::frobenius;
use latentcf::nn::{Activation, Mlp};
use nalgebra::{DMatrix, Matrix3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Flow with every network randomly initialized, so no layer is the identity.
fn random_flow(seed: u64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = Activation::LeakyRelu { slope: 0.01 };
    let layers = alternating_masks(3, 6)
        .into_iter()
        .map(|mask| {
            let s = Mlp::new(&[3, 16, 16, 3], act, &mut rng).unwrap();
            let t = Mlp::new(&[3, 16, 16, 3], act, &mut rng).unwrap();
            CouplingLayer::new(mask, s, t).unwrap()
        })
        .collect();
    FlowModel::from_layers(3, 2.0, layers).unwrap()
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 3)
}

fn dense_jacobian(flow: &FlowModel, z: &[f64]) -> Vec<Vec<f64>> {
    jacobian(|g, v| Ok(flow.forward_graph(g, v)?.0), z).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn round_trips(seed in any::<u64>(), p in point()) {
        let flow = random_flow(seed);
        let x = flow.forward(&p).unwrap();
        let back = flow.inverse(&x).unwrap();
        for (a, b) in back.iter().zip(&p) {
            prop_assert!((a - b).abs() < 1e-9, "{back:?} vs {p:?}");
        }
        let z = flow.inverse(&p).unwrap();
        let again = flow.forward(&z).unwrap();
        for (a, b) in again.iter().zip(&p) {
            prop_assert!((a - b).abs() < 1e-9, "{again:?} vs {p:?}");
        }
    }

    #[test]
    fn log_det_matches_dense_determinant(seed in any::<u64>(), z in point()) {
        let flow = random_flow(seed);
        let j = dense_jacobian(&flow, &z);
        let det = Matrix3::from_fn(|r, c| j[r][c]).determinant();
        let from_flow = flow.log_det_jacobian(&z).unwrap().exp();
        prop_assert!(det > 0.0);
        prop_assert!((from_flow - det).abs() / det < 1e-6, "{from_flow} vs {det}");
    }

    #[test]
    fn change_of_variables(seed in any::<u64>(), z in point()) {
        let flow = random_flow(seed);
        let x = flow.forward(&z).unwrap();
        let via_inverse = flow.log_prob(&x).unwrap();
        let via_forward = base_log_prob(&z) - flow.log_det_jacobian(&z).unwrap();
        prop_assert!((via_inverse - via_forward).abs() < 1e-10, "{via_inverse} vs {via_forward}");
    }

    #[test]
    fn metric_spectrum_reconstructs_and_matches_nalgebra(seed in any::<u64>(), z in point()) {
        let flow = random_flow(seed);
        let report = spectrum(&flow, &z, DEFAULT_RATIO_CUT).unwrap();
        let metric = inverse_metric(&flow, &z).unwrap();
        let rebuilt = report.reconstructed_metric();
        let diff: Vec<Vec<f64>> = metric
            .iter()
            .zip(&rebuilt)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        prop_assert!(frobenius(&diff) / frobenius(&metric) < 1e-8);

        let j = dense_jacobian(&flow, &z);
        let mut oracle: Vec<f64> = DMatrix::from_fn(3, 3, |r, c| j[r][c]).singular_values().iter().copied().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        for (s, o) in report.singular_values.iter().zip(&oracle) {
            prop_assert!((s - o).abs() <= 1e-10 * oracle[0], "{s} vs {o}");
        }
    }
}
