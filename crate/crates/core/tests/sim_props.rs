use lads_core::bucketing::BucketModel;
use lads_core::noise::MixingCoefficient;
use lads_core::sim::world::draw_centers;
use lads_core::sim::{build_transcript, effective_sample_size, simulate_alignment, ExperimentConfig, Regime, World};
use lads_core::stats::ols_slope;
use proptest::prelude::*;

fn normalized(ws: &[f64]) -> Vec<f64> {
    let total: f64 = ws.iter().sum();
    ws.iter().map(|w| w / total).collect()
}

proptest! {
    #[test]
    fn n_eff_lies_between_one_and_support_size(ws in prop::collection::vec(0.0f64..10.0, 1..200)) {
        prop_assume!(ws.iter().any(|&w| w > 0.0));
        let n = effective_sample_size(&normalized(&ws)).unwrap();
        let support = ws.iter().filter(|&&w| w > 0.0).count() as f64;
        prop_assert!(n >= 1.0 - 1e-12 && n <= support * (1.0 + 1e-12));
    }

    #[test]
    fn n_eff_is_invariant_to_relabelling_cells(ws in prop::collection::vec(0.01f64..10.0, 1..100), shift in 0usize..100) {
        let w = normalized(&ws);
        let mut rotated = w.clone();
        rotated.rotate_left(shift % w.len());
        let (a, b) = (effective_sample_size(&w).unwrap(), effective_sample_size(&rotated).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a);
    }
}

#[test]
fn uniform_weights_give_full_sample_size() {
    assert!((effective_sample_size(&[1.0 / 40.0; 40]).unwrap() - 40.0).abs() < 1e-12);
}

#[test]
fn conditional_pipeline_reduces_to_depth_only_with_one_point_cluster() {
    for (k, t) in [(1, 16), (5, 32), (12, 8)] {
        let base = ExperimentConfig {
            centers: 1,
            radius: 0.0,
            accounts: k,
            queries: t,
            n_holdout: 10_000,
            n_probes: 0,
            alpha: MixingCoefficient::new(1.0).unwrap(),
            ..ExperimentConfig::default()
        };
        let lads = ExperimentConfig { regime: Regime::Lads, ..base.clone() };
        let simple = ExperimentConfig { regime: Regime::LadsSimple, ..base };
        let world = World::new(&lads).unwrap();
        let a = build_transcript(&lads, &world, 3).unwrap();
        let b = build_transcript(&simple, &world, 3).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.query, y.query);
            assert_eq!(x.depth, y.depth);
            assert_eq!(x.response, y.response);
        }
    }
}

#[test]
fn alignment_deviation_shrinks_like_inverse_root_m() {
    let model = BucketModel::nearest_center(draw_centers(4, 6, 3.0, 99), 1.0).unwrap();
    let ms = [250usize, 1000, 4000];
    let medians: Vec<f64> = ms
        .iter()
        .map(|&m| simulate_alignment(&model, 1.0, m, 200, 0.05, 7).unwrap().median_deviation())
        .collect();
    let lx: Vec<f64> = ms.iter().map(|&m| (m as f64).ln()).collect();
    let ly: Vec<f64> = medians.iter().map(|d| d.ln()).collect();
    let (slope, _) = ols_slope(&lx, &ly);
    assert!((slope + 0.5).abs() < 0.1, "slope {slope}, medians {medians:?}");
}
