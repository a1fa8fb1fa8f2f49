use std::collections::HashMap;

use lads_core::bucketing::BucketModel;
use lads_core::gateway::{AccountId, Gateway, GatewayConfig, GatewayMode};
use lads_core::noise::{MixingCoefficient, SeedSpec};
use proptest::prelude::*;

fn gateway(alpha: f64) -> Gateway {
    let centers = vec![vec![0.0, 0.0], vec![4.0, 0.0], vec![0.0, 4.0]];
    Gateway::new(GatewayConfig {
        mode: GatewayMode::Conditional(BucketModel::nearest_center(centers, 1.0).unwrap()),
        seed_gen: SeedSpec::keyed(0x5eed),
        fresh_key: 17,
        noise_dim: 4,
        alpha: MixingCoefficient::new(alpha).unwrap(),
        stage_cap: None,
    })
    .unwrap()
}

fn requests() -> impl Strategy<Value = Vec<(u8, [f64; 2])>> {
    prop::collection::vec((0u8..4, [-2.0f64..6.0, -2.0f64..6.0]), 1..60)
}

fn account(k: u8) -> AccountId {
    AccountId::new(format!("user-{k}")).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn depth_counts_up_per_account_and_bucket(reqs in requests()) {
        let g = gateway(1.0);
        let mut expected: HashMap<(u8, u64), u64> = HashMap::new();
        for (k, q) in &reqs {
            let o = g.serve_conditional(&account(*k), q).unwrap();
            let d = expected.entry((*k, o.bucket.0)).or_insert(0);
            *d += 1;
            prop_assert_eq!(o.depth, *d);
        }
        let total: u64 = (0..4).filter_map(|k| g.ledger(&account(k))).map(|l| l.total_requests()).sum();
        prop_assert_eq!(total, reqs.len() as u64);
    }

    #[test]
    fn matched_cells_carry_identical_noise_at_full_coupling(reqs in requests()) {
        let g = gateway(1.0);
        let mut seen = HashMap::new();
        for (k, q) in &reqs {
            let o = g.serve_conditional(&account(*k), q).unwrap();
            let prev = seen.entry((o.bucket.0, o.depth)).or_insert_with(|| o.noise.clone());
            prop_assert!(prev.bit_eq(&o.noise));
        }
    }

    #[test]
    fn snapshot_commutes_with_serving(reqs in requests(), split in 0usize..60, alpha in prop::sample::select(vec![0.0, 0.7, 1.0])) {
        let split = split.min(reqs.len());
        let straight = gateway(alpha);
        let expected: Vec<_> = reqs.iter().map(|(k, q)| straight.serve_conditional(&account(*k), q).unwrap()).collect();

        let first = gateway(alpha);
        for (k, q) in &reqs[..split] {
            first.serve_conditional(&account(*k), q).unwrap();
        }
        let resumed = Gateway::restore(&first.snapshot()).unwrap();
        for ((k, q), want) in reqs[split..].iter().zip(&expected[split..]) {
            let got = resumed.serve_conditional(&account(*k), q).unwrap();
            prop_assert_eq!(got.depth, want.depth);
            prop_assert!(got.noise.bit_eq(&want.noise));
        }
    }

    #[test]
    fn reset_restarts_every_depth(reqs in requests()) {
        let g = gateway(1.0);
        for (k, q) in &reqs {
            g.serve_conditional(&account(*k), q).unwrap();
        }
        let stage = g.stage_id();
        g.reset_stage();
        prop_assert_eq!(g.stage_id(), stage + 1);
        let (k, q) = &reqs[0];
        prop_assert_eq!(g.serve_conditional(&account(*k), q).unwrap().depth, 1);
    }
}
