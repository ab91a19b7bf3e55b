use ep_cli::harness::{
    check_dispatch, combine_error, fabric_options, run_pass, verify_case, Case, ExpertStub, Scenario, Values, Weights,
};
use ep_cli::props::check_flushes;
use ep_core::config::{Algorithm, HtCombinePath, LlLayout};
use ep_core::world::World;
use proptest::prelude::*;

fn case() -> impl Strategy<Value = Case> {
    (
        prop_oneof![Just(Algorithm::Ll), Just(Algorithm::Ht)],
        prop_oneof![Just(1usize), Just(2), Just(4), Just(8)],
        prop_oneof![Just(1usize), Just(2)],
        1usize..=3,
        1usize..=24,
        prop_oneof![Just(1usize), Just(2), Just(4), Just(8)],
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
        0u64..1000,
    )
        .prop_filter_map("shape", |(algorithm, ranks, nodes, per, tokens, topk, legacy, hier, staged, delay_seed)| {
            let experts = ranks * per * 2;
            if ranks % nodes != 0 || topk > experts {
                return None;
            }
            Some(Case {
                algorithm,
                ranks,
                nodes,
                experts,
                tokens,
                topk,
                hidden: 16,
                layout: if legacy { LlLayout::Legacy } else { LlLayout::Optimized },
                combine_path: if hier { HtCombinePath::Hierarchical } else { HtCombinePath::Flat },
                staged: staged && algorithm == Algorithm::Ll,
                delay_seed,
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn random_cases_match_the_oracle(c in case()) {
        let rep = verify_case(&c).map_err(TestCaseError::fail)?;
        prop_assert!(rep.passes(&c), "{}", rep.describe_failure(&c));
    }

    #[test]
    fn ll_counters_announce_every_pair(c in case(), seed in 0u64..1000) {
        let c = Case { algorithm: Algorithm::Ll, ..c };
        let cfg = c.config();
        let mut w = World::create(&cfg, fabric_options(Some(c.delay_seed), false)).unwrap();
        let sc = Scenario::generate(&cfg, seed, Values::Random, Weights::Random).unwrap();
        let res = run_pass(&mut w, &sc, ExpertStub::Scale, seed, c.staged).unwrap();
        check_flushes(&sc, &res.flushes).map_err(TestCaseError::fail)?;
        let sent: usize = sc.topk.iter().map(Vec::len).sum();
        let received: usize = res.recv.iter().flat_map(|r| r.experts.iter().map(Vec::len)).sum();
        prop_assert_eq!(sent, received);
        for r in &res.recv {
            let lens: Vec<i64> = r.experts.iter().map(|rows| rows.len() as i64).collect();
            prop_assert_eq!(&r.counters, &lens);
        }
    }
}

#[test]
fn shifted_combine_slot_is_caught() {
    let c = Case {
        algorithm: Algorithm::Ll,
        ranks: 2,
        nodes: 1,
        experts: 4,
        tokens: 8,
        topk: 2,
        hidden: 16,
        layout: LlLayout::Optimized,
        combine_path: HtCombinePath::Flat,
        staged: false,
        delay_seed: 3,
    };
    let cfg = c.config();
    let mut w = World::create(&cfg, fabric_options(Some(3), false)).unwrap();
    for r in 0..cfg.num_ranks {
        w.group_mut(r).set_debug_combine_slot_shift(true);
    }
    let sc = Scenario::generate(&cfg, 11, Values::Random, Weights::Random).unwrap();
    let res = run_pass(&mut w, &sc, ExpertStub::Affine, 11, false).unwrap();
    check_dispatch(&sc, &res.recv).unwrap();
    let err = combine_error(&res.combined, &sc.oracle_combine(ExpertStub::Affine, 11));
    assert!(err > c.tolerance(), "shifted slot went unnoticed (error {err:e})");
}
