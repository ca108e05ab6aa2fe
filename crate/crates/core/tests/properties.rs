use memfine_core::config::presets;
use memfine_core::mact::{self, Bins, Strategy as Plan};
use memfine_core::memory_model;
use memfine_core::moe_kernel::check::{self, InstanceLimits};
use memfine_core::moe_kernel::{
    backward, backward_chunked, forward, forward_chunked, ActivationMeter, ChunkPartition, SaveMode,
};
use memfine_core::routing_sim::{generate_trace, Distribution};
use memfine_core::{validate, RecomputeMode, ValidatedScenario};
use proptest::prelude::*;

fn toy_with_budget(budget: u64) -> ValidatedScenario {
    let mut s = presets::toy();
    s.hardware.gpu_memory = budget;
    validate(s).unwrap()
}

fn distribution() -> impl Strategy<Value = Distribution> {
    prop_oneof![
        Just(Distribution::Uniform),
        (0.01f64..5.0).prop_map(|alpha| Distribution::Dirichlet { alpha }),
        (0.0f64..=1.0).prop_map(|rho| Distribution::HotExpert { rho }),
        (0.05f64..3.0, 0.1f64..=1.0).prop_map(|(alpha0, decay)| Distribution::DepthSkew { alpha0, decay }),
    ]
}

fn bins() -> impl Strategy<Value = Bins> {
    proptest::collection::btree_set(1u64..20, 1..5).prop_map(|s| Bins::new(s.into_iter().collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// A cell marked feasible fits its stage's budget at `⌈s''/c⌉` copies.
    #[test]
    fn feasible_cells_fit(budget in 12_400u64..20_000, dist in distribution(), seed in any::<u64>(), b in bins()) {
        let scn = toy_with_budget(budget);
        let tr = generate_trace(&scn, dist, 3, seed).unwrap();
        let plan = mact::plan(&scn, &tr, Plan::Mact { bins: b }).unwrap();
        for cell in &plan.cells {
            let staged = scn.with_stage(cell.stage).unwrap().with_recompute(RecomputeMode::Chunked);
            let est = memory_model::estimate(&staged, cell.s_double_prime.div_ceil(cell.c_selected)).unwrap();
            prop_assert_eq!(est.feasible, cell.feasible, "{:?}", cell);
        }
    }

    /// The selected bin is the smallest one covering `c`, or the largest when clamped.
    #[test]
    fn bin_soundness(c in 1u64..40, b in bins()) {
        let pick = mact::select_bin(c, &b);
        prop_assert!(b.as_slice().contains(&pick.c_selected));
        if pick.clamped {
            prop_assert!(c > b.max());
            prop_assert_eq!(pick.c_selected, b.max());
        } else {
            prop_assert!(pick.c_selected >= c);
            prop_assert!(b.as_slice().iter().all(|&x| x < c || x >= pick.c_selected));
        }
    }

    /// More received copies never select fewer chunks.
    #[test]
    fn chunk_count_monotone(s1 in 0u64..10_000, extra in 0u64..10_000, bound in 1i64..5_000, b in bins()) {
        let c1 = mact::select_bin(mact::c_theoretical(s1, bound).unwrap(), &b).c_selected;
        let c2 = mact::select_bin(mact::c_theoretical(s1 + extra, bound).unwrap(), &b).c_selected;
        prop_assert!(c2 >= c1);
    }

    /// A larger budget never lowers `s'_max`.
    #[test]
    fn bound_monotone_in_budget(budget in 12_400u64..20_000, more in 0u64..5_000, stage in 0u64..2) {
        let a = mact::s_prime_max(&toy_with_budget(budget), stage).unwrap();
        let b = mact::s_prime_max(&toy_with_budget(budget + more), stage).unwrap();
        prop_assert!(b >= a);
    }

    #[test]
    fn plans_are_deterministic(dist in distribution(), seed in any::<u64>()) {
        let scn = toy_with_budget(13_200);
        let a = mact::plan(&scn, &generate_trace(&scn, dist, 4, seed).unwrap(), Plan::Mact { bins: Bins::default() }).unwrap();
        let b = mact::plan(&scn, &generate_trace(&scn, dist, 4, seed).unwrap(), Plan::Mact { bins: Bins::default() }).unwrap();
        prop_assert_eq!(a, b);
    }

    /// Every cell routes exactly `e·b·s·t_k` copies.
    #[test]
    fn traces_conserve_copies(dist in distribution(), seed in any::<u64>()) {
        let scn = validate(presets::model_ii()).unwrap();
        let tr = generate_trace(&scn, dist, 2, seed).unwrap();
        prop_assert!(tr.is_conserved());
    }

    /// Activation memory is affine in `s'` with slope `m_g·D_t·b·(2h + 2g_e)/(t·c)`.
    #[test]
    fn activation_affine(s1 in 0u64..16, s2 in 0u64..16) {
        let scn = validate(presets::toy()).unwrap();
        let a1 = memory_model::activation_memory(&scn, s1).unwrap().total as i64;
        let a2 = memory_model::activation_memory(&scn, s2).unwrap().total as i64;
        prop_assert_eq!(a2 - a1, 48 * (s2 as i64 - s1 as i64));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Arbitrary (possibly empty) chunk boundaries give the single-pass results.
    #[test]
    fn arbitrary_partitions(seed in any::<u64>(), cuts in proptest::collection::vec(0.0f64..=1.0, 0..6)) {
        let inst = check::random_instance(seed, InstanceLimits { tokens: 24, hidden: 6, intermediate: 8, experts: 4, top_k: 2 });
        let n = inst.batch.tokens();
        let mut bounds: Vec<usize> = cuts.iter().map(|f| (f * n as f64) as usize).collect();
        bounds.push(0);
        bounds.push(n);
        bounds.sort_unstable();
        let part = ChunkPartition::from_bounds(bounds, n).unwrap();

        let mut m0 = ActivationMeter::new(2);
        let base = forward(&inst.batch, &inst.weights, &mut m0, SaveMode::Keep).unwrap();
        let g0 = backward(&inst.y_grad, &inst.batch, &inst.weights, base.saved.as_ref(), &mut m0).unwrap();
        let mut m1 = ActivationMeter::new(2);
        let y = forward_chunked(&inst.batch, &inst.weights, &part, &mut m1).unwrap();
        let g1 = backward_chunked(&inst.y_grad, &inst.batch, &inst.weights, &part, &mut m1).unwrap();
        prop_assert_eq!(y, base.y);
        prop_assert_eq!(g1.x, g0.x);
        prop_assert!(g1.w.tensors().zip(g0.w.tensors()).all(|(a, b)| a == b));
        prop_assert_eq!(m1.current_bytes(), m1.replay().0);
    }
}
