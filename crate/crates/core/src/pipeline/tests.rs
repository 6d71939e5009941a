use super::*;
use proptest::prelude::*;
use rand::Rng as _;

/// Closed-form recurrence for a flow shop processed in block order:
/// `end(o,b) = max(end(o−1,b), end(o,b−1)) + T_o(b)`.
fn recurrence_makespan(cost: &CostModel, samples: usize, blocks: usize) -> f64 {
    let sizes = split_even(samples, blocks);
    let mut prev = [0.0f64; 3];
    for &s in &sizes {
        let t = [cost.tee_time(s), cost.comm_time(s), cost.coord_time(s)];
        let mut cur = [0.0; 3];
        for o in 0..3 {
            let ready: f64 = if o == 0 { 0.0 } else { cur[o - 1] };
            cur[o] = ready.max(prev[o]) + t[o];
        }
        prev = cur;
    }
    prev[2]
}

fn uniform_stage_cost(t: f64, block: usize) -> CostModel {
    CostModel {
        per_sample_tee_seconds: t / block as f64,
        per_sample_coord_seconds: t / block as f64,
        comm_constant_seconds: t,
        ..CostModel::default()
    }
}

fn random_cost(rng: &mut crate::rng::Rng) -> CostModel {
    let mut c = CostModel::calibrated(
        10f64.powf(rng.random_range(-6.0..-4.0)),
        rng.random_range(6.0..7.0),
        10f64.powf(rng.random_range(-7.0..-4.0)),
        10f64.powf(rng.random_range(-5.0..-1.0)),
    );
    if rng.random_bool(0.3) {
        c.comm_mode = CommMode::Linear {
            bytes_per_second: 10f64.powf(rng.random_range(6.0..9.0)),
        };
    }
    c
}

#[test]
fn single_block_has_no_overlap() {
    let c = CostModel::default();
    let s = simulate_schedule(&c, 1000, 1).unwrap();
    let expect = c.tee_time(1000) + c.comm_time(1000) + c.coord_time(1000);
    assert_eq!(s.makespan, expect);
    s.verify(&c).unwrap();
}

#[test]
fn equal_stage_times_give_b_plus_two() {
    let t = 0.5;
    for b in [2usize, 4, 8] {
        let c = uniform_stage_cost(t, 64 / b);
        let s = simulate_schedule(&c, 64, b).unwrap();
        assert!((s.makespan - (b as f64 + 2.0) * t).abs() < 1e-12, "B={b}: {}", s.makespan);
        s.verify(&c).unwrap();
    }
}

#[test]
fn sixty_four_samples_four_blocks_is_six_t() {
    let c = uniform_stage_cost(1.0, 16);
    let s = simulate_schedule(&c, 64, 4).unwrap();
    assert!((s.makespan - 6.0).abs() < 1e-12);
}

#[test]
fn oversized_block_count_clamps() {
    let c = CostModel::default();
    let s = simulate_schedule(&c, 5, 20).unwrap();
    assert_eq!(s.block_sizes, vec![1; 5]);
    s.verify(&c).unwrap();
    let empty = simulate_schedule(&c, 0, 4).unwrap();
    assert_eq!(empty.block_sizes, vec![0]);
    assert_eq!(empty.makespan, 0.0);
}

#[test]
fn even_split_sizes_differ_by_at_most_one() {
    for n in [1usize, 7, 64, 1001] {
        for b in [1usize, 3, 8, 64] {
            let s = split_even(n, b);
            assert_eq!(s.iter().sum::<usize>(), n);
            assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
        }
    }
}

#[test]
fn epc_overflow_is_reported() {
    let c = CostModel {
        epc_bytes: 10_000,
        sample_bytes: 100,
        shallow_model_bytes: 5_000,
        ..CostModel::default()
    };
    assert!(matches!(
        simulate_schedule(&c, 100, 1),
        Err(PipelineError::EpcInfeasible { .. })
    ));
    // 50 samples per block fit exactly.
    assert!(simulate_schedule(&c, 100, 2).is_ok());
    let (b, _) = optimize_blocks(&c, 100, 64).unwrap();
    assert!(b >= 2);
    let tiny = CostModel { epc_bytes: 4_000, ..c };
    assert!(matches!(
        optimize_blocks(&tiny, 100, 64),
        Err(PipelineError::EpcInfeasible { .. })
    ));
}

#[test]
fn invalid_inputs() {
    let c = CostModel::default();
    assert!(simulate_schedule(&c, 10, 0).is_err());
    assert!(optimize_blocks(&c, 10, 0).is_err());
    let bad = CostModel { per_sample_coord_seconds: 0.0, ..c };
    assert!(simulate_schedule(&bad, 10, 1).is_err());
    assert!(speedup_ratio(&c, 10, 0.0).is_err());
}

#[test]
fn optimizer_matches_brute_force_on_random_instances() {
    let mut rng = crate::rng::stream(2024, 0);
    for _ in 0..100 {
        let c = random_cost(&mut rng);
        let n = rng.random_range(1..5000);
        let (b, s) = optimize_blocks(&c, n, 64).unwrap();
        let mut best = (1, f64::INFINITY);
        for cand in 1..=64 {
            let m = recurrence_makespan(&c, n, cand);
            if m < best.1 {
                best = (cand, m);
            }
        }
        // The engine and the recurrence may differ in the last ulp.
        assert!((s.makespan - best.1).abs() <= 1e-12 * best.1.max(1.0));
        assert!(recurrence_makespan(&c, n, b) <= best.1 * (1.0 + 1e-12));
        s.verify(&c).unwrap();
    }
}

#[test]
fn coordinator_heavy_config_benefits_from_pipelining() {
    let c = CostModel {
        per_sample_tee_seconds: 2.0e-5,
        per_sample_coord_seconds: 2.0e-5,
        comm_constant_seconds: 1.0e-5,
        ..CostModel::default()
    };
    let single = simulate_schedule(&c, 128, 1).unwrap();
    let (_, best) = optimize_blocks(&c, 128, 64).unwrap();
    assert!(best.makespan < single.makespan);
    assert!(speedup_ratio(&c, 128, 0.5).unwrap() >= 2.0);
}

#[test]
fn dominant_constant_comm_prefers_one_block() {
    let c = CostModel {
        comm_constant_seconds: 10.0,
        ..CostModel::default()
    };
    let (b, _) = optimize_blocks(&c, 10_000, 64).unwrap();
    assert_eq!(b, 1);
    assert_eq!(speedup_ratio(&c, 10_000, 0.5).unwrap(), 1.0);
}

#[test]
fn measure_times_properties() {
    let c = CostModel::default();
    let (u1, t1) = measure_times(&c, 4000).unwrap();
    let (u2, _) = measure_times(&c, 8000).unwrap();
    assert_eq!(u2, 2.0 * u1);
    assert!(t1 <= simulate_schedule(&c, 4000, 1).unwrap().makespan);
    let ratio = t1 / u1;
    assert!((2.0..=10.0).contains(&ratio), "T_tr/T_un = {ratio}");
    assert_eq!(measure_times(&c, 0).unwrap().0, 0.0);
}

#[test]
fn speedup_grows_with_coordinator_share() {
    let base = CostModel::default();
    let mut prev = 0.0;
    for share in [0.02, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0] {
        let c = CostModel {
            per_sample_coord_seconds: share * base.per_sample_tee_seconds,
            ..base
        };
        let r = speedup_ratio(&c, 20_000, 0.5).unwrap();
        assert!(r >= prev, "share {share}: {r} < {prev}");
        prev = r;
    }
}

#[test]
fn schedule_csv_has_one_row_per_entry() {
    let s = simulate_schedule(&CostModel::default(), 10, 2).unwrap();
    let mut buf = Vec::new();
    s.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
    assert!(text.starts_with("operation,block,start,end"));
}

#[test]
fn shared_coordinator_single_party_matches_schedule() {
    let c = CostModel::default();
    let s = simulate_schedule(&c, 3000, 16).unwrap();
    let done = simulate_parties(&[c], &[3000], &[16]).unwrap();
    assert_eq!(done[0], s.makespan);
}

proptest! {
    #[test]
    fn timelines_satisfy_constraints(seed in any::<u64>(), n in 0usize..3000, b in 1usize..80) {
        let mut rng = crate::rng::stream(seed, 0);
        let c = random_cost(&mut rng);
        let s = simulate_schedule(&c, n, b).unwrap();
        prop_assert!(s.verify(&c).is_ok());
        let oracle = recurrence_makespan(&c, n, b);
        prop_assert!((s.makespan - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn extra_cost_never_shortens_optimal_makespan(seed in any::<u64>(), n in 1usize..2000, bump in 1.0f64..3.0, which in 0usize..3) {
        let mut rng = crate::rng::stream(seed, 1);
        let c = random_cost(&mut rng);
        let mut slower = c;
        match which {
            0 => slower.per_sample_tee_seconds *= bump,
            1 => slower.comm_constant_seconds *= bump,
            _ => slower.per_sample_coord_seconds *= bump,
        }
        let (_, a) = optimize_blocks(&c, n, 64).unwrap();
        let (_, b) = optimize_blocks(&slower, n, 64).unwrap();
        prop_assert!(b.makespan >= a.makespan);
    }
}
