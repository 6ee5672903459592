mod common;

use common::{brute_expected_best, check_pruned_search_oracle, rng, table_from};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use ttsnap::metrics::{budget_grid, relative_performance};
use ttsnap::par::Exec;
use ttsnap::pool::RewardTable;
use ttsnap::search::{
    average_ranks, best_of_n, budget_curves, budget_of, candidate_orders, candidates_for_budget,
    expected_best_of_n, per_candidate_cost, rank_sum_combine, sweep_schedules, ttsnap_search,
    BenchInstance, CostModel, CurveSpec, PruneSchedule,
};
use ttsnap::Error;

const M: usize = 20;

fn random_schedule(r: &mut ChaCha8Rng, steps: usize) -> PruneSchedule {
    let stages = r.random_range(0..4usize.min(steps));
    let mut ts: Vec<usize> = (1..steps).collect();
    while ts.len() > stages {
        ts.remove(r.random_range(0..ts.len()));
    }
    let alphas = ts.iter().map(|_| r.random_range(0.05..0.95)).collect();
    PruneSchedule::new(ts, alphas).unwrap()
}

/// Candidates whose early scores are noisy versions of their final reward,
/// with stage columns at every estimate step.
fn noisy_bench(seed: u64, instances: usize, rows: usize, steps: usize) -> Vec<BenchInstance> {
    let mut r = rng(seed);
    (0..instances)
        .map(|_| {
            let finals: Vec<f64> = (0..rows).map(|_| r.random_range(-1.0..1.0)).collect();
            let scores: Vec<Vec<f64>> = (0..steps)
                .map(|s| {
                    let noise = 1.5 * (1.0 - s as f64 / steps as f64);
                    finals.iter().map(|f| f + noise * common::normal(&mut r)).collect()
                })
                .collect();
            let selection = table_from(&scores, &finals, (0..steps).collect());
            BenchInstance { evaluations: vec![finals], selection }
        })
        .collect()
}

#[test]
fn pruned_search_matches_the_reference_simulator() {
    assert_eq!(check_pruned_search_oracle(1000, 51), Ok(1000));
}

#[test]
fn single_stage_count_matches_term_by_term_cost() {
    let cost = CostModel::default();
    let s = PruneSchedule::new(vec![6], vec![0.3]).unwrap();
    let per = 6.0 * 9.927 + 1.428 + 0.3 * (14.0 * 9.927 + 1.428);
    assert!((per_candidate_cost(&s, M, &cost) - per).abs() < 1e-12);
    for b in [200.0, 1000.0, 2000.0, 3800.0, 4000.0] {
        assert_eq!(candidates_for_budget(b, &s, M, &cost).unwrap(), (b / per).floor() as usize);
    }
    assert_eq!(candidates_for_budget(3800.0, &s, M, &cost).unwrap(), 36);
}

#[test]
fn empty_schedule_reduces_to_one_stage() {
    let cost = CostModel::default();
    let empty = PruneSchedule::empty();
    let mut r = rng(52);
    for _ in 0..1000 {
        let b = r.random_range(1.0..10_000.0);
        let want = (b / (M as f64 * 9.927 + 1.428)).floor() as usize;
        assert_eq!(candidates_for_budget(b, &empty, M, &cost).unwrap(), want, "budget {b}");
    }
    assert_eq!(budget_of(0, &empty, M, &cost), 0.0);
    assert_eq!(budget_of(1, &empty, M, &cost), M as f64 * 9.927 + 1.428);
}

#[test]
fn budget_round_trips_through_the_count() {
    let mut r = rng(53);
    for _ in 0..200 {
        let steps = r.random_range(2..30);
        let s = random_schedule(&mut r, steps);
        let cost = CostModel { b_d: r.random_range(0.1..20.0), b_v: r.random_range(0.0..5.0), include_final_verification: true };
        for n in 1..=100 {
            let b = budget_of(n, &s, steps, &cost);
            assert_eq!(candidates_for_budget(b, &s, steps, &cost).unwrap(), n);
        }
    }
}

#[test]
fn count_is_monotone_in_budget_and_retention() {
    let cost = CostModel::default();
    let mut r = rng(54);
    for _ in 0..200 {
        let s = random_schedule(&mut r, M);
        let mut prev = 0;
        for b in budget_grid(50.0, 8000.0, 37.0).unwrap() {
            let n = candidates_for_budget(b, &s, M, &cost).unwrap();
            assert!(n >= prev);
            prev = n;
        }
        for i in 0..s.stages() {
            let mut higher = s.clone();
            higher.retentions[i] = (s.retentions[i] + 0.04).min(0.99);
            let b = r.random_range(200.0..4000.0);
            assert!(candidates_for_budget(b, &higher, M, &cost).unwrap() <= candidates_for_budget(b, &s, M, &cost).unwrap());
        }
    }
}

#[test]
fn survivors_never_grow_and_never_vanish() {
    let bench = noisy_bench(55, 1, 200, M);
    let table = &bench[0].selection;
    let mut r = rng(56);
    let cost = CostModel::default();
    for _ in 0..500 {
        let s = random_schedule(&mut r, M);
        let n = r.random_range(1..=200);
        let res = ttsnap_search(table, &s, n, r.random(), M, &cost).unwrap();
        assert_eq!(res.survivors_per_stage[0], n);
        assert!(res.survivors_per_stage.windows(2).all(|w| w[1] <= w[0]));
        assert!(res.survivors_per_stage.iter().all(|&c| c >= 1));
        // Spent budget from the realized counts.
        let mut prev = 0;
        let mut want = 0.0;
        let bounds: Vec<usize> = s.timesteps.iter().copied().chain([M]).collect();
        for (c, t) in res.survivors_per_stage.iter().zip(bounds) {
            want += *c as f64 * ((t - prev) as f64 * cost.b_d + cost.b_v);
            prev = t;
        }
        assert!((res.spent_budget - want).abs() <= 1e-9 * want);
    }
}

#[test]
fn best_of_n_edge_cases() {
    let bench = noisy_bench(57, 1, 30, M);
    let t = &bench[0].selection;
    let cost = CostModel::default();
    let finals = t.final_column();
    let argmax = (0..30).fold(0, |b, i| if finals[i] > finals[b] { i } else { b });
    let all = best_of_n(t, 30, 1, M, &cost).unwrap();
    assert_eq!(all.chosen_index, argmax);
    assert_eq!(all.spent_budget, budget_of(30, &PruneSchedule::empty(), M, &cost));
    for seed in 0..20 {
        let one = best_of_n(t, 1, seed, M, &cost).unwrap();
        assert_eq!(one.chosen_reward, finals[one.chosen_index]);
        assert_eq!(one.survivors_per_stage, vec![1]);
    }
    assert!(matches!(best_of_n(t, 31, 0, M, &cost), Err(Error::PoolTooSmall { .. })));
}

#[test]
fn keep_all_pruning_is_best_of_n() {
    let bench = noisy_bench(58, 1, 8, M);
    let t = &bench[0].selection;
    let cost = CostModel::default();
    // ceil(0.999 n) = n for n <= 8.
    let keep_all = PruneSchedule::new(vec![3, 9, 15], vec![0.999; 3]).unwrap();
    for seed in 0..200 {
        for n in 1..=8 {
            let a = ttsnap_search(t, &keep_all, n, seed, M, &cost).unwrap();
            let b = best_of_n(t, n, seed, M, &cost).unwrap();
            assert_eq!(a.chosen_index, b.chosen_index);
            assert_eq!(a.survivors_per_stage, vec![n; 4]);
        }
    }
}

#[test]
fn expected_best_matches_subset_enumeration() {
    let mut r = rng(59);
    let rewards: Vec<f64> = (0..10).map(|_| r.random_range(-2.0..2.0)).collect();
    let mut prev = f64::NEG_INFINITY;
    for n in 1..=10 {
        let exact = expected_best_of_n(&rewards, n).unwrap();
        let brute = brute_expected_best(&rewards, n);
        assert!((exact - brute).abs() < 1e-12, "N={n}: {exact} vs {brute}");
        assert!(exact >= prev);
        prev = exact;
    }
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!((expected_best_of_n(&rewards, 10).unwrap() - max).abs() < 1e-12);
    assert!(expected_best_of_n(&rewards, 11).is_err());
}

/// `1 + #smaller + (#equal - 1) / 2`, counted directly.
fn counted_rank(col: &[f64], i: usize) -> f64 {
    let less = col.iter().filter(|&&v| v < col[i]).count();
    let equal = col.iter().filter(|&&v| v == col[i]).count();
    1.0 + less as f64 + (equal - 1) as f64 / 2.0
}

#[test]
fn rank_sums_match_direct_counting() {
    let mut r = rng(60);
    let tables: Vec<RewardTable> = (0..3)
        .map(|_| {
            let vals: Vec<f64> = (0..12).map(|_| r.random_range(0..4) as f64).collect();
            RewardTable::new(6, vec![5], vals).unwrap()
        })
        .collect();
    let combined = rank_sum_combine(&tables).unwrap();
    for c in 0..2 {
        for i in 0..6 {
            let want: f64 = tables.iter().map(|t| counted_rank(&t.column(c), i)).sum();
            assert_eq!(combined.get(i, c), want);
        }
    }
    let bad = RewardTable::new(5, vec![5], vec![0.0; 10]).unwrap();
    assert!(matches!(rank_sum_combine(&[tables[0].clone(), bad]), Err(Error::Shape(_))));
}

#[test]
fn rank_sums_of_monotone_copies_double() {
    let mut r = rng(61);
    let vals: Vec<f64> = (0..40).map(|_| r.random_range(-3.0..3.0)).collect();
    let t = RewardTable::new(20, vec![1], vals.clone()).unwrap();
    let warped = RewardTable::new(20, vec![1], vals.iter().map(|v| v.exp() * 3.0 - 1.0).collect()).unwrap();
    let single = rank_sum_combine(std::slice::from_ref(&t)).unwrap();
    let both = rank_sum_combine(&[t.clone(), warped]).unwrap();
    for (a, b) in single.values.iter().zip(&both.values) {
        assert_eq!(2.0 * a, *b);
    }
    for c in 0..2 {
        let col = t.column(c);
        let ranks = average_ranks(&col);
        let best_raw = (0..20).fold(0, |b, i| if col[i] > col[b] { i } else { b });
        let best_rank = (0..20).fold(0, |b, i| if ranks[i] > ranks[b] { i } else { b });
        assert_eq!(best_raw, best_rank);
    }
}

fn spec(budgets: Vec<f64>, repeats: usize) -> CurveSpec {
    CurveSpec { budgets, steps: M, cost: CostModel::default(), repeats, seed: 77 }
}

#[test]
fn best_of_n_curve_is_nondecreasing() {
    let bench = noisy_bench(62, 3, 200, M);
    let sp = spec(budget_grid(200.0, 4000.0, 190.0).unwrap(), 1000);
    let orders = candidate_orders(Exec::default(), &bench, &sp);
    let set = budget_curves(Exec::default(), &bench, &orders, &PruneSchedule::empty(), &sp).unwrap();
    assert_eq!(set.counts[0], 1);
    assert_eq!(*set.counts.last().unwrap(), 20);
    // Draws for larger N extend those for smaller N, so this holds exactly.
    assert!(set.curves[0].rewards.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn keep_all_curve_equals_best_of_n_at_the_effective_budget() {
    let bench = noisy_bench(63, 2, 60, M);
    let keep_all = PruneSchedule::new(vec![6], vec![0.999]).unwrap();
    let cost = CostModel::default();
    let per = per_candidate_cost(&keep_all, M, &cost);
    let counts: Vec<usize> = (1..=5).map(|k| 2 * k + 1).collect();
    let pruned_budgets: Vec<f64> = counts.iter().map(|&n| n as f64 * per).collect();
    let bon_budgets: Vec<f64> = counts.iter().map(|&n| budget_of(n, &PruneSchedule::empty(), M, &cost)).collect();
    let sp_p = spec(pruned_budgets, 50);
    let sp_b = spec(bon_budgets, 50);
    let orders = candidate_orders(Exec::default(), &bench, &sp_p);
    let a = budget_curves(Exec::default(), &bench, &orders, &keep_all, &sp_p).unwrap();
    let b = budget_curves(Exec::default(), &bench, &orders, &PruneSchedule::empty(), &sp_b).unwrap();
    assert_eq!(a.counts, counts);
    assert_eq!(b.counts, counts);
    assert_eq!(a.curves[0].rewards, b.curves[0].rewards);
}

#[test]
fn curves_reject_unaffordable_minimum_budgets() {
    let bench = noisy_bench(64, 1, 50, M);
    let sp = spec(vec![100.0, 300.0, 500.0], 5);
    let orders = candidate_orders(Exec::default(), &bench, &sp);
    let err = budget_curves(Exec::default(), &bench, &orders, &PruneSchedule::empty(), &sp);
    assert!(matches!(err, Err(Error::InvalidArgument(ref m)) if m.contains("minimum budget")), "{err:?}");
}

#[test]
fn sweep_ranks_by_omega_and_replays() {
    let bench = noisy_bench(65, 4, 200, M);
    let sp = spec(budget_grid(200.0, 4000.0, 190.0).unwrap(), 40);
    let grid = ttsnap::search::schedule_grid(&[2, 6, 12], &[0.2, 0.5], 2);
    let report = sweep_schedules(Exec::default(), &bench, &grid, &sp).unwrap();
    assert_eq!(report.entries.len() + report.skipped.len(), grid.len());
    assert!(report.entries.windows(2).all(|w| w[0].omega >= w[1].omega));
    assert_eq!(report, sweep_schedules(Exec::Sequential, &bench, &grid, &sp).unwrap());

    // A one-config grid reproduces a direct computation.
    let one = &grid[3];
    let single = sweep_schedules(Exec::default(), &bench, std::slice::from_ref(one), &sp).unwrap();
    let orders = candidate_orders(Exec::default(), &bench, &sp);
    let bon = budget_curves(Exec::default(), &bench, &orders, &PruneSchedule::empty(), &sp).unwrap();
    let tar = budget_curves(Exec::default(), &bench, &orders, one, &sp).unwrap();
    let omega = relative_performance(&tar.curves[0], &bon.curves[0]).unwrap();
    assert_eq!(single.entries[0].omega, omega);
    let best = report.entries[0].omega;
    for e in &report.entries {
        assert!(best >= e.omega);
    }
}

#[test]
fn schedules_are_validated() {
    assert!(PruneSchedule::new(vec![3, 2], vec![0.5, 0.5]).is_err());
    assert!(PruneSchedule::new(vec![3], vec![1.0]).is_err());
    assert!(PruneSchedule::new(vec![3], vec![0.0]).is_err());
    assert!(PruneSchedule::new(vec![3, 4], vec![0.5]).is_err());
    assert!(PruneSchedule::new(vec![0], vec![0.5]).is_err());
    let s = PruneSchedule::new(vec![20], vec![0.5]).unwrap();
    assert!(candidates_for_budget(1000.0, &s, M, &CostModel::default()).is_err());
    assert!(candidates_for_budget(0.0, &PruneSchedule::empty(), M, &CostModel::default()).is_err());
}
