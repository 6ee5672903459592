//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code, clippy::too_many_arguments)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ttsnap::dynamics::MixtureModel;
use ttsnap::pool::{ProblemInstance, RewardTable};
use ttsnap::verifiers::RewardSpec;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// K components in `dim` dimensions with random weights, means and widths.
pub fn random_mixture(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> MixtureModel {
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let means = (0..k)
        .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let stds = (0..k).map(|_| rng.random_range(0.3..1.2)).collect();
    MixtureModel::from_unnormalized(&weights, means, stds).unwrap()
}

pub fn instance(mixture: MixtureModel, spec: RewardSpec) -> ProblemInstance {
    ProblemInstance {
        id: "test".into(),
        mixture,
        reward_spec: spec,
        extra_reward_specs: Vec::new(),
    }
}

/// Concordant minus discordant pairs over C(n, 2), by enumeration.
pub fn brute_kendall(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let s = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            if a[i] != a[j] && b[i] != b[j] {
                score += s as i64;
            }
        }
    }
    score as f64 / (n * (n - 1) / 2) as f64
}

/// Euclidean distance relative to the larger norm.
pub fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

/// Central differences with a step scaled to each coordinate.
pub fn central_differences(params: &[f64], loss: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let h = 1e-6 * params[i].abs().max(1.0);
            p[i] = params[i] + h;
            let hi = loss(&p);
            p[i] = params[i] - h;
            let lo = loss(&p);
            p[i] = params[i];
            (hi - lo) / (2.0 * h)
        })
        .collect()
}

/// Retention ratio held as an exact fraction.
#[derive(Debug, Clone, Copy)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `max(1, ceil(count * num / den))` in integer arithmetic.
    pub fn keep(self, count: usize) -> usize {
        (count * self.num).div_ceil(self.den).max(1)
    }
}

pub struct Simulated {
    pub chosen: usize,
    pub counts: Vec<usize>,
    pub spent: f64,
}

/// Straight-line pruned search. `scores[s][i]` is candidate `i`'s score at
/// stage `s`; `finals[i]` its clean reward. Selection repeatedly takes the
/// best remaining candidate, preferring the lower pool index on ties.
pub fn simulate_pruned_search(
    scores: &[Vec<f64>],
    finals: &[f64],
    candidates: &[usize],
    timesteps: &[usize],
    ratios: &[Ratio],
    steps: usize,
    b_d: f64,
    b_v: f64,
) -> Simulated {
    let pick_best = |pool: &[usize], key: &dyn Fn(usize) -> f64| -> usize {
        let mut best = pool[0];
        for &i in &pool[1..] {
            if key(i) > key(best) || (key(i) == key(best) && i < best) {
                best = i;
            }
        }
        best
    };
    let mut alive = candidates.to_vec();
    let mut counts = Vec::new();
    let mut spent = 0.0;
    let mut prev = 0;
    for (s, (&tau, &ratio)) in timesteps.iter().zip(ratios).enumerate() {
        counts.push(alive.len());
        spent += alive.len() as f64 * ((tau - prev) as f64 * b_d + b_v);
        prev = tau;
        let keep = ratio.keep(alive.len());
        let mut kept = Vec::new();
        let mut rest = alive.clone();
        for _ in 0..keep {
            let b = pick_best(&rest, &|i| scores[s][i]);
            rest.retain(|&i| i != b);
            kept.push(b);
        }
        alive = kept;
    }
    counts.push(alive.len());
    spent += alive.len() as f64 * ((steps - prev) as f64 * b_d + b_v);
    let chosen = pick_best(&alive, &|i| finals[i]);
    Simulated { chosen, counts, spent }
}

/// Table with stage columns at `steps` followed by the final column.
pub fn table_from(scores: &[Vec<f64>], finals: &[f64], steps: Vec<usize>) -> RewardTable {
    let rows = finals.len();
    let mut values = Vec::with_capacity(rows * (scores.len() + 1));
    for i in 0..rows {
        for col in scores {
            values.push(col[i]);
        }
        values.push(finals[i]);
    }
    RewardTable::new(rows, steps, values).unwrap()
}

/// Mean of the best over every `n`-subset, by enumeration.
pub fn brute_expected_best(rewards: &[f64], n: usize) -> f64 {
    fn rec(rewards: &[f64], start: usize, left: usize, best: f64, acc: &mut (f64, usize)) {
        if left == 0 {
            acc.0 += best;
            acc.1 += 1;
            return;
        }
        for i in start..rewards.len() {
            rec(rewards, i + 1, left - 1, best.max(rewards[i]), acc);
        }
    }
    let mut acc = (0.0, 0);
    rec(rewards, 0, n, f64::NEG_INFINITY, &mut acc);
    acc.0 / acc.1 as f64
}

/// Random small pools and schedules checked against
/// [`simulate_pruned_search`]. Returns the number of pools checked.
pub fn check_pruned_search_oracle(trials: usize, seed: u64) -> Result<usize, String> {
    use ttsnap::search::{ttsnap_search, CostModel, PruneSchedule};
    let mut r = rng(seed);
    for trial in 0..trials {
        let steps = r.random_range(2..=5usize);
        let rows = r.random_range(1..=8usize);
        let stages = r.random_range(0..steps);
        let mut timesteps: Vec<usize> = (1..steps).collect();
        while timesteps.len() > stages {
            let k = r.random_range(0..timesteps.len());
            timesteps.remove(k);
        }
        let ratios: Vec<Ratio> = timesteps
            .iter()
            .map(|_| {
                let den = r.random_range(2..=10usize);
                Ratio { num: r.random_range(1..den), den }
            })
            .collect();
        // Coarse values on some pools so ties are exercised.
        let coarse = trial % 3 == 0;
        let value = |r: &mut ChaCha8Rng| {
            if coarse {
                r.random_range(0..3) as f64
            } else {
                r.random_range(-1.0..1.0)
            }
        };
        let scores: Vec<Vec<f64>> = timesteps
            .iter()
            .map(|_| (0..rows).map(|_| value(&mut r)).collect())
            .collect();
        let finals: Vec<f64> = (0..rows).map(|_| value(&mut r)).collect();
        let table = table_from(&scores, &finals, timesteps.iter().map(|t| t - 1).collect());
        let schedule = PruneSchedule::new(timesteps.clone(), ratios.iter().map(|q| q.value()).collect())
            .map_err(|e| e.to_string())?;
        let cost = CostModel { b_d: r.random_range(0.5..10.0), b_v: r.random_range(0.0..2.0), include_final_verification: true };
        let n = r.random_range(1..=rows);
        let search_seed: u64 = r.random();
        let got = ttsnap_search(&table, &schedule, n, search_seed, steps, &cost).map_err(|e| e.to_string())?;
        let drawn = &ttsnap::search::candidate_order(rows, search_seed)[..n];
        let want = simulate_pruned_search(&scores, &finals, drawn, &timesteps, &ratios, steps, cost.b_d, cost.b_v);
        if got.chosen_index != want.chosen
            || got.survivors_per_stage != want.counts
            || (got.spent_budget - want.spent).abs() > 1e-9 * want.spent.max(1.0)
        {
            return Err(format!(
                "pool {trial}: chose {} with counts {:?} spent {}, oracle chose {} with counts {:?} spent {}",
                got.chosen_index, got.survivors_per_stage, got.spent_budget, want.chosen, want.counts, want.spent
            ));
        }
    }
    Ok(trials)
}
