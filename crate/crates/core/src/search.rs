//! Best-of-N and pruned search over a fixed candidate pool, with budget
//! accounting, rank-sum reward combination and schedule sweeps.
//!
//! Step conventions: a verification timestep `tau` counts completed
//! denoising steps, so pruning at `tau` scores the estimate recorded after
//! `tau` steps, i.e. estimate index `tau - 1`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{relative_performance, BudgetCurve};
use crate::par::Exec;
use crate::pool::RewardTable;
use crate::seeds;

/// Verification timesteps and the fraction of candidates kept at each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub timesteps: Vec<usize>,
    pub retentions: Vec<f64>,
}

impl PruneSchedule {
    pub fn new(timesteps: Vec<usize>, retentions: Vec<f64>) -> Result<Self> {
        let s = Self { timesteps, retentions };
        s.check_shape()?;
        Ok(s)
    }

    /// No pruning: plain best-of-N.
    pub fn empty() -> Self {
        Self { timesteps: Vec::new(), retentions: Vec::new() }
    }

    pub fn stages(&self) -> usize {
        self.timesteps.len()
    }

    fn check_shape(&self) -> Result<()> {
        if self.timesteps.len() != self.retentions.len() {
            return Err(Error::Shape("timesteps and retentions differ in length".into()));
        }
        if self.timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("timesteps must be strictly increasing".into()));
        }
        if self.timesteps.first() == Some(&0) {
            return Err(Error::InvalidArgument("timesteps start at 1".into()));
        }
        if self.retentions.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::InvalidArgument("retention ratios must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Shape checks plus `timesteps <= M - 1`.
    pub fn validate(&self, steps: usize) -> Result<()> {
        self.check_shape()?;
        if let Some(&last) = self.timesteps.last() {
            if last >= steps {
                return Err(Error::InvalidArgument(format!(
                    "timestep {last} outside [1, {}]",
                    steps.saturating_sub(1)
                )));
            }
        }
        Ok(())
    }

    /// Estimate indices the stage verifiers must cover.
    pub fn estimate_steps(&self) -> Vec<usize> {
        self.timesteps.iter().map(|t| t - 1).collect()
    }

    pub fn label(&self) -> (String, String) {
        let t = self.timesteps.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";");
        let a = self.retentions.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";");
        (t, a)
    }
}

/// Per-candidate cost of one denoising step and one verification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub b_d: f64,
    pub b_v: f64,
    /// Charge the verification of every survivor at the final step.
    #[serde(default = "default_true")]
    pub include_final_verification: bool,
}

fn default_true() -> bool {
    true
}

impl Default for CostModel {
    /// One flow-model call (9.927) and a reward call plus decoding
    /// (1.243 + 0.185), in TFLOPs.
    fn default() -> Self {
        Self { b_d: 9.927, b_v: 1.243 + 0.185, include_final_verification: true }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_d > 0.0 && self.b_d.is_finite() && self.b_v >= 0.0 && self.b_v.is_finite()) {
            return Err(Error::InvalidArgument("costs need B_d > 0 and B_v >= 0".into()));
        }
        Ok(())
    }

    /// Cost per candidate of each stage; the last stage ends at `steps`.
    pub fn stage_costs(&self, schedule: &PruneSchedule, steps: usize) -> Vec<f64> {
        let mut prev = 0;
        let mut out = Vec::with_capacity(schedule.stages() + 1);
        for &t in schedule.timesteps.iter().chain(std::iter::once(&steps)) {
            out.push((t - prev) as f64 * self.b_d + self.b_v);
            prev = t;
        }
        if !self.include_final_verification {
            *out.last_mut().expect("at least one stage") -= self.b_v;
        }
        out
    }
}

/// Expected cost of one initial candidate with fractional survivors.
pub fn per_candidate_cost(schedule: &PruneSchedule, steps: usize, cost: &CostModel) -> f64 {
    let mut keep = 1.0;
    let mut total = 0.0;
    for (i, c) in cost.stage_costs(schedule, steps).into_iter().enumerate() {
        total += keep * c;
        if i < schedule.stages() {
            keep *= schedule.retentions[i];
        }
    }
    total
}

/// `floor(B / per_candidate_cost)`.
pub fn candidates_for_budget(
    budget: f64,
    schedule: &PruneSchedule,
    steps: usize,
    cost: &CostModel,
) -> Result<usize> {
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(Error::InvalidArgument("budget must be positive".into()));
    }
    schedule.validate(steps)?;
    cost.validate()?;
    let c = per_candidate_cost(schedule, steps, cost);
    // Relative slack so that candidates_for_budget(budget_of(N)) == N.
    Ok((budget / c * (1.0 + 1e-12)).floor() as usize)
}

/// `N * per_candidate_cost`.
pub fn budget_of(n: usize, schedule: &PruneSchedule, steps: usize, cost: &CostModel) -> f64 {
    n as f64 * per_candidate_cost(schedule, steps, cost)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub chosen_index: usize,
    /// Final-column value of the chosen candidate in the selection table.
    pub chosen_reward: f64,
    pub spent_budget: f64,
    /// Candidates alive at the start of each stage, the last being the
    /// fully denoised set.
    pub survivors_per_stage: Vec<usize>,
    pub rng_seed: u64,
}

/// Seeded order over the pool; the first `N` entries are the draw for `N`,
/// so draws for different `N` share their prefix.
pub fn candidate_order(pool_size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool_size).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Top `keep` of `alive` by score; ties toward the lower pool index.
fn top_k(alive: &[usize], keep: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = alive.iter().map(|&i| (score(i), i)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.truncate(keep);
    ranked.into_iter().map(|(_, i)| i).collect()
}

/// Survivors of `count` candidates at retention `alpha`: `ceil(alpha * count)`,
/// at least one.
pub fn survivors(count: usize, alpha: f64) -> usize {
    ((alpha * count as f64 - 1e-9).ceil() as usize).clamp(1, count.max(1))
}

/// Runs the pruned search over an explicit candidate list.
pub fn search_candidates(
    table: &RewardTable,
    candidates: &[usize],
    schedule: &PruneSchedule,
    steps: usize,
    cost: &CostModel,
) -> Result<SearchResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("search needs at least one candidate".into()));
    }
    schedule.validate(steps)?;
    let stage_costs = cost.stage_costs(schedule, steps);
    let mut columns = Vec::with_capacity(schedule.stages());
    for s in schedule.estimate_steps() {
        columns.push(table.column_of(s).ok_or(Error::MissingCheckpoint(s))?);
    }
    let mut alive = candidates.to_vec();
    let mut counts = Vec::with_capacity(schedule.stages() + 1);
    let mut spent = 0.0;
    for (stage, &col) in columns.iter().enumerate() {
        counts.push(alive.len());
        spent += alive.len() as f64 * stage_costs[stage];
        let keep = survivors(alive.len(), schedule.retentions[stage]);
        alive = top_k(&alive, keep, |i| table.get(i, col));
    }
    counts.push(alive.len());
    spent += alive.len() as f64 * stage_costs[schedule.stages()];
    let chosen = top_k(&alive, 1, |i| table.final_reward(i))[0];
    Ok(SearchResult {
        chosen_index: chosen,
        chosen_reward: table.final_reward(chosen),
        spent_budget: spent,
        survivors_per_stage: counts,
        rng_seed: 0,
    })
}

fn draw(table: &RewardTable, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("search needs N >= 1".into()));
    }
    if n > table.rows {
        return Err(Error::PoolTooSmall { requested: n, available: table.rows });
    }
    let mut order = candidate_order(table.rows, seed);
    order.truncate(n);
    Ok(order)
}

/// Pruned search: keep the top `ceil(alpha_i * count)` at every timestep,
/// then return the best fully denoised survivor.
pub fn ttsnap_search(
    table: &RewardTable,
    schedule: &PruneSchedule,
    n: usize,
    seed: u64,
    steps: usize,
    cost: &CostModel,
) -> Result<SearchResult> {
    let candidates = draw(table, n, seed)?;
    let mut r = search_candidates(table, &candidates, schedule, steps, cost)?;
    r.rng_seed = seed;
    Ok(r)
}

pub fn best_of_n(
    table: &RewardTable,
    n: usize,
    seed: u64,
    steps: usize,
    cost: &CostModel,
) -> Result<SearchResult> {
    ttsnap_search(table, &PruneSchedule::empty(), n, seed, steps, cost)
}

/// Exact mean of the best final reward over all `N`-subsets of `rewards`.
///
/// With rewards sorted ascending, the k-th smallest (1-based) is the maximum
/// of `C(k - 1, N - 1)` of the `C(n, N)` subsets.
pub fn expected_best_of_n(rewards: &[f64], n: usize) -> Result<f64> {
    let total = rewards.len();
    if n == 0 || n > total {
        return Err(Error::PoolTooSmall { requested: n, available: total });
    }
    let mut sorted = rewards.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ln_fact = vec![0.0f64; total + 1];
    for i in 1..=total {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let ln_choose = |a: usize, b: usize| ln_fact[a] - ln_fact[b] - ln_fact[a - b];
    let denom = ln_choose(total, n);
    Ok(sorted
        .iter()
        .enumerate()
        .skip(n - 1)
        .map(|(k, r)| r * (ln_choose(k, n - 1) - denom).exp())
        .sum())
}

/// Per-column ranks (1 = worst, ties share the average rank) summed over
/// tables.
pub fn rank_sum_combine(tables: &[RewardTable]) -> Result<RewardTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::InvalidArgument("rank sum of no tables".into()))?;
    if tables.iter().any(|t| t.rows != first.rows || t.steps != first.steps) {
        return Err(Error::Shape("rank sum tables differ in shape".into()));
    }
    let mut values = vec![0.0; first.values.len()];
    let cols = first.cols();
    for t in tables {
        for c in 0..cols {
            for (r, rank) in average_ranks(&t.column(c)).into_iter().enumerate() {
                values[r * cols + c] += rank;
            }
        }
    }
    RewardTable::new(first.rows, first.steps.clone(), values)
}

/// 1-based ascending ranks, averaging ties.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// One instance's tables for benchmark curves.
#[derive(Debug, Clone)]
pub struct BenchInstance {
    /// Stage scores plus the final selection reward (possibly rank-summed).
    pub selection: RewardTable,
    /// Clean rewards of every candidate's final sample, one vector per
    /// evaluation reward.
    pub evaluations: Vec<Vec<f64>>,
}

/// Budget grid, step count, cost model and seed-averaging settings.
#[derive(Debug, Clone)]
pub struct CurveSpec {
    pub budgets: Vec<f64>,
    pub steps: usize,
    pub cost: CostModel,
    pub repeats: usize,
    pub seed: u64,
}

/// Seed-averaged curves for one schedule, one per evaluation reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub counts: Vec<usize>,
    pub mean_spent: Vec<f64>,
    pub curves: Vec<BudgetCurve>,
}

/// Seed of search repeat `r` on instance `i`. Shared by every algorithm so
/// comparisons use common random numbers.
pub fn repeat_seed(master: u64, instance: usize, repeat: usize) -> u64 {
    seeds::derive(master, &[seeds::SEARCH_REPEAT, instance as u64, repeat as u64])
}

/// Candidate orders for every (instance, repeat), reusable across budgets
/// and schedules.
pub fn candidate_orders(exec: Exec, bench: &[BenchInstance], spec: &CurveSpec) -> Vec<Vec<Vec<usize>>> {
    exec.map_range(bench.len(), |i| {
        (0..spec.repeats)
            .map(|r| candidate_order(bench[i].selection.rows, repeat_seed(spec.seed, i, r)))
            .collect()
    })
}

/// Evaluates `schedule` at every budget. Rewards are averaged over repeats
/// within an instance, then equally over instances.
pub fn budget_curves(
    exec: Exec,
    bench: &[BenchInstance],
    orders: &[Vec<Vec<usize>>],
    schedule: &PruneSchedule,
    spec: &CurveSpec,
) -> Result<CurveSet> {
    if bench.is_empty() || spec.repeats == 0 {
        return Err(Error::InvalidArgument("curves need instances and repeats >= 1".into()));
    }
    let n_eval = bench[0].evaluations.len();
    if n_eval == 0 || bench.iter().any(|b| b.evaluations.len() != n_eval) {
        return Err(Error::Shape("every instance needs the same evaluation rewards".into()));
    }
    let min_rows = bench.iter().map(|b| b.selection.rows).min().unwrap_or(0);
    let mut counts = Vec::with_capacity(spec.budgets.len());
    for &b in &spec.budgets {
        let n = candidates_for_budget(b, schedule, spec.steps, &spec.cost)?;
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "budget {b} affords no candidate; raise the minimum budget"
            )));
        }
        if n > min_rows {
            return Err(Error::PoolTooSmall { requested: n, available: min_rows });
        }
        counts.push(n);
    }
    // per instance: [budget][eval] sums and spent sums
    let per_instance = exec.try_map_range(bench.len(), |i| {
        let inst = &bench[i];
        let mut sums = vec![vec![0.0; n_eval]; counts.len()];
        let mut spent = vec![0.0; counts.len()];
        for order in &orders[i] {
            for (k, &n) in counts.iter().enumerate() {
                let r = search_candidates(&inst.selection, &order[..n], schedule, spec.steps, &spec.cost)?;
                spent[k] += r.spent_budget;
                for (e, eval) in inst.evaluations.iter().enumerate() {
                    sums[k][e] += eval[r.chosen_index];
                }
            }
        }
        Ok::<_, Error>((sums, spent))
    })?;
    let scale = 1.0 / (bench.len() * spec.repeats) as f64;
    let mut curves = Vec::with_capacity(n_eval);
    for e in 0..n_eval {
        let rewards = (0..counts.len())
            .map(|k| per_instance.iter().map(|(s, _)| s[k][e]).sum::<f64>() * scale)
            .collect();
        curves.push(BudgetCurve::new(spec.budgets.clone(), rewards)?);
    }
    let mean_spent = (0..counts.len())
        .map(|k| per_instance.iter().map(|(_, s)| s[k]).sum::<f64>() * scale)
        .collect();
    Ok(CurveSet { counts, mean_spent, curves })
}

/// Every schedule with `1..=max_stages` timesteps drawn from `timesteps`
/// and one retention per stage drawn from `retentions`.
pub fn schedule_grid(timesteps: &[usize], retentions: &[f64], max_stages: usize) -> Vec<PruneSchedule> {
    let mut ts = timesteps.to_vec();
    ts.sort_unstable();
    ts.dedup();
    let mut out = Vec::new();
    for m in 1..=max_stages.min(ts.len()) {
        for subset in combinations(&ts, m) {
            for alphas in product(retentions, m) {
                out.push(PruneSchedule { timesteps: subset.clone(), retentions: alphas });
            }
        }
    }
    out
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, x);
            out.push(rest);
        }
    }
    out
}

fn product(items: &[f64], k: usize) -> Vec<Vec<f64>> {
    (0..k).fold(vec![Vec::new()], |acc, _| {
        acc.into_iter()
            .flat_map(|prefix| {
                items.iter().map(move |&x| {
                    let mut p = prefix.clone();
                    p.push(x);
                    p
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub config_id: usize,
    pub schedule: PruneSchedule,
    pub counts: Vec<usize>,
    /// Curve of the first evaluation reward.
    pub rewards: Vec<f64>,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Sorted by omega, best first; ties keep grid order.
    pub entries: Vec<SweepEntry>,
    /// Configurations whose candidate counts fall outside the pool.
    pub skipped: Vec<(usize, PruneSchedule, String)>,
    pub reference: BudgetCurve,
}

/// Scores every schedule by omega against best-of-N on the first
/// evaluation reward.
pub fn sweep_schedules(
    exec: Exec,
    bench: &[BenchInstance],
    schedules: &[PruneSchedule],
    spec: &CurveSpec,
) -> Result<SweepReport> {
    if schedules.is_empty() {
        return Err(Error::InvalidArgument("empty schedule grid".into()));
    }
    let orders = candidate_orders(exec, bench, spec);
    let reference = budget_curves(exec, bench, &orders, &PruneSchedule::empty(), spec)?
        .curves
        .swap_remove(0);
    // Parallelism lives inside budget_curves; configs run in order.
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (id, sched) in schedules.iter().enumerate() {
        match budget_curves(exec, bench, &orders, sched, spec) {
            Ok(set) => {
                let curve = &set.curves[0];
                entries.push(SweepEntry {
                    config_id: id,
                    schedule: sched.clone(),
                    counts: set.counts,
                    omega: relative_performance(curve, &reference)?,
                    rewards: curve.rewards.clone(),
                });
            }
            Err(e @ (Error::PoolTooSmall { .. } | Error::InvalidArgument(_))) => {
                skipped.push((id, sched.clone(), e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    entries.sort_by(|a, b| b.omega.total_cmp(&a.omega).then(a.config_id.cmp(&b.config_id)));
    Ok(SweepReport { entries, skipped, reference })
}
