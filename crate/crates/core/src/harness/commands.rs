use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LossKind, Strategy};
use super::narf::{distill_set, kendall_by_step, noisiest_third, reward_of, train_model, Scorer};
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::metrics::{integrated_gain, relative_performance, summarize, BudgetCurve};
use crate::par::Exec;
use crate::pool::{
    generate_pool_with, load_pool, reward_table_with, save_pool, DiversityConfig,
    EstimateScorer, FrozenReward, ProblemInstance, Provenance, RewardTable, TrajectoryPool,
};
use crate::search::{
    budget_curves, candidate_orders, schedule_grid, sweep_schedules, BenchInstance, CurveSpec,
    PruneSchedule,
};
use crate::seeds;
use crate::verifiers::{reward_clean, NoiseAwareVerifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Eval,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Eval => "eval",
        }
    }

    fn seed_tag(self) -> u64 {
        match self {
            Role::Train => seeds::ROLE_TRAIN,
            Role::Eval => seeds::ROLE_EVAL,
        }
    }
}

/// Output layout under the run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn pool(&self, role: Role, id: &str) -> PathBuf {
        self.root.join("pools").join(role.name()).join(format!("{id}.pool"))
    }

    pub fn pool_stats(&self) -> PathBuf {
        self.root.join("pools").join("stats.csv")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.json"))
    }

    pub fn narf(&self, file: &str) -> PathBuf {
        self.root.join("narf").join(file)
    }

    pub fn search(&self, file: &str) -> PathBuf {
        self.root.join("search").join(file)
    }

    pub fn evaluate(&self, file: &str) -> PathBuf {
        self.root.join("evaluate").join(file)
    }

    pub fn sweep(&self, file: &str) -> PathBuf {
        self.root.join("sweep").join(file)
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.json")
    }
}

/// Name of the deployed verifier checkpoint for reward `k`.
pub fn main_checkpoint_name(k: usize) -> String {
    format!("reward{k}")
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn stamp(cfg: &ExperimentConfig) -> [String; 2] {
    [cfg.hash(), cfg.master_seed.to_string()]
}

fn stamped_header(cols: &[&str]) -> Vec<String> {
    ["config_hash", "seed"].iter().chain(cols).map(|s| s.to_string()).collect()
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn echo_config(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    write_json(&layout.config_echo(), cfg)
}

fn role_instances(cfg: &ExperimentConfig, role: Role) -> Result<Vec<ProblemInstance>> {
    match role {
        Role::Train => cfg.train_instances(),
        Role::Eval => cfg.eval_instances(),
    }
}

fn role_pool_size(cfg: &ExperimentConfig, role: Role) -> usize {
    match role {
        Role::Train => cfg.pools.train_per_instance,
        Role::Eval => cfg.pools.eval_size,
    }
}

fn role_diversity(cfg: &ExperimentConfig, role: Role) -> DiversityConfig {
    match role {
        Role::Train => cfg.pools.train_diversity,
        Role::Eval => cfg.pools.eval_diversity,
    }
}

/// Generates one role's pools in memory.
pub fn generate_role_pools(exec: Exec, cfg: &ExperimentConfig, role: Role) -> Result<Vec<TrajectoryPool>> {
    let schedule = cfg.schedule.build()?;
    let instances = role_instances(cfg, role)?;
    let n = role_pool_size(cfg, role);
    let diversity = role_diversity(cfg, role);
    let provenance = Provenance { config_hash: cfg.hash(), master_seed: cfg.master_seed };
    // Diversity couples each batch, so instances are the parallel unit.
    let pools = exec.try_map_range(instances.len(), |i| {
        let seed = cfg.pool_seed(role.seed_tag(), i);
        let mut pool = generate_pool_with(Exec::Sequential, &instances[i], &schedule, n, seed, diversity)?;
        pool.provenance = provenance.clone();
        Ok::<_, Error>(pool)
    })?;
    Ok(pools)
}

pub fn load_role_pools(cfg: &ExperimentConfig, layout: &Layout, role: Role) -> Result<Vec<TrajectoryPool>> {
    let schedule = cfg.schedule.build()?;
    role_instances(cfg, role)?
        .iter()
        .map(|inst| load_pool(&layout.pool(role, &inst.id), &schedule))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub role: String,
    pub instances: usize,
    pub per_instance: usize,
    pub mean_reward_std: f64,
    /// Same measurement with the role's diversity setting flipped, on the
    /// first instance.
    pub first_std: f64,
    pub first_std_flipped: f64,
}

fn final_reward_std(pool: &TrajectoryPool, inst: &ProblemInstance) -> Result<f64> {
    let r = pool
        .trajectories
        .iter()
        .map(|t| reward_clean(&inst.reward_spec, &inst.mixture, t.final_sample()))
        .collect::<Result<Vec<_>>>()?;
    Ok(if r.len() > 1 { summarize(&r).std } else { 0.0 })
}

/// Writes pool files for the given roles plus a reward-spread summary.
pub fn cmd_gen_pool(exec: Exec, cfg: &ExperimentConfig, out: &Path, roles: &[Role]) -> Result<Vec<PoolStats>> {
    cfg.validate()?;
    let layout = Layout::new(out);
    echo_config(cfg, &layout)?;
    let schedule = cfg.schedule.build()?;
    let mut stats = Vec::new();
    for &role in roles {
        let instances = role_instances(cfg, role)?;
        let pools = generate_role_pools(exec, cfg, role)?;
        for (pool, inst) in pools.iter().zip(&instances) {
            save_pool(pool, &layout.pool(role, &inst.id))?;
        }
        let stds = pools
            .iter()
            .zip(&instances)
            .map(|(p, i)| final_reward_std(p, i))
            .collect::<Result<Vec<_>>>()?;
        let mut flipped = role_diversity(cfg, role);
        flipped.enabled = !flipped.enabled;
        let n = role_pool_size(cfg, role);
        let alt = generate_pool_with(exec, &instances[0], &schedule, n, cfg.pool_seed(role.seed_tag(), 0), flipped)?;
        let s = PoolStats {
            role: role.name().into(),
            instances: instances.len(),
            per_instance: n,
            mean_reward_std: stds.iter().sum::<f64>() / stds.len() as f64,
            first_std: stds[0],
            first_std_flipped: final_reward_std(&alt, &instances[0])?,
        };
        log::info!(
            "{} pools: {} x {}, mean final-reward std {:.4} (first instance {:.4}, diversity flipped {:.4})",
            s.role, s.instances, s.per_instance, s.mean_reward_std, s.first_std, s.first_std_flipped
        );
        stats.push(s);
    }
    let header = stamped_header(&["role", "instances", "per_instance", "diversity", "mean_reward_std", "first_std", "first_std_flipped_diversity"]);
    let rows = stats
        .iter()
        .map(|s| {
            let role = if s.role == "train" { Role::Train } else { Role::Eval };
            let mut r = stamp(cfg).to_vec();
            r.extend([
                s.role.clone(),
                s.instances.to_string(),
                s.per_instance.to_string(),
                role_diversity(cfg, role).enabled.to_string(),
                f(s.mean_reward_std),
                f(s.first_std),
                f(s.first_std_flipped),
            ]);
            r
        })
        .collect::<Vec<_>>();
    write_csv(&layout.pool_stats(), &header, &rows)?;
    Ok(stats)
}

/// Kendall tables and training summaries from `train-narf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarfReport {
    pub steps: Vec<usize>,
    pub sigmas: Vec<f64>,
    /// Column name to per-step mean held-out Kendall tau. Always holds
    /// `frozen` and `main`.
    pub kendall: BTreeMap<String, Vec<f64>>,
    /// (train instances, mean Kendall over trained steps)
    pub data_scaling: Vec<(usize, f64)>,
    /// Model label to per-batch losses.
    pub losses: BTreeMap<String, Vec<f64>>,
    pub noisiest_steps: usize,
}

impl NarfReport {
    /// Mean of a column over the noisiest third of trained steps.
    pub fn noisy_mean(&self, column: &str) -> Option<f64> {
        let v = self.kendall.get(column)?;
        let n = self.noisiest_steps.min(v.len());
        Some(v[..n].iter().sum::<f64>() / n as f64)
    }
}

fn model_label(strategy: Strategy, loss: LossKind) -> String {
    let l = match loss {
        LossKind::Mse => "mse",
        LossKind::Bt => "bt",
        LossKind::BtLog => "bt_log",
    };
    format!("{}_{l}", strategy.name())
}

/// Trains the deployed verifier per reward, the comparison models and the
/// data-scaling series; evaluates all on the held-out pools.
pub fn cmd_train_narf(exec: Exec, cfg: &ExperimentConfig, out: &Path) -> Result<NarfReport> {
    cfg.validate()?;
    let layout = Layout::new(out);
    echo_config(cfg, &layout)?;
    let train_instances = cfg.train_instances()?;
    let train_pools = load_role_pools(cfg, &layout, Role::Train)?;
    let eval_instances = cfg.eval_instances()?;
    let eval_pools = load_role_pools(cfg, &layout, Role::Eval)?;
    let schedule = cfg.schedule.build()?;
    let start = cfg.narf.start_step;
    let n_rewards = train_instances[0].all_reward_specs().len();

    let mut kendall = BTreeMap::new();
    let mut losses = BTreeMap::new();
    kendall.insert(
        "frozen".to_string(),
        kendall_by_step(exec, &eval_pools, &eval_instances, 0, Scorer::Frozen, start)?,
    );

    let main_label = model_label(cfg.narf.strategy, cfg.narf.loss);
    for k in 0..n_rewards {
        let data = distill_set(cfg, &train_pools, &train_instances, k)?;
        let label = format!("reward{k}/{main_label}");
        let (v, log) = train_model(cfg, &train_instances, &data, k, cfg.narf.strategy, cfg.narf.loss, &label)?;
        v.save(&layout.checkpoint(&main_checkpoint_name(k)))?;
        if k == 0 {
            kendall.insert(
                "main".to_string(),
                kendall_by_step(exec, &eval_pools, &eval_instances, 0, Scorer::Model(&v), start)?,
            );
            losses.insert(main_label.clone(), log.losses);
        }
    }

    let data = distill_set(cfg, &train_pools, &train_instances, 0)?;
    if cfg.narf.compare {
        let mut variants: Vec<(Strategy, LossKind)> = Strategy::ALL.iter().map(|&s| (s, LossKind::Mse)).collect();
        variants.extend([(Strategy::Curriculum, LossKind::Bt), (Strategy::Curriculum, LossKind::BtLog)]);
        let trained = exec.try_map_range(variants.len(), |i| {
            let (s, l) = variants[i];
            let label = model_label(s, l);
            let (v, log) = train_model(cfg, &train_instances, &data, 0, s, l, &format!("compare/{label}"))?;
            Ok::<_, Error>((label, v, log))
        })?;
        for (label, v, log) in trained {
            let tau = kendall_by_step(exec, &eval_pools, &eval_instances, 0, Scorer::Model(&v), start)?;
            v.save(&layout.checkpoint(&format!("compare_{label}")))?;
            kendall.insert(label.clone(), tau);
            losses.insert(format!("compare/{label}"), log.losses);
        }
    }

    let mut data_scaling = Vec::new();
    if cfg.narf.data_scaling {
        let mut sizes = cfg.pools.train_sizes.clone();
        sizes.sort_unstable();
        sizes.dedup();
        let sizes: Vec<usize> = sizes.into_iter().filter(|&s| s <= train_instances.len()).collect();
        let results = exec.try_map_range(sizes.len(), |i| {
            let n = sizes[i];
            let sub = distill_set(cfg, &train_pools[..n], &train_instances[..n], 0)?;
            let label = format!("scaling/{n}");
            let (v, _) = train_model(cfg, &train_instances[..n], &sub, 0, cfg.narf.strategy, cfg.narf.loss, &label)?;
            let tau = kendall_by_step(exec, &eval_pools, &eval_instances, 0, Scorer::Model(&v), start)?;
            Ok::<_, Error>((n, tau.iter().sum::<f64>() / tau.len() as f64))
        })?;
        data_scaling = results;
    }

    let steps: Vec<usize> = (0..=start).collect();
    let sigmas: Vec<f64> = steps.iter().map(|&j| schedule.sigma(j + 1)).collect();
    let report = NarfReport {
        steps,
        sigmas,
        kendall,
        data_scaling,
        losses,
        noisiest_steps: noisiest_third(start),
    };
    write_narf_outputs(cfg, &layout, &report)?;
    Ok(report)
}

fn write_narf_outputs(cfg: &ExperimentConfig, layout: &Layout, report: &NarfReport) -> Result<()> {
    let cols: Vec<&String> = report.kendall.keys().collect();
    let mut header = stamped_header(&["step", "sigma"]);
    header.extend(cols.iter().map(|c| c.to_string()));
    let rows = report
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let mut r = stamp(cfg).to_vec();
            r.push(step.to_string());
            r.push(f(report.sigmas[i]));
            r.extend(cols.iter().map(|c| f(report.kendall[*c][i])));
            r
        })
        .collect::<Vec<_>>();
    write_csv(&layout.narf("kendall.csv"), &header, &rows)?;

    let header = stamped_header(&["model", "mean_kendall_all_steps", "mean_kendall_noisiest_third"]);
    let rows = cols
        .iter()
        .map(|c| {
            let v = &report.kendall[*c];
            let mut r = stamp(cfg).to_vec();
            r.extend([
                c.to_string(),
                f(v.iter().sum::<f64>() / v.len() as f64),
                f(report.noisy_mean(c).expect("column exists")),
            ]);
            r
        })
        .collect::<Vec<_>>();
    write_csv(&layout.narf("strategies.csv"), &header, &rows)?;

    let header = stamped_header(&["train_instances", "trajectories", "mean_kendall"]);
    let rows = report
        .data_scaling
        .iter()
        .map(|(n, tau)| {
            let mut r = stamp(cfg).to_vec();
            r.extend([n.to_string(), (n * cfg.pools.train_per_instance).to_string(), f(*tau)]);
            r
        })
        .collect::<Vec<_>>();
    write_csv(&layout.narf("data_scaling.csv"), &header, &rows)?;

    let header = stamped_header(&["model", "batch", "loss"]);
    let rows = report
        .losses
        .iter()
        .flat_map(|(m, ls)| {
            ls.iter().enumerate().map(move |(b, l)| {
                let mut r = stamp(cfg).to_vec();
                r.extend([m.clone(), b.to_string(), f(*l)]);
                r
            })
        })
        .collect::<Vec<_>>();
    write_csv(&layout.narf("losses.csv"), &header, &rows)?;
    write_json(&layout.narf("report.json"), report)
}

/// Selection and evaluation tables for every eval instance.
#[derive(Debug, Clone)]
pub struct SearchTables {
    pub bon: Vec<BenchInstance>,
    pub ttsp: Vec<BenchInstance>,
    pub ttsnap: Vec<BenchInstance>,
    pub reward_names: Vec<String>,
}

fn reward_names(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("reward{k}")).collect()
}

/// Builds the search inputs from eval pools and deployed verifiers.
pub fn search_tables(
    exec: Exec,
    cfg: &ExperimentConfig,
    eval_pools: &[TrajectoryPool],
    verifiers: &[NoiseAwareVerifier],
    stage_steps: &[usize],
) -> Result<SearchTables> {
    let instances = cfg.eval_instances()?;
    let n_rewards = instances[0].all_reward_specs().len();
    if verifiers.len() != n_rewards {
        return Err(Error::Shape(format!("{n_rewards} rewards but {} verifiers", verifiers.len())));
    }
    let mut out = SearchTables { bon: Vec::new(), ttsp: Vec::new(), ttsnap: Vec::new(), reward_names: reward_names(n_rewards) };
    for (pool, inst) in eval_pools.iter().zip(&instances) {
        let mut frozen_tables = Vec::new();
        let mut model_tables = Vec::new();
        for (k, v) in verifiers.iter().enumerate() {
            let spec = reward_of(inst, k)?;
            let frozen = FrozenReward { spec, mixture: &inst.mixture };
            frozen_tables.push(reward_table_with(exec, pool, &frozen, spec, &inst.mixture, stage_steps)?);
            model_tables.push(reward_table_with(exec, pool, v as &dyn EstimateScorer, spec, &inst.mixture, stage_steps)?);
        }
        let evaluations: Vec<Vec<f64>> = frozen_tables.iter().map(RewardTable::final_column).collect();
        let select = |tables: Vec<RewardTable>| -> Result<RewardTable> {
            if cfg.search.combine_rewards && tables.len() > 1 {
                crate::search::rank_sum_combine(&tables)
            } else {
                Ok(tables.into_iter().next().expect("at least one reward"))
            }
        };
        let bon_tables = frozen_tables.iter().map(RewardTable::final_only).collect();
        out.bon.push(BenchInstance { selection: select(bon_tables)?, evaluations: evaluations.clone() });
        out.ttsp.push(BenchInstance { selection: select(frozen_tables)?, evaluations: evaluations.clone() });
        out.ttsnap.push(BenchInstance { selection: select(model_tables)?, evaluations });
    }
    Ok(out)
}

pub fn load_verifiers(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<NoiseAwareVerifier>> {
    let n = cfg.eval_instances()?[0].all_reward_specs().len();
    (0..n)
        .map(|k| NoiseAwareVerifier::load(&layout.checkpoint(&main_checkpoint_name(k))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmCurves {
    pub algorithm: String,
    pub counts: Vec<usize>,
    pub mean_spent: Vec<f64>,
    /// One curve per evaluation reward.
    pub curves: Vec<BudgetCurve>,
}

pub const ALGORITHMS: [&str; 3] = ["bon", "ttsp", "ttsnap"];

fn curve_spec(cfg: &ExperimentConfig) -> Result<CurveSpec> {
    Ok(CurveSpec {
        budgets: cfg.search.budgets()?,
        steps: cfg.schedule.steps,
        cost: cfg.search.cost,
        repeats: cfg.search.repeats,
        seed: cfg.master_seed,
    })
}

/// Seed-averaged budget curves for the requested algorithms.
pub fn cmd_search(exec: Exec, cfg: &ExperimentConfig, out: &Path, algorithms: &[&str]) -> Result<Vec<AlgorithmCurves>> {
    cfg.validate()?;
    let layout = Layout::new(out);
    echo_config(cfg, &layout)?;
    if let Some(bad) = algorithms.iter().find(|a| !ALGORITHMS.contains(a)) {
        return Err(Error::InvalidArgument(format!("unknown algorithm {bad}")));
    }
    let eval_pools = load_role_pools(cfg, &layout, Role::Eval)?;
    let schedule = &cfg.search.schedule;
    let verifiers = if algorithms.contains(&"ttsnap") {
        load_verifiers(cfg, &layout)?
    } else {
        // Frozen scoring needs no checkpoints; zero-weight stand-ins keep shapes.
        let n = cfg.eval_instances()?[0].all_reward_specs().len();
        (0..n)
            .map(|_| NoiseAwareVerifier::zeros(eval_pools[0].dim, cfg.schedule.steps, &[1], true))
            .collect::<Result<_>>()?
    };
    let tables = search_tables(exec, cfg, &eval_pools, &verifiers, &schedule.estimate_steps())?;
    let spec = curve_spec(cfg)?;
    let orders = candidate_orders(exec, &tables.bon, &spec);
    let mut results = Vec::new();
    for &alg in algorithms {
        let (bench, sched) = match alg {
            "bon" => (&tables.bon, PruneSchedule::empty()),
            "ttsp" => (&tables.ttsp, schedule.clone()),
            _ => (&tables.ttsnap, schedule.clone()),
        };
        let set = budget_curves(exec, bench, &orders, &sched, &spec)?;
        results.push(AlgorithmCurves {
            algorithm: alg.into(),
            counts: set.counts,
            mean_spent: set.mean_spent,
            curves: set.curves,
        });
    }
    write_curves(cfg, &layout, &results, &tables.reward_names)?;
    Ok(results)
}

fn write_curves(cfg: &ExperimentConfig, layout: &Layout, results: &[AlgorithmCurves], names: &[String]) -> Result<()> {
    let header = stamped_header(&["algorithm", "reward", "budget", "n", "mean_spent", "mean_reward", "gain"]);
    let mut rows = Vec::new();
    for a in results {
        for (name, c) in names.iter().zip(&a.curves) {
            let gains = c.gains();
            for (i, b) in c.budgets.iter().enumerate() {
                let mut r = stamp(cfg).to_vec();
                r.extend([
                    a.algorithm.clone(),
                    name.clone(),
                    f(*b),
                    a.counts[i].to_string(),
                    f(a.mean_spent[i]),
                    f(c.rewards[i]),
                    f(gains[i]),
                ]);
                rows.push(r);
            }
        }
    }
    write_csv(&layout.search("curves.csv"), &header, &rows)
}

/// Curves keyed by (algorithm, reward) as persisted by `search`.
pub fn read_curves(path: &Path) -> Result<BTreeMap<(String, String), BudgetCurve>> {
    let bytes = read_file(path)?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("{} lacks column {name}", path.display())))
    };
    let (ca, cr, cb, cm) = (col("algorithm")?, col("reward")?, col("budget")?, col("mean_reward")?);
    let mut points: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad number {:?}: {e}", &rec[i])))
        };
        let e = points.entry((rec[ca].to_string(), rec[cr].to_string())).or_default();
        e.0.push(parse(cb)?);
        e.1.push(parse(cm)?);
    }
    points
        .into_iter()
        .map(|(k, (b, r))| Ok((k, BudgetCurve::new(b, r)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub reward: String,
    /// Integrated gain per algorithm.
    pub h: BTreeMap<String, f64>,
    /// Relative performance against best-of-N per algorithm.
    pub omega: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub rewards: Vec<RewardSummary>,
    /// Mean held-out Kendall over the noisiest third of trained steps.
    pub kendall_noisiest: Option<BTreeMap<String, f64>>,
    pub data_scaling: Option<Vec<(usize, f64)>>,
}

/// Computes h and omega from persisted curves and writes the summary.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let layout = Layout::new(out);
    echo_config(cfg, &layout)?;
    let curves = read_curves(&layout.search("curves.csv"))?;
    let mut by_reward: BTreeMap<&str, BTreeMap<&str, &BudgetCurve>> = BTreeMap::new();
    for ((alg, reward), c) in &curves {
        by_reward.entry(reward.as_str()).or_default().insert(alg.as_str(), c);
    }
    let mut rewards = Vec::new();
    for (reward, algs) in &by_reward {
        let bon = algs
            .get("bon")
            .ok_or_else(|| Error::MissingFile(layout.search("curves.csv (bon curve)")))?;
        let mut h = BTreeMap::new();
        let mut omega = BTreeMap::new();
        for (alg, c) in algs {
            h.insert(alg.to_string(), integrated_gain(c)?);
            omega.insert(alg.to_string(), relative_performance(c, bon)?);
        }
        rewards.push(RewardSummary { reward: reward.to_string(), h, omega });
    }
    let narf: Option<NarfReport> = match read_file(&layout.narf("report.json")) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
        Err(Error::MissingFile(_)) => None,
        Err(e) => return Err(e),
    };
    let report = RunReport {
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        rewards,
        kendall_noisiest: narf.as_ref().map(|n| {
            n.kendall.keys().map(|k| (k.clone(), n.noisy_mean(k).expect("column exists"))).collect()
        }),
        data_scaling: narf.map(|n| n.data_scaling),
    };
    write_json(&layout.evaluate("summary.json"), &report)?;
    write_atomic(&layout.evaluate("report.md"), super::report::render(&report).as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub report: crate::search::SweepReport,
    /// Best entry per stage count.
    pub best_per_stages: BTreeMap<usize, crate::search::SweepEntry>,
}

/// Ranks every pruning schedule of the configured grid by omega.
pub fn cmd_sweep(exec: Exec, cfg: &ExperimentConfig, out: &Path) -> Result<SweepOutput> {
    cfg.validate()?;
    let layout = Layout::new(out);
    echo_config(cfg, &layout)?;
    let sw = &cfg.search.sweep;
    let limit = (cfg.narf.start_step + 1).min(cfg.schedule.steps - 1);
    let timesteps: Vec<usize> = sw.timesteps.iter().copied().filter(|&t| t >= 1 && t <= limit).collect();
    let grid = schedule_grid(&timesteps, &sw.retentions, sw.max_stages);
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty after filtering timesteps".into()));
    }
    let stage_steps: Vec<usize> = timesteps.iter().map(|t| t - 1).collect();
    let eval_pools = load_role_pools(cfg, &layout, Role::Eval)?;
    let verifiers = load_verifiers(cfg, &layout)?;
    let tables = search_tables(exec, cfg, &eval_pools, &verifiers, &stage_steps)?;
    let spec = curve_spec(cfg)?;
    let report = sweep_schedules(exec, &tables.ttsnap, &grid, &spec)?;
    let mut best_per_stages = BTreeMap::new();
    for e in &report.entries {
        best_per_stages.entry(e.schedule.stages()).or_insert_with(|| e.clone());
    }
    let out = SweepOutput { report, best_per_stages };
    write_sweep(cfg, &layout, &spec, &out)?;
    Ok(out)
}

fn write_sweep(cfg: &ExperimentConfig, layout: &Layout, spec: &CurveSpec, out: &SweepOutput) -> Result<()> {
    let mut header: Vec<String> = ["config_id", "T", "A"].iter().map(|s| s.to_string()).collect();
    header.extend(spec.budgets.iter().map(|b| format!("N({b})")));
    header.extend(spec.budgets.iter().map(|b| format!("mean_reward({b})")));
    header.extend(["omega", "seed", "config_hash"].iter().map(|s| s.to_string()));
    let row = |e: &crate::search::SweepEntry| {
        let (t, a) = e.schedule.label();
        let mut r = vec![e.config_id.to_string(), t, a];
        r.extend(e.counts.iter().map(|n| n.to_string()));
        r.extend(e.rewards.iter().map(|v| f(*v)));
        r.extend([f(e.omega), cfg.master_seed.to_string(), cfg.hash()]);
        r
    };
    let rows: Vec<Vec<String>> = out.report.entries.iter().map(row).collect();
    write_csv(&layout.sweep("sweep.csv"), &header, &rows)?;
    let mut header2 = vec!["stages".to_string()];
    header2.extend(header.iter().cloned());
    let rows2: Vec<Vec<String>> = out
        .best_per_stages
        .iter()
        .map(|(m, e)| {
            let mut r = vec![m.to_string()];
            r.extend(row(e));
            r
        })
        .collect();
    write_csv(&layout.sweep("best_per_stages.csv"), &header2, &rows2)?;
    write_json(&layout.sweep("sweep.json"), out)
}
