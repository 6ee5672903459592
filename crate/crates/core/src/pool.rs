//! Shared candidate pools: generation with optional diversity repulsion,
//! binary persistence and precomputed reward tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{MixtureModel, NoiseSchedule, Trajectory, Walker};
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::par::Exec;
use crate::verifiers::{reward_clean, NoiseAwareVerifier, RewardSpec};

const MAGIC: &[u8; 8] = b"TTSNPOOL";
pub const POOL_FORMAT_VERSION: u32 = 1;

/// The prompt analog: a data distribution plus the rewards judged on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub id: String,
    pub mixture: MixtureModel,
    pub reward_spec: RewardSpec,
    #[serde(default)]
    pub extra_reward_specs: Vec<RewardSpec>,
}

impl ProblemInstance {
    pub fn validate(&self) -> Result<()> {
        self.reward_spec.validate(&self.mixture)?;
        for spec in &self.extra_reward_specs {
            spec.validate(&self.mixture)?;
        }
        Ok(())
    }

    /// Primary spec followed by the extra ones.
    pub fn all_reward_specs(&self) -> Vec<&RewardSpec> {
        std::iter::once(&self.reward_spec)
            .chain(&self.extra_reward_specs)
            .collect()
    }
}

/// Geometric repulsion between similar candidates during generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub threshold: f64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            alpha: 1.2,
            threshold: 0.65,
        }
    }
}

impl DiversityConfig {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument("diversity alpha must be >= 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument("diversity threshold must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPool {
    pub instance_id: String,
    pub schedule_hash: String,
    pub steps: usize,
    pub dim: usize,
    pub trajectories: Vec<Trajectory>,
    pub diversity: DiversityConfig,
    pub provenance: Provenance,
}

impl TrajectoryPool {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// `n` trajectories with seeds `base_seed..base_seed + n`.
pub fn generate_pool(
    instance: &ProblemInstance,
    schedule: &NoiseSchedule,
    n: usize,
    base_seed: u64,
    diversity: DiversityConfig,
) -> Result<TrajectoryPool> {
    generate_pool_with(Exec::default(), instance, schedule, n, base_seed, diversity)
}

pub fn generate_pool_with(
    exec: Exec,
    instance: &ProblemInstance,
    schedule: &NoiseSchedule,
    n: usize,
    base_seed: u64,
    diversity: DiversityConfig,
) -> Result<TrajectoryPool> {
    if n == 0 {
        return Err(Error::InvalidArgument("pool size must be at least 1".into()));
    }
    let dim = instance.mixture.dim();
    let walkers: Vec<Walker> = (0..n as u64)
        .map(|i| Walker::new(base_seed.wrapping_add(i), schedule, dim))
        .collect();
    run_batch(exec, instance, schedule, walkers, diversity)
}

/// Like [`generate_pool_with`] but from explicit initial points; seeds still
/// drive any SDE noise.
pub fn generate_pool_from_inits(
    exec: Exec,
    instance: &ProblemInstance,
    schedule: &NoiseSchedule,
    inits: Vec<Vec<f64>>,
    base_seed: u64,
    diversity: DiversityConfig,
) -> Result<TrajectoryPool> {
    if inits.is_empty() {
        return Err(Error::InvalidArgument("pool size must be at least 1".into()));
    }
    let dim = instance.mixture.dim();
    let mut walkers = Vec::with_capacity(inits.len());
    for (i, x) in inits.into_iter().enumerate() {
        if x.len() != dim {
            return Err(Error::Shape("initial point dimension mismatch".into()));
        }
        crate::error::ensure_finite(&x, "initial point")?;
        walkers.push(Walker::from_init(base_seed.wrapping_add(i as u64), x, schedule.steps()));
    }
    run_batch(exec, instance, schedule, walkers, diversity)
}

fn run_batch(
    exec: Exec,
    instance: &ProblemInstance,
    schedule: &NoiseSchedule,
    mut walkers: Vec<Walker>,
    diversity: DiversityConfig,
) -> Result<TrajectoryPool> {
    instance.validate()?;
    diversity.validate()?;
    let mixture = &instance.mixture;
    let repel = diversity.enabled && diversity.alpha > 0.0 && walkers.len() > 1;
    if repel {
        for j in 0..schedule.steps() {
            exec.try_for_each_mut(&mut walkers, |w| w.step(mixture, schedule, j))?;
            let deltas = repulsion(exec, mixture, schedule, &walkers, j, &diversity)?;
            for (w, d) in walkers.iter_mut().zip(&deltas) {
                if let Some(d) = d {
                    w.displace(d);
                }
            }
            let sigma = schedule.sigma(j + 1);
            exec.try_for_each_mut(&mut walkers, |w| w.record(mixture, sigma))?;
        }
    } else {
        exec.try_for_each_mut(&mut walkers, |w| {
            for j in 0..schedule.steps() {
                w.step(mixture, schedule, j)?;
                w.record(mixture, schedule.sigma(j + 1))?;
            }
            Ok::<(), Error>(())
        })?;
    }
    let trajectories = walkers
        .into_iter()
        .map(Walker::finish)
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryPool {
        instance_id: instance.id.clone(),
        schedule_hash: schedule.hash(),
        steps: schedule.steps(),
        dim: mixture.dim(),
        trajectories,
        diversity,
        provenance: Provenance::default(),
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        // A zero vector is indistinguishable from the center.
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

/// Displacements after step `j`, all computed from the pre-update state.
///
/// Each walker is compared with every lower-seeded walker through the cosine
/// of their estimates about the mixture mean. Above the threshold it is
/// pushed away from its most similar anchor by
/// `alpha * gate * h * (x_q - x_p)`, where `gate` rescales the similarity
/// excess to [0, 1] and `h` is this step's share of the total variance drop.
fn repulsion(
    exec: Exec,
    mixture: &MixtureModel,
    schedule: &NoiseSchedule,
    walkers: &[Walker],
    j: usize,
    cfg: &DiversityConfig,
) -> Result<Vec<Option<Vec<f64>>>> {
    let sigma = schedule.sigma(j + 1);
    let center = mixture.mean();
    let centered: Vec<Vec<f64>> = exec
        .try_map_range(walkers.len(), |i| crate::dynamics::tweedie(mixture, walkers[i].current(), sigma))?
        .into_iter()
        .map(|e| e.iter().zip(&center).map(|(a, c)| a - c).collect())
        .collect();
    let (s0, s1) = (schedule.sigma(j), sigma);
    let h = (s0 * s0 - s1 * s1) / (schedule.sigma_max() * schedule.sigma_max());
    Ok(exec.map_range(walkers.len(), |q| {
        let seed_q = walkers[q].seed();
        let mut best: Option<(f64, usize)> = None;
        for (p, w) in walkers.iter().enumerate() {
            let lower = w.seed() < seed_q || (w.seed() == seed_q && p < q);
            if !lower {
                continue;
            }
            let c = cosine(&centered[q], &centered[p]);
            if best.is_none_or(|(bc, _)| c > bc) {
                best = Some((c, p));
            }
        }
        let (c, p) = best?;
        if c <= cfg.threshold {
            return None;
        }
        let gate = if cfg.threshold < 1.0 {
            (c - cfg.threshold) / (1.0 - cfg.threshold)
        } else {
            1.0
        };
        let k = cfg.alpha * gate * h;
        Some(
            walkers[q]
                .current()
                .iter()
                .zip(walkers[p].current())
                .map(|(xq, xp)| k * (xq - xp))
                .collect(),
        )
    }))
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolHeader {
    version: u32,
    steps: usize,
    dim: usize,
    count: usize,
    record_bytes: usize,
    schedule_hash: String,
    instance_id: String,
    diversity: DiversityConfig,
    provenance: Provenance,
}

/// Bytes per trajectory record: seed, `(M + 1) d` latents, `M d` estimates.
pub fn record_bytes(steps: usize, dim: usize) -> usize {
    8 + 8 * dim * (2 * steps + 1)
}

/// Layout: magic, `u32` version, `u32` header length, JSON header, records.
/// All integers and floats little-endian.
pub fn save_pool(pool: &TrajectoryPool, path: &Path) -> Result<()> {
    let rb = record_bytes(pool.steps, pool.dim);
    let header = serde_json::to_vec(&PoolHeader {
        version: POOL_FORMAT_VERSION,
        steps: pool.steps,
        dim: pool.dim,
        count: pool.trajectories.len(),
        record_bytes: rb,
        schedule_hash: pool.schedule_hash.clone(),
        instance_id: pool.instance_id.clone(),
        diversity: pool.diversity,
        provenance: pool.provenance.clone(),
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + rb * pool.trajectories.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&POOL_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in &pool.trajectories {
        if t.steps() != pool.steps || t.dim() != pool.dim {
            return Err(Error::Shape("trajectory shape differs from pool".into()));
        }
        buf.extend_from_slice(&t.seed.to_le_bytes());
        for v in t.latents_flat().iter().chain(t.estimates_flat()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

/// Loads a pool and checks it was generated under `schedule`.
pub fn load_pool(path: &Path, schedule: &NoiseSchedule) -> Result<TrajectoryPool> {
    let bytes = read_file(path)?;
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 8 {
        return Err(if MAGIC.starts_with(&bytes) {
            truncated(16)
        } else {
            Error::BadMagic { path: path.to_path_buf() }
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < 16 {
        return Err(truncated(16));
    }
    let version = read_u32(&bytes, 8);
    if version != POOL_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: POOL_FORMAT_VERSION,
        });
    }
    let header_len = read_u32(&bytes, 12) as usize;
    if bytes.len() < 16 + header_len {
        return Err(truncated(16 + header_len));
    }
    let header: PoolHeader = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let expected_hash = schedule.hash();
    if header.schedule_hash != expected_hash {
        return Err(Error::ScheduleHashMismatch {
            path: path.to_path_buf(),
            found: header.schedule_hash,
            expected: expected_hash,
        });
    }
    let rb = record_bytes(header.steps, header.dim);
    if header.record_bytes != rb || header.dim == 0 || header.steps != schedule.steps() {
        return Err(Error::Shape(format!("inconsistent pool header in {}", path.display())));
    }
    let total = 16 + header_len + rb * header.count;
    if bytes.len() < total {
        return Err(truncated(total));
    }
    if bytes.len() > total {
        return Err(Error::Shape(format!(
            "{} has {} trailing bytes",
            path.display(),
            bytes.len() - total
        )));
    }
    let n_lat = (header.steps + 1) * header.dim * 8;
    let mut trajectories = Vec::with_capacity(header.count);
    for rec in bytes[16 + header_len..].chunks_exact(rb) {
        let seed = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
        let latents = read_f64s(&rec[8..8 + n_lat]);
        let estimates = read_f64s(&rec[8 + n_lat..]);
        trajectories.push(Trajectory::from_parts(seed, header.dim, latents, estimates)?);
    }
    Ok(TrajectoryPool {
        instance_id: header.instance_id,
        schedule_hash: header.schedule_hash,
        steps: header.steps,
        dim: header.dim,
        trajectories,
        diversity: header.diversity,
        provenance: header.provenance,
    })
}

/// Anything that can score an intermediate estimate at a step.
pub trait EstimateScorer: Sync {
    fn score_estimate(&self, estimate: &[f64], step: usize) -> Result<f64>;
}

impl EstimateScorer for NoiseAwareVerifier {
    fn score_estimate(&self, estimate: &[f64], step: usize) -> Result<f64> {
        self.reward_on_estimate(estimate, step)
    }
}

/// The clean-domain reward applied directly to estimates, ignoring noise.
#[derive(Debug, Clone)]
pub struct FrozenReward<'a> {
    pub spec: &'a RewardSpec,
    pub mixture: &'a MixtureModel,
}

impl EstimateScorer for FrozenReward<'_> {
    fn score_estimate(&self, estimate: &[f64], _step: usize) -> Result<f64> {
        reward_clean(self.spec, self.mixture, estimate)
    }
}

/// Per-candidate scores at selected estimate steps plus the final clean reward.
///
/// `values` is row-major `rows x (steps.len() + 1)`; the last column holds
/// the clean reward of each final sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub rows: usize,
    pub steps: Vec<usize>,
    pub values: Vec<f64>,
}

impl RewardTable {
    pub fn new(rows: usize, steps: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * (steps.len() + 1) {
            return Err(Error::Shape(format!(
                "reward table needs {} values, got {}",
                rows * (steps.len() + 1),
                values.len()
            )));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("table steps must be strictly increasing".into()));
        }
        Ok(Self { rows, steps, values })
    }

    pub fn cols(&self) -> usize {
        self.steps.len() + 1
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    /// Column index of estimate step `step`.
    pub fn column_of(&self, step: usize) -> Option<usize> {
        self.steps.binary_search(&step).ok()
    }

    pub fn at_step(&self, row: usize, step: usize) -> Result<f64> {
        let col = self
            .column_of(step)
            .ok_or(Error::MissingCheckpoint(step))?;
        Ok(self.get(row, col))
    }

    pub fn final_reward(&self, row: usize) -> f64 {
        self.get(row, self.steps.len())
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    pub fn final_column(&self) -> Vec<f64> {
        self.column(self.steps.len())
    }

    /// The table without stage columns.
    pub fn final_only(&self) -> RewardTable {
        RewardTable { rows: self.rows, steps: Vec::new(), values: self.final_column() }
    }
}

/// Scores every trajectory at each of `steps` with `scorer` and its final
/// sample with `reward_clean`.
pub fn reward_table(
    pool: &TrajectoryPool,
    scorer: &dyn EstimateScorer,
    spec: &RewardSpec,
    mixture: &MixtureModel,
    steps: &[usize],
) -> Result<RewardTable> {
    reward_table_with(Exec::default(), pool, scorer, spec, mixture, steps)
}

pub fn reward_table_with(
    exec: Exec,
    pool: &TrajectoryPool,
    scorer: &dyn EstimateScorer,
    spec: &RewardSpec,
    mixture: &MixtureModel,
    steps: &[usize],
) -> Result<RewardTable> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("reward table of an empty pool".into()));
    }
    if let Some(&bad) = steps.iter().find(|&&s| s >= pool.steps) {
        return Err(Error::InvalidArgument(format!(
            "estimate step {bad} outside [0, {}]",
            pool.steps - 1
        )));
    }
    let rows = exec.try_map_range(pool.len(), |i| {
        let t = &pool.trajectories[i];
        let mut row = Vec::with_capacity(steps.len() + 1);
        for &s in steps {
            row.push(scorer.score_estimate(t.estimate(s), s)?);
        }
        row.push(reward_clean(spec, mixture, t.final_sample())?);
        Ok::<_, Error>(row)
    })?;
    RewardTable::new(pool.len(), steps.to_vec(), rows.concat())
}
