use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{MixtureModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::budget_grid;
use crate::pool::{DiversityConfig, ProblemInstance};
use crate::search::{CostModel, PruneSchedule};
use crate::seeds;
use crate::verifiers::{BtVariant, Objective, RewardSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// Uniform SDE churn; 0 gives the deterministic sampler.
    pub beta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 20, sigma_max: 80.0, sigma_min: 0.002, beta: 0.0 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::geometric(self.steps, self.sigma_max, self.sigma_min)?.with_churn(self.beta)
    }
}

/// Generator for a family of instances sharing means and rewards but with
/// random mixture weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSetConfig {
    pub components: usize,
    pub dim: usize,
    pub radius: f64,
    pub comp_std: f64,
    /// Std of the log-weights; 0 gives equal weights.
    pub weight_spread: f64,
    pub reward: RewardSpec,
    pub extra_rewards: Vec<RewardSpec>,
    /// Held-out evaluation instances.
    pub eval_count: usize,
    /// Explicit instances replace the generated ones when non-empty.
    pub eval_instances: Vec<ProblemInstance>,
    pub train_instances: Vec<ProblemInstance>,
}

impl Default for InstanceSetConfig {
    fn default() -> Self {
        Self {
            components: 8,
            dim: 2,
            radius: 4.0,
            comp_std: 0.5,
            weight_spread: 1.0,
            reward: RewardSpec::composite(0, 0.1, 2.0, 2.0),
            extra_rewards: Vec::new(),
            eval_count: 20,
            eval_instances: Vec::new(),
            train_instances: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// Training instance counts; the largest trains the main verifier, all
    /// of them feed the data-scaling table.
    pub train_sizes: Vec<usize>,
    pub train_per_instance: usize,
    pub eval_size: usize,
    pub train_diversity: DiversityConfig,
    pub eval_diversity: DiversityConfig,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            train_sizes: vec![20, 40, 80, 160],
            train_per_instance: 8,
            eval_size: 200,
            train_diversity: DiversityConfig::enabled(),
            eval_diversity: DiversityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Curriculum,
    Separate,
    Uniform,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Curriculum, Strategy::Separate, Strategy::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Curriculum => "curriculum",
            Strategy::Separate => "separate",
            Strategy::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Bt,
    BtLog,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Mse, LossKind::Bt, LossKind::BtLog];

    pub fn objective(self, lambda: f64) -> Objective {
        match self {
            LossKind::Mse => Objective::Mse,
            LossKind::Bt => Objective::BradleyTerry { lambda, variant: BtVariant::Printed },
            LossKind::BtLog => Objective::BradleyTerry { lambda, variant: BtVariant::NegLog },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NarfConfig {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub lambda: f64,
    pub start_step: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Clean samples per training instance for fitting the initial reward
    /// regressor.
    pub pretrain_per_instance: usize,
    pub pretrain_epochs: usize,
    pub pretrain: TrainConfig,
    /// Also train the other strategies and losses for the comparison tables.
    pub compare: bool,
    pub data_scaling: bool,
}

impl Default for NarfConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Curriculum,
            loss: LossKind::Mse,
            lambda: 1.0,
            start_step: 15,
            hidden: vec![64, 64],
            train: TrainConfig { lr: 0.01, ..TrainConfig::default() },
            pretrain_per_instance: 64,
            pretrain_epochs: 100,
            pretrain: TrainConfig::default(),
            compare: true,
            data_scaling: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub timesteps: Vec<usize>,
    pub retentions: Vec<f64>,
    pub max_stages: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![2, 4, 6, 8, 10, 12, 14, 16],
            retentions: vec![0.1, 0.2, 0.3, 0.5, 0.7],
            max_stages: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Pruning schedule shared by the pruned algorithms.
    pub schedule: PruneSchedule,
    pub cost: CostModel,
    pub budget_min: f64,
    pub budget_max: f64,
    pub budget_step: f64,
    pub repeats: usize,
    /// Select with the rank sum of all rewards instead of the primary one.
    pub combine_rewards: bool,
    pub sweep: SweepConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            schedule: PruneSchedule { timesteps: vec![6], retentions: vec![0.3] },
            cost: CostModel::default(),
            budget_min: 200.0,
            budget_max: 4000.0,
            budget_step: 190.0,
            repeats: 100,
            combine_rewards: false,
            sweep: SweepConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn budgets(&self) -> Result<Vec<f64>> {
        budget_grid(self.budget_min, self.budget_max, self.budget_step)
    }
}

/// One JSON document describing a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub schedule: ScheduleConfig,
    pub instances: InstanceSetConfig,
    pub pools: PoolConfig,
    pub narf: NarfConfig,
    pub search: SearchConfig,
    /// Default output directory; `--out` overrides it.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 20_240_601,
            schedule: ScheduleConfig::default(),
            instances: InstanceSetConfig::default(),
            pools: PoolConfig::default(),
            narf: NarfConfig::default(),
            search: SearchConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_file(path)?;
        let cfg: Self = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.build()?;
        let m = schedule.steps();
        if self.narf.start_step >= m {
            return Err(Error::InvalidArgument(format!(
                "start_step {} must be below the step count {m}",
                self.narf.start_step
            )));
        }
        if self.search.repeats == 0 {
            return Err(Error::InvalidArgument("repeats must be at least 1".into()));
        }
        if self.pools.eval_size == 0 || self.pools.train_per_instance == 0 {
            return Err(Error::InvalidArgument("pool sizes must be positive".into()));
        }
        if self.instances.train_instances.is_empty()
            && (self.pools.train_sizes.is_empty() || self.pools.train_sizes.contains(&0))
        {
            return Err(Error::InvalidArgument("train_sizes must be positive".into()));
        }
        self.search.schedule.validate(m)?;
        if let Some(&t) = self.search.schedule.timesteps.last() {
            if t - 1 > self.narf.start_step {
                return Err(Error::InvalidArgument(format!(
                    "pruning timestep {t} needs a checkpoint beyond start_step {}",
                    self.narf.start_step
                )));
            }
        }
        self.search.cost.validate()?;
        self.search.budgets()?;
        for inst in self.eval_instances()?.iter().chain(&self.train_instances()?) {
            inst.validate()?;
        }
        Ok(())
    }

    pub fn max_train_size(&self) -> usize {
        self.pools.train_sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn eval_instances(&self) -> Result<Vec<ProblemInstance>> {
        if !self.instances.eval_instances.is_empty() {
            return Ok(self.instances.eval_instances.clone());
        }
        (0..self.instances.eval_count)
            .map(|i| self.generate_instance(seeds::ROLE_EVAL, i))
            .collect()
    }

    pub fn train_instances(&self) -> Result<Vec<ProblemInstance>> {
        if !self.instances.train_instances.is_empty() {
            return Ok(self.instances.train_instances.clone());
        }
        (0..self.max_train_size())
            .map(|i| self.generate_instance(seeds::ROLE_TRAIN, i))
            .collect()
    }

    fn generate_instance(&self, role: u64, index: usize) -> Result<ProblemInstance> {
        let set = &self.instances;
        let ring = MixtureModel::ring(set.components, set.dim, set.radius, set.comp_std)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
            self.master_seed,
            &[seeds::INSTANCE, role, index as u64],
        ));
        let weights: Vec<f64> = (0..set.components)
            .map(|_| (set.weight_spread * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        let mixture = MixtureModel::from_unnormalized(&weights, ring.means().to_vec(), ring.comp_std().to_vec())?;
        let prefix = if role == seeds::ROLE_EVAL { "eval" } else { "train" };
        let inst = ProblemInstance {
            id: format!("{prefix}-{index:04}"),
            mixture,
            reward_spec: set.reward.clone(),
            extra_reward_specs: set.extra_rewards.clone(),
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Base seed of an instance's pool; trajectory seeds follow consecutively.
    pub fn pool_seed(&self, role: u64, index: usize) -> u64 {
        seeds::derive(self.master_seed, &[seeds::INSTANCE, role, index as u64, seeds::TRAJECTORY])
    }

    pub fn training_seed(&self, label: &str) -> u64 {
        let tag = u64::from_le_bytes(Sha256::digest(label.as_bytes())[..8].try_into().expect("8 bytes"));
        seeds::derive(self.master_seed, &[seeds::TRAINING, tag])
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.narf.train
    }
}
