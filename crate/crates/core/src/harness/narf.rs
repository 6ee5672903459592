//! Verifier pretraining, noise-aware finetuning and held-out rank
//! consistency, shared by the CLI commands and the acceptance suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, LossKind, Strategy};
use crate::error::{Error, Result};
use crate::metrics::kendall_tau;
use crate::par::Exec;
use crate::pool::{reward_table_with, EstimateScorer, FrozenReward, ProblemInstance, TrajectoryPool};
use crate::verifiers::{
    build_distill_dataset, clean_reward_dataset, train_curriculum, train_mse, train_separate,
    train_uniform_timecond, CheckpointMeta, DistillDataset, NoiseAwareVerifier, TrainLog,
};

/// Reward `k` of an instance: 0 is the primary spec, then the extras.
pub fn reward_of(inst: &ProblemInstance, k: usize) -> Result<&crate::verifiers::RewardSpec> {
    inst.all_reward_specs()
        .get(k)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("instance {} has no reward {k}", inst.id)))
}

/// Self-distillation records for reward `k` over every training pool.
pub fn distill_set(
    cfg: &ExperimentConfig,
    pools: &[TrajectoryPool],
    instances: &[ProblemInstance],
    k: usize,
) -> Result<DistillDataset> {
    let mut data = DistillDataset::empty(cfg.schedule.steps, instances[0].mixture.dim());
    for (pool, inst) in pools.iter().zip(instances) {
        data.merge(build_distill_dataset(pool, reward_of(inst, k)?, &inst.mixture, cfg.narf.start_step)?)?;
    }
    Ok(data)
}

/// Regressor fitted on exact clean samples of the training instances; the
/// starting point for every finetuning strategy.
pub fn pretrain(
    cfg: &ExperimentConfig,
    instances: &[ProblemInstance],
    k: usize,
    time_conditioned: bool,
) -> Result<NoiseAwareVerifier> {
    let steps = cfg.schedule.steps;
    let dim = instances[0].mixture.dim();
    let seed = cfg.training_seed(&format!("pretrain/{k}"));
    let mut v = NoiseAwareVerifier::new(dim, steps, &cfg.narf.hidden, time_conditioned, seed)?;
    let relabelled: Vec<ProblemInstance> = instances
        .iter()
        .map(|inst| {
            Ok(ProblemInstance {
                reward_spec: reward_of(inst, k)?.clone(),
                extra_reward_specs: Vec::new(),
                ..inst.clone()
            })
        })
        .collect::<Result<_>>()?;
    let data = clean_reward_dataset(&relabelled, steps, cfg.narf.pretrain_per_instance, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train_mse(&mut v, &data, steps, cfg.narf.pretrain_epochs, &cfg.narf.pretrain, &mut rng)?;
    Ok(v)
}

/// Finetunes a copy of `base` with one strategy and loss. The uniform
/// strategy expects a time-conditioned base.
pub fn finetune(
    cfg: &ExperimentConfig,
    base: &NoiseAwareVerifier,
    data: &DistillDataset,
    strategy: Strategy,
    loss: LossKind,
    label: &str,
) -> Result<(NoiseAwareVerifier, TrainLog)> {
    let seed = cfg.training_seed(label);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = base.clone();
    let objective = loss.objective(cfg.narf.lambda);
    let start = cfg.narf.start_step;
    let tc = &cfg.narf.train;
    let log = match strategy {
        Strategy::Curriculum => train_curriculum(&mut v, data, start, objective, tc, &mut rng)?,
        Strategy::Separate => train_separate(&mut v, data, start, objective, tc, &mut rng)?,
        Strategy::Uniform => {
            if loss != LossKind::Mse {
                return Err(Error::InvalidArgument(
                    "the uniform time-conditioned strategy trains with mse only".into(),
                ));
            }
            train_uniform_timecond(&mut v, data, start + 1, tc, &mut rng)?
        }
    };
    v.meta = CheckpointMeta {
        strategy: strategy.name().into(),
        objective: loss.objective(cfg.narf.lambda).name().into(),
        seed,
        lr: tc.lr,
        batch_size: tc.batch_size,
        epochs: start + 1,
        dataset_hash: data.hash(),
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
    };
    Ok((v, log))
}

/// Pretrains the matching base and finetunes it.
pub fn train_model(
    cfg: &ExperimentConfig,
    instances: &[ProblemInstance],
    data: &DistillDataset,
    k: usize,
    strategy: Strategy,
    loss: LossKind,
    label: &str,
) -> Result<(NoiseAwareVerifier, TrainLog)> {
    let base = pretrain(cfg, instances, k, strategy == Strategy::Uniform)?;
    finetune(cfg, &base, data, strategy, loss, label)
}

/// How candidates are scored at intermediate steps.
#[derive(Clone, Copy)]
pub enum Scorer<'a> {
    /// The clean-domain reward applied to the estimate.
    Frozen,
    Model(&'a NoiseAwareVerifier),
}

/// Mean over instances of Kendall's tau between step-`j` scores and final
/// clean rewards, for `j` in `0..=last_step`.
pub fn kendall_by_step(
    exec: Exec,
    pools: &[TrajectoryPool],
    instances: &[ProblemInstance],
    k: usize,
    scorer: Scorer<'_>,
    last_step: usize,
) -> Result<Vec<f64>> {
    let steps: Vec<usize> = (0..=last_step).collect();
    let per_instance = pools
        .iter()
        .zip(instances)
        .map(|(pool, inst)| {
            let spec = reward_of(inst, k)?;
            let frozen = FrozenReward { spec, mixture: &inst.mixture };
            let s: &dyn EstimateScorer = match scorer {
                Scorer::Frozen => &frozen,
                Scorer::Model(v) => v,
            };
            let table = reward_table_with(exec, pool, s, spec, &inst.mixture, &steps)?;
            let finals = table.final_column();
            steps
                .iter()
                .enumerate()
                .map(|(c, _)| kendall_tau(&table.column(c), &finals))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_instance.len() as f64;
    Ok((0..steps.len())
        .map(|j| per_instance.iter().map(|t| t[j]).sum::<f64>() / n)
        .collect())
}

/// Number of steps forming the noisiest third of `0..=start_step`.
pub fn noisiest_third(start_step: usize) -> usize {
    (start_step + 1).div_ceil(3)
}
