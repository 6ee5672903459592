use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::reward::{reward_clean, RewardSpec};
use crate::dynamics::MixtureModel;
use crate::error::{Error, Result};
use crate::pool::{ProblemInstance, TrajectoryPool};

#[derive(Debug, Clone, PartialEq)]
pub struct DistillRecord {
    pub estimate: Vec<f64>,
    pub step: usize,
    pub target: f64,
    pub trajectory_id: u64,
    /// Index into [`DistillDataset::instance_ids`].
    pub instance: usize,
}

/// Self-distillation training set: every intermediate estimate is labelled
/// with the clean reward of its own trajectory's final sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillDataset {
    pub steps: usize,
    pub dim: usize,
    pub instance_ids: Vec<String>,
    pub records: Vec<DistillRecord>,
}

impl DistillDataset {
    pub fn empty(steps: usize, dim: usize) -> Self {
        Self {
            steps,
            dim,
            instance_ids: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct step indices, ascending.
    pub fn step_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| r.step)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn step_slice(&self, step: usize) -> Vec<&DistillRecord> {
        self.records.iter().filter(|r| r.step == step).collect()
    }

    /// Appends `other`, re-indexing its instances.
    pub fn merge(&mut self, other: DistillDataset) -> Result<()> {
        if other.steps != self.steps || other.dim != self.dim {
            return Err(Error::Shape("cannot merge datasets of different shape".into()));
        }
        let offset = self.instance_ids.len();
        self.instance_ids.extend(other.instance_ids);
        self.records.extend(other.records.into_iter().map(|mut r| {
            r.instance += offset;
            r
        }));
        Ok(())
    }

    /// Hex SHA-256 over every record's bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.steps as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for id in &self.instance_ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        for r in &self.records {
            h.update((r.step as u64).to_le_bytes());
            h.update(r.trajectory_id.to_le_bytes());
            h.update((r.instance as u64).to_le_bytes());
            h.update(r.target.to_le_bytes());
            for v in &r.estimate {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// One record per (trajectory, step) for steps `start_step` down to 0.
pub fn build_distill_dataset(
    pool: &TrajectoryPool,
    spec: &RewardSpec,
    mixture: &MixtureModel,
    start_step: usize,
) -> Result<DistillDataset> {
    if pool.trajectories.is_empty() {
        return Err(Error::InvalidArgument("cannot distill from an empty pool".into()));
    }
    if start_step >= pool.steps {
        return Err(Error::InvalidArgument(format!(
            "start step {start_step} outside [0, {}]",
            pool.steps - 1
        )));
    }
    let mut data = DistillDataset::empty(pool.steps, pool.dim);
    data.instance_ids.push(pool.instance_id.clone());
    for t in &pool.trajectories {
        let target = reward_clean(spec, mixture, t.final_sample())?;
        for step in (0..=start_step).rev() {
            data.records.push(DistillRecord {
                estimate: t.estimate(step).to_vec(),
                step,
                target,
                trajectory_id: t.seed,
                instance: 0,
            });
        }
    }
    Ok(data)
}

/// Clean-domain regression set: exact data samples at step index `M`
/// labelled with their clean reward. Used to fit the initial verifier.
pub fn clean_reward_dataset(
    instances: &[ProblemInstance],
    steps: usize,
    per_instance: usize,
    seed: u64,
) -> Result<DistillDataset> {
    let dim = instances
        .first()
        .map(|i| i.mixture.dim())
        .ok_or_else(|| Error::InvalidArgument("no instances".into()))?;
    let mut data = DistillDataset::empty(steps, dim);
    for (idx, inst) in instances.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        data.instance_ids.push(inst.id.clone());
        for n in 0..per_instance {
            let x = inst.mixture.sample(&mut rng);
            let target = reward_clean(&inst.reward_spec, &inst.mixture, &x)?;
            data.records.push(DistillRecord {
                estimate: x,
                step: steps,
                target,
                trajectory_id: n as u64,
                instance: idx,
            });
        }
    }
    Ok(data)
}
