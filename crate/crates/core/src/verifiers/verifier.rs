use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DistillDataset;
use super::network::{Cache, Mlp};
use crate::error::{ensure_finite, Error, Result};
use crate::io::write_atomic;

const CHECKPOINT_FORMAT: &str = "ttsnap-verifier";
const CHECKPOINT_VERSION: u32 = 1;

/// Per-coordinate standardization for one step's estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StepStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and population std; a zero std falls back to 1.
    pub fn fit<'a>(points: impl Iterator<Item = &'a [f64]>, dim: usize) -> Option<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for p in points {
            n += 1;
            for i in 0..dim {
                sum[i] += p[i];
                sq[i] += p[i] * p[i];
            }
        }
        if n == 0 {
            return None;
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / nf - m * m).max(0.0);
                let s = var.sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Some(Self { mean, std })
    }
}

/// Training provenance stored with a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub strategy: String,
    pub objective: String,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dataset_hash: String,
    pub config_hash: String,
    pub master_seed: u64,
}

/// Trainable regressor from `(estimate, step)` to a scalar reward.
///
/// Per-step variants keep one parameter vector per trained step in
/// `per_step_checkpoints`; the time-conditioned variant uses `weights` for
/// every step and appends `step / M` to the input. Step index `M` denotes the
/// clean domain (final samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAwareVerifier {
    layer_sizes: Vec<usize>,
    dim: usize,
    steps: usize,
    time_conditioned: bool,
    pub weights: Vec<f64>,
    per_step_checkpoints: BTreeMap<usize, Vec<f64>>,
    normalizer: BTreeMap<usize, StepStats>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    verifier: NoiseAwareVerifier,
}

impl NoiseAwareVerifier {
    /// Glorot-initialized network `[d (+1), hidden..., 1]`.
    pub fn new(
        dim: usize,
        steps: usize,
        hidden: &[usize],
        time_conditioned: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut v = Self::zeros(dim, steps, hidden, time_conditioned)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        v.weights = v.network().init(&mut rng);
        Ok(v)
    }

    pub fn zeros(dim: usize, steps: usize, hidden: &[usize], time_conditioned: bool) -> Result<Self> {
        if dim == 0 || steps == 0 {
            return Err(Error::InvalidArgument("dim and steps must be positive".into()));
        }
        let mut layer_sizes = vec![dim + usize::from(time_conditioned)];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(1);
        let mlp = Mlp::new(&layer_sizes)?;
        Ok(Self {
            weights: vec![0.0; mlp.num_params()],
            layer_sizes,
            dim,
            steps,
            time_conditioned,
            per_step_checkpoints: BTreeMap::new(),
            normalizer: BTreeMap::new(),
            meta: CheckpointMeta::default(),
        })
    }

    pub fn network(&self) -> Mlp {
        Mlp::new(&self.layer_sizes).expect("validated at construction")
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time_conditioned(&self) -> bool {
        self.time_conditioned
    }

    pub fn checkpoints(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.per_step_checkpoints
    }

    pub fn store_checkpoint(&mut self, step: usize, params: Vec<f64>) -> Result<()> {
        if step >= self.steps {
            return Err(Error::InvalidArgument(format!(
                "checkpoint step {step} outside [0, {}]",
                self.steps - 1
            )));
        }
        if params.len() != self.weights.len() {
            return Err(Error::Shape("checkpoint parameter count mismatch".into()));
        }
        self.per_step_checkpoints.insert(step, params);
        Ok(())
    }

    pub fn clear_checkpoints(&mut self) {
        self.per_step_checkpoints.clear();
    }

    pub fn normalizer(&self) -> &BTreeMap<usize, StepStats> {
        &self.normalizer
    }

    pub fn set_step_stats(&mut self, step: usize, stats: StepStats) -> Result<()> {
        if step > self.steps || stats.mean.len() != self.dim || stats.std.len() != self.dim {
            return Err(Error::Shape(format!("bad normalization stats for step {step}")));
        }
        self.normalizer.insert(step, stats);
        Ok(())
    }

    /// Fits standardization stats for every step present in `data` that has
    /// none yet.
    pub fn fit_missing_stats(&mut self, data: &DistillDataset) -> Result<()> {
        for step in data.step_indices() {
            if self.normalizer.contains_key(&step) {
                continue;
            }
            let stats = StepStats::fit(
                data.records.iter().filter(|r| r.step == step).map(|r| r.estimate.as_slice()),
                self.dim,
            )
            .expect("step present in dataset");
            self.set_step_stats(step, stats)?;
        }
        Ok(())
    }

    /// Network input for an estimate at `step`.
    pub fn input_for(&self, estimate: &[f64], step: usize) -> Result<Vec<f64>> {
        if estimate.len() != self.dim {
            return Err(Error::Shape(format!(
                "estimate has dimension {}, verifier expects {}",
                estimate.len(),
                self.dim
            )));
        }
        if step > self.steps {
            return Err(Error::InvalidArgument(format!("step {step} beyond {}", self.steps)));
        }
        ensure_finite(estimate, "verifier input")?;
        let mut input: Vec<f64> = if self.normalizer.is_empty() {
            estimate.to_vec()
        } else {
            let stats = self
                .normalizer
                .get(&step)
                .ok_or(Error::MissingNormalizer(step))?;
            estimate
                .iter()
                .zip(stats.mean.iter().zip(&stats.std))
                .map(|(x, (m, s))| (x - m) / s)
                .collect()
        };
        if self.time_conditioned {
            input.push(step as f64 / self.steps as f64);
        }
        Ok(input)
    }

    /// Parameters used to score `step`.
    pub fn params_for(&self, step: usize) -> Result<&[f64]> {
        if self.time_conditioned {
            Ok(&self.weights)
        } else {
            self.per_step_checkpoints
                .get(&step)
                .map(Vec::as_slice)
                .ok_or(Error::MissingCheckpoint(step))
        }
    }

    /// Prediction with an explicit parameter vector.
    pub fn predict_with(&self, params: &[f64], estimate: &[f64], step: usize) -> Result<f64> {
        if params.len() != self.weights.len() {
            return Err(Error::Shape("parameter count mismatch".into()));
        }
        let input = self.input_for(estimate, step)?;
        let out = self.network().forward(params, &input, &mut Cache::default());
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFinite {
                what: format!("verifier output at step {step}"),
            })
        }
    }

    /// Noise-aware reward of an intermediate estimate.
    pub fn reward_on_estimate(&self, estimate: &[f64], step: usize) -> Result<f64> {
        let params = self.params_for(step)?;
        self.predict_with(params, estimate, step)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            verifier: self.clone(),
        };
        write_atomic(path, &serde_json::to_vec(&file)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_file(path)?;
        let file: CheckpointFile = serde_json::from_slice(&bytes)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "{} is not a verifier checkpoint",
                path.display()
            )));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: file.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let v = file.verifier;
        let expected = Mlp::new(&v.layer_sizes)?.num_params();
        if v.weights.len() != expected
            || v.per_step_checkpoints.values().any(|p| p.len() != expected)
            || v.per_step_checkpoints.keys().any(|&k| k >= v.steps)
        {
            return Err(Error::Shape(format!("corrupt checkpoint {}", path.display())));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_predicts_zero() {
        let v = NoiseAwareVerifier::zeros(2, 20, &[8, 8], true).unwrap();
        for step in [0, 7, 19] {
            assert_eq!(v.reward_on_estimate(&[3.0, -1.0], step).unwrap(), 0.0);
        }
    }

    #[test]
    fn missing_checkpoint_names_step() {
        let v = NoiseAwareVerifier::new(2, 20, &[4], false, 1).unwrap();
        match v.reward_on_estimate(&[0.0, 0.0], 11) {
            Err(Error::MissingCheckpoint(11)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn checkpoint_keys_are_bounded() {
        let mut v = NoiseAwareVerifier::new(2, 5, &[4], false, 1).unwrap();
        let w = v.weights.clone();
        assert!(v.store_checkpoint(5, w.clone()).is_err());
        v.store_checkpoint(4, w).unwrap();
        assert_eq!(v.checkpoints().len(), 1);
    }

    #[test]
    fn time_feature_is_appended() {
        let v = NoiseAwareVerifier::zeros(2, 10, &[4], true).unwrap();
        assert_eq!(v.input_for(&[1.0, 2.0], 5).unwrap(), vec![1.0, 2.0, 0.5]);
        assert_eq!(v.layer_sizes(), &[3, 4, 1]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = NoiseAwareVerifier::new(2, 6, &[5, 3], false, 9).unwrap();
        v.store_checkpoint(2, v.weights.iter().map(|w| w * 0.5 + 1e-17).collect()).unwrap();
        v.set_step_stats(2, StepStats { mean: vec![0.1, 0.2], std: vec![1.5, 0.3] }).unwrap();
        v.meta.dataset_hash = "abc".into();
        let p = dir.path().join("v.json");
        v.save(&p).unwrap();
        assert_eq!(NoiseAwareVerifier::load(&p).unwrap(), v);
    }
}
