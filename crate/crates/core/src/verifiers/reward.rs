use serde::{Deserialize, Serialize};

use crate::dynamics::MixtureModel;
use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    ModePreference,
    HighFrequencyComposite,
}

/// Clean-domain reward: a smooth pull toward one mixture mode plus a
/// product-of-sines detail term that blurred estimates cannot resolve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub target_mode: usize,
    pub smooth_weight: f64,
    pub rough_weight: f64,
    pub frequency: f64,
}

impl RewardSpec {
    pub fn mode_preference(target_mode: usize) -> Self {
        Self {
            kind: RewardKind::ModePreference,
            target_mode,
            smooth_weight: 1.0,
            rough_weight: 0.0,
            frequency: 1.0,
        }
    }

    pub fn composite(target_mode: usize, smooth_weight: f64, rough_weight: f64, frequency: f64) -> Self {
        Self {
            kind: RewardKind::HighFrequencyComposite,
            target_mode,
            smooth_weight,
            rough_weight,
            frequency,
        }
    }

    pub fn validate(&self, mixture: &MixtureModel) -> Result<()> {
        if !(self.smooth_weight >= 0.0 && self.rough_weight >= 0.0) {
            return Err(Error::InvalidArgument("reward weights must be nonnegative".into()));
        }
        if self.smooth_weight + self.rough_weight <= 0.0 {
            return Err(Error::InvalidArgument("reward weights must not both be zero".into()));
        }
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(Error::InvalidArgument("frequency must be positive".into()));
        }
        if self.target_mode >= mixture.components() {
            return Err(Error::InvalidArgument(format!(
                "target mode {} out of range for {} components",
                self.target_mode,
                mixture.components()
            )));
        }
        Ok(())
    }
}

/// `smooth * -|x - mu_target|^2 + rough * prod_i sin(frequency * x_i)`.
pub fn reward_clean(spec: &RewardSpec, mixture: &MixtureModel, x0: &[f64]) -> Result<f64> {
    ensure_finite(x0, "reward input")?;
    let target = mixture.means().get(spec.target_mode).ok_or_else(|| {
        Error::InvalidArgument(format!("target mode {} out of range", spec.target_mode))
    })?;
    if target.len() != x0.len() {
        return Err(Error::Shape("reward input dimension mismatch".into()));
    }
    let sq: f64 = x0.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    let mut value = -spec.smooth_weight * sq;
    if spec.rough_weight != 0.0 {
        let prod: f64 = x0.iter().map(|v| (spec.frequency * v).sin()).product();
        value += spec.rough_weight * prod;
    }
    Ok(value)
}
