//! EDM-parameterized sampling on a Gaussian-mixture data distribution.
//!
//! The forward process is `x_t = x_0 + sigma * eps`, so the noisy marginal at
//! level `sigma` is again a Gaussian mixture with component variances
//! `s_k^2 + sigma^2`. That makes the score, the posterior mean and the
//! probability-flow ODE available in closed form, which is what every test
//! downstream leans on.
//!
//! Step indexing: `j = 0` is the noisiest boundary (`sigma_max`) and
//! `j = M` the cleanest (`sigma_min`). Estimate index `j` holds the posterior
//! mean recorded after `j + 1` denoising steps.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_finite, Error, Result};

/// Discretized noise levels plus the per-step SDE churn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule")]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    beta: Vec<f64>,
}

impl NoiseSchedule {
    /// `sigmas` holds `M + 1` boundaries from noisiest to cleanest, `beta` the
    /// `M` per-step Langevin rates (zero for a pure ODE step).
    pub fn new(sigmas: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::InvalidArgument(
                "a schedule needs at least one step".into(),
            ));
        }
        ensure_finite(&sigmas, "schedule sigmas")?;
        ensure_finite(&beta, "schedule beta")?;
        if beta.len() != sigmas.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "beta has {} entries, expected {}",
                beta.len(),
                sigmas.len() - 1
            )));
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument(
                "sigmas must be strictly decreasing".into(),
            ));
        }
        if *sigmas.last().unwrap() < 0.0 {
            return Err(Error::InvalidArgument("sigma_min must be >= 0".into()));
        }
        if beta.iter().any(|&b| b < 0.0) {
            return Err(Error::InvalidArgument("beta must be nonnegative".into()));
        }
        Ok(Self { sigmas, beta })
    }

    /// Geometric spacing between `sigma_max` and `sigma_min` with zero churn.
    pub fn geometric(steps: usize, sigma_max: f64, sigma_min: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        if !(sigma_min > 0.0 && sigma_max > sigma_min) {
            return Err(Error::InvalidArgument(format!(
                "geometric schedule needs 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        let ratio = sigma_min / sigma_max;
        let mut sigmas: Vec<f64> = (0..=steps)
            .map(|j| sigma_max * ratio.powf(j as f64 / steps as f64))
            .collect();
        sigmas[0] = sigma_max;
        sigmas[steps] = sigma_min;
        Self::new(sigmas, vec![0.0; steps])
    }

    /// Same noise levels with a constant churn rate on every step.
    pub fn with_churn(mut self, beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid churn {beta}")));
        }
        self.beta.iter_mut().for_each(|b| *b = beta);
        Ok(self)
    }

    /// Number of inference steps `M`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn sigma(&self, j: usize) -> f64 {
        self.sigmas[j]
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigmas[self.steps()]
    }

    /// Langevin duration attached to one step; time runs over `[0, 1]`.
    pub fn step_duration(&self) -> f64 {
        1.0 / self.steps() as f64
    }

    /// Hex SHA-256 over the exact bit patterns of the schedule.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"ttsnap-schedule-v1");
        h.update((self.steps() as u64).to_le_bytes());
        for s in &self.sigmas {
            h.update(s.to_le_bytes());
        }
        for b in &self.beta {
            h.update(b.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Deserialize)]
struct RawSchedule {
    sigmas: Vec<f64>,
    beta: Vec<f64>,
}

impl TryFrom<RawSchedule> for NoiseSchedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        Self::new(raw.sigmas, raw.beta)
    }
}

/// Isotropic Gaussian mixture in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture")]
pub struct MixtureModel {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    comp_std: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    comp_std: Vec<f64>,
}

impl TryFrom<RawMixture> for MixtureModel {
    type Error = Error;

    fn try_from(raw: RawMixture) -> Result<Self> {
        Self::new(raw.weights, raw.means, raw.comp_std)
    }
}

impl MixtureModel {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, comp_std: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || comp_std.len() != k {
            return Err(Error::InvalidArgument(format!(
                "mixture needs matching non-empty weights/means/stds, got {}/{}/{}",
                k,
                means.len(),
                comp_std.len()
            )));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidArgument(
                "all means must share a positive dimension".into(),
            ));
        }
        for m in &means {
            ensure_finite(m, "mixture mean")?;
        }
        ensure_finite(&weights, "mixture weights")?;
        ensure_finite(&comp_std, "mixture stds")?;
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        if comp_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument(
                "component stds must be positive".into(),
            ));
        }
        Ok(Self {
            weights,
            means,
            comp_std,
        })
    }

    /// Builds a mixture from unnormalized positive weights.
    pub fn from_unnormalized(
        weights: &[f64],
        means: Vec<Vec<f64>>,
        comp_std: Vec<f64>,
    ) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidArgument("weights must sum to a positive value".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect(), means, comp_std)
    }

    /// `k` equal-weight components spaced evenly on a circle in the first two
    /// coordinates of `R^dim`.
    pub fn ring(k: usize, dim: usize, radius: f64, std: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument("ring mixtures need dim >= 2".into()));
        }
        let means = (0..k)
            .map(|i| {
                let angle = 2.0 * PI * i as f64 / k as f64;
                let mut m = vec![0.0; dim];
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
                m
            })
            .collect();
        Self::from_unnormalized(&vec![1.0; k], means, vec![std; k])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn comp_std(&self) -> &[f64] {
        &self.comp_std
    }

    /// Mean of the data distribution.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    /// Draws one clean sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.means[k]
            .iter()
            .map(|m| m + self.comp_std[k] * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Per-component log joint terms `log w_k + log N(x; mu_k, v_k I)` and variances.
    fn log_terms(&self, x: &[f64], sigma: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim() as f64;
        let mut logits = Vec::with_capacity(self.components());
        let mut vars = Vec::with_capacity(self.components());
        for k in 0..self.components() {
            let v = self.comp_std[k] * self.comp_std[k] + sigma * sigma;
            let sq: f64 = x
                .iter()
                .zip(&self.means[k])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            logits.push(self.weights[k].ln() - 0.5 * d * (2.0 * PI * v).ln() - 0.5 * sq / v);
            vars.push(v);
        }
        (logits, vars)
    }

    fn check_input(&self, x: &[f64], sigma: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "point has dimension {}, mixture has {}",
                x.len(),
                self.dim()
            )));
        }
        ensure_finite(x, "point")?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("noise level {sigma}"),
            });
        }
        Ok(())
    }

    /// Posterior component responsibilities at noise level `sigma`.
    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_input(x, sigma)?;
        let (logits, _) = self.log_terms(x, sigma);
        softmax(&logits).ok_or_else(|| Error::Underflow {
            x: x.to_vec(),
            sigma,
        })
    }

    /// `log p(x, sigma)` of the sigma-smoothed mixture.
    pub fn log_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        self.check_input(x, sigma)?;
        let (logits, _) = self.log_terms(x, sigma);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::Underflow {
                x: x.to_vec(),
                sigma,
            });
        }
        Ok(m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln())
    }
}

fn softmax(logits: &[f64]) -> Option<Vec<f64>> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let mut out: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = out.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return None;
    }
    out.iter_mut().for_each(|v| *v /= z);
    Some(out)
}

/// `grad_x log p(x, sigma)` of the sigma-smoothed mixture.
pub fn score(mixture: &MixtureModel, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    mixture.check_input(x, sigma)?;
    let (logits, vars) = mixture.log_terms(x, sigma);
    let resp = softmax(&logits).ok_or_else(|| Error::Underflow {
        x: x.to_vec(),
        sigma,
    })?;
    let mut out = vec![0.0; x.len()];
    for (k, r) in resp.iter().enumerate() {
        if *r == 0.0 {
            continue;
        }
        let coef = r / vars[k];
        for ((o, xi), mi) in out.iter_mut().zip(x).zip(&mixture.means[k]) {
            *o += coef * (mi - xi);
        }
    }
    Ok(out)
}

/// Posterior mean `E[x_0 | x_t = x]` via Tweedie's formula.
pub fn tweedie(mixture: &MixtureModel, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let s = score(mixture, x, sigma)?;
    let var = sigma * sigma;
    Ok(x.iter().zip(&s).map(|(xi, si)| xi + var * si).collect())
}

/// Advances `x` from `sigma[j]` to `sigma[j + 1]`.
///
/// Euler on the probability-flow ODE; when `beta[j] > 0` an Euler–Maruyama
/// Langevin correction at the current level is added, drawing `d` normals
/// from `rng`. Pure ODE steps never touch `rng`.
pub fn denoise_step<R: Rng + ?Sized>(
    mixture: &MixtureModel,
    schedule: &NoiseSchedule,
    x: &[f64],
    j: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if j >= schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "step {j} out of range for {} steps",
            schedule.steps()
        )));
    }
    denoise_between(
        mixture,
        x,
        schedule.sigma(j),
        schedule.sigma(j + 1),
        schedule.beta[j] * schedule.step_duration(),
        rng,
    )
    .map_err(|e| match e {
        Error::NonFinite { .. } | Error::NonFiniteStep { .. } => Error::NonFiniteStep { step: j },
        other => other,
    })
}

/// One sampler update between two arbitrary noise levels.
///
/// `churn` is the Langevin time `beta * dt` spent at level `sigma`; zero
/// gives a plain Euler step.
pub fn denoise_between<R: Rng + ?Sized>(
    mixture: &MixtureModel,
    x: &[f64],
    sigma: f64,
    next: f64,
    churn: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let s = score(mixture, x, sigma)?;
    // dx = -sigma_dot * sigma * score dt, integrated over sigma -> next.
    let drift = (sigma - next) * sigma;
    let out: Vec<f64> = if churn > 0.0 {
        let langevin = churn * sigma * sigma;
        let noise = (2.0 * churn).sqrt() * sigma;
        x.iter()
            .zip(&s)
            .map(|(xi, si)| {
                let z: f64 = rng.sample(StandardNormal);
                xi + (drift + langevin) * si + noise * z
            })
            .collect()
    } else {
        x.iter().zip(&s).map(|(xi, si)| xi + drift * si).collect()
    };
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite {
            what: "denoised state".into(),
        })
    }
}

/// One candidate's full denoising record.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    dim: usize,
    /// `(M + 1) x d`, row-major.
    latents: Vec<f64>,
    /// `M x d`, row-major.
    estimates: Vec<f64>,
}

impl Trajectory {
    pub(crate) fn from_parts(
        seed: u64,
        dim: usize,
        latents: Vec<f64>,
        estimates: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 || !latents.len().is_multiple_of(dim) || latents.len() < 2 * dim {
            return Err(Error::Shape("bad latent buffer".into()));
        }
        let steps = latents.len() / dim - 1;
        if estimates.len() != steps * dim {
            return Err(Error::Shape(format!(
                "expected {} estimate values, got {}",
                steps * dim,
                estimates.len()
            )));
        }
        Ok(Self {
            seed,
            dim,
            latents,
            estimates,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.estimates.len() / self.dim
    }

    pub fn x_init(&self) -> &[f64] {
        self.latent(0)
    }

    pub fn latent(&self, j: usize) -> &[f64] {
        &self.latents[j * self.dim..(j + 1) * self.dim]
    }

    /// Posterior mean recorded after `j + 1` denoising steps.
    pub fn estimate(&self, j: usize) -> &[f64] {
        &self.estimates[j * self.dim..(j + 1) * self.dim]
    }

    pub fn final_sample(&self) -> &[f64] {
        self.latent(self.steps())
    }

    pub fn latents_flat(&self) -> &[f64] {
        &self.latents
    }

    pub fn estimates_flat(&self) -> &[f64] {
        &self.estimates
    }
}

/// Incremental trajectory builder; pool generation interleaves it with batch
/// repulsion between steps.
pub(crate) struct Walker {
    seed: u64,
    rng: ChaCha8Rng,
    current: Vec<f64>,
    latents: Vec<f64>,
    estimates: Vec<f64>,
}

impl Walker {
    pub(crate) fn new(seed: u64, schedule: &NoiseSchedule, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = schedule.sigma_max();
        let x: Vec<f64> = (0..dim)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::with_init(seed, rng, x, schedule.steps())
    }

    pub(crate) fn from_init(seed: u64, x_init: Vec<f64>, steps: usize) -> Self {
        Self::with_init(seed, ChaCha8Rng::seed_from_u64(seed), x_init, steps)
    }

    fn with_init(seed: u64, rng: ChaCha8Rng, x: Vec<f64>, steps: usize) -> Self {
        let dim = x.len();
        let mut latents = Vec::with_capacity((steps + 1) * dim);
        latents.extend_from_slice(&x);
        Self {
            seed,
            rng,
            current: x,
            latents,
            estimates: Vec::with_capacity(steps * dim),
        }
    }

    pub(crate) fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn current(&self) -> &[f64] {
        &self.current
    }

    /// Runs step `j` without recording it.
    pub(crate) fn step(
        &mut self,
        mixture: &MixtureModel,
        schedule: &NoiseSchedule,
        j: usize,
    ) -> Result<()> {
        self.current = denoise_step(mixture, schedule, &self.current, j, &mut self.rng)?;
        Ok(())
    }

    pub(crate) fn displace(&mut self, delta: &[f64]) {
        for (x, d) in self.current.iter_mut().zip(delta) {
            *x += d;
        }
    }

    /// Records the current latent at level `sigma` along with its estimate.
    pub(crate) fn record(&mut self, mixture: &MixtureModel, sigma: f64) -> Result<()> {
        let est = tweedie(mixture, &self.current, sigma)?;
        self.latents.extend_from_slice(&self.current);
        self.estimates.extend_from_slice(&est);
        Ok(())
    }

    pub(crate) fn finish(self) -> Result<Trajectory> {
        let dim = self.current.len();
        Trajectory::from_parts(self.seed, dim, self.latents, self.estimates)
    }
}

/// Samples one trajectory starting from `sigma_max * N(0, I)`; a pure
/// function of its inputs.
pub fn sample_trajectory(
    mixture: &MixtureModel,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Trajectory> {
    let walker = Walker::new(seed, schedule, mixture.dim());
    run_walker(walker, mixture, schedule)
}

/// Same as [`sample_trajectory`] but from an explicit initial point.
pub fn sample_trajectory_from(
    mixture: &MixtureModel,
    schedule: &NoiseSchedule,
    seed: u64,
    x_init: Vec<f64>,
) -> Result<Trajectory> {
    if x_init.len() != mixture.dim() {
        return Err(Error::Shape("initial point dimension mismatch".into()));
    }
    ensure_finite(&x_init, "initial point")?;
    let walker = Walker::from_init(seed, x_init, schedule.steps());
    run_walker(walker, mixture, schedule)
}

fn run_walker(
    mut walker: Walker,
    mixture: &MixtureModel,
    schedule: &NoiseSchedule,
) -> Result<Trajectory> {
    for j in 0..schedule.steps() {
        walker.step(mixture, schedule, j)?;
        walker.record(mixture, schedule.sigma(j + 1))?;
    }
    walker.finish()
}
