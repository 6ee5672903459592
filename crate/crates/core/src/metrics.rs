//! Rank consistency and budget-integrated performance metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kendall's tau-a: `(C - D) / C(n, 2)`; tied pairs count as neither.
///
/// Knight's O(n log n) algorithm: sort by `(a, b)`, then count the exchanges
/// a merge sort on `b` needs.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::Shape(format!("kendall inputs differ in length: {n} vs {}", b.len())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("kendall tau needs at least two points".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite { what: "kendall input".into() });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));

    let pairs = |run: u64| run * run.saturating_sub(1) / 2;
    let mut ties_a = 0u64;
    let mut ties_ab = 0u64;
    let (mut run_a, mut run_ab) = (1u64, 1u64);
    for w in idx.windows(2) {
        let (i, j) = (w[0], w[1]);
        if a[i] == a[j] {
            run_a += 1;
            if b[i] == b[j] {
                run_ab += 1;
            } else {
                ties_ab += pairs(run_ab);
                run_ab = 1;
            }
        } else {
            ties_a += pairs(run_a);
            ties_ab += pairs(run_ab);
            run_a = 1;
            run_ab = 1;
        }
    }
    ties_a += pairs(run_a);
    ties_ab += pairs(run_ab);

    let mut vals: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let swaps = merge_count(&mut vals);

    let mut ties_b = 0u64;
    let mut run_b = 1u64;
    for w in vals.windows(2) {
        if w[0] == w[1] {
            run_b += 1;
        } else {
            ties_b += pairs(run_b);
            run_b = 1;
        }
    }
    ties_b += pairs(run_b);

    let total = pairs(n as u64);
    let numer = total as i128 - ties_a as i128 - ties_b as i128 + ties_ab as i128 - 2 * swaps as i128;
    Ok(numer as f64 / total as f64)
}

/// Sorts ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

/// Seed-averaged chosen reward over a budget grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCurve {
    pub budgets: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl BudgetCurve {
    pub fn new(budgets: Vec<f64>, rewards: Vec<f64>) -> Result<Self> {
        if budgets.len() != rewards.len() {
            return Err(Error::Shape("budgets and rewards differ in length".into()));
        }
        if budgets.len() < 2 {
            return Err(Error::InvalidArgument("a budget curve needs at least two points".into()));
        }
        if budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("budgets must be strictly increasing".into()));
        }
        if budgets.iter().chain(&rewards).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "budget curve".into() });
        }
        Ok(Self { budgets, rewards })
    }

    fn index_of(&self, budget: f64) -> Result<usize> {
        let scale = self.budgets[self.budgets.len() - 1].abs().max(1.0);
        self.budgets
            .iter()
            .position(|b| (b - budget).abs() <= 1e-9 * scale)
            .ok_or(Error::OffGrid { budget })
    }

    /// Gains `r(B) - r(B_min)` at every grid point.
    pub fn gains(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r - self.rewards[0]).collect()
    }
}

/// `r(B) - r(B_min)`; `B` must be a grid point.
pub fn gain(curve: &BudgetCurve, budget: f64) -> Result<f64> {
    let i = curve.index_of(budget)?;
    Ok(curve.rewards[i] - curve.rewards[0])
}

/// Composite Simpson's rule on a uniform grid with an even panel count.
pub fn simpson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape("simpson abscissae and ordinates differ in length".into()));
    }
    let panels = xs.len().saturating_sub(1);
    if panels < 2 || !panels.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "simpson needs an even, nonzero panel count; got {panels}"
        )));
    }
    let h = (xs[panels] - xs[0]) / panels as f64;
    let uniform = xs
        .iter()
        .enumerate()
        .all(|(i, x)| (x - (xs[0] + i as f64 * h)).abs() <= 1e-9 * h.abs().max(1.0));
    if !uniform || h <= 0.0 {
        return Err(Error::NonUniformGrid);
    }
    let mut sum = ys[0] + ys[panels];
    for (i, y) in ys.iter().enumerate().take(panels).skip(1) {
        sum += if i % 2 == 1 { 4.0 * y } else { 2.0 * y };
    }
    Ok(sum * h / 3.0)
}

/// Budget-integrated gain `h`.
pub fn integrated_gain(curve: &BudgetCurve) -> Result<f64> {
    simpson(&curve.budgets, &curve.gains())
}

/// `omega = (h_tar - h_ref) / h_ref` over a shared grid.
pub fn relative_performance(target: &BudgetCurve, reference: &BudgetCurve) -> Result<f64> {
    if target.budgets.len() != reference.budgets.len()
        || target
            .budgets
            .iter()
            .zip(&reference.budgets)
            .any(|(a, b)| (a - b).abs() > 1e-9 * a.abs().max(1.0))
    {
        return Err(Error::Shape("curves do not share a budget grid".into()));
    }
    let h_ref = integrated_gain(reference)?;
    if h_ref == 0.0 {
        return Err(Error::ZeroReferenceGain);
    }
    Ok((integrated_gain(target)? - h_ref) / h_ref)
}

/// Uniform grid `start, start + step, ..., <= stop`.
pub fn budget_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && start.is_finite() && stop >= start) {
        return Err(Error::InvalidArgument("budget grid needs step > 0 and stop >= start".into()));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

/// Mean, sample std and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { n, mean: f64::NAN, std: f64::NAN, stderr: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { n, mean, std, stderr: std / (n as f64).sqrt() }
}
