//! Small statistical helpers shared by the diagnostics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Outcome of a test at a fixed level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    Accept,
    Reject,
}

impl Decision {
    pub fn from_adjusted(p_adjusted: &[f64], level: f64) -> Self {
        if p_adjusted.iter().any(|&p| p < level) {
            Decision::Reject
        } else {
            Decision::Accept
        }
    }

    pub fn is_reject(self) -> bool {
        self == Decision::Reject
    }
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Accept => "ACCEPT",
            Decision::Reject => "REJECT",
        })
    }
}

/// Monte-Carlo p-value (1 + #{null ≥ observed}) / (B + 1).
pub fn mc_p_value(observed: f64, null: &[f64]) -> f64 {
    let exceed = null.iter().filter(|&&s| s >= observed).count();
    (1 + exceed) as f64 / (null.len() + 1) as f64
}

/// Bonferroni adjustment over `m` simultaneous tests.
pub fn bonferroni(p: f64, m: usize) -> f64 {
    (p * m as f64).min(1.0)
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Kolmogorov-Smirnov distance between the empirical law of `values` and
/// the uniform law on (0, 1).
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(k, &u)| {
            let u = u.clamp(0.0, 1.0);
            ((k + 1) as f64 / n - u).max(u - k as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Upper tail of the χ² distribution.
pub fn chi2_sf(statistic: f64, dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidArgument("chi-squared needs at least one degree of freedom".into()));
    }
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Internal(e.to_string()))?;
    Ok(dist.sf(statistic.max(0.0)))
}

/// Rejects `B` when the smallest achievable Bonferroni-adjusted p-value
/// cannot reach `level` with `m` tests.
pub fn check_replicates(replicates: usize, level: f64, m: usize) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("level must lie in (0, 1), got {level}")));
    }
    let floor = 1.0 / (replicates + 1) as f64;
    let target = level / m as f64;
    if floor > target {
        let needed = (m as f64 / level).ceil() as usize - 1;
        return Err(Error::Config(format!(
            "{replicates} null replicates give a p-value floor of {floor:.4}, above level/m = {target:.4}; \
             use at least {needed} replicates"
        )));
    }
    Ok(())
}
