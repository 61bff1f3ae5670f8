//! Identity-covariance check on normal scores, globally and over
//! nearest-neighbour regions of x-space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::stats::mc_p_value;

/// Label attached to every report: identity covariance is implied by, but
/// does not imply, mutual independence of the scores.
pub const CAVEAT: &str = "identity covariance: necessary condition given per-covariate normality";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Neighbourhood {
    Global,
    Local { x0: Vec<f64>, k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub mode: Neighbourhood,
    pub samples: usize,
    pub replicates: usize,
    pub covariance: Vec<Vec<f64>>,
    pub statistic: f64,
    pub p_value: f64,
    pub caveat: String,
    pub warnings: Vec<String>,
}

/// Centred covariance with divisor N, and its squared Frobenius distance to
/// the identity.
pub fn covariance_statistic(z: &Matrix) -> (Matrix, f64) {
    let (n, m) = z.dim();
    let mean = z.sum_axis(ndarray::Axis(0)) / n as f64;
    let centred = z - &mean;
    let cov = centred.t().dot(&centred) / n as f64;
    let mut stat = 0.0;
    for a in 0..m {
        for b in 0..m {
            let target = if a == b { 1.0 } else { 0.0 };
            stat += (cov[[a, b]] - target).powi(2);
        }
    }
    (cov, stat)
}

fn null_statistics(n: usize, m: usize, replicates: usize, seed: u64) -> Vec<f64> {
    (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = RngStream::new(seed, b as u64);
            covariance_statistic(&Matrix::from_shape_fn((n, m), |_| rng.normal())).1
        })
        .collect()
}

fn report(z: &Matrix, mode: Neighbourhood, replicates: usize, seed: u64, warnings: Vec<String>) -> Result<CovarianceReport> {
    if replicates == 0 {
        return Err(Error::Config("independence test needs at least one null replicate".into()));
    }
    let (n, m) = z.dim();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("normal scores contain non-finite values".into()));
    }
    let (cov, statistic) = covariance_statistic(z);
    let null = null_statistics(n, m, replicates, seed);
    Ok(CovarianceReport {
        mode,
        samples: n,
        replicates,
        covariance: cov.rows().into_iter().map(|r| r.to_vec()).collect(),
        statistic,
        p_value: mc_p_value(statistic, &null),
        caveat: CAVEAT.to_string(),
        warnings,
    })
}

/// Identity-covariance test on all rows of `z` (N × m).
pub fn global_independence(z: &Matrix, replicates: usize, seed: u64) -> Result<CovarianceReport> {
    let (n, m) = z.dim();
    if m == 0 || n < m {
        return Err(Error::InvalidArgument(format!(
            "covariance of {m} scores needs at least {m} rows, got {n}"
        )));
    }
    let mut warnings = Vec::new();
    if n < 10 * m {
        warnings.push(format!("only {n} rows for {m} scores; fewer than 10 per coordinate"));
    }
    report(z, Neighbourhood::Global, replicates, seed, warnings)
}

/// Default neighbourhood size max(10·m, N/10).
pub fn default_neighbourhood(m: usize, n: usize) -> usize {
    (10 * m).max(n / 10)
}

/// Identity-covariance test on the `k` calibration rows whose standardized
/// x is nearest to `x0`.
pub fn local_independence(
    z: &Matrix,
    x: &Matrix,
    x0: &[f64],
    k: usize,
    replicates: usize,
    seed: u64,
) -> Result<CovarianceReport> {
    let (n, m) = z.dim();
    if x.nrows() != n {
        return Err(Error::Shape(format!("{n} score rows but {} feature rows", x.nrows())));
    }
    if x0.len() != x.ncols() {
        return Err(Error::Contract(format!(
            "evaluation point has dimension {}, expected d = {}",
            x0.len(),
            x.ncols()
        )));
    }
    if k > n || k < 10 * m {
        return Err(Error::InvalidArgument(format!(
            "neighbourhood size must lie in [{}, {n}], got {k}",
            10 * m
        )));
    }
    let std = crate::regress::Standardizer::fit(x);
    let mut centre = vec![0.0; x0.len()];
    std.apply(x0, &mut centre);
    let xs = std.transform(x);
    let mut dist: Vec<(f64, usize)> = xs
        .rows()
        .into_iter()
        .enumerate()
        .map(|(row, v)| (v.iter().zip(&centre).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), row))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut rows: Vec<usize> = dist[..k].iter().map(|&(_, r)| r).collect();
    rows.sort_unstable();

    let mut warnings = Vec::new();
    let mut keys: Vec<Vec<u64>> = rows.iter().map(|&r| x.row(r).iter().map(|v| v.to_bits()).collect()).collect();
    keys.sort();
    keys.dedup();
    if keys.len() < k {
        warnings.push(format!(
            "neighbourhood of {k} points contains only {} distinct x rows",
            keys.len()
        ));
    }
    let sub = z.select(ndarray::Axis(0), &rows);
    report(
        &sub,
        Neighbourhood::Local { x0: x0.to_vec(), k },
        replicates,
        seed,
        warnings,
    )
}
