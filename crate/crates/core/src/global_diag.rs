//! Global uniformity checks on PIT covariates, PP-plot data, and a
//! simulation-based-calibration rank baseline.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CalibrationDataset;
use crate::error::{shape_err, Error, Result};
use crate::estimator::ConditionalEstimator;
use crate::numerics::RngStream;
use crate::pit::PitMatrix;
use crate::stats::{bonferroni, check_replicates, chi2_sf, mc_p_value, quantile_sorted, Decision};

/// Sorted α-values strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AlphaGrid {
    values: Vec<f64>,
}

impl AlphaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("alpha grid is empty".into()));
        }
        if values.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::InvalidArgument("alpha grid values must lie strictly inside (0, 1)".into()));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("alpha grid must be strictly increasing".into()));
        }
        Ok(Self { values })
    }

    /// k points j/(k+1), j = 1..k.
    pub fn equispaced(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("alpha grid size must be positive".into()));
        }
        Self::new((1..=k).map(|j| j as f64 / (k + 1) as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self::equispaced(100).expect("non-empty grid")
    }
}

impl TryFrom<Vec<f64>> for AlphaGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AlphaGrid> for Vec<f64> {
    fn from(g: AlphaGrid) -> Self {
        g.values
    }
}

/// Fraction of `values` at or below each grid point.
pub(crate) fn ecdf_on_grid(values: impl IntoIterator<Item = f64>, grid: &AlphaGrid) -> Vec<f64> {
    let g = grid.values();
    let mut counts = vec![0usize; g.len() + 1];
    let mut n = 0usize;
    for u in values {
        counts[g.partition_point(|&a| a < u)] += 1;
        n += 1;
    }
    let mut acc = 0usize;
    counts[..g.len()]
        .iter()
        .map(|c| {
            acc += c;
            acc as f64 / n as f64
        })
        .collect()
}

/// Mean squared deviation of a curve from the diagonal over the grid.
pub fn grid_statistic(curve: &[f64], grid: &AlphaGrid) -> f64 {
    curve
        .iter()
        .zip(grid.values())
        .map(|(r, a)| (r - a) * (r - a))
        .sum::<f64>()
        / grid.len() as f64
}

/// Empirical CDF of each PIT covariate on the grid, shape m × |G|.
pub fn global_ecdf(p: &PitMatrix, grid: &AlphaGrid) -> Result<Vec<Vec<f64>>> {
    if p.is_empty() {
        return Err(Error::InvalidArgument("empty PIT matrix".into()));
    }
    Ok((0..p.dim())
        .map(|i| ecdf_on_grid(p.values().column(i).iter().copied(), grid))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalConfig {
    pub level: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            level: 0.05,
            replicates: 999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalReport {
    pub n: usize,
    pub m: usize,
    pub level: f64,
    pub replicates: usize,
    pub seed: u64,
    pub estimator: String,
    pub dataset_fingerprint: String,
    pub clipped_pit_values: usize,
    pub grid: Vec<f64>,
    /// Per-covariate ECDF curves, m × |G|.
    pub curves: Vec<Vec<f64>>,
    /// Pointwise null band at level/m, shared by all covariates.
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
    pub statistics: Vec<f64>,
    pub p_values: Vec<f64>,
    pub p_adjusted: Vec<f64>,
    /// 1-based indices of covariates with adjusted p below level.
    pub rejected: Vec<usize>,
    pub decision: Decision,
}

/// Null curves of `replicates` samples of `n` iid uniforms, replicate b
/// drawn from stream b of `seed`.
pub(crate) fn uniform_null_curves(n: usize, replicates: usize, grid: &AlphaGrid, seed: u64) -> Vec<Vec<f64>> {
    (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = RngStream::new(seed, b as u64);
            ecdf_on_grid((0..n).map(|_| rng.uniform()), grid)
        })
        .collect()
}

/// Pointwise [q/2, 1 - q/2] quantiles of a set of curves.
pub(crate) fn pointwise_band(curves: &[Vec<f64>], len: usize, q: f64) -> (Vec<f64>, Vec<f64>) {
    let mut lo = Vec::with_capacity(len);
    let mut hi = Vec::with_capacity(len);
    let mut column = Vec::with_capacity(curves.len());
    for k in 0..len {
        column.clear();
        column.extend(curves.iter().map(|c| c[k]));
        column.sort_by(f64::total_cmp);
        lo.push(quantile_sorted(&column, q / 2.0));
        hi.push(quantile_sorted(&column, 1.0 - q / 2.0));
    }
    (lo, hi)
}

/// Per-covariate uniformity test with a simulated null and Bonferroni
/// correction over the m covariates.
pub fn global_test(p: &PitMatrix, grid: &AlphaGrid, cfg: &GlobalConfig) -> Result<GlobalReport> {
    if cfg.replicates < 99 {
        return Err(Error::Config(format!(
            "global test needs at least 99 null replicates, got {}",
            cfg.replicates
        )));
    }
    check_replicates(cfg.replicates, cfg.level, p.dim())?;
    let curves = global_ecdf(p, grid)?;
    let m = p.dim();
    let null = uniform_null_curves(p.len(), cfg.replicates, grid, cfg.seed);
    let null_stats: Vec<f64> = null.iter().map(|c| grid_statistic(c, grid)).collect();
    let statistics: Vec<f64> = curves.iter().map(|c| grid_statistic(c, grid)).collect();
    let p_values: Vec<f64> = statistics.iter().map(|&s| mc_p_value(s, &null_stats)).collect();
    let p_adjusted: Vec<f64> = p_values.iter().map(|&v| bonferroni(v, m)).collect();
    let (band_lo, band_hi) = pointwise_band(&null, grid.len(), cfg.level / m as f64);
    let rejected = p_adjusted
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < cfg.level)
        .map(|(i, _)| i + 1)
        .collect();
    Ok(GlobalReport {
        n: p.len(),
        m,
        level: cfg.level,
        replicates: cfg.replicates,
        seed: cfg.seed,
        estimator: p.provenance().estimator.clone(),
        dataset_fingerprint: p.provenance().dataset_fingerprint.clone(),
        clipped_pit_values: p.clip_count(),
        grid: grid.values().to_vec(),
        curves,
        band_lo,
        band_hi,
        statistics,
        decision: Decision::from_adjusted(&p_adjusted, cfg.level),
        p_values,
        p_adjusted,
        rejected,
    })
}

/// Writes `ppplot_pit_{i}.csv` (columns alpha,r_hat,band_lo,band_hi) for
/// every covariate into `dir`, returning the paths written.
pub fn emit_ppplot(report: &GlobalReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(report.m);
    for (i, curve) in report.curves.iter().enumerate() {
        let path = dir.join(format!("ppplot_pit_{}.csv", i + 1));
        write_curve_csv(&path, &report.grid, curve, Some((&report.band_lo, &report.band_hi)))?;
        paths.push(path);
    }
    Ok(paths)
}

pub(crate) fn write_curve_csv(
    path: &Path,
    grid: &[f64],
    curve: &[f64],
    band: Option<(&Vec<f64>, &Vec<f64>)>,
) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    match band {
        Some(_) => writeln!(out, "alpha,r_hat,band_lo,band_hi")?,
        None => writeln!(out, "alpha,r_hat")?,
    }
    for (k, (a, r)) in grid.iter().zip(curve).enumerate() {
        match band {
            Some((lo, hi)) => writeln!(out, "{a},{r},{},{}", lo[k], hi[k])?,
            None => writeln!(out, "{a},{r}")?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes any serializable report as pretty JSON.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Rank of each true parameter among `draws` samples from the estimator at
/// the same observation: rank[n][i] = #{l : sample_l,i < θ_n,i}.
/// Row n uses stream n of `seed`.
pub fn sbc_ranks<E: ConditionalEstimator + ?Sized>(
    estimator: &E,
    data: &CalibrationDataset,
    draws: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if draws < 20 {
        return Err(Error::InvalidArgument(format!("SBC needs at least 20 posterior draws, got {draws}")));
    }
    if data.theta_dim() != estimator.theta_dim() {
        return Err(shape_err("dataset theta dimension", estimator.theta_dim(), data.theta_dim()));
    }
    if data.obs_dim() != estimator.obs_dim() {
        return Err(shape_err("dataset x dimension", estimator.obs_dim(), data.obs_dim()));
    }
    (0..data.len())
        .into_par_iter()
        .map(|n| {
            let theta = data.theta_row(n).to_vec();
            let x = data.x_row(n).to_vec();
            let mut rng = RngStream::new(seed, n as u64);
            let mut rank = vec![0usize; theta.len()];
            for _ in 0..draws {
                let s = estimator.sample(&x, &mut rng)?;
                for (r, (sv, tv)) in rank.iter_mut().zip(s.iter().zip(&theta)) {
                    if sv < tv {
                        *r += 1;
                    }
                }
            }
            Ok(rank)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcReport {
    pub draws: usize,
    pub bins: usize,
    /// Per-covariate counts over merged rank bins.
    pub histograms: Vec<Vec<usize>>,
    pub statistics: Vec<f64>,
    pub p_values: Vec<f64>,
    pub p_adjusted: Vec<f64>,
    pub level: f64,
    pub decision: Decision,
}

/// χ² uniformity test of SBC ranks. Ranks 0..=draws are merged into at
/// most `N / 20` equal-width bins so every expected count is at least 20.
pub fn sbc_test(ranks: &[Vec<usize>], draws: usize, level: f64) -> Result<SbcReport> {
    let n = ranks.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no SBC ranks".into()));
    }
    let m = ranks[0].len();
    let values = draws + 1;
    let bins = values.min(n / 20).max(2);
    let bin_of = |r: usize| r * bins / values;
    let mut width = vec![0usize; bins];
    for r in 0..values {
        width[bin_of(r)] += 1;
    }
    let mut histograms = vec![vec![0usize; bins]; m];
    for row in ranks {
        if row.len() != m {
            return Err(shape_err("SBC rank row", m, row.len()));
        }
        for (i, &r) in row.iter().enumerate() {
            if r > draws {
                return Err(Error::InvalidArgument(format!("rank {r} exceeds draw count {draws}")));
            }
            histograms[i][bin_of(r)] += 1;
        }
    }
    let mut statistics = Vec::with_capacity(m);
    let mut p_values = Vec::with_capacity(m);
    for h in &histograms {
        let stat: f64 = h
            .iter()
            .zip(&width)
            .map(|(&o, &w)| {
                let e = n as f64 * w as f64 / values as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        p_values.push(chi2_sf(stat, bins - 1)?);
        statistics.push(stat);
    }
    let p_adjusted: Vec<f64> = p_values.iter().map(|&p| bonferroni(p, m)).collect();
    Ok(SbcReport {
        draws,
        bins,
        histograms,
        statistics,
        decision: Decision::from_adjusted(&p_adjusted, level),
        p_values,
        p_adjusted,
        level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;
    use crate::flow::ConditionalFlow;
    use crate::numerics::Matrix;
    use crate::pit::PitProvenance;
    use proptest::prelude::*;

    fn pit(values: Matrix) -> PitMatrix {
        PitMatrix::from_values(
            values,
            PitProvenance {
                estimator: "test".into(),
                dataset_fingerprint: "fp".into(),
                task: "none".into(),
            },
        )
        .unwrap()
    }

    fn column(v: &[f64]) -> PitMatrix {
        pit(Matrix::from_shape_vec((v.len(), 1), v.to_vec()).unwrap())
    }

    #[test]
    fn grid_construction() {
        let g = AlphaGrid::equispaced(3).unwrap();
        assert_eq!(g.values(), &[0.25, 0.5, 0.75]);
        assert_eq!(AlphaGrid::default().len(), 100);
        assert!(AlphaGrid::new(vec![0.0, 0.5]).is_err());
        assert!(AlphaGrid::new(vec![0.5, 0.5]).is_err());
        assert!(AlphaGrid::new(vec![]).is_err());
        let back: AlphaGrid = serde_json::from_str("[0.1,0.9]").unwrap();
        assert_eq!(back.values(), &[0.1, 0.9]);
        assert!(serde_json::from_str::<AlphaGrid>("[0.9,0.1]").is_err());
    }

    #[test]
    fn ecdf_counting() {
        let p = column(&[0.1, 0.2, 0.3, 0.4]);
        let g = AlphaGrid::new(vec![0.05, 0.25, 0.3, 0.95]).unwrap();
        assert_eq!(global_ecdf(&p, &g).unwrap()[0], vec![0.0, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn uniform_column_close_to_diagonal() {
        let g = AlphaGrid::default();
        let mut covered = 0;
        for seed in 0..40 {
            let mut rng = RngStream::new(seed, 99);
            let curve = ecdf_on_grid((0..10_000).map(|_| rng.uniform()), &g);
            let worst = curve.iter().zip(g.values()).map(|(c, a)| (c - a).abs()).fold(0.0, f64::max);
            covered += (worst < 0.02) as usize;
        }
        // DKW: P(sup > 0.02) ≤ 2 exp(-2 · 10⁴ · 0.02²) ≈ 6.7e-4
        assert!(covered >= 38);
    }

    #[test]
    fn order_statistics_give_p_one() {
        let n = 1000;
        let v: Vec<f64> = (1..=n).map(|k| k as f64 / (n + 1) as f64).collect();
        let r = global_test(&column(&v), &AlphaGrid::default(), &GlobalConfig::default()).unwrap();
        assert!(r.statistics[0] < 1e-5);
        assert_eq!(r.p_values[0], 1.0);
        assert_eq!(r.p_adjusted, r.p_values);
        assert_eq!(r.decision, Decision::Accept);
    }

    #[test]
    fn shifted_column_rejected_at_floor() {
        let mut rng = RngStream::new(5, 0);
        let v: Vec<f64> = (0..10_000).map(|_| (rng.uniform() + 0.1).min(1.0 - 1e-12)).collect();
        let g = AlphaGrid::default();
        let r = global_test(&column(&v), &g, &GlobalConfig::default()).unwrap();
        // the curve sits 0.1 below the diagonal for α ≥ 0.1
        let frac = g.values().iter().filter(|&&a| a >= 0.1).count() as f64 / g.len() as f64;
        assert!(r.statistics[0] >= 0.0025 * frac);
        assert_eq!(r.p_values[0], 1.0 / 1000.0);
        assert_eq!(r.decision, Decision::Reject);
        assert_eq!(r.rejected, vec![1]);
    }

    #[test]
    fn bonferroni_and_floor_configuration() {
        let p = pit(Matrix::from_elem((10, 4), 0.5));
        let g = AlphaGrid::equispaced(9).unwrap();
        let low_level = GlobalConfig {
            level: 0.02,
            replicates: 99,
            seed: 0,
        };
        assert!(matches!(global_test(&p, &g, &low_level), Err(Error::Config(_))));
        let few = GlobalConfig {
            replicates: 50,
            ..Default::default()
        };
        assert!(matches!(global_test(&p, &g, &few), Err(Error::Config(_))));
        let r = global_test(&p, &g, &GlobalConfig { replicates: 199, ..Default::default() }).unwrap();
        for (raw, adj) in r.p_values.iter().zip(&r.p_adjusted) {
            assert_eq!(*adj, (4.0 * raw).min(1.0));
        }
    }

    #[test]
    fn calibrated_curve_inside_band() {
        let g = AlphaGrid::default();
        let null = uniform_null_curves(2000, 999, &g, 3);
        let (lo, hi) = pointwise_band(&null, g.len(), 0.05);
        let inside = g
            .values()
            .iter()
            .enumerate()
            .filter(|&(k, a)| lo[k] <= *a && *a <= hi[k])
            .count();
        assert!(inside >= 93);
        assert!(lo.iter().zip(&hi).all(|(l, h)| l <= h));
    }

    #[test]
    fn ppplot_files() {
        let mut rng = RngStream::new(8, 0);
        let values = Matrix::from_shape_fn((500, 2), |_| rng.uniform());
        let r = global_test(&pit(values), &AlphaGrid::equispaced(10).unwrap(), &GlobalConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_ppplot(&r, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let first = fs::read_to_string(&paths[0]).unwrap();
        let lines: Vec<&str> = first.lines().collect();
        assert_eq!(lines[0], "alpha,r_hat,band_lo,band_hi");
        assert_eq!(lines.len(), 11);
        for line in &lines[1..] {
            let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert!(cols[2] <= cols[3]);
        }
        emit_ppplot(&r, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(&paths[0]).unwrap(), first);
    }

    #[test]
    fn report_is_deterministic() {
        let mut rng = RngStream::new(9, 0);
        let p = pit(Matrix::from_shape_fn((300, 3), |_| rng.uniform()));
        let g = AlphaGrid::equispaced(20).unwrap();
        let cfg = GlobalConfig { seed: 4, ..Default::default() };
        assert_eq!(global_test(&p, &g, &cfg).unwrap(), global_test(&p, &g, &cfg).unwrap());
    }

    fn held_out(theta: Matrix, x: Matrix) -> CalibrationDataset {
        CalibrationDataset::new(
            theta,
            x,
            DatasetMeta {
                task: "t".into(),
                seed: 0,
                held_out: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn sbc_rank_at_median_is_central() {
        let flow = ConditionalFlow::constant_affine(1, &[0.0], &[0.0]).unwrap();
        let data = held_out(Matrix::zeros((50, 1)), Matrix::zeros((50, 1)));
        let ranks = sbc_ranks(&flow, &data, 400, 1).unwrap();
        let mean = ranks.iter().map(|r| r[0] as f64).sum::<f64>() / 50.0;
        assert!((mean - 200.0).abs() < 10.0);
        assert!(ranks.iter().all(|r| (r[0] as f64 - 200.0).abs() < 60.0));
        assert!(sbc_ranks(&flow, &data, 10, 1).is_err());
    }

    #[test]
    fn sbc_accepts_true_posterior() {
        // θ ~ N(0,1) and the estimator is the standard normal regardless of x
        let flow = ConditionalFlow::constant_affine(1, &[0.0], &[0.0]).unwrap();
        let mut accepted = 0;
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, 7);
            let data = held_out(
                Matrix::from_shape_fn((2000, 1), |_| rng.normal()),
                Matrix::zeros((2000, 1)),
            );
            let ranks = sbc_ranks(&flow, &data, 100, seed).unwrap();
            let r = sbc_test(&ranks, 100, 0.05).unwrap();
            assert_eq!(r.histograms[0].iter().sum::<usize>(), 2000);
            accepted += (r.p_values[0] > 0.01) as usize;
        }
        assert!(accepted >= 18);
    }

    #[test]
    fn sbc_histogram_binning() {
        let ranks: Vec<Vec<usize>> = (0..=20).map(|r| vec![r]).cycle().take(21 * 40).collect();
        let r = sbc_test(&ranks, 20, 0.05).unwrap();
        assert_eq!(r.bins, 21);
        assert!(r.statistics[0].abs() < 1e-12);
        assert!((r.p_values[0] - 1.0).abs() < 1e-12);
        assert!(sbc_test(&[vec![21]], 20, 0.05).is_err());
    }

    proptest! {
        #[test]
        fn ecdf_monotone_and_bounded(values in proptest::collection::vec(1e-9f64..1.0, 1..200)) {
            let g = AlphaGrid::equispaced(25).unwrap();
            let curve = ecdf_on_grid(values.iter().copied(), &g);
            prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(curve.iter().all(|&c| (0.0..=1.0).contains(&c)));
            for (k, a) in g.values().iter().enumerate() {
                let direct = values.iter().filter(|&&v| v <= *a).count() as f64 / values.len() as f64;
                prop_assert_eq!(curve[k], direct);
            }
        }
    }
}
