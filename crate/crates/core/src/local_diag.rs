//! Local consistency checks: regress threshold indicators of the PIT on x,
//! then compare the fitted coverage curves with the diagonal at chosen
//! evaluation points.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CalibrationDataset;
use crate::error::{Error, Result};
use crate::global_diag::{grid_statistic, pointwise_band, write_curve_csv, AlphaGrid};
use crate::numerics::{Matrix, RngStream};
use crate::pit::PitMatrix;
use crate::regress::{fit_standardized, BinaryRegressor, RegressorConfig, Standardizer};
use crate::stats::{bonferroni, check_replicates, mc_p_value, Decision};

// Stream offsets within the bank seed; observed fits use streams from 0.
const NULL_UNIFORM_STREAMS: u64 = 1 << 40;
const NULL_FIT_STREAMS: u64 = 1 << 41;

/// Threshold indicators W[n] = I{P_i(θ_n, x_n) ≤ α_k} for every (i, k),
/// over the shared calibration features.
#[derive(Debug, Clone)]
pub struct IndicatorDatasets {
    grid: AlphaGrid,
    pit: Matrix,
    features: Matrix,
}

impl IndicatorDatasets {
    pub fn grid(&self) -> &AlphaGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.pit.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.pit.nrows() == 0
    }

    pub fn theta_dim(&self) -> usize {
        self.pit.ncols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self, i: usize, k: usize) -> Vec<bool> {
        let alpha = self.grid.values()[k];
        self.pit.column(i).iter().map(|&p| p <= alpha).collect()
    }

    /// Mean of each target vector, m × |G|.
    pub fn target_means(&self) -> Vec<Vec<f64>> {
        let n = self.len() as f64;
        (0..self.theta_dim())
            .map(|i| {
                (0..self.grid.len())
                    .map(|k| self.targets(i, k).iter().filter(|&&w| w).count() as f64 / n)
                    .collect()
            })
            .collect()
    }
}

pub fn build_indicator_datasets(
    p: &PitMatrix,
    data: &CalibrationDataset,
    grid: &AlphaGrid,
) -> Result<IndicatorDatasets> {
    if p.len() != data.len() || p.dim() != data.theta_dim() {
        return Err(Error::Shape(format!(
            "PIT matrix is {}×{} but the dataset has {} rows with {} parameters",
            p.len(),
            p.dim(),
            data.len(),
            data.theta_dim()
        )));
    }
    if p.provenance().dataset_fingerprint != data.fingerprint() {
        return Err(Error::Contract("PIT matrix was computed on a different dataset".into()));
    }
    if data.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("features contain non-finite values".into()));
    }
    Ok(IndicatorDatasets {
        grid: grid.clone(),
        pit: p.values().clone(),
        features: data.x.clone(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BankHealth {
    pub observed_fits: usize,
    pub observed_degenerate: usize,
    pub null_fits: usize,
    pub null_degenerate: usize,
}

/// Observed regressors (m × |G|) and null regressors (B × |G|). The null
/// targets I{U_n ≤ α} use one uniform draw per replicate shared by all
/// covariates, so a single null bank serves every covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorBank {
    grid: AlphaGrid,
    m: usize,
    d: usize,
    replicates: usize,
    seed: u64,
    config: RegressorConfig,
    standardizer: Standardizer,
    observed: Vec<Vec<BinaryRegressor>>,
    null: Vec<Vec<BinaryRegressor>>,
    health: BankHealth,
}

/// Fits the observed bank and `replicates` null replicates.
pub fn fit_bank(
    ds: &IndicatorDatasets,
    cfg: &RegressorConfig,
    replicates: usize,
    seed: u64,
) -> Result<RegressorBank> {
    cfg.validate()?;
    if replicates > 0 && replicates < 99 {
        return Err(Error::Config(format!(
            "p-values need at least 99 null replicates, got {replicates} (use 0 for statistics only)"
        )));
    }
    let g = ds.grid.len();
    let m = ds.theta_dim();
    let standardizer = Standardizer::fit(&ds.features);
    let xs = standardizer.transform(&ds.features);

    let observed_flat: Vec<BinaryRegressor> = (0..m * g)
        .into_par_iter()
        .map(|job| {
            let (i, k) = (job / g, job % g);
            let mut rng = RngStream::new(seed, job as u64);
            fit_standardized(&xs, &standardizer, &ds.targets(i, k), cfg, &mut rng)
        })
        .collect::<Result<_>>()?;
    let observed: Vec<Vec<BinaryRegressor>> = observed_flat.chunks(g).map(|c| c.to_vec()).collect();

    let n = ds.len();
    let null: Vec<Vec<BinaryRegressor>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut urng = RngStream::new(seed, NULL_UNIFORM_STREAMS + b as u64);
            let u: Vec<f64> = (0..n).map(|_| urng.uniform()).collect();
            ds.grid
                .values()
                .iter()
                .enumerate()
                .map(|(k, &alpha)| {
                    let targets: Vec<bool> = u.iter().map(|&v| v <= alpha).collect();
                    let mut rng = RngStream::new(seed, NULL_FIT_STREAMS + (b * g + k) as u64);
                    fit_standardized(&xs, &standardizer, &targets, cfg, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let count = |bank: &Vec<Vec<BinaryRegressor>>| bank.iter().flatten().filter(|r| r.degenerate).count();
    let health = BankHealth {
        observed_fits: m * g,
        observed_degenerate: count(&observed),
        null_fits: replicates * g,
        null_degenerate: count(&null),
    };
    if health.observed_degenerate + health.null_degenerate > 0 {
        log::warn!(
            "{} observed and {} null regressors saw single-class targets",
            health.observed_degenerate,
            health.null_degenerate
        );
    }
    Ok(RegressorBank {
        grid: ds.grid.clone(),
        m,
        d: ds.features.ncols(),
        replicates,
        seed,
        config: cfg.clone(),
        standardizer,
        observed,
        null,
        health,
    })
}

impl RegressorBank {
    /// Assembles a bank from already fitted regressors, which must all share
    /// one input dimension.
    pub fn from_parts(
        grid: AlphaGrid,
        observed: Vec<Vec<BinaryRegressor>>,
        null: Vec<Vec<BinaryRegressor>>,
    ) -> Result<Self> {
        let g = grid.len();
        let d = observed
            .first()
            .and_then(|row| row.first())
            .map(|r| r.dim())
            .ok_or_else(|| Error::InvalidArgument("observed bank is empty".into()))?;
        for row in observed.iter().chain(&null) {
            if row.len() != g {
                return Err(Error::Shape(format!("bank row has {} regressors, grid has {g}", row.len())));
            }
            if row.iter().any(|r| r.dim() != d) {
                return Err(Error::Shape("bank regressors disagree on input dimension".into()));
            }
        }
        let count = |bank: &Vec<Vec<BinaryRegressor>>| bank.iter().flatten().filter(|r| r.degenerate).count();
        let health = BankHealth {
            observed_fits: observed.len() * g,
            observed_degenerate: count(&observed),
            null_fits: null.len() * g,
            null_degenerate: count(&null),
        };
        Ok(Self {
            grid,
            m: observed.len(),
            d,
            replicates: null.len(),
            seed: 0,
            config: RegressorConfig::default(),
            standardizer: Standardizer {
                mean: vec![0.0; d],
                scale: vec![1.0; d],
            },
            observed,
            null,
            health,
        })
    }

    pub fn grid(&self) -> &AlphaGrid {
        &self.grid
    }

    pub fn theta_dim(&self) -> usize {
        self.m
    }

    pub fn obs_dim(&self) -> usize {
        self.d
    }

    pub fn replicates(&self) -> usize {
        self.replicates
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &RegressorConfig {
        &self.config
    }

    pub fn health(&self) -> &BankHealth {
        &self.health
    }

    pub fn observed(&self, i: usize, k: usize) -> &BinaryRegressor {
        &self.observed[i][k]
    }

    fn prepare(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::Contract(format!(
                "evaluation point has dimension {}, expected d = {}",
                x.len(),
                self.d
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("evaluation point is not finite".into()));
        }
        let mut xs = vec![0.0; self.d];
        self.standardizer.apply(x, &mut xs);
        Ok(xs)
    }

    fn curves_of(bank: &[Vec<BinaryRegressor>], xs: &[f64]) -> Vec<Vec<f64>> {
        bank.iter()
            .map(|row| row.iter().map(|r| r.predict_standardized(xs)).collect())
            .collect()
    }

    /// Fitted coverage curves r̂_{i,α}(x), m × |G|.
    pub fn local_curves(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(Self::curves_of(&self.observed, &self.prepare(x)?))
    }

    /// Null-replicate curves at x, B × |G|.
    pub fn null_curves(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(Self::curves_of(&self.null, &self.prepare(x)?))
    }
}

/// T_i(x) = mean over the grid of (r̂_{i,α}(x) − α)².
pub fn local_statistic(bank: &RegressorBank, x: &[f64]) -> Result<Vec<f64>> {
    Ok(bank
        .local_curves(x)?
        .iter()
        .map(|c| grid_statistic(c, &bank.grid))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    pub x: Vec<f64>,
    pub level: f64,
    pub replicates: usize,
    pub grid: Vec<f64>,
    /// Fitted curves, m × |G|.
    pub curves: Vec<Vec<f64>>,
    pub statistics: Vec<f64>,
    /// Absent when the bank has no null replicates.
    pub p_values: Option<Vec<f64>>,
    pub p_adjusted: Option<Vec<f64>>,
    pub band_lo: Option<Vec<f64>>,
    pub band_hi: Option<Vec<f64>>,
    pub rejected: Vec<usize>,
    pub decision: Option<Decision>,
}

/// Local test at x with Monte-Carlo p-values from the null bank and
/// Bonferroni correction over the m covariates.
pub fn local_test(bank: &RegressorBank, x: &[f64], level: f64) -> Result<LocalReport> {
    if bank.replicates > 0 {
        check_replicates(bank.replicates, level, bank.m)?;
    } else if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("level must lie in (0, 1), got {level}")));
    }
    let xs = bank.prepare(x)?;
    let curves = RegressorBank::curves_of(&bank.observed, &xs);
    let statistics: Vec<f64> = curves.iter().map(|c| grid_statistic(c, &bank.grid)).collect();
    let mut report = LocalReport {
        x: x.to_vec(),
        level,
        replicates: bank.replicates,
        grid: bank.grid.values().to_vec(),
        curves,
        statistics,
        p_values: None,
        p_adjusted: None,
        band_lo: None,
        band_hi: None,
        rejected: Vec::new(),
        decision: None,
    };
    if bank.replicates == 0 {
        return Ok(report);
    }
    let null = RegressorBank::curves_of(&bank.null, &xs);
    let null_stats: Vec<f64> = null.iter().map(|c| grid_statistic(c, &bank.grid)).collect();
    let p: Vec<f64> = report.statistics.iter().map(|&t| mc_p_value(t, &null_stats)).collect();
    let adj: Vec<f64> = p.iter().map(|&v| bonferroni(v, bank.m)).collect();
    let (lo, hi) = pointwise_band(&null, bank.grid.len(), level / bank.m as f64);
    report.rejected = adj
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < level)
        .map(|(i, _)| i + 1)
        .collect();
    report.decision = Some(Decision::from_adjusted(&adj, level));
    report.p_values = Some(p);
    report.p_adjusted = Some(adj);
    report.band_lo = Some(lo);
    report.band_hi = Some(hi);
    Ok(report)
}

/// Local tests along a path of evaluation points (rows of `path`).
pub fn sweep(bank: &RegressorBank, path: &Matrix, level: f64) -> Result<Vec<LocalReport>> {
    path.rows()
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|row| local_test(bank, &row.to_vec(), level))
        .collect()
}

/// Writes one row per path point: the coordinates, then T_1..T_m,
/// p_1..p_m and padj_1..padj_m (empty cells without null replicates).
pub fn write_sweep_csv(
    path: impl AsRef<Path>,
    coord_names: &[String],
    coords: &Matrix,
    reports: &[LocalReport],
) -> Result<()> {
    if coords.nrows() != reports.len() || coords.ncols() != coord_names.len() {
        return Err(Error::Shape("sweep coordinates do not match the reports".into()));
    }
    let m = reports.first().map(|r| r.statistics.len()).unwrap_or(0);
    let mut header: Vec<String> = coord_names.to_vec();
    for prefix in ["T", "p", "padj"] {
        header.extend((1..=m).map(|i| format!("{prefix}_{i}")));
    }
    let mut text = header.join(",");
    text.push('\n');
    for (row, r) in coords.rows().into_iter().zip(reports) {
        let mut cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        cells.extend(r.statistics.iter().map(|v| v.to_string()));
        for opt in [&r.p_values, &r.p_adjusted] {
            match opt {
                Some(v) => cells.extend(v.iter().map(|p| p.to_string())),
                None => cells.extend(std::iter::repeat(String::new()).take(m)),
            }
        }
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes `{prefix}_pit_{i}.csv` per covariate with columns
/// alpha,r_hat[,band_lo,band_hi].
pub fn emit_local_ppplot(report: &LocalReport, dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let band = report.band_lo.as_ref().zip(report.band_hi.as_ref());
    report
        .curves
        .iter()
        .enumerate()
        .map(|(i, curve)| {
            let path = dir.join(format!("{prefix}_pit_{}.csv", i + 1));
            write_curve_csv(&path, &report.grid, curve, band)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;
    use crate::pit::PitProvenance;

    fn dataset(pit_values: Matrix, x: Matrix) -> (PitMatrix, CalibrationDataset) {
        let data = CalibrationDataset::new(
            Matrix::zeros(pit_values.dim()),
            x,
            DatasetMeta {
                task: "t".into(),
                seed: 0,
                held_out: true,
            },
        )
        .unwrap();
        let p = PitMatrix::from_values(
            pit_values,
            PitProvenance {
                estimator: "e".into(),
                dataset_fingerprint: data.fingerprint(),
                task: "t".into(),
            },
        )
        .unwrap();
        (p, data)
    }

    fn constant_bank(grid: &AlphaGrid, observed: &[Vec<f64>], null: &[Vec<f64>]) -> RegressorBank {
        let wrap = |rows: &[Vec<f64>]| {
            rows.iter()
                .map(|r| r.iter().map(|&v| BinaryRegressor::constant(v, 1)).collect())
                .collect()
        };
        RegressorBank::from_parts(grid.clone(), wrap(observed), wrap(null)).unwrap()
    }

    #[test]
    fn indicator_thresholds() {
        let (p, data) = dataset(
            Matrix::from_shape_vec((4, 1), vec![0.1, 0.2, 0.6, 0.9]).unwrap(),
            Matrix::zeros((4, 1)),
        );
        let grid = AlphaGrid::equispaced(3).unwrap();
        let ds = build_indicator_datasets(&p, &data, &grid).unwrap();
        assert_eq!(ds.target_means(), vec![vec![0.5, 0.5, 0.75]]);

        let (p, data) = dataset(Matrix::from_elem((1, 1), 0.3), Matrix::zeros((1, 1)));
        let grid = AlphaGrid::new(vec![0.25, 0.5]).unwrap();
        let ds = build_indicator_datasets(&p, &data, &grid).unwrap();
        assert_eq!(ds.targets(0, 0), vec![false]);
        assert_eq!(ds.targets(0, 1), vec![true]);
    }

    #[test]
    fn indicator_means_match_global_ecdf() {
        let mut rng = RngStream::new(2, 0);
        let (p, data) = dataset(
            Matrix::from_shape_fn((300, 2), |_| rng.uniform()),
            Matrix::from_shape_fn((300, 1), |_| rng.normal()),
        );
        let grid = AlphaGrid::equispaced(15).unwrap();
        let ds = build_indicator_datasets(&p, &data, &grid).unwrap();
        let global = crate::global_diag::global_ecdf(&p, &grid).unwrap();
        assert_eq!(ds.target_means(), global);
        for i in 0..2 {
            for k in 1..15 {
                let (a, b) = (ds.targets(i, k - 1), ds.targets(i, k));
                assert!(a.iter().zip(&b).all(|(x, y)| !x | y));
            }
        }
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let (p, _) = dataset(Matrix::from_elem((3, 1), 0.5), Matrix::zeros((3, 1)));
        let (_, other) = dataset(Matrix::from_elem((3, 1), 0.5), Matrix::from_elem((3, 1), 1.0));
        let grid = AlphaGrid::equispaced(3).unwrap();
        assert!(matches!(build_indicator_datasets(&p, &other, &grid), Err(Error::Contract(_))));
        let (_, short) = dataset(Matrix::from_elem((2, 1), 0.5), Matrix::zeros((2, 1)));
        assert!(matches!(build_indicator_datasets(&p, &short, &grid), Err(Error::Shape(_))));
    }

    #[test]
    fn statistic_arithmetic() {
        let grid = AlphaGrid::equispaced(3).unwrap();
        let perfect = constant_bank(&grid, &[vec![0.25, 0.5, 0.75]], &[]);
        assert_eq!(local_statistic(&perfect, &[1.0]).unwrap(), vec![0.0]);
        let offset = constant_bank(&grid, &[vec![0.35, 0.6, 0.85]], &[]);
        assert!((local_statistic(&offset, &[1.0]).unwrap()[0] - 0.01).abs() < 1e-15);
        let mixed = constant_bank(&grid, &[vec![0.30, 0.45, 0.80]], &[]);
        assert!((local_statistic(&mixed, &[0.0]).unwrap()[0] - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn p_value_edges_and_missing_null() {
        let grid = AlphaGrid::equispaced(3).unwrap();
        let diag = vec![0.25, 0.5, 0.75];
        let noisy: Vec<Vec<f64>> = (0..99).map(|b| diag.iter().map(|a| a + 0.001 * (b % 7) as f64).collect()).collect();
        let zero = constant_bank(&grid, &[diag.clone()], &noisy);
        let r = local_test(&zero, &[0.0], 0.05).unwrap();
        assert_eq!(r.p_values.unwrap(), vec![1.0]);
        assert_eq!(r.decision, Some(Decision::Accept));

        let far = constant_bank(&grid, &[vec![0.9, 0.9, 0.9]], &noisy);
        let r = local_test(&far, &[0.0], 0.05).unwrap();
        assert_eq!(r.p_values.unwrap(), vec![0.01]);
        assert_eq!(r.rejected, vec![1]);
        let (lo, hi) = (r.band_lo.unwrap(), r.band_hi.unwrap());
        assert!(lo.iter().zip(&hi).all(|(l, h)| l <= h));

        let none = constant_bank(&grid, &[diag.clone()], &[]);
        let r = local_test(&none, &[0.0], 0.05).unwrap();
        assert!(r.p_values.is_none() && r.band_lo.is_none() && r.decision.is_none());

        let two = constant_bank(&grid, &[diag.clone(), diag.clone()], &noisy);
        assert!(matches!(local_test(&two, &[0.0], 0.01), Err(Error::Config(_))));
        let err = local_test(&two, &[0.0, 1.0], 0.05).unwrap_err();
        assert!(err.to_string().contains("expected d = 1"));
    }

    #[test]
    fn x_independent_targets_fit_constant_alpha() {
        let n = 10_000;
        let mut rng = RngStream::new(3, 0);
        let (p, data) = dataset(
            Matrix::from_shape_fn((n, 1), |_| rng.uniform()),
            Matrix::from_shape_fn((n, 2), |_| rng.normal()),
        );
        let grid = AlphaGrid::equispaced(4).unwrap();
        let ds = build_indicator_datasets(&p, &data, &grid).unwrap();
        let bank = fit_bank(&ds, &RegressorConfig::default(), 0, 1).unwrap();
        assert_eq!(bank.health().observed_fits, 4);
        for row in data.x.rows().into_iter().step_by(37) {
            let v = row.to_vec();
            if v.iter().map(|t| t * t).sum::<f64>() > 4.0 {
                continue;
            }
            for (r, a) in bank.local_curves(&v).unwrap()[0].iter().zip(grid.values()) {
                assert!((r - a).abs() < 0.02, "{r} vs {a}");
            }
        }
    }

    #[test]
    fn bank_is_deterministic_and_validates_replicates() {
        let mut rng = RngStream::new(4, 0);
        let (p, data) = dataset(
            Matrix::from_shape_fn((200, 2), |_| rng.uniform()),
            Matrix::from_shape_fn((200, 1), |_| rng.normal()),
        );
        let grid = AlphaGrid::equispaced(3).unwrap();
        let ds = build_indicator_datasets(&p, &data, &grid).unwrap();
        let cfg = RegressorConfig::default();
        assert!(matches!(fit_bank(&ds, &cfg, 50, 0), Err(Error::Config(_))));
        let a = fit_bank(&ds, &cfg, 99, 7).unwrap();
        let b = fit_bank(&ds, &cfg, 99, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.health().null_fits, 99 * 3);
        let c = fit_bank(&ds, &cfg, 99, 8).unwrap();
        assert_ne!(a.null_curves(&[0.5]).unwrap(), c.null_curves(&[0.5]).unwrap());
    }

    #[test]
    fn sweep_and_files() {
        let mut rng = RngStream::new(5, 0);
        let (p, data) = dataset(
            Matrix::from_shape_fn((300, 2), |_| rng.uniform()),
            Matrix::from_shape_fn((300, 1), |_| rng.normal()),
        );
        let grid = AlphaGrid::equispaced(5).unwrap();
        let bank = fit_bank(&build_indicator_datasets(&p, &data, &grid).unwrap(), &RegressorConfig::default(), 99, 2).unwrap();
        let path = Matrix::from_shape_vec((3, 1), vec![0.5, 0.5, 0.5]).unwrap();
        let reports = sweep(&bank, &path, 0.05).unwrap();
        assert_eq!(reports[0], reports[1]);
        assert_eq!(reports[0], local_test(&bank, &[0.5], 0.05).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("sweep.csv");
        write_sweep_csv(&file, &["x_1".to_string()], &path, &reports).unwrap();
        let text = std::fs::read_to_string(&file).unwrap();
        assert_eq!(text.lines().next().unwrap(), "x_1,T_1,T_2,p_1,p_2,padj_1,padj_2");
        assert_eq!(text.lines().count(), 4);
        let files = emit_local_ppplot(&reports[0], dir.path(), "point_1").unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(std::fs::read_to_string(&files[0]).unwrap().lines().count(), 6);
    }
}
