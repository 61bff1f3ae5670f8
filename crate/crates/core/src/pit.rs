//! Multivariate probability integral transform.
//!
//! Coordinate `i` of the PIT is `Φ(z_i)` with `z = T⁻¹(θ; x)`. Coordinates
//! follow the base space of the composed transform, not the parameter
//! vector, so reports label them `pit_1..pit_m`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CalibrationDataset;
use crate::error::{shape_err, Error, Result};
use crate::estimator::ConditionalEstimator;
use crate::numerics::{normal_quantile, phi, Matrix};

/// PIT values are clipped to `[PIT_EPS, 1 - PIT_EPS]`.
pub const PIT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PitValues {
    pub values: Vec<f64>,
    /// Number of coordinates that had to be clipped.
    pub clipped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PitProvenance {
    pub estimator: String,
    pub dataset_fingerprint: String,
    pub task: String,
}

/// N×m matrix of PIT values in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PitMatrix {
    values: Matrix,
    clip_count: usize,
    provenance: PitProvenance,
}

impl PitMatrix {
    /// Wraps raw values; every entry must lie strictly inside (0, 1).
    pub fn from_values(values: Matrix, provenance: PitProvenance) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Domain(format!("PIT entry {v} outside (0, 1)")));
        }
        Ok(Self {
            values,
            clip_count: 0,
            provenance,
        })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn clip_count(&self) -> usize {
        self.clip_count
    }

    pub fn provenance(&self) -> &PitProvenance {
        &self.provenance
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.values.column(i).to_vec()
    }

    /// Columnar export: a provenance comment line, header `pit_1..pit_m`,
    /// one row per calibration pair.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(
            out,
            "# flowcheck-pit estimator={} dataset={} task={} clipped={}",
            self.provenance.estimator.replace(' ', "_"),
            self.provenance.dataset_fingerprint,
            self.provenance.task,
            self.clip_count
        )?;
        let header: Vec<String> = (1..=self.dim()).map(|i| format!("pit_{i}")).collect();
        writeln!(out, "{}", header.join(","))?;
        for row in self.values.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// PIT of a single pair.
pub fn compute_pit<E: ConditionalEstimator + ?Sized>(
    estimator: &E,
    theta: &[f64],
    x: &[f64],
) -> Result<PitValues> {
    let inv = estimator.inverse(theta, x)?;
    let mut clipped = 0;
    let mut values = Vec::with_capacity(inv.z.len());
    for (i, &z) in inv.z.iter().enumerate() {
        if z.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "inverse transform is NaN in coordinate {}",
                i + 1
            )));
        }
        let p = phi(z);
        let c = p.clamp(PIT_EPS, 1.0 - PIT_EPS);
        if c != p {
            clipped += 1;
        }
        values.push(c);
    }
    Ok(PitValues { values, clipped })
}

/// PIT of every calibration pair. Refuses data that is not flagged as held
/// out, or that matches the estimator's training fingerprint.
pub fn pit_matrix<E: ConditionalEstimator + ?Sized>(
    estimator: &E,
    data: &CalibrationDataset,
) -> Result<PitMatrix> {
    if data.theta_dim() != estimator.theta_dim() {
        return Err(shape_err("dataset theta dimension", estimator.theta_dim(), data.theta_dim()));
    }
    if data.obs_dim() != estimator.obs_dim() {
        return Err(shape_err("dataset x dimension", estimator.obs_dim(), data.obs_dim()));
    }
    if !data.meta.held_out {
        return Err(Error::Leakage(
            "calibration data is not flagged as held out from training; \
             diagnostics on training data are meaningless"
                .into(),
        ));
    }
    let fingerprint = data.fingerprint();
    if estimator.training_fingerprint().as_deref() == Some(fingerprint.as_str()) {
        return Err(Error::Leakage(
            "calibration data is identical to the estimator's training data".into(),
        ));
    }
    let rows: Vec<PitValues> = (0..data.len())
        .into_par_iter()
        .map(|n| {
            compute_pit(
                estimator,
                data.theta_row(n).as_slice().expect("row-major theta"),
                data.x_row(n).as_slice().expect("row-major x"),
            )
        })
        .collect::<Result<_>>()?;
    let m = estimator.theta_dim();
    let mut values = Matrix::zeros((data.len(), m));
    let mut clip_count = 0;
    for (n, row) in rows.into_iter().enumerate() {
        clip_count += row.clipped;
        for (i, v) in row.values.into_iter().enumerate() {
            values[[n, i]] = v;
        }
    }
    if clip_count > 0 {
        log::warn!("{clip_count} PIT values clipped to [{PIT_EPS}, 1 - {PIT_EPS}]");
    }
    Ok(PitMatrix {
        values,
        clip_count,
        provenance: PitProvenance {
            estimator: estimator.label(),
            dataset_fingerprint: fingerprint,
            task: data.meta.task.clone(),
        },
    })
}

/// Entry-wise normal quantile of a PIT matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalScores {
    pub values: Matrix,
    /// Entries that sat on the clipping boundary.
    pub at_boundary: usize,
}

pub fn normal_scores(p: &PitMatrix) -> Result<NormalScores> {
    let mut at_boundary = 0;
    let mut values = Matrix::zeros(p.values.dim());
    for (out, &u) in values.iter_mut().zip(p.values.iter()) {
        if u <= PIT_EPS || u >= 1.0 - PIT_EPS {
            at_boundary += 1;
        }
        *out = normal_quantile(u)?;
    }
    Ok(NormalScores {
        values,
        at_boundary,
    })
}
