use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};
use crate::flow::{ConditionalFlow, LOG_SCALE_BOUND};
use crate::numerics::{Matrix, RngStream};

use super::Simulator;

/// θ ~ N(0, I_m), x = A θ + σ ε with ε ~ N(0, I_d). The posterior is
/// N(Σ Aᵀ x / σ², Σ) with Σ = (I + AᵀA/σ²)⁻¹.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLinearTask {
    a: Matrix,
    sigma: f64,
    post_cov: Matrix,
    post_chol: Matrix,
    /// Σ Aᵀ / σ², so the posterior mean is `gain · x`.
    gain: Matrix,
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[[r, c]])
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_shape_fn((m.nrows(), m.ncols()), |(r, c)| m[(r, c)])
}

impl GaussianLinearTask {
    /// `a` has shape (d, m).
    pub fn new(a: Matrix, sigma: f64) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::InvalidArgument("design matrix is empty".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("design and noise scale must be finite with sigma > 0".into()));
        }
        let m = a.ncols();
        let an = to_na(&a);
        let precision = DMatrix::<f64>::identity(m, m) + an.transpose() * &an / (sigma * sigma);
        let cov = precision
            .try_inverse()
            .ok_or_else(|| Error::Internal("posterior precision is singular".into()))?;
        let cov = (&cov + cov.transpose()) * 0.5;
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Internal("posterior covariance is not positive definite".into()))?
            .l();
        let gain = &cov * an.transpose() / (sigma * sigma);
        Ok(Self {
            a,
            sigma,
            post_cov: from_na(&cov),
            post_chol: from_na(&chol),
            gain: from_na(&gain),
        })
    }

    /// A = I_m, σ = 1.
    pub fn identity(m: usize) -> Self {
        Self::new(Matrix::eye(m), 1.0).expect("identity design is valid")
    }

    /// Fixed 3×2 design giving a correlated posterior.
    pub fn default_design() -> Matrix {
        ndarray::array![[1.0, 0.6], [0.0, 1.0], [0.8, -0.4]]
    }

    pub fn design(&self) -> &Matrix {
        &self.a
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn posterior_cov(&self) -> &Matrix {
        &self.post_cov
    }

    pub fn posterior_chol(&self) -> &Matrix {
        &self.post_chol
    }

    pub fn posterior_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.a.nrows() {
            return Err(shape_err("observation", self.a.nrows(), x.len()));
        }
        Ok(self.gain.dot(&ndarray::ArrayView1::from(x)).to_vec())
    }

    /// Analytic log p(θ | x).
    pub fn log_posterior(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let m = self.a.ncols();
        if theta.len() != m {
            return Err(shape_err("parameter vector", m, theta.len()));
        }
        let mean = self.posterior_mean(x)?;
        // Solve L w = θ − μ by forward substitution.
        let l = &self.post_chol;
        let mut w = vec![0.0; m];
        for i in 0..m {
            let mut v = theta[i] - mean[i];
            for j in 0..i {
                v -= l[[i, j]] * w[j];
            }
            w[i] = v / l[[i, i]];
        }
        let log_det: f64 = (0..m).map(|i| l[[i, i]].ln()).sum();
        Ok(-0.5 * w.iter().map(|v| v * v).sum::<f64>() - log_det - 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

impl Simulator for GaussianLinearTask {
    fn name(&self) -> &str {
        "gaussian-linear"
    }

    fn theta_dim(&self) -> usize {
        self.a.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    fn draw(&self, rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
        let theta = rng.normals(self.a.ncols());
        let x = self
            .a
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&theta).map(|(a, t)| a * t).sum::<f64>() + self.sigma * rng.normal())
            .collect();
        (theta, x)
    }
}

/// Single-layer flow equal to the task posterior: θ = μ(x) + L z. Coordinate
/// i is shifted by μ_i + L_{i,<i} L_{<i,<i}⁻¹ (θ_{<i} − μ_{<i}), which is
/// linear in (θ_{<i}, x) and so lives entirely in the conditioner bypass.
pub fn oracle_flow(task: &GaussianLinearTask) -> Result<ConditionalFlow> {
    let m = task.theta_dim();
    let d = task.obs_dim();
    let l = &task.post_chol;
    let log_diag: Vec<f64> = (0..m).map(|i| l[[i, i]].ln()).collect();
    if log_diag.iter().any(|s| s.abs() > LOG_SCALE_BOUND) {
        return Err(Error::Internal("posterior scale outside the flow's log-scale range".into()));
    }
    let mut flow = ConditionalFlow::constant_affine(d, &vec![0.0; m], &log_diag)?;
    let ln = to_na(l);
    for i in 0..m {
        // c = L_{i,<i} L_{<i,<i}⁻¹
        let c: Vec<f64> = if i == 0 {
            Vec::new()
        } else {
            let block = ln.view((0, 0), (i, i)).into_owned();
            let row = ln.view((i, 0), (1, i)).transpose();
            let sol = block
                .transpose()
                .solve_upper_triangular(&row)
                .ok_or_else(|| Error::Internal("singular Cholesky block".into()))?;
            sol.iter().copied().collect()
        };
        let skip = &mut flow.layers[0].conditioners[i].skip;
        for (j, cj) in c.iter().enumerate() {
            skip[[j, 0]] = *cj;
        }
        for k in 0..d {
            let mut w = task.gain[[i, k]];
            for (j, cj) in c.iter().enumerate() {
                w -= cj * task.gain[[j, k]];
            }
            skip[[i + k, 0]] = w;
        }
    }
    flow.check_structure()?;
    Ok(flow)
}
