//! Binary regressors estimating P(W = 1 | x) by minimizing cross-entropy.
//!
//! Two model families share one interface: penalized logistic regression
//! fitted by damped Newton iterations (convex, so the optimum is global) and
//! a one-hidden-layer tanh network fitted by full-batch Adam. Features are
//! standardized with statistics from the fitting data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, ensure_finite, Error, Result};
use crate::numerics::{init_dense, Adam, Matrix, RngStream, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub kind: RegressorKind,
    /// Hidden width, MLP only.
    pub hidden: usize,
    /// Adam step size, MLP only.
    pub learning_rate: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// L2 penalty on weights (never on intercepts).
    pub l2: f64,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            kind: RegressorKind::Logistic,
            hidden: 16,
            learning_rate: 0.02,
            max_iter: 500,
            tol: 1e-8,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.tol > 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::Config(
                "regressor needs max_iter > 0, tol > 0 and l2 >= 0".into(),
            ));
        }
        if self.kind == RegressorKind::Mlp && (self.hidden == 0 || !(self.learning_rate > 0.0)) {
            return Err(Error::Config("mlp regressor needs hidden > 0 and learning_rate > 0".into()));
        }
        Ok(())
    }
}

/// Per-feature centring and scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &Matrix) -> Self {
        let n = features.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(features.ncols());
        let mut scale = Vec::with_capacity(features.ncols());
        for col in features.columns() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            scale.push(if var > 1e-24 { var.sqrt() } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (v, (m, s))) in out.iter_mut().zip(x.iter().zip(self.mean.iter().zip(&self.scale))) {
            *o = (v - m) / s;
        }
    }

    pub fn transform(&self, features: &Matrix) -> Matrix {
        let mut out = features.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Constant(f64),
    Logistic { intercept: f64, weights: Vec<f64> },
    Mlp { w1: Matrix, b1: Matrix, w2: Vec<f64>, b2: f64 },
}

/// Fitted estimator of x ↦ P(W = 1 | x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryRegressor {
    pub standardizer: Standardizer,
    pub model: Model,
    /// Set when the targets were single-class and a constant was returned.
    pub degenerate: bool,
    pub iterations: usize,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

impl BinaryRegressor {
    pub fn constant(p: f64, d: usize) -> Self {
        Self {
            standardizer: Standardizer {
                mean: vec![0.0; d],
                scale: vec![1.0; d],
            },
            model: Model::Constant(p),
            degenerate: false,
            iterations: 0,
        }
    }

    /// Logistic model on unstandardized features.
    pub fn logistic(intercept: f64, weights: Vec<f64>) -> Self {
        let d = weights.len();
        Self {
            standardizer: Standardizer {
                mean: vec![0.0; d],
                scale: vec![1.0; d],
            },
            model: Model::Logistic { intercept, weights },
            degenerate: false,
            iterations: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    /// Prediction on a standardized feature vector.
    pub(crate) fn predict_standardized(&self, xs: &[f64]) -> f64 {
        match &self.model {
            Model::Constant(p) => *p,
            Model::Logistic { intercept, weights } => {
                sigmoid(intercept + weights.iter().zip(xs).map(|(w, v)| w * v).sum::<f64>())
            }
            Model::Mlp { w1, b1, w2, b2 } => {
                let mut eta = *b2;
                for (k, w2k) in w2.iter().enumerate() {
                    let mut a = b1[[0, k]];
                    for (j, v) in xs.iter().enumerate() {
                        a += v * w1[[j, k]];
                    }
                    eta += w2k * a.tanh();
                }
                sigmoid(eta)
            }
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(shape_err("regressor input", self.dim(), x.len()));
        }
        ensure_finite(x, "regressor input")?;
        let mut xs = vec![0.0; x.len()];
        self.standardizer.apply(x, &mut xs);
        Ok(self.predict_standardized(&xs))
    }
}

/// Fits a regressor. Uses stream 0 of `cfg.seed` for any randomness.
pub fn fit(features: &Matrix, targets: &[bool], cfg: &RegressorConfig) -> Result<BinaryRegressor> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("features contain non-finite values".into()));
    }
    let standardizer = Standardizer::fit(features);
    let xs = standardizer.transform(features);
    fit_standardized(&xs, &standardizer, targets, cfg, &mut RngStream::new(cfg.seed, 0))
}

/// Fits on features already transformed by `standardizer`.
pub(crate) fn fit_standardized(
    xs: &Matrix,
    standardizer: &Standardizer,
    targets: &[bool],
    cfg: &RegressorConfig,
    rng: &mut RngStream,
) -> Result<BinaryRegressor> {
    cfg.validate()?;
    let n = xs.nrows();
    if targets.len() != n {
        return Err(shape_err("targets", n, targets.len()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("regression needs at least two rows".into()));
    }
    let ones = targets.iter().filter(|&&t| t).count();
    if ones == 0 || ones == n {
        let guard = 1.0 / (n as f64 + 2.0);
        let p = (ones as f64 / n as f64).clamp(guard, 1.0 - guard);
        return Ok(BinaryRegressor {
            standardizer: standardizer.clone(),
            model: Model::Constant(p),
            degenerate: true,
            iterations: 0,
        });
    }
    let mean = ones as f64 / n as f64;
    let (model, iterations) = match cfg.kind {
        RegressorKind::Logistic => fit_logistic(xs, targets, mean, cfg)?,
        RegressorKind::Mlp => fit_mlp(xs, targets, mean, cfg, rng)?,
    };
    Ok(BinaryRegressor {
        standardizer: standardizer.clone(),
        model,
        degenerate: false,
        iterations,
    })
}

/// Objective, gradient and Hessian (row-major, p×p) of mean cross-entropy
/// plus (l2/2)|w|², in one pass over the rows.
fn logistic_pass(xs: &Matrix, y: &[bool], beta: &[f64], l2: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let p = beta.len();
    let inv_n = 1.0 / xs.nrows() as f64;
    let mut obj = 0.0;
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p * p];
    let mut xt = vec![1.0; p];
    for (row, &t) in xs.rows().into_iter().zip(y) {
        for (dst, v) in xt[1..].iter_mut().zip(row.iter()) {
            *dst = *v;
        }
        let eta: f64 = xt.iter().zip(beta).map(|(a, b)| a * b).sum();
        let prob = sigmoid(eta);
        let target = if t { 1.0 } else { 0.0 };
        obj += softplus(eta) - target * eta;
        let r = prob - target;
        let w = prob * (1.0 - prob);
        for a in 0..p {
            grad[a] += r * xt[a];
            let wa = w * xt[a];
            for b in a..p {
                hess[a * p + b] += wa * xt[b];
            }
        }
    }
    obj *= inv_n;
    for a in 0..p {
        grad[a] *= inv_n;
        for b in a..p {
            hess[a * p + b] *= inv_n;
            hess[b * p + a] = hess[a * p + b];
        }
    }
    for a in 1..p {
        obj += 0.5 * l2 * beta[a] * beta[a];
        grad[a] += l2 * beta[a];
        hess[a * p + a] += l2;
    }
    (obj, grad, hess)
}

fn newton_step(hess: &[f64], grad: &[f64]) -> Result<DVector<f64>> {
    let p = grad.len();
    let h = DMatrix::from_row_slice(p, p, hess);
    let g = DVector::from_column_slice(grad);
    if let Some(ch) = h.clone().cholesky() {
        return Ok(ch.solve(&g));
    }
    let jitter = DMatrix::<f64>::identity(p, p) * 1e-8;
    Ok((h + jitter)
        .cholesky()
        .ok_or_else(|| Error::Internal("logistic Hessian not positive definite".into()))?
        .solve(&g))
}

/// Damped Newton on mean cross-entropy + (l2/2)|w|².
fn fit_logistic(xs: &Matrix, y: &[bool], mean: f64, cfg: &RegressorConfig) -> Result<(Model, usize)> {
    let p = xs.ncols() + 1;
    let mut beta = vec![0.0; p];
    beta[0] = (mean / (1.0 - mean)).ln();
    let (mut obj, mut grad, mut hess) = logistic_pass(xs, y, &beta, cfg.l2);
    let mut iterations = 0;
    for it in 1..=cfg.max_iter {
        iterations = it;
        let step = newton_step(&hess, &grad)?;
        let decrement: f64 = grad.iter().zip(step.iter()).map(|(g, s)| g * s).sum();
        if decrement * 0.5 < cfg.tol {
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - t * s).collect();
            let (f, g, h) = logistic_pass(xs, y, &trial, cfg.l2);
            if f <= obj - 1e-4 * t * decrement {
                beta = trial;
                (obj, grad, hess) = (f, g, h);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Internal("logistic fit produced non-finite parameters".into()));
    }
    Ok((
        Model::Logistic {
            intercept: beta[0],
            weights: beta[1..].to_vec(),
        },
        iterations,
    ))
}

fn mlp_loss(
    tape: &mut Tape,
    params: &[Matrix; 4],
    x: &Matrix,
    y: &Matrix,
    l2: f64,
) -> (Var, [Var; 4]) {
    let vars = [
        tape.leaf(params[0].clone()),
        tape.leaf(params[1].clone()),
        tape.leaf(params[2].clone()),
        tape.leaf(params[3].clone()),
    ];
    let xv = tape.leaf(x.clone());
    let yv = tape.leaf(y.clone());
    let h = tape.matmul(xv, vars[0]);
    let h = tape.add_row(h, vars[1]);
    let h = tape.tanh(h);
    let eta = tape.matmul(h, vars[2]);
    let eta = tape.add_row(eta, vars[3]);
    let sp = tape.softplus(eta);
    let ye = tape.mul(yv, eta);
    let ce = tape.sub(sp, ye);
    let ce = tape.mean(ce);
    let s1 = tape.square(vars[0]);
    let s1 = tape.sum(s1);
    let s2 = tape.square(vars[2]);
    let s2 = tape.sum(s2);
    let pen = tape.add(s1, s2);
    let pen = tape.scale(pen, 0.5 * l2);
    (tape.add(ce, pen), vars)
}

/// Full-batch Adam. Stops when the loss improves by less than `tol`
/// (relative) over a window of 20 iterations.
fn fit_mlp(
    xs: &Matrix,
    y: &[bool],
    mean: f64,
    cfg: &RegressorConfig,
    rng: &mut RngStream,
) -> Result<(Model, usize)> {
    let d = xs.ncols();
    let h = cfg.hidden;
    let mut params = [
        init_dense(d, h, rng),
        Matrix::zeros((1, h)),
        init_dense(h, 1, rng) * 0.1,
        Matrix::from_elem((1, 1), (mean / (1.0 - mean)).ln()),
    ];
    let ym = Matrix::from_shape_fn((y.len(), 1), |(n, _)| if y[n] { 1.0 } else { 0.0 });
    let shapes: Vec<_> = params.iter().map(|p| p.dim()).collect();
    let mut opt = Adam::new(cfg.learning_rate, &shapes);
    let mut history = Vec::new();
    let mut iterations = 0;
    for it in 1..=cfg.max_iter {
        iterations = it;
        let mut tape = Tape::new();
        let (loss, vars) = mlp_loss(&mut tape, &params, xs, &ym, cfg.l2);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Internal(format!("mlp loss became {value} at iteration {it}")));
        }
        history.push(value);
        if it > 20 {
            let old = history[it - 21];
            if (old - value) < cfg.tol * old.abs().max(1e-12) {
                break;
            }
        }
        let grads = tape.grad(loss)?;
        let g: Vec<Matrix> = vars.iter().map(|&v| grads.wrt(v)).collect();
        let [a, b, c, e] = &mut params;
        opt.update(&mut [a, b, c, e], &g);
    }
    let [w1, b1, w2, b2] = params;
    Ok((
        Model::Mlp {
            w1,
            b1,
            w2: w2.column(0).to_vec(),
            b2: b2[[0, 0]],
        },
        iterations,
    ))
}
