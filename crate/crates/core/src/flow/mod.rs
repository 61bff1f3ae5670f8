//! Conditional normalizing flow built from affine autoregressive layers.
//!
//! The inverse direction θ → z is the fast one: every coordinate of a layer
//! is computed from the layer input in a single pass. The forward direction
//! z → θ is sequential per coordinate. Consecutive layers alternate between
//! the identity and the reversed coordinate order.

mod io;
mod train;

pub use io::{load_flow, save_flow, FLOW_FORMAT_TAG};
pub use train::{train_flow, FlowTrainConfig, TrainingRecord};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::estimator::{ConditionalEstimator, Inverse};
use crate::numerics::{init_dense, Matrix, RngStream, Tape, Var};

/// Log-scales are clamped to this range before exponentiation.
pub const LOG_SCALE_BOUND: f64 = 7.0;

/// Dense layer `y = x W + b` with `W` of shape (in, out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros((input, output)),
            bias: Matrix::zeros((1, output)),
        }
    }

    fn random(input: usize, output: usize, rng: &mut RngStream) -> Self {
        Self {
            weight: init_dense(input, output, rng),
            bias: Matrix::zeros((1, output)),
        }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.row(0).iter().copied());
        for (k, &v) in input.iter().enumerate() {
            if v != 0.0 {
                for (o, w) in out.iter_mut().zip(self.weight.row(k)) {
                    *o += v * w;
                }
            }
        }
    }
}

/// Network producing (shift, log-scale) for one coordinate from the
/// preceding coordinates and the context vector:
/// `out = head(tanh(hidden(h))) + h · skip`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioner {
    pub hidden: Dense,
    pub head: Dense,
    /// Linear bypass of shape (input, 2).
    pub skip: Matrix,
}

impl Conditioner {
    fn new(input: usize, width: usize, rng: &mut RngStream) -> Self {
        Self {
            hidden: Dense::random(input, width, rng),
            head: Dense::zeros(width, 2),
            skip: Matrix::zeros((input, 2)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.skip.nrows()
    }

    /// Returns (shift, clamped log-scale).
    fn eval(&self, input: &[f64], scratch: &mut Vec<f64>) -> (f64, f64) {
        self.hidden.apply(input, scratch);
        for v in scratch.iter_mut() {
            *v = v.tanh();
        }
        let mut shift = self.head.bias[[0, 0]];
        let mut log_scale = self.head.bias[[0, 1]];
        for (k, &h) in scratch.iter().enumerate() {
            shift += h * self.head.weight[[k, 0]];
            log_scale += h * self.head.weight[[k, 1]];
        }
        for (k, &v) in input.iter().enumerate() {
            shift += v * self.skip[[k, 0]];
            log_scale += v * self.skip[[k, 1]];
        }
        (shift, log_scale.clamp(-LOG_SCALE_BOUND, LOG_SCALE_BOUND))
    }
}

/// One affine autoregressive layer. In the inverse direction coordinate
/// `order[p]` becomes `(u - shift) * exp(-log_scale)`, where the conditioner
/// reads `u[order[..p]]` and the context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineAutoregressiveLayer {
    pub order: Vec<usize>,
    pub conditioners: Vec<Conditioner>,
}

/// Embeds the observation: standardization followed by
/// `[x_std, tanh(x_std W + b)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextNet {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub hidden: Dense,
}

impl ContextNet {
    fn new(d: usize, width: usize, rng: &mut RngStream) -> Self {
        Self {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
            hidden: Dense::random(d, width, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len() + self.hidden.bias.ncols()
    }

    pub(crate) fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn embed(&self, x: &[f64]) -> Vec<f64> {
        let xs = self.standardize(x);
        let mut h = Vec::new();
        self.hidden.apply(&xs, &mut h);
        let mut out = xs;
        out.extend(h.into_iter().map(f64::tanh));
        out
    }
}

/// Architecture of a flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowArch {
    pub layers: usize,
    pub hidden: usize,
    pub context_width: usize,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 16,
            context_width: 8,
        }
    }
}

/// The conditional flow q(θ | x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalFlow {
    m: usize,
    d: usize,
    pub(crate) context: ContextNet,
    pub(crate) layers: Vec<AffineAutoregressiveLayer>,
    pub(crate) training: Option<TrainingRecord>,
}

fn layer_order(m: usize, index: usize) -> Vec<usize> {
    if index % 2 == 0 {
        (0..m).collect()
    } else {
        (0..m).rev().collect()
    }
}

impl ConditionalFlow {
    /// Freshly initialized flow. Conditioner heads and bypasses start at zero,
    /// so the map is the identity and the density is N(0, I_m) for every x.
    pub fn new(m: usize, d: usize, arch: FlowArch, rng: &mut RngStream) -> Result<Self> {
        if m == 0 || arch.layers == 0 {
            return Err(Error::InvalidArgument(
                "flow needs m >= 1 and at least one layer".into(),
            ));
        }
        let context = ContextNet::new(d, arch.context_width, rng);
        let ctx = context.dim();
        let layers = (0..arch.layers)
            .map(|k| AffineAutoregressiveLayer {
                order: layer_order(m, k),
                conditioners: (0..m)
                    .map(|p| Conditioner::new(p + ctx, arch.hidden, rng))
                    .collect(),
            })
            .collect();
        let flow = Self {
            m,
            d,
            context,
            layers,
            training: None,
        };
        flow.check_structure()?;
        Ok(flow)
    }

    /// Flow whose heads are perturbed with N(0, head_scale²) weights so that
    /// it is far from the identity. Used for property tests.
    pub fn random(
        m: usize,
        d: usize,
        arch: FlowArch,
        head_scale: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut flow = Self::new(m, d, arch, rng)?;
        for layer in &mut flow.layers {
            for c in &mut layer.conditioners {
                c.head.weight.mapv_inplace(|_| head_scale * rng.normal());
                c.head.bias.mapv_inplace(|_| head_scale * rng.normal());
                c.skip.mapv_inplace(|_| head_scale * rng.normal());
            }
        }
        Ok(flow)
    }

    /// Single layer with constant per-coordinate shift and log-scale, no
    /// dependence on x: θ_i = shift_i + exp(log_scale_i) z_i.
    pub fn constant_affine(d: usize, shift: &[f64], log_scale: &[f64]) -> Result<Self> {
        if shift.len() != log_scale.len() {
            return Err(Error::Shape("shift and log-scale lengths differ".into()));
        }
        let arch = FlowArch {
            layers: 1,
            hidden: 0,
            context_width: 0,
        };
        let mut flow = Self::new(shift.len(), d, arch, &mut RngStream::new(0, 0))?;
        for (c, (&mu, &s)) in flow.layers[0]
            .conditioners
            .iter_mut()
            .zip(shift.iter().zip(log_scale))
        {
            c.head.bias[[0, 0]] = mu;
            c.head.bias[[0, 1]] = s;
        }
        Ok(flow)
    }

    /// Builds a flow from explicit parts. Used by analytic constructions.
    pub fn from_parts(
        m: usize,
        d: usize,
        context: ContextNet,
        layers: Vec<AffineAutoregressiveLayer>,
    ) -> Result<Self> {
        let flow = Self {
            m,
            d,
            context,
            layers,
            training: None,
        };
        flow.check_structure()?;
        Ok(flow)
    }

    pub(crate) fn check_structure(&self) -> Result<()> {
        if self.context.mean.len() != self.d || self.context.scale.len() != self.d {
            return Err(Error::Format("context standardization has wrong length".into()));
        }
        if self.context.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Format("context scales must be positive".into()));
        }
        let ctx = self.context.dim();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut sorted = layer.order.clone();
            sorted.sort_unstable();
            if sorted != (0..self.m).collect::<Vec<_>>() {
                return Err(Error::Format(format!("layer {k}: order is not a permutation")));
            }
            if layer.conditioners.len() != self.m {
                return Err(Error::Format(format!("layer {k}: expected {} conditioners", self.m)));
            }
            for (p, c) in layer.conditioners.iter().enumerate() {
                let input = p + ctx;
                let width = c.hidden.weight.ncols();
                let ok = c.hidden.weight.nrows() == input
                    && c.hidden.bias.dim() == (1, width)
                    && c.head.weight.dim() == (width, 2)
                    && c.head.bias.dim() == (1, 2)
                    && c.skip.dim() == (input, 2);
                if !ok {
                    return Err(Error::Format(format!(
                        "layer {k}, position {p}: conditioner shapes inconsistent with input {input}"
                    )));
                }
            }
        }
        // Every coordinate must be conditioned on others somewhere once the
        // stack is deep enough for the alternating orders to cover it.
        if self.m > 1 && self.layers.len() >= 2 {
            let mut touched = vec![false; self.m];
            for layer in &self.layers {
                for &c in &layer.order[1..] {
                    touched[c] = true;
                }
            }
            if let Some(c) = touched.iter().position(|t| !t) {
                return Err(Error::Format(format!(
                    "coordinate {c} is never conditioned on other coordinates"
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[AffineAutoregressiveLayer] {
        &self.layers
    }

    pub fn context_net(&self) -> &ContextNet {
        &self.context
    }

    pub fn training_record(&self) -> Option<&TrainingRecord> {
        self.training.as_ref()
    }

    pub fn arch(&self) -> FlowArch {
        FlowArch {
            layers: self.layers.len(),
            hidden: self.layers[0].conditioners[0].hidden.weight.ncols(),
            context_width: self.context.hidden.bias.ncols(),
        }
    }

    fn validate(&self, v: &[f64], x: &[f64]) -> Result<()> {
        self.check_shapes(v, x)?;
        ensure_finite(v, "flow input")?;
        ensure_finite(x, "observation")
    }

    /// θ = T(z; x) together with Σ of the log-scales applied on the way.
    pub fn forward_with_log_scales(&self, z: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.validate(z, x)?;
        let ctx = self.context.embed(x);
        let mut v = z.to_vec();
        let mut total = 0.0;
        let mut input = Vec::with_capacity(self.m + ctx.len());
        let mut scratch = Vec::new();
        for layer in self.layers.iter().rev() {
            let mut u = vec![0.0; self.m];
            for (p, (&c, cond)) in layer.order.iter().zip(&layer.conditioners).enumerate() {
                input.clear();
                input.extend(layer.order[..p].iter().map(|&j| u[j]));
                input.extend_from_slice(&ctx);
                let (shift, log_scale) = cond.eval(&input, &mut scratch);
                u[c] = v[c] * log_scale.exp() + shift;
                total += log_scale;
            }
            v = u;
        }
        ensure_finite(&v, "flow forward output")?;
        Ok((v, total))
    }

    /// z = T⁻¹(θ; x) through the layer stack, with the log-determinant.
    fn inverse_impl(&self, theta: &[f64], x: &[f64]) -> Result<Inverse> {
        self.validate(theta, x)?;
        let ctx = self.context.embed(x);
        let mut u = theta.to_vec();
        let mut logdet = 0.0;
        let mut input = Vec::with_capacity(self.m + ctx.len());
        let mut scratch = Vec::new();
        for layer in &self.layers {
            let mut out = vec![0.0; self.m];
            for (p, (&c, cond)) in layer.order.iter().zip(&layer.conditioners).enumerate() {
                input.clear();
                input.extend(layer.order[..p].iter().map(|&j| u[j]));
                input.extend_from_slice(&ctx);
                let (shift, log_scale) = cond.eval(&input, &mut scratch);
                out[c] = (u[c] - shift) * (-log_scale).exp();
                logdet -= log_scale;
            }
            u = out;
        }
        if let Some(i) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "flow inverse produced a non-finite value in coordinate {i}"
            )));
        }
        Ok(Inverse {
            z: u,
            logdet_inv: logdet,
        })
    }

    /// Coordinate `i` of z = T⁻¹(θ; x).
    pub fn inverse_coordinate(&self, theta: &[f64], x: &[f64], i: usize) -> Result<f64> {
        if i >= self.m {
            return Err(Error::InvalidArgument(format!(
                "coordinate {i} out of range for m = {}",
                self.m
            )));
        }
        Ok(self.inverse_impl(theta, x)?.z[i])
    }

    pub(crate) fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.context.hidden.weight, &self.context.hidden.bias];
        for layer in &self.layers {
            for c in &layer.conditioners {
                out.extend([
                    &c.hidden.weight,
                    &c.hidden.bias,
                    &c.head.weight,
                    &c.head.bias,
                    &c.skip,
                ]);
            }
        }
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.context.hidden.weight, &mut self.context.hidden.bias];
        for layer in &mut self.layers {
            for c in &mut layer.conditioners {
                out.extend([
                    &mut c.hidden.weight,
                    &mut c.hidden.bias,
                    &mut c.head.weight,
                    &mut c.head.bias,
                    &mut c.skip,
                ]);
            }
        }
        out
    }

    /// Records the mean negative log-likelihood of a batch on `tape`.
    /// `vars` must follow the order of [`Self::params`]; `x_std` holds
    /// standardized observations.
    pub(crate) fn nll_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        theta: &Array2<f64>,
        x_std: &Array2<f64>,
    ) -> Var {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter list exhausted");
        let xs = tape.leaf(x_std.clone());
        let (cw, cb) = (next(), next());
        let ctx = if self.context.hidden.bias.ncols() > 0 {
            let h = tape.matmul(xs, cw);
            let h = tape.add_row(h, cb);
            let h = tape.tanh(h);
            tape.concat(&[xs, h])
        } else {
            xs
        };

        let theta_v = tape.leaf(theta.clone());
        let mut cols: Vec<Var> = (0..self.m).map(|j| tape.column(theta_v, j)).collect();
        let mut log_scales = Vec::new();
        for layer in &self.layers {
            let mut out = cols.clone();
            for (p, (&c, cond)) in layer.order.iter().zip(&layer.conditioners).enumerate() {
                let (w1, b1, w2, b2, skip) = (next(), next(), next(), next(), next());
                let mut parts: Vec<Var> = layer.order[..p].iter().map(|&j| cols[j]).collect();
                parts.push(ctx);
                let input = if parts.len() == 1 { ctx } else { tape.concat(&parts) };
                let mut head = tape.matmul(input, skip);
                if cond.hidden.weight.ncols() > 0 {
                    let h = tape.matmul(input, w1);
                    let h = tape.add_row(h, b1);
                    let h = tape.tanh(h);
                    let o = tape.matmul(h, w2);
                    head = tape.add(head, o);
                }
                let head = tape.add_row(head, b2);
                let shift = tape.column(head, 0);
                let raw = tape.column(head, 1);
                let log_scale = tape.clamp(raw, -LOG_SCALE_BOUND, LOG_SCALE_BOUND);
                let centred = tape.sub(cols[c], shift);
                let neg = tape.scale(log_scale, -1.0);
                let inv_scale = tape.exp(neg);
                out[c] = tape.mul(centred, inv_scale);
                log_scales.push(log_scale);
            }
            cols = out;
        }
        // mean over the batch of 0.5 |z|² + (m/2) log 2π + Σ log-scales
        let z = tape.concat(&cols);
        let sq = tape.square(z);
        let sq_sum = tape.sum(sq);
        let ls = tape.concat(&log_scales);
        let ls_sum = tape.sum(ls);
        let half = tape.scale(sq_sum, 0.5);
        let total = tape.add(half, ls_sum);
        let n = theta.nrows() as f64;
        let mean = tape.scale(total, 1.0 / n);
        let const_term = tape.leaf(Array2::from_elem(
            (1, 1),
            0.5 * self.m as f64 * (2.0 * std::f64::consts::PI).ln(),
        ));
        tape.add(mean, const_term)
    }

    pub(crate) fn standardize_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.context.mean[j]) / self.context.scale[j];
            }
        }
        out
    }
}

impl ConditionalEstimator for ConditionalFlow {
    fn theta_dim(&self) -> usize {
        self.m
    }

    fn obs_dim(&self) -> usize {
        self.d
    }

    fn inverse(&self, theta: &[f64], x: &[f64]) -> Result<Inverse> {
        self.inverse_impl(theta, x)
    }

    fn forward(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_with_log_scales(z, x)?.0)
    }

    fn label(&self) -> String {
        let a = self.arch();
        format!(
            "affine-autoregressive-flow(m={},d={},layers={},hidden={},context={})",
            self.m, self.d, a.layers, a.hidden, a.context_width
        )
    }

    fn training_fingerprint(&self) -> Option<String> {
        self.training.as_ref().map(|t| t.data_fingerprint.clone())
    }
}
