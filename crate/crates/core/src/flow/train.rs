use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::{ConditionalFlow, FlowArch};
use crate::dataset::CalibrationDataset;
use crate::error::{Error, Result};
use crate::numerics::{Adam, Matrix, RngStream, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub layers: usize,
    pub hidden: usize,
    pub context_width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping. The learning
    /// rate is halved after half as many stale epochs.
    pub patience: usize,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 16,
            context_width: 8,
            learning_rate: 5e-3,
            batch_size: 256,
            epochs: 60,
            validation_fraction: 0.1,
            patience: 10,
            seed: 0,
        }
    }
}

impl FlowTrainConfig {
    pub fn arch(&self) -> FlowArch {
        FlowArch {
            layers: self.layers,
            hidden: self.hidden,
            context_width: self.context_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "layers, batch_size and patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// What a trained flow remembers about its fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub seed: u64,
    pub data_fingerprint: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_nll: f64,
    /// Best-so-far validation NLL after each epoch (non-increasing).
    pub validation_history: Vec<f64>,
}

fn column_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    let mean: Vec<f64> = x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default();
    let scale = x
        .axis_iter(Axis(1))
        .zip(&mean)
        .map(|(col, m)| {
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn batch_nll(flow: &ConditionalFlow, theta: &Matrix, x_std: &Matrix) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = flow.params().into_iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = flow.nll_on_tape(&mut tape, &vars, theta, x_std);
    tape.scalar(loss)
}

/// Maximum-likelihood fit of a conditional flow with mini-batch Adam and
/// early stopping on held-out negative log-likelihood. Returns the
/// best-validation checkpoint.
pub fn train_flow(data: &CalibrationDataset, cfg: &FlowTrainConfig) -> Result<ConditionalFlow> {
    cfg.validate()?;
    let n = data.len();
    if n < cfg.batch_size {
        return Err(Error::Config(format!(
            "training set has {n} rows, fewer than batch_size {}",
            cfg.batch_size
        )));
    }
    let mut init_rng = RngStream::new(cfg.seed, 0);
    let mut flow = ConditionalFlow::new(data.theta_dim(), data.obs_dim(), cfg.arch(), &mut init_rng)?;
    let (mean, scale) = column_stats(&data.x);
    flow.context.mean = mean;
    flow.context.scale = scale;

    let mut record = TrainingRecord {
        seed: cfg.seed,
        data_fingerprint: data.fingerprint(),
        epochs_run: 0,
        best_epoch: 0,
        best_validation_nll: f64::NAN,
        validation_history: Vec::new(),
    };
    if cfg.epochs == 0 {
        flow.training = Some(record);
        return Ok(flow);
    }

    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(cfg.seed, 1).shuffle(&mut order);
    let n_val = ((n as f64) * cfg.validation_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    if train_idx.len() < cfg.batch_size {
        return Err(Error::Config("validation split leaves fewer rows than one batch".into()));
    }
    let x_std = flow.standardize_rows(&data.x);
    let val_source = if val_idx.is_empty() { &train_idx[..] } else { val_idx };
    let val_theta = data.theta.select(Axis(0), val_source);
    let val_x = x_std.select(Axis(0), val_source);

    let shapes: Vec<_> = flow.params().iter().map(|p| p.dim()).collect();
    let mut lr = cfg.learning_rate;
    let mut opt = Adam::new(lr, &shapes);
    let mut shuffle_rng = RngStream::new(cfg.seed, 2);

    let mut best = flow.clone();
    let mut best_nll = batch_nll(&flow, &val_theta, &val_x);
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut train_idx);
        for chunk in train_idx.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size / 2 {
                continue;
            }
            let theta = data.theta.select(Axis(0), chunk);
            let xs = x_std.select(Axis(0), chunk);
            let mut tape = Tape::new();
            let vars: Vec<Var> = flow.params().into_iter().map(|p| tape.leaf(p.clone())).collect();
            let loss = flow.nll_on_tape(&mut tape, &vars, &theta, &xs);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    reason: format!("batch loss {value}"),
                });
            }
            let grads = tape.grad(loss)?;
            let g: Vec<Matrix> = vars.iter().map(|&v| grads.wrt(v)).collect();
            opt.update(&mut flow.params_mut(), &g);
        }

        let val = batch_nll(&flow, &val_theta, &val_x);
        if !val.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                reason: format!("validation loss {val}"),
            });
        }
        record.epochs_run = epoch;
        if val < best_nll - 1e-5 {
            best_nll = val;
            best = flow.clone();
            record.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale == (cfg.patience / 2).max(1) {
                lr *= 0.5;
                opt.set_lr(lr);
            }
        }
        record.validation_history.push(best_nll);
        log::debug!("epoch {epoch}: validation nll {val:.5} (best {best_nll:.5})");
        if stale >= cfg.patience {
            break;
        }
    }

    record.best_validation_nll = best_nll;
    best.training = Some(record);
    Ok(best)
}
