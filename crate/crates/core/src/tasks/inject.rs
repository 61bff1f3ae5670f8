use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{ConditionalEstimator, Inverse};

/// Perturbation applied around the estimator's centre a(x) = T(0; x):
/// θ' = a + γ(x)(θ − a) + δ(x) on the targeted coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Miscalibration {
    /// δ(x) = delta.
    Bias { delta: f64 },
    /// δ(x) = delta · sign(x_feature); zero-mean for x symmetric about 0.
    SignBias { delta: f64, feature: usize },
    /// γ(x) = gamma.
    Dispersion { gamma: f64 },
    /// γ(x) = 1 + (gamma − 1) · min(1, |x| / reference).
    NormDispersion { gamma: f64, reference: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiscalibrationSpec {
    pub kind: Miscalibration,
    /// Targeted coordinates (0-based); empty means all.
    #[serde(default)]
    pub targets: Vec<usize>,
}

impl MiscalibrationSpec {
    pub fn all(kind: Miscalibration) -> Self {
        Self { kind, targets: Vec::new() }
    }

    /// Parses `kind:value` as used on the command line, e.g. `dispersion:1.5`,
    /// `bias:0.2`, `sign-bias:0.1` (feature 0) or `norm-dispersion:3:40`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let num = |k: usize| -> Result<f64> {
            parts
                .get(k)
                .ok_or_else(|| Error::Config(format!("injection '{text}' is missing a value")))?
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("injection '{text}' has a non-numeric value")))
        };
        let kind = match parts[0] {
            "bias" => Miscalibration::Bias { delta: num(1)? },
            "sign-bias" => Miscalibration::SignBias {
                delta: num(1)?,
                feature: if parts.len() > 2 { num(2)? as usize } else { 0 },
            },
            "dispersion" => Miscalibration::Dispersion { gamma: num(1)? },
            "norm-dispersion" => Miscalibration::NormDispersion {
                gamma: num(1)?,
                reference: num(2)?,
            },
            other => return Err(Error::Config(format!("unknown injection kind '{other}'"))),
        };
        let spec = Self::all(kind);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            Miscalibration::Dispersion { gamma } | Miscalibration::NormDispersion { gamma, .. } if !(gamma > 0.0) => {
                Err(Error::InvalidArgument(format!("dispersion factor must be positive, got {gamma}")))
            }
            Miscalibration::NormDispersion { reference, .. } if !(reference > 0.0) => {
                Err(Error::InvalidArgument("norm-dispersion reference must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    fn delta(&self, x: &[f64]) -> f64 {
        match self.kind {
            Miscalibration::Bias { delta } => delta,
            Miscalibration::SignBias { delta, feature } => {
                let v = x[feature];
                if v > 0.0 {
                    delta
                } else if v < 0.0 {
                    -delta
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    }

    fn gamma(&self, x: &[f64]) -> f64 {
        match self.kind {
            Miscalibration::Dispersion { gamma } => gamma,
            Miscalibration::NormDispersion { gamma, reference } => {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                1.0 + (gamma - 1.0) * (norm / reference).min(1.0)
            }
            _ => 1.0,
        }
    }

    fn targeted(&self, i: usize) -> bool {
        self.targets.is_empty() || self.targets.contains(&i)
    }
}

impl std::fmt::Display for MiscalibrationSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            Miscalibration::Bias { delta } => write!(f, "bias({delta})"),
            Miscalibration::SignBias { delta, feature } => write!(f, "sign-bias({delta},x_{})", feature + 1),
            Miscalibration::Dispersion { gamma } => write!(f, "dispersion({gamma})"),
            Miscalibration::NormDispersion { gamma, reference } => write!(f, "norm-dispersion({gamma},{reference})"),
        }
    }
}

/// An estimator with an injected miscalibration. Still an invertible
/// conditional transform with a tractable density.
#[derive(Debug, Clone)]
pub struct Miscalibrated<E> {
    base: E,
    spec: MiscalibrationSpec,
}

pub fn inject<E: ConditionalEstimator>(base: E, spec: MiscalibrationSpec) -> Result<Miscalibrated<E>> {
    spec.validate()?;
    if let Some(&bad) = spec.targets.iter().find(|&&i| i >= base.theta_dim()) {
        return Err(Error::InvalidArgument(format!("target coordinate {bad} out of range")));
    }
    if let Miscalibration::SignBias { feature, .. } = spec.kind {
        if feature >= base.obs_dim() {
            return Err(Error::InvalidArgument(format!("sign-bias feature {feature} out of range")));
        }
    }
    Ok(Miscalibrated { base, spec })
}

impl<E> Miscalibrated<E> {
    pub fn base(&self) -> &E {
        &self.base
    }

    pub fn spec(&self) -> &MiscalibrationSpec {
        &self.spec
    }
}

impl<E: ConditionalEstimator> ConditionalEstimator for Miscalibrated<E> {
    fn theta_dim(&self) -> usize {
        self.base.theta_dim()
    }

    fn obs_dim(&self) -> usize {
        self.base.obs_dim()
    }

    fn inverse(&self, theta: &[f64], x: &[f64]) -> Result<Inverse> {
        self.check_shapes(theta, x)?;
        let centre = self.base.forward(&vec![0.0; self.theta_dim()], x)?;
        let (gamma, delta) = (self.spec.gamma(x), self.spec.delta(x));
        let mut inner = theta.to_vec();
        let mut log_gamma_total = 0.0;
        for (i, v) in inner.iter_mut().enumerate() {
            if self.spec.targeted(i) {
                *v = centre[i] + (*v - delta - centre[i]) / gamma;
                log_gamma_total += gamma.ln();
            }
        }
        let inv = self.base.inverse(&inner, x)?;
        Ok(Inverse {
            z: inv.z,
            logdet_inv: inv.logdet_inv - log_gamma_total,
        })
    }

    fn forward(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_shapes(z, x)?;
        let centre = self.base.forward(&vec![0.0; self.theta_dim()], x)?;
        let (gamma, delta) = (self.spec.gamma(x), self.spec.delta(x));
        let mut theta = self.base.forward(z, x)?;
        for (i, v) in theta.iter_mut().enumerate() {
            if self.spec.targeted(i) {
                *v = centre[i] + gamma * (*v - centre[i]) + delta;
            }
        }
        Ok(theta)
    }

    fn label(&self) -> String {
        format!("{} + {}", self.base.label(), self.spec)
    }

    fn training_fingerprint(&self) -> Option<String> {
        self.base.training_fingerprint()
    }
}
