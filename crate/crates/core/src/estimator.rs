use crate::error::{shape_err, Result};
use crate::numerics::{normal_log_pdf, RngStream};

/// Output of the inverse transform θ ↦ z.
#[derive(Debug, Clone, PartialEq)]
pub struct Inverse {
    pub z: Vec<f64>,
    /// log |det ∂z/∂θ|
    pub logdet_inv: f64,
}

/// A conditional density estimator q(θ | x) given as a bijection onto a
/// standard-normal base: θ = T(z; x), z ~ N(0, I_m).
pub trait ConditionalEstimator: Send + Sync {
    fn theta_dim(&self) -> usize;

    fn obs_dim(&self) -> usize;

    /// z = T⁻¹(θ; x) with the log-determinant of its Jacobian.
    fn inverse(&self, theta: &[f64], x: &[f64]) -> Result<Inverse>;

    /// θ = T(z; x).
    fn forward(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>>;

    /// Short identifier used in provenance records.
    fn label(&self) -> String;

    /// Fingerprint of the data the estimator was fitted on, if any.
    fn training_fingerprint(&self) -> Option<String> {
        None
    }

    fn log_pdf(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let inv = self.inverse(theta, x)?;
        Ok(inv.z.iter().map(|&v| normal_log_pdf(v)).sum::<f64>() + inv.logdet_inv)
    }

    fn sample(&self, x: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        let z = rng.normals(self.theta_dim());
        self.forward(&z, x)
    }

    fn check_shapes(&self, point: &[f64], x: &[f64]) -> Result<()> {
        if point.len() != self.theta_dim() {
            return Err(shape_err("parameter vector", self.theta_dim(), point.len()));
        }
        if x.len() != self.obs_dim() {
            return Err(shape_err("observation vector", self.obs_dim(), x.len()));
        }
        Ok(())
    }
}

impl<E: ConditionalEstimator + ?Sized> ConditionalEstimator for Box<E> {
    fn theta_dim(&self) -> usize {
        (**self).theta_dim()
    }
    fn obs_dim(&self) -> usize {
        (**self).obs_dim()
    }
    fn inverse(&self, theta: &[f64], x: &[f64]) -> Result<Inverse> {
        (**self).inverse(theta, x)
    }
    fn forward(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        (**self).forward(z, x)
    }
    fn label(&self) -> String {
        (**self).label()
    }
    fn training_fingerprint(&self) -> Option<String> {
        (**self).training_fingerprint()
    }
}
