use crate::error::{shape_err, Error, Result};
use crate::estimator::{ConditionalEstimator, Inverse};
use crate::numerics::{log_upper_tail, normal_log_pdf, normal_quantile, phi, RngStream};

use super::Simulator;

/// Scalar latent μ ~ U[1, 2] observed through an unknown gain
/// g ~ U[−g_max, g_max]: x = g (μ s + σ ε) for a fixed unit template s.
/// Only the product g μ enters the mean, so μ and g are coupled.
#[derive(Debug, Clone, PartialEq)]
pub struct GainToyTask {
    d: usize,
    sigma: f64,
    g_max: f64,
    mu_lo: f64,
    mu_hi: f64,
    template: Vec<f64>,
}

impl GainToyTask {
    pub fn new(d: usize, sigma: f64, g_max: f64) -> Result<Self> {
        if d < 2 || !(sigma > 0.0) || !(g_max > 0.0) || !sigma.is_finite() || !g_max.is_finite() {
            return Err(Error::InvalidArgument(
                "gain toy needs d >= 2, sigma > 0 and g_max > 0".into(),
            ));
        }
        let raw: Vec<f64> = (1..=d)
            .map(|j| (std::f64::consts::PI * j as f64 / (d + 1) as f64).sin())
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self {
            d,
            sigma,
            g_max,
            mu_lo: 1.0,
            mu_hi: 2.0,
            template: raw.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn template(&self) -> &[f64] {
        &self.template
    }

    pub fn g_max(&self) -> f64 {
        self.g_max
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Noise-free observation g μ s.
    pub fn mean_observation(&self, mu: f64, g: f64) -> Vec<f64> {
        self.template.iter().map(|s| g * mu * s).collect()
    }

    /// Observation g (μ s + σ ε) for a given noise vector ε.
    pub fn observation(&self, mu: f64, g: f64, eps: &[f64]) -> Vec<f64> {
        self.template
            .iter()
            .zip(eps)
            .map(|(s, e)| g * (mu * s + self.sigma * e))
            .collect()
    }
}

impl Simulator for GainToyTask {
    fn name(&self) -> &str {
        "gain-toy"
    }

    fn theta_dim(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        self.d
    }

    fn draw(&self, rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
        let mu = rng.uniform_range(self.mu_lo, self.mu_hi);
        let g = rng.uniform_range(-self.g_max, self.g_max);
        let eps = rng.normals(self.d);
        (vec![mu, g], self.observation(mu, g, &eps))
    }
}

/// ln(Φ(b) − Φ(a)) for a < b, accurate when both ends sit in one tail.
fn log_interval(a: f64, b: f64) -> f64 {
    if b <= a {
        return f64::NEG_INFINITY;
    }
    if a > 0.0 {
        let (la, lb) = (log_upper_tail(a), log_upper_tail(b));
        la + (-(lb - la).exp()).ln_1p()
    } else if b < 0.0 {
        log_interval(-b, -a)
    } else {
        (phi(b) - phi(a)).ln()
    }
}

/// CDF of N(mean, sd²) truncated to [lo, hi].
fn truncated_cdf(v: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if v <= lo {
        return 0.0;
    }
    if v >= hi {
        return 1.0;
    }
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let t = (v - mean) / sd;
    (log_interval(a, t) - log_interval(a, b)).exp().clamp(0.0, 1.0)
}

fn truncated_quantile(u: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        if truncated_cdf(mid, mean, sd, lo, hi) < u {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

const COARSE: usize = 401;
const FINE: usize = 961;
const FINE_HALF_WIDTH: f64 = 1.2;

/// Posterior of g on one sign branch, tabulated on a grid in t = ln|g|.
struct Branch {
    sign: f64,
    t: Vec<f64>,
    /// Cumulative mass from the smallest |g|, normalized to end at 1.
    cum: Vec<f64>,
    log_mass: f64,
}

/// Marginal posterior of g given x.
struct GainMarginal {
    neg: Branch,
    pos: Branch,
    /// ln ∫ exp(ℓ(g)) dg over both branches.
    log_norm: f64,
    p_neg: f64,
}

/// Exact posterior q(μ, g | x) = p(g | x) p(μ | g, x) of the gain toy as an
/// autoregressive transform: z_g = Φ⁻¹(F(g | x)), z_μ = Φ⁻¹(F(μ | g, x)).
/// The g-marginal is tabulated by quadrature over ln|g| for each call.
#[derive(Debug, Clone)]
pub struct GainPosterior {
    task: GainToyTask,
}

impl GainPosterior {
    pub fn new(task: GainToyTask) -> Self {
        Self { task }
    }

    pub fn task(&self) -> &GainToyTask {
        &self.task
    }

    fn summaries(&self, x: &[f64]) -> Result<(f64, f64, f64)> {
        if x.len() != self.task.d {
            return Err(shape_err("observation", self.task.d, x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("observation is not finite".into()));
        }
        let norm2: f64 = x.iter().map(|v| v * v).sum();
        if norm2 == 0.0 {
            return Err(Error::Domain("gain posterior is undefined at x = 0".into()));
        }
        let y: f64 = x.iter().zip(&self.task.template).map(|(a, s)| a * s).sum();
        Ok((y, (norm2 - y * y).max(0.0), norm2))
    }

    /// Unnormalized log density of g.
    fn log_g(&self, g: f64, y: f64, r2: f64) -> f64 {
        let s = self.task.sigma;
        let m = y / g;
        -(self.task.d as f64) * g.abs().ln() - r2 / (2.0 * s * s * g * g)
            + log_interval((self.task.mu_lo - m) / s, (self.task.mu_hi - m) / s)
    }

    fn branch(&self, sign: f64, y: f64, r2: f64, centre: f64) -> Branch {
        let t_max = self.task.g_max.ln();
        let lo = (centre - 10.0).min(t_max - 1.0);
        let hi = (centre + 10.0).min(t_max);
        let density = |t: f64| self.log_g(sign * t.exp(), y, r2) + t;
        let mut best = (f64::NEG_INFINITY, hi);
        for k in 0..COARSE {
            let t = lo + (hi - lo) * k as f64 / (COARSE - 1) as f64;
            let w = density(t);
            if w > best.0 {
                best = (w, t);
            }
        }
        let f_lo = (best.1 - FINE_HALF_WIDTH).max(lo);
        let f_hi = (best.1 + FINE_HALF_WIDTH).min(t_max);
        let t: Vec<f64> = (0..FINE)
            .map(|k| f_lo + (f_hi - f_lo) * k as f64 / (FINE - 1) as f64)
            .collect();
        let w: Vec<f64> = t.iter().map(|&v| density(v)).collect();
        let w_max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut cum = vec![0.0; FINE];
        if w_max.is_finite() {
            let h = (f_hi - f_lo) / (FINE - 1) as f64;
            for k in 1..FINE {
                cum[k] = cum[k - 1] + 0.5 * h * ((w[k - 1] - w_max).exp() + (w[k] - w_max).exp());
            }
        }
        let total = cum[FINE - 1];
        let log_mass = if total > 0.0 { w_max + total.ln() } else { f64::NEG_INFINITY };
        if total > 0.0 {
            for c in &mut cum {
                *c /= total;
            }
        }
        Branch { sign, t, cum, log_mass }
    }

    fn marginal(&self, y: f64, r2: f64, norm2: f64) -> GainMarginal {
        let mid = 0.5 * (self.task.mu_lo + self.task.mu_hi);
        let scale2 = mid * mid + self.task.d as f64 * self.task.sigma * self.task.sigma;
        let centre = 0.5 * (norm2 / scale2).ln();
        let neg = self.branch(-1.0, y, r2, centre);
        let pos = self.branch(1.0, y, r2, centre);
        let top = neg.log_mass.max(pos.log_mass);
        let log_norm = top + ((neg.log_mass - top).exp() + (pos.log_mass - top).exp()).ln();
        let p_neg = (neg.log_mass - log_norm).exp();
        GainMarginal {
            neg,
            pos,
            log_norm,
            p_neg,
        }
    }

    /// Fraction of a branch's mass with |g| ≤ e^t.
    fn branch_cdf(b: &Branch, t: f64) -> f64 {
        if t <= b.t[0] {
            return 0.0;
        }
        if t >= b.t[FINE - 1] {
            return 1.0;
        }
        let k = b.t.partition_point(|&v| v <= t) - 1;
        let frac = (t - b.t[k]) / (b.t[k + 1] - b.t[k]);
        b.cum[k] + frac * (b.cum[k + 1] - b.cum[k])
    }

    fn branch_quantile(b: &Branch, u: f64) -> f64 {
        let k = b.cum.partition_point(|&c| c < u).clamp(1, FINE - 1);
        let (c0, c1) = (b.cum[k - 1], b.cum[k]);
        let frac = if c1 > c0 { ((u - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.0 };
        b.t[k - 1] + frac * (b.t[k] - b.t[k - 1])
    }

    fn cdf_g(marg: &GainMarginal, g: f64) -> f64 {
        if g < 0.0 {
            marg.p_neg * (1.0 - Self::branch_cdf(&marg.neg, (-g).ln()))
        } else if g > 0.0 {
            marg.p_neg + (1.0 - marg.p_neg) * Self::branch_cdf(&marg.pos, g.ln())
        } else {
            marg.p_neg
        }
    }

    fn quantile_g(marg: &GainMarginal, u: f64) -> f64 {
        if u < marg.p_neg {
            let within = 1.0 - u / marg.p_neg;
            marg.neg.sign * Self::branch_quantile(&marg.neg, within).exp()
        } else {
            let within = if marg.p_neg < 1.0 {
                (u - marg.p_neg) / (1.0 - marg.p_neg)
            } else {
                0.0
            };
            marg.pos.sign * Self::branch_quantile(&marg.pos, within).exp()
        }
    }

    /// Posterior CDF of g at `g`, given x.
    pub fn gain_cdf(&self, g: f64, x: &[f64]) -> Result<f64> {
        let (y, r2, norm2) = self.summaries(x)?;
        Ok(Self::cdf_g(&self.marginal(y, r2, norm2), g))
    }

    fn log_posterior_with(&self, marg: &GainMarginal, mu: f64, g: f64, y: f64, r2: f64) -> f64 {
        if !(self.task.mu_lo..=self.task.mu_hi).contains(&mu) || g == 0.0 || g.abs() > self.task.g_max {
            return f64::NEG_INFINITY;
        }
        let s = self.task.sigma;
        let m = y / g;
        let log_mu = normal_log_pdf((mu - m) / s)
            - s.ln()
            - log_interval((self.task.mu_lo - m) / s, (self.task.mu_hi - m) / s);
        self.log_g(g, y, r2) - marg.log_norm + log_mu
    }
}

fn probit(u: f64) -> f64 {
    normal_quantile(u.clamp(1e-300, 1.0 - f64::EPSILON / 2.0)).expect("clamped into (0, 1)")
}

impl ConditionalEstimator for GainPosterior {
    fn theta_dim(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        self.task.d
    }

    fn inverse(&self, theta: &[f64], x: &[f64]) -> Result<Inverse> {
        self.check_shapes(theta, x)?;
        let (y, r2, norm2) = self.summaries(x)?;
        let marg = self.marginal(y, r2, norm2);
        let (mu, g) = (theta[0], theta[1]);
        let f_g = Self::cdf_g(&marg, g);
        let f_mu = if g == 0.0 {
            0.5
        } else {
            truncated_cdf(mu, y / g, self.task.sigma, self.task.mu_lo, self.task.mu_hi)
        };
        let z = vec![probit(f_mu), probit(f_g)];
        let log_post = self.log_posterior_with(&marg, mu, g, y, r2);
        let logdet_inv = log_post - z.iter().map(|&v| normal_log_pdf(v)).sum::<f64>();
        Ok(Inverse { z, logdet_inv })
    }

    fn forward(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_shapes(z, x)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("base sample is not finite".into()));
        }
        let (y, r2, norm2) = self.summaries(x)?;
        let marg = self.marginal(y, r2, norm2);
        let g = Self::quantile_g(&marg, phi(z[1]));
        let mu = truncated_quantile(phi(z[0]), y / g, self.task.sigma, self.task.mu_lo, self.task.mu_hi);
        Ok(vec![mu, g])
    }

    fn label(&self) -> String {
        format!("gain-toy-posterior(d={},sigma={})", self.task.d, self.task.sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pit::pit_matrix;
    use crate::stats::ks_uniform;
    use crate::tasks::simulate;

    fn task() -> GainToyTask {
        GainToyTask::new(16, 0.25, 20.0).unwrap()
    }

    #[test]
    fn template_and_coupling() {
        let t = task();
        let norm: f64 = t.template().iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        // the noise-free observation depends on g μ only
        let a = t.mean_observation(1.5, 8.0);
        let b = t.mean_observation(1.2, 10.0);
        assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-12));
        assert!(GainToyTask::new(1, 0.25, 20.0).is_err());
        assert!(GainToyTask::new(16, 0.0, 20.0).is_err());
    }

    #[test]
    fn interval_log_probability_in_tails() {
        assert!((log_interval(-1.0, 1.0) - (phi(1.0) - phi(-1.0)).ln()).abs() < 1e-14);
        let direct = (phi(-41.0) - phi(-42.0)).ln();
        assert!(direct.is_infinite());
        let v = log_interval(41.0, 42.0);
        assert!((v - log_upper_tail(41.0)).abs() < 1e-6);
        assert_eq!(log_interval(-42.0, -41.0), v);
        assert!((truncated_cdf(1.5, 1.5, 0.25, 1.0, 2.0) - 0.5).abs() < 1e-14);
        assert!((truncated_quantile(0.5, 1.5, 0.25, 1.0, 2.0) - 1.5).abs() < 1e-12);
    }

    /// Posterior CDF of g by brute-force 2-d quadrature of prior × likelihood.
    fn brute_force_cdf(t: &GainToyTask, x: &[f64], g_lo: f64, g_hi: f64, at: &[f64]) -> Vec<f64> {
        let (kg, km) = (6001, 401);
        let hg = (g_hi - g_lo) / (kg - 1) as f64;
        let hm = 1.0 / (km - 1) as f64;
        let mut w = Vec::with_capacity(kg);
        for a in 0..kg {
            let g = g_lo + a as f64 * hg;
            let mut row = Vec::with_capacity(km);
            for b in 0..km {
                let mu = 1.0 + b as f64 * hm;
                let mut ss = 0.0;
                for (xj, sj) in x.iter().zip(t.template()) {
                    ss += (xj - g * mu * sj).powi(2);
                }
                row.push(-(t.d as f64) * g.abs().ln() - ss / (2.0 * t.sigma * t.sigma * g * g));
            }
            w.push(row);
        }
        let top = w.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let marg: Vec<f64> = w
            .iter()
            .map(|row| {
                let e: Vec<f64> = row.iter().map(|v| (v - top).exp()).collect();
                hm * (e.iter().sum::<f64>() - 0.5 * (e[0] + e[km - 1]))
            })
            .collect();
        let mut cum = vec![0.0; kg];
        for a in 1..kg {
            cum[a] = cum[a - 1] + 0.5 * hg * (marg[a - 1] + marg[a]);
        }
        let total = cum[kg - 1];
        at.iter()
            .map(|&g| {
                let pos = ((g - g_lo) / hg).clamp(0.0, (kg - 1) as f64);
                let k = (pos.floor() as usize).min(kg - 2);
                let f = pos - k as f64;
                (cum[k] + f * (cum[k + 1] - cum[k])) / total
            })
            .collect()
    }

    #[test]
    fn gain_marginal_matches_quadrature() {
        let t = task();
        let post = GainPosterior::new(t.clone());
        let mut rng = RngStream::new(5, 0);
        for &(mu, g) in &[(1.3, 7.0), (1.8, -2.5), (1.1, 15.0)] {
            let x = t.observation(mu, g, &rng.normals(16));
            let (lo, hi) = if g > 0.0 { (0.3 * g, (2.5 * g).min(20.0)) } else { ((2.5 * g).max(-20.0), 0.3 * g) };
            let probe: Vec<f64> = (1..10).map(|k| lo + (hi - lo) * k as f64 / 10.0).collect();
            let brute = brute_force_cdf(&t, &x, lo, hi, &probe);
            let base = post.gain_cdf(lo, &x).unwrap();
            let span = post.gain_cdf(hi, &x).unwrap() - base;
            assert!((span - 1.0).abs() < 1e-5, "mass outside the probe window: {span}");
            for (p, b) in probe.iter().zip(&brute) {
                let ours = post.gain_cdf(*p, &x).unwrap() - base;
                assert!((ours - b).abs() < 1e-4, "g={p}: {ours} vs {b}");
            }
        }
    }

    #[test]
    fn round_trip_and_density() {
        let t = task();
        let post = GainPosterior::new(t.clone());
        let mut rng = RngStream::new(6, 0);
        for _ in 0..20 {
            let (theta, x) = t.draw(&mut rng);
            let inv = post.inverse(&theta, &x).unwrap();
            let back = post.forward(&inv.z, &x).unwrap();
            assert!((back[0] - theta[0]).abs() < 1e-6 && (back[1] - theta[1]).abs() < 1e-6 * theta[1].abs().max(1.0));
            assert!(post.log_pdf(&theta, &x).unwrap().is_finite());
        }
        let x = t.observation(1.5, 4.0, &[0.0; 16]);
        assert_eq!(post.log_pdf(&[2.5, 4.0], &x).unwrap(), f64::NEG_INFINITY);
        assert!(post.inverse(&[1.5, 4.0], &[0.0; 16]).is_err());
    }

    #[test]
    fn posterior_pit_is_uniform() {
        let t = task();
        let data = simulate(&t, 4000, 8).unwrap();
        let p = pit_matrix(&GainPosterior::new(t), &data).unwrap();
        for i in 0..2 {
            let ks = ks_uniform(&p.column(i));
            assert!(ks < 0.03, "coordinate {i}: {ks}");
        }
    }
}
