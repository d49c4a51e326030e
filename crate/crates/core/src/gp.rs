//! Squared-exponential Gaussian-process algebra over the wave time grid.
//!
//! The covariance is
//! `C(t, t') = variance * exp(-(t - t')^2 / (2 * length_scale)) + noise * 1[t = t']`,
//! so `length_scale` carries squared time units (days²).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time stamps closer than this (in days) count as equal for the nugget term.
pub const EQUAL_TIME_TOLERANCE: f64 = 1e-9;

const JITTER_BASE: f64 = 1e-10;
const JITTER_RETRIES: usize = 3;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub variance: f64,
    pub length_scale: f64,
    pub noise: f64,
}

impl KernelParams {
    pub fn new(variance: f64, length_scale: f64, noise: f64) -> Result<Self> {
        let kp = KernelParams {
            variance,
            length_scale,
            noise,
        };
        kp.validate()?;
        Ok(kp)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.variance) && ok(self.length_scale) && ok(self.noise) {
            Ok(())
        } else {
            Err(Error::InvalidParameters(vec![format!(
                "kernel parameters must be finite and strictly positive, got {:?}",
                self.as_array()
            )]))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.variance, self.length_scale, self.noise]
    }

    fn smooth(&self, lag: f64) -> f64 {
        self.variance * (-lag * lag / (2.0 * self.length_scale)).exp()
    }
}

pub fn kernel(t: f64, t_prime: f64, kp: &KernelParams) -> f64 {
    let lag = t - t_prime;
    let nugget = if lag.abs() < EQUAL_TIME_TOLERANCE {
        kp.noise
    } else {
        0.0
    };
    kp.smooth(lag) + nugget
}

pub fn gram(times: &[f64], kp: &KernelParams) -> Array2<f64> {
    let n = times.len();
    let mut c = Array2::zeros((n, n));
    for i in 0..n {
        c[[i, i]] = kernel(times[i], times[i], kp);
        for j in 0..i {
            let v = kernel(times[i], times[j], kp);
            c[[i, j]] = v;
            c[[j, i]] = v;
        }
    }
    c
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    /// Returns `None` when a pivot is not strictly positive.
    pub fn factor(a: &Array2<f64>) -> Option<Self> {
        let n = a.nrows();
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut diag = a[[j, j]];
            for k in 0..j {
                diag -= l[[j, k]] * l[[j, k]];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return None;
            }
            let d = diag.sqrt();
            l[[j, j]] = d;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / d;
            }
        }
        Some(Cholesky { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.lower[[i, i]].ln()).sum::<f64>()
    }

    /// Solves `L z = b` in place.
    pub fn forward(&self, b: &mut [f64]) {
        let l = &self.lower;
        for i in 0..b.len() {
            let mut s = b[i];
            for k in 0..i {
                s -= l[[i, k]] * b[k];
            }
            b[i] = s / l[[i, i]];
        }
    }

    /// Solves `Lᵀ z = b` in place.
    pub fn backward(&self, b: &mut [f64]) {
        let l = &self.lower;
        for i in (0..b.len()).rev() {
            let mut s = b[i];
            for k in (i + 1)..b.len() {
                s -= l[[k, i]] * b[k];
            }
            b[i] = s / l[[i, i]];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut z = b.to_vec();
        self.forward(&mut z);
        self.backward(&mut z);
        z
    }

    pub fn inverse(&self) -> Array2<f64> {
        let n = self.dim();
        let mut inv = Array2::zeros((n, n));
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[[i, j]] = col[i];
            }
        }
        inv
    }
}

/// Factors `gram(times, kp)`, adding diagonal jitter on failure.
///
/// The jitter starts at `1e-10 * (variance + noise)` and grows by 10x for up
/// to three retries.
pub fn factor_gram(times: &[f64], kp: &KernelParams) -> Result<Cholesky> {
    let mut c = gram(times, kp);
    if let Some(chol) = Cholesky::factor(&c) {
        return Ok(chol);
    }
    let mut jitter = JITTER_BASE * (kp.variance + kp.noise);
    let mut applied = 0.0;
    for _ in 0..JITTER_RETRIES {
        for i in 0..times.len() {
            c[[i, i]] += jitter - applied;
        }
        applied = jitter;
        if let Some(chol) = Cholesky::factor(&c) {
            return Ok(chol);
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite(kp.as_array()))
}

/// Derivatives of the Gram matrix with respect to
/// `(ln variance, ln length_scale, ln noise)`.
pub fn gram_log_derivatives(times: &[f64], kp: &KernelParams) -> [Array2<f64>; 3] {
    let n = times.len();
    let mut out = [Array2::zeros((n, n)), Array2::zeros((n, n)), Array2::zeros((n, n))];
    for i in 0..n {
        for j in 0..n {
            let lag = times[i] - times[j];
            let smooth = kp.smooth(lag);
            out[0][[i, j]] = smooth;
            out[1][[i, j]] = smooth * lag * lag / (2.0 * kp.length_scale);
            if lag.abs() < EQUAL_TIME_TOLERANCE {
                out[2][[i, j]] = kp.noise;
            }
        }
    }
    out
}

fn check_lengths(eta: &[f64], times: &[f64]) -> Result<()> {
    if eta.len() != times.len() {
        return Err(Error::Dimension(format!(
            "GP values have length {} but there are {} time points",
            eta.len(),
            times.len()
        )));
    }
    Ok(())
}

pub fn gp_logpdf(eta: &[f64], times: &[f64], kp: &KernelParams) -> Result<f64> {
    check_lengths(eta, times)?;
    let chol = factor_gram(times, kp)?;
    let mut z = eta.to_vec();
    chol.forward(&mut z);
    let quad: f64 = z.iter().map(|v| v * v).sum();
    Ok(-0.5 * quad - 0.5 * chol.log_det() - 0.5 * eta.len() as f64 * LN_2PI)
}

/// Log-density with its gradient in `eta` and in the log kernel parameters.
#[derive(Debug, Clone)]
pub struct GpDensity {
    pub value: f64,
    pub grad_eta: Vec<f64>,
    /// Derivatives with respect to `(ln variance, ln length_scale, ln noise)`.
    pub grad_log_params: [f64; 3],
}

pub fn gp_logpdf_with_grad(eta: &[f64], times: &[f64], kp: &KernelParams) -> Result<GpDensity> {
    check_lengths(eta, times)?;
    let n = eta.len();
    let chol = factor_gram(times, kp)?;
    let alpha = chol.solve(eta);
    let quad: f64 = eta.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let value = -0.5 * quad - 0.5 * chol.log_det() - 0.5 * n as f64 * LN_2PI;

    // d/dθ = ½ tr((ααᵀ − C⁻¹) ∂C/∂θ)
    let c_inv = chol.inverse();
    let mut g = [0.0; 3];
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - c_inv[[i, j]];
            let lag = times[i] - times[j];
            let base = (-lag * lag / (2.0 * kp.length_scale)).exp();
            g[0] += w * base;
            g[1] += w * kp.variance * base * lag * lag / (2.0 * kp.length_scale * kp.length_scale);
            if lag.abs() < EQUAL_TIME_TOLERANCE {
                g[2] += w;
            }
        }
    }
    let grad_log_params = [
        0.5 * g[0] * kp.variance,
        0.5 * g[1] * kp.length_scale,
        0.5 * g[2] * kp.noise,
    ];
    Ok(GpDensity {
        value,
        grad_eta: alpha.into_iter().map(|a| -a).collect(),
        grad_log_params,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpPrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Noise-free conditional of the latent function at `new_times`.
///
/// The cross-covariance and the prior variance at new points use only the
/// smooth part of the kernel; the nugget enters through the Gram matrix of
/// the observed times.
pub fn gp_predict(
    eta: &[f64],
    times: &[f64],
    kp: &KernelParams,
    new_times: &[f64],
) -> Result<GpPrediction> {
    let predictor = GpPredictor::new(times, kp)?;
    predictor.predict(eta, new_times)
}

/// Reusable factorization for predicting many value vectors against one
/// set of kernel parameters.
#[derive(Debug, Clone)]
pub struct GpPredictor<'a> {
    times: &'a [f64],
    kp: KernelParams,
    chol: Cholesky,
}

impl<'a> GpPredictor<'a> {
    pub fn new(times: &'a [f64], kp: &KernelParams) -> Result<Self> {
        Ok(GpPredictor {
            times,
            kp: *kp,
            chol: factor_gram(times, kp)?,
        })
    }

    pub fn predict_mean(&self, eta: &[f64], new_times: &[f64]) -> Result<Vec<f64>> {
        check_lengths(eta, self.times)?;
        let alpha = self.chol.solve(eta);
        new_times
            .iter()
            .map(|&s| {
                if !s.is_finite() {
                    return Err(Error::NonFinite(format!("prediction time {s}")));
                }
                Ok(self
                    .times
                    .iter()
                    .zip(&alpha)
                    .map(|(&t, a)| self.kp.smooth(s - t) * a)
                    .sum())
            })
            .collect()
    }

    pub fn predict(&self, eta: &[f64], new_times: &[f64]) -> Result<GpPrediction> {
        let mean = self.predict_mean(eta, new_times)?;
        let variance = new_times
            .iter()
            .map(|&s| {
                let mut k: Vec<f64> = self.times.iter().map(|&t| self.kp.smooth(s - t)).collect();
                self.chol.forward(&mut k);
                let explained: f64 = k.iter().map(|v| v * v).sum();
                (self.kp.variance - explained).max(0.0)
            })
            .collect();
        Ok(GpPrediction { mean, variance })
    }
}
