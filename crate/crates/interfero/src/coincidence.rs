//! Forward model: single-photon detection probabilities and the two-photon
//! coincidence curve, evaluated by trapezoid quadrature over sampled spectra.
//!
//! For a 2x2 submatrix with amplitudes `(a_ij, a_ij', a_i'j, a_i'j')` and
//! arguments `(t_ij, t_ij', t_i'j, t_i'j')` the coincidence rate at delay tau
//! is, up to a multiplicative loss factor,
//!
//! ```text
//! C(tau) = (a_ij^2 a_i'j'^2 + a_ij'^2 a_i'j^2) * I1
//!        + 2 gamma a_ij a_ij' a_i'j a_i'j' * cos(beta) * |g(tau)|^2
//! ```
//!
//! with `beta = t_ij - t_ij' - t_i'j + t_i'j'`, `I1` the product of the
//! squared spectral norms and `g(tau) = int f_j f_j' e^{i omega tau}`.
//! The double integrals of the rate separate into products of single
//! integrals, which is the form implemented here; the tests compare it
//! against the direct double quadrature.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    trapezoid_weights, CoincidenceCurve, LossModel, ModeMatch, RepresentativeMatrix, Spectrum,
    Tolerances,
};

#[derive(Debug, Error)]
pub enum CoincidenceError {
    #[error("port index {index} out of range for {m} modes")]
    IndexOutOfRange { index: usize, m: usize },
    #[error("spectrum is not normalized (|f|^2 integrates to {norm})")]
    UnnormalizedSpectrum { norm: f64 },
    #[error("empty delay grid")]
    EmptyDelayGrid,
    #[error("invalid submatrix parameters: {0}")]
    InvalidParams(String),
}

/// Amplitudes and arguments of the 2x2 submatrix probed by one coincidence
/// measurement, ordered `(ij, ij', i'j, i'j')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubmatrixParams {
    pub amps: [f64; 4],
    pub phases: [f64; 4],
}

impl SubmatrixParams {
    pub fn new(amps: [f64; 4], phases: [f64; 4]) -> Result<Self, CoincidenceError> {
        if amps.iter().any(|&a| !a.is_finite() || a < 0.0) {
            return Err(CoincidenceError::InvalidParams("amplitudes must be finite and >= 0".into()));
        }
        if phases.iter().any(|p| !p.is_finite()) {
            return Err(CoincidenceError::InvalidParams("phases must be finite".into()));
        }
        Ok(SubmatrixParams { amps, phases })
    }

    /// Net phase `t_ij - t_ij' - t_i'j + t_i'j'` controlling the curve shape.
    pub fn phase_combination(&self) -> f64 {
        self.phases[0] - self.phases[1] - self.phases[2] + self.phases[3]
    }

    /// Non-interfering amplitude term `a_ij^2 a_i'j'^2 + a_ij'^2 a_i'j^2`.
    pub fn baseline_amps(&self) -> f64 {
        let [a, b, c, d] = self.amps;
        a * a * d * d + b * b * c * c
    }

    /// Product of all four amplitudes.
    pub fn pair_product(&self) -> f64 {
        self.amps.iter().product()
    }
}

/// Probability of detecting a photon at output `i` (1-based) for a single
/// photon incident at input `j`: `P = kappa_i lambda_i alpha_ij^2 mu_j nu_j`.
pub fn single_photon_prob(
    rep: &RepresentativeMatrix,
    loss: &LossModel,
    i: usize,
    j: usize,
) -> Result<f64, CoincidenceError> {
    let m = rep.m;
    if i == 0 || i > m {
        return Err(CoincidenceError::IndexOutOfRange { index: i, m });
    }
    if j == 0 || j > m {
        return Err(CoincidenceError::IndexOutOfRange { index: j, m });
    }
    let (i, j) = (i - 1, j - 1);
    Ok(loss.kappa[i] * rep.lambda[i] * rep.alpha[(i, j)].powi(2) * rep.mu[j] * loss.nu[j])
}

/// Spectral interference kernel for one pair of input spectra.
///
/// Holds the quadrature-weighted pointwise product `w_a f(omega_a) f'(omega_a)`
/// so that `g(tau)` costs one pass over the common grid.
#[derive(Debug, Clone)]
pub struct CurveKernel {
    omega: Vec<f64>,
    weighted_product: Vec<f64>,
    i1: f64,
}

impl CurveKernel {
    /// Build from two normalized spectra. Spectra on different grids are
    /// merged by resampling the finer grid onto the coarser one.
    pub fn new(spec1: &Spectrum, spec2: &Spectrum, tol: &Tolerances) -> Result<Self, CoincidenceError> {
        for s in [spec1, spec2] {
            let n = s.norm_sq();
            if (n - 1.0).abs() >= tol.norm {
                return Err(CoincidenceError::UnnormalizedSpectrum { norm: n });
            }
        }
        let (a, b);
        let (f1, f2) = if spec1.omega == spec2.omega {
            (spec1, spec2)
        } else if spec1.len() >= spec2.len() {
            a = spec1.resample_onto(&spec2.omega).expect("resample onto valid grid");
            (&a, spec2)
        } else {
            b = spec2.resample_onto(&spec1.omega).expect("resample onto valid grid");
            (spec1, &b)
        };
        let w = trapezoid_weights(&f1.omega);
        let weighted_product: Vec<f64> =
            (0..f1.len()).map(|k| w[k] * f1.amplitude[k] * f2.amplitude[k]).collect();
        let n1: f64 = (0..f1.len()).map(|k| w[k] * f1.amplitude[k] * f1.amplitude[k]).sum();
        let n2: f64 = (0..f2.len()).map(|k| w[k] * f2.amplitude[k] * f2.amplitude[k]).sum();
        Ok(CurveKernel { omega: f1.omega.clone(), weighted_product, i1: n1 * n2 })
    }

    /// `I1 = int |f|^2 int |f'|^2` on the common grid.
    pub fn i1(&self) -> f64 {
        self.i1
    }

    /// `|g(t)|^2` with `g(t) = sum_a w_a f_a f'_a e^{i omega_a t}`.
    pub fn overlap_sq(&self, t: f64) -> f64 {
        let mut g = Complex64::new(0.0, 0.0);
        for (p, &w) in self.weighted_product.iter().zip(&self.omega) {
            g += Complex64::from_polar(*p, w * t);
        }
        g.norm_sqr()
    }

    /// Bind to a fixed delay grid for repeated shifted evaluation.
    pub fn bind(&self, tau: &[f64]) -> BoundKernel {
        let k = self.omega.len();
        let l = tau.len();
        let mut e_re = vec![0.0; k * l];
        let mut e_im = vec![0.0; k * l];
        for (a, &w) in self.omega.iter().enumerate() {
            for (i, &t) in tau.iter().enumerate() {
                let (s, c) = (w * t).sin_cos();
                e_re[a * l + i] = c;
                e_im[a * l + i] = s;
            }
        }
        BoundKernel { kernel: self.clone(), len: l, e_re, e_im }
    }
}

/// A [`CurveKernel`] bound to a delay grid; evaluates `|g(tau_i - shift)|^2`
/// for the whole grid in `O(k l)`.
#[derive(Debug, Clone)]
pub struct BoundKernel {
    kernel: CurveKernel,
    len: usize,
    e_re: Vec<f64>,
    e_im: Vec<f64>,
}

impl BoundKernel {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn i1(&self) -> f64 {
        self.kernel.i1
    }

    pub fn eval_into(&self, shift: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len);
        let l = self.len;
        let mut g_re = vec![0.0; l];
        let mut g_im = vec![0.0; l];
        for (a, &p) in self.kernel.weighted_product.iter().enumerate() {
            let (s, c) = (self.kernel.omega[a] * shift).sin_cos();
            // p * e^{i omega (tau - shift)} accumulated over the grid row
            let (pr, pi) = (p * c, -p * s);
            let row_re = &self.e_re[a * l..(a + 1) * l];
            let row_im = &self.e_im[a * l..(a + 1) * l];
            for i in 0..l {
                g_re[i] += pr * row_re[i] - pi * row_im[i];
                g_im[i] += pr * row_im[i] + pi * row_re[i];
            }
        }
        for i in 0..l {
            out[i] = g_re[i] * g_re[i] + g_im[i] * g_im[i];
        }
    }
}

/// Expected coincidence rate over the delay grid, up to the loss prefactor.
pub fn coincidence_curve(
    spec1: &Spectrum,
    spec2: &Spectrum,
    taus: &[f64],
    params: &SubmatrixParams,
    gamma: ModeMatch,
) -> Result<Vec<f64>, CoincidenceError> {
    if taus.is_empty() {
        return Err(CoincidenceError::EmptyDelayGrid);
    }
    let kernel = CurveKernel::new(spec1, spec2, &Tolerances::default())?;
    let baseline = params.baseline_amps() * kernel.i1();
    let coeff = 2.0 * gamma.value() * params.pair_product() * params.phase_combination().cos();
    Ok(taus.iter().map(|&t| baseline + coeff * kernel.overlap_sq(t)).collect())
}

/// Visibility of a coincidence curve: the relative excursion of the extremum
/// from the large-delay baseline, the baseline being estimated from the two
/// endpoints.
pub fn visibility(curve: &[f64]) -> Result<f64, CoincidenceError> {
    if curve.is_empty() {
        return Err(CoincidenceError::EmptyDelayGrid);
    }
    let baseline = 0.5 * (curve[0] + curve[curve.len() - 1]);
    if baseline <= 0.0 {
        return Err(CoincidenceError::InvalidParams("zero baseline".into()));
    }
    let mean = curve.iter().sum::<f64>() / curve.len() as f64;
    let extremum = curve
        .iter()
        .copied()
        .max_by(|a, b| (a - mean).abs().partial_cmp(&(b - mean).abs()).unwrap())
        .unwrap();
    Ok((baseline - extremum).abs() / baseline)
}

/// Visibility predicted for a beam-splitter-shaped submatrix of angle
/// `vartheta` at mode match `gamma`.
pub fn bs_visibility(gamma: f64, vartheta: f64) -> f64 {
    let (s, c) = vartheta.sin_cos();
    2.0 * gamma * c * c * s * s / (c.powi(4) + s.powi(4))
}

/// Submatrix parameters of the calibration beam splitter of angle `vartheta`
/// in the gauge of its physical 2x2 transformation.
pub fn bs_submatrix(vartheta: f64) -> SubmatrixParams {
    let (s, c) = vartheta.sin_cos();
    SubmatrixParams {
        amps: [c, s, s, c],
        phases: [0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2, 0.0],
    }
}

/// Convenience: simulated noise-free coincidence curve as a ports-tagged
/// [`CoincidenceCurve`] value.
pub fn curve_values(
    ports: crate::model::PortTuple,
    spec1: &Spectrum,
    spec2: &Spectrum,
    taus: &[f64],
    params: &SubmatrixParams,
    gamma: ModeMatch,
) -> Result<CoincidenceCurve, CoincidenceError> {
    let counts = coincidence_curve(spec1, spec2, taus, params, gamma)?;
    Ok(CoincidenceCurve { ports, tau: taus.to_vec(), counts })
}
