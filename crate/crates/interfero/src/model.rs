//! Domain types for interferometers, losses, spectra and coincidence data,
//! plus the equivalence-class canonical form.
//!
//! Photon counting at the ports cannot distinguish transformation matrices
//! that differ by diagonal phase factors on the inputs and outputs, so every
//! matrix is reported through the unique class representative with a real
//! positive first row and column. The representative is stored in factored
//! form `U = L A M` with `L = diag(sqrt(lambda))`, `M = diag(sqrt(mu))` and
//! `A_ij = alpha_ij exp(i theta_ij)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::SeedStream;

pub type CMatrix = DMatrix<Complex64>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("degenerate port: |U[{row},{col}]| < {tol:e}; relabel ports so the first row and column are free of zeros")]
    DegeneratePort { row: usize, col: usize, tol: f64 },
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
}

/// Numerical tolerances used by validation and canonicalization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Tolerances {
    /// Frobenius bound on `|U^H U - 1|` for a matrix to count as unitary.
    pub unitary: f64,
    /// Magnitudes below this are treated as exact zeros.
    pub zero: f64,
    /// Allowed deviation of the discrete L2 norm of a spectrum from one.
    pub norm: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { unitary: 1e-8, zero: 1e-12, norm: 1e-10 }
    }
}

/// Wrap an angle into the interval `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut y = x % two_pi;
    if y <= -PI {
        y += two_pi;
    } else if y > PI {
        y -= two_pi;
    }
    y
}

/// Frobenius norm of a complex matrix.
pub fn frobenius(u: &CMatrix) -> f64 {
    u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Class representative of an interferometer transformation, `U = L A M`.
///
/// Instances produced by [`canonicalize`] satisfy the real-bordered form
/// (`alpha` and `theta` have unit/zero first row and column and
/// `theta[(1,1)] >= 0`); hand-built instances may carry any non-negative
/// `alpha` grid, which is convenient for special cases such as the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RepJson", into = "RepJson")]
pub struct RepresentativeMatrix {
    pub m: usize,
    pub alpha: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RepJson {
    m: usize,
    alpha: Vec<Vec<f64>>,
    theta: Vec<Vec<f64>>,
    lambda: Vec<f64>,
    mu: Vec<f64>,
}

fn matrix_to_rows(mat: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..mat.nrows()).map(|i| (0..mat.ncols()).map(|j| mat[(i, j)]).collect()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], m: usize, what: &str) -> Result<DMatrix<f64>, ModelError> {
    if rows.len() != m || rows.iter().any(|r| r.len() != m) {
        return Err(ModelError::DimensionMismatch(format!("{what} must be {m}x{m}")));
    }
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

impl From<RepresentativeMatrix> for RepJson {
    fn from(rep: RepresentativeMatrix) -> Self {
        RepJson {
            m: rep.m,
            alpha: matrix_to_rows(&rep.alpha),
            theta: matrix_to_rows(&rep.theta),
            lambda: rep.lambda,
            mu: rep.mu,
        }
    }
}

impl TryFrom<RepJson> for RepresentativeMatrix {
    type Error = ModelError;

    fn try_from(j: RepJson) -> Result<Self, ModelError> {
        RepresentativeMatrix::new(
            j.m,
            rows_to_matrix(&j.alpha, j.m, "alpha")?,
            rows_to_matrix(&j.theta, j.m, "theta")?,
            j.lambda,
            j.mu,
        )
    }
}

impl RepresentativeMatrix {
    /// Validated constructor. Angles are wrapped into `(-pi, pi]`.
    pub fn new(
        m: usize,
        alpha: DMatrix<f64>,
        theta: DMatrix<f64>,
        lambda: Vec<f64>,
        mu: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if m == 0 {
            return Err(ModelError::InvalidValue("m must be positive".into()));
        }
        if alpha.nrows() != m || alpha.ncols() != m || theta.nrows() != m || theta.ncols() != m {
            return Err(ModelError::DimensionMismatch("alpha/theta must be m x m".into()));
        }
        if lambda.len() != m || mu.len() != m {
            return Err(ModelError::DimensionMismatch("lambda/mu must have length m".into()));
        }
        if alpha.iter().any(|&a| !a.is_finite() || a < 0.0) {
            return Err(ModelError::InvalidValue("alpha entries must be finite and >= 0".into()));
        }
        if lambda.iter().chain(mu.iter()).any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(ModelError::InvalidValue("lambda and mu entries must be positive".into()));
        }
        if (lambda[0] - 1.0).abs() > 1e-12 {
            return Err(ModelError::InvalidValue("lambda[0] must equal 1".into()));
        }
        let theta = theta.map(wrap_angle);
        Ok(RepresentativeMatrix { m, alpha, theta, lambda, mu })
    }

    /// Parameterization that assembles to the identity matrix.
    pub fn identity(m: usize) -> Self {
        RepresentativeMatrix {
            m,
            alpha: DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.0 }),
            theta: DMatrix::zeros(m, m),
            lambda: vec![1.0; m],
            mu: vec![1.0; m],
        }
    }

    /// Assemble the complex matrix `U_ij = sqrt(lambda_i) alpha_ij e^{i theta_ij} sqrt(mu_j)`.
    pub fn assemble(&self) -> CMatrix {
        DMatrix::from_fn(self.m, self.m, |i, j| {
            Complex64::from_polar(
                self.lambda[i].sqrt() * self.alpha[(i, j)] * self.mu[j].sqrt(),
                self.theta[(i, j)],
            )
        })
    }

    /// `|U^H U - 1|_F` of the assembled matrix.
    pub fn unitarity_error(&self) -> f64 {
        let u = self.assemble();
        frobenius(&(u.adjoint() * &u - CMatrix::identity(self.m, self.m)))
    }

    pub fn is_unitary(&self, tol: &Tolerances) -> bool {
        self.unitarity_error() < tol.unitary
    }

    /// Complex-conjugated parameterization (all arguments negated).
    pub fn conjugated(&self) -> Self {
        RepresentativeMatrix {
            m: self.m,
            alpha: self.alpha.clone(),
            theta: self.theta.map(|t| wrap_angle(-t)),
            lambda: self.lambda.clone(),
            mu: self.mu.clone(),
        }
    }
}

/// Port transmissions and dephasings dressing the representative matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossJson", into = "LossJson")]
pub struct LossModel {
    pub kappa: Vec<f64>,
    pub nu: Vec<f64>,
    pub phi: Vec<f64>,
    pub xi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LossJson {
    kappa: Vec<f64>,
    nu: Vec<f64>,
    phi: Vec<f64>,
    xi: Vec<f64>,
}

impl From<LossModel> for LossJson {
    fn from(l: LossModel) -> Self {
        LossJson { kappa: l.kappa, nu: l.nu, phi: l.phi, xi: l.xi }
    }
}

impl TryFrom<LossJson> for LossModel {
    type Error = ModelError;

    fn try_from(j: LossJson) -> Result<Self, ModelError> {
        LossModel::new(j.kappa, j.nu, j.phi, j.xi)
    }
}

impl LossModel {
    pub fn new(kappa: Vec<f64>, nu: Vec<f64>, phi: Vec<f64>, xi: Vec<f64>) -> Result<Self, ModelError> {
        let m = kappa.len();
        if nu.len() != m || phi.len() != m || xi.len() != m {
            return Err(ModelError::DimensionMismatch("loss vectors must share one length".into()));
        }
        if kappa.iter().chain(nu.iter()).any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(ModelError::InvalidValue("transmissions must lie in [0, 1]".into()));
        }
        Ok(LossModel { kappa, nu, phi, xi })
    }

    /// Unit transmissions, zero dephasing.
    pub fn lossless(m: usize) -> Self {
        LossModel { kappa: vec![1.0; m], nu: vec![1.0; m], phi: vec![0.0; m], xi: vec![0.0; m] }
    }

    pub fn modes(&self) -> usize {
        self.kappa.len()
    }
}

/// Mode-matching parameter of the two-photon source field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeMatch(f64);

impl ModeMatch {
    pub fn new(gamma: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(ModelError::InvalidValue(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        Ok(ModeMatch(gamma))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Dress a representative with losses and dephasings:
/// `U_ij = e^{i phi_i} sqrt(kappa_i) sqrt(lambda_i) alpha_ij e^{i theta_ij} sqrt(mu_j) sqrt(nu_j) e^{i xi_j}`.
pub fn assemble_lossy(rep: &RepresentativeMatrix, loss: &LossModel) -> Result<CMatrix, ModelError> {
    if loss.modes() != rep.m {
        return Err(ModelError::DimensionMismatch(format!(
            "loss model has {} modes, representative has {}",
            loss.modes(),
            rep.m
        )));
    }
    Ok(DMatrix::from_fn(rep.m, rep.m, |i, j| {
        let mag = loss.kappa[i].sqrt()
            * rep.lambda[i].sqrt()
            * rep.alpha[(i, j)]
            * rep.mu[j].sqrt()
            * loss.nu[j].sqrt();
        Complex64::from_polar(mag, loss.phi[i] + rep.theta[(i, j)] + loss.xi[j])
    }))
}

/// Representative matrix and dephasing of a beam splitter with reflectivity
/// `cos(vartheta)`, whose physical transformation is
/// `[[cos v, i sin v], [i sin v, cos v]]`.
pub fn beam_splitter(vartheta: f64) -> (RepresentativeMatrix, LossModel) {
    let (s, c) = vartheta.sin_cos();
    let rep = RepresentativeMatrix {
        m: 2,
        alpha: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, (c / s).powi(2)]),
        theta: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, PI]),
        lambda: vec![1.0, (s / c).powi(2)],
        mu: vec![c * c, s * s],
    };
    let loss = LossModel {
        kappa: vec![1.0, 1.0],
        nu: vec![1.0, 1.0],
        phi: vec![0.0, PI / 2.0],
        xi: vec![0.0, PI / 2.0],
    };
    (rep, loss)
}

/// Extract the class representative of `U` under `U ~ D1 U D2^H`.
///
/// Fails with [`ModelError::DegeneratePort`] when a first-row or first-column
/// entry vanishes, since the factored form divides by those magnitudes.
pub fn canonicalize_with(u: &CMatrix, tol: &Tolerances) -> Result<RepresentativeMatrix, ModelError> {
    let m = u.nrows();
    if m == 0 || u.ncols() != m {
        return Err(ModelError::DimensionMismatch("canonicalize needs a square matrix".into()));
    }
    for j in 0..m {
        if u[(0, j)].norm() < tol.zero {
            return Err(ModelError::DegeneratePort { row: 1, col: j + 1, tol: tol.zero });
        }
    }
    for i in 0..m {
        if u[(i, 0)].norm() < tol.zero {
            return Err(ModelError::DegeneratePort { row: i + 1, col: 1, tol: tol.zero });
        }
    }
    // Output phases cancel the first column, input phases the first row.
    let d1: Vec<f64> = (0..m).map(|i| u[(0, 0)].arg() - u[(i, 0)].arg()).collect();
    let d2: Vec<f64> = (0..m).map(|j| u[(0, j)].arg()).collect();
    let bordered = DMatrix::from_fn(m, m, |i, j| u[(i, j)] * Complex64::from_polar(1.0, d1[i] - d2[j]));

    let mu: Vec<f64> = (0..m).map(|j| bordered[(0, j)].re.powi(2)).collect();
    let lambda: Vec<f64> = (0..m).map(|i| (bordered[(i, 0)].re / bordered[(0, 0)].re).powi(2)).collect();
    let mut alpha = DMatrix::zeros(m, m);
    let mut theta = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let a = bordered[(i, j)] / Complex64::new(lambda[i].sqrt() * mu[j].sqrt(), 0.0);
            alpha[(i, j)] = a.norm();
            theta[(i, j)] = if i == 0 || j == 0 { 0.0 } else { a.arg() };
        }
    }
    // Conjugation convention: the (2,2) argument is reported non-negative.
    if m >= 2 && theta[(1, 1)] < 0.0 {
        theta = theta.map(|t| wrap_angle(-t));
    }
    RepresentativeMatrix::new(m, alpha, theta, lambda, mu)
}

pub fn canonicalize(u: &CMatrix) -> Result<RepresentativeMatrix, ModelError> {
    canonicalize_with(u, &Tolerances::default())
}

/// Haar-random unitary from the QR decomposition of a complex Gaussian
/// matrix, with the R diagonal phases folded into Q. Deterministic in `seed`.
pub fn random_haar_unitary(m: usize, seed: u64) -> Result<CMatrix, ModelError> {
    if m < 2 {
        return Err(ModelError::InvalidValue("mode count must be at least 2".into()));
    }
    let mut rng = SeedStream::new(seed).child("haar").rng();
    let g = DMatrix::from_fn(m, m, |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let qr = g.qr();
    let r = qr.r();
    let q = qr.q();
    // Multiply column k of Q by the phase of R_kk so the result is Haar.
    let phases: Vec<Complex64> =
        (0..m).map(|k| if r[(k, k)].norm() > 0.0 { r[(k, k)] / r[(k, k)].norm() } else { Complex64::new(1.0, 0.0) }).collect();
    Ok(DMatrix::from_fn(m, m, |i, j| q[(i, j)] * phases[j]))
}

/// Frobenius distance between equivalence classes: both matrices are brought
/// to canonical form and compared, minimizing over the complex-conjugation
/// ambiguity that identical-spectra measurements cannot resolve.
pub fn distance_to_class(u: &CMatrix, v: &CMatrix) -> Result<f64, ModelError> {
    if u.shape() != v.shape() {
        return Err(ModelError::DimensionMismatch("matrices must share dimensions".into()));
    }
    let cu = canonicalize(u)?.assemble();
    let cv = canonicalize(v)?;
    let direct = frobenius(&(&cu - cv.assemble()));
    let conjugated = frobenius(&(&cu - cv.conjugated().assemble()));
    Ok(direct.min(conjugated))
}

/// A sampled spectral amplitude on a strictly increasing frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub omega: Vec<f64>,
    pub amplitude: Vec<f64>,
}

impl Spectrum {
    pub fn new(omega: Vec<f64>, amplitude: Vec<f64>) -> Result<Self, ModelError> {
        if omega.len() < 2 {
            return Err(ModelError::InvalidSpectrum("need at least two grid points".into()));
        }
        if omega.len() != amplitude.len() {
            return Err(ModelError::InvalidSpectrum("omega and amplitude lengths differ".into()));
        }
        if omega.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ModelError::InvalidSpectrum("omega must be strictly increasing".into()));
        }
        if amplitude.iter().any(|&a| !a.is_finite() || a < 0.0) {
            return Err(ModelError::InvalidSpectrum("amplitudes must be finite and >= 0".into()));
        }
        Ok(Spectrum { omega, amplitude })
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// Trapezoid quadrature weights for the stored grid.
    pub fn quad_weights(&self) -> Vec<f64> {
        trapezoid_weights(&self.omega)
    }

    /// Discrete L2 norm squared, `sum_a w_a f(omega_a)^2`.
    pub fn norm_sq(&self) -> f64 {
        let w = self.quad_weights();
        self.amplitude.iter().zip(&w).map(|(f, w)| w * f * f).sum()
    }

    /// Rescale so the discrete L2 norm is one.
    pub fn normalize(&mut self) -> Result<(), ModelError> {
        let n = self.norm_sq();
        if n <= 0.0 || !n.is_finite() {
            return Err(ModelError::InvalidSpectrum("cannot normalize a zero spectrum".into()));
        }
        let scale = 1.0 / n.sqrt();
        for a in &mut self.amplitude {
            *a *= scale;
        }
        Ok(())
    }

    pub fn is_normalized(&self, tol: &Tolerances) -> bool {
        (self.norm_sq() - 1.0).abs() < tol.norm
    }

    /// Linear interpolation onto another grid; zero outside the support.
    pub fn resample_onto(&self, grid: &[f64]) -> Result<Spectrum, ModelError> {
        let mut amp = Vec::with_capacity(grid.len());
        for &x in grid {
            amp.push(self.interp(x));
        }
        Spectrum::new(grid.to_vec(), amp)
    }

    fn interp(&self, x: f64) -> f64 {
        let om = &self.omega;
        if x < om[0] || x > om[om.len() - 1] {
            return 0.0;
        }
        let idx = match om.binary_search_by(|o| o.partial_cmp(&x).unwrap()) {
            Ok(i) => return self.amplitude[i],
            Err(i) => i,
        };
        let (x0, x1) = (om[idx - 1], om[idx]);
        let t = (x - x0) / (x1 - x0);
        self.amplitude[idx - 1] * (1.0 - t) + self.amplitude[idx] * t
    }

    /// Normalized Gaussian line: the intensity `f^2` is a normal density with
    /// standard deviation `width`, so the spectral interference kernel decays
    /// as `exp(-width^2 tau^2)`.
    pub fn gaussian(center: f64, width: f64, span_sigmas: f64, points: usize) -> Result<Spectrum, ModelError> {
        let grid = linspace(center - span_sigmas * width, center + span_sigmas * width, points);
        let amp = grid.iter().map(|&w| (-(w - center).powi(2) / (4.0 * width * width)).exp()).collect();
        let mut s = Spectrum::new(grid, amp)?;
        s.normalize()?;
        Ok(s)
    }

    /// Asymmetric two-component line on the given grid; a stand-in for
    /// measured source spectra that are visibly non-Gaussian.
    pub fn two_peak(
        grid: Vec<f64>,
        centers: (f64, f64),
        widths: (f64, f64),
        heights: (f64, f64),
    ) -> Result<Spectrum, ModelError> {
        let amp = grid
            .iter()
            .map(|&w| {
                heights.0 * (-(w - centers.0).powi(2) / (4.0 * widths.0 * widths.0)).exp()
                    + heights.1 * (-(w - centers.1).powi(2) / (4.0 * widths.1 * widths.1)).exp()
            })
            .collect();
        let mut s = Spectrum::new(grid, amp)?;
        s.normalize()?;
        Ok(s)
    }
}

/// Evenly spaced grid including both endpoints.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "linspace needs at least two points");
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(|i| a + step * i as f64).collect()
}

/// Trapezoid-rule weights for an arbitrary strictly increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = 0.5 * (grid[i + 1] - grid[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

/// Ports of a two-photon coincidence measurement, 1-based as in the data
/// files: detectors at outputs `(out1, out2)`, photons into `(in1, in2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PortTuple {
    pub out1: usize,
    pub out2: usize,
    pub in1: usize,
    pub in2: usize,
}

impl PortTuple {
    pub fn new(out1: usize, out2: usize, in1: usize, in2: usize) -> Result<Self, ModelError> {
        if out1 == 0 || out2 == 0 || in1 == 0 || in2 == 0 {
            return Err(ModelError::InvalidValue("ports are 1-based".into()));
        }
        if out1 == out2 || in1 == in2 {
            return Err(ModelError::InvalidValue("coincidence ports must be distinct".into()));
        }
        Ok(PortTuple { out1, out2, in1, in2 })
    }

    /// Unordered output/input port pairs, smaller index first.
    pub fn unordered(&self) -> ((usize, usize), (usize, usize)) {
        (
            (self.out1.min(self.out2), self.out1.max(self.out2)),
            (self.in1.min(self.in2), self.in1.max(self.in2)),
        )
    }
}

impl std::fmt::Display for PortTuple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.out1, self.out2, self.in1, self.in2)
    }
}

/// Measured or simulated coincidence counts over a delay grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceCurve {
    pub ports: PortTuple,
    pub tau: Vec<f64>,
    pub counts: Vec<f64>,
}

impl CoincidenceCurve {
    pub fn new(ports: PortTuple, tau: Vec<f64>, counts: Vec<f64>) -> Result<Self, ModelError> {
        if tau.is_empty() || tau.len() != counts.len() {
            return Err(ModelError::InvalidCurve("tau and counts must be non-empty and equal length".into()));
        }
        if tau.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ModelError::InvalidCurve("tau must be strictly increasing".into()));
        }
        if counts.iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(ModelError::InvalidCurve("counts must be finite and >= 0".into()));
        }
        Ok(CoincidenceCurve { ports, tau, counts })
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

/// Single-photon detection counts `N[(i, j, b)]` for output `i`, input `j`,
/// repetition `b` (all 0-based internally; the CSV format is 1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct SinglePhotonCounts {
    pub m: usize,
    pub reps: usize,
    counts: Vec<u64>,
}

impl SinglePhotonCounts {
    pub fn zeros(m: usize, reps: usize) -> Result<Self, ModelError> {
        if reps < 2 {
            return Err(ModelError::InvalidValue("repetition count must be at least 2".into()));
        }
        Ok(SinglePhotonCounts { m, reps, counts: vec![0; m * m * reps] })
    }

    fn idx(&self, i: usize, j: usize, b: usize) -> usize {
        debug_assert!(i < self.m && j < self.m && b < self.reps);
        (i * self.m + j) * self.reps + b
    }

    pub fn get(&self, i: usize, j: usize, b: usize) -> u64 {
        self.counts[self.idx(i, j, b)]
    }

    pub fn set(&mut self, i: usize, j: usize, b: usize, value: u64) {
        let k = self.idx(i, j, b);
        self.counts[k] = value;
    }

    pub fn add(&mut self, i: usize, j: usize, b: usize, value: u64) {
        let k = self.idx(i, j, b);
        self.counts[k] += value;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}
