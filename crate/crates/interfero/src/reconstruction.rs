//! Assembly of the most-likely unitary from estimated amplitudes and
//! arguments, and error bars via residual bootstrap.
//!
//! The estimated grid `A_ij = alpha_ij exp(i theta_ij)` determines the
//! diagonal factors through two linear systems: `A mu = e1` and
//! `A^H (1, lambda_2, ..., lambda_m)^T = e1 / mu_1`. The assembled
//! `U_ij = sqrt(lambda_i) A_ij sqrt(mu_j)` is generally not unitary under
//! noise, so it is projected onto the closest unitary in Frobenius distance,
//! `W = (U U^H)^{-1/2} U`. Bootstrap rounds resample single-photon
//! repetitions and normalized fit residuals, push the simulated data through
//! the full pipeline again, and report per-entry standard deviations.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::{
    calibrate_gamma, estimate_amplitudes, estimate_arguments, AmplitudeEstimate, ArchivedFit,
    ArgumentEstimate, CurveSource, EstimationError, EstimationWarning, FitPurpose, MapSource,
    PipelineConfig, Relabeling, ReplayHints, SignSource,
};
use crate::fitting::{normalized_residuals, FitDiagnostics, FitError};
use crate::model::{
    canonicalize, frobenius, CMatrix, CoincidenceCurve, ModeMatch, ModelError, PortTuple,
    RepresentativeMatrix, SinglePhotonCounts, Spectrum,
};
use crate::seeds::SeedStream;

#[derive(Debug, Error)]
pub enum ReconstructionError {
    #[error("linear system is singular (condition number {condition:.3e})")]
    SingularSystem { condition: f64 },
    #[error("matrix is rank deficient; no unitary polar factor")]
    RankDeficient,
    #[error("bootstrap unstable: {dropped} of {total} rounds failed")]
    BootstrapUnstable { dropped: usize, total: usize },
    #[error("bootstrap needs at least 50 rounds, got {0}")]
    TooFewRounds(usize),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A clamped non-physical diagonal entry (negative solution of the linear
/// system under noisy input).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampedDiagonal {
    /// "lambda" or "mu" side, entry index (1-based).
    pub output_side: bool,
    pub index: usize,
    pub solved_value: f64,
}

/// Solution of the two diagonal systems with stability diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagonalSolution {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub condition: f64,
    /// Residual norm of the overdetermined lambda system; nonzero signals
    /// inconsistent amplitude/argument estimates.
    pub lsq_residual: f64,
    pub max_imaginary: f64,
    pub clamped: Vec<ClampedDiagonal>,
}

const DIAG_FLOOR: f64 = 1e-8;
const CONDITION_CAP: f64 = 1e12;

/// Solve for the diagonal factors of `U = L A M` given the estimated inner
/// grid. Negative solutions are clamped to a small positive floor and
/// flagged rather than aborting the pipeline.
pub fn solve_diagonals(a_hat: &CMatrix) -> Result<DiagonalSolution, ReconstructionError> {
    let m = a_hat.nrows();
    assert_eq!(m, a_hat.ncols(), "square matrix required");
    let svd = a_hat.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !condition.is_finite() || condition > CONDITION_CAP {
        return Err(ReconstructionError::SingularSystem { condition });
    }

    let mut e1 = DVector::from_element(m, Complex64::new(0.0, 0.0));
    e1[0] = Complex64::new(1.0, 0.0);
    let mu_c = a_hat
        .clone()
        .lu()
        .solve(&e1)
        .ok_or(ReconstructionError::SingularSystem { condition })?;

    let mut max_imag = mu_c.iter().map(|z| z.im.abs()).fold(0.0f64, f64::max);
    let mut clamped = Vec::new();
    let mut mu = Vec::with_capacity(m);
    for (k, z) in mu_c.iter().enumerate() {
        let v = z.re;
        if v <= 0.0 {
            clamped.push(ClampedDiagonal { output_side: false, index: k + 1, solved_value: v });
            mu.push(DIAG_FLOOR);
        } else {
            mu.push(v);
        }
    }

    // lambda system: A^H (1, lambda_2..lambda_m)^T = e1 / mu_1, with the
    // known first component moved to the right-hand side.
    let adj = a_hat.adjoint();
    let rhs = e1.map(|z| z / Complex64::new(mu[0], 0.0)) - adj.column(0).into_owned();
    let lambda_sol = if m > 1 {
        let reduced = adj.columns(1, m - 1).into_owned();
        let svd = reduced.clone().svd(true, true);
        let sol = svd
            .solve(&rhs, 1e-14)
            .map_err(|_| ReconstructionError::SingularSystem { condition })?;
        let residual = &reduced * &sol - &rhs;
        (sol, frobenius(&DMatrix::from_column_slice(m, 1, residual.as_slice())))
    } else {
        (DVector::from_element(0, Complex64::new(0.0, 0.0)), 0.0)
    };

    let mut lambda = vec![1.0];
    for (k, z) in lambda_sol.0.iter().enumerate() {
        max_imag = max_imag.max(z.im.abs());
        let v = z.re;
        if v <= 0.0 {
            clamped.push(ClampedDiagonal { output_side: true, index: k + 2, solved_value: v });
            lambda.push(DIAG_FLOOR);
        } else {
            lambda.push(v);
        }
    }

    Ok(DiagonalSolution {
        lambda,
        mu,
        condition,
        lsq_residual: lambda_sol.1,
        max_imaginary: max_imag,
        clamped,
    })
}

/// Assemble `U_ij = sqrt(lambda_i) A_ij sqrt(mu_j)`.
pub fn assemble_scaled(a_hat: &CMatrix, diag: &DiagonalSolution) -> CMatrix {
    let m = a_hat.nrows();
    DMatrix::from_fn(m, m, |i, j| {
        a_hat[(i, j)] * Complex64::new(diag.lambda[i].sqrt() * diag.mu[j].sqrt(), 0.0)
    })
}

/// Closest unitary in Frobenius distance: `W = (U U^H)^{-1/2} U`, computed
/// through the eigendecomposition of the positive factor.
pub fn nearest_unitary(u_tilde: &CMatrix) -> Result<CMatrix, ReconstructionError> {
    let m = u_tilde.nrows();
    let h = u_tilde * u_tilde.adjoint();
    let eig = nalgebra::SymmetricEigen::new(h);
    let max_ev = eig.eigenvalues.max();
    if !(max_ev > 0.0) {
        return Err(ReconstructionError::RankDeficient);
    }
    for ev in eig.eigenvalues.iter() {
        if *ev <= max_ev * 1e-24 {
            return Err(ReconstructionError::RankDeficient);
        }
    }
    let q = &eig.eigenvectors;
    let inv_sqrt = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            Complex64::new(1.0 / eig.eigenvalues[i].sqrt(), 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    Ok(q * inv_sqrt * q.adjoint() * u_tilde)
}

/// Everything a characterization run produces, kept around so the bootstrap
/// can replay the pipeline against resampled data.
#[derive(Debug, Clone)]
pub struct CharacterizationRun {
    pub amps: AmplitudeEstimate,
    pub gamma: ModeMatch,
    pub calibration_fit: Option<ArchivedFit>,
    pub theta_cal: f64,
    pub args: ArgumentEstimate,
    pub diagonals: DiagonalSolution,
    pub u_tilde: CMatrix,
    /// Canonical unitary representative of the reconstruction.
    pub w: CMatrix,
    pub w_rep: RepresentativeMatrix,
}

/// Inputs of one characterization: measured data plus instrument knowledge.
pub struct CharacterizationData<'a> {
    pub singles: &'a SinglePhotonCounts,
    pub calibration: &'a CoincidenceCurve,
    /// Calibration beam-splitter angle (estimated from its own single-photon
    /// counts upstream).
    pub theta_cal: f64,
    pub spectra: &'a [Spectrum],
    pub source: &'a dyn CurveSource,
}

fn complex_grid(amps: &AmplitudeEstimate, args: &ArgumentEstimate) -> CMatrix {
    let m = amps.m;
    DMatrix::from_fn(m, m, |i, j| {
        Complex64::from_polar(amps.alpha(i, j), args.theta_hat[(i, j)])
    })
}

fn run_pipeline(
    data: &CharacterizationData<'_>,
    config: &PipelineConfig,
    hints: &ReplayHints,
) -> Result<CharacterizationRun, ReconstructionError> {
    let (gamma, calibration_fit) = match config.force_gamma {
        Some(g) => (
            ModeMatch::new(g).map_err(|e| {
                ReconstructionError::Estimation(EstimationError::Invalid(e.to_string()))
            })?,
            None,
        ),
        None => {
            let warm = hints
                .warm_starts
                .get(&PortTuple::new(1, 2, 1, 2).expect("calibration ports"))
                .copied();
            let (gamma, result) = calibrate_gamma(
                data.calibration,
                &data.spectra[0],
                &data.spectra[1],
                data.theta_cal,
                config,
                warm,
            )?;
            let archived = ArchivedFit {
                ports: PortTuple::new(1, 2, 1, 2).expect("calibration ports"),
                purpose: FitPurpose::Calibration,
                curve: data.calibration.clone(),
                result,
                amps: [0.0; 4],
            };
            (gamma, Some(archived))
        }
    };

    let amps = estimate_amplitudes(data.singles)?;
    let args = estimate_arguments(data.source, &amps, gamma, data.spectra, config, hints)?;
    let a_hat = complex_grid(&amps, &args);
    let diagonals = solve_diagonals(&a_hat)?;
    let u_tilde = assemble_scaled(&a_hat, &diagonals);
    let w_raw = nearest_unitary(&u_tilde)?;
    let w_rep = canonicalize(&w_raw)?;
    let w = w_rep.assemble();
    Ok(CharacterizationRun {
        amps,
        gamma,
        calibration_fit,
        theta_cal: data.theta_cal,
        args,
        diagonals,
        u_tilde,
        w,
        w_rep,
    })
}

/// Full characterization: calibration, amplitude and argument estimation,
/// diagonal solves and the unitary projection.
pub fn characterize(
    data: &CharacterizationData<'_>,
    config: &PipelineConfig,
) -> Result<CharacterizationRun, ReconstructionError> {
    run_pipeline(data, config, &ReplayHints::default())
}

/// Resample `values.len()` entries with replacement.
fn resample<R: Rng>(rng: &mut R, values: &[f64]) -> Vec<f64> {
    (0..values.len()).map(|_| values[rng.random_range(0..values.len())]).collect()
}

/// Normalized residuals of an archived fit. A curve whose residuals are all
/// at numerical-convergence scale is a noise-free point mass; its residuals
/// are zeroed exactly so resampling reproduces the fit bit for bit.
fn replay_residuals(fit: &ArchivedFit) -> Result<Vec<f64>, ReconstructionError> {
    let nr = normalized_residuals(&fit.result)?;
    let max = nr.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if max < 1e-5 {
        return Ok(vec![0.0; nr.values.len()]);
    }
    Ok(nr.values)
}

fn resampled_curve<R: Rng>(
    rng: &mut R,
    fit: &ArchivedFit,
    residuals: &[f64],
) -> Result<CoincidenceCurve, ModelError> {
    let shuffled = resample(rng, residuals);
    let counts: Vec<f64> = fit
        .result
        .fitted
        .iter()
        .zip(&shuffled)
        .map(|(&f, &r)| (f * (1.0 + r)).max(0.0))
        .collect();
    CoincidenceCurve::new(fit.ports, fit.curve.tau.clone(), counts)
}

/// Amplitude grid from repetition indices drawn with replacement,
/// independently for the reference-port and probe-port runs of every entry.
fn resample_amplitudes<R: Rng>(rng: &mut R, counts: &SinglePhotonCounts) -> AmplitudeEstimate {
    let m = counts.m;
    let reps = counts.reps;
    let mut alpha_hat = vec![vec![1.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            if i == 0 || j == 0 {
                continue;
            }
            let b1: Vec<usize> = (0..reps).map(|_| rng.random_range(0..reps)).collect();
            let bj: Vec<usize> = (0..reps).map(|_| rng.random_range(0..reps)).collect();
            let mut sum = 0.0;
            for &r1 in &b1 {
                let n11 = counts.get(0, 0, r1) as f64;
                let ni1 = counts.get(i, 0, r1) as f64;
                for &rj in &bj {
                    let nij = counts.get(i, j, rj) as f64;
                    let n1j = counts.get(0, j, rj) as f64;
                    sum += (n11 * nij / (n1j * ni1)).sqrt();
                }
            }
            alpha_hat[i][j] = sum / (reps * reps) as f64;
        }
    }
    AmplitudeEstimate { m, alpha_hat, sigma_alpha: vec![vec![0.0; m]; m] }
}

/// Standard deviation with an exact-zero shortcut for point masses.
fn spread(values: &[f64]) -> f64 {
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if min == max {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Error-bar convergence probe: spreads recomputed over the first n rounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapCheckpoint {
    pub rounds: usize,
    /// Largest relative change of any entry spread versus the previous
    /// checkpoint (first checkpoint reports zero).
    pub max_relative_change: f64,
    pub mean_sigma_re: f64,
}

/// Bootstrap output: per-entry spreads plus kept samples for archiving.
#[derive(Debug, Clone)]
pub struct BootstrapOutcome {
    pub sigma_re: Vec<Vec<f64>>,
    pub sigma_im: Vec<Vec<f64>>,
    pub gamma_sigma: f64,
    pub rounds_requested: usize,
    pub rounds_kept: usize,
    pub dropped: Vec<(usize, String)>,
    /// Canonical, conjugation-aligned unitary per kept round.
    pub samples: Vec<CMatrix>,
    pub checkpoints: Vec<BootstrapCheckpoint>,
}

fn one_round(
    round: usize,
    primary: &CharacterizationRun,
    singles: &SinglePhotonCounts,
    spectra: &[Spectrum],
    config: &PipelineConfig,
    residual_cache: &[(usize, Vec<f64>)],
    seed: SeedStream,
) -> Result<(CMatrix, f64), ReconstructionError> {
    let mut rng = seed.index(round as u64).rng();

    let amps = resample_amplitudes(&mut rng, singles);

    // resampled curves for every archived fit, keyed by measurement ports
    let mut curves = std::collections::BTreeMap::new();
    let mut warm = std::collections::BTreeMap::new();
    for &(fit_idx, ref residuals) in residual_cache {
        let fit = &primary.args.fits[fit_idx];
        let curve = resampled_curve(&mut rng, fit, residuals)?;
        curves.insert(fit.ports, curve);
        warm.insert(fit.ports, fit.result.params());
    }

    let gamma = match (&primary.calibration_fit, config.force_gamma) {
        (_, Some(g)) => ModeMatch::new(g)
            .map_err(|e| ReconstructionError::Estimation(EstimationError::Invalid(e.to_string())))?,
        (Some(cal), None) => {
            let residuals = replay_residuals(cal)?;
            let cal_curve = resampled_curve(&mut rng, cal, &residuals)?;
            let (gamma, _) = calibrate_gamma(
                &cal_curve,
                &spectra[0],
                &spectra[1],
                primary.theta_cal,
                config,
                Some(cal.result.params()),
            )?;
            gamma
        }
        (None, None) => primary.gamma,
    };

    let source = MapSource { curves: &curves };
    let hints = ReplayHints { relabeling: Some(primary.args.relabeling), warm_starts: warm };
    let args = estimate_arguments(&source, &amps, gamma, spectra, config, &hints)?;
    let a_hat = complex_grid(&amps, &args);
    let diagonals = solve_diagonals(&a_hat)?;
    let w_raw = nearest_unitary(&assemble_scaled(&a_hat, &diagonals))?;
    let rep = canonicalize(&w_raw)?;

    // align the sample's conjugation gauge against the primary
    let direct = rep.assemble();
    let conj = rep.conjugated().assemble();
    let w = if frobenius(&(&direct - &primary.w)) <= frobenius(&(&conj - &primary.w)) {
        direct
    } else {
        conj
    };
    Ok((w, gamma.value()))
}

/// Residual bootstrap over the archived primary run.
pub fn bootstrap(
    primary: &CharacterizationRun,
    singles: &SinglePhotonCounts,
    spectra: &[Spectrum],
    config: &PipelineConfig,
    rounds: usize,
    seed: u64,
) -> Result<BootstrapOutcome, ReconstructionError> {
    if rounds < 50 {
        return Err(ReconstructionError::TooFewRounds(rounds));
    }
    let m = primary.amps.m;
    // precompute floored normalized residuals once per archived fit
    let residual_cache: Vec<(usize, Vec<f64>)> = primary
        .args
        .fits
        .iter()
        .enumerate()
        .map(|(k, f)| replay_residuals(f).map(|r| (k, r)))
        .collect::<Result<_, _>>()?;

    let stream = SeedStream::new(seed).child("bootstrap");
    let results: Vec<Result<(CMatrix, f64), ReconstructionError>> = (0..rounds)
        .into_par_iter()
        .map(|r| one_round(r, primary, singles, spectra, config, &residual_cache, stream))
        .collect();

    let mut samples = Vec::new();
    let mut gammas = Vec::new();
    let mut dropped = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok((w, g)) => {
                samples.push(w);
                gammas.push(g);
            }
            Err(e) => dropped.push((r, e.to_string())),
        }
    }
    if dropped.len() * 10 > rounds {
        return Err(ReconstructionError::BootstrapUnstable { dropped: dropped.len(), total: rounds });
    }

    let spread_grids = |ws: &[CMatrix]| {
        let mut sre = vec![vec![0.0; m]; m];
        let mut sim = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                let re: Vec<f64> = ws.iter().map(|w| w[(i, j)].re).collect();
                let im: Vec<f64> = ws.iter().map(|w| w[(i, j)].im).collect();
                sre[i][j] = spread(&re);
                sim[i][j] = spread(&im);
            }
        }
        (sre, sim)
    };

    let mut checkpoints = Vec::new();
    let mut previous: Option<Vec<Vec<f64>>> = None;
    for frac in [8usize, 4, 2, 1] {
        let n = (samples.len() / frac).max(2);
        let (sre, _) = spread_grids(&samples[..n]);
        let drift = previous
            .as_ref()
            .map(|prev| {
                let mut worst = 0.0f64;
                for i in 0..m {
                    for j in 0..m {
                        let denom = sre[i][j].max(1e-300);
                        worst = worst.max((sre[i][j] - prev[i][j]).abs() / denom);
                    }
                }
                worst
            })
            .unwrap_or(0.0);
        let mean = sre.iter().flatten().sum::<f64>() / (m * m) as f64;
        checkpoints.push(BootstrapCheckpoint {
            rounds: n,
            max_relative_change: drift,
            mean_sigma_re: mean,
        });
        previous = Some(sre);
        if frac == 1 {
            break;
        }
    }

    let (sigma_re, sigma_im) = spread_grids(&samples);
    Ok(BootstrapOutcome {
        sigma_re,
        sigma_im,
        gamma_sigma: spread(&gammas),
        rounds_requested: rounds,
        rounds_kept: samples.len(),
        dropped,
        samples,
        checkpoints,
    })
}

/// Diagnostics block of the serialized report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDiagnostics {
    pub theta_cal: f64,
    pub unitarity_error: f64,
    pub condition: f64,
    pub lsq_residual: f64,
    pub max_imaginary: f64,
    pub clamped_diagonals: Vec<ClampedDiagonal>,
    pub alpha_hat: Vec<Vec<f64>>,
    pub sigma_alpha: Vec<Vec<f64>>,
    pub theta_hat: Vec<Vec<f64>>,
    pub stability_margin: Vec<Vec<Option<f64>>>,
    pub relabeling: Relabeling,
    pub sign_source: Vec<Vec<SignSource>>,
    pub warnings: Vec<EstimationWarning>,
    pub calibration_fit: Option<FitDiagnostics>,
    pub fits: Vec<CurveFitRecord>,
}

/// One per-curve fit record in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveFitRecord {
    pub ports: PortTuple,
    pub purpose: FitPurpose,
    #[serde(flatten)]
    pub fit: FitDiagnostics,
}

/// The serialized reconstruction report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub m: usize,
    pub w_re: Vec<Vec<f64>>,
    pub w_im: Vec<Vec<f64>>,
    pub gamma_hat: f64,
    pub gamma_sigma: Option<f64>,
    pub sigma_re: Option<Vec<Vec<f64>>>,
    pub sigma_im: Option<Vec<Vec<f64>>>,
    pub bootstrap_samples: Option<usize>,
    pub bootstrap_dropped: Option<usize>,
    pub diagnostics: ReportDiagnostics,
}

fn grid(mat: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..mat.nrows()).map(|i| (0..mat.ncols()).map(|j| mat[(i, j)]).collect()).collect()
}

impl CharacterizationRun {
    pub fn report(&self) -> ReconstructionReport {
        let m = self.amps.m;
        let w_re = (0..m).map(|i| (0..m).map(|j| self.w[(i, j)].re).collect()).collect();
        let w_im = (0..m).map(|i| (0..m).map(|j| self.w[(i, j)].im).collect()).collect();
        let unitarity_error = frobenius(
            &(self.w.adjoint() * &self.w - CMatrix::identity(m, m)),
        );
        ReconstructionReport {
            m,
            w_re,
            w_im,
            gamma_hat: self.gamma.value(),
            gamma_sigma: None,
            sigma_re: None,
            sigma_im: None,
            bootstrap_samples: None,
            bootstrap_dropped: None,
            diagnostics: ReportDiagnostics {
                theta_cal: self.theta_cal,
                unitarity_error,
                condition: self.diagonals.condition,
                lsq_residual: self.diagonals.lsq_residual,
                max_imaginary: self.diagonals.max_imaginary,
                clamped_diagonals: self.diagonals.clamped.clone(),
                alpha_hat: self.amps.alpha_hat.clone(),
                sigma_alpha: self.amps.sigma_alpha.clone(),
                theta_hat: grid(&self.args.theta_hat),
                stability_margin: self.args.stability_margin.clone(),
                relabeling: self.args.relabeling,
                sign_source: self.args.sign_source.clone(),
                warnings: self.args.warnings.clone(),
                calibration_fit: self.calibration_fit.as_ref().map(|f| f.result.diagnostics()),
                fits: self
                    .args
                    .fits
                    .iter()
                    .map(|f| CurveFitRecord {
                        ports: f.ports,
                        purpose: f.purpose,
                        fit: f.result.diagnostics(),
                    })
                    .collect(),
            },
        }
    }
}

impl ReconstructionReport {
    pub fn w_matrix(&self) -> CMatrix {
        DMatrix::from_fn(self.m, self.m, |i, j| Complex64::new(self.w_re[i][j], self.w_im[i][j]))
    }

    pub fn attach_bootstrap(&mut self, outcome: &BootstrapOutcome) {
        self.gamma_sigma = Some(outcome.gamma_sigma);
        self.sigma_re = Some(outcome.sigma_re.clone());
        self.sigma_im = Some(outcome.sigma_im.clone());
        self.bootstrap_samples = Some(outcome.rounds_kept);
        self.bootstrap_dropped = Some(outcome.dropped.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{distance_to_class, random_haar_unitary, LossModel, Tolerances};
    use crate::simulator::{
        simulate_calibration, simulate_calibration_singles, simulate_single_counts,
        ExperimentPlan, SimulatorSource,
    };
    use approx::assert_abs_diff_eq;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn haar_rep(m: usize, seed: u64) -> RepresentativeMatrix {
        canonicalize(&random_haar_unitary(m, seed).unwrap()).unwrap()
    }

    #[test]
    fn two_mode_diagonal_solution_is_unitary() {
        // A = [[1, 1], [1, -1]]: mu = (1/2, 1/2), lambda = (1, 1) and the
        // scaled matrix is the real balanced splitter. Oracle: unitarity of
        // the assembled matrix.
        let a = DMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(1.0, 0.0),
                Complex64::new(1.0, 0.0),
                Complex64::new(1.0, 0.0),
                Complex64::new(-1.0, 0.0),
            ],
        );
        let sol = solve_diagonals(&a).unwrap();
        assert_abs_diff_eq!(sol.mu[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.mu[1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.lambda[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.lambda[1], 1.0, epsilon = 1e-12);
        let u = assemble_scaled(&a, &sol);
        assert!(frobenius(&(u.adjoint() * &u - CMatrix::identity(2, 2))) < 1e-12);
        assert!(sol.clamped.is_empty());
    }

    #[test]
    fn diagonals_recover_canonical_decomposition() {
        for seed in [3u64, 14, 15] {
            let rep = haar_rep(4, seed);
            let a = DMatrix::from_fn(4, 4, |i, j| {
                Complex64::from_polar(rep.alpha[(i, j)], rep.theta[(i, j)])
            });
            let sol = solve_diagonals(&a).unwrap();
            for k in 0..4 {
                assert_abs_diff_eq!(sol.lambda[k], rep.lambda[k], epsilon = 1e-10);
                assert_abs_diff_eq!(sol.mu[k], rep.mu[k], epsilon = 1e-10);
            }
            assert!(sol.lsq_residual < 1e-10);
        }
    }

    #[test]
    fn corrupted_entry_is_never_silent() {
        // Scaling a whole row is pure gauge (absorbed into lambda), so the
        // probe corrupts a single entry, making the two systems inconsistent.
        let rep = haar_rep(3, 8);
        let mut alpha = rep.alpha.clone();
        alpha[(1, 1)] *= 4.0;
        let a = DMatrix::from_fn(3, 3, |i, j| {
            Complex64::from_polar(alpha[(i, j)], rep.theta[(i, j)])
        });
        let sol = solve_diagonals(&a).unwrap();
        let flagged = !sol.clamped.is_empty() || sol.lsq_residual > 1e-3 || sol.max_imaginary > 1e-3;
        assert!(
            flagged,
            "inconsistent input must surface: clamped {:?}, lsq {}, imag {}",
            sol.clamped, sol.lsq_residual, sol.max_imaginary
        );
    }

    #[test]
    fn polar_projection_basics() {
        let u = random_haar_unitary(4, 5).unwrap();
        let w = nearest_unitary(&u).unwrap();
        assert!(frobenius(&(&w - &u)) < 1e-12);

        let two_id = CMatrix::identity(3, 3).map(|z| z * Complex64::new(2.0, 0.0));
        let w = nearest_unitary(&two_id).unwrap();
        assert!(frobenius(&(w - CMatrix::identity(3, 3))) < 1e-12);

        assert!(matches!(
            nearest_unitary(&CMatrix::zeros(2, 2)),
            Err(ReconstructionError::RankDeficient)
        ));
    }

    #[test]
    fn polar_projection_beats_sampled_unitaries() {
        let mut rng = SeedStream::new(31).rng();
        for trial in 0..10u64 {
            let u = random_haar_unitary(3, 600 + trial).unwrap();
            let g = DMatrix::from_fn(3, 3, |_, _| {
                Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
            });
            let tilde = &u + g.map(|z| z * 0.05);
            let w = nearest_unitary(&tilde).unwrap();
            let d_w = frobenius(&(&w - &tilde));
            for k in 0..200u64 {
                let q = random_haar_unitary(3, 10_000 + 100 * trial + k).unwrap();
                assert!(d_w <= frobenius(&(&q - &tilde)) + 1e-12);
            }
        }
    }

    #[test]
    fn polar_eigen_route_matches_svd_route() {
        // independent oracle: polar factor from the singular decomposition
        let mut rng = SeedStream::new(77).rng();
        for _ in 0..20 {
            let a = DMatrix::from_fn(4, 4, |_, _| {
                Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
            });
            let w = nearest_unitary(&a).unwrap();
            let svd = a.clone().svd(true, true);
            let polar = svd.u.as_ref().unwrap() * svd.v_t.as_ref().unwrap();
            assert!(frobenius(&(w - polar)) < 1e-10);
        }
    }

    fn noiseless_plan(m: usize, seed: u64) -> ExperimentPlan {
        let rep = haar_rep(m, seed);
        let mut plan = ExperimentPlan::new(rep, LossModel::lossless(m), seed).unwrap();
        plan.poisson_noise = false;
        plan.photons_per_run = 1e12;
        plan
    }

    fn characterize_plan(
        plan: &ExperimentPlan,
        config: &PipelineConfig,
    ) -> Result<CharacterizationRun, ReconstructionError> {
        let singles = simulate_single_counts(plan).unwrap();
        let cal_singles = simulate_calibration_singles(plan).unwrap();
        let calibration = simulate_calibration(plan).unwrap();
        let theta_cal =
            crate::estimation::estimate_bs_angle(&estimate_amplitudes(&cal_singles)?)?;
        let source = SimulatorSource { plan };
        characterize(
            &CharacterizationData {
                singles: &singles,
                calibration: &calibration,
                theta_cal,
                spectra: &plan.spectra,
                source: &source,
            },
            config,
        )
    }

    #[test]
    fn noiseless_closed_loop_recovers_truth() {
        for (m, seed) in [(3usize, 101u64), (4, 202)] {
            let plan = noiseless_plan(m, seed);
            let run = characterize_plan(&plan, &PipelineConfig::default()).unwrap();
            let truth = plan.rep.assemble();
            let d = distance_to_class(&run.w, &truth).unwrap();
            assert!(d < 1e-5, "m={m}: distance {d}");
            assert!(run.w_rep.is_unitary(&Tolerances::default()));
        }
    }

    #[test]
    fn noiseless_bootstrap_gives_exactly_zero_bars() {
        let plan = noiseless_plan(3, 404);
        let config = PipelineConfig::default();
        let run = characterize_plan(&plan, &config).unwrap();
        let singles = simulate_single_counts(&plan).unwrap();
        let out = bootstrap(&run, &singles, &plan.spectra, &config, 60, 11).unwrap();
        assert_eq!(out.rounds_kept, 60);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(out.sigma_re[i][j], 0.0, "sigma_re[{i}][{j}]");
                assert_eq!(out.sigma_im[i][j], 0.0, "sigma_im[{i}][{j}]");
            }
        }
        assert_eq!(out.gamma_sigma, 0.0);
    }

    #[test]
    fn noisy_bootstrap_bars_are_positive_and_deterministic() {
        let rep = haar_rep(3, 777);
        let mut plan = ExperimentPlan::new(rep, LossModel::lossless(3), 777).unwrap();
        plan.photons_per_run = 2e4;
        plan.pairs_per_delay = 400.0;
        plan.reps = 12;
        let config = PipelineConfig::default();
        let run = characterize_plan(&plan, &config).unwrap();
        let singles = simulate_single_counts(&plan).unwrap();
        let a = bootstrap(&run, &singles, &plan.spectra, &config, 60, 5).unwrap();
        let b = bootstrap(&run, &singles, &plan.spectra, &config, 60, 5).unwrap();
        assert_eq!(a.sigma_re, b.sigma_re);
        assert_eq!(a.gamma_sigma, b.gamma_sigma);
        let mean: f64 = a.sigma_re.iter().flatten().sum::<f64>() / 9.0;
        assert!(mean > 1e-4, "expected visible error bars, got {mean}");
        assert!(a.dropped.is_empty());
        assert!(bootstrap(&run, &singles, &plan.spectra, &config, 10, 5).is_err());
    }

    #[test]
    fn report_serializes_with_expected_fields() {
        let plan = noiseless_plan(3, 550);
        let run = characterize_plan(&plan, &PipelineConfig::default()).unwrap();
        let report = run.report();
        let text = serde_json::to_string_pretty(&report).unwrap();
        for key in
            ["\"w_re\"", "\"w_im\"", "\"gamma_hat\"", "\"alpha_hat\"", "\"theta_hat\"", "\"relabeling\""]
        {
            assert!(text.contains(key), "missing {key}");
        }
        let back: ReconstructionReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.m, 3);
        assert!(frobenius(&(back.w_matrix() - &run.w)) < 1e-12);
    }
}
