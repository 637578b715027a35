//! Weighted nonlinear least-squares fitting of measured coincidence curves.
//!
//! Every fit has three parameters: a shape parameter (the mode match gamma,
//! an argument magnitude, or a net phase), an ordinate scale absorbing losses
//! and pair flux, and an abscissa shift absorbing the unknown zero of delay.
//! The Gaussian fallback kernel adds a fitted width as a fourth parameter.
//! Points are weighted by `1/C_exp(tau)`, or 1 where the measured count is
//! zero. Shape parameters are kept in their domains by smooth
//! reparameterization (logistic, scaled to `[0, pi]` for angles), so the
//! Levenberg-Marquardt core stays unconstrained.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coincidence::{visibility, BoundKernel, CoincidenceError, CurveKernel, SubmatrixParams};
use crate::model::{CoincidenceCurve, ModeMatch, Spectrum, Tolerances};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {needed} data points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate curve: {0}")]
    DegenerateCurve(String),
    #[error("all fit starts diverged")]
    AllStartsDiverged,
    #[error("fit curve is zero everywhere")]
    AllZeroFit,
    #[error(transparent)]
    Coincidence(#[from] CoincidenceError),
}

/// Which family the shape parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    /// Mode match in `[0, 1]`, interference sign fixed by known phases.
    Gamma,
    /// Argument magnitude in `[0, pi]`.
    AbsTheta,
    /// Net phase magnitude in `[0, pi]`.
    Beta,
}

impl ShapeKind {
    fn is_angle(self) -> bool {
        !matches!(self, ShapeKind::Gamma)
    }
}

/// Interference kernel used by the model curve.
#[derive(Debug, Clone)]
enum FitKernel {
    /// `|g(tau)|^2` from measured spectra.
    Spectral { bound: BoundKernel, g0: f64 },
    /// Unit-peak Gaussian `exp(-(width (tau - shift))^2)` with fitted width.
    Gaussian,
}

/// Parameterized model curve `tau -> scale * (baseline + coeff(shape) * G(tau - shift))`.
#[derive(Debug, Clone)]
pub struct CurveFamily {
    kind: ShapeKind,
    baseline: f64,
    amp_coeff: f64,
    kernel: FitKernel,
    tau: Vec<f64>,
}

impl CurveFamily {
    /// Family for a mode-match fit: amplitudes and all four phases known.
    pub fn gamma_fit(
        params: &SubmatrixParams,
        spec1: &Spectrum,
        spec2: &Spectrum,
        tau: &[f64],
    ) -> Result<Self, FitError> {
        let kernel = CurveKernel::new(spec1, spec2, &Tolerances::default())?;
        Ok(CurveFamily {
            kind: ShapeKind::Gamma,
            baseline: params.baseline_amps() * kernel.i1(),
            amp_coeff: 2.0 * params.pair_product() * params.phase_combination().cos(),
            kernel: FitKernel::Spectral { g0: kernel.overlap_sq(0.0), bound: kernel.bind(tau) },
            tau: tau.to_vec(),
        })
    }

    /// Family for an angle fit (`|theta|` or net phase) at known gamma.
    pub fn angle_fit(
        kind: ShapeKind,
        amps: [f64; 4],
        gamma: ModeMatch,
        spec1: &Spectrum,
        spec2: &Spectrum,
        tau: &[f64],
    ) -> Result<Self, FitError> {
        debug_assert!(kind.is_angle());
        let params = SubmatrixParams::new(amps, [0.0; 4])?;
        let kernel = CurveKernel::new(spec1, spec2, &Tolerances::default())?;
        Ok(CurveFamily {
            kind,
            baseline: params.baseline_amps() * kernel.i1(),
            amp_coeff: 2.0 * gamma.value() * params.pair_product(),
            kernel: FitKernel::Spectral { g0: kernel.overlap_sq(0.0), bound: kernel.bind(tau) },
            tau: tau.to_vec(),
        })
    }

    /// Replace the spectral kernel by the fitted-width Gaussian fallback.
    pub fn with_gaussian_kernel(mut self) -> Self {
        // Without spectra the overlap at zero delay is taken as perfect and
        // the spectral norms as exactly one.
        self.baseline = match (&self.kernel, self.kind) {
            (FitKernel::Spectral { bound, .. }, _) => self.baseline / bound.i1(),
            _ => self.baseline,
        };
        self.kernel = FitKernel::Gaussian;
        self
    }

    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    pub fn n_params(&self) -> usize {
        match self.kernel {
            FitKernel::Spectral { .. } => 3,
            FitKernel::Gaussian => 4,
        }
    }

    fn has_width(&self) -> bool {
        matches!(self.kernel, FitKernel::Gaussian)
    }

    /// Interference overlap at zero shift, used by the guess heuristics.
    fn overlap_peak(&self) -> f64 {
        match &self.kernel {
            FitKernel::Spectral { g0, .. } => *g0,
            FitKernel::Gaussian => 1.0,
        }
    }

    fn shape_coeff(&self, shape: f64) -> f64 {
        match self.kind {
            ShapeKind::Gamma => shape * self.amp_coeff,
            ShapeKind::AbsTheta | ShapeKind::Beta => shape.cos() * self.amp_coeff,
        }
    }

    /// Evaluate the model at physical parameters.
    pub fn predict_into(&self, p: &FitParams, out: &mut [f64]) {
        let coeff = self.shape_coeff(p.shape);
        match &self.kernel {
            FitKernel::Spectral { bound, .. } => {
                bound.eval_into(p.shift, out);
                for v in out.iter_mut() {
                    *v = p.scale * (self.baseline + coeff * *v);
                }
            }
            FitKernel::Gaussian => {
                let w = p.width.unwrap_or(1.0);
                for (o, &t) in out.iter_mut().zip(&self.tau) {
                    let d = w * (t - p.shift);
                    *o = p.scale * (self.baseline + coeff * (-d * d).exp());
                }
            }
        }
    }
}

/// Physical (untransformed) fit parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub shape: f64,
    pub scale: f64,
    pub shift: f64,
    pub width: Option<f64>,
}

const LOGISTIC_EPS: f64 = 1e-7;

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGISTIC_EPS, 1.0 - LOGISTIC_EPS);
    (p / (1.0 - p)).ln()
}

impl FitParams {
    fn to_vector(&self, kind: ShapeKind, has_width: bool) -> Vec<f64> {
        let u_shape = match kind {
            ShapeKind::Gamma => logit(self.shape),
            // Angle starts outside [0, pi] are folded through the cosine,
            // which is all the curve shape can resolve.
            _ => logit(self.shape.cos().clamp(-1.0, 1.0).acos() / std::f64::consts::PI),
        };
        let mut v = vec![u_shape, self.scale.max(1e-300).ln(), self.shift];
        if has_width {
            v.push(self.width.unwrap_or(1.0).max(1e-12).ln());
        }
        v
    }

    fn from_vector(x: &[f64], kind: ShapeKind, has_width: bool) -> FitParams {
        let shape = match kind {
            ShapeKind::Gamma => logistic(x[0]),
            _ => std::f64::consts::PI * logistic(x[0]),
        };
        FitParams {
            shape,
            scale: x[1].exp(),
            shift: x[2],
            width: if has_width { Some(x[3].exp()) } else { None },
        }
    }
}

/// One multistart entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartPoint {
    pub label: String,
    pub params: FitParams,
}

/// A measured curve paired with its model family and fit weights.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub curve: CoincidenceCurve,
    pub weights: Vec<f64>,
    pub family: CurveFamily,
    /// Optional extra starting points, e.g. a warm start for bootstrap refits.
    pub extra_starts: Vec<StartPoint>,
    /// When set, only `extra_starts` are used.
    pub starts_override: bool,
}

/// Fit weights: `1/C_exp` per point, or 1 where the measured count is zero.
pub fn fit_weights(counts: &[f64]) -> Vec<f64> {
    counts.iter().map(|&c| if c != 0.0 { 1.0 / c } else { 1.0 }).collect()
}

impl FitProblem {
    pub fn new(curve: CoincidenceCurve, family: CurveFamily) -> Self {
        let weights = fit_weights(&curve.counts);
        FitProblem { curve, weights, family, extra_starts: Vec::new(), starts_override: false }
    }

    pub fn with_warm_start(mut self, params: FitParams) -> Self {
        self.extra_starts.push(StartPoint { label: "warm".into(), params });
        self.starts_override = true;
        self
    }
}

/// Result of a multistart fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub shape: f64,
    pub scale: f64,
    pub shift: f64,
    pub width: Option<f64>,
    pub objective: f64,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub start_used: String,
    /// Objective after each accepted step of the winning start.
    pub objective_history: Vec<f64>,
}

impl FitResult {
    pub fn params(&self) -> FitParams {
        FitParams { shape: self.shape, scale: self.scale, shift: self.shift, width: self.width }
    }

    /// Compact diagnostics for serialization next to a report.
    pub fn diagnostics(&self) -> FitDiagnostics {
        FitDiagnostics {
            shape: self.shape,
            scale: self.scale,
            shift: self.shift,
            objective: self.objective,
            iterations: self.iterations,
            converged: self.converged,
            start_used: self.start_used.clone(),
        }
    }
}

/// Per-curve fit diagnostics emitted as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub shape: f64,
    pub scale: f64,
    pub shift: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub start_used: String,
}

/// Levenberg-Marquardt settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitConfig {
    /// Relative objective-change convergence threshold.
    pub ftol: f64,
    /// Gradient infinity-norm convergence threshold.
    pub gtol: f64,
    pub max_iterations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { ftol: 1e-10, gtol: 1e-8, max_iterations: 200 }
    }
}

/// Starting points per the guess heuristics: scale from the baseline ratio,
/// shift from the extremum location, and shape either from the visibility
/// ratio (gamma) or from the visibility formula plus the four fixed angle
/// starts `pi/4, 3pi/4, 5pi/4, 7pi/4`.
pub fn initial_guesses(problem: &FitProblem) -> Result<Vec<StartPoint>, FitError> {
    let c = &problem.curve.counts;
    if c.len() < 5 {
        return Err(FitError::TooFewPoints { needed: 5, got: c.len() });
    }
    let baseline_exp = 0.5 * (c[0] + c[c.len() - 1]);
    if baseline_exp <= 0.0 {
        return Err(FitError::DegenerateCurve("zero baseline".into()));
    }
    let family = &problem.family;
    let mean = c.iter().sum::<f64>() / c.len() as f64;
    let extremum_idx = (0..c.len())
        .max_by(|&a, &b| (c[a] - mean).abs().partial_cmp(&(c[b] - mean).abs()).unwrap())
        .unwrap();
    let shift = problem.curve.tau[extremum_idx];
    let scale = if family.baseline > 0.0 { baseline_exp / family.baseline } else { 1.0 };
    let width = family.has_width().then(|| width_guess(&problem.curve, baseline_exp, extremum_idx));

    let v_exp = visibility(c).unwrap_or(0.0);
    let peak = family.overlap_peak();
    let mut starts = Vec::new();
    match family.kind {
        ShapeKind::Gamma => {
            // visibility is linear in gamma, so the ratio to the gamma=1
            // visibility is the guess
            let v_model = (family.amp_coeff.abs() * peak / family.baseline).max(1e-12);
            let shape = (v_exp / v_model).clamp(0.0, 1.0);
            starts.push(StartPoint {
                label: "visibility-ratio".into(),
                params: FitParams { shape, scale, shift, width },
            });
        }
        ShapeKind::AbsTheta | ShapeKind::Beta => {
            let denom = (family.amp_coeff.abs() * peak).max(1e-12);
            let magnitude = (v_exp * family.baseline / denom).min(1.0);
            let dip = c[extremum_idx] < baseline_exp;
            let shape = if dip { -magnitude } else { magnitude }.acos();
            starts.push(StartPoint {
                label: "visibility-formula".into(),
                params: FitParams { shape, scale, shift, width },
            });
            for (k, angle) in [1.0, 3.0, 5.0, 7.0].iter().enumerate() {
                starts.push(StartPoint {
                    label: format!("angle-start-{}", k + 1),
                    params: FitParams {
                        shape: angle * std::f64::consts::FRAC_PI_4,
                        scale,
                        shift,
                        width,
                    },
                });
            }
        }
    }
    Ok(starts)
}

fn width_guess(curve: &CoincidenceCurve, baseline: f64, extremum_idx: usize) -> f64 {
    let c = &curve.counts;
    let tau = &curve.tau;
    let peak = (c[extremum_idx] - baseline).abs();
    if peak <= 0.0 {
        return 2.0 / (tau[tau.len() - 1] - tau[0]).abs().max(1e-12);
    }
    // distance from the extremum to the half-excursion crossing
    let mut half_width = f64::INFINITY;
    for side in [1isize, -1] {
        let mut k = extremum_idx as isize;
        loop {
            k += side;
            if k < 0 || k as usize >= c.len() {
                break;
            }
            if (c[k as usize] - baseline).abs() < 0.5 * peak {
                half_width = half_width.min((tau[k as usize] - tau[extremum_idx]).abs());
                break;
            }
        }
    }
    if !half_width.is_finite() {
        half_width = 0.25 * (tau[tau.len() - 1] - tau[0]).abs();
    }
    (2.0_f64.ln()).sqrt() / half_width.max(1e-12)
}

struct LmRun {
    params: FitParams,
    objective: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

fn weighted_objective(weights: &[f64], data: &[f64], model: &[f64]) -> f64 {
    weights
        .iter()
        .zip(data.iter().zip(model))
        .map(|(w, (d, m))| w * (d - m) * (d - m))
        .sum()
}

fn levenberg_marquardt(problem: &FitProblem, start: &FitParams, cfg: &FitConfig) -> Option<LmRun> {
    let family = &problem.family;
    let kind = family.kind();
    let has_width = family.has_width();
    let n = family.n_params();
    let l = problem.curve.len();
    let data = &problem.curve.counts;
    let weights = &problem.weights;

    let mut x = start.to_vector(kind, has_width);
    let mut model = vec![0.0; l];
    family.predict_into(&FitParams::from_vector(&x, kind, has_width), &mut model);
    let mut obj = weighted_objective(weights, data, &model);
    if !obj.is_finite() {
        return None;
    }

    let mut lambda = 1e-3;
    let mut history = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let mut jac = DMatrix::zeros(l, n);
    let mut scratch_plus = vec![0.0; l];
    let mut scratch_minus = vec![0.0; l];

    while iterations < cfg.max_iterations {
        iterations += 1;
        // central-difference Jacobian of the weighted residuals
        for p in 0..n {
            let h = 1e-6 * x[p].abs().max(1.0);
            let mut xp = x.clone();
            xp[p] += h;
            family.predict_into(&FitParams::from_vector(&xp, kind, has_width), &mut scratch_plus);
            xp[p] = x[p] - h;
            family.predict_into(&FitParams::from_vector(&xp, kind, has_width), &mut scratch_minus);
            for i in 0..l {
                let w = weights[i].sqrt();
                // residual r_i = sqrt(w)(data - model); dr/dp = -sqrt(w) dmodel/dp
                jac[(i, p)] = -w * (scratch_plus[i] - scratch_minus[i]) / (2.0 * h);
            }
        }
        let residual =
            nalgebra::DVector::from_fn(l, |i, _| weights[i].sqrt() * (data[i] - model[i]));
        let grad = jac.transpose() * &residual;
        if grad.amax() < cfg.gtol {
            converged = true;
            break;
        }
        let jtj = jac.transpose() * &jac;

        let mut accepted = false;
        while lambda < 1e14 {
            let mut damped = jtj.clone();
            for p in 0..n {
                damped[(p, p)] += lambda * jtj[(p, p)].max(1e-12);
            }
            let step = match damped.lu().solve(&grad) {
                Some(s) => s,
                None => break,
            };
            let trial: Vec<f64> = (0..n).map(|p| x[p] - step[p]).collect();
            family.predict_into(&FitParams::from_vector(&trial, kind, has_width), &mut scratch_plus);
            let trial_obj = weighted_objective(weights, data, &scratch_plus);
            if trial_obj.is_finite() && trial_obj < obj {
                let rel_drop = (obj - trial_obj) / obj.max(1e-300);
                x = trial;
                model.copy_from_slice(&scratch_plus);
                obj = trial_obj;
                history.push(obj);
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if rel_drop < cfg.ftol || obj < 1e-28 {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            // no descent direction at this damping resolution: stop in place
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    Some(LmRun {
        params: FitParams::from_vector(&x, kind, has_width),
        objective: obj,
        iterations,
        converged,
        history,
    })
}

/// Multistart weighted fit; returns the best local minimum over all starts.
pub fn fit(problem: &FitProblem) -> Result<FitResult, FitError> {
    fit_with(problem, &FitConfig::default())
}

pub fn fit_with(problem: &FitProblem, cfg: &FitConfig) -> Result<FitResult, FitError> {
    let n = problem.family.n_params();
    if problem.curve.len() < n + 1 {
        return Err(FitError::TooFewPoints { needed: n + 1, got: problem.curve.len() });
    }
    let mut starts = if problem.starts_override {
        problem.extra_starts.clone()
    } else {
        let mut s = initial_guesses(problem)?;
        s.extend(problem.extra_starts.iter().cloned());
        s
    };
    if starts.is_empty() {
        starts = initial_guesses(problem)?;
    }

    let mut best: Option<(LmRun, String)> = None;
    for start in &starts {
        if let Some(run) = levenberg_marquardt(problem, &start.params, cfg) {
            let better = match &best {
                Some((b, _)) => run.objective < b.objective,
                None => true,
            };
            if better {
                best = Some((run, start.label.clone()));
            }
        }
    }
    let (run, start_used) = best.ok_or(FitError::AllStartsDiverged)?;

    let mut fitted = vec![0.0; problem.curve.len()];
    problem.family.predict_into(&run.params, &mut fitted);
    let residuals: Vec<f64> =
        problem.curve.counts.iter().zip(&fitted).map(|(d, m)| d - m).collect();
    Ok(FitResult {
        shape: run.params.shape,
        scale: run.params.scale,
        shift: run.params.shift,
        width: run.params.width,
        objective: run.objective,
        residuals,
        fitted,
        converged: run.converged,
        iterations: run.iterations,
        start_used,
        objective_history: run.history,
    })
}

/// Pointwise residuals divided by the fitted curve. Points where the fitted
/// value vanishes are excluded and reported, except exact zero residuals
/// which normalize to zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedResiduals {
    pub values: Vec<f64>,
    pub excluded: Vec<usize>,
}

pub fn normalized_residuals(result: &FitResult) -> Result<NormalizedResiduals, FitError> {
    let max_fit = result.fitted.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if max_fit <= 0.0 {
        return Err(FitError::AllZeroFit);
    }
    let floor = 1e-12 * max_fit;
    let mut values = Vec::with_capacity(result.fitted.len());
    let mut excluded = Vec::new();
    for (idx, (&r, &f)) in result.residuals.iter().zip(&result.fitted).enumerate() {
        if f.abs() > floor {
            values.push(r / f);
        } else if r.abs() <= floor {
            values.push(0.0);
        } else {
            values.push(0.0);
            excluded.push(idx);
        }
    }
    Ok(NormalizedResiduals { values, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linspace, PortTuple};
    use crate::seeds::SeedStream;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};
    use std::f64::consts::PI;

    fn spectra() -> (Spectrum, Spectrum) {
        let s = Spectrum::gaussian(10.0, 1.0, 6.0, 121).unwrap();
        (s.clone(), s)
    }

    fn ports() -> PortTuple {
        PortTuple::new(1, 2, 1, 2).unwrap()
    }

    fn angle_family(amps: [f64; 4], gamma: f64, tau: &[f64]) -> CurveFamily {
        let (f1, f2) = spectra();
        CurveFamily::angle_fit(
            ShapeKind::Beta,
            amps,
            ModeMatch::new(gamma).unwrap(),
            &f1,
            &f2,
            tau,
        )
        .unwrap()
    }

    fn synth(family: &CurveFamily, p: &FitParams, tau: &[f64]) -> CoincidenceCurve {
        let mut counts = vec![0.0; tau.len()];
        family.predict_into(p, &mut counts);
        CoincidenceCurve::new(ports(), tau.to_vec(), counts).unwrap()
    }

    fn poissonize(curve: &mut CoincidenceCurve, seed: u64) {
        let mut rng = SeedStream::new(seed).rng();
        for c in &mut curve.counts {
            if *c > 0.0 {
                *c = Poisson::new(*c).unwrap().sample(&mut rng).round();
            }
        }
    }

    #[test]
    fn exact_recovery_from_noiseless_data() {
        let tau = linspace(-4.0, 4.0, 61);
        let family = angle_family([0.8, 0.5, 0.5, 0.8], 0.9, &tau);
        let truth = FitParams { shape: PI / 3.0, scale: 2.0, shift: 0.5, width: None };
        let curve = synth(&family, &truth, &tau);
        let result = fit(&FitProblem::new(curve, family)).unwrap();
        assert!(result.converged);
        assert_abs_diff_eq!(result.shape, PI / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(result.scale, 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(result.shift, 0.5, epsilon = 1e-6);
        assert!(result.objective < 1e-12);
    }

    #[test]
    fn guess_list_has_expected_starts() {
        let tau = linspace(-4.0, 4.0, 61);
        let family = angle_family([0.7, 0.6, 0.6, 0.7], 1.0, &tau);
        let truth = FitParams { shape: 2.0, scale: 1.0, shift: 1.3, width: None };
        let curve = synth(&family, &truth, &tau);
        let starts = initial_guesses(&FitProblem::new(curve, family)).unwrap();
        // visibility-based guess plus exactly the four fixed angle starts
        assert_eq!(starts.len(), 5);
        let angles: Vec<f64> = starts[1..].iter().map(|s| s.params.shape).collect();
        for (got, want) in angles.iter().zip([PI / 4.0, 3.0 * PI / 4.0, 5.0 * PI / 4.0, 7.0 * PI / 4.0])
        {
            assert_abs_diff_eq!(got, &want, epsilon = 1e-12);
        }
        // extremum of this dip sits at the injected shift
        for s in &starts {
            assert_abs_diff_eq!(s.params.shift, 1.3, epsilon = 0.14);
        }
    }

    #[test]
    fn gamma_guess_for_perfect_dip_is_unity() {
        let tau = linspace(-4.0, 4.0, 61);
        let (f1, f2) = spectra();
        let family =
            CurveFamily::gamma_fit(&crate::coincidence::bs_submatrix(PI / 4.0), &f1, &f2, &tau)
                .unwrap();
        let truth = FitParams { shape: 1.0, scale: 1.0, shift: 0.0, width: None };
        let curve = synth(&family, &truth, &tau);
        let starts = initial_guesses(&FitProblem::new(curve, family)).unwrap();
        assert_eq!(starts.len(), 1);
        assert_abs_diff_eq!(starts[0].params.shape, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn boundary_shapes_recovered_under_poisson_noise() {
        // Oracle: repeated simulation at known truth. At the fold points
        // beta = 0 and pi the angle error folds quadratically, so accuracy is
        // asserted on cos(beta), the quantity the curve shape determines.
        let tau = linspace(-4.0, 4.0, 61);
        let amps = [3f64.sqrt() / 4.0, 0.25, 0.25, 3f64.sqrt() / 4.0];
        for (case, truth_beta) in [(0u64, 0.0), (1u64, PI)] {
            for trial in 0..100u64 {
                let family = angle_family(amps, 1.0, &tau);
                let truth = FitParams {
                    shape: truth_beta,
                    // 1% relative Poisson noise at the baseline level
                    scale: 1e4 / family.baseline,
                    shift: 0.0,
                    width: None,
                };
                let mut curve = synth(&family, &truth, &tau);
                poissonize(&mut curve, 1000 + case * 1000 + trial);
                let result = fit(&FitProblem::new(curve, family)).unwrap();
                let err = (result.shape.cos() - truth_beta.cos()).abs();
                assert!(err < 0.02, "case {case} trial {trial}: cos error {err}");
            }
        }
    }

    #[test]
    fn interior_shape_recovered_under_poisson_noise() {
        let tau = linspace(-4.0, 4.0, 61);
        let amps = [0.7, 0.55, 0.55, 0.7];
        let mut hits = 0;
        for trial in 0..50u64 {
            let family = angle_family(amps, 0.9, &tau);
            let truth = FitParams {
                shape: PI / 3.0,
                scale: 1e4 / family.baseline,
                shift: -0.3,
                width: None,
            };
            let mut curve = synth(&family, &truth, &tau);
            poissonize(&mut curve, 7_000 + trial);
            let result = fit(&FitProblem::new(curve, family)).unwrap();
            if (result.shape - PI / 3.0).abs() < 0.02 {
                hits += 1;
            }
        }
        assert!(hits >= 48, "only {hits}/50 within 0.02");
    }

    #[test]
    fn gamma_fit_recovers_mode_match() {
        let tau = linspace(-4.0, 4.0, 61);
        let (f1, f2) = spectra();
        let params = crate::coincidence::bs_submatrix(PI / 4.0);
        let mut hits = 0;
        for trial in 0..100u64 {
            let family = CurveFamily::gamma_fit(&params, &f1, &f2, &tau).unwrap();
            let truth = FitParams {
                shape: 0.8,
                scale: 1000.0 / family.baseline,
                shift: 0.1,
                width: None,
            };
            let mut curve = synth(&family, &truth, &tau);
            poissonize(&mut curve, 31_000 + trial);
            let result = fit(&FitProblem::new(curve, family)).unwrap();
            if (0.75..=0.85).contains(&result.shape) {
                hits += 1;
            }
        }
        assert!(hits >= 95, "only {hits}/100 inside [0.75, 0.85]");
    }

    #[test]
    fn rescaling_data_rescales_only_the_scale() {
        let tau = linspace(-4.0, 4.0, 61);
        let family = angle_family([0.8, 0.5, 0.5, 0.8], 0.9, &tau);
        let truth =
            FitParams { shape: 1.1, scale: 3000.0 / family.baseline, shift: 0.4, width: None };
        let mut curve = synth(&family, &truth, &tau);
        poissonize(&mut curve, 99);
        let base = fit(&FitProblem::new(curve.clone(), family.clone())).unwrap();
        let c = 7.5;
        let mut scaled_curve = curve;
        for v in &mut scaled_curve.counts {
            *v *= c;
        }
        let scaled = fit(&FitProblem::new(scaled_curve, family)).unwrap();
        assert_abs_diff_eq!(scaled.shape, base.shape, epsilon = 1e-8);
        assert_abs_diff_eq!(scaled.shift, base.shift, epsilon = 1e-8);
        assert_abs_diff_eq!(scaled.scale / base.scale, c, epsilon = 1e-6);
    }

    #[test]
    fn multistart_dominates_individual_starts() {
        let tau = linspace(-4.0, 4.0, 41);
        let family = angle_family([0.9, 0.3, 0.4, 0.8], 0.95, &tau);
        let truth =
            FitParams { shape: 2.6, scale: 1500.0 / family.baseline, shift: -0.6, width: None };
        let mut curve = synth(&family, &truth, &tau);
        poissonize(&mut curve, 123);
        let problem = FitProblem::new(curve, family);
        let best = fit(&problem).unwrap();
        for start in initial_guesses(&problem).unwrap() {
            let single = FitProblem { starts_override: true, extra_starts: vec![start], ..problem.clone() };
            let run = fit(&single).unwrap();
            assert!(best.objective <= run.objective + 1e-9);
        }
    }

    #[test]
    fn objective_history_is_monotone() {
        let tau = linspace(-4.0, 4.0, 61);
        let family = angle_family([0.8, 0.6, 0.5, 0.7], 0.9, &tau);
        let truth =
            FitParams { shape: 0.9, scale: 2200.0 / family.baseline, shift: 0.8, width: None };
        let mut curve = synth(&family, &truth, &tau);
        poissonize(&mut curve, 7);
        let result = fit(&FitProblem::new(curve, family)).unwrap();
        for w in result.objective_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn normalized_residuals_arithmetic() {
        let dummy = |residuals: Vec<f64>, fitted: Vec<f64>| FitResult {
            shape: 0.0,
            scale: 1.0,
            shift: 0.0,
            width: None,
            objective: 0.0,
            residuals,
            fitted,
            converged: true,
            iterations: 0,
            start_used: "test".into(),
            objective_history: vec![],
        };
        let nr = normalized_residuals(&dummy(vec![0.0, 0.0], vec![5.0, 9.0])).unwrap();
        assert_eq!(nr.values, vec![0.0, 0.0]);
        let nr = normalized_residuals(&dummy(vec![5.0], vec![100.0])).unwrap();
        assert_abs_diff_eq!(nr.values[0], 0.05, epsilon = 1e-15);
        assert!(normalized_residuals(&dummy(vec![1.0], vec![0.0])).is_err());
    }

    #[test]
    fn normalized_residual_spread_tracks_poisson_level() {
        // Monte Carlo oracle: with Poisson counts, the normalized residual at
        // a point of expected level lambda has spread ~ 1/sqrt(lambda).
        let tau = linspace(-4.0, 4.0, 41);
        let family = angle_family([0.8, 0.5, 0.5, 0.8], 0.9, &tau);
        let pairs = 2000.0;
        let truth = FitParams { shape: 2.3, scale: pairs / family.baseline, shift: 0.0, width: None };
        let clean = synth(&family, &truth, &tau);
        let n_curves = 400;
        let mut per_point: Vec<Vec<f64>> = vec![Vec::new(); tau.len()];
        for trial in 0..n_curves {
            let mut curve = clean.clone();
            poissonize(&mut curve, 50_000 + trial);
            let problem = FitProblem::new(curve, family.clone()).with_warm_start(truth);
            let result = fit(&problem).unwrap();
            let nr = normalized_residuals(&result).unwrap();
            for (k, v) in nr.values.iter().enumerate() {
                per_point[k].push(*v);
            }
        }
        for k in [0usize, 10, 20, 30, 40] {
            let vals = &per_point[k];
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64;
            let expected = 1.0 / clean.counts[k].sqrt();
            let got = var.sqrt();
            assert!(
                (got - expected).abs() / expected < 0.2,
                "point {k}: got {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn gaussian_kernel_fits_width() {
        let tau = linspace(-4.0, 4.0, 61);
        let family = angle_family([0.8, 0.5, 0.5, 0.8], 1.0, &tau).with_gaussian_kernel();
        assert_eq!(family.n_params(), 4);
        let truth = FitParams { shape: PI, scale: 2.0, shift: 0.3, width: Some(0.9) };
        let curve = synth(&family, &truth, &tau);
        let result = fit(&FitProblem::new(curve, family)).unwrap();
        assert_abs_diff_eq!(result.shape, PI, epsilon = 1e-3);
        assert_abs_diff_eq!(result.shift, 0.3, epsilon = 1e-6);
        assert_abs_diff_eq!(result.width.unwrap(), 0.9, epsilon = 1e-5);
    }

    #[test]
    fn too_few_points_rejected() {
        let tau = vec![-1.0, 0.0, 1.0];
        let family = angle_family([0.8, 0.5, 0.5, 0.8], 1.0, &tau);
        let truth = FitParams { shape: 1.0, scale: 1.0, shift: 0.0, width: None };
        let curve = synth(&family, &truth, &tau);
        assert!(matches!(
            fit(&FitProblem::new(curve, family)),
            Err(FitError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn weights_follow_inverse_counts_rule() {
        let w = fit_weights(&[4.0, 0.0, 0.5]);
        assert_eq!(w, vec![0.25, 1.0, 2.0]);
    }

    #[test]
    fn shift_guess_uses_extremum() {
        let tau = linspace(-4.0, 4.0, 81);
        let family = angle_family([0.8, 0.5, 0.5, 0.8], 1.0, &tau);
        let truth = FitParams { shape: PI, scale: 1.0, shift: 1.3, width: None };
        let curve = synth(&family, &truth, &tau);
        let starts = initial_guesses(&FitProblem::new(curve, family)).unwrap();
        assert_abs_diff_eq!(starts[0].params.shift, 1.3, epsilon = 0.11);
    }

    #[test]
    fn noise_robust_multistart_avoids_mirror_minimum() {
        // a peak (beta near pi) misread as a dip would sit in the wrong
        // basin; the four fixed starts must rescue it
        let tau = linspace(-4.0, 4.0, 61);
        let mut rng = SeedStream::new(4242).rng();
        for trial in 0..20 {
            let beta = rng.random_range(0.2..3.0);
            let family = angle_family([0.75, 0.5, 0.45, 0.85], 0.9, &tau);
            let truth =
                FitParams { shape: beta, scale: 3e4 / family.baseline, shift: 0.0, width: None };
            let mut curve = synth(&family, &truth, &tau);
            poissonize(&mut curve, 90_000 + trial);
            let result = fit(&FitProblem::new(curve, family)).unwrap();
            assert!(
                (result.shape - beta).abs() < 0.05,
                "trial {trial}: beta {beta}, fitted {}",
                result.shape
            );
        }
    }
}
