//! Synthetic experiment generation: single-photon count tables, calibration
//! and interferometer coincidence curves with optional Poisson shot noise,
//! and the scattershot event-selection acquisition mode.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coincidence::{coincidence_curve, single_photon_prob, CoincidenceError, SubmatrixParams};
use crate::estimation::{CurveSource, EstimationError};
use crate::model::{
    beam_splitter, CoincidenceCurve, LossModel, ModeMatch, ModelError, PortTuple,
    RepresentativeMatrix, SinglePhotonCounts, Spectrum,
};
use crate::seeds::SeedStream;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid ports {0}")]
    InvalidPorts(PortTuple),
    #[error("incomplete acquisition: {missing} tuples below threshold, {starved} starved single channels")]
    IncompleteAcquisition { missing: usize, starved: usize, report: IncompleteReport },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Coincidence(#[from] CoincidenceError),
}

/// What a starved scattershot run was missing.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IncompleteReport {
    pub missing_tuples: Vec<PortTuple>,
    /// `(input port, repetition)` single channels with zero counts.
    pub starved_singles: Vec<(usize, usize)>,
}

/// Ground truth plus acquisition settings for one synthetic experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub rep: RepresentativeMatrix,
    pub loss: LossModel,
    /// Source spectrum coupled to each input port.
    pub spectra: Vec<Spectrum>,
    pub gamma_true: ModeMatch,
    /// Repetition count B for single-photon counting.
    pub reps: usize,
    /// Expected incident photons per single-photon run.
    pub photons_per_run: f64,
    /// Expected incident pairs per delay point.
    pub pairs_per_delay: f64,
    pub tau: Vec<f64>,
    /// Calibration beam-splitter angle (reflectivity cos theta_cal).
    pub theta_cal: f64,
    pub poisson_noise: bool,
    pub seed: u64,
    /// Unknown zero-of-delay per curve, uniform in +/- this many grid steps.
    pub shift_steps: f64,
    /// Per-curve ordinate scale factor range.
    pub scale_range: (f64, f64),
    /// Scattershot source firing probability per port per cycle.
    pub herald_prob: f64,
    /// Minimum retained events per required tuple before a scattershot run
    /// counts as complete.
    pub min_events_per_tuple: u64,
}

impl ExperimentPlan {
    /// Plan with desk-scale defaults around the given ground truth.
    pub fn new(rep: RepresentativeMatrix, loss: LossModel, seed: u64) -> Result<Self, SimulationError> {
        let m = rep.m;
        let spectra = vec![
            Spectrum::gaussian(10.0, 1.0, 6.0, 121).map_err(SimulationError::Model)?;
            m
        ];
        let plan = ExperimentPlan {
            rep,
            loss,
            spectra,
            gamma_true: ModeMatch::new(1.0).unwrap(),
            reps: 20,
            photons_per_run: 1e5,
            pairs_per_delay: 1000.0,
            tau: crate::model::linspace(-4.0, 4.0, 61),
            theta_cal: std::f64::consts::FRAC_PI_4,
            poisson_noise: true,
            seed,
            shift_steps: 2.0,
            scale_range: (1.0, 1.0),
            herald_prob: 0.2,
            min_events_per_tuple: 50,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn modes(&self) -> usize {
        self.rep.m
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let m = self.rep.m;
        if self.loss.modes() != m {
            return Err(SimulationError::InvalidPlan("loss model dimension mismatch".into()));
        }
        if self.spectra.len() != m {
            return Err(SimulationError::InvalidPlan(format!(
                "need one spectrum per input port ({} given, {m} ports)",
                self.spectra.len()
            )));
        }
        let tol = crate::model::Tolerances::default();
        if self.spectra.iter().any(|s| !s.is_normalized(&tol)) {
            return Err(SimulationError::InvalidPlan("spectra must be normalized".into()));
        }
        if self.reps < 2 {
            return Err(SimulationError::InvalidPlan("repetition count must be at least 2".into()));
        }
        if !(self.photons_per_run > 0.0) || !(self.pairs_per_delay > 0.0) {
            return Err(SimulationError::InvalidPlan("rates must be positive".into()));
        }
        if self.tau.len() < 5 || self.tau.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SimulationError::InvalidPlan(
                "delay grid must be strictly increasing with at least 5 points".into(),
            ));
        }
        if !(self.theta_cal > 0.0 && self.theta_cal < std::f64::consts::FRAC_PI_2) {
            return Err(SimulationError::InvalidPlan(
                "calibration angle must lie strictly inside (0, pi/2)".into(),
            ));
        }
        if !(self.herald_prob > 0.0 && self.herald_prob <= 1.0) {
            return Err(SimulationError::InvalidPlan("herald probability must lie in (0, 1]".into()));
        }
        if !(self.shift_steps >= 0.0) || self.scale_range.0 > self.scale_range.1 || self.scale_range.0 <= 0.0 {
            return Err(SimulationError::InvalidPlan("bad shift/scale nuisance settings".into()));
        }
        Ok(())
    }

    fn grid_step(&self) -> f64 {
        (self.tau[self.tau.len() - 1] - self.tau[0]) / (self.tau.len() - 1) as f64
    }

    /// The unknown abscissa shift and ordinate factor injected into one curve.
    fn nuisance(&self, label: &str) -> (f64, f64) {
        let mut rng = SeedStream::new(self.seed).child("nuisance").child(label).rng();
        let half = self.shift_steps * self.grid_step();
        let shift = if half > 0.0 { rng.random_range(-half..half) } else { 0.0 };
        let (lo, hi) = self.scale_range;
        let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
        (shift, scale)
    }
}

/// Required coincidence measurements for an m-mode characterization:
/// `(m-1)^2` magnitude tuples plus `(m-1)^2` sign tuples.
pub fn required_tuples(m: usize) -> Vec<PortTuple> {
    let mut tuples = Vec::with_capacity(2 * (m - 1) * (m - 1));
    for i in 2..=m {
        for j in 2..=m {
            tuples.push(PortTuple::new(1, i, 1, j).expect("valid magnitude tuple"));
        }
    }
    // Sign measurements: the (2,2) slot probes the same ports as its
    // magnitude curve and is kept for the conjugation-asymmetry check.
    tuples.push(PortTuple::new(2, 1, 2, 1).expect("valid tuple"));
    for i in 3..=m {
        tuples.push(PortTuple::new(i, 2, 2, 1).expect("valid tuple"));
    }
    for j in 3..=m {
        tuples.push(PortTuple::new(2, 1, j, 2).expect("valid tuple"));
    }
    for i in 3..=m {
        for j in 3..=m {
            tuples.push(PortTuple::new(i, 2, j, 2).expect("valid tuple"));
        }
    }
    tuples
}

fn draw_poisson(rng: &mut ChaCha12Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng)
}

/// Single-photon count table: `N_ijb ~ Poisson(N_b P_ij)` with the incident
/// number `N_b` itself Poisson to model source-strength fluctuation;
/// noiseless mode stores rounded means.
pub fn simulate_single_counts(plan: &ExperimentPlan) -> Result<SinglePhotonCounts, SimulationError> {
    plan.validate()?;
    singles_for(
        &plan.rep,
        &plan.loss,
        plan.reps,
        plan.photons_per_run,
        plan.poisson_noise,
        SeedStream::new(plan.seed).child("singles"),
    )
}

fn singles_for(
    rep: &RepresentativeMatrix,
    loss: &LossModel,
    reps: usize,
    photons_per_run: f64,
    poisson: bool,
    stream: SeedStream,
) -> Result<SinglePhotonCounts, SimulationError> {
    let m = rep.m;
    let mut counts = SinglePhotonCounts::zeros(m, reps)?;
    let mut rng = stream.rng();
    for j in 0..m {
        for b in 0..reps {
            let incident =
                if poisson { draw_poisson(&mut rng, photons_per_run) } else { photons_per_run };
            for i in 0..m {
                let p = single_photon_prob(rep, loss, i + 1, j + 1)?;
                let mean = incident * p;
                let n = if poisson { draw_poisson(&mut rng, mean) } else { mean.round() };
                counts.set(i, j, b, n as u64);
            }
        }
    }
    Ok(counts)
}

fn tuple_params(rep: &RepresentativeMatrix, ports: PortTuple) -> Result<SubmatrixParams, SimulationError> {
    let m = rep.m;
    let (i, i2, j, j2) = (ports.out1, ports.out2, ports.in1, ports.in2);
    if i > m || i2 > m || j > m || j2 > m {
        return Err(SimulationError::InvalidPorts(ports));
    }
    let (i, i2, j, j2) = (i - 1, i2 - 1, j - 1, j2 - 1);
    Ok(SubmatrixParams::new(
        [rep.alpha[(i, j)], rep.alpha[(i, j2)], rep.alpha[(i2, j)], rep.alpha[(i2, j2)]],
        [rep.theta[(i, j)], rep.theta[(i, j2)], rep.theta[(i2, j)], rep.theta[(i2, j2)]],
    )?)
}

fn tuple_loss_prefactor(rep: &RepresentativeMatrix, loss: &LossModel, ports: PortTuple) -> f64 {
    let (i, i2, j, j2) = (ports.out1 - 1, ports.out2 - 1, ports.in1 - 1, ports.in2 - 1);
    loss.kappa[i]
        * loss.kappa[i2]
        * rep.lambda[i]
        * rep.lambda[i2]
        * rep.mu[j]
        * rep.mu[j2]
        * loss.nu[j]
        * loss.nu[j2]
}

/// Simulated coincidence curve for one choice of ports, including the loss
/// prefactor, an unknown abscissa shift and an unknown ordinate factor.
pub fn simulate_coincidence(
    plan: &ExperimentPlan,
    ports: PortTuple,
) -> Result<CoincidenceCurve, SimulationError> {
    let params = tuple_params(&plan.rep, ports)?;
    let prefactor = tuple_loss_prefactor(&plan.rep, &plan.loss, ports);
    let (shift, scale_jitter) = plan.nuisance(&format!("curve{ports}"));
    let shifted: Vec<f64> = plan.tau.iter().map(|t| t - shift).collect();
    let spec1 = &plan.spectra[ports.in1 - 1];
    let spec2 = &plan.spectra[ports.in2 - 1];
    let shape = coincidence_curve(spec1, spec2, &shifted, &params, plan.gamma_true)?;
    let mut rng = SeedStream::new(plan.seed).child(&format!("noise{ports}")).rng();
    let counts: Vec<f64> = shape
        .iter()
        .map(|c| {
            let mean = plan.pairs_per_delay * prefactor * scale_jitter * c;
            if plan.poisson_noise {
                draw_poisson(&mut rng, mean)
            } else {
                mean
            }
        })
        .collect();
    Ok(CoincidenceCurve::new(ports, plan.tau.clone(), counts)?)
}

/// Calibration curve measured on the separate beam splitter, fed from the
/// same source as ports 1 and 2.
pub fn simulate_calibration(plan: &ExperimentPlan) -> Result<CoincidenceCurve, SimulationError> {
    let (bs_rep, _) = beam_splitter(plan.theta_cal);
    let ports = PortTuple::new(1, 2, 1, 2).unwrap();
    let params = crate::coincidence::bs_submatrix(plan.theta_cal);
    let prefactor = tuple_loss_prefactor(&bs_rep, &LossModel::lossless(2), ports);
    let (shift, scale_jitter) = plan.nuisance("calibration");
    let shifted: Vec<f64> = plan.tau.iter().map(|t| t - shift).collect();
    let shape =
        coincidence_curve(&plan.spectra[0], &plan.spectra[1], &shifted, &params, plan.gamma_true)?;
    let mut rng = SeedStream::new(plan.seed).child("noise-calibration").rng();
    let counts: Vec<f64> = shape
        .iter()
        .map(|c| {
            let mean = plan.pairs_per_delay * prefactor * scale_jitter * c;
            if plan.poisson_noise {
                draw_poisson(&mut rng, mean)
            } else {
                mean
            }
        })
        .collect();
    Ok(CoincidenceCurve::new(ports, plan.tau.clone(), counts)?)
}

/// Single-photon counting on the calibration beam splitter itself, used to
/// estimate its reflectivity before the calibration fit.
pub fn simulate_calibration_singles(plan: &ExperimentPlan) -> Result<SinglePhotonCounts, SimulationError> {
    let (bs_rep, bs_loss) = beam_splitter(plan.theta_cal);
    singles_for(
        &bs_rep,
        &bs_loss,
        plan.reps,
        plan.photons_per_run,
        plan.poisson_noise,
        SeedStream::new(plan.seed).child("cal-singles"),
    )
}

/// Everything one direct-mode experiment produces.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub singles: SinglePhotonCounts,
    pub cal_singles: SinglePhotonCounts,
    pub calibration: CoincidenceCurve,
    pub curves: BTreeMap<PortTuple, CoincidenceCurve>,
}

/// Direct-mode acquisition of all required tuples.
pub fn simulate_direct(plan: &ExperimentPlan) -> Result<SimulatedData, SimulationError> {
    plan.validate()?;
    let mut curves = BTreeMap::new();
    for ports in required_tuples(plan.modes()) {
        curves.insert(ports, simulate_coincidence(plan, ports)?);
    }
    Ok(SimulatedData {
        singles: simulate_single_counts(plan)?,
        cal_singles: simulate_calibration_singles(plan)?,
        calibration: simulate_calibration(plan)?,
        curves,
    })
}

/// Curve source backed by the simulator; any tuple can be produced on
/// demand, which is what adaptive relabeling and instability mitigation
/// assume of a live experiment.
pub struct SimulatorSource<'a> {
    pub plan: &'a ExperimentPlan,
}

impl CurveSource for SimulatorSource<'_> {
    fn curve(&self, ports: PortTuple) -> Result<CoincidenceCurve, EstimationError> {
        simulate_coincidence(self.plan, ports)
            .map_err(|e| EstimationError::Invalid(format!("simulation failed for {ports}: {e}")))
    }
}

/// One recorded scattershot event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScattershotEvent {
    /// Herald detectors that fired (1-based input ports).
    pub heralds: Vec<usize>,
    /// Output detectors that fired (1-based output ports).
    pub outputs: Vec<usize>,
    /// Currently swept delay stage and its setting.
    pub delay_setting: (usize, f64),
}

/// How one event was classified by the selection rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventClass {
    /// Exactly one herald and one output click: single-photon data.
    Single { input: usize, output: usize },
    /// Two heralds, two output clicks, ports usable: coincidence data.
    Pair,
    /// Nothing fired.
    Empty,
    /// One herald, but the photon was lost.
    SingleLost,
    /// Two heralds but the cycle's delay stage was not part of the pair.
    ScheduleMismatch,
    /// Two heralds on ports without a controllable delay (neither 1 nor 2).
    UndelayedPair,
    /// Two heralds, fewer than two output clicks.
    PairNoCoincidence,
    /// Two heralds and two clicks, but the output pair misses ports 1 and 2.
    UnmatchedOutputs,
    /// More than two heralds fired.
    MultiHerald,
}

/// Selection rules applied to one event.
pub fn classify_event(event: &ScattershotEvent) -> EventClass {
    match event.heralds.len() {
        0 => EventClass::Empty,
        1 => match event.outputs.len() {
            1 => EventClass::Single { input: event.heralds[0], output: event.outputs[0] },
            _ => EventClass::SingleLost,
        },
        2 => {
            let (a, b) = (event.heralds[0], event.heralds[1]);
            if a.min(b) > 2 {
                return EventClass::UndelayedPair;
            }
            // pairs containing port 1 are collected during the port-1 sweep,
            // the remaining (2, x) pairs during the port-2 sweep
            let required_stage = if a.min(b) == 1 { 1 } else { 2 };
            if event.delay_setting.0 != required_stage {
                return EventClass::ScheduleMismatch;
            }
            if event.outputs.len() != 2 {
                return EventClass::PairNoCoincidence;
            }
            if event.outputs[0].min(event.outputs[1]) > 2 {
                return EventClass::UnmatchedOutputs;
            }
            EventClass::Pair
        }
        _ => EventClass::MultiHerald,
    }
}

/// Bookkeeping over a scattershot run; retained plus discarded equals the
/// total cycle count.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScattershotCounters {
    pub cycles: u64,
    pub singles_retained: u64,
    pub pairs_retained: u64,
    pub empty: u64,
    pub single_lost: u64,
    pub schedule_mismatch: u64,
    pub undelayed_pair: u64,
    pub pair_no_coincidence: u64,
    pub unmatched_outputs: u64,
    pub multi_herald: u64,
}

impl ScattershotCounters {
    pub fn retained(&self) -> u64 {
        self.singles_retained + self.pairs_retained
    }

    pub fn discarded(&self) -> u64 {
        self.empty
            + self.single_lost
            + self.schedule_mismatch
            + self.undelayed_pair
            + self.pair_no_coincidence
            + self.unmatched_outputs
            + self.multi_herald
    }
}

/// Scattershot acquisition output: structurally identical to direct mode,
/// plus the event accounting.
#[derive(Debug, Clone)]
pub struct ScattershotData {
    pub data: SimulatedData,
    pub counters: ScattershotCounters,
}

struct PairTable {
    /// Unordered output pairs and cumulative coincidence probabilities per
    /// delay index.
    outputs: Vec<(usize, usize)>,
    cumulative: Vec<Vec<f64>>,
}

/// Scattershot acquisition without the completeness gate; see
/// [`simulate_scattershot`] for the gated variant.
pub fn acquire_scattershot(
    plan: &ExperimentPlan,
    cycles: u64,
) -> Result<ScattershotData, SimulationError> {
    plan.validate()?;
    let m = plan.modes();
    let reps = plan.reps;
    let tau = &plan.tau;
    let l = tau.len();
    let h = plan.herald_prob;

    // Per-input-port singles tables: cumulative detection probability.
    let mut singles_cum = vec![vec![0.0; m]; m];
    for j in 0..m {
        let mut acc = 0.0;
        for i in 0..m {
            acc += single_photon_prob(&plan.rep, &plan.loss, i + 1, j + 1)?;
            singles_cum[j][i] = acc;
        }
        if singles_cum[j][m - 1] > 1.0 + 1e-9 {
            return Err(SimulationError::InvalidPlan("detection probabilities exceed one".into()));
        }
    }

    // Stage zero errors, one per controllable delay line.
    let (shift1, _) = plan.nuisance("scattershot-stage-1");
    let (shift2, _) = plan.nuisance("scattershot-stage-2");

    // Coincidence outcome tables per delayed input pair per tau index.
    let mut pair_tables: BTreeMap<(usize, usize), PairTable> = BTreeMap::new();
    for a in 1..=2usize.min(m) {
        for b in (a + 1)..=m {
            let stage_shift = if a == 1 { shift1 } else { shift2 };
            let mut outputs = Vec::new();
            for c in 1..=m {
                for d in (c + 1)..=m {
                    outputs.push((c, d));
                }
            }
            let mut cumulative = vec![vec![0.0; outputs.len()]; l];
            let shifted: Vec<f64> = tau.iter().map(|t| t - stage_shift).collect();
            for (oi, &(c, d)) in outputs.iter().enumerate() {
                let ports = PortTuple::new(c, d, a, b).unwrap();
                let params = tuple_params(&plan.rep, ports)?;
                let prefactor = tuple_loss_prefactor(&plan.rep, &plan.loss, ports);
                let curve = coincidence_curve(
                    &plan.spectra[a - 1],
                    &plan.spectra[b - 1],
                    &shifted,
                    &params,
                    plan.gamma_true,
                )?;
                for (t, &c_val) in curve.iter().enumerate() {
                    let prev = if oi == 0 { 0.0 } else { cumulative[t][oi - 1] };
                    cumulative[t][oi] = prev + prefactor * c_val;
                }
            }
            for t in 0..l {
                let total = cumulative[t][outputs.len() - 1];
                if total > 1.0 + 1e-9 {
                    return Err(SimulationError::InvalidPlan(
                        "pair coincidence probabilities exceed one".into(),
                    ));
                }
            }
            pair_tables.insert((a, b), PairTable { outputs: outputs.clone(), cumulative });
        }
    }

    // Map unordered output/input pairs onto the stored tuple list.
    let tuples = required_tuples(m);
    let mut tuple_index: BTreeMap<((usize, usize), (usize, usize)), Vec<usize>> = BTreeMap::new();
    for (k, t) in tuples.iter().enumerate() {
        tuple_index.entry(t.unordered()).or_default().push(k);
    }
    let mut curve_counts: Vec<Vec<f64>> = vec![vec![0.0; l]; tuples.len()];

    let mut singles = SinglePhotonCounts::zeros(m, reps)?;
    let mut counters = ScattershotCounters { cycles, ..Default::default() };
    let mut rng = SeedStream::new(plan.seed).child("scattershot").rng();

    // Delay schedule: sweep the port-1 stage through the grid, then the
    // port-2 stage (an m = 2 interferometer needs only the first sweep).
    let stages: &[usize] = if m == 2 { &[1] } else { &[1, 2] };
    let settings = stages.len() * l;
    let mut fired = Vec::with_capacity(m);

    for cycle in 0..cycles {
        let setting = (cycle as usize * settings) / cycles.max(1) as usize;
        let stage = stages[setting / l];
        let t_idx = setting % l;
        let block = ((cycle as u128 * reps as u128) / cycles.max(1) as u128) as usize;
        let block = block.min(reps - 1);

        fired.clear();
        for port in 1..=m {
            if rng.random::<f64>() < h {
                fired.push(port);
            }
        }
        match fired.len() {
            0 => counters.empty += 1,
            1 => {
                let j = fired[0];
                let u: f64 = rng.random();
                let cum = &singles_cum[j - 1];
                match cum.iter().position(|&c| u < c) {
                    Some(i) => {
                        singles.add(i, j - 1, block, 1);
                        counters.singles_retained += 1;
                    }
                    None => counters.single_lost += 1,
                }
            }
            2 => {
                let (a, b) = (fired[0], fired[1]);
                if a > 2 {
                    counters.undelayed_pair += 1;
                    continue;
                }
                let required_stage = if a == 1 { 1 } else { 2 };
                if stage != required_stage {
                    counters.schedule_mismatch += 1;
                    continue;
                }
                let table = &pair_tables[&(a, b)];
                let u: f64 = rng.random();
                let row = &table.cumulative[t_idx];
                match row.iter().position(|&c| u < c) {
                    Some(oi) => {
                        let (c, d) = table.outputs[oi];
                        if c.min(d) > 2 {
                            counters.unmatched_outputs += 1;
                            continue;
                        }
                        match tuple_index.get(&((c, d), (a.min(b), a.max(b)))) {
                            Some(idxs) => {
                                for &k in idxs {
                                    curve_counts[k][t_idx] += 1.0;
                                }
                                counters.pairs_retained += 1;
                            }
                            None => counters.unmatched_outputs += 1,
                        }
                    }
                    None => counters.pair_no_coincidence += 1,
                }
            }
            _ => counters.multi_herald += 1,
        }
    }

    let mut curves = BTreeMap::new();
    for (k, t) in tuples.iter().enumerate() {
        curves.insert(*t, CoincidenceCurve::new(*t, tau.clone(), curve_counts[k].clone())?);
    }
    Ok(ScattershotData {
        data: SimulatedData {
            singles,
            cal_singles: simulate_calibration_singles(plan)?,
            calibration: simulate_calibration(plan)?,
            curves,
        },
        counters,
    })
}

/// Completeness gate over a scattershot acquisition.
pub fn check_acquisition(
    plan: &ExperimentPlan,
    data: &ScattershotData,
) -> Result<(), SimulationError> {
    let mut report = IncompleteReport::default();
    for (ports, curve) in &data.data.curves {
        let total: f64 = curve.counts.iter().sum();
        if (total as u64) < plan.min_events_per_tuple {
            report.missing_tuples.push(*ports);
        }
    }
    let singles = &data.data.singles;
    for j in 0..plan.modes() {
        for b in 0..plan.reps {
            let total: u64 = (0..plan.modes()).map(|i| singles.get(i, j, b)).sum();
            if total == 0 {
                report.starved_singles.push((j + 1, b + 1));
            }
        }
    }
    if report.missing_tuples.is_empty() && report.starved_singles.is_empty() {
        Ok(())
    } else {
        Err(SimulationError::IncompleteAcquisition {
            missing: report.missing_tuples.len(),
            starved: report.starved_singles.len(),
            report,
        })
    }
}

/// Scattershot acquisition with the completeness gate applied.
pub fn simulate_scattershot(
    plan: &ExperimentPlan,
    cycles: u64,
) -> Result<ScattershotData, SimulationError> {
    let data = acquire_scattershot(plan, cycles)?;
    check_acquisition(plan, &data)?;
    Ok(data)
}
