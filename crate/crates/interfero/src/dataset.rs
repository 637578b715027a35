//! On-disk dataset layout shared by the simulator front end and the
//! characterization commands:
//!
//! ```text
//! <dir>/
//!   plan.json                  acquisition metadata (no ground truth)
//!   truth.json                 ground-truth representative, losses, gamma
//!   spectra/port_<j>.csv       omega,amplitude
//!   singles.csv                i,j,b,count
//!   calibration.csv            tau,counts
//!   curves/c_<i>_<i'>_<j>_<j'>.csv   tau,counts
//! ```
//!
//! The characterization path reads everything except `truth.json`, which
//! exists only so a separate scoring step can compare against the known
//! unitary.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CoincidenceCurve, LossModel, ModelError, PortTuple, RepresentativeMatrix, SinglePhotonCounts,
    Spectrum,
};
use crate::simulator::{ScattershotCounters, SimulatedData};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn bad(path: &Path, message: impl Into<String>) -> DatasetError {
    DatasetError::Malformed { path: path.to_path_buf(), message: message.into() }
}

/// Acquisition mode recorded in the dataset metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionMode {
    Direct,
    Scattershot,
}

/// `plan.json` inside a dataset: everything the characterization is allowed
/// to know. The estimated calibration angle counts as instrument knowledge;
/// the interferometer ground truth does not appear here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub m: usize,
    pub reps: usize,
    pub tau: Vec<f64>,
    pub photons_per_run: f64,
    pub pairs_per_delay: f64,
    /// Calibration beam-splitter angle estimated from its own singles.
    pub theta_cal_est: f64,
    pub poisson_noise: bool,
    pub seed: u64,
    pub mode: AcquisitionMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scattershot: Option<ScattershotCounters>,
}

/// `truth.json`: ground truth for scoring only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub rep: RepresentativeMatrix,
    pub loss: LossModel,
    pub gamma_true: f64,
}

/// A dataset loaded back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub spectra: Vec<Spectrum>,
    pub singles: SinglePhotonCounts,
    pub calibration: CoincidenceCurve,
    pub curves: BTreeMap<PortTuple, CoincidenceCurve>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| bad(path, format!("serialize: {e}")))?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| bad(path, format!("parse: {e}")))
}

pub fn write_spectrum_csv(path: &Path, spectrum: &Spectrum) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| bad(path, e.to_string()))?;
    w.write_record(["omega", "amplitude"]).map_err(|e| bad(path, e.to_string()))?;
    for (o, a) in spectrum.omega.iter().zip(&spectrum.amplitude) {
        w.write_record([o.to_string(), a.to_string()]).map_err(|e| bad(path, e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_spectrum_csv(path: &Path) -> Result<Spectrum, DatasetError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(path, e.to_string()))?;
    let mut omega = Vec::new();
    let mut amplitude = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| bad(path, e.to_string()))?;
        if record.len() != 2 {
            return Err(bad(path, "expected two columns: omega,amplitude"));
        }
        omega.push(record[0].parse::<f64>().map_err(|e| bad(path, e.to_string()))?);
        amplitude.push(record[1].parse::<f64>().map_err(|e| bad(path, e.to_string()))?);
    }
    Ok(Spectrum::new(omega, amplitude)?)
}

pub fn write_curve_csv(path: &Path, curve: &CoincidenceCurve) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| bad(path, e.to_string()))?;
    w.write_record(["tau", "counts"]).map_err(|e| bad(path, e.to_string()))?;
    for (t, c) in curve.tau.iter().zip(&curve.counts) {
        w.write_record([t.to_string(), c.to_string()]).map_err(|e| bad(path, e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_curve_csv(path: &Path, ports: PortTuple) -> Result<CoincidenceCurve, DatasetError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(path, e.to_string()))?;
    let mut tau = Vec::new();
    let mut counts = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| bad(path, e.to_string()))?;
        if record.len() != 2 {
            return Err(bad(path, "expected two columns: tau,counts"));
        }
        tau.push(record[0].parse::<f64>().map_err(|e| bad(path, e.to_string()))?);
        counts.push(record[1].parse::<f64>().map_err(|e| bad(path, e.to_string()))?);
    }
    Ok(CoincidenceCurve::new(ports, tau, counts)?)
}

pub fn write_singles_csv(path: &Path, singles: &SinglePhotonCounts) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| bad(path, e.to_string()))?;
    w.write_record(["i", "j", "b", "count"]).map_err(|e| bad(path, e.to_string()))?;
    for i in 0..singles.m {
        for j in 0..singles.m {
            for b in 0..singles.reps {
                w.write_record([
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    (b + 1).to_string(),
                    singles.get(i, j, b).to_string(),
                ])
                .map_err(|e| bad(path, e.to_string()))?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_singles_csv(path: &Path, m: usize, reps: usize) -> Result<SinglePhotonCounts, DatasetError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(path, e.to_string()))?;
    let mut singles = SinglePhotonCounts::zeros(m, reps)?;
    for record in r.records() {
        let record = record.map_err(|e| bad(path, e.to_string()))?;
        if record.len() != 4 {
            return Err(bad(path, "expected four columns: i,j,b,count"));
        }
        let parse = |k: usize| -> Result<usize, DatasetError> {
            record[k].parse::<usize>().map_err(|e| bad(path, e.to_string()))
        };
        let (i, j, b) = (parse(0)?, parse(1)?, parse(2)?);
        let count = record[3].parse::<u64>().map_err(|e| bad(path, e.to_string()))?;
        if i == 0 || i > m || j == 0 || j > m || b == 0 || b > reps {
            return Err(bad(path, format!("indices out of range: i={i} j={j} b={b}")));
        }
        singles.set(i - 1, j - 1, b - 1, count);
    }
    Ok(singles)
}

fn curve_file_name(ports: PortTuple) -> String {
    format!("c_{}_{}_{}_{}.csv", ports.out1, ports.out2, ports.in1, ports.in2)
}

fn parse_curve_file_name(name: &str) -> Option<PortTuple> {
    let stem = name.strip_prefix("c_")?.strip_suffix(".csv")?;
    let parts: Vec<usize> = stem.split('_').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    if parts.len() != 4 {
        return None;
    }
    PortTuple::new(parts[0], parts[1], parts[2], parts[3]).ok()
}

/// Write a complete dataset directory.
pub fn write_dataset(
    dir: &Path,
    meta: &DatasetMeta,
    truth: &TruthFile,
    spectra: &[Spectrum],
    data: &SimulatedData,
) -> Result<(), DatasetError> {
    fs::create_dir_all(dir.join("spectra")).map_err(io_err(dir))?;
    fs::create_dir_all(dir.join("curves")).map_err(io_err(dir))?;
    write_json(&dir.join("plan.json"), meta)?;
    write_json(&dir.join("truth.json"), truth)?;
    for (j, s) in spectra.iter().enumerate() {
        write_spectrum_csv(&dir.join("spectra").join(format!("port_{}.csv", j + 1)), s)?;
    }
    write_singles_csv(&dir.join("singles.csv"), &data.singles)?;
    write_curve_csv(&dir.join("calibration.csv"), &data.calibration)?;
    for (ports, curve) in &data.curves {
        write_curve_csv(&dir.join("curves").join(curve_file_name(*ports)), curve)?;
    }
    Ok(())
}

/// Read a dataset directory back; `truth.json` is deliberately not loaded.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let meta: DatasetMeta = read_json(&dir.join("plan.json"))?;
    let mut spectra = Vec::with_capacity(meta.m);
    for j in 1..=meta.m {
        spectra.push(read_spectrum_csv(&dir.join("spectra").join(format!("port_{j}.csv")))?);
    }
    let singles = read_singles_csv(&dir.join("singles.csv"), meta.m, meta.reps)?;
    let calibration = read_curve_csv(
        &dir.join("calibration.csv"),
        PortTuple::new(1, 2, 1, 2).expect("calibration ports"),
    )?;
    let curves_dir = dir.join("curves");
    let mut curves = BTreeMap::new();
    for entry in fs::read_dir(&curves_dir).map_err(io_err(&curves_dir))? {
        let entry = entry.map_err(io_err(&curves_dir))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        match parse_curve_file_name(&name) {
            Some(ports) => {
                curves.insert(ports, read_curve_csv(&entry.path(), ports)?);
            }
            None => {
                return Err(bad(&entry.path(), "unrecognized curve file name"));
            }
        }
    }
    Ok(Dataset { meta, spectra, singles, calibration, curves })
}

/// Load the ground truth when present.
pub fn read_truth(dir: &Path) -> Result<Option<TruthFile>, DatasetError> {
    let path = dir.join("truth.json");
    if !path.exists() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}
