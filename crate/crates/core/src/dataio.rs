//! Datasets of labelled motor-imagery trials.
//!
//! A dataset on disk is a JSON manifest plus one file per trial. Trial files
//! are either headerless little-endian `f32` (`.f32`, row-major samples ×
//! channels) or CSV with a header row of channel names (`.csv`).
//!
//! Each loaded [`Trial`] keeps the whole recording; [`Trial::imagery`] returns
//! the `[onset_s, onset_s + duration_s]` segment. Windows that overrun the
//! recording are rejected at load time.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{HcspError, Result};
use crate::hierarchy::{GestureClass, NUM_GESTURES};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One multichannel recording, channels × samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialMatrix {
    pub data: DMatrix<f64>,
    pub sample_rate_hz: f64,
}

impl TrialMatrix {
    pub fn new(data: DMatrix<f64>, sample_rate_hz: f64) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(HcspError::param("data", "a trial needs at least 2 channels"));
        }
        if data.ncols() < 1 {
            return Err(HcspError::param("data", "a trial needs at least 1 sample"));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(HcspError::param(
                "sample_rate_hz",
                format!("must be positive, got {sample_rate_hz}"),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(HcspError::param("data", "trial contains non-finite samples"));
        }
        Ok(Self {
            data,
            sample_rate_hz,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples() as f64 / self.sample_rate_hz
    }

    /// Columns `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> TrialMatrix {
        TrialMatrix {
            data: self.data.columns(start, len).into_owned(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    /// Path relative to the manifest directory.
    #[serde(rename = "file")]
    pub file_path: PathBuf,
    pub gesture: GestureClass,
    pub onset_s: f64,
    pub duration_s: f64,
}

impl TrialMeta {
    /// Sample range of the imagery segment at `fs`.
    pub fn sample_range(&self, fs: f64) -> (usize, usize) {
        let start = (self.onset_s * fs).round() as usize;
        let len = (self.duration_s * fs).round() as usize;
        (start, len)
    }

    fn check_extent(&self, trial: &TrialMatrix) -> Result<()> {
        if !(self.onset_s >= 0.0 && self.duration_s > 0.0) {
            return Err(HcspError::Schema(format!(
                "{}: onset_s must be >= 0 and duration_s > 0",
                self.file_path.display()
            )));
        }
        let (start, len) = self.sample_range(trial.sample_rate_hz);
        if len == 0 || start + len > trial.samples() {
            return Err(HcspError::Schema(format!(
                "{}: window [{}, {}] s exceeds the recorded {:.3} s",
                self.file_path.display(),
                self.onset_s,
                self.onset_s + self.duration_s,
                trial.duration_s()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub meta: TrialMeta,
    pub recording: TrialMatrix,
}

impl Trial {
    /// The motor-imagery segment `[onset_s, onset_s + duration_s]`.
    pub fn imagery(&self) -> TrialMatrix {
        let (start, len) = self.meta.sample_range(self.recording.sample_rate_hz);
        self.recording.slice(start, len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn labels(&self) -> Vec<GestureClass> {
        self.trials.iter().map(|t| t.meta.gesture).collect()
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

/// Trials per gesture, indexed by leaf index.
pub fn gesture_counts(ds: &Dataset) -> [usize; NUM_GESTURES] {
    let mut counts = [0; NUM_GESTURES];
    for t in &ds.trials {
        counts[t.meta.gesture.leaf_index()] += 1;
    }
    counts
}

/// Same tally keyed by gesture, for reports.
pub fn gesture_count_map(ds: &Dataset) -> BTreeMap<usize, (GestureClass, usize)> {
    let counts = gesture_counts(ds);
    GestureClass::all()
        .into_iter()
        .map(|g| (g.leaf_index(), (g, counts[g.leaf_index()])))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    subject_id: String,
    sample_rate_hz: f64,
    channels: Vec<String>,
    trials: Vec<TrialMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialFormat {
    #[default]
    F32,
    Csv,
}

impl TrialFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TrialFormat::F32 => "f32",
            TrialFormat::Csv => "csv",
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("f32") => Ok(TrialFormat::F32),
            Some("csv") => Ok(TrialFormat::Csv),
            _ => Err(HcspError::Schema(format!(
                "{}: trial files must end in .f32 or .csv",
                path.display()
            ))),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| HcspError::Load {
        path: path.to_owned(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| HcspError::Write {
        path: path.to_owned(),
        source,
    })
}

/// Read a headerless `.f32` trial with `channels` columns.
pub fn read_f32_trial(path: &Path, channels: usize, sample_rate_hz: f64) -> Result<TrialMatrix> {
    let bytes = read_bytes(path)?;
    let row_bytes = 4 * channels;
    if channels == 0 || bytes.is_empty() || bytes.len() % row_bytes != 0 {
        return Err(HcspError::Schema(format!(
            "{}: {} bytes is not a whole number of {channels}-channel float32 rows",
            path.display(),
            bytes.len()
        )));
    }
    let samples = bytes.len() / row_bytes;
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    // File is samples × channels row-major, i.e. channels × samples column-major.
    let data = DMatrix::from_iterator(channels, samples, values);
    TrialMatrix::new(data, sample_rate_hz)
        .map_err(|e| HcspError::Schema(format!("{}: {e}", path.display())))
}

/// Samples are stored as `f32`; values that are not exactly representable
/// are rounded.
pub fn write_f32_trial(path: &Path, trial: &TrialMatrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * trial.data.len());
    for v in trial.data.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// Read a CSV trial. The header must name `expected_channels` when given.
pub fn read_csv_trial(
    path: &Path,
    expected_channels: Option<&[String]>,
    sample_rate_hz: f64,
) -> Result<TrialMatrix> {
    let bytes = read_bytes(path)?;
    let schema = |msg: String| HcspError::Schema(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| schema(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(schema("empty CSV".into()));
    }
    if let Some(expected) = expected_channels {
        if header.as_slice() != expected {
            return Err(schema(format!(
                "header {header:?} does not match manifest channels {expected:?}"
            )));
        }
    }
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        // Fields-per-record is enforced by the reader.
        let record = record.map_err(|e| schema(e.to_string()))?;
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| {
                schema(format!("row {} has non-numeric field {field:?}", row + 2))
            })?;
            values.push(v);
        }
    }
    let m = header.len();
    let samples = values.len() / m;
    if samples == 0 {
        return Err(schema("no samples".into()));
    }
    let data = DMatrix::from_vec(m, samples, values);
    TrialMatrix::new(data, sample_rate_hz).map_err(|e| schema(e.to_string()))
}

pub fn write_csv_trial(path: &Path, channel_names: &[String], trial: &TrialMatrix) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let to_schema = |e: csv::Error| HcspError::Schema(format!("{}: {e}", path.display()));
    writer.write_record(channel_names).map_err(to_schema)?;
    for col in trial.data.column_iter() {
        writer
            .write_record(col.iter().map(|v| format!("{v:e}")))
            .map_err(to_schema)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| HcspError::Schema(format!("{}: {e}", path.display())))?;
    write_bytes(path, &bytes)
}

/// Read a single trial file, picking the format from its extension.
pub fn read_trial(path: &Path, channel_names: &[String], sample_rate_hz: f64) -> Result<TrialMatrix> {
    match TrialFormat::from_path(path)? {
        TrialFormat::F32 => read_f32_trial(path, channel_names.len(), sample_rate_hz),
        TrialFormat::Csv => read_csv_trial(path, Some(channel_names), sample_rate_hz),
    }
}

/// Load a manifest and every trial it lists.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let bytes = read_bytes(path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| HcspError::Schema(format!("{}: {e}", path.display())))?;
    if !(manifest.sample_rate_hz.is_finite() && manifest.sample_rate_hz > 0.0) {
        return Err(HcspError::Schema(format!(
            "{}: sample_rate_hz must be positive",
            path.display()
        )));
    }
    if manifest.channels.len() < 2 {
        return Err(HcspError::Schema(format!(
            "{}: at least 2 channels are required",
            path.display()
        )));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let mut trials = Vec::with_capacity(manifest.trials.len());
    for meta in manifest.trials {
        let file = root.join(&meta.file_path);
        let recording = read_trial(&file, &manifest.channels, manifest.sample_rate_hz)?;
        if recording.channels() != manifest.channels.len() {
            return Err(HcspError::Schema(format!(
                "{}: {} channels, manifest declares {}",
                file.display(),
                recording.channels(),
                manifest.channels.len()
            )));
        }
        meta.check_extent(&recording)?;
        trials.push(Trial { meta, recording });
    }
    Ok(Dataset {
        subject_id: manifest.subject_id,
        sample_rate_hz: manifest.sample_rate_hz,
        channel_names: manifest.channels,
        trials,
    })
}

/// Write `ds` under `dir` and return the manifest path. Trial files are
/// renamed `trial_NNNN.<ext>`.
pub fn write_dataset(ds: &Dataset, dir: &Path, format: TrialFormat) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| HcspError::Write {
        path: dir.to_owned(),
        source,
    })?;
    let mut metas = Vec::with_capacity(ds.trials.len());
    for (i, trial) in ds.trials.iter().enumerate() {
        let name = PathBuf::from(format!("trial_{i:04}.{}", format.extension()));
        let path = dir.join(&name);
        match format {
            TrialFormat::F32 => write_f32_trial(&path, &trial.recording)?,
            TrialFormat::Csv => write_csv_trial(&path, &ds.channel_names, &trial.recording)?,
        }
        metas.push(TrialMeta {
            file_path: name,
            ..trial.meta.clone()
        });
    }
    let manifest = Manifest {
        subject_id: ds.subject_id.clone(),
        sample_rate_hz: ds.sample_rate_hz,
        channels: ds.channel_names.clone(),
        trials: metas,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_bytes(&path, &json)?;
    Ok(path)
}
