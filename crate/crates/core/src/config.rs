//! Run configuration shared by training, classification and evaluation.
//!
//! Every field is optional in JSON; missing fields take the defaults below.

use serde::{Deserialize, Serialize};

use crate::dataio::TrialFormat;
use crate::error::{HcspError, Result};
use crate::fusion::{DecisionPolicy, InterLevelPrior};
use crate::model::{ClassifierTopology, ModelSettings};
use crate::preprocess::{default_num_taps, design_bandpass, EvidenceMode};
use crate::scoring::LdaMode;
use crate::synthgen::SynthConfig;

/// Either the literal string `"uniform"` or an explicit prior table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSpec {
    Named(String),
    Table(InterLevelPrior),
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::Named("uniform".into())
    }
}

impl PriorSpec {
    pub fn resolve(&self) -> Result<InterLevelPrior> {
        match self {
            PriorSpec::Named(name) if name == "uniform" => Ok(InterLevelPrior::uniform()),
            PriorSpec::Named(other) => Err(HcspError::param(
                "priors",
                format!("expected \"uniform\" or a table, got {other:?}"),
            )),
            PriorSpec::Table(t) => {
                t.validate()?;
                Ok(t.clone())
            }
        }
    }
}

/// Grid axes. `feature_counts` are total feature counts `2k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Defaults to `2, 4, …, min(m, 12)`.
    pub feature_counts: Option<Vec<usize>>,
    /// Defaults to `1..=5` seconds.
    pub window_lengths: Option<Vec<usize>>,
}

impl GridSpec {
    pub fn feature_counts_for(&self, channels: usize) -> Vec<usize> {
        self.feature_counts
            .clone()
            .unwrap_or_else(|| (1..=channels.min(12) / 2).map(|k| 2 * k).collect())
    }

    pub fn window_lengths(&self) -> Vec<usize> {
        self.window_lengths.clone().unwrap_or_else(|| (1..=5).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Band-pass edges in Hz.
    pub band: [f64; 2],
    /// FIR length; defaults to the next odd integer >= the sample rate.
    pub num_taps: Option<usize>,
    /// Spatial filters kept per side.
    pub k: usize,
    /// Evidence intervals (seconds) used for training and decisions.
    pub t_max: usize,
    pub evidence_mode: EvidenceMode,
    pub classifier_topology: ClassifierTopology,
    pub lda_mode: LdaMode,
    pub threshold: f64,
    /// Maximum intervals per decision epoch.
    #[serde(rename = "N", alias = "n_intervals")]
    pub n_intervals: usize,
    pub priors: PriorSpec,
    pub seed: u64,
    pub synth: SynthConfig,
    pub grid: GridSpec,
    pub trial_format: TrialFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            band: [3.0, 30.0],
            num_taps: None,
            k: 3,
            t_max: 5,
            evidence_mode: EvidenceMode::default(),
            classifier_topology: ClassifierTopology::default(),
            lda_mode: LdaMode::default(),
            threshold: 0.9,
            n_intervals: 5,
            priors: PriorSpec::default(),
            seed: 0,
            synth: SynthConfig::default(),
            grid: GridSpec::default(),
            trial_format: TrialFormat::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HcspError::param("config", e.to_string()))
    }

    /// Checks that do not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(HcspError::param("k", "must be at least 1"));
        }
        if self.t_max == 0 {
            return Err(HcspError::param("t_max", "must be at least 1"));
        }
        if self.n_intervals == 0 {
            return Err(HcspError::param("N", "must be at least 1"));
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(HcspError::param(
                "threshold",
                format!("must lie in (0, 1], got {}", self.threshold),
            ));
        }
        if let Some(n) = self.num_taps {
            if n < 3 || n % 2 == 0 {
                return Err(HcspError::param("num_taps", format!("must be odd and >= 3, got {n}")));
            }
        }
        let [lo, hi] = self.band;
        if !(lo > 0.0 && lo < hi) {
            return Err(HcspError::param("band", format!("need 0 < low < high, got {:?}", self.band)));
        }
        self.priors.resolve()?;
        Ok(())
    }

    /// Checks against a concrete sample rate and channel count.
    pub fn validate_for(&self, sample_rate_hz: f64, channels: usize) -> Result<()> {
        self.validate()?;
        design_bandpass(sample_rate_hz, self.band[0], self.band[1], self.taps_for(sample_rate_hz))?;
        if 2 * self.k > channels {
            return Err(HcspError::param(
                "k",
                format!("2k = {} exceeds the {channels} channels", 2 * self.k),
            ));
        }
        Ok(())
    }

    pub fn taps_for(&self, sample_rate_hz: f64) -> usize {
        self.num_taps.unwrap_or_else(|| default_num_taps(sample_rate_hz))
    }

    pub fn model_settings(&self, sample_rate_hz: f64) -> ModelSettings {
        ModelSettings {
            k: self.k,
            topology: self.classifier_topology,
            lda_mode: self.lda_mode,
            evidence_mode: self.evidence_mode,
            band: self.band,
            num_taps: self.taps_for(sample_rate_hz),
            t_train: self.t_max,
        }
    }

    /// Decisions never use more intervals than were trained on.
    pub fn policy(&self) -> DecisionPolicy {
        DecisionPolicy {
            threshold: self.threshold,
            max_intervals: self.n_intervals.min(self.t_max),
        }
    }
}
