//! Trained per-level classifiers and the full hierarchical model bundle.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::csp::{
    category_covariance, centered_scatter, csp_features, features_from_scatter, mean_covariance,
    normalized_covariance, project, solve_csp, CovMatrix, FeatureVector, SpatialFilter,
};
use crate::dataio::{Trial, TrialMatrix};
use crate::error::{HcspError, Result};
use crate::fusion::{decide, BranchLikelihoods, DecisionPolicy, EpochDecision, InterLevelPrior, LogLikPair};
use crate::hierarchy::{partition_labels, CategoryScope, GestureClass, LevelId, Side};
use crate::preprocess::{
    apply_filter, default_num_taps, design_bandpass, evidence_windows_with_mode, EvidenceMode,
    FilterKernel,
};
use crate::scoring::{fit_density, fit_lda, log_likelihood, score, FisherWeights, GaussianDensity, LdaMode};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierTopology {
    /// One classifier per level trained on all trials (3 in total).
    #[default]
    Pooled,
    /// One classifier per tree node (1 + 2 + 4 = 7).
    PerBranch,
}

/// Per-window statistics that everything downstream of filtering needs.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowStats {
    /// Trace-normalized spatial covariance.
    pub cov: CovMatrix,
    /// Mean-removed scatter for projection variances.
    pub scatter: DMatrix<f64>,
}

impl WindowStats {
    pub fn from_window(data: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            cov: normalized_covariance(data)?,
            scatter: centered_scatter(data),
        })
    }
}

/// Spatial filter, Fisher weights and category densities for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelClassifier {
    pub level: LevelId,
    pub scope: CategoryScope,
    /// Filters kept per side; features have `2k` components.
    pub k: usize,
    pub filter: SpatialFilter,
    pub weights: FisherWeights,
    /// Score densities for category −1 and +1.
    pub densities: [GaussianDensity; 2],
}

impl LevelClassifier {
    /// Fit on labelled windows. Only windows admitted by `scope` are used.
    pub fn train(
        level: LevelId,
        scope: CategoryScope,
        k: usize,
        lda_mode: LdaMode,
        samples: &[(GestureClass, &WindowStats)],
    ) -> Result<Self> {
        let labels: Vec<GestureClass> = samples.iter().map(|(g, _)| *g).collect();
        let (neg, pos) = partition_labels(&labels, level, &scope)?;

        let side_cov = |idx: &[usize]| -> Result<CovMatrix> {
            // Per-class means weighted by class sample counts.
            let mut by_class: BTreeMap<usize, Vec<&CovMatrix>> = BTreeMap::new();
            for &i in idx {
                by_class
                    .entry(labels[i].leaf_index())
                    .or_default()
                    .push(&samples[i].1.cov);
            }
            let counts: Vec<usize> = by_class.values().map(Vec::len).collect();
            let means: Vec<CovMatrix> = by_class
                .into_values()
                .map(|c| mean_covariance(c).expect("non-empty class"))
                .collect();
            category_covariance(&means, &counts)
        };
        let filter = solve_csp(&side_cov(&neg)?, &side_cov(&pos)?)?;
        let selected = filter.selected(k)?;

        let features = |idx: &[usize]| -> Vec<FeatureVector> {
            idx.iter()
                .map(|&i| features_from_scatter(&selected, &samples[i].1.scatter))
                .collect()
        };
        let (f_neg, f_pos) = (features(&neg), features(&pos));
        let weights = fit_lda(lda_mode, &f_neg, &f_pos)?;
        let density = |fs: &[FeatureVector]| -> Result<GaussianDensity> {
            let scores = fs.iter().map(|f| score(&weights, f)).collect::<Result<Vec<_>>>()?;
            fit_density(&scores).map_err(|e| {
                HcspError::Training(format!("{level} {scope:?}: {e}"))
            })
        };
        let densities = [density(&f_neg)?, density(&f_pos)?];
        Ok(Self {
            level,
            scope,
            k,
            filter,
            weights,
            densities,
        })
    }

    pub fn channels(&self) -> usize {
        self.filter.channels()
    }

    /// Features of a filtered window, channels × samples.
    pub fn features(&self, window: &DMatrix<f64>) -> Result<FeatureVector> {
        if window.nrows() != self.channels() {
            return Err(HcspError::Model(format!(
                "window has {} channels, classifier expects {}",
                window.nrows(),
                self.channels()
            )));
        }
        Ok(csp_features(&project(&self.filter, window, self.k)?))
    }

    pub fn log_likelihood_pair(&self, f: &FeatureVector) -> Result<LogLikPair> {
        let s = score(&self.weights, f)?;
        Ok([
            log_likelihood(&self.densities[0], &s)?,
            log_likelihood(&self.densities[1], &s)?,
        ])
    }

    /// One likelihood pair per window.
    pub fn window_log_likelihoods(&self, windows: &[WindowStats]) -> Result<Vec<LogLikPair>> {
        let selected = self.filter.selected(self.k)?;
        windows
            .iter()
            .map(|w| {
                if w.scatter.nrows() != self.channels() {
                    return Err(HcspError::Model(format!(
                        "window has {} channels, classifier expects {}",
                        w.scatter.nrows(),
                        self.channels()
                    )));
                }
                self.log_likelihood_pair(&features_from_scatter(&selected, &w.scatter))
            })
            .collect()
    }
}

/// Everything needed to reproduce the front end of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub k: usize,
    pub topology: ClassifierTopology,
    pub lda_mode: LdaMode,
    pub evidence_mode: EvidenceMode,
    pub band: [f64; 2],
    pub num_taps: usize,
    /// Evidence intervals per training trial.
    pub t_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HcspModel {
    pub format_version: u32,
    pub channels: usize,
    pub sample_rate_hz: f64,
    pub settings: ModelSettings,
    pub classifiers: Vec<LevelClassifier>,
}

impl HcspModel {
    /// Train every level classifier the topology calls for.
    pub fn fit(
        channels: usize,
        sample_rate_hz: f64,
        settings: ModelSettings,
        samples: &[(GestureClass, &WindowStats)],
    ) -> Result<Self> {
        let scopes: Vec<(LevelId, CategoryScope)> = match settings.topology {
            ClassifierTopology::Pooled => LevelId::ALL
                .iter()
                .map(|&l| (l, CategoryScope::Pooled))
                .collect(),
            ClassifierTopology::PerBranch => {
                let mut v = vec![(LevelId::Hand, CategoryScope::branch(&[]))];
                for h in Side::BOTH {
                    v.push((LevelId::Fingers, CategoryScope::branch(&[h])));
                }
                for h in Side::BOTH {
                    for f in Side::BOTH {
                        v.push((LevelId::Thumb, CategoryScope::branch(&[h, f])));
                    }
                }
                v
            }
        };
        let classifiers = scopes
            .into_iter()
            .map(|(level, scope)| {
                LevelClassifier::train(level, scope, settings.k, settings.lda_mode, samples)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            format_version: MODEL_FORMAT_VERSION,
            channels,
            sample_rate_hz,
            settings,
            classifiers,
        })
    }

    /// The classifier responsible for `level` on the branch `path`
    /// (sides of the levels above it).
    pub fn classifier(&self, level: LevelId, path: &[Side]) -> Result<&LevelClassifier> {
        self.classifiers
            .iter()
            .find(|c| {
                c.level == level
                    && match &c.scope {
                        CategoryScope::Pooled => true,
                        CategoryScope::Branch(p) => {
                            p.len() == level.index()
                                && p.iter().zip(path).all(|(a, b)| Side::from(*a) == *b)
                        }
                    }
            })
            .ok_or_else(|| HcspError::Model(format!("no classifier for {level} on {path:?}")))
    }

    /// Per-window likelihoods arranged by branch.
    pub fn interval_likelihoods(&self, windows: &[WindowStats]) -> Result<Vec<BranchLikelihoods>> {
        let run = |level, path: &[Side]| self.classifier(level, path)?.window_log_likelihoods(windows);
        let l1 = run(LevelId::Hand, &[])?;
        let l2 = [run(LevelId::Fingers, &[Side::Neg])?, run(LevelId::Fingers, &[Side::Pos])?];
        let l3 = [
            [
                run(LevelId::Thumb, &[Side::Neg, Side::Neg])?,
                run(LevelId::Thumb, &[Side::Neg, Side::Pos])?,
            ],
            [
                run(LevelId::Thumb, &[Side::Pos, Side::Neg])?,
                run(LevelId::Thumb, &[Side::Pos, Side::Pos])?,
            ],
        ];
        Ok((0..windows.len())
            .map(|i| BranchLikelihoods {
                l1: l1[i],
                l2: [l2[0][i], l2[1][i]],
                l3: [[l3[0][0][i], l3[0][1][i]], [l3[1][0][i], l3[1][1][i]]],
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: HcspModel =
            serde_json::from_str(text).map_err(|e| HcspError::Schema(format!("model file: {e}")))?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(HcspError::Schema(format!(
                "model format_version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                model.format_version
            )));
        }
        if model.classifiers.iter().any(|c| c.channels() != model.channels) {
            return Err(HcspError::Schema("classifier channel counts disagree".into()));
        }
        Ok(model)
    }

    pub fn front_end(&self) -> Result<FrontEnd> {
        FrontEnd::new(
            self.sample_rate_hz,
            self.settings.band,
            Some(self.settings.num_taps),
        )
    }

    /// One decision epoch on an unlabeled imagery recording that starts at
    /// sample 0.
    pub fn classify(
        &self,
        recording: &TrialMatrix,
        prior: &InterLevelPrior,
        policy: DecisionPolicy,
    ) -> Result<EpochDecision> {
        if recording.channels() != self.channels {
            return Err(HcspError::Model(format!(
                "trial has {} channels, model expects {}",
                recording.channels(),
                self.channels
            )));
        }
        if recording.sample_rate_hz != self.sample_rate_hz {
            return Err(HcspError::Model(format!(
                "trial sampled at {} Hz, model trained at {} Hz",
                recording.sample_rate_hz, self.sample_rate_hz
            )));
        }
        let mode = self.settings.evidence_mode;
        let n = policy.max_intervals.min(self.settings.t_train);
        let filtered = apply_filter(&self.front_end()?.kernel, recording)?;
        let t = n.min(crate::preprocess::available_intervals(&filtered));
        if t == 0 {
            return Err(HcspError::DegenerateTrial(format!(
                "{} samples is shorter than one evidence interval",
                recording.samples()
            )));
        }
        let windows = evidence_windows_with_mode(&filtered, t, mode)?
            .iter()
            .map(|w| WindowStats::from_window(&w.data))
            .collect::<Result<Vec<_>>>()?;
        decide(self, &windows, mode, prior, policy)
    }
}

/// Band-pass filtering plus window statistics for whole trials.
#[derive(Debug, Clone)]
pub struct FrontEnd {
    pub kernel: FilterKernel,
}

/// Filtered evidence for one trial: statistics of every available interval
/// under both evidence schemes.
#[derive(Debug, Clone)]
pub struct PreparedTrial {
    pub gesture: GestureClass,
    pub subwindows: Vec<WindowStats>,
    pub growing: Vec<WindowStats>,
}

impl PreparedTrial {
    pub fn intervals(&self) -> usize {
        self.subwindows.len()
    }

    /// Windows used to train at `t` intervals.
    pub fn training_windows(&self, mode: EvidenceMode, t: usize) -> &[WindowStats] {
        match mode {
            EvidenceMode::Subwindows => &self.subwindows[..t],
            EvidenceMode::Growing => &self.growing[t - 1..t],
        }
    }

    /// Windows scored during a decision over `n` intervals.
    pub fn decision_windows(&self, mode: EvidenceMode, n: usize) -> &[WindowStats] {
        match mode {
            EvidenceMode::Subwindows => &self.subwindows[..n],
            EvidenceMode::Growing => &self.growing[..n],
        }
    }
}

impl FrontEnd {
    pub fn new(sample_rate_hz: f64, band: [f64; 2], num_taps: Option<usize>) -> Result<Self> {
        let taps = num_taps.unwrap_or_else(|| default_num_taps(sample_rate_hz));
        Ok(Self {
            kernel: design_bandpass(sample_rate_hz, band[0], band[1], taps)?,
        })
    }

    /// Filter the whole recording, cut the imagery segment, and summarize up
    /// to `max_intervals` one-second intervals.
    pub fn prepare(&self, trial: &Trial, max_intervals: usize) -> Result<PreparedTrial> {
        let filtered = apply_filter(&self.kernel, &trial.recording)?;
        let (start, len) = trial.meta.sample_range(filtered.sample_rate_hz);
        let segment = filtered.slice(start, len.min(filtered.samples() - start));
        self.prepare_segment(trial.meta.gesture, &segment, max_intervals)
    }

    /// Same as [`FrontEnd::prepare`] for an already-cut, already-filtered
    /// segment.
    pub fn prepare_segment(
        &self,
        gesture: GestureClass,
        segment: &crate::dataio::TrialMatrix,
        max_intervals: usize,
    ) -> Result<PreparedTrial> {
        let t = max_intervals.min(crate::preprocess::available_intervals(segment));
        let stats = |mode| -> Result<Vec<WindowStats>> {
            evidence_windows_with_mode(segment, t, mode)?
                .iter()
                .map(|w| WindowStats::from_window(&w.data))
                .collect()
        };
        Ok(PreparedTrial {
            gesture,
            subwindows: stats(EvidenceMode::Subwindows)?,
            growing: stats(EvidenceMode::Growing)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Windows whose channel-0 or channel-1 power depends on each axis.
    fn toy_samples(n_per_class: usize) -> Vec<(GestureClass, WindowStats)> {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut out = Vec::new();
        for g in GestureClass::all() {
            for _ in 0..n_per_class {
                let gains = [
                    1.0 + 0.8 * g.hand.side().sign() as f64,
                    1.0 + 0.6 * g.fingers.side().sign() as f64,
                    1.0 + 0.5 * g.thumb.side().sign() as f64,
                    1.0,
                    1.0,
                    1.0,
                ];
                let data = DMatrix::from_fn(6, 128, |c, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * gains[c].sqrt()
                });
                out.push((g, WindowStats::from_window(&data).unwrap()));
            }
        }
        out
    }

    fn settings(topology: ClassifierTopology) -> ModelSettings {
        ModelSettings {
            k: 1,
            topology,
            lda_mode: LdaMode::PerComponent,
            evidence_mode: EvidenceMode::Subwindows,
            band: [3.0, 30.0],
            num_taps: 129,
            t_train: 1,
        }
    }

    #[test]
    fn topology_determines_classifier_count() {
        let owned = toy_samples(6);
        let samples: Vec<_> = owned.iter().map(|(g, w)| (*g, w)).collect();
        let pooled = HcspModel::fit(6, 128.0, settings(ClassifierTopology::Pooled), &samples).unwrap();
        assert_eq!(pooled.classifiers.len(), 3);
        let branch = HcspModel::fit(6, 128.0, settings(ClassifierTopology::PerBranch), &samples).unwrap();
        assert_eq!(branch.classifiers.len(), 7);
        let c = branch.classifier(LevelId::Thumb, &[Side::Pos, Side::Neg]).unwrap();
        assert_eq!(c.scope, CategoryScope::branch(&[Side::Pos, Side::Neg]));
    }

    #[test]
    fn missing_gesture_fails_per_branch_only() {
        let owned: Vec<_> = toy_samples(6)
            .into_iter()
            .filter(|(g, _)| g.leaf_index() != 5)
            .collect();
        let samples: Vec<_> = owned.iter().map(|(g, w)| (*g, w)).collect();
        assert!(HcspModel::fit(6, 128.0, settings(ClassifierTopology::Pooled), &samples).is_ok());
        let err = HcspModel::fit(6, 128.0, settings(ClassifierTopology::PerBranch), &samples).unwrap_err();
        assert!(matches!(err, HcspError::Training(_)));
    }

    #[test]
    fn single_window_classifier_prefers_matching_side() {
        let owned = toy_samples(20);
        let samples: Vec<_> = owned.iter().map(|(g, w)| (*g, w)).collect();
        let model = HcspModel::fit(6, 128.0, settings(ClassifierTopology::Pooled), &samples).unwrap();
        let clf = model.classifier(LevelId::Hand, &[]).unwrap();
        let test = toy_samples(3);
        let mut correct = 0;
        for (g, w) in &test {
            let pair = clf.window_log_likelihoods(std::slice::from_ref(w)).unwrap()[0];
            if crate::fusion::pair_winner(pair) == g.hand.side() {
                correct += 1;
            }
        }
        assert!(correct >= 20, "{correct}/24");
    }

    #[test]
    fn scatter_and_sample_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let owned = toy_samples(6);
        let samples: Vec<_> = owned.iter().map(|(g, w)| (*g, w)).collect();
        let model = HcspModel::fit(6, 128.0, settings(ClassifierTopology::Pooled), &samples).unwrap();
        let data = DMatrix::from_fn(6, 128, |_, _| StandardNormal.sample(&mut rng));
        for clf in &model.classifiers {
            let direct = clf.log_likelihood_pair(&clf.features(&data).unwrap()).unwrap();
            let fast = clf
                .window_log_likelihoods(&[WindowStats::from_window(&data).unwrap()])
                .unwrap()[0];
            assert!((direct[0] - fast[0]).abs() < 1e-8 && (direct[1] - fast[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let owned = toy_samples(6);
        let samples: Vec<_> = owned.iter().map(|(g, w)| (*g, w)).collect();
        let model = HcspModel::fit(6, 128.0, settings(ClassifierTopology::PerBranch), &samples).unwrap();
        let text = model.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["format_version"], 1);
        assert!(v["classifiers"][0]["filter"]["v"][0].is_array());
        let back = HcspModel::from_json(&text).unwrap();
        assert_eq!(back.classifiers.len(), 7);
        let w = owned[0].1.clone();
        let a = model.interval_likelihoods(std::slice::from_ref(&w)).unwrap();
        let b = back.interval_likelihoods(std::slice::from_ref(&w)).unwrap();
        assert_eq!(a, b);

        let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 9", 1);
        assert!(matches!(HcspModel::from_json(&bumped), Err(HcspError::Schema(_))));
    }

    #[test]
    fn channel_mismatch_is_model_error() {
        let owned = toy_samples(6);
        let samples: Vec<_> = owned.iter().map(|(g, w)| (*g, w)).collect();
        let model = HcspModel::fit(6, 128.0, settings(ClassifierTopology::Pooled), &samples).unwrap();
        let small = WindowStats::from_window(&DMatrix::from_element(4, 10, 1.0).map(|v: f64| v + 0.1)).unwrap();
        assert!(matches!(
            model.interval_likelihoods(&[small]),
            Err(HcspError::Model(_))
        ));
    }
}
