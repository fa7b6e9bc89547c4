//! Leave-one-out evaluation, (features × window) grid search and
//! confusion-matrix summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::{gesture_counts, Dataset};
use crate::error::{HcspError, Result};
use crate::fusion::{decide, EpochDecision};
use crate::hierarchy::{GestureClass, LevelId, NUM_GESTURES};
use crate::model::{FrontEnd, HcspModel, PreparedTrial, WindowStats};
use crate::model::ClassifierTopology;
use crate::preprocess::EvidenceMode;
use crate::scoring::LdaMode;

/// Settings a report was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub k: usize,
    pub feature_count: usize,
    pub t: usize,
    pub threshold: f64,
    #[serde(rename = "N")]
    pub n_intervals: usize,
    pub topology: ClassifierTopology,
    pub evidence_mode: EvidenceMode,
    pub lda_mode: LdaMode,
    pub band: [f64; 2],
    pub num_taps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    /// `None` for gestures without trials.
    pub per_gesture_accuracy: [Option<f64>; NUM_GESTURES],
    pub n_trials: usize,
    pub mean_intervals_used: f64,
    pub threshold_met_fraction: f64,
    pub config: ConfigEcho,
}

/// Rows are true gestures, columns decided gestures, both in leaf order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ConfusionMatrix {
    pub counts: [[usize; NUM_GESTURES]; NUM_GESTURES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> [usize; NUM_GESTURES] {
        self.counts.map(|r| r.iter().sum())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\decided");
        for g in GestureClass::all() {
            out.push_str(&format!(",{g}"));
        }
        out.push('\n');
        for (g, row) in GestureClass::all().iter().zip(&self.counts) {
            out.push_str(&g.to_string());
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Share of all trials whose decision lands in the wrong branch at each
/// level: another hand, the other finger state on the right hand, or only the
/// thumb state wrong.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelConfusion {
    pub level1: f64,
    pub level2: f64,
    pub level3: f64,
}

pub fn confusion_block_stats(cm: &ConfusionMatrix) -> LevelConfusion {
    let total = cm.total();
    if total == 0 {
        return LevelConfusion {
            level1: 0.0,
            level2: 0.0,
            level3: 0.0,
        };
    }
    let mut blocks = [0usize; 3];
    for (i, row) in cm.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            // First differing bit from the top gives the level of the error.
            let diff = i ^ j;
            if diff & 4 != 0 {
                blocks[0] += c;
            } else if diff & 2 != 0 {
                blocks[1] += c;
            } else if diff & 1 != 0 {
                blocks[2] += c;
            }
        }
    }
    let t = total as f64;
    LevelConfusion {
        level1: blocks[0] as f64 / t,
        level2: blocks[1] as f64 / t,
        level3: blocks[2] as f64 / t,
    }
}

impl LevelConfusion {
    pub fn rate(&self, level: LevelId) -> f64 {
        match level {
            LevelId::Hand => self.level1,
            LevelId::Fingers => self.level2,
            LevelId::Thumb => self.level3,
        }
    }
}

/// Filter every trial once and summarize up to `max_intervals` intervals.
pub fn prepare_dataset(ds: &Dataset, cfg: &RunConfig, max_intervals: usize) -> Result<Vec<PreparedTrial>> {
    let front = FrontEnd::new(ds.sample_rate_hz, cfg.band, cfg.num_taps)?;
    ds.trials
        .par_iter()
        .map(|t| front.prepare(t, max_intervals))
        .collect()
}

/// Train a model on `train` indices of `prepared` only.
pub fn fit_fold(
    prepared: &[PreparedTrial],
    train: &[usize],
    channels: usize,
    sample_rate_hz: f64,
    cfg: &RunConfig,
) -> Result<HcspModel> {
    let t = cfg.t_max;
    if let Some(&j) = train.iter().find(|&&j| prepared[j].intervals() < t) {
        return Err(HcspError::param(
            "t_max",
            format!("trial {j} supplies {} s of imagery, {t} s requested", prepared[j].intervals()),
        ));
    }
    let samples: Vec<(GestureClass, &WindowStats)> = train
        .iter()
        .flat_map(|&j| {
            let p = &prepared[j];
            p.training_windows(cfg.evidence_mode, t)
                .iter()
                .map(move |w| (p.gesture, w))
        })
        .collect();
    HcspModel::fit(channels, sample_rate_hz, cfg.model_settings(sample_rate_hz), &samples)
}

/// Fit a model on every trial of `ds`.
pub fn train(ds: &Dataset, cfg: &RunConfig) -> Result<HcspModel> {
    cfg.validate_for(ds.sample_rate_hz, ds.channels())?;
    if ds.is_empty() {
        return Err(HcspError::Training("dataset has no trials".into()));
    }
    let prepared = prepare_dataset(ds, cfg, cfg.t_max)?;
    let all: Vec<usize> = (0..prepared.len()).collect();
    fit_fold(&prepared, &all, ds.channels(), ds.sample_rate_hz, cfg)
}

/// Per-trial decisions from a leave-one-out run.
#[derive(Debug, Clone)]
pub struct LoocvOutcome {
    pub report: AccuracyReport,
    pub confusion: ConfusionMatrix,
    pub decisions: Vec<EpochDecision>,
}

fn check_dataset(ds_counts: &[usize; NUM_GESTURES]) -> Result<()> {
    if let Some((i, n)) = ds_counts.iter().enumerate().find(|(_, n)| **n < 2) {
        return Err(HcspError::param(
            "dataset",
            format!(
                "leave-one-out needs at least 2 trials per gesture; {} has {n}",
                GestureClass::from_leaf_index(i).unwrap()
            ),
        ));
    }
    Ok(())
}

/// Leave-one-trial-out over already prepared trials.
pub fn loocv_prepared(
    prepared: &[PreparedTrial],
    channels: usize,
    sample_rate_hz: f64,
    cfg: &RunConfig,
) -> Result<LoocvOutcome> {
    cfg.validate_for(sample_rate_hz, channels)?;
    let mut counts = [0; NUM_GESTURES];
    for p in prepared {
        counts[p.gesture.leaf_index()] += 1;
    }
    check_dataset(&counts)?;
    if let Some((i, p)) = prepared.iter().enumerate().find(|(_, p)| p.intervals() < cfg.t_max) {
        return Err(HcspError::param(
            "t_max",
            format!(
                "trial {i} supplies {} s of imagery, {} s requested",
                p.intervals(),
                cfg.t_max
            ),
        ));
    }
    let prior = cfg.priors.resolve()?;
    let policy = cfg.policy();

    let decisions = (0..prepared.len())
        .into_par_iter()
        .map(|i| {
            let train: Vec<usize> = (0..prepared.len()).filter(|&j| j != i).collect();
            let model = fit_fold(prepared, &train, channels, sample_rate_hz, cfg)?;
            let windows = prepared[i].decision_windows(cfg.evidence_mode, policy.max_intervals);
            decide(&model, windows, cfg.evidence_mode, &prior, policy)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut confusion = ConfusionMatrix::default();
    for (p, d) in prepared.iter().zip(&decisions) {
        confusion.counts[p.gesture.leaf_index()][d.gesture.leaf_index()] += 1;
    }
    let n = prepared.len();
    let correct: usize = (0..NUM_GESTURES).map(|g| confusion.counts[g][g]).sum();
    let per_gesture_accuracy = std::array::from_fn(|g| {
        (counts[g] > 0).then(|| confusion.counts[g][g] as f64 / counts[g] as f64)
    });
    let report = AccuracyReport {
        accuracy: correct as f64 / n as f64,
        per_gesture_accuracy,
        n_trials: n,
        mean_intervals_used: decisions.iter().map(|d| d.intervals_used as f64).sum::<f64>() / n as f64,
        threshold_met_fraction: decisions.iter().filter(|d| d.threshold_met).count() as f64 / n as f64,
        config: ConfigEcho {
            k: cfg.k,
            feature_count: 2 * cfg.k,
            t: cfg.t_max,
            threshold: cfg.threshold,
            n_intervals: policy.max_intervals,
            topology: cfg.classifier_topology,
            evidence_mode: cfg.evidence_mode,
            lda_mode: cfg.lda_mode,
            band: cfg.band,
            num_taps: cfg.taps_for(sample_rate_hz),
        },
    };
    Ok(LoocvOutcome {
        report,
        confusion,
        decisions,
    })
}

/// Leave-one-trial-out: every trial is decided by a model trained on all
/// the others.
pub fn loocv(ds: &Dataset, cfg: &RunConfig) -> Result<(AccuracyReport, ConfusionMatrix)> {
    cfg.validate_for(ds.sample_rate_hz, ds.channels())?;
    check_dataset(&gesture_counts(ds))?;
    let prepared = prepare_dataset(ds, cfg, cfg.t_max)?;
    let out = loocv_prepared(&prepared, ds.channels(), ds.sample_rate_hz, cfg)?;
    Ok((out.report, out.confusion))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub feature_count: usize,
    pub window_s: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<AccuracyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

/// Accuracy over `feature_counts × window_lengths`, cells in row-major order
/// (feature count outer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySurface {
    pub feature_counts: Vec<usize>,
    pub window_lengths: Vec<usize>,
    pub cells: Vec<GridCell>,
}

impl AccuracySurface {
    pub fn cell(&self, feature_count: usize, window_s: usize) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.feature_count == feature_count && c.window_s == window_s)
    }

    pub fn accuracy(&self, feature_count: usize, window_s: usize) -> Option<f64> {
        self.cell(feature_count, window_s)?.report.as_ref().map(|r| r.accuracy)
    }

    /// Best evaluated cell; earliest in grid order on ties.
    pub fn best(&self) -> Option<&GridCell> {
        self.cells
            .iter()
            .filter(|c| c.report.is_some())
            .fold(None, |best: Option<&GridCell>, c| match best {
                Some(b) if b.report.as_ref().unwrap().accuracy >= c.report.as_ref().unwrap().accuracy => Some(b),
                _ => Some(c),
            })
    }

    /// Feature counts as rows, window lengths as columns; skipped cells empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature_count");
        for t in &self.window_lengths {
            out.push_str(&format!(",t={t}"));
        }
        out.push('\n');
        for &fc in &self.feature_counts {
            out.push_str(&fc.to_string());
            for &t in &self.window_lengths {
                match self.accuracy(fc, t) {
                    Some(a) => out.push_str(&format!(",{a:.6}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn cell_problem(fc: usize, t: usize, channels: usize, available: usize) -> Option<String> {
    if fc == 0 || fc % 2 != 0 {
        Some(format!("feature count {fc} is not a positive even number"))
    } else if fc > channels {
        Some(format!("feature count {fc} exceeds the {channels} channels"))
    } else if t == 0 || t > available {
        Some(format!("window {t} s exceeds the {available} s every trial supplies"))
    } else {
        None
    }
}

/// One leave-one-out run per grid cell. Infeasible or failing cells are
/// recorded as skipped and the rest of the grid still runs.
pub fn grid_search(
    ds: &Dataset,
    cfg: &RunConfig,
    feature_counts: &[usize],
    window_lengths: &[usize],
) -> Result<AccuracySurface> {
    cfg.validate()?;
    check_dataset(&gesture_counts(ds))?;
    let t_needed = window_lengths.iter().copied().max().unwrap_or(1);
    let prepared = prepare_dataset(ds, cfg, t_needed)?;
    let available = prepared.iter().map(|p| p.intervals()).min().unwrap_or(0);

    let grid: Vec<(usize, usize)> = feature_counts
        .iter()
        .flat_map(|&fc| window_lengths.iter().map(move |&t| (fc, t)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(fc, t)| {
            let mut cell = GridCell {
                feature_count: fc,
                window_s: t,
                report: None,
                confusion: None,
                skipped: cell_problem(fc, t, ds.channels(), available),
            };
            if cell.skipped.is_none() {
                let cell_cfg = RunConfig {
                    k: fc / 2,
                    t_max: t,
                    ..cfg.clone()
                };
                match loocv_prepared(&prepared, ds.channels(), ds.sample_rate_hz, &cell_cfg) {
                    Ok(out) => {
                        cell.report = Some(out.report);
                        cell.confusion = Some(out.confusion);
                    }
                    Err(e) => cell.skipped = Some(e.to_string()),
                }
            }
            cell
        })
        .collect();
    Ok(AccuracySurface {
        feature_counts: feature_counts.to_vec(),
        window_lengths: window_lengths.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{synthesize, SynthConfig};

    #[test]
    fn diagonal_confusion_has_no_block_errors() {
        let mut cm = ConfusionMatrix::default();
        for i in 0..8 {
            cm.counts[i][i] = 20;
        }
        let s = confusion_block_stats(&cm);
        assert_eq!((s.level1, s.level2, s.level3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn uniform_confusion_is_half_cross_hand() {
        let cm = ConfusionMatrix {
            counts: [[5; 8]; 8],
        };
        let s = confusion_block_stats(&cm);
        assert_eq!(s.level1, 0.5);
        assert_eq!(s.level2, 0.25);
        assert_eq!(s.level3, 0.125);
    }

    #[test]
    fn confusion_csv_shape() {
        let cm = ConfusionMatrix::default();
        let csv = cm.to_csv();
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.lines().all(|l| l.split(',').count() == 9));
    }

    fn small(snr: f64, tpg: usize, seed: u64) -> Dataset {
        let cfg = SynthConfig {
            m: 8,
            snr,
            trials_per_gesture: tpg,
            seed,
            ..Default::default()
        };
        synthesize(&cfg).unwrap().1
    }

    #[test]
    fn loocv_rows_match_counts() {
        let ds = small(1.0, 4, 3);
        let cfg = RunConfig {
            k: 2,
            t_max: 2,
            ..Default::default()
        };
        let (report, cm) = loocv(&ds, &cfg).unwrap();
        assert_eq!(cm.row_sums(), [4; 8]);
        assert_eq!(report.n_trials, 32);
        let mean: f64 = report.per_gesture_accuracy.iter().map(|a| a.unwrap()).sum::<f64>() / 8.0;
        assert!((mean - report.accuracy).abs() < 1e-12);
        assert_eq!(report.config.feature_count, 4);
    }

    #[test]
    fn loocv_rejects_thin_datasets() {
        let mut ds = small(1.0, 2, 3);
        ds.trials.remove(0);
        assert!(matches!(loocv(&ds, &RunConfig { k: 2, ..Default::default() }), Err(HcspError::Parameter { .. })));
    }

    #[test]
    fn loocv_is_deterministic_across_pools() {
        let ds = small(1.0, 3, 4);
        let cfg = RunConfig { k: 1, t_max: 2, ..Default::default() };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| loocv(&ds, &cfg)).unwrap();
        let b = four.install(|| loocv(&ds, &cfg)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn singleton_grid_equals_direct_loocv() {
        let ds = small(1.0, 3, 5);
        let cfg = RunConfig { k: 2, t_max: 3, ..Default::default() };
        let surface = grid_search(&ds, &cfg, &[4], &[3]).unwrap();
        assert_eq!(surface.cells.len(), 1);
        let (report, cm) = loocv(&ds, &cfg).unwrap();
        assert_eq!(surface.cells[0].report.as_ref(), Some(&report));
        assert_eq!(surface.cells[0].confusion.as_ref(), Some(&cm));
    }

    #[test]
    fn grid_marks_infeasible_cells() {
        let ds = small(1.0, 2, 6);
        let cfg = RunConfig::default();
        let surface = grid_search(&ds, &cfg, &[2, 10], &[1, 6]).unwrap();
        assert_eq!(surface.cells.len(), 4);
        assert!(surface.cell(2, 1).unwrap().report.is_some());
        assert!(surface.cell(10, 1).unwrap().skipped.as_ref().unwrap().contains("channels"));
        assert!(surface.cell(2, 6).unwrap().skipped.as_ref().unwrap().contains("window"));
        let csv = surface.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "feature_count,t=1,t=6");
        assert!(csv.contains("10,,"));
    }

    #[test]
    fn held_out_trial_never_reaches_its_fold() {
        let ds = small(1.0, 2, 8);
        let cfg = RunConfig { k: 1, t_max: 2, ..Default::default() };
        let mut prepared = prepare_dataset(&ds, &cfg, 2).unwrap();
        let held = 5;
        let train: Vec<usize> = (0..prepared.len()).filter(|&j| j != held).collect();
        let base = fit_fold(&prepared, &train, 8, 256.0, &cfg).unwrap();

        // Injecting the held-out trial changes the model ...
        let mut leaky = train.clone();
        leaky.push(held);
        let injected = fit_fold(&prepared, &leaky, 8, 256.0, &cfg).unwrap();
        assert_ne!(base, injected);

        // ... while corrupting it does not.
        let junk = crate::model::WindowStats::from_window(&nalgebra::DMatrix::from_fn(8, 256, |c, s| {
            ((c * 7 + s * 13) % 17) as f64
        }))
        .unwrap();
        let victim = &mut prepared[held];
        for w in victim.subwindows.iter_mut().chain(victim.growing.iter_mut()) {
            *w = junk.clone();
        }
        let again = fit_fold(&prepared, &train, 8, 256.0, &cfg).unwrap();
        assert_eq!(base, again);
    }

    #[test]
    fn growing_and_branch_modes_run() {
        let ds = small(1.0, 3, 9);
        for (mode, topo) in [
            (EvidenceMode::Growing, ClassifierTopology::Pooled),
            (EvidenceMode::Subwindows, ClassifierTopology::PerBranch),
        ] {
            let cfg = RunConfig {
                k: 1,
                t_max: 3,
                evidence_mode: mode,
                classifier_topology: topo,
                lda_mode: LdaMode::Joint,
                ..Default::default()
            };
            let (report, _) = loocv(&ds, &cfg).unwrap();
            assert!(report.accuracy > 0.125, "{mode:?}/{topo:?}: {}", report.accuracy);
        }
    }
}
