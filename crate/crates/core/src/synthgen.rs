//! Synthetic EEG with a known hierarchical class structure.
//!
//! Each hierarchy axis perturbs the source covariance on its own group of
//! channels; the sources are band-limited Gaussian noise seen through a
//! well-conditioned mixing matrix. Level 1 gets the largest perturbation and
//! level 3 the smallest.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Trial, TrialMatrix, TrialMeta};
use crate::error::{HcspError, Result};
use crate::hierarchy::{GestureClass, LevelId, NUM_GESTURES};
use crate::matrix_serde::matrix_to_rows;
use crate::preprocess::{default_num_taps, design_bandpass, filter_slice, FilterKernel};

/// Per-axis perturbation magnitude at `snr = 1`, in units of the mean source
/// variance (level 1, 2, 3).
pub const AXIS_GAIN: [f64; 3] = [0.3, 0.2, 0.1];
pub const EIGEN_FLOOR: f64 = 1e-6;
pub const MIXING_PERTURBATION: f64 = 0.3;
/// Trial layout in seconds.
pub const PREPARE_S: f64 = 2.0;
pub const IMAGERY_S: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subject_id: String,
    #[serde(alias = "channels")]
    pub m: usize,
    pub sample_rate_hz: f64,
    pub trials_per_gesture: usize,
    pub snr: f64,
    pub seed: u64,
    pub band: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subject_id: "synthetic".into(),
            m: 16,
            sample_rate_hz: 256.0,
            trials_per_gesture: 20,
            snr: 1.0,
            seed: 0,
            band: [3.0, 30.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 4 {
            return Err(HcspError::param("m", format!("need at least 4 channels, got {}", self.m)));
        }
        if self.trials_per_gesture < 2 {
            return Err(HcspError::param(
                "trials_per_gesture",
                format!("need at least 2, got {}", self.trials_per_gesture),
            ));
        }
        if !(self.snr.is_finite() && self.snr >= 0.0) {
            return Err(HcspError::param("snr", format!("must be >= 0, got {}", self.snr)));
        }
        self.kernel().map(|_| ())
    }

    fn kernel(&self) -> Result<FilterKernel> {
        design_bandpass(
            self.sample_rate_hz,
            self.band[0],
            self.band[1],
            default_num_taps(self.sample_rate_hz),
        )
    }
}

/// Generative model: eight source covariances plus a mixing matrix.
#[derive(Debug, Clone)]
pub struct SynthModel {
    pub base: DMatrix<f64>,
    /// One symmetric perturbation per level, disjoint channel supports.
    pub deltas: [DMatrix<f64>; 3],
    /// Source covariance per leaf index.
    pub covariances: Vec<DMatrix<f64>>,
    pub mixing: DMatrix<f64>,
    base_factor: Cholesky<f64, Dyn>,
    factors: Vec<Cholesky<f64, Dyn>>,
    kernel: FilterKernel,
    noise_gain: f64,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut *rng))
}

/// Clip eigenvalues below `EIGEN_FLOOR`.
fn project_spd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let clipped = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
    let u = &eig.eigenvectors;
    let mut out = u * DMatrix::from_diagonal(&clipped) * u.transpose();
    let n = out.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Channels driven by each level: consecutive groups of `m / 4`.
pub fn axis_channels(m: usize, level: LevelId) -> std::ops::Range<usize> {
    let size = m / 4;
    let start = level.index() * size;
    start..start + size
}

fn axis_delta(m: usize, level: LevelId) -> DMatrix<f64> {
    let chans = axis_channels(m, level);
    let half = chans.len().div_ceil(2);
    let mut d = DMatrix::zeros(m, m);
    for (j, c) in chans.enumerate() {
        d[(c, c)] = if j < half { 1.0 } else { -1.0 } * AXIS_GAIN[level.index()];
    }
    d
}

fn cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone())
        .ok_or_else(|| HcspError::Numerical("synthetic covariance lost definiteness".into()))
}

pub fn build_model(cfg: &SynthConfig) -> Result<SynthModel> {
    cfg.validate()?;
    let m = cfg.m;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);

    let g = gaussian_matrix(&mut rng, m, m);
    let base = DMatrix::identity(m, m) * 0.5 + (&g * g.transpose()) * (0.5 / m as f64);
    let deltas = LevelId::ALL.map(|l| axis_delta(m, l));

    let mut covariances = Vec::with_capacity(NUM_GESTURES);
    for gesture in GestureClass::all() {
        let mut shift = DMatrix::zeros(m, m);
        for level in LevelId::ALL {
            shift += &deltas[level.index()] * (cfg.snr * gesture.side_at(level).sign() as f64);
        }
        let raw = &base + &shift;
        let projected = project_spd(&raw);
        let altered = (&projected - &raw).norm();
        let size = shift.norm();
        if size > 0.0 && altered > 0.5 * size {
            return Err(HcspError::param(
                "snr",
                format!(
                    "snr {} pushes the {gesture} covariance out of the SPD cone \
                     (projection changes the perturbation by {:.0}%)",
                    cfg.snr,
                    100.0 * altered / size
                ),
            ));
        }
        covariances.push(projected);
    }

    let q = gaussian_matrix(&mut rng, m, m).qr().q();
    let mixing = DMatrix::identity(m, m) + q * MIXING_PERTURBATION;

    let kernel = cfg.kernel()?;
    let noise_gain = kernel.taps.iter().map(|h| h * h).sum::<f64>().sqrt();
    Ok(SynthModel {
        base_factor: cholesky(&base)?,
        factors: covariances.iter().map(cholesky).collect::<Result<_>>()?,
        base,
        deltas,
        covariances,
        mixing,
        kernel,
        noise_gain,
    })
}

impl SynthModel {
    pub fn channels(&self) -> usize {
        self.base.nrows()
    }

    /// Sensor-space covariance `A C Aᵀ` of a gesture's imagery period.
    pub fn sensor_covariance(&self, g: GestureClass) -> DMatrix<f64> {
        &self.mixing * &self.covariances[g.leaf_index()] * self.mixing.transpose()
    }

    /// Unit-variance band-limited noise, channels × `n`.
    fn band_noise(&self, rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let m = self.channels();
        let pad = self.kernel.taps.len();
        let total = n + 2 * pad;
        let mut out = DMatrix::zeros(m, n);
        let mut white = vec![0.0; total];
        let mut filtered = vec![0.0; total];
        for c in 0..m {
            for w in white.iter_mut() {
                *w = StandardNormal.sample(&mut *rng);
            }
            filter_slice(&self.kernel.taps, &white, &mut filtered);
            for s in 0..n {
                out[(c, s)] = filtered[pad + s] / self.noise_gain;
            }
        }
        out
    }

    /// `n` samples of mixed sensor data. `gesture = None` draws from the base
    /// covariance.
    pub fn generate_segment(
        &self,
        gesture: Option<GestureClass>,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> DMatrix<f64> {
        let factor = match gesture {
            Some(g) => &self.factors[g.leaf_index()],
            None => &self.base_factor,
        };
        let shaping = &self.mixing * factor.l();
        shaping * self.band_noise(rng, n)
    }

    pub fn ground_truth_json(&self, cfg: &SynthConfig) -> serde_json::Value {
        serde_json::json!({
            "config": cfg,
            "axis_gain": AXIS_GAIN,
            "axis_channels": LevelId::ALL.map(|l| {
                let r = axis_channels(self.channels(), l);
                [r.start, r.end]
            }),
            "base": matrix_to_rows(&self.base),
            "deltas": self.deltas.iter().map(matrix_to_rows).collect::<Vec<_>>(),
            "covariances": self.covariances.iter().map(matrix_to_rows).collect::<Vec<_>>(),
            "mixing": matrix_to_rows(&self.mixing),
            "prepare_s": PREPARE_S,
            "imagery_s": IMAGERY_S,
        })
    }
}

/// Random stream for trial `index`, independent of generation order.
pub fn trial_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// One trial: a preparation period drawn from the base covariance followed by
/// the imagery period drawn from the gesture covariance. Samples are rounded
/// to `f32` so the binary trial format stores them exactly.
pub fn generate_trial(model: &SynthModel, cfg: &SynthConfig, index: usize) -> Trial {
    let gesture = GestureClass::from_leaf_index(index % NUM_GESTURES).unwrap();
    let mut rng = trial_rng(cfg.seed, index);
    let fs = cfg.sample_rate_hz;
    let n_prep = (PREPARE_S * fs).round() as usize;
    let n_mi = (IMAGERY_S * fs).round() as usize;
    let prep = model.generate_segment(None, n_prep, &mut rng);
    let mi = model.generate_segment(Some(gesture), n_mi, &mut rng);
    let m = model.channels();
    let data = DMatrix::from_fn(m, n_prep + n_mi, |c, s| {
        let v = if s < n_prep { prep[(c, s)] } else { mi[(c, s - n_prep)] };
        v as f32 as f64
    });
    Trial {
        meta: TrialMeta {
            file_path: format!("trial_{index:04}.f32").into(),
            gesture,
            onset_s: PREPARE_S,
            duration_s: IMAGERY_S,
        },
        recording: TrialMatrix {
            data,
            sample_rate_hz: fs,
        },
    }
}

/// Gestures cycle through leaf order: trial `i` has leaf index `i mod 8`.
pub fn generate(model: &SynthModel, cfg: &SynthConfig) -> Dataset {
    use rayon::prelude::*;
    let n = NUM_GESTURES * cfg.trials_per_gesture;
    let trials = (0..n)
        .into_par_iter()
        .map(|i| generate_trial(model, cfg, i))
        .collect();
    Dataset {
        subject_id: cfg.subject_id.clone(),
        sample_rate_hz: cfg.sample_rate_hz,
        channel_names: (0..cfg.m).map(|c| format!("ch{c:02}")).collect(),
        trials,
    }
}

/// Build the model and generate the dataset in one go.
pub fn synthesize(cfg: &SynthConfig) -> Result<(SynthModel, Dataset)> {
    let model = build_model(cfg)?;
    let ds = generate(&model, cfg);
    Ok((model, ds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::gesture_counts;

    fn cfg(snr: f64, m: usize, tpg: usize) -> SynthConfig {
        SynthConfig {
            m,
            snr,
            trials_per_gesture: tpg,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn zero_snr_covariances_coincide() {
        let model = build_model(&cfg(0.0, 8, 2)).unwrap();
        for c in &model.covariances[1..] {
            assert!((c - &model.covariances[0]).abs().max() < 1e-12);
        }
    }

    #[test]
    fn model_is_deterministic() {
        let a = build_model(&cfg(1.0, 8, 2)).unwrap();
        let b = build_model(&cfg(1.0, 8, 2)).unwrap();
        assert_eq!(a.covariances, b.covariances);
        assert_eq!(a.mixing, b.mixing);
    }

    #[test]
    fn one_axis_flip_moves_by_twice_the_perturbation() {
        let model = build_model(&cfg(1.0, 16, 2)).unwrap();
        for level in LevelId::ALL {
            let expected = 2.0 * model.deltas[level.index()].norm();
            for g in GestureClass::all() {
                if g.side_at(level).sign() > 0 {
                    continue;
                }
                let flipped = GestureClass::from_leaf_index(
                    g.leaf_index() | (1 << (2 - level.index())),
                )
                .unwrap();
                let dist = (&model.covariances[g.leaf_index()]
                    - &model.covariances[flipped.leaf_index()])
                    .norm();
                assert!((dist - expected).abs() <= 0.05 * expected, "{level}: {dist} vs {expected}");
            }
        }
    }

    #[test]
    fn perturbations_have_disjoint_support() {
        let model = build_model(&cfg(1.0, 16, 2)).unwrap();
        for a in 0..3 {
            for b in a + 1..3 {
                let overlap = model.deltas[a].component_mul(&model.deltas[b]).abs().max();
                assert_eq!(overlap, 0.0);
            }
        }
    }

    #[test]
    fn excessive_snr_is_rejected() {
        let err = build_model(&cfg(50.0, 8, 2)).unwrap_err();
        assert!(matches!(err, HcspError::Parameter { name: "snr", .. }));
    }

    #[test]
    fn invalid_configs() {
        assert!(cfg(1.0, 3, 2).validate().is_err());
        assert!(cfg(1.0, 8, 1).validate().is_err());
        let mut c = cfg(1.0, 8, 2);
        c.band = [30.0, 3.0];
        assert!(matches!(c.validate(), Err(HcspError::Parameter { name: "band", .. })));
    }

    #[test]
    fn default_trial_count_and_layout() {
        let c = cfg(1.0, 8, 20);
        let (_, ds) = synthesize(&c).unwrap();
        assert_eq!(ds.len(), 160);
        assert_eq!(gesture_counts(&ds), [20; 8]);
        let t = &ds.trials[0];
        assert_eq!(t.recording.samples(), 7 * 256);
        assert_eq!(t.imagery().samples(), 5 * 256);
    }

    #[test]
    fn generation_is_reproducible_and_order_free() {
        let c = cfg(1.0, 8, 2);
        let (model, a) = synthesize(&c).unwrap();
        let (_, b) = synthesize(&c).unwrap();
        assert_eq!(a, b);
        // Out-of-order single trial equals its in-dataset counterpart.
        let t = generate_trial(&model, &c, 11);
        assert_eq!(t, a.trials[11]);
    }

    #[test]
    fn long_segment_matches_model_covariance() {
        let c = SynthConfig {
            m: 4,
            ..cfg(1.0, 4, 2)
        };
        let model = build_model(&c).unwrap();
        let g = GestureClass::from_leaf_index(5).unwrap();
        let mut rng = trial_rng(99, 0);
        let n = (60.0 * c.sample_rate_hz) as usize;
        let x = model.generate_segment(Some(g), n, &mut rng);
        let sample = &x * x.transpose() / n as f64;
        let truth = model.sensor_covariance(g);
        let rel = (&sample - &truth).norm() / truth.norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn ground_truth_has_eight_covariances() {
        let c = cfg(1.0, 8, 2);
        let model = build_model(&c).unwrap();
        let v = model.ground_truth_json(&c);
        assert_eq!(v["covariances"].as_array().unwrap().len(), 8);
        assert_eq!(v["mixing"].as_array().unwrap().len(), 8);
    }
}
