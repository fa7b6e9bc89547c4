//! Band-pass filtering and evidence-window extraction.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataio::TrialMatrix;
use crate::error::{HcspError, Result};

/// Linear-phase FIR band-pass kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    pub taps: Vec<f64>,
    pub low_hz: f64,
    pub high_hz: f64,
    pub sample_rate_hz: f64,
}

impl FilterKernel {
    pub fn group_delay(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    /// Complex response magnitude at `freq_hz`.
    pub fn magnitude_at(&self, freq_hz: f64) -> f64 {
        let omega = 2.0 * PI * freq_hz / self.sample_rate_hz;
        let (re, im) = self
            .taps
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (n, h)| {
                let phase = omega * n as f64;
                (re + h * phase.cos(), im - h * phase.sin())
            });
        re.hypot(im)
    }
}

/// Smallest odd tap count covering at least one second of signal.
pub fn default_num_taps(sample_rate_hz: f64) -> usize {
    let n = sample_rate_hz.ceil().max(3.0) as usize;
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Hamming-windowed sinc band-pass, scaled for unit gain at the band centre.
pub fn design_bandpass(
    sample_rate_hz: f64,
    low_hz: f64,
    high_hz: f64,
    num_taps: usize,
) -> Result<FilterKernel> {
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
        return Err(HcspError::param("sample_rate_hz", "must be positive"));
    }
    let nyquist = sample_rate_hz / 2.0;
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist) {
        return Err(HcspError::param(
            "band",
            format!("need 0 < low ({low_hz}) < high ({high_hz}) < Nyquist ({nyquist})"),
        ));
    }
    if num_taps < 3 || num_taps % 2 == 0 {
        return Err(HcspError::param(
            "num_taps",
            format!("must be odd and >= 3, got {num_taps}"),
        ));
    }

    let fl = low_hz / sample_rate_hz;
    let fh = high_hz / sample_rate_hz;
    let mid = (num_taps - 1) / 2;
    let denom = (num_taps - 1) as f64;
    let mut taps = vec![0.0; num_taps];
    for n in 0..=mid {
        let x = n as f64 - mid as f64;
        let ideal = 2.0 * fh * sinc(2.0 * fh * x) - 2.0 * fl * sinc(2.0 * fl * x);
        let window = 0.54 - 0.46 * (2.0 * PI * n as f64 / denom).cos();
        taps[n] = ideal * window;
        taps[num_taps - 1 - n] = taps[n];
    }

    let mut kernel = FilterKernel {
        taps,
        low_hz,
        high_hz,
        sample_rate_hz,
    };
    let gain = kernel.magnitude_at(0.5 * (low_hz + high_hz));
    for h in &mut kernel.taps {
        *h /= gain;
    }
    Ok(kernel)
}

/// Filter one channel with the group delay trimmed off, zero-padding outside
/// the input.
pub fn filter_slice(taps: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    let delay = (taps.len() - 1) / 2;
    for (i, y) in out.iter_mut().enumerate().take(n) {
        // y[i] = sum_j h[j] x[i + delay - j], restricted to valid x indices.
        let center = i + delay;
        let j_lo = center.saturating_sub(n - 1);
        let j_hi = center.min(taps.len() - 1);
        let mut acc = 0.0;
        for j in j_lo..=j_hi {
            acc += taps[j] * x[center - j];
        }
        *y = acc;
    }
}

/// Per-channel zero-phase-aligned FIR filtering; output has the input length.
pub fn apply_filter(kernel: &FilterKernel, trial: &TrialMatrix) -> Result<TrialMatrix> {
    if (trial.sample_rate_hz - kernel.sample_rate_hz).abs() > 1e-9 * kernel.sample_rate_hz {
        return Err(HcspError::param(
            "sample_rate_hz",
            format!(
                "trial is sampled at {} Hz but the kernel was designed for {} Hz",
                trial.sample_rate_hz, kernel.sample_rate_hz
            ),
        ));
    }
    let (m, n) = trial.data.shape();
    let mut out = DMatrix::zeros(m, n);
    // Rows of a column-major matrix are strided; copy through a buffer.
    let mut row = vec![0.0; n];
    let mut filtered = vec![0.0; n];
    for c in 0..m {
        for (dst, src) in row.iter_mut().zip(trial.data.row(c).iter()) {
            *dst = *src;
        }
        filter_slice(&kernel.taps, &row, &mut filtered);
        for (s, v) in filtered.iter().enumerate() {
            out[(c, s)] = *v;
        }
    }
    Ok(TrialMatrix {
        data: out,
        sample_rate_hz: trial.sample_rate_hz,
    })
}

/// How evidence intervals are cut from the imagery segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceMode {
    /// Consecutive non-overlapping one-second windows; one likelihood term each.
    #[default]
    Subwindows,
    /// Window `i` covers the first `i` seconds; only the latest one is scored.
    Growing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceWindow {
    pub data: DMatrix<f64>,
    /// 1-based interval index.
    pub index: usize,
    pub length_s: f64,
}

pub const INTERVAL_S: f64 = 1.0;

fn interval_samples(sample_rate_hz: f64) -> usize {
    (INTERVAL_S * sample_rate_hz).round() as usize
}

/// Number of whole one-second intervals `trial` can supply.
pub fn available_intervals(trial: &TrialMatrix) -> usize {
    trial.samples() / interval_samples(trial.sample_rate_hz).max(1)
}

/// `t_intervals` consecutive one-second windows starting at the first sample.
pub fn evidence_windows(trial: &TrialMatrix, t_intervals: usize) -> Result<Vec<EvidenceWindow>> {
    evidence_windows_with_mode(trial, t_intervals, EvidenceMode::Subwindows)
}

pub fn evidence_windows_with_mode(
    trial: &TrialMatrix,
    t_intervals: usize,
    mode: EvidenceMode,
) -> Result<Vec<EvidenceWindow>> {
    if t_intervals == 0 {
        return Err(HcspError::param("t_intervals", "must be at least 1"));
    }
    let w = interval_samples(trial.sample_rate_hz);
    let needed = w * t_intervals;
    if w == 0 || needed > trial.samples() {
        return Err(HcspError::param(
            "t_intervals",
            format!(
                "{t_intervals} intervals need {:.3} s but the trial has {:.3} s",
                t_intervals as f64 * INTERVAL_S,
                trial.duration_s()
            ),
        ));
    }
    Ok((1..=t_intervals)
        .map(|i| {
            let (start, len) = match mode {
                EvidenceMode::Subwindows => ((i - 1) * w, w),
                EvidenceMode::Growing => (0, i * w),
            };
            EvidenceWindow {
                data: trial.data.columns(start, len).into_owned(),
                index: i,
                length_s: len as f64 / trial.sample_rate_hz,
            }
        })
        .collect())
}
