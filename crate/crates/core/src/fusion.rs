//! Posterior over the eight gestures and the sequential MAP decision.
//!
//! The joint over `(L¹, L², L³)` factorizes into one observation likelihood per
//! level times the chain prior `P(L¹) P(L²|L¹) P(L³|L²)`. Everything is
//! accumulated in log space and normalized with max-subtraction.

use serde::{Deserialize, Serialize};

use crate::error::{HcspError, Result};
use crate::hierarchy::{GestureClass, Side, NUM_GESTURES};
use crate::model::{HcspModel, LevelClassifier, WindowStats};
use crate::preprocess::EvidenceMode;

/// `(log P(ε | l = −1), log P(ε | l = +1))`.
pub type LogLikPair = [f64; 2];

const ROW_TOLERANCE: f64 = 1e-12;

/// Chain prior over the hierarchy. Tables are indexed by side bit
/// (`0` = category −1, `1` = category +1); rows condition on the parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterLevelPrior {
    pub p_l1: [f64; 2],
    pub p_l2_given_l1: [[f64; 2]; 2],
    pub p_l3_given_l2: [[f64; 2]; 2],
}

impl Default for InterLevelPrior {
    fn default() -> Self {
        Self::uniform()
    }
}

impl InterLevelPrior {
    pub fn uniform() -> Self {
        Self {
            p_l1: [0.5, 0.5],
            p_l2_given_l1: [[0.5, 0.5]; 2],
            p_l3_given_l2: [[0.5, 0.5]; 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rows = std::iter::once(("p_l1", &self.p_l1))
            .chain(self.p_l2_given_l1.iter().map(|r| ("p_l2_given_l1", r)))
            .chain(self.p_l3_given_l2.iter().map(|r| ("p_l3_given_l2", r)));
        for (name, row) in rows {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(HcspError::param(name, format!("entries must be >= 0, got {row:?}")));
            }
            if (row[0] + row[1] - 1.0).abs() > ROW_TOLERANCE {
                return Err(HcspError::param(name, format!("row {row:?} does not sum to 1")));
            }
        }
        Ok(())
    }

    /// `log P(l₁) + log P(l₂|l₁) + log P(l₃|l₂)` for one leaf.
    pub fn log_prior(&self, g: GestureClass) -> f64 {
        let (h, f, t) = (
            g.hand.side().bit(),
            g.fingers.side().bit(),
            g.thumb.side().bit(),
        );
        self.p_l1[h].ln() + self.p_l2_given_l1[h][f].ln() + self.p_l3_given_l2[f][t].ln()
    }
}

/// Probability mass over the eight leaves, in leaf-index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GesturePMF(pub [f64; NUM_GESTURES]);

impl GesturePMF {
    /// Most probable leaf; ties go to the lowest leaf index.
    pub fn argmax(&self) -> (GestureClass, f64) {
        let mut best = 0;
        for i in 1..NUM_GESTURES {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        (GestureClass::from_leaf_index(best).unwrap(), self.0[best])
    }

    pub fn max(&self) -> f64 {
        self.argmax().1
    }
}

/// Normalize per-leaf log masses into a PMF.
pub fn normalize_log_masses(log_mass: &[f64; NUM_GESTURES]) -> GesturePMF {
    let peak = log_mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_GESTURES];
    if peak == f64::INFINITY {
        // Infinite evidence: split the mass among the infinite leaves.
        for (dst, &v) in p.iter_mut().zip(log_mass) {
            *dst = if v == f64::INFINITY { 1.0 } else { 0.0 };
        }
    } else {
        for (dst, &v) in p.iter_mut().zip(log_mass) {
            *dst = (v - peak).exp();
        }
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    GesturePMF(p)
}

/// Level likelihoods that may depend on the branch above them.
///
/// `l2[h]` is used for leaves with hand side `h`; `l3[h][f]` for leaves with
/// hand side `h` and finger side `f`. With pooled classifiers all entries of a
/// level are equal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchLikelihoods {
    pub l1: LogLikPair,
    pub l2: [LogLikPair; 2],
    pub l3: [[LogLikPair; 2]; 2],
}

impl BranchLikelihoods {
    pub fn pooled(l1: LogLikPair, l2: LogLikPair, l3: LogLikPair) -> Self {
        Self {
            l1,
            l2: [l2; 2],
            l3: [[l3; 2]; 2],
        }
    }

    pub fn log_likelihood(&self, g: GestureClass) -> f64 {
        let (h, f, t) = (
            g.hand.side().bit(),
            g.fingers.side().bit(),
            g.thumb.side().bit(),
        );
        self.l1[h] + self.l2[h][f] + self.l3[h][f][t]
    }
}

pub fn posterior_branched(lik: &BranchLikelihoods, prior: &InterLevelPrior) -> GesturePMF {
    let mut log_mass = [0.0; NUM_GESTURES];
    for g in GestureClass::all() {
        log_mass[g.leaf_index()] = lik.log_likelihood(g) + prior.log_prior(g);
    }
    normalize_log_masses(&log_mass)
}

/// Posterior over the eight gestures from one likelihood pair per level.
pub fn posterior(
    l1: LogLikPair,
    l2: LogLikPair,
    l3: LogLikPair,
    prior: &InterLevelPrior,
) -> GesturePMF {
    posterior_branched(&BranchLikelihoods::pooled(l1, l2, l3), prior)
}

/// Outcome of one decision epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochDecision {
    pub gesture: GestureClass,
    pub pmf: GesturePMF,
    pub intervals_used: usize,
    pub threshold_met: bool,
}

/// Stop at the first interval whose maximum posterior reaches `threshold`;
/// otherwise fall back to the interval with the largest maximum posterior
/// (earliest on ties). `posteriors[i]` uses evidence intervals `1..=i+1`.
pub fn decide_from_posteriors(posteriors: &[GesturePMF], threshold: f64) -> Result<EpochDecision> {
    if posteriors.is_empty() {
        return Err(HcspError::param("intervals", "no evidence intervals available"));
    }
    if !(threshold.is_finite() && threshold <= 1.0) {
        return Err(HcspError::param("threshold", format!("must lie in (0, 1], got {threshold}")));
    }
    let pick = |i: usize, met: bool| {
        let pmf = posteriors[i].clone();
        EpochDecision {
            gesture: pmf.argmax().0,
            pmf,
            intervals_used: i + 1,
            threshold_met: met,
        }
    };
    if let Some(i) = posteriors.iter().position(|p| p.max() >= threshold) {
        return Ok(pick(i, true));
    }
    let mut best = 0;
    for i in 1..posteriors.len() {
        if posteriors[i].max() > posteriors[best].max() {
            best = i;
        }
    }
    Ok(pick(best, false))
}

/// Summed log-likelihood pair over windows, treating windows as
/// conditionally independent given the category.
pub fn level_log_likelihoods(clf: &LevelClassifier, windows: &[WindowStats]) -> Result<LogLikPair> {
    if windows.is_empty() {
        return Err(HcspError::param("windows", "at least one evidence window is required"));
    }
    Ok(clf
        .window_log_likelihoods(windows)?
        .into_iter()
        .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]))
}

fn add_pairs(a: LogLikPair, b: LogLikPair) -> LogLikPair {
    [a[0] + b[0], a[1] + b[1]]
}

fn accumulate(a: &BranchLikelihoods, b: &BranchLikelihoods) -> BranchLikelihoods {
    BranchLikelihoods {
        l1: add_pairs(a.l1, b.l1),
        l2: [add_pairs(a.l2[0], b.l2[0]), add_pairs(a.l2[1], b.l2[1])],
        l3: [
            [add_pairs(a.l3[0][0], b.l3[0][0]), add_pairs(a.l3[0][1], b.l3[0][1])],
            [add_pairs(a.l3[1][0], b.l3[1][0]), add_pairs(a.l3[1][1], b.l3[1][1])],
        ],
    }
}

/// Posterior after each interval. For sub-windows, interval `t` uses the
/// product of the likelihoods of windows `1..=t`; for growing windows it uses
/// window `t` alone.
pub fn posterior_stream(
    model: &HcspModel,
    windows: &[WindowStats],
    mode: EvidenceMode,
    prior: &InterLevelPrior,
) -> Result<Vec<GesturePMF>> {
    let per_window = model.interval_likelihoods(windows)?;
    Ok(match mode {
        EvidenceMode::Subwindows => {
            let mut acc: Option<BranchLikelihoods> = None;
            per_window
                .iter()
                .map(|w| {
                    let next = match &acc {
                        Some(a) => accumulate(a, w),
                        None => *w,
                    };
                    acc = Some(next);
                    posterior_branched(&next, prior)
                })
                .collect()
        }
        EvidenceMode::Growing => per_window
            .iter()
            .map(|w| posterior_branched(w, prior))
            .collect(),
    })
}

/// Stopping rule for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionPolicy {
    pub threshold: f64,
    /// Maximum intervals per epoch (`N`).
    pub max_intervals: usize,
}

/// Sequential MAP decision on one evidence stream. `windows` may hold more
/// intervals than the policy allows; extra ones are ignored.
pub fn decide(
    model: &HcspModel,
    windows: &[WindowStats],
    mode: EvidenceMode,
    prior: &InterLevelPrior,
    policy: DecisionPolicy,
) -> Result<EpochDecision> {
    let n = windows.len().min(policy.max_intervals);
    if n == 0 {
        return Err(HcspError::param("intervals", "no evidence intervals available"));
    }
    let stream = posterior_stream(model, &windows[..n], mode, prior)?;
    decide_from_posteriors(&stream, policy.threshold)
}

/// Which side wins a likelihood pair, lower side on ties.
pub fn pair_winner(pair: LogLikPair) -> Side {
    if pair[1] > pair[0] {
        Side::Pos
    } else {
        Side::Neg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pmf_with_max(max: f64) -> GesturePMF {
        let rest = (1.0 - max) / 7.0;
        let mut p = [rest; 8];
        p[3] = max;
        GesturePMF(p)
    }

    #[test]
    fn symmetric_evidence_gives_uniform_pmf() {
        let p = posterior([-3.0, -3.0], [1.0, 1.0], [0.0, 0.0], &InterLevelPrior::uniform());
        for v in p.0 {
            assert!((v - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evidence_nine_to_one() {
        let p = posterior([9f64.ln(), 0.0], [0.0, 0.0], [0.0, 0.0], &InterLevelPrior::uniform());
        for (i, v) in p.0.iter().enumerate() {
            let expected = if i < 4 { 0.225 } else { 0.025 };
            assert!((v - expected).abs() < 1e-15, "leaf {i}: {v}");
        }
    }

    fn random_prior(rng: &mut ChaCha8Rng) -> InterLevelPrior {
        let mut row = || {
            let a: f64 = rng.random_range(0.0..1.0);
            [a, 1.0 - a]
        };
        InterLevelPrior {
            p_l1: row(),
            p_l2_given_l1: [row(), row()],
            p_l3_given_l2: [row(), row()],
        }
    }

    /// Enumerate all eight joint assignments with explicit products.
    fn brute_force(l: [[f64; 2]; 3], prior: &InterLevelPrior) -> [f64; 8] {
        let shift = l.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut joint = [0.0; 8];
        for h in 0..2 {
            for f in 0..2 {
                for t in 0..2 {
                    joint[4 * h + 2 * f + t] = (l[0][h] - shift).exp()
                        * (l[1][f] - shift).exp()
                        * (l[2][t] - shift).exp()
                        * prior.p_l1[h]
                        * prior.p_l2_given_l1[h][f]
                        * prior.p_l3_given_l2[f][t];
                }
            }
        }
        let z: f64 = joint.iter().sum();
        joint.map(|v| v / z)
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let mut pair = || [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let l = [pair(), pair(), pair()];
            let prior = random_prior(&mut rng);
            let got = posterior(l[0], l[1], l[2], &prior);
            let want = brute_force(l, &prior);
            for i in 0..8 {
                assert!((got.0[i] - want[i]).abs() < 1e-12);
            }
            assert!((got.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_conditional_prior_gates_leaves() {
        let mut prior = InterLevelPrior::uniform();
        prior.p_l3_given_l2 = [[1.0, 0.0], [1.0, 0.0]];
        prior.validate().unwrap();
        let p = posterior([0.3, -1.0], [2.0, 0.1], [-50.0, 50.0], &prior);
        for g in GestureClass::all() {
            if g.thumb.side() == Side::Pos {
                assert_eq!(p.0[g.leaf_index()], 0.0);
            }
        }
        assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extreme_log_likelihoods_do_not_underflow() {
        let p = posterior([-1e5, -1e5 - 3.0], [-2e5, -2e5], [-7e4, -7e4], &InterLevelPrior::uniform());
        assert!(p.0.iter().all(|v| v.is_finite()));
        assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prior_validation() {
        let mut p = InterLevelPrior::uniform();
        p.p_l1 = [0.6, 0.5];
        assert!(p.validate().is_err());
        p.p_l1 = [1.2, -0.2];
        assert!(p.validate().is_err());
        let json = r#"{"p_l1":[0.7,0.3],"p_l2_given_l1":[[0.5,0.5],[0.1,0.9]],"p_l3_given_l2":[[1,0],[0.5,0.5]]}"#;
        let p: InterLevelPrior = serde_json::from_str(json).unwrap();
        p.validate().unwrap();
    }

    #[test]
    fn first_crossing_wins() {
        let stream = [pmf_with_max(0.5), pmf_with_max(0.95), pmf_with_max(0.99)];
        let d = decide_from_posteriors(&stream, 0.9).unwrap();
        assert_eq!(d.intervals_used, 2);
        assert!(d.threshold_met);
        assert_eq!(d.gesture.leaf_index(), 3);
    }

    #[test]
    fn fallback_takes_best_interval() {
        let stream: Vec<_> = [0.4, 0.5, 0.45, 0.3, 0.35].iter().map(|m| pmf_with_max(*m)).collect();
        let d = decide_from_posteriors(&stream, 0.9).unwrap();
        assert_eq!(d.intervals_used, 2);
        assert!(!d.threshold_met);
    }

    #[test]
    fn zero_threshold_decides_immediately() {
        let stream = [pmf_with_max(0.2), pmf_with_max(0.9)];
        assert_eq!(decide_from_posteriors(&stream, 0.0).unwrap().intervals_used, 1);
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(decide_from_posteriors(&[], 0.9).is_err());
    }

    #[test]
    fn ties_go_to_lowest_leaf() {
        let p = GesturePMF([0.1, 0.3, 0.3, 0.1, 0.05, 0.05, 0.05, 0.05]);
        assert_eq!(p.argmax().0.leaf_index(), 1);
    }

    #[test]
    fn branch_specific_likelihoods() {
        // Level-2 evidence only under the right hand.
        let lik = BranchLikelihoods {
            l1: [0.0, 0.0],
            l2: [[0.0, 0.0], [0.0, 4f64.ln()]],
            l3: [[[0.0, 0.0]; 2]; 2],
        };
        let p = posterior_branched(&lik, &InterLevelPrior::uniform());
        // Right-hand mass splits 1:4 between extension and flexion.
        let right_ext = p.0[4] + p.0[5];
        let right_flex = p.0[6] + p.0[7];
        assert!((right_flex / right_ext - 4.0).abs() < 1e-12);
        assert!((p.0[0] - p.0[1]).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pair() -> impl Strategy<Value = [f64; 2]> {
            [-1e3f64..1e3, -1e3f64..1e3]
        }

        proptest! {
            #[test]
            fn shift_invariance(a in pair(), b in pair(), c in pair(), level in 0usize..3, shift in -1e3f64..1e3) {
                let prior = InterLevelPrior::uniform();
                let base = posterior(a, b, c, &prior);
                let mut l = [a, b, c];
                l[level] = [l[level][0] + shift, l[level][1] + shift];
                let moved = posterior(l[0], l[1], l[2], &prior);
                for i in 0..8 {
                    prop_assert!((base.0[i] - moved.0[i]).abs() < 1e-12);
                }
            }

            #[test]
            fn normalized(a in pair(), b in pair(), c in pair()) {
                let p = posterior(a, b, c, &InterLevelPrior::uniform());
                prop_assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.0.iter().all(|v| *v >= 0.0));
            }
        }
    }
}
