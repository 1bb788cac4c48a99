//! Split conformal calibration, the single-sample robust variant, prediction
//! sets, and set metrics.

use rayon::prelude::*;

use crate::certificates::{lower_bound, upper_certificate, SmoothingSpec, ThreatModel};
use crate::error::{domain, Error, Result};
use crate::scores::{ScoreKind, ScoreTable};

/// Adjusted levels this close to 1 are treated as 1.
const LEVEL_EPS: f64 = 1e-12;

const ROUND_TRIP_TOL: f64 = 1e-9;

/// Rank `k` of the calibration threshold: `q` is the `k`-th smallest of `n`
/// scores with `k = floor(alpha * (n + 1))`.
///
/// `k = 0` means no finite threshold gives `1 - alpha` coverage and the set
/// must admit every label.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    // The slack absorbs representation error in products such as 0.29 * 100.
    let k = (alpha * (n as f64 + 1.0) + 1e-9).floor() as usize;
    k.min(n)
}

/// Conformal threshold of `scores` at miscoverage `alpha`.
///
/// Returns the `quantile_rank`-th smallest score, or `-inf` when the rank is
/// zero. With the `s >= q` rule, an exchangeable test score is covered with
/// probability at least `1 - alpha`.
pub fn corrected_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(domain("cannot calibrate on an empty score list"));
    }
    check_alpha(alpha)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(domain("calibration scores must be finite"));
    }
    let k = quantile_rank(scores.len(), alpha);
    if k == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = scores.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(domain(format!("alpha must be in (0,1), got {alpha}")))
    }
}

/// Calibrated threshold and the levels it was tuned for.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// `-inf` when vacuous.
    pub threshold: f64,
    /// `1 - alpha`.
    pub nominal_level: f64,
    /// `1 - alpha'`; equals `nominal_level` for vanilla calibration.
    pub adjusted_level: f64,
    pub n_calibration: usize,
    pub smoothing: Option<SmoothingSpec>,
    pub threat: Option<ThreatModel>,
    /// Every label is admitted.
    pub vacuous: bool,
}

impl CalibrationResult {
    pub fn alpha(&self) -> f64 {
        1.0 - self.nominal_level
    }

    pub fn adjusted_alpha(&self) -> f64 {
        1.0 - self.adjusted_level
    }
}

/// Vanilla split conformal calibration on the true-label scores.
pub fn calibrate_vanilla(cal: &ScoreTable, kind: ScoreKind, alpha: f64) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    let scores = kind.apply(cal)?.true_label_scores()?;
    let threshold = corrected_quantile(&scores, alpha)?;
    Ok(CalibrationResult {
        threshold,
        nominal_level: 1.0 - alpha,
        adjusted_level: 1.0 - alpha,
        n_calibration: scores.len(),
        smoothing: None,
        threat: None,
        vacuous: threshold == f64::NEG_INFINITY,
    })
}

/// Single-sample robust calibration.
///
/// `cal_augmented` must hold scores computed on one noisy copy of each
/// calibration input. The level is raised to `1 - alpha' = c_up[1 - alpha]`
/// so that the certified worst-case coverage stays at `1 - alpha`.
pub fn calibrate_rcp1(
    cal_augmented: &ScoreTable,
    kind: ScoreKind,
    alpha: f64,
    smoothing: &SmoothingSpec,
    threat: &ThreatModel,
) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    let lifted = upper_certificate(1.0 - alpha, smoothing, threat)?;
    let adjusted_level = lifted.value.min(1.0);
    if !lifted.vacuous && adjusted_level < 1.0 - LEVEL_EPS {
        let recovered = lower_bound(adjusted_level, smoothing, threat)?;
        if (recovered - (1.0 - alpha)).abs() > ROUND_TRIP_TOL {
            return Err(Error::RoundTrip {
                nominal: 1.0 - alpha,
                recovered,
            });
        }
    }
    let scores = kind.apply(cal_augmented)?.true_label_scores()?;
    let threshold = if lifted.vacuous || adjusted_level >= 1.0 - LEVEL_EPS {
        f64::NEG_INFINITY
    } else {
        corrected_quantile(&scores, 1.0 - adjusted_level)?
    };
    Ok(CalibrationResult {
        threshold,
        nominal_level: 1.0 - alpha,
        adjusted_level,
        n_calibration: scores.len(),
        smoothing: Some(*smoothing),
        threat: Some(*threat),
        vacuous: threshold == f64::NEG_INFINITY,
    })
}

/// Labels admitted for one example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    pub example_id: usize,
    pub members: Vec<usize>,
}

impl PredictionSet {
    pub fn contains(&self, label: usize) -> bool {
        self.members.binary_search(&label).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// `{y : s(y) >= q}`; a score equal to the threshold is admitted.
pub fn predict_set(
    example_id: usize,
    scores: &[f64],
    n_labels: usize,
    calib: &CalibrationResult,
) -> Result<PredictionSet> {
    if scores.len() != n_labels {
        return Err(Error::Shape(format!(
            "example {example_id} has {} scores, expected {n_labels}",
            scores.len()
        )));
    }
    let members = if calib.vacuous {
        (0..n_labels).collect()
    } else {
        scores
            .iter()
            .enumerate()
            .filter(|(_, s)| **s >= calib.threshold)
            .map(|(y, _)| y)
            .collect()
    };
    Ok(PredictionSet {
        example_id,
        members,
    })
}

/// Prediction sets for every row of an already-scored table.
pub fn predict_sets(scores: &ScoreTable, calib: &CalibrationResult) -> Vec<PredictionSet> {
    let k = scores.n_labels();
    (0..scores.n_examples())
        .into_par_iter()
        .map(|i| predict_set(i, scores.row(i), k, calib).expect("row width matches table"))
        .collect()
}

/// Share and coverage of sets with at most `max_size` members.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeBucket {
    pub max_size: usize,
    pub proportion: f64,
    /// NaN when no set is that small.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetMetrics {
    pub n_examples: usize,
    pub coverage: f64,
    pub mean_size: f64,
    pub buckets: Vec<SizeBucket>,
}

/// Empirical coverage, mean size and small-set statistics.
pub fn evaluate(sets: &[PredictionSet], labels: &[usize], size_thresholds: &[usize]) -> Result<SetMetrics> {
    if sets.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} prediction sets for {} labels",
            sets.len(),
            labels.len()
        )));
    }
    if sets.is_empty() {
        return Err(Error::Shape("no prediction sets to evaluate".into()));
    }
    let n = sets.len() as f64;
    let covered: Vec<bool> = sets.iter().zip(labels).map(|(s, &y)| s.contains(y)).collect();
    let coverage = covered.iter().filter(|c| **c).count() as f64 / n;
    let mean_size = sets.iter().map(|s| s.len() as f64).sum::<f64>() / n;
    let buckets = size_thresholds
        .iter()
        .map(|&max_size| {
            let (small, small_covered) = sets
                .iter()
                .zip(&covered)
                .filter(|(s, _)| s.len() <= max_size)
                .fold((0usize, 0usize), |(a, b), (_, c)| (a + 1, b + usize::from(*c)));
            SizeBucket {
                max_size,
                proportion: small as f64 / n,
                coverage: if small == 0 {
                    f64::NAN
                } else {
                    small_covered as f64 / small as f64
                },
            }
        })
        .collect();
    Ok(SetMetrics {
        n_examples: sets.len(),
        coverage,
        mean_size,
        buckets,
    })
}
