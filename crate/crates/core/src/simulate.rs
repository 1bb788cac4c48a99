//! Synthetic experiments with exact oracles.
//!
//! Scores are half-spaces `s(z, y) = w . z - o_y` sharing one weight vector,
//! so smoothed probabilities and their worst case over an L2 ball are
//! available in closed form.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::certificates::{lower_bound, upper_bound, SmoothingSpec, ThreatModel};
use crate::conformal::{calibrate_rcp1, predict_sets, evaluate, CalibrationResult};
use crate::error::{domain, Error, Result};
use crate::normal;
use crate::rng::{derive_seed, stream_rng, Role};
use crate::scores::{augment_once, ScoreKind, ScoreTable};
pub use crate::stats::{pairwise_sum, Estimate};

#[derive(Debug, Clone, PartialEq)]
pub struct HalfspaceModel {
    pub weight: Vec<f64>,
    pub offsets: Vec<f64>,
    /// Spread of the inputs around their label centre.
    pub sigma_data: f64,
}

impl HalfspaceModel {
    pub fn new(weight: Vec<f64>, offsets: Vec<f64>, sigma_data: f64) -> Result<Self> {
        if weight.is_empty() || weight.iter().all(|w| *w == 0.0) || weight.iter().any(|w| !w.is_finite()) {
            return Err(domain("weight must be finite and nonzero"));
        }
        if offsets.is_empty() || offsets.iter().any(|o| !o.is_finite()) {
            return Err(domain("offsets must be finite and nonempty"));
        }
        if !(sigma_data.is_finite() && sigma_data >= 0.0) {
            return Err(domain(format!("sigma_data must be >= 0, got {sigma_data}")));
        }
        Ok(Self {
            weight,
            offsets,
            sigma_data,
        })
    }

    /// Unit weight drawn uniformly on the sphere, offsets `0, spacing, 2*spacing, ...`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        dim: usize,
        n_labels: usize,
        spacing: f64,
        sigma_data: f64,
    ) -> Result<Self> {
        if dim == 0 || n_labels == 0 {
            return Err(domain("dimension and label count must be positive"));
        }
        let mut weight: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = weight.iter().map(|w| w * w).sum::<f64>().sqrt();
        weight.iter_mut().for_each(|w| *w /= norm);
        let offsets = (0..n_labels).map(|k| k as f64 * spacing).collect();
        Self::new(weight, offsets, sigma_data)
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub fn n_labels(&self) -> usize {
        self.offsets.len()
    }

    pub fn weight_norm(&self) -> f64 {
        self.weight.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    fn project(&self, z: &[f64]) -> f64 {
        self.weight.iter().zip(z).map(|(w, x)| w * x).sum()
    }

    /// Scores of every label at `z`.
    pub fn scores(&self, z: &[f64]) -> Vec<f64> {
        let p = self.project(z);
        self.offsets.iter().map(|o| p - o).collect()
    }

    /// Draws `(x, y)`: `y` uniform, `x = o_y w/|w| + N(0, sigma_data^2 I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let y = rng.random_range(0..self.n_labels());
        let norm = self.weight_norm();
        let centre = self.offsets[y];
        let x = self
            .weight
            .iter()
            .map(|w| centre * w / norm + self.sigma_data * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, y)
    }

    fn check(&self, point: &[f64], label: usize) -> Result<()> {
        if point.len() != self.dim() {
            return Err(Error::Shape(format!(
                "point has dimension {}, model has {}",
                point.len(),
                self.dim()
            )));
        }
        if label >= self.n_labels() {
            return Err(domain(format!("label {label} out of range for {} labels", self.n_labels())));
        }
        Ok(())
    }
}

fn smooth_prob_from_margin(margin: f64, sigma: f64, weight_norm: f64) -> f64 {
    if margin.is_nan() {
        // -inf threshold and -inf shift: the set is full.
        return 1.0;
    }
    if sigma == 0.0 {
        return if margin >= 0.0 { 1.0 } else { 0.0 };
    }
    normal::cdf(margin / (sigma * weight_norm))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma >= 0.0 {
        Ok(())
    } else {
        Err(domain(format!("sigma must be >= 0, got {sigma}")))
    }
}

/// `Pr_eps[s(point + eps, label) >= q]` for `eps ~ N(0, sigma^2 I)`.
///
/// `sigma = 0` gives the unsmoothed indicator.
pub fn halfspace_smooth_prob(
    model: &HalfspaceModel,
    point: &[f64],
    label: usize,
    sigma: f64,
    q_threshold: f64,
) -> Result<f64> {
    model.check(point, label)?;
    check_sigma(sigma)?;
    let margin = model.project(point) - model.offsets[label] - q_threshold;
    Ok(smooth_prob_from_margin(margin, sigma, model.weight_norm()))
}

/// Smallest smoothed probability over the L2 ball of radius `radius`.
///
/// The minimiser moves `point` by `radius` along `-w/|w|`, which lowers the
/// projection by `radius * |w|`.
pub fn halfspace_worst_case(
    model: &HalfspaceModel,
    point: &[f64],
    label: usize,
    sigma: f64,
    q_threshold: f64,
    radius: f64,
) -> Result<f64> {
    model.check(point, label)?;
    check_sigma(sigma)?;
    if radius.is_nan() || radius < 0.0 {
        return Err(domain(format!("radius must be >= 0, got {radius}")));
    }
    let norm = model.weight_norm();
    let margin = model.project(point) - model.offsets[label] - q_threshold - radius * norm;
    Ok(smooth_prob_from_margin(margin, sigma, norm))
}

/// Draws of conditional coverage given a calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageDistribution {
    pub n_calibration: usize,
    pub alpha: f64,
    pub samples: Vec<f64>,
}

impl CoverageDistribution {
    pub fn summary(&self) -> Estimate {
        Estimate::from_samples(&self.samples)
    }
}

const BETA_CHUNK: usize = 1 << 14;

/// I.i.d. draws from `Beta((1 - alpha)(n + 1), alpha (n + 1))`.
pub fn beta_coverage_samples(
    n_calibration: usize,
    alpha: f64,
    n_samples: usize,
    seed: u64,
) -> Result<CoverageDistribution> {
    if n_calibration == 0 {
        return Err(domain("n_calibration must be >= 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain(format!("alpha must be in (0,1), got {alpha}")));
    }
    let n1 = (n_calibration + 1) as f64;
    let dist = Beta::new((1.0 - alpha) * n1, alpha * n1).map_err(|e| domain(e.to_string()))?;
    let chunks = n_samples.div_ceil(BETA_CHUNK);
    let samples = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let len = BETA_CHUNK.min(n_samples - c * BETA_CHUNK);
            (0..len).map(move |_| dist.sample(&mut rng)).collect::<Vec<f64>>()
        })
        .collect();
    Ok(CoverageDistribution {
        n_calibration,
        alpha,
        samples,
    })
}

/// Maps every coverage draw through `c_down`.
pub fn pushforward_worst_coverage(
    dist: &CoverageDistribution,
    smoothing: &SmoothingSpec,
    threat: &ThreatModel,
) -> Result<CoverageDistribution> {
    let samples = dist
        .samples
        .par_iter()
        .map(|b| lower_bound(*b, smoothing, threat))
        .collect::<Result<_>>()?;
    Ok(CoverageDistribution {
        n_calibration: dist.n_calibration,
        alpha: dist.alpha,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub n_labels: usize,
    pub n_calibration: usize,
    pub n_test: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub radius: f64,
    pub trials: usize,
    pub seed: u64,
    pub sigma_data: f64,
    pub offset_spacing: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            n_labels: 10,
            n_calibration: 200,
            n_test: 500,
            alpha: 0.1,
            sigma: 0.5,
            radius: 0.25,
            trials: 2000,
            seed: crate::DEFAULT_SEED,
            sigma_data: 1.0,
            offset_spacing: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.dim, self.n_labels, self.n_calibration, self.n_test, self.trials].contains(&0) {
            return Err(domain("d, K, n_cal, n_test and trials must all be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(domain(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        SmoothingSpec::gaussian(self.sigma)?;
        ThreatModel::l2(self.radius)?;
        if !(self.sigma_data.is_finite() && self.sigma_data >= 0.0 && self.offset_spacing.is_finite()) {
            return Err(domain("sigma_data must be >= 0 and offset_spacing finite"));
        }
        Ok(())
    }
}

/// Outcome of one calibrate-then-attack trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialResult {
    pub rcp1_clean_coverage: f64,
    pub rcp1_worst_coverage: f64,
    pub rcp1_mean_size: f64,
    pub vanilla_clean_coverage: f64,
    pub vanilla_worst_coverage: f64,
    pub vanilla_mean_size: f64,
    pub rcp1_vacuous: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub rcp1_clean_coverage: Estimate,
    pub rcp1_worst_coverage: Estimate,
    pub rcp1_mean_size: Estimate,
    pub vanilla_clean_coverage: Estimate,
    pub vanilla_worst_coverage: Estimate,
    pub vanilla_mean_size: Estimate,
    /// `alpha'` used by RCP1.
    pub adjusted_alpha: f64,
    /// `c_down[1 - alpha']`, the certified worst-case coverage of RCP1.
    pub rcp1_bound: f64,
    /// `c_down[1 - alpha]`, the certified worst-case coverage without adjustment.
    pub vanilla_bound: f64,
    pub vacuous_trials: usize,
}

struct Dataset {
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn draw_dataset(model: &HalfspaceModel, n: usize, seed: u64, first_stream: u64) -> Dataset {
    let (points, labels) = (0..n)
        .map(|i| model.sample(&mut stream_rng(seed, first_stream + i as u64)))
        .unzip();
    Dataset { points, labels }
}

fn augmented_scores(model: &HalfspaceModel, data: &Dataset, smoothing: &SmoothingSpec, seed: u64) -> Result<ScoreTable> {
    augment_once(data.points.len(), model.dim(), smoothing, seed, |i, noise| {
        let z: Vec<f64> = data.points[i].iter().zip(noise).map(|(x, e)| x + e).collect();
        Ok::<_, Error>(model.scores(&z))
    })?
    .with_labels(data.labels.clone())
}

fn mean_worst(model: &HalfspaceModel, data: &Dataset, sigma: f64, calib: &CalibrationResult, radius: f64) -> Result<f64> {
    let probs = data
        .points
        .iter()
        .zip(&data.labels)
        .map(|(x, y)| halfspace_worst_case(model, x, *y, sigma, calib.threshold, radius))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&probs) / probs.len() as f64)
}

/// One trial. Replays in isolation from `(config.seed, trial)`.
pub fn run_trial(config: &ExperimentConfig, trial: u64) -> Result<TrialResult> {
    let smoothing = SmoothingSpec::gaussian(config.sigma)?;
    let threat = ThreatModel::l2(config.radius)?;
    let no_threat = ThreatModel::l2(0.0)?;
    let model = HalfspaceModel::random(
        &mut stream_rng(derive_seed(config.seed, trial, Role::Model), 0),
        config.dim,
        config.n_labels,
        config.offset_spacing,
        config.sigma_data,
    )?;
    let data_seed = derive_seed(config.seed, trial, Role::Data);
    let cal = draw_dataset(&model, config.n_calibration, data_seed, 0);
    let test = draw_dataset(&model, config.n_test, data_seed, config.n_calibration as u64);
    let cal_scores = augmented_scores(&model, &cal, &smoothing, derive_seed(config.seed, trial, Role::CalibrationNoise))?;
    let test_scores = augmented_scores(&model, &test, &smoothing, derive_seed(config.seed, trial, Role::TestNoise))?;

    let kind = ScoreKind::Logit;
    let rcp1 = calibrate_rcp1(&cal_scores, kind, config.alpha, &smoothing, &threat)?;
    let vanilla = calibrate_rcp1(&cal_scores, kind, config.alpha, &smoothing, &no_threat)?;

    let run = |calib: &CalibrationResult| -> Result<(f64, f64, f64)> {
        let sets = predict_sets(&test_scores, calib);
        let metrics = evaluate(&sets, &test.labels, &[])?;
        let worst = mean_worst(&model, &test, config.sigma, calib, config.radius)?;
        Ok((metrics.coverage, worst, metrics.mean_size))
    };
    let (rc, rw, rs) = run(&rcp1)?;
    let (vc, vw, vs) = run(&vanilla)?;
    Ok(TrialResult {
        rcp1_clean_coverage: rc,
        rcp1_worst_coverage: rw,
        rcp1_mean_size: rs,
        vanilla_clean_coverage: vc,
        vanilla_worst_coverage: vw,
        vanilla_mean_size: vs,
        rcp1_vacuous: rcp1.vacuous,
    })
}

/// Runs all trials in parallel and aggregates them in trial order.
pub fn run_coverage_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let trials = (0..config.trials as u64)
        .into_par_iter()
        .map(|t| run_trial(config, t))
        .collect::<Result<Vec<_>>>()?;
    let smoothing = SmoothingSpec::gaussian(config.sigma)?;
    let threat = ThreatModel::l2(config.radius)?;
    let adjusted_level = upper_bound(1.0 - config.alpha, &smoothing, &threat)?;
    let column = |f: fn(&TrialResult) -> f64| {
        let values: Vec<f64> = trials.iter().map(f).collect();
        Estimate::from_samples(&values)
    };
    Ok(ExperimentSummary {
        config: config.clone(),
        rcp1_clean_coverage: column(|t| t.rcp1_clean_coverage),
        rcp1_worst_coverage: column(|t| t.rcp1_worst_coverage),
        rcp1_mean_size: column(|t| t.rcp1_mean_size),
        vanilla_clean_coverage: column(|t| t.vanilla_clean_coverage),
        vanilla_worst_coverage: column(|t| t.vanilla_worst_coverage),
        vanilla_mean_size: column(|t| t.vanilla_mean_size),
        adjusted_alpha: 1.0 - adjusted_level,
        rcp1_bound: lower_bound(adjusted_level, &smoothing, &threat)?,
        vanilla_bound: lower_bound(1.0 - config.alpha, &smoothing, &threat)?,
        vacuous_trials: trials.iter().filter(|t| t.rcp1_vacuous).count(),
    })
}
