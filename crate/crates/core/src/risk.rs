//! Conformal risk control for monotone bounded losses, with a robust variant
//! driven by the Gaussian confidence certificate.
//!
//! Losses are non-increasing in `lambda` (larger `lambda`, larger masks,
//! fewer misses) and `lambda*` is the smallest grid value with
//! `(sum_i L_i(lambda) + hi) / (n + 1) <= alpha`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::certificates::omega::bisect_boundary;
use crate::certificates::{check_supported, confidence_upper, RiskBounds, SmoothingSpec, ThreatModel};
use crate::error::{domain, Error, Result};
use crate::rng::{derive_seed, stream_rng, Role};
use crate::stats::{pairwise_sum, Estimate};

/// Default grid: 512 uniform points on `[0, 1]`.
pub fn default_lambda_grid() -> Vec<f64> {
    uniform_grid(512)
}

pub fn uniform_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points).map(|i| i as f64 / (points - 1) as f64).collect(),
    }
}

/// Loss of every calibration example at every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    pub grid: Vec<f64>,
    /// `rows[i][j]` is the loss of example `i` at `grid[j]`.
    pub rows: Vec<Vec<f64>>,
}

/// Per-example loss curves `L(x_i, lambda)` bounded in `bounds`.
pub struct RiskCurve<F> {
    pub eval: F,
    pub bounds: RiskBounds,
    pub lambda_grid: Vec<f64>,
}

impl<F> RiskCurve<F>
where
    F: Fn(usize, f64) -> f64 + Sync,
{
    /// Evaluates examples `0..n_examples` on the grid in parallel.
    pub fn evaluate(&self, n_examples: usize) -> LossTable {
        let rows = (0..n_examples)
            .into_par_iter()
            .map(|i| self.lambda_grid.iter().map(|&l| (self.eval)(i, l)).collect())
            .collect();
        LossTable {
            grid: self.lambda_grid.clone(),
            rows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrcOutcome {
    pub lambda: f64,
    pub grid_index: usize,
    /// No grid point met the bound; `lambda` is the grid maximum.
    pub unsatisfiable: bool,
}

fn validate(losses: &LossTable, bounds: &RiskBounds) -> Result<()> {
    if losses.grid.is_empty() {
        return Err(domain("lambda grid is empty"));
    }
    if losses.grid.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(domain("lambda grid must be strictly increasing"));
    }
    for (i, row) in losses.rows.iter().enumerate() {
        if row.len() != losses.grid.len() {
            return Err(Error::Shape(format!(
                "example {i} has {} losses for {} grid points",
                row.len(),
                losses.grid.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !bounds.contains(**v)) {
            return Err(Error::InvalidRow {
                example: i,
                message: format!("loss {v} outside [{}, {}]", bounds.lo, bounds.hi),
            });
        }
        if row.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidRow {
                example: i,
                message: "loss increases with lambda".into(),
            });
        }
    }
    Ok(())
}

/// Smallest grid `lambda` whose corrected calibration risk is at most `alpha`.
pub fn crc_lambda(losses: &LossTable, bounds: &RiskBounds, alpha: f64) -> Result<CrcOutcome> {
    if !bounds.contains(alpha) {
        return Err(domain(format!(
            "alpha must be in [{}, {}], got {alpha}",
            bounds.lo, bounds.hi
        )));
    }
    validate(losses, bounds)?;
    let n = losses.rows.len() as f64;
    let feasible = |j: usize| {
        let total: f64 = losses.rows.iter().map(|row| row[j]).sum();
        (total + bounds.hi) / (n + 1.0) <= alpha
    };
    let last = losses.grid.len() - 1;
    // Feasibility is monotone in lambda, so a binary search finds the first hit.
    let (mut lo, mut hi) = (0usize, last);
    if !feasible(last) {
        return Ok(CrcOutcome {
            lambda: losses.grid[last],
            grid_index: last,
            unsatisfiable: true,
        });
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(CrcOutcome {
        lambda: losses.grid[lo],
        grid_index: lo,
        unsatisfiable: false,
    })
}

/// Largest risk level `t` with `c_up_conf[t] <= alpha`.
///
/// Calibrating the augmented losses at this level keeps the worst-case
/// expected risk inside the ball at or below `alpha`. Found by bisection and
/// rounded down.
pub fn robust_risk_level(
    alpha: f64,
    bounds: &RiskBounds,
    smoothing: &SmoothingSpec,
    radius: f64,
) -> Result<f64> {
    if !bounds.contains(alpha) {
        return Err(domain(format!(
            "alpha must be in [{}, {}], got {alpha}",
            bounds.lo, bounds.hi
        )));
    }
    confidence_upper(alpha, bounds, smoothing, radius)?;
    if radius == 0.0 {
        return Ok(alpha);
    }
    let (lo, _) = bisect_boundary(bounds.lo, alpha, |t| {
        confidence_upper(t, bounds, smoothing, radius).is_ok_and(|v| v <= alpha)
    });
    Ok(lo)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustCrcOutcome {
    pub alpha_robust: f64,
    pub outcome: CrcOutcome,
}

/// Conformal risk control on single-draw augmented losses at the deflated level.
pub fn robust_crc_lambda(
    losses_augmented: &LossTable,
    bounds: &RiskBounds,
    alpha: f64,
    smoothing: &SmoothingSpec,
    threat: &ThreatModel,
) -> Result<RobustCrcOutcome> {
    check_supported(smoothing, threat)?;
    let alpha_robust = robust_risk_level(alpha, bounds, smoothing, threat.radius)?;
    let outcome = crc_lambda(losses_augmented, bounds, alpha_robust)?;
    Ok(RobustCrcOutcome {
        alpha_robust,
        outcome,
    })
}

/// Row-major grid of real values (one image's pixel scores).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Row-major boolean pixel set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn proportion(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// Reads a 0/1 grid.
    pub fn from_grid(grid: &PixelGrid) -> Result<Self> {
        let bits = grid
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| match *v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                x => Err(Error::Parse {
                    line: i / grid.cols + 1,
                    message: format!("mask entry {x} at column {} is not 0 or 1", i % grid.cols + 1),
                }),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            rows: grid.rows,
            cols: grid.cols,
            bits,
        })
    }
}

/// Pixels whose score is at least `1 - lambda`; grows with `lambda`.
pub fn threshold_mask(scores: &PixelGrid, lambda: f64) -> Mask {
    let cut = 1.0 - lambda;
    Mask {
        rows: scores.rows,
        cols: scores.cols,
        bits: scores.values.iter().map(|s| *s >= cut).collect(),
    }
}

/// Fraction of true pixels missing from the mask; 0 when there are none.
pub fn fnr_loss(mask: &Mask, truth: &Mask) -> Result<f64> {
    if (mask.rows, mask.cols) != (truth.rows, truth.cols) || mask.bits.len() != truth.bits.len() {
        return Err(Error::Shape(format!(
            "mask is {}x{}, truth is {}x{}",
            mask.rows, mask.cols, truth.rows, truth.cols
        )));
    }
    let positives = truth.count();
    if positives == 0 {
        return Ok(0.0);
    }
    let missed = mask
        .bits
        .iter()
        .zip(&truth.bits)
        .filter(|(m, t)| **t && !**m)
        .count();
    Ok(missed as f64 / positives as f64)
}

/// FNR of one image along the grid, computed from sorted true-pixel scores.
pub fn fnr_curve(scores: &PixelGrid, truth: &Mask, grid: &[f64]) -> Result<Vec<f64>> {
    if scores.values.len() != truth.bits.len() || (scores.rows, scores.cols) != (truth.rows, truth.cols) {
        return Err(Error::Shape("score grid and truth mask differ in shape".into()));
    }
    let mut positives: Vec<f64> = scores
        .values
        .iter()
        .zip(&truth.bits)
        .filter(|(_, t)| **t)
        .map(|(s, _)| *s)
        .collect();
    if positives.is_empty() {
        return Ok(vec![0.0; grid.len()]);
    }
    positives.sort_by(f64::total_cmp);
    let n = positives.len() as f64;
    Ok(grid
        .iter()
        .map(|&l| {
            let cut = 1.0 - l;
            let missed = positives.partition_point(|s| *s < cut);
            missed as f64 / n
        })
        .collect())
}

/// Pixel scores of one image together with its target-class mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledImage {
    pub scores: PixelGrid,
    pub truth: Mask,
}

/// Share of pixels admitted by `threshold_mask` along the grid.
pub fn mask_proportion_curve(scores: &PixelGrid, grid: &[f64]) -> Vec<f64> {
    let mut sorted = scores.values.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    grid.iter()
        .map(|&l| {
            let cut = 1.0 - l;
            (sorted.len() - sorted.partition_point(|s| *s < cut)) as f64 / n
        })
        .collect()
}

/// FNR and mask-proportion curves of a pool of images.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCurves {
    pub fnr: LossTable,
    pub proportion: Vec<Vec<f64>>,
}

pub fn image_curves(images: &[LabelledImage], grid: &[f64]) -> Result<ImageCurves> {
    let pairs = images
        .par_iter()
        .map(|img| Ok((fnr_curve(&img.scores, &img.truth, grid)?, mask_proportion_curve(&img.scores, grid))))
        .collect::<Result<Vec<_>>>()?;
    let (rows, proportion) = pairs.into_iter().unzip();
    Ok(ImageCurves {
        fnr: LossTable {
            grid: grid.to_vec(),
            rows,
        },
        proportion,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskExperimentConfig {
    pub n_calibration: usize,
    pub resamples: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub radius: f64,
    pub seed: u64,
    pub grid_points: usize,
}

/// Test-side statistics at one calibrated `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitStats {
    pub outcome: CrcOutcome,
    pub test_fnr: f64,
    /// Sample variance of the per-image FNR over the test images.
    pub test_fnr_image_variance: f64,
    pub mask_proportion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOutcome {
    pub vanilla: SplitStats,
    pub robust: SplitStats,
}

/// Aggregate over random calibration/test splits of one pool.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSummary {
    pub alpha_robust: f64,
    pub lambda: Estimate,
    pub robust_lambda: Estimate,
    /// Mean test FNR; its `sd` is the spread across calibration resamples.
    pub test_fnr: Estimate,
    pub robust_test_fnr: Estimate,
    /// Per-image FNR variance within a test split, averaged over splits.
    pub image_variance: f64,
    pub robust_image_variance: f64,
    pub mask_proportion: Estimate,
    pub robust_mask_proportion: Estimate,
    pub unsatisfiable: usize,
    pub robust_unsatisfiable: usize,
    pub splits: Vec<SplitOutcome>,
}

/// Random permutation used for resample `resample`; the first `n_cal`
/// entries calibrate, the rest test.
pub fn split_order(n_images: usize, seed: u64, resample: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_images).collect();
    order.shuffle(&mut stream_rng(derive_seed(seed, resample, Role::Split), 0));
    order
}

fn split_stats(curves: &ImageCurves, test: &[usize], outcome: CrcOutcome) -> SplitStats {
    let j = outcome.grid_index;
    let losses: Vec<f64> = test.iter().map(|&i| curves.fnr.rows[i][j]).collect();
    let props: Vec<f64> = test.iter().map(|&i| curves.proportion[i][j]).collect();
    let e = Estimate::from_samples(&losses);
    SplitStats {
        outcome,
        test_fnr: e.mean,
        test_fnr_image_variance: e.sd * e.sd,
        mask_proportion: pairwise_sum(&props) / props.len() as f64,
    }
}

/// Calibrates vanilla and robust CRC on random splits of `images`.
///
/// The pixel scores are taken to come from single-draw noisy inputs, so the
/// same losses feed both procedures.
pub fn run_risk_experiment(images: &[LabelledImage], config: &RiskExperimentConfig) -> Result<RiskSummary> {
    if config.n_calibration == 0 || config.n_calibration >= images.len() {
        return Err(domain(format!(
            "n_calibration must be in [1, {}) for {} images",
            images.len(),
            images.len()
        )));
    }
    if config.resamples == 0 || config.grid_points < 2 {
        return Err(domain("need at least one resample and two grid points"));
    }
    let bounds = RiskBounds::unit();
    let smoothing = SmoothingSpec::gaussian(config.sigma)?;
    let threat = ThreatModel::l2(config.radius)?;
    let alpha_robust = robust_risk_level(config.alpha, &bounds, &smoothing, config.radius)?;
    let grid = uniform_grid(config.grid_points);
    let curves = image_curves(images, &grid)?;
    validate(&curves.fnr, &bounds)?;

    let splits = (0..config.resamples as u64)
        .into_par_iter()
        .map(|r| {
            let order = split_order(images.len(), config.seed, r);
            let (cal, test) = order.split_at(config.n_calibration);
            let table = LossTable {
                grid: grid.clone(),
                rows: cal.iter().map(|&i| curves.fnr.rows[i].clone()).collect(),
            };
            let vanilla = crc_lambda(&table, &bounds, config.alpha)?;
            let robust = robust_crc_lambda(&table, &bounds, config.alpha, &smoothing, &threat)?;
            Ok(SplitOutcome {
                vanilla: split_stats(&curves, test, vanilla),
                robust: split_stats(&curves, test, robust.outcome),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let column = |f: &dyn Fn(&SplitOutcome) -> f64| {
        let v: Vec<f64> = splits.iter().map(f).collect();
        Estimate::from_samples(&v)
    };
    Ok(RiskSummary {
        alpha_robust,
        lambda: column(&|s| s.vanilla.outcome.lambda),
        robust_lambda: column(&|s| s.robust.outcome.lambda),
        test_fnr: column(&|s| s.vanilla.test_fnr),
        robust_test_fnr: column(&|s| s.robust.test_fnr),
        image_variance: column(&|s| s.vanilla.test_fnr_image_variance).mean,
        robust_image_variance: column(&|s| s.robust.test_fnr_image_variance).mean,
        mask_proportion: column(&|s| s.vanilla.mask_proportion),
        robust_mask_proportion: column(&|s| s.robust.mask_proportion),
        unsatisfiable: splits.iter().filter(|s| s.vanilla.outcome.unsatisfiable).count(),
        robust_unsatisfiable: splits.iter().filter(|s| s.robust.outcome.unsatisfiable).count(),
        splits,
    })
}

/// Random disc-shaped targets with noisy sigmoid scores.
///
/// Each image has its own difficulty offset so per-image FNR varies; about
/// one image in twenty has no target pixels.
pub fn synthetic_segmentation(n_images: usize, rows: usize, cols: usize, seed: u64) -> Vec<LabelledImage> {
    (0..n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let empty = rng.random::<f64>() < 0.05;
            let cy = rng.random_range(0.0..rows as f64);
            let cx = rng.random_range(0.0..cols as f64);
            let radius = rng.random_range(0.15..0.35) * rows.min(cols) as f64;
            let difficulty: f64 = 0.7 * rng.sample::<f64, _>(StandardNormal);
            let mut values = Vec::with_capacity(rows * cols);
            let mut bits = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    let inside = !empty && (r as f64 - cy).hypot(c as f64 - cx) <= radius;
                    let centre = if inside { 2.0 } else { -2.0 };
                    let logit = centre + difficulty + 1.2 * rng.sample::<f64, _>(StandardNormal);
                    values.push(1.0 / (1.0 + (-logit).exp()));
                    bits.push(inside);
                }
            }
            LabelledImage {
                scores: PixelGrid { rows, cols, values },
                truth: Mask { rows, cols, bits },
            }
        })
        .collect()
}

/// Reads a CSV grid of numbers (no header, one pixel row per line).
pub fn read_grid<R: Read>(reader: R) -> Result<PixelGrid> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {c} columns, found {}", record.len()),
                })
            }
            _ => {}
        }
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("'{field}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Value { line, column: k + 1 });
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or(Error::Parse {
        line: 1,
        message: "empty grid".into(),
    })?;
    Ok(PixelGrid { rows, cols, values })
}

pub fn load_grid(path: &Path) -> Result<PixelGrid> {
    read_grid(std::fs::File::open(path)?)
}

/// Writes a mask as a 0/1 CSV grid.
pub fn write_mask<W: Write>(mut w: W, mask: &Mask) -> Result<()> {
    for r in 0..mask.rows {
        let line: Vec<&str> = mask.bits[r * mask.cols..(r + 1) * mask.cols]
            .iter()
            .map(|b| if *b { "1" } else { "0" })
            .collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normal;

    fn table(rows: Vec<Vec<f64>>, grid: Vec<f64>) -> LossTable {
        LossTable { grid, rows }
    }

    #[test]
    fn degenerate_all_max_loss() {
        let b = RiskBounds::unit();
        let t = table(vec![vec![1.0, 1.0]], vec![0.0, 1.0]);
        assert!(crc_lambda(&t, &b, 0.9).unwrap().unsatisfiable);
        let ok = crc_lambda(&t, &b, 1.0).unwrap();
        assert!(!ok.unsatisfiable);
        assert_eq!(ok.lambda, 0.0);
    }

    #[test]
    fn zero_losses_pick_grid_minimum() {
        let grid = uniform_grid(11);
        let t = table(vec![vec![0.0; 11]; 9], grid);
        let out = crc_lambda(&t, &RiskBounds::unit(), 0.15).unwrap();
        assert_eq!((out.lambda, out.unsatisfiable), (0.0, false));
    }

    #[test]
    fn alpha_at_upper_bound_is_always_satisfiable() {
        let t = table(vec![vec![1.0, 0.5, 0.2]; 4], vec![0.1, 0.2, 0.3]);
        let out = crc_lambda(&t, &RiskBounds::unit(), 1.0).unwrap();
        assert_eq!(out.lambda, 0.1);
    }

    #[test]
    fn picks_first_feasible_point() {
        // Mean-loss path (L + 1)/(n + 1) with n = 4: need sum <= 0.5*5 - 1 = 1.5.
        let rows = vec![vec![1.0, 0.6, 0.3, 0.0]; 4];
        let t = table(rows, vec![0.0, 0.25, 0.5, 0.75]);
        let out = crc_lambda(&t, &RiskBounds::unit(), 0.5).unwrap();
        assert_eq!(out.grid_index, 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let b = RiskBounds::unit();
        let t = table(vec![vec![0.2, 0.5]], vec![0.0, 1.0]);
        assert!(matches!(crc_lambda(&t, &b, 0.5), Err(Error::InvalidRow { example: 0, .. })));
        let t = table(vec![vec![1.2, 0.5]], vec![0.0, 1.0]);
        assert!(crc_lambda(&t, &b, 0.5).is_err());
        let t = table(vec![vec![0.5, 0.2]], vec![0.0, 1.0]);
        assert!(crc_lambda(&t, &b, 1.5).is_err());
    }

    #[test]
    fn robust_level_closed_form() {
        let g = SmoothingSpec::gaussian(0.25).unwrap();
        let b = RiskBounds::unit();
        let level = robust_risk_level(0.15, &b, &g, 0.06).unwrap();
        let closed = normal::cdf(normal::quantile(0.15) - 0.24);
        assert!(level <= closed && closed - level < 2e-10, "{level} vs {closed}");
        assert_eq!(robust_risk_level(0.15, &b, &g, 0.0).unwrap(), 0.15);
    }

    #[test]
    fn robust_zero_radius_equals_vanilla() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| uniform_grid(9).iter().map(|l| (1.0 - l - i as f64 * 0.01).max(0.0)).collect())
            .collect();
        let t = table(rows, uniform_grid(9));
        let g = SmoothingSpec::gaussian(0.25).unwrap();
        let b = RiskBounds::unit();
        let r = robust_crc_lambda(&t, &b, 0.3, &g, &ThreatModel::l2(0.0).unwrap()).unwrap();
        assert_eq!(r.outcome, crc_lambda(&t, &b, 0.3).unwrap());
    }

    #[test]
    fn robust_large_radius_is_unsatisfiable() {
        let t = table(vec![vec![1.0, 0.5, 0.0]; 20], vec![0.0, 0.5, 1.0]);
        let g = SmoothingSpec::gaussian(0.25).unwrap();
        let r = robust_crc_lambda(&t, &RiskBounds::unit(), 0.15, &g, &ThreatModel::l2(2.0).unwrap())
            .unwrap();
        assert!(r.alpha_robust < 1.0 / 21.0);
        assert!(r.outcome.unsatisfiable);
        assert_eq!(r.outcome.lambda, 1.0);
    }

    fn grid(values: &[f64], cols: usize) -> PixelGrid {
        PixelGrid {
            rows: values.len() / cols,
            cols,
            values: values.to_vec(),
        }
    }

    fn mask(bits: &[bool], cols: usize) -> Mask {
        Mask {
            rows: bits.len() / cols,
            cols,
            bits: bits.to_vec(),
        }
    }

    #[test]
    fn fnr_examples() {
        let truth = mask(&[true, true, true, true, false, false], 3);
        assert_eq!(fnr_loss(&truth, &truth).unwrap(), 0.0);
        assert_eq!(fnr_loss(&mask(&[false; 6], 3), &truth).unwrap(), 1.0);
        let m = mask(&[true, true, false, true, false, true], 3);
        assert_eq!(fnr_loss(&m, &truth).unwrap(), 0.25);
        assert_eq!(fnr_loss(&m, &mask(&[false; 6], 3)).unwrap(), 0.0);
        assert!(matches!(fnr_loss(&m, &mask(&[false; 6], 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn threshold_examples() {
        let g = grid(&[0.3, 0.9, 1.0, 0.0], 2);
        assert!(threshold_mask(&g, 1.0).bits.iter().all(|b| *b));
        assert_eq!(threshold_mask(&g, 0.0).bits, vec![false, false, true, false]);
        assert_eq!(threshold_mask(&grid(&[0.3, 0.9], 2), 0.2).bits, vec![false, true]);
    }

    #[test]
    fn fnr_curve_matches_masks() {
        let g = grid(&[0.1, 0.5, 0.8, 0.95, 0.3, 0.7], 3);
        let truth = mask(&[true, false, true, true, false, true], 3);
        let lambdas = uniform_grid(21);
        let curve = fnr_curve(&g, &truth, &lambdas).unwrap();
        for (l, c) in lambdas.iter().zip(curve) {
            assert_eq!(c, fnr_loss(&threshold_mask(&g, *l), &truth).unwrap());
        }
    }

    #[test]
    fn proportion_curve_matches_masks() {
        let g = grid(&[0.1, 0.5, 0.8, 0.95, 0.3, 0.7], 3);
        let lambdas = uniform_grid(11);
        let curve = mask_proportion_curve(&g, &lambdas);
        for (l, p) in lambdas.iter().zip(curve) {
            assert_eq!(p, threshold_mask(&g, *l).proportion());
        }
    }

    #[test]
    fn risk_experiment_is_reproducible_and_ordered() {
        let images = synthetic_segmentation(120, 8, 8, 5);
        assert_eq!(images, synthetic_segmentation(120, 8, 8, 5));
        let config = RiskExperimentConfig {
            n_calibration: 40,
            resamples: 30,
            alpha: 0.15,
            sigma: 0.25,
            radius: 0.06,
            seed: 1,
            grid_points: 128,
        };
        let a = run_risk_experiment(&images, &config).unwrap();
        assert_eq!(a, run_risk_experiment(&images, &config).unwrap());
        assert!(a.splits.iter().all(|s| s.robust.outcome.lambda >= s.vanilla.outcome.lambda));
        assert!(a.alpha_robust < 0.15);
        let bad = RiskExperimentConfig {
            n_calibration: 120,
            ..config
        };
        assert!(run_risk_experiment(&images, &bad).is_err());
    }

    #[test]
    fn grid_io() {
        let g = read_grid("0.1,0.2\n0.3,0.4\n".as_bytes()).unwrap();
        assert_eq!((g.rows, g.cols), (2, 2));
        assert!(read_grid("0.1,0.2\n0.3\n".as_bytes()).is_err());
        assert!(read_grid("".as_bytes()).is_err());
        let m = threshold_mask(&g, 0.75);
        let mut out = Vec::new();
        write_mask(&mut out, &m).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0,0\n1,1\n");
        let back = Mask::from_grid(&read_grid("0,0\n1,1\n".as_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(Mask::from_grid(&read_grid("0,0.5\n".as_bytes()).unwrap()).is_err());
    }
}
