use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rcp1::artifact::{
    experiment_config_from, experiment_config_pairs, metrics_header, write_metrics, CalibrationArtifact,
    KeyValues, MetricsRow,
};
use rcp1::conformal::{calibrate_rcp1, calibrate_vanilla, evaluate as evaluate_sets, predict_sets, PredictionSet};
use rcp1::risk::{
    load_grid, run_risk_experiment, split_order, synthetic_segmentation, threshold_mask, write_mask,
    LabelledImage, Mask, RiskExperimentConfig,
};
use rcp1::rng::{derive_seed, Role};
use rcp1::scores::{load_score_table, ScoreKind, TableFormat};
use rcp1::simulate::{run_coverage_experiment, ExperimentConfig};
use rcp1::{lower_certificate, upper_certificate, Norm, SmoothingSpec, ThreatModel};

use crate::{CalibrateArgs, CertifyArgs, EvaluateArgs, PredictArgs, RiskArgs, SimulateArgs, SmoothingArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("calibration artifact not found: {0}")]
    MissingArtifact(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<rcp1::Error> for CliError {
    fn from(e: rcp1::Error) -> Self {
        match e {
            rcp1::Error::RoundTrip { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn resolve_scheme(a: &SmoothingArgs, scheme: &str) -> CliResult<SmoothingSpec> {
    let unexpected = |flag: &str| Err(usage(format!("--{flag} does not apply to {scheme} smoothing")));
    match scheme.to_ascii_lowercase().as_str() {
        "gaussian" => {
            if a.scale.is_some() {
                return unexpected("scale");
            }
            if a.half_width.is_some() {
                return unexpected("half-width");
            }
            let sigma = a.sigma.ok_or_else(|| usage("gaussian smoothing needs --sigma"))?;
            Ok(SmoothingSpec::gaussian(sigma)?)
        }
        "laplace" => {
            if a.sigma.is_some() {
                return unexpected("sigma");
            }
            if a.half_width.is_some() {
                return unexpected("half-width");
            }
            let scale = a.scale.ok_or_else(|| usage("laplace smoothing needs --scale"))?;
            Ok(SmoothingSpec::laplace(scale)?)
        }
        "uniform" => {
            if a.scale.is_some() {
                return unexpected("scale");
            }
            match (a.half_width, a.sigma, a.sigma_matched) {
                (Some(w), None, false) => Ok(SmoothingSpec::uniform(w)?),
                (None, Some(s), true) => Ok(SmoothingSpec::uniform_sigma_matched(s)?),
                _ => Err(usage("uniform smoothing needs --half-width, or --sigma with --sigma-matched")),
            }
        }
        other => Err(usage(format!("unknown smoothing scheme '{other}'"))),
    }
}

fn resolve_smoothing(a: &SmoothingArgs) -> CliResult<Option<(SmoothingSpec, ThreatModel)>> {
    let Some(scheme) = a.scheme.as_deref() else {
        if a.radius.is_some_and(|r| r != 0.0) {
            return Err(usage("--r needs a smoothing --scheme"));
        }
        return Ok(None);
    };
    let smoothing = resolve_scheme(a, scheme)?;
    let threat = ThreatModel::new(Norm::parse(&a.norm)?, a.radius.unwrap_or(0.0))?;
    Ok(Some((smoothing, threat)))
}

/// `x` to 12 significant digits.
fn sig12(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (11 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

pub fn certify(a: &CertifyArgs) -> CliResult<()> {
    if a.smoothing.scheme.is_none() {
        return Err(usage("certify needs --scheme"));
    }
    if a.smoothing.radius.is_none() {
        return Err(usage("certify needs --r"));
    }
    let (smoothing, threat) = resolve_smoothing(&a.smoothing)?.expect("scheme was checked");
    let lo = lower_certificate(a.beta, &smoothing, &threat)?;
    let hi = upper_certificate(a.beta, &smoothing, &threat)?;
    if lo.value > a.beta + 1e-12 || hi.value < a.beta - 1e-12 {
        return Err(CliError::Internal(format!(
            "bounds {} and {} do not bracket beta {}",
            lo.value, hi.value, a.beta
        )));
    }
    let mut out = io::stdout().lock();
    writeln!(out, "lower={}", sig12(lo.value))?;
    writeln!(out, "upper={}", sig12(hi.value))?;
    writeln!(out, "vacuous={}", lo.vacuous || hi.vacuous)?;
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs) -> CliResult<()> {
    let smoothing = resolve_smoothing(&a.smoothing)?;
    let mut kind = ScoreKind::parse(&a.score_kind, a.aps_seed)?;
    if let ScoreKind::Aps { seed: None } = kind {
        kind = ScoreKind::Aps {
            seed: Some(derive_seed(a.seed, 0, Role::Aps)),
        };
    }
    let table = load_score_table(&a.scores, TableFormat::from_path(&a.scores))?;
    let result = match smoothing {
        Some((s, t)) => calibrate_rcp1(&table, kind, a.alpha, &s, &t)?,
        None => calibrate_vanilla(&table, kind, a.alpha)?,
    };
    if result.vacuous != (result.threshold == f64::NEG_INFINITY) {
        return Err(CliError::Internal("vacuous flag disagrees with threshold".into()));
    }
    let artifact = CalibrationArtifact::new(result, kind, a.seed);
    fs::write(&a.out, artifact.to_text()).map_err(|e| usage(format!("{}: {e}", a.out.display())))?;
    Ok(())
}

/// APS randomization for test scores, distinct from the calibration draws.
fn test_kind(kind: ScoreKind) -> ScoreKind {
    match kind {
        ScoreKind::Aps { seed: Some(s) } => ScoreKind::Aps {
            seed: Some(derive_seed(s, 1, Role::Aps)),
        },
        other => other,
    }
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn predict(a: &PredictArgs) -> CliResult<()> {
    let file = File::open(&a.artifact).map_err(|_| CliError::MissingArtifact(a.artifact.display().to_string()))?;
    let artifact = CalibrationArtifact::parse(BufReader::new(file))?;
    let table = load_score_table(&a.scores, TableFormat::from_path(&a.scores))?;
    let scores = test_kind(artifact.score_kind).apply(&table)?;
    let sets = predict_sets(&scores, &artifact.result);
    if artifact.result.vacuous && sets.iter().any(|s| s.len() != scores.n_labels()) {
        return Err(CliError::Internal("vacuous calibration produced a partial set".into()));
    }
    let mut out = output(a.out.as_deref())?;
    for line in artifact.to_text().lines().filter(|l| !l.starts_with('#')) {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "# scores={}", a.scores.display())?;
    for set in &sets {
        let members: Vec<String> = set.members.iter().map(usize::to_string).collect();
        writeln!(out, "{}", members.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn read_sets(path: &Path) -> CliResult<(KeyValues, Vec<PredictionSet>)> {
    let mut provenance = String::new();
    let mut sets = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if let Some(rest) = line.strip_prefix('#') {
            provenance.push_str(rest.trim());
            provenance.push('\n');
            continue;
        }
        let members = line
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| usage(format!("{}: line {}: '{t}' is not a label index", path.display(), i + 1)))
            })
            .collect::<CliResult<Vec<_>>>()?;
        sets.push(PredictionSet {
            example_id: sets.len(),
            members,
        });
    }
    Ok((KeyValues::parse(provenance.as_bytes())?, sets))
}

fn emit(out: Option<&Path>, append: bool, provenance: &[(String, String)], row: &MetricsRow) -> CliResult<()> {
    if let (true, Some(path)) = (append, out) {
        if path.exists() {
            let header = metrics_header(open(path)?)?;
            if header.as_deref() != Some(row.header().as_str()) {
                return Err(usage(format!("{} has different columns; cannot append", path.display())));
            }
            let mut f = OpenOptions::new().append(true).open(path)?;
            writeln!(f, "{}", row.line())?;
            return Ok(());
        }
    }
    let mut w = output(out)?;
    write_metrics(&mut w, provenance, std::slice::from_ref(row))?;
    w.flush()?;
    Ok(())
}

fn provenance_value(kv: &KeyValues, key: &str) -> CliResult<f64> {
    match kv.get(key) {
        None | Some("none") => Ok(if key == "radius" { 0.0 } else { f64::NAN }),
        Some(_) => Ok(kv.parse_required(key)?),
    }
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let (kv, sets) = read_sets(&a.sets)?;
    let table = load_score_table(&a.scores, TableFormat::from_path(&a.scores))?;
    let labels = table
        .labels()
        .ok_or_else(|| usage(format!("{} has no label column", a.scores.display())))?;
    if let Some(bad) = sets.iter().flat_map(|s| &s.members).find(|m| **m >= table.n_labels()) {
        return Err(usage(format!("set member {bad} exceeds {} labels", table.n_labels())));
    }
    let metrics = evaluate_sets(&sets, labels, &a.thresholds)?;
    let alpha = 1.0 - provenance_value(&kv, "nominal_level")?;
    let seed = kv.get("seed").map_or(Ok(rcp1::DEFAULT_SEED), |_| kv.parse_required("seed"))?;
    let row = MetricsRow::from_set_metrics(
        alpha,
        provenance_value(&kv, "param")?,
        provenance_value(&kv, "radius")?,
        seed,
        &metrics,
    );
    let mut provenance = vec![
        ("command".to_string(), "evaluate".to_string()),
        ("sets".to_string(), a.sets.display().to_string()),
        ("scores".to_string(), a.scores.display().to_string()),
    ];
    provenance.extend(kv.keys().map(|k| (format!("calibration.{k}"), kv.get(k).unwrap_or_default().to_string())));
    emit(a.out.as_deref(), a.append, &provenance, &row)
}

fn load_manifest(path: &Path) -> CliResult<Vec<LabelledImage>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p.trim());
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut images = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (scores, truth) = line
            .split_once(',')
            .ok_or_else(|| usage(format!("{}: line {}: expected scores,truth", path.display(), i + 1)))?;
        let (scores, truth) = (resolve(scores), resolve(truth));
        let with_path = |p: &Path, e: rcp1::Error| usage(format!("{}: {e}", p.display()));
        let scores_grid = load_grid(&scores).map_err(|e| with_path(&scores, e))?;
        let truth = load_grid(&truth)
            .and_then(|g| Mask::from_grid(&g))
            .map_err(|e| with_path(&truth, e))?;
        if (scores_grid.rows, scores_grid.cols) != (truth.rows, truth.cols) {
            return Err(usage(format!("{}: line {}: score and truth grids differ in shape", path.display(), i + 1)));
        }
        images.push(LabelledImage {
            scores: scores_grid,
            truth,
        });
    }
    Ok(images)
}

pub fn risk(a: &RiskArgs) -> CliResult<()> {
    let (images, source) = match (&a.manifest, a.synthetic) {
        (Some(m), None) => (load_manifest(m)?, m.display().to_string()),
        (None, Some(n)) => (synthetic_segmentation(n, 16, 16, a.seed), format!("synthetic:{n}")),
        _ => return Err(usage("risk needs exactly one of --manifest or --synthetic")),
    };
    let config = RiskExperimentConfig {
        n_calibration: a.n_cal,
        resamples: a.resamples,
        alpha: a.alpha,
        sigma: a.sigma,
        radius: a.radius,
        seed: a.seed,
        grid_points: a.grid_points,
    };
    let s = run_risk_experiment(&images, &config)?;
    if s.splits.iter().any(|x| x.robust.outcome.lambda < x.vanilla.outcome.lambda) {
        return Err(CliError::Internal("robust lambda below plain lambda".into()));
    }

    if let Some(dir) = &a.mask_dir {
        fs::create_dir_all(dir)?;
        let lambda = s.splits[0].robust.outcome.lambda;
        for &i in &split_order(images.len(), a.seed, 0)[a.n_cal..] {
            let mask = threshold_mask(&images[i].scores, lambda);
            write_mask(BufWriter::new(File::create(dir.join(format!("mask_{i}.csv")))?), &mask)?;
        }
    }

    let values = [
        ("alpha_robust", s.alpha_robust),
        ("lambda", s.lambda.mean),
        ("robust_lambda", s.robust_lambda.mean),
        ("test_fnr", s.test_fnr.mean),
        ("test_fnr_se", s.test_fnr.se),
        ("robust_test_fnr", s.robust_test_fnr.mean),
        ("robust_test_fnr_se", s.robust_test_fnr.se),
        ("image_variance", s.image_variance),
        ("robust_image_variance", s.robust_image_variance),
        ("resample_variance", s.test_fnr.sd.powi(2)),
        ("robust_resample_variance", s.robust_test_fnr.sd.powi(2)),
        ("mask_prop", s.mask_proportion.mean),
        ("robust_mask_prop", s.robust_mask_proportion.mean),
        ("unsatisfiable", s.unsatisfiable as f64),
        ("robust_unsatisfiable", s.robust_unsatisfiable as f64),
    ];
    let row = MetricsRow {
        alpha: a.alpha,
        sigma: a.sigma,
        radius: a.radius,
        seed: a.seed,
        values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    };
    let provenance: Vec<(String, String)> = [
        ("command", "risk".to_string()),
        ("images", source),
        ("n_images", images.len().to_string()),
        ("n_cal", a.n_cal.to_string()),
        ("resamples", a.resamples.to_string()),
        ("grid_points", a.grid_points.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    emit(a.out.as_deref(), a.append, &provenance, &row)
}

fn simulate_config(a: &SimulateArgs) -> CliResult<ExperimentConfig> {
    let mut c = match &a.config {
        Some(path) => experiment_config_from(&KeyValues::parse(open(path)?)?)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! override_with {
        ($($field:ident <- $flag:ident),*) => {
            $(if let Some(v) = a.$flag {
                c.$field = v;
            })*
        };
    }
    override_with!(
        dim <- d,
        n_labels <- n_labels,
        n_calibration <- n_cal,
        n_test <- n_test,
        alpha <- alpha,
        sigma <- sigma,
        radius <- radius,
        trials <- trials,
        seed <- seed,
        sigma_data <- sigma_data,
        offset_spacing <- offset_spacing
    );
    c.validate()?;
    Ok(c)
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let config = simulate_config(a)?;
    let s = run_coverage_experiment(&config)?;
    let values = [
        ("rcp1_clean_coverage", s.rcp1_clean_coverage.mean),
        ("rcp1_clean_coverage_se", s.rcp1_clean_coverage.se),
        ("rcp1_worst_coverage", s.rcp1_worst_coverage.mean),
        ("rcp1_worst_coverage_se", s.rcp1_worst_coverage.se),
        ("rcp1_mean_size", s.rcp1_mean_size.mean),
        ("vanilla_clean_coverage", s.vanilla_clean_coverage.mean),
        ("vanilla_clean_coverage_se", s.vanilla_clean_coverage.se),
        ("vanilla_worst_coverage", s.vanilla_worst_coverage.mean),
        ("vanilla_worst_coverage_se", s.vanilla_worst_coverage.se),
        ("vanilla_mean_size", s.vanilla_mean_size.mean),
        ("adjusted_alpha", s.adjusted_alpha),
        ("rcp1_bound", s.rcp1_bound),
        ("vanilla_bound", s.vanilla_bound),
        ("vacuous_trials", s.vacuous_trials as f64),
    ];
    let row = MetricsRow {
        alpha: config.alpha,
        sigma: config.sigma,
        radius: config.radius,
        seed: config.seed,
        values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    };
    let mut provenance = vec![("command".to_string(), "simulate".to_string())];
    provenance.extend(experiment_config_pairs(&config));
    emit(a.out.as_deref(), a.append, &provenance, &row)
}

#[cfg(test)]
mod tests {
    use super::sig12;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(sig12(0.9), "0.900000000000");
        assert_eq!(sig12(0.012345678901234), "0.0123456789012");
        assert_eq!(sig12(1.0), "1.00000000000");
        assert_eq!(sig12(0.0), "0");
    }
}
