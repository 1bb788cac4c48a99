//! Plain-text files exchanged between runs: calibration artifacts, flat
//! key=value configs and the metrics CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::certificates::{Norm, SmoothingSpec, ThreatModel};
use crate::conformal::{CalibrationResult, SetMetrics};
use crate::error::{Error, Result};
use crate::scores::ScoreKind;
use crate::simulate::ExperimentConfig;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const VACUOUS_TOKEN: &str = "VACUOUS";

/// Ordered `key=value` pairs. Blank lines and `#` comments are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected key=value, found '{line}'"),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), (line_no, value.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(l, _)| *l)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("missing key '{key}'"),
        })
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| Error::Parse {
                line: self.line_of(key),
                message: format!("invalid value '{raw}' for '{key}'"),
            }),
        }
    }

    pub fn parse_required<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.parse_value(key)?.ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("missing key '{key}'"),
        })
    }

    /// Fails on keys outside `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Parse {
                line: self.line_of(k),
                message: format!("unknown key '{k}'"),
            }),
            None => Ok(()),
        }
    }
}

const EXPERIMENT_KEYS: [&str; 11] = [
    "d",
    "K",
    "n_cal",
    "n_test",
    "alpha",
    "sigma",
    "radius",
    "trials",
    "seed",
    "sigma_data",
    "offset_spacing",
];

/// Reads an experiment config; absent keys keep their defaults.
pub fn experiment_config_from(kv: &KeyValues) -> Result<ExperimentConfig> {
    kv.reject_unknown(&EXPERIMENT_KEYS)?;
    let mut c = ExperimentConfig::default();
    macro_rules! set {
        ($field:ident, $key:literal) => {
            if let Some(v) = kv.parse_value($key)? {
                c.$field = v;
            }
        };
    }
    set!(dim, "d");
    set!(n_labels, "K");
    set!(n_calibration, "n_cal");
    set!(n_test, "n_test");
    set!(alpha, "alpha");
    set!(sigma, "sigma");
    set!(radius, "radius");
    set!(trials, "trials");
    set!(seed, "seed");
    set!(sigma_data, "sigma_data");
    set!(offset_spacing, "offset_spacing");
    c.validate()?;
    Ok(c)
}

pub fn experiment_config_pairs(c: &ExperimentConfig) -> Vec<(String, String)> {
    [
        ("d", c.dim.to_string()),
        ("K", c.n_labels.to_string()),
        ("n_cal", c.n_calibration.to_string()),
        ("n_test", c.n_test.to_string()),
        ("alpha", c.alpha.to_string()),
        ("sigma", c.sigma.to_string()),
        ("radius", c.radius.to_string()),
        ("trials", c.trials.to_string()),
        ("seed", c.seed.to_string()),
        ("sigma_data", c.sigma_data.to_string()),
        ("offset_spacing", c.offset_spacing.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// A calibration result with everything needed to reproduce and apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationArtifact {
    pub result: CalibrationResult,
    pub score_kind: ScoreKind,
    pub seed: u64,
    pub tool_version: String,
}

fn format_threshold(q: f64) -> String {
    if q == f64::NEG_INFINITY {
        VACUOUS_TOKEN.to_string()
    } else {
        q.to_string()
    }
}

impl CalibrationArtifact {
    pub fn new(result: CalibrationResult, score_kind: ScoreKind, seed: u64) -> Self {
        Self {
            result,
            score_kind,
            seed,
            tool_version: TOOL_VERSION.to_string(),
        }
    }

    pub fn to_text(&self) -> String {
        let r = &self.result;
        let mut out = String::from("# rcp1 calibration\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("tool_version", self.tool_version.clone());
        put("threshold", format_threshold(r.threshold));
        put("nominal_level", r.nominal_level.to_string());
        put("adjusted_level", r.adjusted_level.to_string());
        put("n_calibration", r.n_calibration.to_string());
        put("scheme", r.smoothing.map_or("none".into(), |s| s.name().to_string()));
        put("param", r.smoothing.map_or("none".into(), |s| s.parameter().to_string()));
        put("norm", r.threat.map_or("none".into(), |t| t.norm.name().to_string()));
        put("radius", r.threat.map_or("none".into(), |t| t.radius.to_string()));
        put("vacuous", r.vacuous.to_string());
        put("score_kind", self.score_kind.name().to_string());
        let aps_seed = match self.score_kind {
            ScoreKind::Aps { seed: Some(s) } => s.to_string(),
            _ => "none".into(),
        };
        put("aps_seed", aps_seed);
        put("seed", self.seed.to_string());
        out
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let kv = KeyValues::parse(reader)?;
        kv.reject_unknown(&[
            "tool_version",
            "threshold",
            "nominal_level",
            "adjusted_level",
            "n_calibration",
            "scheme",
            "param",
            "norm",
            "radius",
            "vacuous",
            "score_kind",
            "aps_seed",
            "seed",
        ])?;
        let threshold = match kv.require("threshold")? {
            VACUOUS_TOKEN => f64::NEG_INFINITY,
            _ => {
                let q: f64 = kv.parse_required("threshold")?;
                if !q.is_finite() {
                    return Err(Error::Parse {
                        line: kv.line_of("threshold"),
                        message: format!("threshold must be finite or {VACUOUS_TOKEN}"),
                    });
                }
                q
            }
        };
        let optional = |key: &str| kv.require(key).map(|v| (v != "none").then_some(v));
        let smoothing = match (optional("scheme")?, optional("param")?) {
            (Some(name), Some(_)) => Some(SmoothingSpec::from_parts(name, kv.parse_required("param")?)?),
            (None, None) => None,
            _ => return Err(parse_error(&kv, "scheme", "scheme and param must both be set or both be none")),
        };
        let threat = match (optional("norm")?, optional("radius")?) {
            (Some(norm), Some(_)) => Some(ThreatModel::new(Norm::parse(norm)?, kv.parse_required("radius")?)?),
            (None, None) => None,
            _ => return Err(parse_error(&kv, "norm", "norm and radius must both be set or both be none")),
        };
        let aps_seed = match optional("aps_seed")? {
            Some(_) => Some(kv.parse_required("aps_seed")?),
            None => None,
        };
        let vacuous: bool = kv.parse_required("vacuous")?;
        if vacuous != (threshold == f64::NEG_INFINITY) {
            return Err(parse_error(&kv, "vacuous", "vacuous flag disagrees with threshold"));
        }
        Ok(Self {
            result: CalibrationResult {
                threshold,
                nominal_level: kv.parse_required("nominal_level")?,
                adjusted_level: kv.parse_required("adjusted_level")?,
                n_calibration: kv.parse_required("n_calibration")?,
                smoothing,
                threat,
                vacuous,
            },
            score_kind: ScoreKind::parse(kv.require("score_kind")?, aps_seed)?,
            seed: kv.parse_required("seed")?,
            tool_version: kv.require("tool_version")?.to_string(),
        })
    }
}

fn parse_error(kv: &KeyValues, key: &str, message: &str) -> Error {
    Error::Parse {
        line: kv.line_of(key),
        message: message.into(),
    }
}

/// One metrics row: the identifying columns plus named values.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub alpha: f64,
    pub sigma: f64,
    pub radius: f64,
    pub seed: u64,
    pub values: Vec<(String, f64)>,
}

impl MetricsRow {
    /// Row for prediction-set metrics: coverage, mean size, `prop_le_k`, `cov_le_k`.
    pub fn from_set_metrics(alpha: f64, sigma: f64, radius: f64, seed: u64, m: &SetMetrics) -> Self {
        let mut values = vec![
            ("coverage".to_string(), m.coverage),
            ("mean_size".to_string(), m.mean_size),
        ];
        for b in &m.buckets {
            values.push((format!("prop_le_{}", b.max_size), b.proportion));
            values.push((format!("cov_le_{}", b.max_size), b.coverage));
        }
        Self {
            alpha,
            sigma,
            radius,
            seed,
            values,
        }
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["alpha", "sigma", "radius", "seed"];
        cols.extend(self.values.iter().map(|(k, _)| k.as_str()));
        cols.join(",")
    }

    pub fn line(&self) -> String {
        let mut cols = vec![
            self.alpha.to_string(),
            self.sigma.to_string(),
            self.radius.to_string(),
            self.seed.to_string(),
        ];
        cols.extend(self.values.iter().map(|(_, v)| v.to_string()));
        cols.join(",")
    }
}

/// Writes `# key=value` provenance lines, the header and the rows.
pub fn write_metrics<W: Write>(mut w: W, provenance: &[(String, String)], rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "# tool_version={TOOL_VERSION}")?;
    for (k, v) in provenance {
        writeln!(w, "# {k}={v}")?;
    }
    if let Some(first) = rows.first() {
        let header = first.header();
        if let Some(bad) = rows.iter().find(|r| r.header() != header) {
            return Err(Error::Shape(format!(
                "metrics rows disagree on columns: '{}' vs '{header}'",
                bad.header()
            )));
        }
        writeln!(w, "{header}")?;
    }
    for row in rows {
        writeln!(w, "{}", row.line())?;
    }
    Ok(())
}

/// Header line of an existing metrics file, skipping provenance comments.
pub fn metrics_header<R: BufRead>(reader: R) -> Result<Option<String>> {
    for line in reader.lines() {
        let line = line?;
        if !line.starts_with('#') && !line.trim().is_empty() {
            return Ok(Some(line));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::SizeBucket;

    fn result(threshold: f64) -> CalibrationResult {
        CalibrationResult {
            threshold,
            nominal_level: 0.9,
            adjusted_level: 0.962_588_805_599_939_9,
            n_calibration: 200,
            smoothing: Some(SmoothingSpec::gaussian(0.5).unwrap()),
            threat: Some(ThreatModel::l2(0.25).unwrap()),
            vacuous: threshold == f64::NEG_INFINITY,
        }
    }

    fn round_trip(a: &CalibrationArtifact) -> CalibrationArtifact {
        CalibrationArtifact::parse(a.to_text().as_bytes()).unwrap()
    }

    #[test]
    fn artifact_round_trips() {
        let a = CalibrationArtifact::new(result(0.123_456_789_012_345_67), ScoreKind::Tps, 42);
        assert_eq!(round_trip(&a), a);
        let v = CalibrationArtifact::new(result(f64::NEG_INFINITY), ScoreKind::Aps { seed: Some(7) }, 1);
        assert!(v.to_text().contains("threshold=VACUOUS\n"));
        assert_eq!(round_trip(&v), v);
        let mut plain = a.clone();
        plain.result.smoothing = None;
        plain.result.threat = None;
        plain.score_kind = ScoreKind::Logit;
        assert_eq!(round_trip(&plain), plain);
    }

    #[test]
    fn artifact_rejects_inconsistencies() {
        let a = CalibrationArtifact::new(result(0.5), ScoreKind::Tps, 42);
        let text = a.to_text();
        let bad = text.replace("vacuous=false", "vacuous=true");
        assert!(CalibrationArtifact::parse(bad.as_bytes()).is_err());
        let bad = text.replace("threshold=0.5", "threshold=-inf");
        assert!(CalibrationArtifact::parse(bad.as_bytes()).is_err());
        let bad = text.replace("param=0.5", "param=none");
        assert!(CalibrationArtifact::parse(bad.as_bytes()).is_err());
        let bad = format!("{text}extra=1\n");
        assert!(CalibrationArtifact::parse(bad.as_bytes()).is_err());
    }

    #[test]
    fn key_values() {
        let kv = KeyValues::parse("# c\n\nalpha = 0.1\nK=10\n".as_bytes()).unwrap();
        assert_eq!(kv.get("alpha"), Some("0.1"));
        assert_eq!(kv.parse_required::<usize>("K").unwrap(), 10);
        assert!(matches!(
            KeyValues::parse("a=1\nb\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(KeyValues::parse("a=1\na=2\n".as_bytes()).is_err());
        assert!(matches!(kv.parse_value::<u64>("alpha"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn experiment_config_round_trips() {
        let c = ExperimentConfig {
            trials: 17,
            radius: 0.12,
            ..Default::default()
        };
        let text: String = experiment_config_pairs(&c)
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let kv = KeyValues::parse(text.as_bytes()).unwrap();
        assert_eq!(experiment_config_from(&kv).unwrap(), c);
        let kv = KeyValues::parse("sigmaa=1\n".as_bytes()).unwrap();
        assert!(experiment_config_from(&kv).is_err());
        let kv = KeyValues::parse("alpha=1.5\n".as_bytes()).unwrap();
        assert!(experiment_config_from(&kv).is_err());
    }

    #[test]
    fn metrics_layout() {
        let m = SetMetrics {
            n_examples: 4,
            coverage: 0.75,
            mean_size: 1.5,
            buckets: vec![SizeBucket {
                max_size: 1,
                proportion: 0.5,
                coverage: 1.0,
            }],
        };
        let row = MetricsRow::from_set_metrics(0.1, 0.5, 0.0, 3, &m);
        let mut out = Vec::new();
        write_metrics(&mut out, &[("command".into(), "evaluate".into())], &[row]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "# command=evaluate");
        assert_eq!(lines[2], "alpha,sigma,radius,seed,coverage,mean_size,prop_le_1,cov_le_1");
        assert_eq!(lines[3], "0.1,0.5,0,3,0.75,1.5,0.5,1");
        assert_eq!(metrics_header(text.as_bytes()).unwrap().as_deref(), Some(lines[2]));
    }
}
