//! Score tables and conformity scores.
//!
//! A [`ScoreTable`] stands in for model inference: one row per example, one
//! column per label, plus the true label when known. Scores follow the
//! conformity convention (higher means the label agrees better with the
//! input), so every score kind uses the same `s >= q` set rule.

use std::fmt::Display;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::certificates::SmoothingSpec;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Per-example, per-label scores with optional true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    n_labels: usize,
    values: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl ScoreTable {
    /// Builds a table from row-major `values` (`n_examples * n_labels`).
    pub fn from_flat(n_labels: usize, values: Vec<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if n_labels == 0 {
            return Err(Error::Shape("a score table needs at least one label".into()));
        }
        if !values.len().is_multiple_of(n_labels) {
            return Err(Error::Shape(format!(
                "{} values do not fill rows of width {n_labels}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value {
                line: pos / n_labels + 2,
                column: pos % n_labels + 1,
            });
        }
        let table = Self {
            n_labels,
            values,
            labels: None,
        };
        match labels {
            Some(labels) => table.with_labels(labels),
            None => Ok(table),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let n_labels = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != n_labels) {
            return Err(Error::Shape(format!(
                "row {i} has {} entries, expected {n_labels}",
                rows[i].len()
            )));
        }
        Self::from_flat(n_labels, rows.concat(), labels)
    }

    /// Attaches true labels, replacing any existing ones.
    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n_examples() {
            return Err(Error::Shape(format!(
                "{} labels for {} examples",
                labels.len(),
                self.n_examples()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l >= self.n_labels) {
            return Err(Error::Label {
                line: i + 2,
                label: labels[i] as i64,
                n_labels: self.n_labels,
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n_examples(&self) -> usize {
        self.values.len() / self.n_labels
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_labels..(i + 1) * self.n_labels]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.n_labels)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Score of the true label in each row.
    pub fn true_label_scores(&self) -> Result<Vec<f64>> {
        let labels = self
            .labels()
            .ok_or_else(|| Error::Shape("score table has no labels".into()))?;
        Ok(self
            .rows()
            .zip(labels)
            .map(|(row, &y)| row[y])
            .collect())
    }

    fn map_rows(&self, f: impl Fn(usize, &[f64]) -> Vec<f64>) -> Self {
        let values = self.rows().enumerate().flat_map(|(i, r)| f(i, r)).collect();
        Self {
            n_labels: self.n_labels,
            values,
            labels: self.labels.clone(),
        }
    }
}

/// Delimiter of a score file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Tsv,
}

impl TableFormat {
    /// `.tsv` / `.tab` means TSV; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("tsv") || ext.eq_ignore_ascii_case("tab") => {
                TableFormat::Tsv
            }
            _ => TableFormat::Csv,
        }
    }

    fn delimiter(self) -> u8 {
        match self {
            TableFormat::Csv => b',',
            TableFormat::Tsv => b'\t',
        }
    }
}

pub fn load_score_table(path: &Path, format: TableFormat) -> Result<ScoreTable> {
    let file = std::fs::File::open(path)?;
    read_score_table(file, format)
}

/// Parses `score_0,...,score_{K-1}[,label]` with one example per line.
pub fn read_score_table<R: Read>(reader: R, format: TableFormat) -> Result<ScoreTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: usize, message: String| Error::Parse { line, message };

    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let has_label = header.iter().next_back() == Some("label");
    let n_labels = header.len() - usize::from(has_label);
    if n_labels == 0 {
        return Err(parse_err(1, "header declares no score columns".into()));
    }
    for (k, name) in header.iter().take(n_labels).enumerate() {
        if name != format!("score_{k}") {
            return Err(parse_err(
                1,
                format!("expected column 'score_{k}', found '{name}'"),
            ));
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        for (k, field) in record.iter().take(n_labels).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("'{field}' is not a number")))?;
            if !v.is_finite() {
                return Err(Error::Value {
                    line,
                    column: k + 1,
                });
            }
            values.push(v);
        }
        if has_label {
            let field = &record[n_labels];
            let label: i64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("label '{field}' is not an integer")))?;
            if label < 0 || label as usize >= n_labels {
                return Err(Error::Label {
                    line,
                    label,
                    n_labels,
                });
            }
            labels.push(label as usize);
        }
    }
    if values.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    ScoreTable::from_flat(n_labels, values, has_label.then_some(labels))
}

pub fn write_score_table<W: Write>(writer: W, table: &ScoreTable, format: TableFormat) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(format.delimiter())
        .from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut header: Vec<String> = (0..table.n_labels()).map(|k| format!("score_{k}")).collect();
    if table.labels().is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(io)?;
    for (i, row) in table.rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(labels) = table.labels() {
            rec.push(labels[i].to_string());
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_scores(logits: &ScoreTable) -> ScoreTable {
    logits.map_rows(|_, row| softmax(row))
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// APS conformity scores for one row with randomizer `u`:
/// `s(y) = -(pi_y * u + sum_k pi_k [pi_k > pi_y])`.
///
/// Ties are excluded from the sum (strict inequality).
pub fn aps_row(probs: &[f64], u: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut above = vec![0.0; probs.len()];
    let mut mass_before = 0.0;
    let mut i = 0;
    while i < order.len() {
        let level = probs[order[i]];
        let mut j = i;
        let mut group = 0.0;
        while j < order.len() && probs[order[j]] == level {
            above[order[j]] = mass_before;
            group += level;
            j += 1;
        }
        mass_before += group;
        i = j;
    }
    probs
        .iter()
        .zip(above)
        .map(|(p, above)| -(p * u + above))
        .collect()
}

/// APS scores for a table of probability rows; `u ~ Uniform[0, 1)` is drawn
/// per example from `(seed, example index)`.
pub fn aps_scores(probs: &ScoreTable, seed: u64) -> Result<ScoreTable> {
    for (i, row) in probs.rows().enumerate() {
        let total: f64 = row.iter().sum();
        if row.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRow {
                example: i,
                message: format!("not a probability vector (sum {total})"),
            });
        }
    }
    Ok(probs.map_rows(|i, row| {
        let u: f64 = stream_rng(seed, i as u64).random();
        aps_row(row, u)
    }))
}

/// How raw model outputs become conformity scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Softmax probability of the label.
    Tps,
    /// Adaptive prediction sets. Without a seed the randomizer is not replayable.
    Aps { seed: Option<u64> },
    /// The raw logit.
    Logit,
}

impl ScoreKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreKind::Tps => "tps",
            ScoreKind::Aps { .. } => "aps",
            ScoreKind::Logit => "logit",
        }
    }

    pub fn parse(name: &str, aps_seed: Option<u64>) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tps" => Ok(ScoreKind::Tps),
            "aps" => Ok(ScoreKind::Aps { seed: aps_seed }),
            "logit" => Ok(ScoreKind::Logit),
            other => Err(Error::Domain(format!("unknown score kind '{other}'"))),
        }
    }

    /// Converts a table of logits into conformity scores.
    pub fn apply(&self, logits: &ScoreTable) -> Result<ScoreTable> {
        match *self {
            ScoreKind::Tps => Ok(softmax_scores(logits)),
            ScoreKind::Logit => Ok(logits.clone()),
            ScoreKind::Aps { seed } => {
                let seed = seed.unwrap_or_else(|| rand::rng().random());
                aps_scores(&softmax_scores(logits), seed)
            }
        }
    }
}

/// Scores every example on exactly one noisy copy of its input.
///
/// Example `i` receives a single `dim`-dimensional draw from `smoothing`,
/// taken from the random stream `(seed, i)`, so draws are independent across
/// examples and do not depend on evaluation order.
pub fn augment_once<F, E>(
    n_examples: usize,
    dim: usize,
    smoothing: &SmoothingSpec,
    seed: u64,
    mut score_fn: F,
) -> Result<ScoreTable>
where
    F: FnMut(usize, &[f64]) -> std::result::Result<Vec<f64>, E>,
    E: Display,
{
    smoothing.validated()?;
    let mut values = Vec::new();
    let mut width = None;
    for i in 0..n_examples {
        let noise = smoothing.sample(&mut stream_rng(seed, i as u64), dim);
        let row = score_fn(i, &noise).map_err(|e| Error::Callback {
            index: i,
            message: e.to_string(),
        })?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Shape(format!(
                    "example {i} returned {} scores, expected {w}",
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
    }
    let n_labels = width.unwrap_or(1);
    ScoreTable::from_flat(n_labels, values, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn parse(text: &str) -> Result<ScoreTable> {
        read_score_table(text.as_bytes(), TableFormat::Csv)
    }

    #[test]
    fn loads_labelled_table() {
        let t = parse("score_0,score_1,label\n0.1,0.9,1\n0.8,0.2,0\n0.5,0.5,1\n").unwrap();
        assert_eq!((t.n_examples(), t.n_labels()), (3, 2));
        assert_eq!(t.row(1), &[0.8, 0.2]);
        assert_eq!(t.labels(), Some(&[1, 0, 1][..]));
        assert_eq!(t.true_label_scores().unwrap(), vec![0.9, 0.8, 0.5]);
    }

    #[test]
    fn loads_tsv_with_crlf_and_no_labels() {
        let text = "score_0\tscore_1\tscore_2\r\n1\t2\t3\r\n-1.5\t0\t2e-3\r\n";
        let t = read_score_table(text.as_bytes(), TableFormat::Tsv).unwrap();
        assert_eq!(t.n_examples(), 2);
        assert!(t.labels().is_none());
        assert_eq!(t.row(1), &[-1.5, 0.0, 0.002]);
    }

    #[test]
    fn empty_data_is_parse_error() {
        assert!(matches!(parse("score_0,score_1,label\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn nan_is_value_error() {
        let err = parse("score_0,score_1\n0.1,0.2\n0.3,NaN\n").unwrap_err();
        assert_eq!(err, Error::Value { line: 3, column: 2 });
        assert!(matches!(parse("score_0\ninf\n"), Err(Error::Value { .. })));
    }

    #[test]
    fn width_and_label_errors() {
        assert!(matches!(
            parse("score_0,score_1,label\n0.1,0.9\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse("score_0,score_1,label\n0.1,0.9,2\n"),
            Err(Error::Label { label: 2, .. })
        ));
        assert!(matches!(
            parse("score_0,score_1,label\n0.1,0.9,-1\n"),
            Err(Error::Label { label: -1, .. })
        ));
        assert!(matches!(parse("a,b\n1,2\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn write_then_read() {
        let t = ScoreTable::from_rows(vec![vec![0.125, -3.0], vec![1e-300, 7.5]], Some(vec![0, 1]))
            .unwrap();
        let mut buf = Vec::new();
        write_score_table(&mut buf, &t, TableFormat::Csv).unwrap();
        assert_eq!(parse(std::str::from_utf8(&buf).unwrap()).unwrap(), t);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
    }

    #[test]
    fn aps_examples() {
        let u = 0.37;
        let s = aps_row(&[1.0, 0.0], u);
        assert_eq!(s, vec![-u, -1.0]);
        let s = aps_row(&[0.7, 0.2, 0.1], 0.0);
        assert_eq!(s[0], 0.0);
        let s = aps_row(&[0.5, 0.5], u);
        assert_eq!(s, vec![-0.5 * u, -0.5 * u]);
    }

    #[test]
    fn aps_rejects_non_probabilities() {
        let t = ScoreTable::from_rows(vec![vec![0.5, 0.7]], None).unwrap();
        assert!(matches!(aps_scores(&t, 1), Err(Error::InvalidRow { example: 0, .. })));
    }

    #[test]
    fn aps_is_seeded() {
        let t = ScoreTable::from_rows(vec![vec![0.2, 0.8], vec![0.6, 0.4]], None).unwrap();
        assert_eq!(aps_scores(&t, 9).unwrap(), aps_scores(&t, 9).unwrap());
        assert_ne!(aps_scores(&t, 9).unwrap(), aps_scores(&t, 10).unwrap());
    }

    #[test]
    fn augment_identity_callback() {
        let clean = [vec![0.1, 0.9], vec![0.4, 0.6]];
        let smoothing = SmoothingSpec::gaussian(0.5).unwrap();
        let t = augment_once(2, 3, &smoothing, 1, |i, _noise| {
            Ok::<_, Infallible>(clean[i].clone())
        })
        .unwrap();
        assert_eq!(t, ScoreTable::from_rows(clean.to_vec(), None).unwrap());
    }

    #[test]
    fn augment_is_deterministic_and_seed_sensitive() {
        let smoothing = SmoothingSpec::laplace(0.3).unwrap();
        let f = |_: usize, noise: &[f64]| Ok::<_, Infallible>(vec![noise.iter().sum()]);
        let a = augment_once(20, 4, &smoothing, 5, f).unwrap();
        let b = augment_once(20, 4, &smoothing, 5, f).unwrap();
        let c = augment_once(20, 4, &smoothing, 6, f).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn augment_reports_callback_index() {
        let smoothing = SmoothingSpec::gaussian(1.0).unwrap();
        let err = augment_once(5, 1, &smoothing, 0, |i, _| {
            if i == 3 {
                Err("model crashed")
            } else {
                Ok(vec![0.0])
            }
        })
        .unwrap_err();
        assert_eq!(
            err,
            Error::Callback {
                index: 3,
                message: "model crashed".into()
            }
        );
    }
}
