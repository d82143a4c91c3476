use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::config::Variant;
use crate::error::{PdfError, Result};
use crate::perturb::VoteMode;

/// One (variant, vote, n_max, seed, task) cell of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub variant: Variant,
    pub vote: VoteMode,
    pub n_max: usize,
    pub seed: u64,
    pub task: u64,
    /// Over evaluation rollouts.
    pub success_rate: f64,
    /// Over adaptation episodes; zero when none ran.
    pub adapt_success_rate: f64,
    pub mean_uncertainty: f64,
    pub mean_budget: f64,
    pub episodes_adapted: usize,
    pub wall_time_ms: u64,
}

pub const COLUMNS: [&str; 11] = [
    "variant",
    "vote",
    "n_max",
    "seed",
    "task",
    "success_rate",
    "adapt_success_rate",
    "mean_uncertainty",
    "mean_budget",
    "episodes_adapted",
    "wall_time_ms",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = PdfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            _ => Err(PdfError::InvalidConfig(format!("unknown format {s:?} (csv|jsonl)"))),
        }
    }
}

impl Format {
    /// Picks the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

impl MetricsRow {
    /// Field values in `COLUMNS` order; reals with six decimals.
    fn fields(&self, timing: bool) -> [String; 11] {
        [
            self.variant.to_string(),
            self.vote.to_string(),
            self.n_max.to_string(),
            self.seed.to_string(),
            self.task.to_string(),
            format!("{:.6}", self.success_rate),
            format!("{:.6}", self.adapt_success_rate),
            format!("{:.6}", self.mean_uncertainty),
            format!("{:.6}", self.mean_budget),
            self.episodes_adapted.to_string(),
            if timing { self.wall_time_ms } else { 0 }.to_string(),
        ]
    }

    fn from_fields(f: &[&str]) -> Result<Self> {
        if f.len() != COLUMNS.len() {
            return Err(PdfError::InvalidValue(format!(
                "metrics row has {} fields, expected {}",
                f.len(),
                COLUMNS.len()
            )));
        }
        fn num<T: FromStr>(col: &str, s: &str) -> Result<T> {
            s.parse()
                .map_err(|_| PdfError::InvalidValue(format!("column {col}: cannot parse {s:?}")))
        }
        Ok(Self {
            variant: f[0].parse()?,
            vote: f[1].parse()?,
            n_max: num("n_max", f[2])?,
            seed: num("seed", f[3])?,
            task: num("task", f[4])?,
            success_rate: num("success_rate", f[5])?,
            adapt_success_rate: num("adapt_success_rate", f[6])?,
            mean_uncertainty: num("mean_uncertainty", f[7])?,
            mean_budget: num("mean_budget", f[8])?,
            episodes_adapted: num("episodes_adapted", f[9])?,
            wall_time_ms: num("wall_time_ms", f[10])?,
        })
    }
}

/// Renders rows; with `timing == false` wall times are written as 0 so that
/// repeated runs produce identical bytes.
pub fn render_metrics(rows: &[MetricsRow], format: Format, timing: bool) -> Result<String> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| PdfError::InvalidValue(e.to_string());
            w.write_record(COLUMNS).map_err(io)?;
            for row in rows {
                w.write_record(row.fields(timing)).map_err(io)?;
            }
            let bytes = w.into_inner().map_err(|e| PdfError::InvalidValue(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        Format::Jsonl => {
            let mut out = String::new();
            for row in rows {
                let fields = row.fields(timing);
                out.push('{');
                for (i, (col, val)) in COLUMNS.iter().zip(&fields).enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    // variant and vote are strings; everything else is numeric.
                    if i < 2 {
                        write!(out, "\"{col}\":{}", serde_json::Value::from(val.as_str())).unwrap();
                    } else {
                        write!(out, "\"{col}\":{val}").unwrap();
                    }
                }
                out.push_str("}\n");
            }
            Ok(out)
        }
    }
}

/// Writes `rows` to `path`; the parent directory must exist.
pub fn emit_metrics(rows: &[MetricsRow], path: &Path, format: Format, timing: bool) -> Result<()> {
    if rows.is_empty() {
        return Err(PdfError::EmptyInput("metrics rows"));
    }
    let text = render_metrics(rows, format, timing)?;
    std::fs::write(path, text).map_err(|e| PdfError::io(path, e))
}

pub fn parse_metrics(text: &str, format: Format) -> Result<Vec<MetricsRow>> {
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let header = r.headers().map_err(|e| PdfError::InvalidValue(e.to_string()))?;
            if header.iter().ne(COLUMNS) {
                return Err(PdfError::InvalidValue(format!("unexpected header {header:?}")));
            }
            r.records()
                .map(|rec| {
                    let rec = rec.map_err(|e| PdfError::InvalidValue(e.to_string()))?;
                    MetricsRow::from_fields(&rec.iter().collect::<Vec<_>>())
                })
                .collect()
        }
        Format::Jsonl => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let v: serde_json::Map<String, serde_json::Value> =
                    serde_json::from_str(line).map_err(|e| PdfError::InvalidValue(e.to_string()))?;
                let fields = COLUMNS
                    .iter()
                    .map(|c| match v.get(*c) {
                        Some(serde_json::Value::String(s)) => Ok(s.clone()),
                        Some(other) => Ok(other.to_string()),
                        None => Err(PdfError::InvalidValue(format!("missing key {c}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                MetricsRow::from_fields(&fields.iter().map(String::as_str).collect::<Vec<_>>())
            })
            .collect(),
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| PdfError::io(path, e))?;
    parse_metrics(&text, Format::from_path(path))
}

/// Success rate of one configuration across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub variant: Variant,
    pub vote: VoteMode,
    pub n_max: usize,
    pub seeds: usize,
    /// Mean over seeds of the per-seed mean over tasks.
    pub mean: f64,
    /// Standard error of `mean` (sample std over seeds / sqrt(seeds)).
    pub std_error: f64,
    pub mean_budget: f64,
}

/// Groups rows by (variant, vote, n_max), in first-seen order.
pub fn summarize(rows: &[MetricsRow]) -> Vec<Summary> {
    type Key = (Variant, VoteMode, usize);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, BTreeMap<u64, Vec<&MetricsRow>>> = BTreeMap::new();
    for r in rows {
        let key = (r.variant, r.vote, r.n_max);
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().entry(r.seed).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let per_seed: Vec<(f64, f64)> = groups[&key]
                .values()
                .map(|rs| {
                    let n = rs.len() as f64;
                    (
                        rs.iter().map(|r| r.success_rate).sum::<f64>() / n,
                        rs.iter().map(|r| r.mean_budget).sum::<f64>() / n,
                    )
                })
                .collect();
            let n = per_seed.len() as f64;
            let mean = per_seed.iter().map(|p| p.0).sum::<f64>() / n;
            let std_error = if per_seed.len() > 1 {
                let var = per_seed.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            Summary {
                variant: key.0,
                vote: key.1,
                n_max: key.2,
                seeds: per_seed.len(),
                mean,
                std_error,
                mean_budget: per_seed.iter().map(|p| p.1).sum::<f64>() / n,
            }
        })
        .collect()
}
