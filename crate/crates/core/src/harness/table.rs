//! Long-format result rows and their per-cell summaries.
//!
//! `results.csv` columns, in order:
//! `experiment,algorithm,local_steps,batch_size,x,metric,trial,value`.
//! `batch_size` is empty for full-batch runs; `x` is the round or the sweep
//! value. `summary.csv` replaces `trial,value` with `trials,mean,stderr`.
//! Floats are written with 17 significant digits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub algorithm: String,
    pub local_steps: usize,
    pub batch_size: Option<usize>,
    pub x: f64,
    pub metric: String,
    pub trial: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub algorithm: String,
    pub local_steps: usize,
    pub batch_size: Option<usize>,
    pub x: f64,
    pub metric: String,
    pub trials: usize,
    pub mean: f64,
    /// Standard error of the mean; NaN with a single trial.
    pub stderr: f64,
}

impl SummaryRow {
    /// Legend label: algorithm, plus the batch size when there is one.
    pub fn series(&self) -> String {
        series_label(&self.algorithm, self.batch_size)
    }
}

pub fn series_label(algorithm: &str, batch_size: Option<usize>) -> String {
    match batch_size {
        Some(b) => format!("{algorithm} B={b}"),
        None => algorithm.to_string(),
    }
}

/// Per-round values of one metric from one training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTrace {
    pub metric: String,
    pub algorithm: String,
    pub local_steps: usize,
    pub batch_size: Option<usize>,
    pub trial: usize,
    pub values: Vec<f64>,
}

fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("not a number: {s:?}")))
}

type CellKey = (String, usize, Option<usize>, String);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    /// Rows computed directly from pooled trials (e.g. a federation gain,
    /// which is a ratio of means); they bypass the per-trial summary.
    pub pooled: Vec<SummaryRow>,
}

impl ResultTable {
    pub fn push_trace(&mut self, experiment: &str, trace: &MetricTrace) {
        for (t, &v) in trace.values.iter().enumerate() {
            self.rows.push(ResultRow {
                experiment: experiment.into(),
                algorithm: trace.algorithm.clone(),
                local_steps: trace.local_steps,
                batch_size: trace.batch_size,
                x: t as f64,
                metric: trace.metric.clone(),
                trial: trace.trial,
                value: v,
            });
        }
    }

    /// Mean and standard error per `(algorithm, batch, metric, x)` cell,
    /// followed by the pooled rows, in a fixed order.
    pub fn summarize(&self) -> Vec<SummaryRow> {
        let mut cells: BTreeMap<(CellKey, u64), (ResultRow, Vec<f64>)> = BTreeMap::new();
        let mut order: Vec<CellKey> = Vec::new();
        for r in &self.rows {
            let key: CellKey = (r.algorithm.clone(), r.local_steps, r.batch_size, r.metric.clone());
            if !order.contains(&key) {
                order.push(key.clone());
            }
            cells
                .entry((key, sortable(r.x)))
                .or_insert_with(|| (r.clone(), Vec::new()))
                .1
                .push(r.value);
        }
        let rank: BTreeMap<&CellKey, usize> = order.iter().enumerate().map(|(i, k)| (k, i)).collect();
        let mut out: Vec<(usize, u64, SummaryRow)> = cells
            .iter()
            .map(|((key, xk), (first, vals))| {
                let (mean, se) = mean_stderr(vals);
                (
                    rank[key],
                    *xk,
                    SummaryRow {
                        experiment: first.experiment.clone(),
                        algorithm: first.algorithm.clone(),
                        local_steps: first.local_steps,
                        batch_size: first.batch_size,
                        x: first.x,
                        metric: first.metric.clone(),
                        trials: vals.len(),
                        mean,
                        stderr: se,
                    },
                )
            })
            .collect();
        out.sort_by_key(|(r, x, _)| (*r, *x));
        out.into_iter()
            .map(|(_, _, s)| s)
            .chain(self.pooled.iter().cloned())
            .collect()
    }

    /// Every `(algorithm, batch, x, metric)` cell must hold exactly `trials` rows.
    pub fn check_complete(&self, trials: usize) -> Result<()> {
        let mut counts: BTreeMap<(CellKey, u64), usize> = BTreeMap::new();
        for r in &self.rows {
            *counts
                .entry((
                    (r.algorithm.clone(), r.local_steps, r.batch_size, r.metric.clone()),
                    sortable(r.x),
                ))
                .or_default() += 1;
        }
        match counts.iter().find(|(_, &c)| c != trials) {
            Some(((k, _), c)) => Err(Error::Numeric(format!(
                "cell {}/{} has {c} rows, expected {trials}",
                k.0, k.3
            ))),
            None => Ok(()),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("experiment,algorithm,local_steps,batch_size,x,metric,trial,value\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.experiment,
                r.algorithm,
                r.local_steps,
                r.batch_size.map(|b| b.to_string()).unwrap_or_default(),
                fmt_f64(r.x),
                r.metric,
                r.trial,
                fmt_f64(r.value)
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv())
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("experiment,algorithm,local_steps,batch_size,x,metric,trials,mean,stderr\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.experiment,
            r.algorithm,
            r.local_steps,
            r.batch_size.map(|b| b.to_string()).unwrap_or_default(),
            fmt_f64(r.x),
            r.metric,
            r.trials,
            fmt_f64(r.mean),
            fmt_f64(r.stderr)
        );
    }
    s
}

/// Reads `summary.csv`, or summarizes a `results.csv`, whichever `path` is.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("{}: missing column {name}", path.display())))
    };
    let is_summary = headers.iter().any(|h| h == "mean");
    let base = [
        col("experiment")?,
        col("algorithm")?,
        col("local_steps")?,
        col("batch_size")?,
        col("x")?,
        col("metric")?,
    ];
    let extra = if is_summary {
        [col("trials")?, col("mean")?, col("stderr")?]
    } else {
        [col("trial")?, col("value")?, 0]
    };
    let mut table = ResultTable::default();
    let mut summary = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| Error::Parse(format!("{}: row {}: bad {what}", path.display(), line + 2));
        let local_steps = get(base[2]).parse().map_err(|_| bad("local_steps"))?;
        let batch_size = match get(base[3]) {
            "" => None,
            b => Some(b.parse().map_err(|_| bad("batch_size"))?),
        };
        let x = parse_f64(get(base[4]))?;
        if is_summary {
            summary.push(SummaryRow {
                experiment: get(base[0]).into(),
                algorithm: get(base[1]).into(),
                local_steps,
                batch_size,
                x,
                metric: get(base[5]).into(),
                trials: get(extra[0]).parse().map_err(|_| bad("trials"))?,
                mean: parse_f64(get(extra[1]))?,
                stderr: parse_f64(get(extra[2]))?,
            });
        } else {
            table.rows.push(ResultRow {
                experiment: get(base[0]).into(),
                algorithm: get(base[1]).into(),
                local_steps,
                batch_size,
                x,
                metric: get(base[5]).into(),
                trial: get(extra[0]).parse().map_err(|_| bad("trial"))?,
                value: parse_f64(get(extra[1]))?,
            });
        }
    }
    Ok(if is_summary { summary } else { table.summarize() })
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Order-preserving map of a float to an integer key.
fn sortable(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}
