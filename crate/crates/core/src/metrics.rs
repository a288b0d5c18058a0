//! Metrics CSV, run summary, and side-by-side comparison of two runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::server::{ClientSummary, ExperimentOutcome, RoundReport};

const FIXED_COLUMNS: [&str; 7] = [
    "round",
    "global_acc",
    "global_loss",
    "mean_local_acc",
    "std_local_acc",
    "mean_params_ratio",
    "mean_flops_ratio",
];

pub fn header(num_hidden: usize) -> Vec<String> {
    let mut h: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    h.extend((1..=num_hidden).map(|k| format!("mean_alpha_l{k}")));
    h.push("epsilon".into());
    h.push("participants".into());
    h
}

/// Ten significant digits, plain notation where reasonable.
pub fn fmt_real(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-5..=10).contains(&mag) {
        return format!("{v:.9e}");
    }
    let decimals = (9 - mag).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn render_csv(reports: &[RoundReport], num_hidden: usize) -> String {
    let mut out = header(num_hidden).join(",");
    out.push('\n');
    for r in reports {
        let mut fields = vec![
            r.round.to_string(),
            fmt_real(r.global_accuracy),
            fmt_real(r.global_loss),
            fmt_real(r.mean_local_accuracy),
            fmt_real(r.std_local_accuracy),
            fmt_real(r.mean_params_ratio),
            fmt_real(r.mean_flops_ratio),
        ];
        fields.extend(r.mean_alpha.iter().map(|&a| fmt_real(a)));
        fields.push(fmt_real(r.epsilon));
        fields.push(
            r.participants
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(";"),
        );
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    algorithm: &'a str,
    rounds: usize,
    final_round: Option<&'a RoundReport>,
    client_failures: usize,
    clients: &'a [ClientSummary],
}

/// Writes `metrics.csv`, `summary.json`, and `config.toml` into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let num_hidden = outcome.supernet.num_hidden();
    let write = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(path, e))
    };
    write("metrics.csv", render_csv(&outcome.reports, num_hidden))?;
    write("config.toml", cfg.to_toml())?;
    let algorithm = serde_json::to_value(cfg.algorithm)?;
    let summary = Summary {
        algorithm: algorithm.as_str().unwrap_or("unknown"),
        rounds: outcome.reports.len(),
        final_round: outcome.reports.last(),
        client_failures: outcome.failures,
        clients: &outcome.clients,
    };
    write(
        "summary.json",
        serde_json::to_string_pretty(&summary)? + "\n",
    )
}

/// A parsed metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        let table = Self { columns, rows };
        table.check_schema()?;
        Ok(table)
    }

    fn check_schema(&self) -> Result<()> {
        let alphas = self
            .columns
            .iter()
            .filter(|c| c.starts_with("mean_alpha_l"))
            .count();
        if self.columns != header(alphas) {
            return Err(Error::Schema(format!(
                "unexpected columns {:?}",
                self.columns
            )));
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name}")))?;
        self.rows
            .iter()
            .map(|r| {
                r[i].parse::<f64>()
                    .map_err(|_| Error::Schema(format!("{name}: not a number: {:?}", r[i])))
            })
            .collect()
    }

    /// First round whose global accuracy reaches `target`.
    pub fn rounds_to_target(&self, target: f64) -> Result<Option<usize>> {
        let acc = self.column("global_acc")?;
        let rounds = self.column("round")?;
        Ok(acc
            .iter()
            .zip(&rounds)
            .find(|(a, _)| **a >= target)
            .map(|(_, r)| *r as usize + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetRow {
    pub target: f64,
    pub rounds_a: Option<usize>,
    pub rounds_b: Option<usize>,
    /// `rounds_a / rounds_b`; `None` unless both reach the target.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// (metric, final value in A, final value in B, B − A)
    pub finals: Vec<(String, f64, f64, f64)>,
    pub targets: Vec<TargetRow>,
}

pub fn compare(a: &MetricsTable, b: &MetricsTable, targets: &[f64]) -> Result<Comparison> {
    if a.columns != b.columns {
        return Err(Error::Schema(format!(
            "column sets differ: {:?} vs {:?}",
            a.columns, b.columns
        )));
    }
    let last = |t: &MetricsTable, col: &str| -> Result<f64> {
        t.column(col)?
            .last()
            .copied()
            .ok_or_else(|| Error::Schema("metrics file has no rows".into()))
    };
    let mut finals = Vec::new();
    for col in [
        "global_acc",
        "mean_local_acc",
        "mean_params_ratio",
        "mean_flops_ratio",
    ] {
        let (va, vb) = (last(a, col)?, last(b, col)?);
        finals.push((col.to_string(), va, vb, vb - va));
    }
    let targets = targets
        .iter()
        .map(|&t| {
            let (ra, rb) = (a.rounds_to_target(t)?, b.rounds_to_target(t)?);
            let speedup = match (ra, rb) {
                (Some(x), Some(y)) => Some(x as f64 / y as f64),
                _ => None,
            };
            Ok(TargetRow {
                target: t,
                rounds_a: ra,
                rounds_b: rb,
                speedup,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { finals, targets })
}

impl Comparison {
    pub fn render(&self, name_a: &str, name_b: &str) -> String {
        let mut out = String::new();
        let w = name_a.len().max(name_b.len()).max(12);
        let _ = writeln!(
            out,
            "{:<20} {:>w$} {:>w$} {:>12}",
            "metric", name_a, name_b, "delta"
        );
        for (m, a, b, d) in &self.finals {
            let _ = writeln!(out, "{m:<20} {a:>w$.4} {b:>w$.4} {d:>+12.4}");
        }
        if !self.targets.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "{:<20} {:>w$} {:>w$} {:>12}",
                "rounds to target", name_a, name_b, "speedup"
            );
            let show =
                |r: Option<usize>| r.map_or_else(|| "not reached".to_string(), |v| v.to_string());
            for t in &self.targets {
                let speed = t
                    .speedup
                    .map_or_else(|| "-".to_string(), |s| format!("{s:.2}x"));
                let _ = writeln!(
                    out,
                    "{:<20} {:>w$} {:>w$} {:>12}",
                    format!("acc >= {}", t.target),
                    show(t.rounds_a),
                    show(t.rounds_b),
                    speed
                );
            }
        }
        out
    }
}
