use std::path::Path;

use crate::error::{Error, Result};
use crate::trainers::{Method, TrainOutcome};

pub const LOG_HEADER: [&str; 10] = [
    "step",
    "method",
    "seed",
    "train_reward",
    "loss",
    "kl",
    "grad_norm",
    "grad_var",
    "tau",
    "val_reward",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunLogRow {
    pub step: usize,
    pub method: Method,
    pub seed: u64,
    pub train_reward: f64,
    pub loss: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub grad_var: f64,
    pub tau: f64,
    /// Present exactly at evaluation steps.
    pub val_reward: Option<f64>,
}

/// `x` as it reads back from a log file.
fn as_logged(x: f64) -> f64 {
    render_float(x).parse().unwrap_or(x)
}

/// One row per applied optimizer step, rounded to logged precision so that a
/// summary computed from these rows matches one recomputed from the files.
pub fn rows_from_outcome(method: Method, seed: u64, outcome: &TrainOutcome) -> Vec<RunLogRow> {
    outcome
        .reports
        .iter()
        .map(|r| RunLogRow {
            step: r.step,
            method,
            seed,
            train_reward: as_logged(r.mean_reward),
            loss: as_logged(r.loss),
            kl: as_logged(r.mean_kl),
            grad_norm: as_logged(r.grad_norm),
            grad_var: as_logged(r.grad_var),
            tau: as_logged(r.tau),
            val_reward: outcome.validation.iter().find(|v| v.0 == r.step).map(|v| as_logged(v.1)),
        })
        .collect()
}

/// Fixed-point rendering with nine significant digits.
pub fn render_float(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("integer exponent");
    let rounded: f64 = sci.parse().expect("round trip");
    let decimals = (8 - exp).max(0) as usize;
    format!("{rounded:.decimals$}")
}

pub fn write_logs(rows: &[RunLogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(LOG_HEADER).map_err(|e| csv_io(path, e))?;
    for r in rows {
        let record = [
            r.step.to_string(),
            r.method.name().to_string(),
            r.seed.to_string(),
            render_float(r.train_reward),
            render_float(r.loss),
            render_float(r.kl),
            render_float(r.grad_norm),
            render_float(r.grad_var),
            render_float(r.tau),
            r.val_reward.map(render_float).unwrap_or_default(),
        ];
        w.write_record(&record).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        Error::Csv(e)
    }
}

pub fn read_logs(path: &Path) -> Result<Vec<RunLogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != LOG_HEADER {
        return Err(Error::invalid(format!("{}: unexpected header {header:?}", path.display())));
    }
    let bad = |what: &str, line: usize| Error::invalid(format!("{}:{line}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let f = |k: usize, name: &str| rec[k].parse::<f64>().map_err(|_| bad(name, line));
        rows.push(RunLogRow {
            step: rec[0].parse().map_err(|_| bad("step", line))?,
            method: Method::parse(&rec[1]).map_err(|_| bad("method", line))?,
            seed: rec[2].parse().map_err(|_| bad("seed", line))?,
            train_reward: f(3, "train_reward")?,
            loss: f(4, "loss")?,
            kl: f(5, "kl")?,
            grad_norm: f(6, "grad_norm")?,
            grad_var: f(7, "grad_var")?,
            tau: f(8, "tau")?,
            val_reward: if rec[9].is_empty() { None } else { Some(f(9, "val_reward")?) },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(render_float(0.1 + 0.2), "0.300000000");
        assert_eq!(render_float(1.0), "1.00000000");
        assert_eq!(render_float(-12345.6789012), "-12345.6789");
        assert_eq!(render_float(0.0), "0.00000000");
        assert_eq!(render_float(1.5e-7), "0.000000150000000");
        assert_eq!(render_float(9.999999999), "10.0000000");
        assert_eq!(render_float(123456789012.0), "123456789000");
    }

    fn row(step: usize, val: Option<f64>) -> RunLogRow {
        RunLogRow {
            step,
            method: Method::GradeSte,
            seed: 7,
            train_reward: 0.25,
            loss: -0.125,
            kl: 0.0625,
            grad_norm: 3.5,
            grad_var: 1.5e-4,
            tau: 1.8125,
            val_reward: val,
        }
    }

    #[test]
    fn empty_rows_write_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_logs(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{}\n", LOG_HEADER.join(",")));
        assert!(read_logs(&p).unwrap().is_empty());
    }

    #[test]
    fn rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let rows = vec![row(1, None), row(2, Some(0.75))];
        write_logs(&rows, &p).unwrap();
        assert_eq!(read_logs(&p).unwrap(), rows);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with("1.81250000,"));
    }

    #[test]
    fn unwritable_path_is_named() {
        let err = write_logs(&[], Path::new("/nonexistent-dir/sub/x.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/sub/x.csv"), "{err}");
    }
}
