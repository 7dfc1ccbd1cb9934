//! Standalone SVG line charts written by hand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::oracle::EstimatorReport;
use crate::trainers::Method;

use super::logs::RunLogRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Clone, Debug, Default)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Highlighted points drawn as circles.
    pub markers: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.05 } else { 0.5 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// One chart as an SVG group whose top-left corner sits at `(dx, 0)`.
fn render_chart(chart: &Chart, dx: f64) -> String {
    let all = || chart.series.iter().flat_map(|s| s.points.iter().chain(&s.markers));
    let (x0, x1) = bounds(all().map(|p| p.0));
    let (y0, y1) = bounds(all().map(|p| p.1));
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, "<g transform=\"translate({dx},0)\">");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        MARGIN_LEFT + pw / 2.0,
        escape(&chart.title)
    );
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN_LEFT}\" y=\"{MARGIN_TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>"
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            "<line x1=\"{px:.2}\" y1=\"{}\" x2=\"{px:.2}\" y2=\"{}\" stroke=\"#444\"/><text x=\"{px:.2}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>",
            MARGIN_TOP + ph,
            MARGIN_TOP + ph + 5.0,
            MARGIN_TOP + ph + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{py:.2}\" x2=\"{MARGIN_LEFT}\" y2=\"{py:.2}\" stroke=\"#444\"/><text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{}</text>",
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(&chart.x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {0})\">{1}</text>",
        MARGIN_TOP + ph / 2.0,
        escape(&chart.y_label)
    );
    for (k, series) in chart.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if series.points.len() > 1 {
            let path: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                "<polyline class=\"series\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                path.join(" ")
            );
        }
        let mut dots = series.markers.clone();
        if series.points.len() == 1 {
            dots.extend(&series.points);
        }
        for (x, y) in dots {
            let _ = writeln!(
                s,
                "<circle class=\"point\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\"/>",
                sx(x),
                sy(y)
            );
        }
        let ly = MARGIN_TOP + 10.0 + 18.0 * k as f64;
        let lx = WIDTH - MARGIN_RIGHT + 12.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text class=\"legend\" x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>",
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            escape(&series.name)
        );
    }
    s.push_str("</g>\n");
    s
}

/// Charts placed side by side in one document.
pub fn svg_document(charts: &[Chart]) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{HEIGHT}\" viewBox=\"0 0 {0} {HEIGHT}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        WIDTH * charts.len() as f64
    );
    for (i, c) in charts.iter().enumerate() {
        s.push_str(&render_chart(c, WIDTH * i as f64));
    }
    s.push_str("</svg>\n");
    s
}

fn methods_in(rows: &[RunLogRow]) -> Vec<Method> {
    let mut out = Vec::new();
    for r in rows {
        if !out.contains(&r.method) {
            out.push(r.method);
        }
    }
    out
}

/// Per-step mean across seeds of `f` for one method.
fn seed_mean(rows: &[RunLogRow], method: Method, f: impl Fn(&RunLogRow) -> Option<f64>) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.method == method) {
        if let Some(v) = f(r) {
            let e = acc.entry(r.step).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(s, (sum, n))| (s as f64, sum / n as f64)).collect()
}

/// Train reward averaged over each evaluation window minus the validation reward.
fn gap_series(rows: &[RunLogRow], method: Method) -> Vec<(f64, f64)> {
    let mut seeds: Vec<u64> = rows.iter().filter(|r| r.method == method).map(|r| r.seed).collect();
    seeds.sort();
    seeds.dedup();
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for seed in seeds {
        let run: Vec<&RunLogRow> = rows.iter().filter(|r| r.method == method && r.seed == seed).collect();
        let mut window = Vec::new();
        for r in run {
            window.push(r.train_reward);
            if let Some(v) = r.val_reward {
                let train = window.iter().sum::<f64>() / window.len() as f64;
                let e = acc.entry(r.step).or_insert((0.0, 0));
                e.0 += train - v;
                e.1 += 1;
                window.clear();
            }
        }
    }
    acc.into_iter().map(|(s, (sum, n))| (s as f64, sum / n as f64)).collect()
}

#[derive(Debug, Default)]
pub struct PlotReport {
    pub written: Vec<PathBuf>,
    /// Panels left out for lack of data, with the reason.
    pub skipped: Vec<String>,
}

fn write_svg(path: PathBuf, charts: &[Chart], report: &mut PlotReport) -> Result<()> {
    std::fs::write(&path, svg_document(charts)).map_err(|e| Error::io(&path, e))?;
    report.written.push(path);
    Ok(())
}

fn step_chart(title: &str, y: &str, series: Vec<Series>) -> Chart {
    Chart {
        title: title.into(),
        x_label: "step".into(),
        y_label: y.into(),
        series,
    }
}

/// Writes the training-curve panels (a)–(e) from run logs and, when a sweep
/// is given, the bias/variance panel (f).
pub fn emit_plots(rows: &[RunLogRow], sweep: Option<&[EstimatorReport]>, outdir: &Path) -> Result<PlotReport> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut report = PlotReport::default();
    let methods = methods_in(rows);
    let named = |m: Method, points: Vec<(f64, f64)>| Series {
        name: m.name().into(),
        points,
        markers: Vec::new(),
    };
    if rows.is_empty() {
        report.skipped.push("panels a-e: no log rows".into());
    } else {
        let panels: [(&str, &str, &str, fn(&RunLogRow) -> Option<f64>); 3] = [
            ("a_train_reward.svg", "Training reward", "mean reward", |r| Some(r.train_reward)),
            ("b_loss.svg", "Loss", "loss", |r| Some(r.loss)),
            ("c_kl.svg", "KL divergence", "KL to reference", |r| Some(r.kl)),
        ];
        for (file, title, y, f) in panels {
            let series = methods.iter().map(|&m| named(m, seed_mean(rows, m, f))).collect();
            write_svg(outdir.join(file), &[step_chart(title, y, series)], &mut report)?;
        }
        if rows.iter().any(|r| r.val_reward.is_some()) {
            let series = methods
                .iter()
                .map(|&m| {
                    let points = seed_mean(rows, m, |r| r.val_reward);
                    let best = points.iter().copied().fold(None, |b: Option<(f64, f64)>, p| match b {
                        Some(q) if q.1 >= p.1 => Some(q),
                        _ => Some(p),
                    });
                    Series {
                        name: m.name().into(),
                        markers: best.into_iter().collect(),
                        points,
                    }
                })
                .collect();
            write_svg(
                outdir.join("d_val_reward.svg"),
                &[step_chart("Validation reward (best checkpoint marked)", "mean reward", series)],
                &mut report,
            )?;
            let series = methods.iter().map(|&m| named(m, gap_series(rows, m))).collect();
            write_svg(
                outdir.join("e_generalization_gap.svg"),
                &[step_chart("Generalization gap (train - val)", "reward gap", series)],
                &mut report,
            )?;
        } else {
            report.skipped.push("panel d: no validation rows".into());
            report.skipped.push("panel e: no validation rows".into());
        }
    }
    match sweep {
        Some(reports) if !reports.is_empty() => {
            let pts = |f: fn(&EstimatorReport) -> f64| -> Vec<(f64, f64)> {
                reports.iter().filter_map(|r| Some((r.tau?, f(r)))).collect()
            };
            let chart = |title: &str, y: &str, name: &str, points: Vec<(f64, f64)>| Chart {
                title: title.into(),
                x_label: "temperature".into(),
                y_label: y.into(),
                series: vec![Series {
                    name: name.into(),
                    markers: points.clone(),
                    points,
                }],
            };
            write_svg(
                outdir.join("f_bias_variance.svg"),
                &[
                    chart("Bias vs temperature", "L2 bias", "bias", pts(|r| r.bias_l2)),
                    chart("Variance vs temperature", "mean variance", "variance", pts(|r| r.variance_summary)),
                ],
                &mut report,
            )?;
        }
        _ => report.skipped.push("panel f: no temperature sweep".into()),
    }
    for note in &report.skipped {
        log::info!("plot skipped: {note}");
    }
    Ok(report)
}
