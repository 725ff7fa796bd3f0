use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::experiment::{generalization_summary, split_study_summary, CellKind, ExperimentResult};
use super::{Result, TrainError};
use crate::model::SplitPoint;
use crate::synth::DocClass;

pub const CSV_HEADER: &str = "experiment_id,pretrain_classes,split,finetune_fraction,iou_mean,iou_std,iou_median,score_mean,score_min_mean,invalid_count,train_seconds,epochs";

/// One row per result, in the given order.
pub fn results_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            r.experiment_id,
            DocClass::list_name(&r.pretrain_classes),
            r.split.map_or("full", SplitPoint::name),
            r.finetune_fraction.map(|f| format!("{f:.2}")).unwrap_or_default(),
            m.iou_mean,
            m.iou_std,
            m.iou_median,
            m.score_mean,
            m.score_min_mean,
            m.invalid_count,
            r.train_seconds.map(|s| format!("{s:.3}")).unwrap_or_default(),
            r.epochs
        );
    }
    out
}

/// Writes `results.csv` and the SVG plots that the results support.
/// Returns the written paths.
pub fn report(results: &[ExperimentResult], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|source| TrainError::Io { path: out_dir.display().to_string(), source })?;
    let mut files = vec![("results.csv".to_string(), results_csv(results))];
    if results.iter().any(|r| r.experiment == "splits") {
        files.push(("splits_iou.svg".into(), split_iou_plot(results)));
        files.push(("splits_time.svg".into(), split_time_plot(results)));
    }
    if results.iter().any(|r| r.experiment == "generalization") {
        files.push(("generalization_iou.svg".into(), generalization_plot(results, false)));
        files.push(("generalization_score.svg".into(), generalization_plot(results, true)));
    }
    let mut written = Vec::new();
    for (name, text) in files {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
        written.push(path);
    }
    Ok(written)
}

fn split_iou_plot(results: &[ExperimentResult]) -> String {
    let summary = split_study_summary(results);
    let mut labels = vec!["Generic".to_string()];
    labels.extend(SplitPoint::ALL.iter().map(|s| s.name().to_string()));
    let series = summary
        .iter()
        .map(|c| {
            let mut ys = vec![Some(c.generic_median)];
            ys.extend(SplitPoint::ALL.iter().map(|s| c.split_medians.iter().find(|(p, _)| p == s).map(|&(_, m)| m)));
            (c.holdout.name().to_string(), ys)
        })
        .collect();
    LinePlot {
        title: "Holdout-class median IoU by split",
        y_label: "median IoU",
        x_labels: labels,
        series,
        y_range: Some((0.0, 1.0)),
    }
    .to_svg()
}

fn split_time_plot(results: &[ExperimentResult]) -> String {
    let timed = results.iter().all(|r| r.train_seconds.is_some());
    let mut series = Vec::new();
    for class in DocClass::ALL {
        let ys: Vec<Option<f64>> = SplitPoint::ALL
            .iter()
            .map(|&s| {
                results
                    .iter()
                    .find(|r| {
                        r.experiment == "splits" && r.kind == CellKind::Finetune && r.holdout == class && r.split == Some(s)
                    })
                    .map(|r| if timed { r.train_seconds.unwrap_or(0.0) } else { r.epochs as f64 })
            })
            .collect();
        if ys.iter().any(Option::is_some) {
            series.push((class.name().to_string(), ys));
        }
    }
    LinePlot {
        title: "Fine-tuning cost by split",
        y_label: if timed { "seconds" } else { "epochs" },
        x_labels: SplitPoint::ALL.iter().map(|s| s.name().to_string()).collect(),
        series,
        y_range: None,
    }
    .to_svg()
}

fn generalization_plot(results: &[ExperimentResult], score: bool) -> String {
    let summary = generalization_summary(results);
    let fractions: Vec<f64> = summary.by_fraction.iter().map(|(f, _)| *f).collect();
    let labels = fractions.iter().map(|f| format!("{:.0}%", f * 100.0)).collect();
    let mut sizes: Vec<usize> = summary.by_fraction.iter().flat_map(|(_, v)| v.iter().map(|(s, _)| *s)).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let rows: Vec<&ExperimentResult> =
        results.iter().filter(|r| r.experiment == "generalization" && r.kind == CellKind::Finetune).collect();
    let mut series: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    for &size in &sizes {
        let ys = fractions
            .iter()
            .map(|&f| {
                if score {
                    let v: Vec<f64> = rows
                        .iter()
                        .filter(|r| {
                            r.finetune_fraction == Some(f)
                                && r.pretrain_classes.len() == size
                                && !r.pretrain_classes.contains(&r.holdout)
                        })
                        .map(|r| r.metrics.score_min_mean)
                        .collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                } else {
                    summary.by_fraction.iter().find(|(g, _)| *g == f)?.1.iter().find(|(s, _)| *s == size).map(|&(_, m)| m)
                }
            })
            .collect();
        series.push((format!("{size} class{}", if size == 1 { "" } else { "es" }), ys));
    }
    let all: Vec<Option<f64>> = fractions
        .iter()
        .map(|&f| {
            rows.iter().find(|r| r.finetune_fraction == Some(f) && r.pretrain_classes.contains(&r.holdout)).map(|r| {
                if score {
                    r.metrics.score_min_mean
                } else {
                    r.metrics.iou_median
                }
            })
        })
        .collect();
    if all.iter().any(Option::is_some) {
        series.push(("all classes".into(), all));
    }
    if let Some(scratch) = results.iter().find(|r| r.experiment == "generalization" && r.kind == CellKind::Scratch) {
        let v = if score { scratch.metrics.score_min_mean } else { scratch.metrics.iou_median };
        series.push(("scratch".into(), vec![Some(v); fractions.len()]));
    }
    LinePlot {
        title: if score { "Holdout document score by fine-tune fraction" } else { "Holdout median IoU by fine-tune fraction" },
        y_label: if score { "mean document score" } else { "median IoU" },
        x_labels: labels,
        series,
        y_range: Some((0.0, 1.0)),
    }
    .to_svg()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

struct LinePlot {
    title: &'static str,
    y_label: &'static str,
    x_labels: Vec<String>,
    series: Vec<(String, Vec<Option<f64>>)>,
    y_range: Option<(f64, f64)>,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LinePlot {
    fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const L: f64 = 60.0;
        const R: f64 = 130.0;
        const T: f64 = 40.0;
        const B: f64 = 50.0;
        let (y0, y1) = self.y_range.unwrap_or_else(|| {
            let max = self.series.iter().flat_map(|(_, v)| v.iter().flatten()).fold(0.0f64, |a, &b| a.max(b));
            (0.0, if max > 0.0 { max * 1.1 } else { 1.0 })
        });
        let n = self.x_labels.len().max(1);
        let px = |i: usize| L + (W - L - R) * if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
        let py = |v: f64| T + (H - T - B) * (1.0 - ((v - y0) / (y1 - y0)).clamp(0.0, 1.0));
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
        let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
        let _ =
            writeln!(s, r#"<text x="{:.1}" y="24" font-size="16" text-anchor="middle">{}</text>"#, W / 2.0, escape(self.title));
        let _ = writeln!(s, r#"<line x1="{L}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, H - B, W - R, H - B);
        let _ = writeln!(s, r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{:.1}" stroke="black"/>"#, H - B);
        for k in 0..=4 {
            let v = y0 + (y1 - y0) * k as f64 / 4.0;
            let y = py(v);
            let _ = writeln!(s, r##"<line x1="{L}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##, W - R);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.2}</text>"#, L - 6.0, y + 4.0);
        }
        for (i, label) in self.x_labels.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
                px(i),
                H - B + 18.0,
                escape(label)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(self.y_label)
        );
        for (k, (name, ys)) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let points: Vec<String> =
                ys.iter().enumerate().filter_map(|(i, v)| v.map(|v| format!("{:.1},{:.1}", px(i), py(v)))).collect();
            if !points.is_empty() {
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
                for p in &points {
                    let (x, y) = p.split_once(',').expect("formatted pair");
                    let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
                }
            }
            let ly = T + 16.0 * k as f64 + 8.0;
            let lx = W - R + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
                lx + 18.0
            );
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#, lx + 24.0, ly + 4.0, escape(name));
        }
        s.push_str("</svg>\n");
        s
    }
}
