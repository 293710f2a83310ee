//! Dataset and error-analysis bundle: token-length histogram (CSV and
//! SVG), class distribution, row-normalized confusions, per-class
//! statistics, agreement strata and Fleiss kappa.

use std::fmt::Write as _;
use std::path::Path;

use clarity_core::dataset::{summarize, DatasetSummary, HistogramBin};
use clarity_core::ensemble::load_predictions;
use clarity_core::evaluation::{evaluate, EvalReport, Stratum, TaskReport};
use serde::Serialize;

use crate::commands::{load_any, to_json, write, write_report};
use crate::config::RunConfig;
use crate::error::Result;

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut out = String::from("lower,upper,count\n");
    for b in bins {
        let _ = writeln!(out, "{},{},{}", b.lower, b.upper, b.count);
    }
    out
}

/// Static bar chart of the histogram with a dashed line at the token budget.
pub fn histogram_svg(bins: &[HistogramBin], budget: usize, title: &str) -> String {
    const W: f64 = 720.0;
    const H: f64 = 360.0;
    const LEFT: f64 = 56.0;
    const BOTTOM: f64 = 40.0;
    const TOP: f64 = 32.0;
    let plot_w = W - LEFT - 16.0;
    let plot_h = H - BOTTOM - TOP;
    let max_count = bins.iter().map(|b| b.count).max().unwrap_or(0).max(1) as f64;
    let max_x = bins.last().map_or(1, |b| b.upper).max(budget + 1) as f64;
    let x = |v: f64| LEFT + v / max_x * plot_w;
    let y = |c: f64| TOP + plot_h - c / max_count * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    for b in bins {
        let x0 = x(b.lower as f64);
        let x1 = x(b.upper as f64);
        let y0 = y(b.count as f64);
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="#4878a8" stroke="white" stroke-width="0.5"><title>[{}, {}): {}</title></rect>"##,
            (x1 - x0).max(0.5),
            TOP + plot_h - y0,
            b.lower,
            b.upper,
            b.count
        );
    }
    let bx = x(budget as f64);
    let _ = writeln!(
        s,
        r##"<line x1="{bx:.2}" y1="{TOP}" x2="{bx:.2}" y2="{}" stroke="#c03030" stroke-dasharray="4 3"/>"##,
        TOP + plot_h
    );
    let _ = writeln!(s, r##"<text x="{:.2}" y="{}" fill="#c03030">budget {budget}</text>"##, bx + 4.0, TOP + 12.0);
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{0}" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">tokens</text>"#, LEFT + plot_w / 2.0, H - 8.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">0</text>"#, LEFT - 4.0, TOP + plot_h);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{max_count}</text>"#, LEFT - 4.0, TOP + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LEFT + plot_w, TOP + plot_h + 14.0, max_x);
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn per_class_csv(task: &str, t: &TaskReport, out: &mut String) {
    for c in &t.per_class {
        let _ = writeln!(
            out,
            "{task},{},{},{},{},{}",
            c.label,
            c.n,
            c.accuracy,
            c.mean_confidence,
            c.misclassified_confidence.map_or(String::new(), |v| v.to_string())
        );
    }
}

pub fn per_class_stats_csv(r: &EvalReport) -> String {
    let mut out = String::from("task,class,n,accuracy,mean_confidence,misclassified_confidence\n");
    per_class_csv("clarity", &r.clarity, &mut out);
    per_class_csv("evasion", &r.evasion, &mut out);
    out
}

pub fn strata_csv(r: &EvalReport) -> Option<String> {
    let s = r.strata.as_ref()?;
    let f = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    let mut out = String::from("stratum,n,majority_vote,any_annotator,clarity_accuracy\n");
    for st in s.strata.iter().chain([&s.overall]) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            st.stratum.map_or("overall", Stratum::name),
            st.n,
            f(st.majority_vote),
            f(st.any_annotator),
            f(st.clarity_accuracy)
        );
    }
    Some(out)
}

#[derive(Debug, Serialize)]
struct Kappa {
    clarity: Option<f64>,
    evasion: Option<f64>,
}

#[derive(Debug)]
pub struct ReportBundle {
    pub summary: DatasetSummary,
    pub evaluation: Option<EvalReport>,
}

/// Writes the bundle to `<out_dir>/report/`. Without predictions only the
/// dataset part is produced.
pub fn cmd_report(cfg: &RunConfig, dataset: &Path, predictions: Option<&Path>) -> Result<(ReportBundle, String)> {
    cfg.pipeline().validate()?;
    let instances = load_any(dataset)?;
    let tokenizer = cfg.tokenizer.build()?;
    let split = dataset.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let summary = summarize(
        split,
        &instances,
        tokenizer.as_ref(),
        cfg.report.token_budget,
        cfg.report.histogram_bin_width,
    );
    let dir = cfg.out_dir.join("report");
    write(&dir.join("token_lengths.csv"), histogram_csv(&summary.histogram))?;
    write(
        &dir.join("token_lengths.svg"),
        histogram_svg(
            &summary.histogram,
            summary.token_budget,
            &format!("Token counts: {split}"),
        ),
    )?;
    write(&dir.join("dataset_summary.json"), to_json(&summary))?;

    let mut text = String::new();
    let _ = writeln!(
        text,
        "{}: {} instances, {:.1}% over {} tokens",
        summary.split,
        summary.instances,
        100.0 * summary.exceed_fraction,
        summary.token_budget
    );
    for c in summary.clarity.iter().chain(&summary.evasion) {
        let _ = writeln!(text, "  {:<22} {:>6} {:>6.1}%", c.label, c.count, 100.0 * c.fraction);
    }

    let evaluation = match predictions {
        Some(p) => {
            let preds = load_predictions(p)?;
            let report = evaluate(&instances, &preds)?;
            write_report(&dir, &report)?;
            write(&dir.join("per_class_stats.csv"), per_class_stats_csv(&report))?;
            if let Some(csv) = strata_csv(&report) {
                write(&dir.join("strata.csv"), csv)?;
            }
            write(
                &dir.join("kappa.json"),
                to_json(&Kappa {
                    clarity: report.fleiss_kappa_clarity,
                    evasion: report.fleiss_kappa_evasion,
                }),
            )?;
            text.push('\n');
            text.push_str(&clarity_core::evaluation::render_text(&report));
            Some(report)
        }
        None => None,
    };
    Ok((ReportBundle { summary, evaluation }, text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_enough() {
        let bins = vec![
            HistogramBin { lower: 0, upper: 64, count: 3 },
            HistogramBin { lower: 64, upper: 128, count: 7 },
        ];
        let svg = histogram_svg(&bins, 100, "a < b");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 3);
        assert!(svg.contains("a &lt; b"));
        assert_eq!(histogram_csv(&bins), "lower,upper,count\n0,64,3\n64,128,7\n");
    }

    #[test]
    fn empty_histogram_still_renders() {
        let svg = histogram_svg(&[], 512, "empty");
        assert!(svg.contains("budget 512"));
    }
}
