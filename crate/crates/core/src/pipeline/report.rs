//! Static SVG bar charts and a Markdown table from metric rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::MetricRow;
use crate::error::Result;

const BAR_H: f64 = 18.0;
const GAP: f64 = 6.0;
const LABEL_W: f64 = 300.0;
const PLOT_W: f64 = 360.0;
const MARGIN: f64 = 16.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bar chart of `(label, value)`; non-finite values are listed
/// but drawn without a bar.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let max = bars
        .iter()
        .map(|(_, v)| *v)
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1e-12);
    let top = MARGIN + 24.0;
    let height = top + bars.len() as f64 * (BAR_H + GAP) + MARGIN;
    let width = MARGIN * 2.0 + LABEL_W + PLOT_W + 70.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" font-size="14" font-weight="bold">{}</text>"#,
        MARGIN + 10.0,
        escape(title)
    );
    let x0 = MARGIN + LABEL_W;
    for (i, (label, v)) in bars.iter().enumerate() {
        let y = top + i as f64 * (BAR_H + GAP);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            y + BAR_H * 0.72,
            escape(label)
        );
        if v.is_finite() {
            let w = PLOT_W * v.abs() / max;
            let fill = if label.contains("alpha=0") || label.contains("interpolation") {
                "#9aa5b1"
            } else {
                "#3b6ea8"
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x0}" y="{y}" width="{w:.2}" height="{BAR_H}" fill="{fill}"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}">{v:.3}</text>"#,
                x0 + w + 4.0,
                y + BAR_H * 0.72
            );
        } else {
            let _ = writeln!(s, r#"<text x="{}" y="{}">n/a</text>"#, x0 + 4.0, y + BAR_H * 0.72);
        }
    }
    let _ = writeln!(
        s,
        r##"<line x1="{x0}" y1="{top}" x2="{x0}" y2="{}" stroke="#333333"/>"##,
        height - MARGIN
    );
    s.push_str("</svg>\n");
    s
}

/// One chart per metric plus `summary.md` with every row.
pub fn write_report(dir: &Path, rows: &[MetricRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut by_metric: BTreeMap<&str, Vec<(String, f64)>> = BTreeMap::new();
    for r in rows {
        by_metric
            .entry(&r.metric)
            .or_default()
            .push((r.conditions.clone(), r.value));
    }
    let mut md = String::from("| metric | conditions | value | seed | n |\n|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            md,
            "| {} | {} | {:.4} | {} | {} |",
            r.metric, r.conditions, r.value, r.seed, r.n
        );
    }
    md.push('\n');
    for (metric, bars) in &by_metric {
        let file = format!("{metric}.svg");
        fs::write(dir.join(&file), bar_chart(metric, bars))?;
        let _ = writeln!(md, "![{metric}]({file})");
    }
    fs::write(dir.join("summary.md"), md)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_lists_every_bar_and_escapes_labels() {
        let svg = bar_chart("probe", &[("a->b".into(), 0.5), ("c".into(), f64::NAN)]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("a-&gt;b"));
        assert!(svg.contains("n/a"));
        assert_eq!(svg.matches("<rect x=").count(), 1);
    }
}
