//! Confusion heatmaps and label-distribution bars as SVG.
//!
//! Every figure is drawn from the CSV written next to it, re-read from
//! disk, so the plotted numbers are exactly the exported ones.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clarity_core::dataset::DatasetSummary;
use clarity_core::evaluation::ConfusionMatrix;
use clarity_core::evaluation::MetricsReport;

use crate::{write_text, CliError};

const CELL: f64 = 56.0;
const LABEL_W: f64 = 170.0;
const HEADER_H: f64 = 150.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// White to dark blue.
fn shade(v: f64) -> String {
    let t = v.clamp(0.0, 1.0);
    let ch = |hi: f64, lo: f64| (hi + (lo - hi) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", ch(255.0, 8.0), ch(255.0, 48.0), ch(255.0, 107.0))
}

pub fn heatmap_svg(title: &str, labels: &[String], rows: &[Vec<f64>]) -> String {
    let n = labels.len() as f64;
    let width = LABEL_W + CELL * n + 20.0;
    let height = HEADER_H + CELL * n + 40.0;
    let max = rows.iter().flatten().copied().fold(0.0f64, f64::max);
    let scale = if max > 1.0 { max } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="18" font-size="14" text-anchor="middle">{}</text>"#, width / 2.0, escape(title));
    for (j, l) in labels.iter().enumerate() {
        let x = LABEL_W + CELL * (j as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" transform="rotate(-50 {x} {})" text-anchor="start">{}</text>"#,
            HEADER_H - 6.0,
            HEADER_H - 6.0,
            escape(l)
        );
    }
    for (i, (l, row)) in labels.iter().zip(rows).enumerate() {
        let y = HEADER_H + CELL * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LABEL_W - 6.0, y + CELL / 2.0 + 4.0, escape(l));
        for (j, v) in row.iter().enumerate() {
            let x = LABEL_W + CELL * j as f64;
            let t = v / scale;
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#999"/>"##,
                shade(t)
            );
            let ink = if t > 0.55 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v:.2}</text>"#,
                x + CELL / 2.0,
                y + CELL / 2.0 + 4.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">predicted</text>"#,
        LABEL_W + CELL * n / 2.0,
        height - 10.0
    );
    s.push_str("</svg>\n");
    s
}

/// `family,label,count,fraction` rows for each summary.
pub fn distribution_csv(summaries: &[DatasetSummary]) -> String {
    let mut s = String::from("family,label,count,fraction\n");
    for d in summaries {
        for (label, count) in &d.counts {
            let fraction = d.fractions.get(label).copied().unwrap_or(0.0);
            let _ = writeln!(s, "{},{},{},{:?}", d.family, label, count, fraction);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionRow {
    pub family: String,
    pub label: String,
    pub count: u64,
    pub fraction: f64,
}

pub fn parse_distribution_csv(text: &str) -> Result<Vec<DistributionRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some("family,label,count,fraction") {
        return Err("unexpected distribution header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let parts: Vec<&str> = line.split(',').collect();
            let [family, label, count, fraction] = parts[..] else {
                return Err(format!("malformed row {line:?}"));
            };
            Ok(DistributionRow {
                family: family.to_string(),
                label: label.to_string(),
                count: count.parse().map_err(|e| format!("{line:?}: {e}"))?,
                fraction: fraction.parse().map_err(|e| format!("{line:?}: {e}"))?,
            })
        })
        .collect()
}

pub fn distribution_svg(rows: &[DistributionRow]) -> String {
    const BAR_H: f64 = 20.0;
    const BAR_MAX: f64 = 320.0;
    let mut families: Vec<&str> = Vec::new();
    for r in rows {
        if !families.contains(&r.family.as_str()) {
            families.push(&r.family);
        }
    }
    let height = 30.0 + rows.len() as f64 * BAR_H + families.len() as f64 * 30.0 + 10.0;
    let width = LABEL_W + BAR_MAX + 110.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="18" font-size="14" text-anchor="middle">Training label distribution</text>"#, width / 2.0);
    let mut y = 30.0;
    for fam in families {
        let _ = writeln!(s, r#"<text x="8" y="{}" font-weight="bold">{}</text>"#, y + 16.0, escape(fam));
        y += 24.0;
        let group: Vec<&DistributionRow> = rows.iter().filter(|r| r.family == fam).collect();
        let top = group.iter().map(|r| r.fraction).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
        for r in group {
            let w = BAR_MAX * r.fraction / top;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LABEL_W - 6.0, y + 14.0, escape(&r.label));
            let _ = writeln!(s, r##"<rect x="{LABEL_W}" y="{}" width="{w:.2}" height="{}" fill="#3a6ea5"/>"##, y + 3.0, BAR_H - 6.0);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}">{} ({:.1}%)</text>"#,
                LABEL_W + w + 6.0,
                y + 14.0,
                r.count,
                100.0 * r.fraction
            );
            y += BAR_H;
        }
        y += 6.0;
    }
    s.push_str("</svg>\n");
    s
}

fn confusion_pair(dir: &Path, stem: &str, title: &str, m: &ConfusionMatrix, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let csv_path = dir.join(format!("{stem}.csv"));
    write_text(&csv_path, &m.to_csv(true))?;
    let text = std::fs::read_to_string(&csv_path).map_err(CliError::io(&csv_path))?;
    let (labels, rows) = ConfusionMatrix::parse_csv(&text).map_err(CliError::Config)?;
    let svg_path = dir.join(format!("{stem}.svg"));
    write_text(&svg_path, &heatmap_svg(title, &labels, &rows))?;
    out.push(csv_path);
    out.push(svg_path);
    Ok(())
}

/// Writes CSV/SVG pairs for each confusion matrix and the training
/// distribution present in `report`; returns the written paths.
pub fn emit_report_plots(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut out = Vec::new();
    let norm = |m: &ConfusionMatrix| if m.row_normalized.is_some() { "row-normalised" } else { "mean counts" };
    confusion_pair(
        dir,
        "confusion_clarity",
        &format!("{}: clarity ({})", report.run_id, norm(&report.clarity_confusion)),
        &report.clarity_confusion,
        &mut out,
    )?;
    if let Some(m) = &report.evasion_confusion {
        confusion_pair(dir, "confusion_evasion", &format!("{}: evasion ({})", report.run_id, norm(m)), m, &mut out)?;
    }
    if !report.training_distribution.is_empty() {
        let csv_path = dir.join("distribution.csv");
        write_text(&csv_path, &distribution_csv(&report.training_distribution))?;
        let text = std::fs::read_to_string(&csv_path).map_err(CliError::io(&csv_path))?;
        let rows = parse_distribution_csv(&text).map_err(CliError::Config)?;
        let svg_path = dir.join("distribution.svg");
        write_text(&svg_path, &distribution_svg(&rows))?;
        out.push(csv_path);
        out.push(svg_path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shade_endpoints() {
        assert_eq!(shade(0.0), "#ffffff");
        assert_eq!(shade(1.0), "#08306b");
        assert_eq!(shade(7.0), "#08306b");
    }

    #[test]
    fn heatmap_has_one_cell_per_entry() {
        let labels = vec!["A".to_string(), "B<&>".to_string()];
        let svg = heatmap_svg("t", &labels, &[vec![0.75, 0.25], vec![0.0, 1.0]]);
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains(">0.75<"));
        assert!(svg.contains("B&lt;&amp;&gt;"));
        assert!(!svg.contains("B<&>"));
    }

    #[test]
    fn distribution_rows_parse_back() {
        let text = "family,label,count,fraction\nclarity,Ambivalent,3,0.6\nclarity,Clear Reply,2,0.4\n";
        let rows = parse_distribution_csv(text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], DistributionRow { family: "clarity".into(), label: "Ambivalent".into(), count: 3, fraction: 0.6 });
        let svg = distribution_svg(&rows);
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.contains("3 (60.0%)"));
        assert!(parse_distribution_csv("x\n").is_err());
        assert!(parse_distribution_csv("family,label,count,fraction\na,b,c\n").is_err());
    }
}
