//! Comparison and ablation tables: published reference rows plus rows
//! computed from our own metrics, as aligned text or CSV.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, parse_case_csv, MetricsReport, UndefinedHd95, ORGANS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// Percent.
    pub dsc: f64,
    /// mm; `None` renders as "-".
    pub hd95: Option<f64>,
    /// Per-organ DSC in percent, table column order. Empty for two-column tables.
    pub organs: Vec<f64>,
}

impl ReportRow {
    pub fn from_report(method: &str, r: &MetricsReport) -> Self {
        Self {
            method: method.to_string(),
            dsc: r.mean_dsc,
            hd95: Some(r.mean_hd95),
            organs: r.per_class_dsc.clone(),
        }
    }

    fn summary(method: &str, dsc: f64, hd95: Option<f64>) -> Self {
        Self {
            method: method.to_string(),
            dsc,
            hd95,
            organs: Vec::new(),
        }
    }
}

fn full(method: &str, dsc: f64, hd95: Option<f64>, organs: [f64; 8]) -> ReportRow {
    ReportRow {
        method: method.to_string(),
        dsc,
        hd95,
        organs: organs.to_vec(),
    }
}

/// Published multi-organ results on the Synapse benchmark.
pub fn table1_reference() -> Vec<ReportRow> {
    vec![
        full("V-Net", 68.81, None, [75.34, 51.87, 77.10, 80.75, 87.84, 40.05, 80.56, 56.98]),
        full("DARR", 69.77, None, [74.74, 53.77, 72.31, 73.24, 94.08, 54.18, 89.90, 45.96]),
        full("R50 U-Net", 74.68, Some(36.87), [87.74, 63.66, 80.60, 78.19, 93.74, 56.90, 85.87, 74.16]),
        full("U-Net", 76.85, Some(39.70), [89.07, 69.72, 77.77, 68.60, 93.43, 53.98, 86.67, 75.58]),
        full("R50 Att-UNet", 75.57, Some(36.97), [55.92, 63.91, 79.20, 72.71, 93.56, 49.37, 87.19, 74.95]),
        full("R50 ViT", 71.29, Some(32.87), [73.73, 55.13, 75.80, 72.20, 91.51, 45.99, 81.99, 73.95]),
        full("TransUnet", 77.48, Some(31.69), [87.23, 63.13, 81.87, 77.02, 94.08, 55.86, 85.08, 75.62]),
        full("MTM", 78.59, Some(26.56), [87.92, 64.99, 81.47, 77.29, 93.06, 59.46, 87.75, 76.81]),
        full("SwinUNet", 79.12, Some(21.55), [85.47, 66.53, 83.28, 79.61, 94.29, 56.58, 90.66, 76.60]),
        full("SAMed", 81.88, Some(20.64), [87.77, 69.11, 80.45, 79.95, 94.80, 72.17, 88.72, 82.06]),
        full("MISSFormer", 81.96, Some(18.20), [86.99, 68.65, 85.21, 82.00, 94.41, 65.67, 91.92, 80.81]),
        full("Ours", 79.45, Some(35.35), [88.05, 66.53, 81.45, 75.69, 94.56, 63.08, 87.71, 78.51]),
    ]
}

/// Published ablation rows, in table order.
pub fn table2_reference() -> Vec<ReportRow> {
    vec![
        ReportRow::summary("SAM", 1.73, Some(260.98)),
        ReportRow::summary("Ours(CNN Encoder only)", 78.05, Some(29.11)),
        ReportRow::summary("Ours(SAM Encoder only)", 58.97, Some(101.60)),
        ReportRow::summary("Ours", 79.45, Some(35.35)),
    ]
}

fn cells(row: &ReportRow, organ_cols: usize) -> Vec<String> {
    let mut c = vec![
        row.method.clone(),
        format!("{:.2}", row.dsc),
        row.hd95.map_or_else(|| "-".to_string(), |v| format!("{v:.2}")),
    ];
    for j in 0..organ_cols {
        c.push(row.organs.get(j).map_or_else(|| "-".to_string(), |v| format!("{v:.2}")));
    }
    c
}

fn header(organ_cols: usize, arrows: bool) -> Vec<String> {
    let (up, down) = if arrows { ("↑", "↓") } else { ("", "") };
    let mut h = vec!["Method".to_string(), format!("DSC(%){up}"), format!("HD95(mm){down}")];
    h.extend((0..organ_cols).map(|j| ORGANS.get(j).map_or_else(|| format!("class{}", j + 1), |s| s.to_string())));
    h
}

fn organ_cols(rows: &[ReportRow]) -> usize {
    rows.iter().map(|r| r.organs.len()).max().unwrap_or(0)
}

/// Aligned text: the method column left-aligned, numbers right-aligned, a
/// rule under the header and above `ours` rows (the rows after `split`).
pub fn render_text(title: &str, rows: &[ReportRow], split: usize) -> String {
    let k = organ_cols(rows);
    let head = header(k, true);
    let body: Vec<Vec<String>> = rows.iter().map(|r| cells(r, k)).collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|j| {
            body.iter()
                .map(|r| r[j].chars().count())
                .chain([head[j].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |r: &[String]| {
        let mut s = String::new();
        for (j, c) in r.iter().enumerate() {
            let pad = widths[j] - c.chars().count();
            if j == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string()
    };
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    let rule = "-".repeat(total);
    let mut out = format!("{title}\n{}\n{rule}\n", line(&head));
    for (i, r) in body.iter().enumerate() {
        if i == split && split > 0 && split < body.len() {
            out.push_str(&rule);
            out.push('\n');
        }
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let k = organ_cols(rows);
    let mut out = header(k, false).join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&cells(r, k).join(","));
        out.push('\n');
    }
    out
}

/// Legend mapping synthetic class ids onto the organ columns.
pub fn class_legend(num_foreground: usize) -> String {
    let names: Vec<String> = (1..=num_foreground)
        .map(|k| format!("{k}={}", crate::metrics::class_name(k)))
        .collect();
    format!("Organ columns are class ids in order: {}", names.join(", "))
}

/// Reference table followed by our rows.
pub fn table1(ours: &[ReportRow]) -> String {
    let reference = table1_reference();
    let split = reference.len();
    let rows: Vec<ReportRow> = reference.into_iter().chain(ours.iter().cloned()).collect();
    let mut s = render_text("Table I: comparison on multi-organ segmentation", &rows, split);
    if let Some(r) = ours.first() {
        s.push_str(&class_legend(r.organs.len()));
        s.push('\n');
    }
    s
}

pub fn table2(ours: &[ReportRow]) -> String {
    let reference = table2_reference();
    let split = reference.len();
    let rows: Vec<ReportRow> = reference.into_iter().chain(ours.iter().cloned()).collect();
    render_text("Table II: ablation", &rows, split)
}

/// Our Table I row, recomputed from a per-case metrics CSV.
pub fn row_from_case_csv(method: &str, text: &str, policy: UndefinedHd95) -> Result<ReportRow> {
    let cases = parse_case_csv(text)?;
    Ok(ReportRow::from_report(method, &aggregate(&cases, policy)?))
}

#[derive(Clone, Debug)]
pub struct RenderedReport {
    pub text: String,
    pub table1_csv: String,
    pub table2_csv: String,
}

/// Both tables, reference rows first. `table1` rows come from per-case CSVs,
/// `table2` rows from ablation summaries.
pub fn cmd_report(table1_ours: &[ReportRow], table2_ours: &[ReportRow]) -> RenderedReport {
    let t1: Vec<ReportRow> = table1_reference().into_iter().chain(table1_ours.iter().cloned()).collect();
    let t2: Vec<ReportRow> = table2_reference().into_iter().chain(table2_ours.iter().cloned()).collect();
    RenderedReport {
        text: format!("{}\n{}", table1(table1_ours), table2(table2_ours)),
        table1_csv: render_csv(&t1),
        table2_csv: render_csv(&t2),
    }
}

/// Parses `method,dsc,hd95[,organs...]` rows as written by [`render_csv`] or
/// [`MetricsReport::summary_csv`].
pub fn parse_rows_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head = lines.next().ok_or_else(|| Error::Data("empty table CSV".into()))?;
    let ncols = head.split(',').count();
    if ncols < 3 || !head.to_ascii_lowercase().starts_with("method,") {
        return Err(Error::Data(format!("table CSV header must start with method,dsc,hd95: {head:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Data(format!("malformed table CSV row {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != ncols {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(ReportRow {
                method: f[0].to_string(),
                dsc: num(f[1])?,
                hd95: if f[2].trim() == "-" { None } else { Some(num(f[2])?) },
                organs: f[3..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_rows_render_verbatim() {
        let t = table1(&[]);
        assert!(t.contains("SwinUNet"));
        let swin = t.lines().find(|l| l.starts_with("SwinUNet")).unwrap();
        assert!(swin.contains("79.12") && swin.contains("21.55"));
        let vnet = t.lines().find(|l| l.starts_with("V-Net")).unwrap();
        let cols: Vec<&str> = vnet.split_whitespace().collect();
        assert_eq!(cols[1..4], ["68.81", "-", "75.34"]);
        let ours = t.lines().find(|l| l.starts_with("Ours")).unwrap();
        let cols: Vec<&str> = ours.split_whitespace().skip(1).collect();
        assert_eq!(
            cols.join(" / "),
            "79.45 / 35.35 / 88.05 / 66.53 / 81.45 / 75.69 / 94.56 / 63.08 / 87.71 / 78.51"
        );
        assert!(t.contains("DSC(%)↑") && t.contains("HD95(mm)↓"));
    }

    #[test]
    fn ablation_fixture() {
        let t = table2(&[]);
        let got: Vec<String> = t
            .lines()
            .skip(3)
            .map(|l| {
                let f: Vec<&str> = l.split_whitespace().rev().take(2).collect();
                format!("{}/{}", f[1], f[0])
            })
            .collect();
        assert_eq!(got, ["1.73/260.98", "78.05/29.11", "58.97/101.60", "79.45/35.35"]);
    }

    #[test]
    fn csv_round_trip() {
        let rows = table1_reference();
        let parsed = parse_rows_csv(&render_csv(&rows)).unwrap();
        assert_eq!(parsed, rows);
        assert!(parse_rows_csv("method,dsc,hd95\nx,1.0\n").is_err());
    }
}
