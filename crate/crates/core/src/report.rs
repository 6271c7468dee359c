//! Run comparison tables and static SVG plots built from metrics CSVs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluation row of a run's metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run: String,
    pub iteration: u64,
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub duplicate_rate: f64,
    pub n_predictions: usize,
    pub loss_total: f64,
    pub loss_supervised: f64,
    pub loss_unsupervised: f64,
    pub loss_consistency: f64,
    pub pseudo_confident_per_image: f64,
    pub pseudo_reliable_per_image: f64,
}

pub const METRICS_HEADER: &str = "run,iteration,map,ap50,ap75,ap_small,ap_medium,ap_large,duplicate_rate,n_predictions,loss_total,loss_supervised,loss_unsupervised,loss_consistency,pseudo_confident_per_image,pseudo_reliable_per_image";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.run,
            self.iteration,
            fmt_opt(self.map),
            fmt_opt(self.ap50),
            fmt_opt(self.ap75),
            fmt_opt(self.ap_small),
            fmt_opt(self.ap_medium),
            fmt_opt(self.ap_large),
            self.duplicate_rate,
            self.n_predictions,
            self.loss_total,
            self.loss_supervised,
            self.loss_unsupervised,
            self.loss_consistency,
            self.pseudo_confident_per_image,
            self.pseudo_reliable_per_image,
        )
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 16 {
            return Err(Error::Format(format!(
                "metrics row has {} fields, expected 16",
                parts.len()
            )));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(s.parse::<f64>().map_err(|e| {
                    Error::Format(format!("bad float {s}: {e}"))
                })?))
            }
        };
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("bad float {s}: {e}")))
        };
        Ok(MetricsRow {
            run: parts[0].to_string(),
            iteration: parts[1]
                .parse()
                .map_err(|e| Error::Format(format!("bad iteration: {e}")))?,
            map: opt(parts[2])?,
            ap50: opt(parts[3])?,
            ap75: opt(parts[4])?,
            ap_small: opt(parts[5])?,
            ap_medium: opt(parts[6])?,
            ap_large: opt(parts[7])?,
            duplicate_rate: num(parts[8])?,
            n_predictions: parts[9]
                .parse()
                .map_err(|e| Error::Format(format!("bad count: {e}")))?,
            loss_total: num(parts[10])?,
            loss_supervised: num(parts[11])?,
            loss_unsupervised: num(parts[12])?,
            loss_consistency: num(parts[13])?,
            pseudo_confident_per_image: num(parts[14])?,
            pseudo_reliable_per_image: num(parts[15])?,
        })
    }
}

/// Parse a metrics CSV (header line expected).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(Error::Format("unrecognized metrics CSV header".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        rows.push(MetricsRow::from_csv_line(line)?);
    }
    Ok(rows)
}

/// Gather rows from run directories (their `metrics.csv`) or from merged
/// CSV files produced by an earlier report (idempotent pass-through).
pub fn collect_rows(inputs: &[std::path::PathBuf]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for input in inputs {
        let text = if input.is_dir() {
            fs::read_to_string(input.join("metrics.csv")).map_err(|e| {
                Error::Format(format!("no metrics.csv under {}: {e}", input.display()))
            })?
        } else {
            fs::read_to_string(input)?
        };
        rows.extend(parse_metrics_csv(&text)?);
    }
    if rows.is_empty() {
        return Err(Error::Format("no metrics rows in the given inputs".into()));
    }
    Ok(rows)
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_json(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(rows)?)?;
    Ok(())
}

/// Static line plot of mAP versus iteration, one polyline per run.
pub fn write_svg(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut runs: Vec<String> = rows.iter().map(|r| r.run.clone()).collect();
    runs.sort();
    runs.dedup();

    let (width, height, margin) = (640.0, 400.0, 50.0);
    let max_iter = rows.iter().map(|r| r.iteration).max().unwrap_or(1).max(1) as f64;
    let max_map = rows
        .iter()
        .filter_map(|r| r.map)
        .fold(0.0f64, f64::max)
        .max(1e-6);

    let x_of = |it: u64| margin + (it as f64 / max_iter) * (width - 2.0 * margin);
    let y_of = |m: f64| height - margin - (m / max_map) * (height - 2.0 * margin);

    let palette = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ];
    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{y}\" x2=\"{x}\" y2=\"{y}\" stroke=\"black\"/>\n",
        m = margin,
        y = height - margin,
        x = width - margin
    ));
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{y}\" stroke=\"black\"/>\n",
        m = margin,
        y = height - margin
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\">iteration</text>\n",
        width / 2.0 - 20.0,
        height - margin / 3.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\">mAP</text>\n",
        14.0,
        height / 2.0,
        height / 2.0
    ));
    for (ri, run) in runs.iter().enumerate() {
        let color = palette[ri % palette.len()];
        let mut pts: Vec<(u64, f64)> = rows
            .iter()
            .filter(|r| &r.run == run)
            .filter_map(|r| r.map.map(|m| (r.iteration, m)))
            .collect();
        pts.sort_by_key(|p| p.0);
        if pts.is_empty() {
            continue;
        }
        let path_pts: Vec<String> = pts
            .iter()
            .map(|&(it, m)| format!("{:.2},{:.2}", x_of(it), y_of(m)))
            .collect();
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path_pts.join(" ")
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            width - margin + 4.0,
            y_of(pts.last().unwrap().1),
            escape_xml(run)
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(())
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(run: &str, it: u64, map: f64) -> MetricsRow {
        MetricsRow {
            run: run.into(),
            iteration: it,
            map: Some(map),
            ap50: Some(map * 1.5),
            ap75: None,
            ap_small: None,
            ap_medium: Some(map),
            ap_large: Some(map),
            duplicate_rate: 0.05,
            n_predictions: 300,
            loss_total: 1.25,
            loss_supervised: 1.0,
            loss_unsupervised: 0.25,
            loss_consistency: 0.01,
            pseudo_confident_per_image: 2.5,
            pseudo_reliable_per_image: 1.5,
        }
    }

    #[test]
    fn csv_round_trip_and_idempotence() {
        let rows = vec![row("a", 100, 0.25), row("a", 200, 0.5), row("b", 100, 0.375)];
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("merged.csv");
        write_csv(&p1, &rows).unwrap();
        let parsed = parse_metrics_csv(&fs::read_to_string(&p1).unwrap()).unwrap();
        assert_eq!(parsed, rows);
        // report of a report: pass the merged CSV back in
        let again = collect_rows(&[p1.clone()]).unwrap();
        let p2 = dir.path().join("merged2.csv");
        write_csv(&p2, &again).unwrap();
        assert_eq!(
            fs::read_to_string(&p1).unwrap(),
            fs::read_to_string(&p2).unwrap()
        );
    }

    #[test]
    fn svg_is_wellformed_enough() {
        let rows = vec![row("a", 100, 0.25), row("a", 200, 0.4375), row("b", 200, 0.5)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plot.svg");
        write_svg(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<?xml"));
        assert!(text.contains("<svg") && text.trim_end().ends_with("</svg>"));
        assert_eq!(text.matches("<polyline").count(), 2);
        // crude well-formedness: every opened tag kind is closed or self-closed
        for tag in ["svg", "text"] {
            let opens = text.matches(&format!("<{tag}")).count();
            let closes = text.matches(&format!("</{tag}>")).count();
            assert_eq!(opens, closes, "tag {tag}");
        }
    }

    #[test]
    fn empty_inputs_error() {
        assert!(collect_rows(&[]).is_err());
    }
}
