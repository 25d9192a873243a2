//! Run reports: raw per-trial rows, aggregates recomputed from them, and
//! file emission (CSV plus minimal SVG line charts).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::metrics::Orientation;

/// One measurement: `group` is a method or evaluation strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub trial: usize,
    pub group: String,
    pub metric: String,
    pub value: f64,
    /// Holdout value the estimate targets (evaluation runs only).
    pub truth: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    /// Rank the values themselves under the metric's orientation.
    Value,
    /// Rank the absolute estimation error, smaller first.
    AbsError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std_error: f64,
    pub rmse: Option<f64>,
    pub mean_signed_error: Option<f64>,
    pub avg_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub trial: usize,
    pub group: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub name: String,
    pub rank_by: RankBy,
    pub rows: Vec<RawRow>,
    pub failures: Vec<Failure>,
    pub provenance: Provenance,
}

/// Orientation of a metric by its reported name. Unknown names count as
/// lower-is-better.
pub fn orientation_of(metric: &str) -> Orientation {
    match metric {
        "auc" | "pauc" => Orientation::HigherBetter,
        _ => Orientation::LowerBetter,
    }
}

/// Ranks with 1 = best; tied entries share the mean of their positions.
pub fn midranks(values: &[f64], orientation: Orientation) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| match orientation {
        Orientation::LowerBetter => values[a].total_cmp(&values[b]),
        Orientation::HigherBetter => values[b].total_cmp(&values[a]),
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Per-row rank within its (trial, metric) cell.
pub fn row_ranks(rows: &[RawRow], rank_by: RankBy) -> Vec<f64> {
    let mut cells: BTreeMap<(usize, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        cells
            .entry((r.trial, r.metric.as_str()))
            .or_default()
            .push(i);
    }
    let mut out = vec![f64::NAN; rows.len()];
    for ((_, metric), members) in cells {
        let (keys, orient): (Vec<f64>, _) = match rank_by {
            RankBy::Value => (
                members.iter().map(|&i| rows[i].value).collect(),
                orientation_of(metric),
            ),
            RankBy::AbsError => (
                members
                    .iter()
                    .map(|&i| {
                        rows[i]
                            .truth
                            .map_or(f64::INFINITY, |t| (rows[i].value - t).abs())
                    })
                    .collect(),
                Orientation::LowerBetter,
            ),
        };
        for (r, &i) in midranks(&keys, orient).into_iter().zip(&members) {
            out[i] = r;
        }
    }
    out
}

/// Aggregates per (group, metric), plus one `all` row per group holding
/// the rank averaged over metrics and trials.
pub fn aggregate(rows: &[RawRow], rank_by: RankBy) -> Vec<Aggregate> {
    let ranks = row_ranks(rows, rank_by);
    let mut cells: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        cells
            .entry((r.group.as_str(), r.metric.as_str()))
            .or_default()
            .push(i);
    }
    let mut out = Vec::new();
    let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ((group, metric), members) in &cells {
        let n = members.len();
        let vals: Vec<f64> = members.iter().map(|&i| rows[i].value).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                / (n as f64).sqrt()
        } else {
            0.0
        };
        let errors: Option<Vec<f64>> = members
            .iter()
            .map(|&i| rows[i].truth.map(|t| rows[i].value - t))
            .collect();
        let (rmse, mse) = match &errors {
            Some(e) => (
                Some((e.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt()),
                Some(e.iter().sum::<f64>() / n as f64),
            ),
            None => (None, None),
        };
        let rk: Vec<f64> = members.iter().map(|&i| ranks[i]).collect();
        by_group.entry(group).or_default().extend(&rk);
        out.push(Aggregate {
            group: group.to_string(),
            metric: metric.to_string(),
            n,
            mean,
            std_error,
            rmse,
            mean_signed_error: mse,
            avg_rank: rk.iter().sum::<f64>() / n as f64,
        });
    }
    for (group, rk) in by_group {
        out.push(Aggregate {
            group: group.to_string(),
            metric: "all".into(),
            n: rk.len(),
            mean: f64::NAN,
            std_error: f64::NAN,
            rmse: None,
            mean_signed_error: None,
            avg_rank: rk.iter().sum::<f64>() / rk.len() as f64,
        });
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

pub fn raw_csv(rows: &[RawRow]) -> String {
    let mut s = String::from("trial,group,metric,value,truth\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.trial,
            r.group,
            r.metric,
            r.value,
            opt(r.truth)
        );
    }
    s
}

pub fn aggregate_csv(aggs: &[Aggregate]) -> String {
    let mut s = String::from("group,metric,n,mean,std_error,rmse,mean_signed_error,avg_rank\n");
    for a in aggs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            a.group,
            a.metric,
            a.n,
            a.mean,
            a.std_error,
            opt(a.rmse),
            opt(a.mean_signed_error),
            a.avg_rank
        );
    }
    s
}

/// Parses a raw-row CSV as written by [`raw_csv`].
pub fn parse_raw_csv(text: &str) -> Result<Vec<RawRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Schema(format!("bad numeric field {i} in raw row")))
        };
        rows.push(RawRow {
            trial: num(0)? as usize,
            group: rec.get(1).unwrap_or_default().to_string(),
            metric: rec.get(2).unwrap_or_default().to_string(),
            value: num(3)?,
            truth: match rec.get(4) {
                Some("") | None => None,
                Some(_) => Some(num(4)?),
            },
        });
    }
    Ok(rows)
}

/// Reloads a raw CSV and checks the aggregate CSV beside it against means
/// recomputed from the raw rows. Returns the largest absolute deviation.
pub fn verify_aggregates(raw_path: &Path, agg_path: &Path, rank_by: RankBy) -> Result<f64> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let rows = parse_raw_csv(&read(raw_path)?)?;
    let recomputed = aggregate(&rows, rank_by);
    let agg_text = read(agg_path)?;
    let mut rdr = csv::Reader::from_reader(agg_text.as_bytes());
    let mut worst: f64 = 0.0;
    let mut seen = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let (g, m) = (
            rec.get(0).unwrap_or_default(),
            rec.get(1).unwrap_or_default(),
        );
        let a = recomputed
            .iter()
            .find(|a| a.group == g && a.metric == m)
            .ok_or_else(|| Error::Schema(format!("aggregate row {g}/{m} has no raw rows")))?;
        seen += 1;
        for (field, want) in [(3, a.mean), (7, a.avg_rank)] {
            let got: f64 = rec
                .get(field)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Schema("bad aggregate field".into()))?;
            if got.is_nan() && want.is_nan() {
                continue;
            }
            worst = worst.max((got - want).abs());
        }
    }
    if seen != recomputed.len() {
        return Err(Error::Schema(format!(
            "{} aggregate rows, {} expected",
            seen,
            recomputed.len()
        )));
    }
    Ok(worst)
}

/// First 12 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))[..12].to_string()
}

/// A named line series for [`line_chart_svg`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Minimal SVG line chart with axes, tick labels and a legend.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 60.0, 150.0, 40.0, 50.0);
    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let pw = w - ml - mr;
    let ph = h - mt - mb;
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-size="14">{}</text>"#,
        ml,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{ml},{mt} V{} H{}" stroke="black" fill="none"/>"#,
        mt + ph,
        ml + pw
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#,
            sx(fx),
            mt + ph + 15.0,
            fx
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            ml - 5.0,
            sy(fy) + 4.0,
            fy
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" transform="rotate(-90 15 {:.1})" text-anchor="middle">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let d: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .enumerate()
            .map(|(i, &(x, y))| {
                format!(
                    "{}{:.2},{:.2}",
                    if i == 0 { "M" } else { "L" },
                    sx(x),
                    sy(y)
                )
            })
            .collect();
        if !d.is_empty() {
            let _ = writeln!(
                s,
                r#"<path d="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
                d.join(" ")
            );
        }
        let ly = mt + 15.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            ml + pw + 10.0,
            ml + pw + 30.0,
            ml + pw + 35.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Writes `name` under `dir` atomically, creating `dir` if needed.
pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    write_atomic(&path, contents.as_bytes())?;
    Ok(path)
}

/// Writes the raw and aggregate CSVs of `report` and returns their paths.
/// An empty report yields header-only files.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        log::warn!(
            "report {} has no rows; writing header-only CSVs",
            report.name
        );
    }
    let stem = format!("{}_{}", report.name, report.provenance.config_hash);
    let mut paths = vec![
        write_file(dir, &format!("{stem}_raw.csv"), &raw_csv(&report.rows))?,
        write_file(
            dir,
            &format!("{stem}_agg.csv"),
            &aggregate_csv(&aggregate(&report.rows, report.rank_by)),
        )?,
    ];
    if !report.failures.is_empty() {
        let mut s = String::from("trial,group,message\n");
        for f in &report.failures {
            let _ = writeln!(
                s,
                "{},{},\"{}\"",
                f.trial,
                f.group,
                f.message.replace('"', "'")
            );
        }
        paths.push(write_file(dir, &format!("{stem}_failures.csv"), &s)?);
    }
    let prov = serde_json::to_string_pretty(&report.provenance)?;
    paths.push(write_file(
        dir,
        &format!("{stem}_provenance.json"),
        &(prov + "\n"),
    )?);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(trial: usize, group: &str, metric: &str, value: f64) -> RawRow {
        RawRow {
            trial,
            group: group.into(),
            metric: metric.into(),
            value,
            truth: None,
        }
    }

    #[test]
    fn midranks_with_ties() {
        assert_eq!(
            midranks(&[0.3, 0.1, 0.3, 0.2], Orientation::LowerBetter),
            vec![3.5, 1.0, 3.5, 2.0]
        );
        assert_eq!(
            midranks(&[0.3, 0.1], Orientation::HigherBetter),
            vec![1.0, 2.0]
        );
    }

    #[test]
    fn single_method_ranks_one() {
        let rows = vec![row(0, "ignore", "abr", 0.2), row(1, "ignore", "abr", 0.3)];
        let agg = aggregate(&rows, RankBy::Value);
        assert!(agg.iter().all(|a| a.avg_rank == 1.0));
    }

    #[test]
    fn raw_roundtrip_preserves_values() {
        let mut rows = vec![row(0, "a", "auc", 0.1 + 0.2), row(0, "b", "auc", 1.0 / 3.0)];
        rows[1].truth = Some(0.7);
        assert_eq!(parse_raw_csv(&raw_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn empty_chart_is_valid_svg() {
        let s = line_chart_svg("t", "x", "y", &[]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
    }
}
