//! Report emission: CSV tables, SVG bar charts and PNG heatmaps of the
//! frame-relationship scores.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::epm::importance_sequence;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::fsutil::write_atomic;
use crate::metrics::VIDEO_METRICS;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per (method, dataset): counts and the five metric means.
pub fn summary_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let mut header = vec!["method", "dataset", "evaluated"];
    header.extend(VIDEO_METRICS);
    csv_bytes(
        &header,
        report.rows.iter().map(|r| {
            let mut row = vec![r.method.clone(), r.dataset.clone(), r.evaluated.to_string()];
            row.extend(VIDEO_METRICS.iter().map(|m| fmt(r.means.get(*m).copied())));
            row
        }),
    )
}

/// One row per scored or skipped sample.
pub fn samples_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let mut header = vec!["method", "dataset", "id", "status"];
    header.extend(VIDEO_METRICS);
    let rows = report.rows.iter().flat_map(|r| {
        r.samples.iter().map(move |s| {
            let status = s.skipped.clone().map(|why| format!("skipped: {why}")).unwrap_or("ok".into());
            let mut row = vec![r.method.clone(), r.dataset.clone(), s.id.clone(), status];
            row.extend(VIDEO_METRICS.iter().map(|m| fmt(s.scores.as_ref().and_then(|x| x.get(*m).copied()))));
            row
        })
    });
    csv_bytes(&header, rows)
}

/// The SMA × EPM grid when every method is an ablation label
/// (`sma=on,epm=off` …); `None` otherwise.
pub fn ablation_csv(report: &EvalReport) -> Result<Option<Vec<u8>>> {
    let parse = |m: &str| -> Option<(String, String)> {
        let (a, b) = m.split_once(',')?;
        Some((a.strip_prefix("sma=")?.to_string(), b.strip_prefix("epm=")?.to_string()))
    };
    if report.rows.is_empty() || report.rows.iter().any(|r| parse(&r.method).is_none()) {
        return Ok(None);
    }
    let mut header = vec!["dataset", "sma", "epm"];
    header.extend(VIDEO_METRICS);
    let rows = report.rows.iter().map(|r| {
        let (sma, epm) = parse(&r.method).expect("checked");
        let mut row = vec![r.dataset.clone(), sma, epm];
        row.extend(VIDEO_METRICS.iter().map(|m| fmt(r.means.get(*m).copied())));
        row
    });
    csv_bytes(&header, rows).map(Some)
}

/// Horizontal bar chart of one metric across rows.
pub fn bar_chart_svg(report: &EvalReport, metric: &str) -> String {
    let bars: Vec<(String, f64)> = report
        .rows
        .iter()
        .map(|r| (format!("{} / {}", r.method, r.dataset), r.means.get(metric).copied().unwrap_or(0.0)))
        .collect();
    let (label_w, bar_w, row_h) = (260.0, 320.0, 22.0);
    let lo = bars.iter().map(|b| b.1).fold(0.0, f64::min);
    let hi = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let x0 = label_w + bar_w * (-lo / span);
    let height = 40.0 + row_h * bars.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="monospace" font-size="11">"#,
        label_w + bar_w + 80.0
    );
    let _ = writeln!(s, r#"<text x="4" y="16" font-size="13">{}</text>"#, escape(metric));
    for (i, (label, v)) in bars.iter().enumerate() {
        let y = 28.0 + row_h * i as f64;
        let w = bar_w * v.abs() / span;
        let x = if *v < 0.0 { x0 - w } else { x0 };
        let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, y + 13.0, escape(label));
        let _ = writeln!(s, r##"<rect x="{x:.2}" y="{y}" width="{w:.2}" height="{}" fill="#4a78b0"/>"##, row_h - 6.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}">{v:.4}</text>"#, label_w + bar_w + 6.0, y + 13.0);
    }
    let _ = writeln!(s, r##"<line x1="{x0:.2}" y1="24" x2="{x0:.2}" y2="{}" stroke="#333"/>"##, height - 8.0);
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `report.json`, `summary.csv`, `samples.csv`, `ablation.csv` when
/// applicable, and one bar chart per metric under `plots/`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, &bytes)?;
        out.push(p);
        Ok(())
    };
    put("report.json".into(), serde_json::to_vec_pretty(report)?)?;
    put("summary.csv".into(), summary_csv(report)?)?;
    put("samples.csv".into(), samples_csv(report)?)?;
    if let Some(a) = ablation_csv(report)? {
        put("ablation.csv".into(), a)?;
    }
    for m in VIDEO_METRICS {
        put(format!("plots/{m}.svg"), bar_chart_svg(report, m).into_bytes())?;
    }
    Ok(out)
}

/// Relationship scores averaged over sites and batch, `[f, f]`, with the
/// importance sequence (column means).
pub fn mean_scores<T: Scalar>(sites: &[Tensor<T>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let imp = importance_sequence(sites)?;
    let (b, f) = (sites[0].dim(0), sites[0].dim(1));
    let mut m = vec![vec![0.0; f]; f];
    for s in sites {
        for bi in 0..b {
            for i in 0..f {
                for j in 0..f {
                    m[i][j] += s.at(&[bi, i, j]).as_f64() / (b * sites.len()) as f64;
                }
            }
        }
    }
    let seq = (0..f).map(|j| (0..b).map(|bi| imp.at(&[bi, j]).as_f64()).sum::<f64>() / b as f64).collect();
    Ok((m, seq))
}

/// Grey-level heatmap of an `[f, f]` matrix (min black, max white) with
/// the importance sequence as a strip underneath, each cell `cell` pixels.
pub fn heatmap_png(matrix: &[Vec<f64>], importance: &[f64], cell: u32) -> Result<Vec<u8>> {
    let f = matrix.len();
    if f == 0 || matrix.iter().any(|r| r.len() != f) || importance.len() != f || cell == 0 {
        return Err(Error::shape("heatmap needs a non-empty square matrix and a matching sequence"));
    }
    let scale = |vals: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = vals.collect();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        move |x: f64| if hi > lo { (255.0 * (x - lo) / (hi - lo)).round() as u8 } else { 128 }
    };
    let sm = scale(&mut matrix.iter().flatten().copied());
    let si = scale(&mut importance.iter().copied());
    let side = f as u32 * cell;
    let img = image::GrayImage::from_fn(side, side + 2 * cell, |x, y| {
        let (i, j) = ((y / cell) as usize, (x / cell) as usize);
        let v = if i < f {
            sm(matrix[i][j])
        } else if i == f {
            0
        } else {
            si(importance[j])
        };
        image::Luma([v])
    });
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf.into_inner())
}
