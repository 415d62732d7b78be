//! Seed aggregation of learning curves and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{MonitorRow, WeightRow};

/// One row of `curves.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: String,
    pub seed: u64,
    pub step: usize,
    /// NaN when the run has no evaluation environment.
    pub success_rate: f64,
    /// Loss of the last behavior-cloning step before the checkpoint.
    pub loss: f64,
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub step: usize,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub n_seeds: usize,
}

pub fn write_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(reader: impl Read) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Linear interpolation of `(xs, ys)` at `x`, held constant outside the range.
fn interpolate(xs: &[usize], ys: &[f64], x: usize) -> f64 {
    match xs.binary_search(&x) {
        Ok(i) => ys[i],
        Err(0) => ys[0],
        Err(i) if i == xs.len() => ys[xs.len() - 1],
        Err(i) => {
            let (x0, x1) = (xs[i - 1] as f64, xs[i] as f64);
            let t = (x as f64 - x0) / (x1 - x0);
            ys[i - 1] + t * (ys[i] - ys[i - 1])
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and std of `success_rate` across seeds at every evaluation step, per
/// method. Seeds evaluated on different step grids are resampled onto the
/// coarsest one; each such resampling adds a note.
pub fn summarize(rows: &[CurveRow]) -> (Vec<SummaryRow>, Vec<String>) {
    let mut series: BTreeMap<&str, BTreeMap<u64, Vec<(usize, f64)>>> = BTreeMap::new();
    for r in rows {
        series
            .entry(&r.method)
            .or_default()
            .entry(r.seed)
            .or_default()
            .push((r.step, r.success_rate));
    }
    let mut out = Vec::new();
    let mut notes = Vec::new();
    for (method, seeds) in series {
        let mut per_seed: Vec<(Vec<usize>, Vec<f64>)> = seeds
            .into_values()
            .map(|mut pts| {
                pts.sort_by_key(|p| p.0);
                pts.dedup_by_key(|p| p.0);
                pts.into_iter().unzip()
            })
            .collect();
        let grid = per_seed
            .iter()
            .min_by_key(|(xs, _)| xs.len())
            .map(|(xs, _)| xs.clone())
            .expect("at least one seed");
        for (xs, ys) in &mut per_seed {
            if *xs != grid {
                notes.push(format!(
                    "{method}: resampled a {}-point curve onto the {}-point grid",
                    xs.len(),
                    grid.len()
                ));
                *ys = grid.iter().map(|&g| interpolate(xs, ys, g)).collect();
                *xs = grid.clone();
            }
        }
        for (k, &step) in grid.iter().enumerate() {
            let values: Vec<f64> = per_seed.iter().map(|(_, ys)| ys[k]).collect();
            let (mean, std) = mean_std(&values);
            out.push(SummaryRow {
                method: method.to_string(),
                step,
                mean,
                std,
                n_seeds: values.len(),
            });
        }
    }
    (out, notes)
}

/// A plotted line with an optional symmetric band.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub band: Option<Vec<f64>>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot with shaded bands and a legend.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let finite = |v: &&f64| v.is_finite();
    let xs = series.iter().flat_map(|s| s.x.iter()).filter(finite);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for (i, &y) in s.y.iter().enumerate() {
            let b = s.band.as_ref().map_or(0.0, |b| b[i]);
            ys.push(y - b);
            ys.push(y + b);
        }
    }
    let (y0, y1) = ys
        .iter()
        .filter(finite)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (x0, x1) = if x0.is_finite() && x1 > x0 { (x0, x1) } else { nice_range(x0, x1) };
    let (y0, y1) = nice_range(y0, y1);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(fx),
            top + ph + 18.0,
            tick(fx)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            py(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64, f64)> = s
            .x
            .iter()
            .zip(&s.y)
            .enumerate()
            .filter(|(_, (x, y))| x.is_finite() && y.is_finite())
            .map(|(k, (&x, &y))| (x, y, s.band.as_ref().map_or(0.0, |b| b[k])))
            .collect();
        if pts.is_empty() {
            continue;
        }
        if s.band.is_some() {
            let mut poly = String::new();
            for &(x, y, b) in &pts {
                let _ = write!(poly, "{:.2},{:.2} ", px(x), py(y + b));
            }
            for &(x, y, b) in pts.iter().rev() {
                let _ = write!(poly, "{:.2},{:.2} ", px(x), py(y - b));
            }
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                poly.trim_end()
            );
        }
        let line: Vec<String> = pts.iter().map(|&(x, y, _)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

/// Success-rate curves: mean line with a one-std band per method.
pub fn curves_svg(summary: &[SummaryRow]) -> String {
    let mut by_method: BTreeMap<&str, Vec<&SummaryRow>> = BTreeMap::new();
    for r in summary {
        by_method.entry(&r.method).or_default().push(r);
    }
    let series: Vec<Series> = by_method
        .into_iter()
        .map(|(m, rows)| Series {
            label: m.to_string(),
            x: rows.iter().map(|r| r.step as f64).collect(),
            y: rows.iter().map(|r| r.mean).collect(),
            band: Some(rows.iter().map(|r| r.std).collect()),
        })
        .collect();
    svg_line_plot("Success rate", "gradient steps", "success rate", &series)
}

/// Places plots of equal width (720) one above the other.
pub fn svg_stack(plots: &[String]) -> String {
    let (w, h) = (720.0, 440.0);
    let total = h * plots.len() as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{total}\" viewBox=\"0 0 {w} {total}\">\n"
    );
    for (i, p) in plots.iter().enumerate() {
        let _ = writeln!(svg, r#"<g transform="translate(0,{})">"#, h * i as f64);
        svg.push_str(p);
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

/// Per-step `R` and normalized `W` along one trajectory of each source tag,
/// for the first method and seed found (`tailo` preferred).
pub fn weights_svg(rows: &[WeightRow]) -> Option<String> {
    let method = if rows.iter().any(|r| r.method == "tailo") {
        "tailo".to_string()
    } else {
        rows.first()?.method.clone()
    };
    let seed = rows.iter().filter(|r| r.method == method).map(|r| r.seed).min()?;
    let mut picked: BTreeMap<&str, u64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.method == method && r.seed == seed) {
        picked.entry(&r.source_tag).or_insert(r.trajectory_id);
    }
    let mut reward = Vec::new();
    let mut weight = Vec::new();
    for (tag, id) in picked {
        let mut traj: Vec<&WeightRow> = rows
            .iter()
            .filter(|r| r.method == method && r.seed == seed && r.trajectory_id == id)
            .collect();
        traj.sort_by_key(|r| r.step);
        let x: Vec<f64> = traj.iter().map(|r| r.step as f64).collect();
        let label = format!("{tag} #{id}");
        reward.push(Series {
            label: label.clone(),
            x: x.clone(),
            y: traj.iter().map(|r| r.r).collect(),
            band: None,
        });
        weight.push(Series {
            label,
            x,
            y: traj.iter().map(|r| r.normalized_w).collect(),
            band: None,
        });
    }
    Some(svg_stack(&[
        svg_line_plot(&format!("R(s), {method} seed {seed}"), "step in trajectory", "R", &reward),
        svg_line_plot(&format!("W(s, a), {method} seed {seed}"), "step in trajectory", "normalized W", &weight),
    ]))
}

/// `max |V|` against training step, one line per seed.
pub fn monitor_svg(rows: &[MonitorRow]) -> String {
    let mut by_seed: BTreeMap<u64, Vec<&MonitorRow>> = BTreeMap::new();
    for r in rows {
        by_seed.entry(r.seed).or_default().push(r);
    }
    let series: Vec<Series> = by_seed
        .into_iter()
        .map(|(seed, mut rs)| {
            rs.sort_by_key(|r| r.step);
            Series {
                label: format!("seed {seed}"),
                x: rs.iter().map(|r| r.step as f64).collect(),
                y: rs.iter().map(|r| r.max_abs_v).collect(),
                band: None,
            }
        })
        .collect();
    svg_line_plot("Value function magnitude", "gradient steps", "max |V(s)|", &series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row(method: &str, seed: u64, step: usize, s: f64) -> CurveRow {
        CurveRow {
            method: method.into(),
            seed,
            step,
            success_rate: s,
            loss: 0.0,
        }
    }

    #[test]
    fn three_seed_toy_table() {
        let values = [[0.1, 0.5, 0.9], [0.2, 0.4, 1.0], [0.6, 0.3, 0.8]];
        let mut rows = Vec::new();
        for (seed, v) in values.iter().enumerate() {
            for (k, &s) in v.iter().enumerate() {
                rows.push(row("tailo", seed as u64, k * 1000, s));
            }
        }
        let (summary, notes) = summarize(&rows);
        assert!(notes.is_empty());
        assert_eq!(summary.len(), 3);
        for (k, r) in summary.iter().enumerate() {
            let col = [values[0][k], values[1][k], values[2][k]];
            // spreadsheet-style: AVERAGE and STDEV.P
            let avg = (col[0] + col[1] + col[2]) / 3.0;
            let var = ((col[0] - avg).powi(2) + (col[1] - avg).powi(2) + (col[2] - avg).powi(2)) / 3.0;
            assert_abs_diff_eq!(r.mean, avg, epsilon = 1e-12);
            assert_abs_diff_eq!(r.std, var.sqrt(), epsilon = 1e-12);
            assert_eq!(r.n_seeds, 3);
            assert_eq!(r.step, k * 1000);
        }
    }

    #[test]
    fn single_seed_has_zero_std() {
        let rows = vec![row("bc", 4, 0, 0.3), row("bc", 4, 10, 0.7)];
        let (s, _) = summarize(&rows);
        assert!(s.iter().all(|r| r.std == 0.0));
    }

    #[test]
    fn constant_series_is_flat() {
        let rows: Vec<CurveRow> = (0..3)
            .flat_map(|seed| (0..5).map(move |k| row("bc", seed, k * 10, 0.25)))
            .collect();
        let (s, _) = summarize(&rows);
        assert!(s.iter().all(|r| r.mean == 0.25 && r.std == 0.0));
        let svg = curves_svg(&s);
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn mismatched_grids_resampled() {
        let mut rows = vec![row("m", 0, 0, 0.0), row("m", 0, 100, 1.0)];
        rows.extend((0..=4).map(|k| row("m", 1, k * 25, k as f64 * 0.25)));
        let (s, notes) = summarize(&rows);
        assert_eq!(notes.len(), 1);
        let steps: Vec<usize> = s.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 100]);
        assert_abs_diff_eq!(s[1].mean, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn interpolation() {
        assert_eq!(interpolate(&[0, 10], &[0.0, 1.0], 5), 0.5);
        assert_eq!(interpolate(&[0, 10], &[0.0, 1.0], 20), 1.0);
    }

    #[test]
    fn two_methods_two_series() {
        let rows = vec![row("bc", 0, 0, 0.1), row("bc", 0, 5, 0.2), row("tailo", 0, 0, 0.3), row("tailo", 0, 5, 0.9)];
        let (s, _) = summarize(&rows);
        let svg = curves_svg(&s);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">bc</text>") && svg.contains(">tailo</text>"));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("bc", 0, 0, 0.1), row("tailo", 2, 5, f64::NAN)];
        let text = write_csv(&rows).unwrap();
        assert!(text.starts_with("method,seed,step,success_rate,loss\n"));
        let back: Vec<CurveRow> = read_csv(text.as_bytes()).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].success_rate.is_nan());
    }

    #[test]
    fn weight_plot_has_one_line_per_tag_and_panel() {
        let w = |tag: &str, id: u64, step: usize| WeightRow {
            method: "tailo".into(),
            seed: 1,
            trajectory_id: id,
            source_tag: tag.into(),
            step,
            r: step as f64,
            raw_w: 1.0,
            normalized_w: 2.0,
        };
        let rows = vec![w("expert", 0, 0), w("expert", 0, 1), w("random", 1, 0), w("random", 1, 1), w("random", 2, 0)];
        let svg = weights_svg(&rows).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("expert #0") && svg.contains("random #1") && !svg.contains("random #2"));
        assert!(weights_svg(&[]).is_none());
    }

    #[test]
    fn monitor_plot_one_line_per_seed() {
        let m = |seed, step| MonitorRow {
            seed,
            step,
            max_abs_v: step as f64,
            min_v: 0.0,
            max_v: 0.0,
        };
        let svg = monitor_svg(&[m(0, 0), m(0, 1000), m(1, 0), m(1, 1000)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
