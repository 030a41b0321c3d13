//! Static SVG plot of probe loss and R@1 against epoch.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::trainer::TrainMetrics;

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 48.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    ys: Vec<f64>,
}

fn panel(out: &mut String, x0: f64, title: &str, xs: &[f64], series: &[Series], fixed: Option<(f64, f64)>) {
    let (lo, hi) = fixed.unwrap_or_else(|| {
        let all = series.iter().flat_map(|s| s.ys.iter().copied()).filter(|v| v.is_finite());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    });
    let (xmin, xmax) = (xs[0], *xs.last().expect("non-empty"));
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| x0 + PAD + (x - xmin) / xspan * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - lo) / (hi - lo) * (H - 2.0 * PAD);

    let _ = writeln!(out, r##"<g font-family="sans-serif" font-size="11">"##);
    let _ = writeln!(
        out,
        r##"<rect x="{:.1}" y="{PAD:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        x0 + PAD,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(out, r##"<text x="{:.1}" y="24" font-size="13">{title}</text>"##, x0 + PAD);
    let _ = writeln!(out, r##"<text x="{:.1}" y="{:.1}">epoch</text>"##, x0 + W / 2.0 - 15.0, H - 12.0);
    for (v, anchor) in [(lo, H - PAD), (hi, PAD + 10.0)] {
        let _ = writeln!(out, r##"<text x="{:.1}" y="{anchor:.1}" text-anchor="end">{v:.3}</text>"##, x0 + PAD - 4.0);
    }
    for (v, a) in [(xmin, "start"), (xmax, "end")] {
        let _ = writeln!(out, r##"<text x="{:.1}" y="{:.1}" text-anchor="{a}">{v}</text>"##, px(v), H - PAD + 14.0);
    }
    for (k, s) in series.iter().enumerate() {
        let pts: Vec<String> = xs
            .iter()
            .zip(&s.ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            out,
            r##"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"##,
            s.color,
            pts.join(" ")
        );
        let ly = PAD + 14.0 + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r##"<text x="{:.1}" y="{ly:.1}" fill="{}" text-anchor="end">{}</text>"##,
            x0 + W - PAD - 6.0,
            s.color,
            s.label
        );
    }
    let _ = writeln!(out, "</g>");
}

/// Two side-by-side panels: probe loss, and R@1 in both directions.
pub fn render_svg(rows: &[TrainMetrics]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Format("no metrics rows to plot".into()));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.epoch as f64).collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{H}" viewBox="0 0 {} {H}">"##,
        2.0 * W,
        2.0 * W
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="white"/>"##);
    panel(
        &mut out,
        0.0,
        "probe loss",
        &xs,
        &[Series {
            label: "loss",
            color: "#1f77b4",
            ys: rows.iter().map(|r| r.probe_loss).collect(),
        }],
        None,
    );
    panel(
        &mut out,
        W,
        "probe R@1",
        &xs,
        &[
            Series {
                label: "image to text",
                color: "#d62728",
                ys: rows.iter().map(|r| r.r1_i2t).collect(),
            },
            Series {
                label: "text to image",
                color: "#2ca02c",
                ys: rows.iter().map(|r| r.r1_t2i).collect(),
            },
        ],
        Some((0.0, 1.0)),
    );
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: u64) -> Vec<TrainMetrics> {
        (0..n)
            .map(|e| TrainMetrics {
                epoch: e,
                iter: e + 1,
                probe_loss: 5.0 - e as f64 * 0.1,
                r1_i2t: 0.1 * e as f64,
                r1_t2i: 0.05 * e as f64,
                tau: 0.07,
                tau_q10: 0.07,
                tau_q50: 0.07,
                tau_q90: 0.07,
                gamma: 0.6,
                lr: 1e-3,
                ledger: [0; 6],
            })
            .collect()
    }

    #[test]
    fn one_polyline_per_series() {
        let svg = render_svg(&rows(5)).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3);
    }

    #[test]
    fn single_row_and_empty() {
        assert!(render_svg(&rows(1)).unwrap().contains("<polyline"));
        assert!(render_svg(&[]).is_err());
    }
}
