//! Minimal SVG line charts for training curves and ROC.

use std::fmt::Write;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn bounds(series: &[Series], fixed: Option<(f64, f64, f64, f64)>) -> (f64, f64, f64, f64) {
    if let Some(b) = fixed {
        return b;
    }
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0.min(0.0), y1)
}

/// One `<polyline>` per series plus axes and a legend. `fixed` pins the
/// `(x0, x1, y0, y1)` data range.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    fixed: Option<(f64, f64, f64, f64)>,
) -> String {
    let (x0, x1, y0, y1) = bounds(series, fixed);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} V{b} H{r}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (v, anchor) in [(y0, H - MARGIN), (y1, MARGIN)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#,
            MARGIN - 4.0,
            anchor + 4.0
        );
    }
    for (v, anchor) in [(x0, MARGIN), (x1, W - MARGIN)] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor}" y="{}" text-anchor="middle">{v}</text>"#,
            H - MARGIN + 16.0
        );
    }
    for (i, series) in series.iter().enumerate() {
        let pts: Vec<String> = series
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            series.color,
            pts.join(" ")
        );
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{}" text-anchor="end">{}</text>"#,
            W - MARGIN - 4.0,
            series.color,
            series.label
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Loss and accuracy charts from history rows `[epoch, tl, ta, vl, va]`.
pub fn history_charts(rows: &[[f64; 5]]) -> (String, String) {
    let col = |k: usize| rows.iter().map(|r| (r[0], r[k])).collect::<Vec<_>>();
    let loss = line_chart(
        "Train vs validation loss",
        "epoch",
        "loss",
        &[
            Series {
                label: "train",
                color: "#1f77b4",
                points: col(1),
            },
            Series {
                label: "validation",
                color: "#d62728",
                points: col(3),
            },
        ],
        None,
    );
    let acc = line_chart(
        "Train vs validation accuracy",
        "epoch",
        "accuracy",
        &[
            Series {
                label: "train",
                color: "#1f77b4",
                points: col(2),
            },
            Series {
                label: "validation",
                color: "#d62728",
                points: col(4),
            },
        ],
        None,
    );
    (loss, acc)
}

pub fn roc_chart(points: &[(f64, f64)], auc: f64) -> String {
    line_chart(
        &format!("ROC curve (AUC {auc:.3})"),
        "false positive rate",
        "true positive rate",
        &[
            Series {
                label: "model",
                color: "#d62728",
                points: points.to_vec(),
            },
            Series {
                label: "chance",
                color: "#999999",
                points: vec![(0.0, 0.0), (1.0, 1.0)],
            },
        ],
        Some((0.0, 1.0, 0.0, 1.0)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_chart_has_two_polylines() {
        let rows = [
            [1.0, 0.9, 0.5, 0.8, 0.6],
            [2.0, 0.7, 0.6, 0.7, 0.65],
            [3.0, 0.5, 0.7, 0.6, 0.7],
        ];
        let (loss, acc) = history_charts(&rows);
        assert_eq!(loss.matches("<polyline").count(), 2);
        assert_eq!(acc.matches("<polyline").count(), 2);
        assert!(loss.starts_with("<svg"));
    }

    #[test]
    fn degenerate_ranges_do_not_divide_by_zero() {
        let svg = line_chart(
            "t",
            "x",
            "y",
            &[Series {
                label: "a",
                color: "red",
                points: vec![(1.0, 2.0)],
            }],
            None,
        );
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
