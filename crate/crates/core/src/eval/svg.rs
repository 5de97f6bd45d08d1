use std::fmt::Write;

use super::analysis::{SweepGrid, TopNCurve};

const CELL: f64 = 48.0;
const MARGIN: f64 = 60.0;

fn shade(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t).round() as u8;
    let b = (255.0 * (1.0 - t)).round() as u8;
    format!("#{r:02x}40{b:02x}")
}

/// Accuracy heatmap, gamma on rows and lambda on columns.
pub fn sweep_heatmap_svg(grid: &SweepGrid) -> String {
    let rows = grid.gammas.len();
    let cols = grid.lambdas.len();
    let width = MARGIN + CELL * cols as f64 + 10.0;
    let height = MARGIN + CELL * rows as f64 + 10.0;
    let (lo, hi) = grid
        .accuracy
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
            (lo.min(a), hi.max(a))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="10">"#
    );
    for (j, l) in grid.lambdas.iter().enumerate() {
        let x = MARGIN + CELL * (j as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{l}</text>"#,
            MARGIN - 8.0
        );
    }
    for (i, g) in grid.gammas.iter().enumerate() {
        let y = MARGIN + CELL * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" text-anchor="end">{g}</text>"#,
            MARGIN - 6.0
        );
        for (j, &acc) in grid.accuracy[i].iter().enumerate() {
            let x = MARGIN + CELL * j as f64;
            let y0 = MARGIN + CELL * i as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y0}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                shade((acc - lo) / span)
            );
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{}" text-anchor="middle" fill="#ffffff">{acc:.3}</text>"##,
                x + CELL / 2.0,
                y0 + CELL / 2.0 + 3.0
            );
        }
    }
    let _ = writeln!(s, r#"<text x="4" y="14">gamma \ lambda</text>"#);
    s.push_str("</svg>\n");
    s
}

/// Top-1 accuracy against neighbor count, with the unsteered baseline
/// as a dashed line.
pub fn topn_curve_svg(curve: &TopNCurve) -> String {
    let (w, h) = (480.0, 300.0);
    let (x0, y0, x1, y1) = (MARGIN, 20.0, w - 20.0, h - 40.0);
    let max_n = curve.points.iter().map(|p| p.n).max().unwrap_or(1).max(1) as f64;
    let px = |n: usize| x0 + (x1 - x0) * (n as f64 / max_n);
    let py = |a: f64| y1 - (y1 - y0) * a.clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    let by = py(curve.baseline);
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{by}" x2="{x1}" y2="{by}" stroke="gray" stroke-dasharray="4 3"/>"#
    );
    let pts: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("{},{}", px(p.n), py(p.top1)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        pts.join(" ")
    );
    for p in &curve.points {
        let _ = writeln!(
            s,
            r#"<circle cx="{}" cy="{}" r="3" fill="steelblue"/>"#,
            px(p.n),
            py(p.top1)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            px(p.n),
            y1 + 14.0,
            p.n
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">N</text>"#,
        (x0 + x1) / 2.0,
        h - 6.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::TopNPoint;

    #[test]
    fn heatmap_has_one_rect_per_cell() {
        let g = SweepGrid {
            gammas: vec![1.0, 1.5, 2.0],
            lambdas: vec![0.5, 1.0],
            accuracy: vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]],
            baseline: 0.2,
        };
        let svg = sweep_heatmap_svg(&g);
        assert_eq!(svg.matches("<rect").count(), 6);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn curve_has_every_point() {
        let c = TopNCurve {
            baseline: 0.5,
            points: vec![
                TopNPoint {
                    n: 1,
                    top1: 0.4,
                    top5: 0.9,
                },
                TopNPoint {
                    n: 10,
                    top1: 0.6,
                    top5: 0.9,
                },
            ],
        };
        assert_eq!(topn_curve_svg(&c).matches("<circle").count(), 2);
    }
}
