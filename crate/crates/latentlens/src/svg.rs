//! Standalone SVG renderings of the analysis tables: annotated accuracy
//! heatmaps, accuracy-vs-confidence curves with count-scaled markers, and
//! labelled 2D scatter plots. Plain string assembly, no imaging crates.

use crate::error::{Error, Result};
use crate::learn::{AccuracyMatrix, CurveTable};
use crate::structure::EmbeddedPoint;

/// Fixed label palette (repeats past 10 classes).
const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac",
];

pub fn class_color(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

fn blend(t: f64) -> String {
    // white-to-deep-blue ramp
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

/// Annotated L×L heatmap; each cell carries its accuracy to three decimals.
pub fn emit_heatmap(matrix: &AccuracyMatrix) -> Result<String> {
    let l = matrix.levels();
    if l == 0 {
        return Err(Error::EmptyTable {
            kind: "heatmap".into(),
        });
    }
    let cell = 48.0;
    let margin = 70.0;
    let width = margin + l as f64 * cell + 20.0;
    let height = margin + l as f64 * cell + 20.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">cross-level accuracy \
         ({} / {})</text>\n",
        margin + l as f64 * cell / 2.0,
        matrix.trainer,
        matrix.sampler
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">test level</text>\n",
        margin + l as f64 * cell / 2.0,
        38.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">\
         train level</text>\n",
        margin + l as f64 * cell / 2.0,
        margin + l as f64 * cell / 2.0
    ));
    for i in 1..=l {
        for j in 1..=l {
            let acc = matrix.cell(i, j);
            let x = margin + (j - 1) as f64 * cell;
            let y = margin + (i - 1) as f64 * cell;
            let text_color = if acc > 0.6 { "#ffffff" } else { "#000000" };
            svg.push_str(&format!(
                "<rect class=\"cell\" x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell:.1}\" \
                 height=\"{cell:.1}\" fill=\"{}\" stroke=\"#ffffff\"/>\n",
                blend(acc)
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"{text_color}\">\
                 {:.3}</text>\n",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                acc
            ));
        }
    }
    for k in 1..=l {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{k}</text>\n",
            margin + (k as f64 - 0.5) * cell,
            margin - 8.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{k}</text>\n",
            margin - 8.0,
            margin + (k as f64 - 0.5) * cell + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Accuracy versus predicted confidence; marker area scales with bin count.
pub fn emit_curve(table: &CurveTable) -> Result<String> {
    if table.bins.is_empty() {
        return Err(Error::EmptyTable {
            kind: "curve".into(),
        });
    }
    let (width, height) = (520.0, 360.0);
    let (left, right, top, bottom) = (60.0, 20.0, 30.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let x_min = table.bins.first().map(|b| b.bin_low).unwrap().min(0.0);
    let x_max = table.bins.last().map(|b| b.bin_high).unwrap().max(x_min + 1e-9);
    let max_count = table.bins.iter().map(|b| b.count).max().unwrap() as f64;
    let x_of = |v: f64| left + (v - x_min) / (x_max - x_min) * plot_w;
    let y_of = |v: f64| top + (1.0 - v) * plot_h;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">accuracy vs predicted \
         confidence</text>\n",
        width / 2.0
    ));
    for g in 0..=5 {
        let v = g as f64 / 5.0;
        let y = y_of(v);
        svg.push_str(&format!(
            "<line x1=\"{left:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            left + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
            left - 6.0,
            y + 4.0
        ));
    }
    let mut path = String::from("M");
    for b in &table.bins {
        let cx = x_of((b.bin_low + b.bin_high) / 2.0);
        let cy = y_of(b.accuracy);
        path.push_str(&format!(" {cx:.1} {cy:.1} L"));
    }
    path.truncate(path.len() - 2);
    svg.push_str(&format!(
        "<path d=\"{path}\" fill=\"none\" stroke=\"#4e79a7\" stroke-width=\"1.5\"/>\n"
    ));
    for b in &table.bins {
        let cx = x_of((b.bin_low + b.bin_high) / 2.0);
        let cy = y_of(b.accuracy);
        let r = 3.0 + 12.0 * (b.count as f64 / max_count).sqrt();
        svg.push_str(&format!(
            "<circle class=\"bin\" cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"{r:.1}\" fill=\"#4e79a7\" \
             fill-opacity=\"0.55\" stroke=\"#2f4b6e\"/>\n"
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">predicted confidence</text>\n",
        left + plot_w / 2.0,
        height - 14.0
    ));
    for g in 0..=4 {
        let v = x_min + (x_max - x_min) * g as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.2}</text>\n",
            x_of(v),
            top + plot_h + 16.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// 2D scatter colored by class label, with one legend entry per class.
pub fn emit_scatter(points: &[EmbeddedPoint], num_classes: usize, title: &str) -> Result<String> {
    if points.is_empty() {
        return Err(Error::EmptyTable {
            kind: "scatter".into(),
        });
    }
    let (width, height) = (520.0, 440.0);
    let (left, right, top, bottom) = (40.0, 110.0, 30.0, 20.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let (mut x_min, mut x_max, mut y_min, mut y_max) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x_min = x_min.min(p.x);
        x_max = x_max.max(p.x);
        y_min = y_min.min(p.y);
        y_max = y_max.max(p.y);
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        let span = (*hi - *lo).max(1e-9);
        *lo -= 0.05 * span;
        *hi += 0.05 * span;
    };
    pad(&mut x_min, &mut x_max);
    pad(&mut y_min, &mut y_max);
    let x_of = |v: f64| left + (v - x_min) / (x_max - x_min) * plot_w;
    let y_of = |v: f64| top + (y_max - v) / (y_max - y_min) * plot_h;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n",
        left + plot_w / 2.0
    ));
    svg.push_str(&format!(
        "<rect x=\"{left:.1}\" y=\"{top:.1}\" width=\"{plot_w:.1}\" height=\"{plot_h:.1}\" \
         fill=\"none\" stroke=\"#cccccc\"/>\n"
    ));
    for p in points {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{}\" fill-opacity=\"0.7\"/>\n",
            x_of(p.x),
            y_of(p.y),
            class_color(p.label)
        ));
    }
    for c in 0..num_classes {
        let y = top + 14.0 + c as f64 * 18.0;
        svg.push_str(&format!(
            "<g class=\"legend-entry\"><circle cx=\"{:.1}\" cy=\"{y:.1}\" r=\"5\" fill=\"{}\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\">class {c}</text></g>\n",
            left + plot_w + 16.0,
            class_color(c),
            left + plot_w + 28.0,
            y + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
