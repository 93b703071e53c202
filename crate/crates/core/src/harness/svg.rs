use std::fmt::Write as _;

use crate::error::{dim_err, Error, Result};
use crate::pointcloud::{FlowField, Point3, ScenePair};

const SIZE: f64 = 800.0;
const MARGIN: f64 = 40.0;
const RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvgOptions {
    /// Axis removed by the orthographic projection (2 = view along z).
    pub drop_axis: usize,
}

impl Default for SvgOptions {
    fn default() -> Self {
        SvgOptions { drop_axis: 2 }
    }
}

fn moved(points: &[Point3], flow: &FlowField) -> Vec<Point3> {
    points
        .iter()
        .zip(&flow.vectors)
        .map(|(p, f)| std::array::from_fn(|k| p[k] + f[k]))
        .collect()
}

/// Figure of `pc1` (gray), `pc1 + flow_a` (red) and optionally
/// `pc1 + flow_b` (green), each flow joined to its source by a segment.
pub fn render_flow_svg(
    pair: &ScenePair,
    flow_a: &FlowField,
    flow_b: Option<&FlowField>,
    opts: SvgOptions,
) -> Result<String> {
    if opts.drop_axis > 2 {
        return Err(Error::Validation(format!("axis {} out of range 0..=2", opts.drop_axis)));
    }
    let n = pair.pc1.len();
    for f in std::iter::once(flow_a).chain(flow_b) {
        if f.len() != n {
            return Err(dim_err(format!("flow has {} rows, pc1 has {n}", f.len())));
        }
    }
    let (u, v) = match opts.drop_axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let base = &pair.pc1.positions;
    let layer_a = moved(base, flow_a);
    let layer_b = flow_b.map(|f| moved(base, f));

    let all = base.iter().chain(&layer_a).chain(layer_b.iter().flatten());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all {
        for (j, axis) in [u, v].into_iter().enumerate() {
            lo[j] = lo[j].min(p[axis]);
            hi[j] = hi[j].max(p[axis]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let scale = if span > 0.0 { (SIZE - 2.0 * MARGIN) / span } else { 1.0 };
    let project = |p: &Point3| -> (String, String) {
        let x = MARGIN + (p[u] - lo[0]) * scale;
        let y = SIZE - MARGIN - (p[v] - lo[1]) * scale;
        (format!("{x:.3}"), format!("{y:.3}"))
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let mut segments = |id: &str, color: &str, layer: &[Point3]| {
        let _ = writeln!(out, r#"<g id="{id}" stroke="{color}" stroke-width="0.8" stroke-opacity="0.6">"#);
        for (p, q) in base.iter().zip(layer) {
            let ((x1, y1), (x2, y2)) = (project(p), project(q));
            let _ = writeln!(out, r#"<line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}"/>"#);
        }
        out.push_str("</g>\n");
    };
    segments("segments-a", "red", &layer_a);
    if let Some(b) = &layer_b {
        segments("segments-b", "green", b);
    }
    let mut markers = |id: &str, color: &str, layer: &[Point3]| {
        let _ = writeln!(out, r#"<g id="{id}" fill="{color}">"#);
        for p in layer {
            let (x, y) = project(p);
            let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="{RADIUS}"/>"#);
        }
        out.push_str("</g>\n");
    };
    markers("pc1", "gray", base);
    markers("flow-a", "red", &layer_a);
    if let Some(b) = &layer_b {
        markers("flow-b", "green", b);
    }
    out.push_str("</svg>\n");
    Ok(out)
}
