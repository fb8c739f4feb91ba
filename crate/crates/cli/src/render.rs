//! SVG plots of vector maps, one panel per map.

use std::fmt::Write;

use vecprior::vector::{ElementType, PerceptionWindow, VectorMap};

const PANEL_PX: f64 = 240.0;
const MARGIN_PX: f64 = 12.0;

fn color(t: ElementType) -> &'static str {
    match t {
        ElementType::LaneDivider => "#d9822b",
        ElementType::PedestrianCrossing => "#2b6cd9",
        ElementType::RoadBoundary => "#c0392b",
        ElementType::Centerline => "#27ae60",
    }
}

/// Bounds of a panel: the window for ego maps, the point extent otherwise.
fn bounds(map: &VectorMap, window: &PerceptionWindow) -> (f64, f64, f64, f64) {
    if map.frame.is_ego() {
        return (window.x_min, window.x_max, window.y_min, window.y_max);
    }
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in map.instances.iter().flat_map(|i| i.points()) {
        b = (b.0.min(p.x), b.1.max(p.x), b.2.min(p.y), b.3.max(p.y));
    }
    if !b.0.is_finite() {
        return (window.x_min, window.x_max, window.y_min, window.y_max);
    }
    // keep degenerate extents drawable
    let pad = 1.0;
    (b.0 - pad, b.1 + pad, b.2 - pad, b.3 + pad)
}

pub fn render_svg(maps: &[VectorMap], window: &PerceptionWindow) -> String {
    let panels: Vec<_> = maps.iter().map(|m| bounds(m, window)).collect();
    // every panel shares the height; width follows the aspect ratio
    let widths: Vec<f64> = panels
        .iter()
        .map(|&(x0, x1, y0, y1)| PANEL_PX * (x1 - x0) / (y1 - y0))
        .collect();
    let total_w = widths.iter().map(|w| w + MARGIN_PX).sum::<f64>() + MARGIN_PX;
    let total_h = PANEL_PX + 2.0 * MARGIN_PX;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.1}" height="{total_h:.1}" viewBox="0 0 {total_w:.1} {total_h:.1}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let mut left = MARGIN_PX;
    for ((map, &(x0, x1, y0, y1)), &w) in maps.iter().zip(&panels).zip(&widths) {
        let scale = PANEL_PX / (y1 - y0);
        // map x to the right and y (forward) up
        let px = |x: f64| left + (x - x0) * scale;
        let py = |y: f64| MARGIN_PX + (y1 - y) * scale;
        let _ = writeln!(
            svg,
            r##"<g><rect x="{left:.1}" y="{MARGIN_PX:.1}" width="{w:.1}" height="{PANEL_PX:.1}" fill="#f7f7f7" stroke="#999"/>"##
        );
        for inst in &map.instances {
            let pts: Vec<String> = inst
                .points()
                .iter()
                .map(|p| format!("{:.2},{:.2}", px(p.x), py(p.y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5" stroke-opacity="{:.2}"/>"#,
                pts.join(" "),
                color(inst.element_type()),
                inst.confidence().clamp(0.2, 1.0)
            );
        }
        if map.frame.is_ego() && (x0..=x1).contains(&0.0) && (y0..=y1).contains(&0.0) {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="black"/>"#,
                px(0.0),
                py(0.0)
            );
        }
        svg.push_str("</g>\n");
        left += w + MARGIN_PX;
    }
    svg.push_str("</svg>\n");
    svg
}
