//! SVG frames from a trace.

use std::fmt::Write as _;

use super::trace::{TraceHeader, TraceRecord, VehicleSnap};
use crate::arbitration::Choice;
use crate::dynamics::{envelope, VehicleState};
use crate::env::map::IntersectionMap;

const SCALE: f64 = 6.0;

fn vehicle_state(v: &VehicleSnap) -> VehicleState {
    VehicleState {
        length: v.length,
        width: v.width,
        ..VehicleState::new(v.x, v.y, v.v, v.phi)
    }
}

fn draw_vehicle(svg: &mut String, v: &VehicleSnap, fill: &str) {
    let s = vehicle_state(v);
    let pts: Vec<String> = s
        .corners()
        .iter()
        .map(|c| format!("{:.3},{:.3}", c[0], c[1]))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polygon class="vehicle" data-id="{}" points="{}" fill="{fill}" stroke="black" stroke-width="0.1"/>"#,
        v.id,
        pts.join(" ")
    );
    let env = envelope(&s);
    for c in env.centers {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.3}" cy="{:.3}" r="{:.3}" fill="none" stroke="{fill}" stroke-width="0.06" stroke-dasharray="0.3 0.3"/>"#,
            c[0], c[1], env.radius
        );
    }
}

/// One frame showing the world at record `r`.
pub fn render_frame(map: &IntersectionMap, header: &TraceHeader, r: &TraceRecord) -> String {
    let e = map.extent();
    let size = 2.0 * e * SCALE;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0}" height="{size:.0}" viewBox="{} {} {} {}">"#,
        -e,
        -e,
        2.0 * e,
        2.0 * e
    );
    // World y points up.
    let _ = writeln!(svg, r#"<g transform="scale(1,-1)">"#);
    let _ = writeln!(svg, r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#dfe6d8"/>"##, -e, -e, 2.0 * e, 2.0 * e);
    let hw = map.half_width();
    let _ = writeln!(svg, r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#555"/>"##, -e, -hw, 2.0 * e, 2.0 * hw);
    let _ = writeln!(svg, r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#555"/>"##, -hw, -e, 2.0 * hw, 2.0 * e);
    for b in &map.boundaries {
        let pts: Vec<String> = b.iter().map(|p| format!("{:.2},{:.2}", p[0], p[1])).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="curb" points="{}" fill="none" stroke="white" stroke-width="0.2"/>"#,
            pts.join(" ")
        );
    }
    let task = header.task;
    for route in map.routes.iter().filter(|rt| rt.task == task) {
        if route.in_goal([r.ego.x, r.ego.y]) || route.project([r.ego.x, r.ego.y]).lateral.abs() < 3.0 {
            let _ = writeln!(
                svg,
                r#"<circle class="goal" cx="{:.2}" cy="{:.2}" r="{:.2}" fill="none" stroke="gold" stroke-width="0.2"/>"#,
                route.goal[0], route.goal[1], route.goal_radius
            );
        }
    }
    for sv in &r.svs {
        draw_vehicle(&mut svg, sv, "#3a7bd5");
    }
    let ego_fill = match r.chosen {
        Choice::Rl => "#e0532d",
        Choice::Cbf => "#2dbd5a",
    };
    draw_vehicle(&mut svg, &r.ego, ego_fill);
    let _ = writeln!(svg, "</g>");
    let status = r
        .filter_status
        .map_or("off".to_string(), |s| format!("{s:?}").to_lowercase());
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="2.4" fill="black">step {} | {:?} a={:.2} δ={:.3} | filter {} | p={}</text>"#,
        -e + 1.0,
        -e + 3.0,
        r.step,
        r.chosen,
        r.u.a_lon,
        r.u.delta,
        status,
        r.uncertainty.map_or("-".into(), |u| format!("{:.2}", u.percentile))
    );
    let _ = writeln!(svg, "</svg>");
    svg
}

/// Frames for records `0, k, 2k, …`.
pub fn render(header: &TraceHeader, records: &[TraceRecord], every: usize) -> Vec<String> {
    let every = every.max(1);
    if records.is_empty() {
        return Vec::new();
    }
    let map = IntersectionMap::new(header.map);
    records
        .iter()
        .step_by(every)
        .map(|r| render_frame(&map, header, r))
        .collect()
}
