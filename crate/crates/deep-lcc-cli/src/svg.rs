//! Minimal self-contained SVG line charts for velocity and spacing traces.

use std::fmt::Write as _;

use deep_lcc::trajectory::TrajectoryLog;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 140.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 45.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

struct Series<'a> {
    label: String,
    color: &'a str,
    width: f64,
    points: Vec<(f64, f64)>,
}

fn render(title: &str, y_label: &str, series: &[Series]) -> String {
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() || x_max <= x_min {
        x_min = 0.0;
        x_max = 1.0;
    }
    if !y_min.is_finite() || y_max <= y_min {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = move |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = move |y: f64| MARGIN_T + (y_max - y) / (y_max - y_min) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="18" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        title
    );

    // Axes with simple tick grids.
    let ticks = 6;
    for k in 0..=ticks {
        let frac = k as f64 / ticks as f64;
        let xv = x_min + frac * (x_max - x_min);
        let yv = y_min + frac * (y_max - y_min);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#dddddd" stroke-width="1"/>"##,
            sx(xv), MARGIN_T, sx(xv), MARGIN_T + plot_h
        );
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#dddddd" stroke-width="1"/>"##,
            MARGIN_L, sy(yv), MARGIN_L + plot_w, sy(yv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{:.1}</text>"#,
            sx(xv), MARGIN_T + plot_h + 16.0, xv
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{:.1}</text>"#,
            MARGIN_L - 6.0, sy(yv) + 4.0, yv
        );
    }
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333333"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">time (s)</text>"#,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        y_label
    );

    for (i, s) in series.iter().enumerate() {
        let mut path = String::new();
        for (k, &(x, y)) in s.points.iter().enumerate() {
            let _ = write!(path, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, sx(x), sy(y));
        }
        let _ = writeln!(
            out,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="{}"/>"#,
            path.trim_end(),
            s.color,
            s.width
        );
        let ly = MARGIN_T + 14.0 + 16.0 * i as f64;
        let lx = MARGIN_L + plot_w + 10.0;
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="{}"/>"#,
            lx, ly - 4.0, lx + 18.0, ly - 4.0, s.color, s.width
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
            lx + 22.0, ly, s.label
        );
    }
    out.push_str("</svg>\n");
    out
}

fn vehicle_style(log: &TrajectoryLog, vehicle: usize) -> (String, &'static str, f64) {
    if vehicle == 0 {
        ("head".into(), "#000000", 2.0)
    } else if log.cav_set.contains(&vehicle) {
        let idx = log.cav_set.iter().position(|&c| c == vehicle).unwrap_or(0);
        (format!("CAV {vehicle}"), PALETTE[idx % 2 + 3], 2.0)
    } else {
        (format!("HDV {vehicle}"), "#9a9a9a", 1.0)
    }
}

/// Velocity traces of every vehicle over the run.
pub fn velocity_chart(log: &TrajectoryLog, title: &str) -> String {
    let n = log.n();
    let series: Vec<Series> = (0..=n)
        .map(|v| {
            let (label, color, width) = vehicle_style(log, v);
            Series {
                label,
                color,
                width,
                points: log.steps.iter().map(|r| (r.time, r.velocities[v])).collect(),
            }
        })
        .collect();
    render(title, "velocity (m/s)", &series)
}

/// Spacing traces of the following vehicles over the run.
pub fn spacing_chart(log: &TrajectoryLog, title: &str) -> String {
    let n = log.n();
    let series: Vec<Series> = (1..=n)
        .map(|v| {
            let (label, color, width) = vehicle_style(log, v);
            Series {
                label,
                color,
                width,
                points: log.steps.iter().map(|r| (r.time, r.spacing(v))).collect(),
            }
        })
        .collect();
    render(title, "spacing (m)", &series)
}
