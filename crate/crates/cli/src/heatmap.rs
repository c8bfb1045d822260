//! Grouping-matrix export: plain CSV and a standalone SVG heatmap.

use std::fmt::Write;

/// Rows are nodes, columns are groups. `{}` on `f32` prints the shortest
/// text that parses back to the same value.
pub fn matrix_csv(values: &[f32], cols: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

const COOL: [f64; 3] = [33.0, 102.0, 172.0];
const MID: [f64; 3] = [247.0, 247.0, 247.0];
const WARM: [f64; 3] = [178.0, 24.0, 43.0];

/// Diverging blue-white-red colour for `t` in `[-1, 1]`.
pub fn diverging(t: f64) -> String {
    let t = t.clamp(-1.0, 1.0);
    let (end, w) = if t < 0.0 { (COOL, -t) } else { (WARM, t) };
    let c: Vec<u8> = MID
        .iter()
        .zip(end)
        .map(|(&m, e)| (m + (e - m) * w).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Heatmap of an `rows×cols` matrix, colour scale symmetric about zero.
pub fn heatmap_svg(values: &[f32], cols: usize, title: &str) -> String {
    let rows = values.len() / cols;
    let vmax = values.iter().fold(0f64, |m, &v| m.max((v as f64).abs()));
    let cell_w = 24.0_f64.min(480.0 / cols as f64).max(4.0);
    let cell_h = (600.0 / rows as f64).clamp(2.0, 16.0);
    let (left, top) = (48.0, 36.0);
    let grid_w = cell_w * cols as f64;
    let grid_h = cell_h * rows as f64;
    let width = left + grid_w + 90.0;
    let height = top + grid_h + 40.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="13">{}</text>"#, escape(title));
    for (i, row) in values.chunks(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = if vmax > 0.0 { v as f64 / vmax } else { 0.0 };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell_w:.2}" height="{cell_h:.2}" fill="{}"/>"#,
                left + j as f64 * cell_w,
                top + i as f64 * cell_h,
                diverging(t)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">group</text>"#,
        left + grid_w / 2.0,
        top + grid_h + 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">node</text>"#,
        top + grid_h / 2.0,
        top + grid_h / 2.0
    );

    // colour bar, high at the top
    let bar_x = left + grid_w + 20.0;
    let steps = 32;
    let step_h = grid_h.min(200.0) / steps as f64;
    for k in 0..steps {
        let t = 1.0 - 2.0 * (k as f64 + 0.5) / steps as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{bar_x:.1}" y="{:.2}" width="12" height="{step_h:.2}" fill="{}"/>"#,
            top + k as f64 * step_h,
            diverging(t)
        );
    }
    for (label, y) in [
        (format!("{vmax:.3}"), top + 8.0),
        ("0".to_string(), top + steps as f64 * step_h / 2.0 + 4.0),
        (format!("{:.3}", -vmax), top + steps as f64 * step_h),
    ] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}">{label}</text>"#, bar_x + 16.0);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
