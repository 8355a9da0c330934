//! Plain SVG line plots and heat maps. Output depends only on the data.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub struct LinePlot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub points: &'a [(f64, f64)],
    /// Draw the y = x reference diagonal.
    pub diagonal: bool,
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
}

pub fn line_plot(p: &LinePlot) -> String {
    let (x0, x1) = p.x_range;
    let (y0, y1) = p.y_range;
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0).max(f64::MIN_POSITIVE) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0).max(f64::MIN_POSITIVE) * ph;

    let mut out = String::new();
    header(&mut out, p.title);
    let _ = writeln!(out, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            TOP + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, sy(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        escape(p.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(p.y_label)
    );
    if p.diagonal {
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
            sx(x0),
            sy(y0),
            sx(x1),
            sy(y1)
        );
    }
    if !p.points.is_empty() {
        let path: Vec<String> = p.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, path.join(" "));
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Count matrix as a white-to-blue grid with row/column labels.
pub fn heat_map(title: &str, labels: &[u16], counts: &[Vec<usize>]) -> String {
    let n = labels.len().max(1);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let cell = (pw / n as f64).min(ph / n as f64);
    let max = counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;

    let mut out = String::new();
    header(&mut out, title);
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            let shade = 255.0 - 200.0 * c as f64 / max;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({:.0},{:.0},255)"><title>{} → {}: {c}</title></rect>"#,
                LEFT + j as f64 * cell,
                TOP + i as f64 * cell,
                shade,
                shade,
                labels[i],
                labels[j]
            );
        }
    }
    for (i, l) in labels.iter().enumerate() {
        let mid = (i as f64 + 0.5) * cell;
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{l}</text>"#, LEFT - 4.0, TOP + mid + 4.0);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{l}</text>"#, LEFT + mid, TOP + n as f64 * cell + 14.0);
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">predicted device</text>"#, LEFT + n as f64 * cell / 2.0, TOP + n as f64 * cell + 32.0);
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0:.1}" text-anchor="middle" transform="rotate(-90 16 {0:.1})">true device</text>"#,
        TOP + n as f64 * cell / 2.0
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_deterministic_and_well_formed() {
        let pts = [(0.0, 0.0), (0.5, 0.8), (1.0, 1.0)];
        let p = LinePlot {
            title: "ROC <test>",
            x_label: "FPR",
            y_label: "TPR",
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
            points: &pts,
            diagonal: true,
        };
        let a = line_plot(&p);
        assert_eq!(a, line_plot(&p));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("ROC &lt;test&gt;"));
        assert!(a.contains("<polyline"));
    }

    #[test]
    fn heat_map_has_a_cell_per_entry() {
        let s = heat_map("c", &[1, 2], &[vec![3, 0], vec![1, 4]]);
        assert_eq!(s.matches("<rect x=").count(), 4);
    }
}
