//! Line plot of certified bound against eta, rendered from the table CSV
//! alone so the figure can always be regenerated from the table.

use std::fmt::Write as _;

use learncert::certify::parse_csv;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn svg_from_csv(csv: &str) -> learncert::Result<String> {
    let table = parse_csv(csv)?;
    let xs = &table.etas_x100;
    let (x_lo, x_hi) = match (xs.first(), xs.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 1.0, a + 1.0),
        _ => (0.0, 1.0),
    };
    let (y_lo, y_hi) = (0.0, 100.0);
    let px = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(out, r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" fill="none" stroke="black"/>"#);
    for i in 0..=5 {
        let y = y_lo + (y_hi - y_lo) * i as f64 / 5.0;
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{y:.0}</text>"#, left - 6.0, py(y) + 4.0);
    }
    for &x in xs {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{x}</text>"#, px(x), bottom + 16.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">eta x 100</text>"#, WIDTH / 2.0, HEIGHT - 12.0);
    let _ = writeln!(out, r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">certified bound (%)</text>"#, HEIGHT / 2.0, HEIGHT / 2.0);

    for (c, (name, cells)) in table.columns.iter().enumerate() {
        let color = COLORS[c % COLORS.len()];
        // abstentions break the line
        let mut d = String::new();
        let mut pen_down = false;
        for (&x, cell) in xs.iter().zip(cells) {
            match cell {
                Some(y) => {
                    let _ = write!(d, "{}{:.2} {:.2} ", if pen_down { "L" } else { "M" }, px(x), py(*y));
                    pen_down = true;
                }
                None => pen_down = false,
            }
        }
        if !d.is_empty() {
            let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.trim_end());
        }
        for (&x, cell) in xs.iter().zip(cells) {
            if let Some(y) = cell {
                let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(*y));
            }
        }
        let ly = top + 14.0 * c as f64;
        let _ = writeln!(out, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, right - 110.0, right - 90.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, right - 84.0, ly + 4.0, escape(name));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_path_per_column_and_gaps_for_abstentions() {
        let csv = "eta_x100,EMN,PUE\n5,10.00,8.00\n10,12.00,-\n15,14.00,9.00\n";
        let svg = svg_from_csv(csv).unwrap();
        assert_eq!(svg.matches("<path d=\"M").count(), 3);
        assert_eq!(svg.matches("<circle").count(), 5);
        // the PUE line restarts after the gap
        assert!(svg.lines().any(|l| l.contains("stroke=\"#d62728\"") && l.matches('M').count() == 2));
        assert_eq!(svg, svg_from_csv(csv).unwrap());
    }
}
