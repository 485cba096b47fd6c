//! SVG scatter plots with per-class marginal histograms, rendered from the
//! embedding CSV export so plots never carry numbers the CSV lacks.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const SIZE: f64 = 420.0;
const MARGIN_BAND: f64 = 90.0;
const PAD: f64 = 40.0;
const BINS: usize = 30;

struct Points {
    x_name: String,
    y_name: String,
    xs: Vec<f64>,
    ys: Vec<f64>,
    class: Vec<usize>,
    classes: Vec<String>,
}

fn parse(csv_text: &str, overlay: &str, class_order: Option<&[String]>) -> Result<Points> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.len() < 3 {
        return Err(Error::schema(
            "header",
            "expected scan_id and two coordinate columns",
        ));
    }
    let col = header
        .iter()
        .position(|h| h == overlay)
        .ok_or_else(|| Error::Lookup(format!("no overlay column `{overlay}`")))?;
    let mut classes: Vec<String> = class_order.map(<[String]>::to_vec).unwrap_or_default();
    let mut pts = Points {
        x_name: header[1].to_string(),
        y_name: header[2].to_string(),
        xs: Vec::new(),
        ys: Vec::new(),
        class: Vec::new(),
        classes: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec[i].parse::<f64>().map_err(|_| {
                Error::schema(
                    header[i].to_string(),
                    format!("not a number: `{}`", &rec[i]),
                )
            })
        };
        pts.xs.push(num(1)?);
        pts.ys.push(num(2)?);
        let v = &rec[col];
        let ci = match classes.iter().position(|c| c == v) {
            Some(ci) => ci,
            None => {
                classes.push(v.to_string());
                classes.len() - 1
            }
        };
        pts.class.push(ci);
    }
    if pts.xs.is_empty() {
        return Err(Error::EmptyInput("embedding CSV has no points".into()));
    }
    pts.classes = classes;
    Ok(pts)
}

fn range(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        let pad = 0.03 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

/// Normalised histograms per class over `BINS` equal bins.
fn densities(v: &[f64], class: &[usize], n_classes: usize, (lo, hi): (f64, f64)) -> Vec<Vec<f64>> {
    let mut h = vec![vec![0.0; BINS]; n_classes];
    for (&x, &c) in v.iter().zip(class) {
        let b = (((x - lo) / (hi - lo)) * BINS as f64)
            .floor()
            .clamp(0.0, (BINS - 1) as f64) as usize;
        h[c][b] += 1.0;
    }
    for row in &mut h {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
    h
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Scatter coloured by `overlay`, with marginal histograms of each class on
/// the top (x) and right (y) bands. `class_order` fixes legend order and
/// colours; unseen values are appended in order of appearance.
pub fn scatter_with_marginals(
    csv_text: &str,
    overlay: &str,
    class_order: Option<&[String]>,
) -> Result<String> {
    let p = parse(csv_text, overlay, class_order)?;
    let (xr, yr) = (range(&p.xs), range(&p.ys));
    let left = PAD;
    let top = PAD + MARGIN_BAND;
    let sx = |x: f64| left + (x - xr.0) / (xr.1 - xr.0) * SIZE;
    let sy = |y: f64| top + SIZE - (y - yr.0) / (yr.1 - yr.0) * SIZE;
    let width = left + SIZE + MARGIN_BAND + 160.0;
    let height = top + SIZE + PAD;
    let color = |c: usize| PALETTE[c % PALETTE.len()];

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        out,
        r##"<rect x="{left}" y="{top}" width="{SIZE}" height="{SIZE}" fill="none" stroke="#444"/>"##
    );
    for i in 0..p.xs.len() {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{}" fill-opacity="0.5"/>"#,
            sx(p.xs[i]),
            sy(p.ys[i]),
            color(p.class[i])
        );
    }

    let hx = densities(&p.xs, &p.class, p.classes.len(), xr);
    let hy = densities(&p.ys, &p.class, p.classes.len(), yr);
    let peak = hx
        .iter()
        .chain(&hy)
        .flatten()
        .copied()
        .fold(0.0, f64::max)
        .max(1e-12);
    let band = MARGIN_BAND - 10.0;
    for (c, (h_x, h_y)) in hx.iter().zip(&hy).enumerate() {
        let mut path = String::new();
        for (b, v) in h_x.iter().enumerate() {
            let x0 = left + b as f64 * SIZE / BINS as f64;
            let x1 = x0 + SIZE / BINS as f64;
            let y = top - 5.0 - v / peak * band;
            let _ = write!(
                path,
                "{}{x0:.2},{y:.2} L{x1:.2},{y:.2} ",
                if b == 0 { "M" } else { "L" }
            );
        }
        let _ = writeln!(
            out,
            r#"<path d="{path}" fill="none" stroke="{}"/>"#,
            color(c)
        );
        let mut path = String::new();
        for (b, v) in h_y.iter().enumerate() {
            let y0 = top + SIZE - b as f64 * SIZE / BINS as f64;
            let y1 = y0 - SIZE / BINS as f64;
            let x = left + SIZE + 5.0 + v / peak * band;
            let _ = write!(
                path,
                "{}{x:.2},{y0:.2} L{x:.2},{y1:.2} ",
                if b == 0 { "M" } else { "L" }
            );
        }
        let _ = writeln!(
            out,
            r#"<path d="{path}" fill="none" stroke="{}"/>"#,
            color(c)
        );
        let ly = top + 14.0 * c as f64;
        let lx = left + SIZE + MARGIN_BAND + 10.0;
        let _ = writeln!(
            out,
            r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            ly - 9.0,
            color(c),
            lx + 14.0,
            ly,
            escape(&p.classes[c])
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + SIZE / 2.0,
        top + SIZE + 25.0,
        escape(&p.x_name)
    );
    let _ = writeln!(
        out,
        r#"<text transform="translate({},{}) rotate(-90)" text-anchor="middle">{}</text>"#,
        left - 10.0,
        top + SIZE / 2.0,
        escape(&p.y_name)
    );
    let _ = writeln!(
        out,
        r#"<text x="{left}" y="20" font-size="13">colour: {}</text>"#,
        escape(overlay)
    );
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "scan_id,a,b,sex\ns1,0,0,Male\ns2,1,2,Female\ns3,2,1,Male\n";

    #[test]
    fn renders_every_point_and_class() {
        let svg = scatter_with_marginals(CSV, "sex", None).unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains(">Male</text>") && svg.contains(">Female</text>"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn deterministic_and_rejects_unknown_overlay() {
        assert_eq!(
            scatter_with_marginals(CSV, "sex", None).unwrap(),
            scatter_with_marginals(CSV, "sex", None).unwrap()
        );
        assert!(matches!(
            scatter_with_marginals(CSV, "race", None),
            Err(Error::Lookup(_))
        ));
    }
}
