use std::fmt::Write as _;

use equidiff_core::tensorcore::Tensor;

const SIZE: f64 = 400.0;
const PAD: f64 = 20.0;

/// Scatter plot of every 2-vector in `points` (`[..., 2]`), scaled to fit.
pub fn scatter_svg(points: &Tensor, title: &str) -> String {
    let xy: Vec<(f64, f64)> = points.data().chunks_exact(2).map(|c| (c[0], c[1])).collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &xy {
        lo = lo.min(x).min(y);
        hi = hi.max(x).max(y);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let scale = (SIZE - 2.0 * PAD) / span;
    let map = |v: f64| PAD + (v - lo) * scale;

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{PAD}" y="{}" font-size="12">{title}</text>"#, PAD - 6.0).unwrap();
    for (x, y) in xy {
        // SVG y grows downwards.
        writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="steelblue" fill-opacity="0.6"/>"#,
            map(x),
            SIZE - map(y)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
