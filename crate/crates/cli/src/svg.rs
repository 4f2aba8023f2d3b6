//! Static SVG rendering of accuracy-versus-tolerance curves.

use std::fmt::Write;

/// Renders one or more named curves of `(tolerance, accuracy)` points.
pub fn accuracy_curve_svg(curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 440.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 30.0, 60.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let x_max = curves
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .fold(0.0f64, f64::max)
        .max(1e-9);

    let px = |t: f64| ml + pw * (t / x_max);
    let py = |a: f64| mt + ph * (1.0 - a);

    let mut s = String::new();
    let _ = write!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"##
    );
    let _ = write!(
        s,
        r##"<rect width="{w}" height="{h}" fill="white"/><g font-family="monospace" font-size="12">"##
    );

    // Axes and grid.
    for i in 0..=5 {
        let a = i as f64 / 5.0;
        let y = py(a);
        let _ = write!(
            s,
            r##"<line x1="{ml}" y1="{y}" x2="{:.1}" y2="{y}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{:.1}</text>"##,
            ml + pw,
            ml - 8.0,
            y + 4.0,
            a
        );
    }
    for i in 0..=5 {
        let t = x_max * i as f64 / 5.0;
        let x = px(t);
        let _ = write!(
            s,
            r##"<line x1="{x}" y1="{mt}" x2="{x}" y2="{:.1}" stroke="#ddd"/><text x="{x}" y="{:.1}" text-anchor="middle">{t:.2}</text>"##,
            mt + ph,
            mt + ph + 18.0,
        );
    }
    let _ = write!(
        s,
        r##"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{:.1}" stroke="black"/><line x1="{ml}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"##,
        mt + ph,
        mt + ph,
        ml + pw,
        mt + ph
    );
    let _ = write!(
        s,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">error tolerance</text>"##,
        ml + pw / 2.0,
        h - 14.0
    );
    let _ = write!(
        s,
        r##"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">correspondence accuracy</text>"##,
        mt + ph / 2.0,
        mt + ph / 2.0
    );

    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    for (ci, (name, pts)) in curves.iter().enumerate() {
        let color = colors[ci % colors.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(t, a)| format!("{:.2},{:.2}", px(t), py(a)))
            .collect();
        let _ = write!(
            s,
            r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"##,
            path.join(" ")
        );
        for &(t, a) in pts {
            let _ = write!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"##,
                px(t),
                py(a)
            );
        }
        let _ = write!(
            s,
            r##"<text x="{:.1}" y="{:.1}" fill="{color}">{name}</text>"##,
            ml + 10.0,
            mt + 16.0 + 16.0 * ci as f64
        );
    }
    s.push_str("</g></svg>");
    s
}
