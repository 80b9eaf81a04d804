use std::fmt::Write as _;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const MARGIN: f64 = 56.0;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: Option<String>,
    pub width: f64,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            color: None,
            width: 1.5,
        }
    }

    pub fn outline(points: Vec<(f64, f64)>) -> Self {
        Self {
            name: String::new(),
            points,
            color: Some("#c8c8c8".into()),
            width: 1.0,
        }
    }
}

/// One set of axes with line series.
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Same scale on both axes (map views).
    pub equal_aspect: bool,
    pub series: Vec<Series>,
}

impl Panel {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            equal_aspect: false,
            series: Vec::new(),
        }
    }

    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let mut it = self.series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
        let first = it.next()?;
        let mut b = (first.0, first.0, first.1, first.1);
        for p in it {
            b = (b.0.min(p.0), b.1.max(p.0), b.2.min(p.1), b.3.max(p.1));
        }
        if b.1 - b.0 < 1e-9 {
            b = (b.0 - 1.0, b.1 + 1.0, b.2, b.3);
        }
        if b.3 - b.2 < 1e-9 {
            b = (b.0, b.1, b.2 - 1.0, b.3 + 1.0);
        }
        Some(b)
    }

    fn render(&self, out: &mut String, ox: f64, oy: f64, w: f64, h: f64) {
        let Some((mut x0, mut x1, mut y0, mut y1)) = self.bounds() else {
            return;
        };
        let (pw, ph) = (w - 2.0 * MARGIN, h - 2.0 * MARGIN);
        if self.equal_aspect {
            let scale = ((x1 - x0) / pw).max((y1 - y0) / ph);
            let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
            x0 = cx - 0.5 * scale * pw;
            x1 = cx + 0.5 * scale * pw;
            y0 = cy - 0.5 * scale * ph;
            y1 = cy + 0.5 * scale * ph;
        }
        let sx = |x: f64| ox + MARGIN + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| oy + MARGIN + (1.0 - (y - y0) / (y1 - y0)) * ph;
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#444"/>"##,
            ox + MARGIN,
            oy + MARGIN
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#,
            ox + w / 2.0,
            oy + MARGIN - 18.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
            ox + w / 2.0,
            oy + h - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
            ox + 16.0,
            oy + h / 2.0,
            ox + 16.0,
            oy + h / 2.0,
            escape(&self.y_label)
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
                sx(xv),
                oy + h - MARGIN + 14.0,
                tick(xv)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
                ox + MARGIN - 4.0,
                sy(yv) + 3.0,
                tick(yv)
            );
        }
        let mut legend = 0;
        let mut color_idx = 0;
        for s in &self.series {
            let color = match &s.color {
                Some(c) => c.clone(),
                None => {
                    let c = PALETTE[color_idx % PALETTE.len()].to_string();
                    color_idx += 1;
                    c
                }
            };
            let mut pts = String::new();
            for p in s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
                let _ = write!(pts, "{:.2},{:.2} ", sx(p.0), sy(p.1));
            }
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="{}" points="{}"/>"#,
                s.width,
                pts.trim_end()
            );
            if !s.name.is_empty() {
                let ly = oy + MARGIN + 14.0 + 14.0 * legend as f64;
                let lx = ox + w - MARGIN - 120.0;
                let _ = writeln!(
                    out,
                    r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/>"#,
                    lx,
                    ly - 4.0,
                    lx + 16.0,
                    ly - 4.0
                );
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#,
                    lx + 20.0,
                    ly,
                    escape(&s.name)
                );
                legend += 1;
            }
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Panels stacked vertically in one self-contained document.
pub fn document(panels: &[Panel], width: f64, panel_height: f64) -> String {
    let height = panel_height * panels.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        p.render(&mut out, 0.0, i as f64 * panel_height, width, panel_height);
    }
    out.push_str("</svg>\n");
    out
}
