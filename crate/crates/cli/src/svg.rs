//! Minimal static SVG line charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Chart {
    title: String,
    x_label: String,
    y_label: String,
    log_x: bool,
    series: Vec<(String, Vec<(f64, f64)>)>,
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Chart {
        Chart {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x: false,
            series: Vec::new(),
        }
    }

    pub fn log_x(mut self) -> Chart {
        self.log_x = true;
        self
    }

    pub fn series(mut self, name: &str, points: Vec<(f64, f64)>) -> Chart {
        self.series.push((name.into(), points));
        self
    }

    fn tx(&self, x: f64) -> f64 {
        if self.log_x {
            x.log10()
        } else {
            x
        }
    }

    /// `<svg>` element of size `WIDTH × HEIGHT`.
    pub fn render(&self) -> String {
        let pts = || {
            self.series
                .iter()
                .flat_map(|(_, p)| p.iter())
                .map(|&(x, y)| (self.tx(x), y))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
        };
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !(x0 < x1) {
            (x0, x1) = (x0.min(0.0) - 0.5, x1.max(0.0) + 0.5);
        }
        if !(y0 < y1) {
            (y0, y1) = (y0.min(0.0) - 0.5, y1.max(0.0) + 0.5);
        }
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

        let mut s = String::new();
        let _ = write!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = write!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = write!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(&self.title));
        let _ = write!(
            s,
            r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
            m = MARGIN,
            b = HEIGHT - MARGIN,
            r = WIDTH - MARGIN
        );
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let xl = if self.log_x { 10f64.powf(fx) } else { fx };
            let _ = write!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(fx), HEIGHT - MARGIN + 16.0, tick(xl));
            let _ = write!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, MARGIN - 6.0, sy(fy) + 4.0, tick(fy));
        }
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(&self.x_label));
        let _ = write!(
            s,
            r#"<text x="14" y="{y}" text-anchor="middle" transform="rotate(-90 14 {y})">{}</text>"#,
            escape(&self.y_label),
            y = HEIGHT / 2.0
        );
        for (i, (name, points)) in self.series.iter().enumerate() {
            let colour = COLOURS[i % COLOURS.len()];
            let path: Vec<String> = points
                .iter()
                .map(|&(x, y)| (self.tx(x), y))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = write!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#, path.join(" "));
            let ly = MARGIN + 16.0 * i as f64;
            let _ = write!(
                s,
                r#"<line x1="{a}" y1="{ly}" x2="{b}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{c}" y="{t}">{}</text>"#,
                escape(name),
                a = WIDTH - MARGIN - 150.0,
                b = WIDTH - MARGIN - 130.0,
                c = WIDTH - MARGIN - 124.0,
                t = ly + 4.0
            );
        }
        s.push_str("</svg>");
        s
    }
}

/// Charts stacked vertically in one document.
pub fn stack(charts: &[String]) -> String {
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{}">"#,
        HEIGHT * charts.len() as f64
    );
    for (i, c) in charts.iter().enumerate() {
        let _ = write!(s, r#"<g transform="translate(0 {})">{c}</g>"#, HEIGHT * i as f64);
    }
    s.push_str("</svg>\n");
    s
}

/// Step points of the empirical CDF, thinned to at most 500 steps.
pub fn ecdf(sample: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = sample.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let stride = n.div_ceil(500).max(1);
    let mut out = Vec::new();
    let mut prev = 0.0;
    for i in (0..n).step_by(stride).chain(std::iter::once(n.saturating_sub(1))) {
        if n == 0 {
            break;
        }
        let level = (i + 1) as f64 / n as f64;
        out.push((v[i], prev));
        out.push((v[i], level));
        prev = level;
    }
    out
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{:.2}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ecdf_is_monotone_and_ends_at_one() {
        let e = ecdf(&[3.0, 1.0, 2.0, f64::INFINITY]);
        assert!(e.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
        assert_eq!(e.last().unwrap().1, 1.0);
    }

    #[test]
    fn renders_series() {
        let svg = Chart::new("t", "x", "y").series("a<b", vec![(0.0, 0.0), (1.0, 1.0)]).render();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>"));
        assert!(svg.contains("polyline") && svg.contains("a&lt;b"));
    }
}
