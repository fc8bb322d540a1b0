//! Log-scale SVG line plots rendered from the metrics CSV text alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

type Series = Vec<(f64, f64)>;

/// Parses `method,iter,...` rows (skipping `#` lines) into per-method
/// `(iter, value)` series for `column`, in first-appearance order.
pub fn parse_series(csv: &str, column: &str) -> Result<Vec<(String, Series)>, String> {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or("empty metrics CSV")?.split(',').collect();
    let find = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("CSV has no `{name}` column"));
    let (mcol, icol, vcol) = (find("method")?, find("iter")?, find(column)?);
    let mut order: Vec<String> = Vec::new();
    let mut series: BTreeMap<String, Series> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(format!("CSV row {} has {} cells, expected {}", n + 1, cells.len(), header.len()));
        }
        let parse = |c: usize| cells[c].parse::<f64>().map_err(|e| format!("CSV row {}: {e}", n + 1));
        let method = cells[mcol].to_string();
        if !series.contains_key(&method) {
            order.push(method.clone());
        }
        series.entry(method).or_default().push((parse(icol)?, parse(vcol)?));
    }
    Ok(order.into_iter().map(|m| {
        let s = series.remove(&m).unwrap_or_default();
        (m, s)
    }).collect())
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders `column` against iteration on a log₁₀ y axis. Non-positive and
/// non-finite values break the line.
pub fn render_log_plot(csv: &str, column: &str) -> Result<String, String> {
    let series = parse_series(csv, column)?;
    let usable = |v: f64| v.is_finite() && v > 0.0;
    let pts = series.iter().flat_map(|(_, s)| s.iter()).filter(|p| usable(p.1));
    let (mut x_max, mut lo, mut hi) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x_max = x_max.max(x);
        lo = lo.min(y.log10().floor());
        hi = hi.max(y.log10().ceil());
    }
    if !lo.is_finite() {
        (lo, hi) = (-1.0, 0.0);
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - 1.0) / (x_max - 1.0).max(1.0) * pw;
    let sy = |y: f64| TOP + (hi - y.log10()) / (hi - lo) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for e in (lo as i64)..=(hi as i64) {
        let y = sy(10f64.powi(e as i32));
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for i in 0..=4 {
        let x = 1.0 + (x_max - 1.0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(x),
            TOP + ph + 18.0,
            x.round()
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">iteration</text><text x="{LEFT}" y="{:.2}">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        TOP - 10.0,
        esc(column)
    );
    for (idx, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[idx % COLORS.len()];
        let mut run: Vec<String> = Vec::new();
        let flush = |run: &mut Vec<String>, s: &mut String| {
            if run.len() > 1 {
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, run.join(" "));
            }
            run.clear();
        };
        for &(x, y) in pts {
            if usable(y) {
                run.push(format!("{:.2},{:.2}", sx(x), sy(y)));
            } else {
                flush(&mut run, &mut s);
            }
        }
        flush(&mut run, &mut s);
        let ly = TOP + 14.0 + 18.0 * idx as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{ly:.2}">{}</text>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0,
            lx + 26.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
