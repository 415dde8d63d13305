use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use hierlqr::npg::TrainHistory;

use crate::CliError;

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let name = path.file_name().ok_or_else(|| CliError::Io(format!("{}: not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(contents.as_bytes()).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io(e)
    })
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 30.0, 50.0); // left, right, top, bottom
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const GAP_FLOOR: f64 = 1e-16;

/// Line plot of the optimality gap against the actor iteration, log-scale y.
/// The weighted total is drawn in black, each system in colour.
pub fn gap_plot(history: &TrainHistory) -> String {
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    let n = history.systems.iter().map(|s| s.records.len()).min().unwrap_or(0);
    if n > 0 && history.systems.iter().all(|s| !s.records.is_empty()) {
        series.push(("total".into(), (0..n).map(|i| history.total_gap(i)).collect()));
    }
    for s in &history.systems {
        series.push((s.id.clone(), s.records.iter().map(|r| r.gap).collect()));
    }
    let clamp = |g: f64| if g.is_finite() { g.max(GAP_FLOOR) } else { GAP_FLOOR };
    let logs: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().map(|&g| clamp(g).log10())).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let mut hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
    let lo = if lo.is_finite() { lo } else { -1.0 };
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let n_max = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).saturating_sub(1).max(1) as f64;
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
    let px = |i: usize| ml + pw * i as f64 / n_max;
    let py = |g: f64| mt + ph * (hi - clamp(g).log10()) / (hi - lo);

    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#).unwrap();
    let mut e = lo as i64;
    while e as f64 <= hi {
        let y = mt + ph * (hi - e as f64) / (hi - lo);
        writeln!(svg, r##"<line x1="{ml}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##, ml + pw).unwrap();
        writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"#, ml - 6.0, y + 4.0).unwrap();
        e += 1;
    }
    for k in 0..=4 {
        let i = (n_max * k as f64 / 4.0).round() as usize;
        writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{i}</text>"#, px(i), mt + ph + 18.0).unwrap();
    }
    writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">iteration n</text>"#, ml + pw / 2.0, HEIGHT - 8.0).unwrap();
    writeln!(svg, r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">gap C(K_n) - C(K*)</text>"#, mt + ph / 2.0, mt + ph / 2.0).unwrap();
    for (j, (name, values)) in series.iter().enumerate() {
        let color = if name == "total" { "black" } else { COLORS[(j - 1) % COLORS.len()] };
        let points: Vec<String> = values.iter().enumerate().map(|(i, &g)| format!("{:.2},{:.2}", px(i), py(g))).collect();
        writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" ")).unwrap();
        let ly = mt + 14.0 + 16.0 * j as f64;
        writeln!(svg, r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1.5"/>"#, ml + pw - 110.0, ml + pw - 90.0).unwrap();
        writeln!(svg, r#"<text x="{:.2}" y="{:.2}">{name}</text>"#, ml + pw - 84.0, ly + 4.0).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
