//! Standalone SVG line charts.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::sweep::SweepRun;
use super::train::EpochStats;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{:.3}", v)
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

/// A line chart with labeled axes and a legend; one `<polyline>` per
/// finite run of points in each series. With `log_y`, non-positive values
/// are dropped and the axis shows `log10`.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    log_y: bool,
) -> String {
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let usable = |&(x, y): &(f64, f64)| x.is_finite() && y.is_finite() && (!log_y || y > 0.0);
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| {
            s.points
                .iter()
                .copied()
                .filter(usable)
                .map(|(x, y)| (x, tf(y)))
        })
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = all.iter().fold(
        (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        ),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let ylab = if log_y {
            format!("1e{}", tick(yv))
        } else {
            tick(yv)
        };
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(xv),
            TOP + ph + 18.0,
            tick(xv)
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            py(yv) + 4.0,
            ylab
        )
        .unwrap();
        writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            LEFT + pw,
            py(yv),
            py(yv)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text class="x-label" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    )
    .unwrap();
    let y_text = if log_y {
        format!("{y_label} (log10)")
    } else {
        y_label.to_string()
    };
    writeln!(
        s,
        r#"<text class="y-label" x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&y_text)
    )
    .unwrap();
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        writeln!(
            s,
            r#"<g class="series" data-label="{}">"#,
            escape(&ser.label)
        )
        .unwrap();
        let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for p in &ser.points {
            if usable(p) {
                segments.last_mut().unwrap().push((px(p.0), py(tf(p.1))));
            } else if !segments.last().unwrap().is_empty() {
                segments.push(Vec::new());
            }
        }
        for seg in segments.iter().filter(|s| !s.is_empty()) {
            let pts: Vec<String> = seg.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            )
            .unwrap();
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{:.1}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            WIDTH - RIGHT + 12.0,
            WIDTH - RIGHT + 32.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text class="legend" x="{:.1}" y="{:.1}">{}</text>"#,
            WIDTH - RIGHT + 38.0,
            ly + 4.0,
            escape(&ser.label)
        )
        .unwrap();
        writeln!(s, "</g>").unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn write(dir: &Path, name: &str, svg: String) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), svg)?;
    Ok(())
}

fn curve(stats: &[EpochStats], f: impl Fn(&EpochStats) -> f64) -> Vec<(f64, f64)> {
    stats.iter().map(|s| (s.epoch as f64, f(s))).collect()
}

/// `reward.svg`, `loss.svg`, `kl.svg`, and `step_ratio.svg` for one run.
pub fn emit_plots(stats: &[EpochStats], dir: &Path) -> Result<()> {
    if stats.is_empty() {
        return Err(Error::InvalidArgument("no epochs to plot".into()));
    }
    let one = |label: &str, f: &dyn Fn(&EpochStats) -> f64| {
        vec![Series {
            label: label.into(),
            points: curve(stats, f),
        }]
    };
    write(
        dir,
        "reward.svg",
        line_chart(
            "Mean reward per epoch",
            "epoch",
            "reward",
            &one("reward", &|s| s.reward_mean),
            false,
        ),
    )?;
    write(
        dir,
        "loss.svg",
        line_chart(
            "Training loss",
            "epoch",
            "loss",
            &one("loss", &|s| s.loss),
            true,
        ),
    )?;
    write(
        dir,
        "kl.svg",
        line_chart(
            "KL estimate to reference",
            "epoch",
            "KL (nats)",
            &one("kl", &|s| s.kl_estimate),
            false,
        ),
    )?;
    write(
        dir,
        "step_ratio.svg",
        line_chart(
            "Max per-step |log ratio|",
            "epoch",
            "|log ratio|",
            &one("max |r̂_t|", &|s| s.max_abs_step_ratio),
            false,
        ),
    )
}

/// `sweep_reward.svg` and `sweep_kl.svg`, one series per swept value.
pub fn emit_sweep_plots(axis: &str, runs: &[SweepRun], dir: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no sweep runs to plot".into()));
    }
    let series = |f: &dyn Fn(&EpochStats) -> f64| -> Vec<Series> {
        runs.iter()
            .map(|r| Series {
                label: format!("{axis} = {}", r.value),
                points: r.stats.as_deref().map_or_else(Vec::new, |s| curve(s, f)),
            })
            .collect()
    };
    write(
        dir,
        "sweep_reward.svg",
        line_chart(
            &format!("Reward across {axis}"),
            "epoch",
            "reward",
            &series(&|s| s.reward_mean),
            false,
        ),
    )?;
    write(
        dir,
        "sweep_kl.svg",
        line_chart(
            &format!("KL estimate across {axis}"),
            "epoch",
            "KL (nats)",
            &series(&|s| s.kl_estimate),
            false,
        ),
    )
}
