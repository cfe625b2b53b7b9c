//! Minimal bar charts written as standalone SVG documents.

use std::fmt::Write;

pub struct Bar {
    pub label: String,
    pub value: f64,
    /// Half-height of an error whisker, drawn when positive.
    pub spread: f64,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 80.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let lo = bars.iter().map(|b| b.value - b.spread).fold(0.0, f64::min);
    let hi = bars.iter().map(|b| b.value + b.spread).fold(0.0, f64::max);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let y = |v: f64| MARGIN_TOP + plot_h * (hi - v) / span;
    let slot = plot_w / bars.len().max(1) as f64;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    )
    .unwrap();
    for k in 0..=4 {
        let v = lo + span * k as f64 / 4.0;
        let (gy, right, tick_x) = (y(v), WIDTH - MARGIN_RIGHT, MARGIN_LEFT - 6.0);
        writeln!(
            s,
            r##"<line x1="{MARGIN_LEFT}" x2="{right}" y1="{gy:.1}" y2="{gy:.1}" stroke="#ddd"/><text x="{tick_x}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            gy + 4.0
        )
        .unwrap();
    }
    for (i, bar) in bars.iter().enumerate() {
        let x = MARGIN_LEFT + slot * i as f64 + slot * 0.15;
        let w = slot * 0.7;
        let (top, bottom) = (y(bar.value.max(0.0)), y(bar.value.min(0.0)));
        writeln!(
            s,
            r##"<rect x="{x:.1}" y="{top:.1}" width="{w:.1}" height="{:.1}" fill="#4c78a8"/>"##,
            (bottom - top).max(0.5)
        )
        .unwrap();
        let cx = x + w / 2.0;
        if bar.spread > 0.0 {
            writeln!(
                s,
                r##"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"##,
                y(bar.value + bar.spread),
                y(bar.value - bar.spread)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#,
            y(bar.value.max(0.0)) - 6.0 - if bar.spread > 0.0 { plot_h * bar.spread / span } else { 0.0 },
            bar.value
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{cx:.1}" y="{0:.1}" text-anchor="end" transform="rotate(-30 {cx:.1} {0:.1})">{1}</text>"#,
            HEIGHT - MARGIN_BOTTOM + 16.0,
            escape(&bar.label)
        )
        .unwrap();
    }
    let (axis, right) = (y(0.0), WIDTH - MARGIN_RIGHT);
    writeln!(s, r#"<line x1="{MARGIN_LEFT}" x2="{right}" y1="{axis:.1}" y2="{axis:.1}" stroke="black"/>"#).unwrap();
    s.push_str("</svg>\n");
    s
}
