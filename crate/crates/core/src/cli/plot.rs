//! Static SVG line charts of metrics, one chart per metric family.

use std::fmt::Write;

use crate::evalkit::MetricsRecord;

type Getter = fn(&MetricsRecord) -> Option<f64>;

/// Metric families and their series.
pub const FAMILIES: [(&str, &[(&str, Getter)]); 6] = [
    (
        "losses",
        &[
            ("attack_loss", |r| r.attack_loss),
            ("defense_loss", |r| r.defense_loss),
            ("benign_loss", |r| r.benign_loss),
        ],
    ),
    (
        "backdoor",
        &[
            ("trigger_success_rate", |r| r.trigger_success_rate),
            ("compliance_rate", |r| r.compliance_rate),
        ],
    ),
    (
        "accuracy",
        &[
            ("forget_accuracy", |r| r.forget_accuracy),
            ("retain_accuracy", |r| r.retain_accuracy),
        ],
    ),
    (
        "perplexity",
        &[("forget_ppl", |r| r.forget_ppl), ("retain_ppl", |r| r.retain_ppl)],
    ),
    ("gap", &[("gap_closed", |r| r.gap_closed)]),
    ("stability", &[("nan_skips", |r| Some(r.nan_skips as f64))]),
];

const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders one family; `None` when no series has any point.
pub fn render_family(name: &str, series: &[(&str, Getter)], records: &[MetricsRecord], hash: &str) -> Option<String> {
    let data: Vec<(&str, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(label, get)| {
            let pts = records
                .iter()
                .filter_map(|r| get(r).filter(|v| v.is_finite()).map(|v| (r.step as f64, v)))
                .collect();
            (*label, pts)
        })
        .filter(|(_, p): &(&str, Vec<(f64, f64)>)| !p.is_empty())
        .collect();
    if data.is_empty() {
        return None;
    }
    let all = data.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, "<!-- config_hash {} -->", xml_escape(hash));
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        W / 2.0,
        xml_escape(name)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    for (v, y) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.4}</text>"#,
            PAD - 6.0
        );
    }
    for (v, x) in [(x0, PAD), (x1, W - PAD)] {
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v}</text>"#,
            H - PAD + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">step</text>"#,
        W / 2.0,
        H - 16.0
    );
    for (i, (label, pts)) in data.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(s, r#"<g class="series" data-name="{label}">"#);
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let _ = writeln!(s, "</g>");
        let ly = PAD + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{color}">{label}</text>"#,
            W - PAD - 150.0
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Every non-empty family as `(file stem, svg)`.
pub fn render_all(records: &[MetricsRecord], hash: &str) -> Vec<(String, String)> {
    FAMILIES
        .iter()
        .filter_map(|(name, series)| render_family(name, series, records, hash).map(|svg| (name.to_string(), svg)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_circle_per_point() {
        let recs = vec![
            MetricsRecord {
                step: 1,
                defense_loss: Some(2.0),
                attack_loss: Some(1.0),
                ..MetricsRecord::default()
            },
            MetricsRecord {
                step: 2,
                defense_loss: Some(1.0),
                attack_loss: Some(3.0),
                ..MetricsRecord::default()
            },
        ];
        let charts = render_all(&recs, "h");
        let names: Vec<_> = charts.iter().map(|c| c.0.as_str()).collect();
        assert_eq!(names, ["losses", "stability"]);
        let losses = &charts[0].1;
        assert_eq!(losses.matches("<circle").count(), 4);
        for series in losses.split(r#"<g class="series""#).skip(1) {
            assert_eq!(series.matches("<circle").count(), 2);
        }
    }
}
