use std::fmt::Write as _;
use std::io::Write;

use failrules_core::detector::SignalRecord;
use failrules_core::ingest::{format_instant, FailureAnnotation};
use failrules_core::{Instant, Result};

const WIDTH: f64 = 1000.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 40.0;

pub fn write_series_csv<W: Write>(records: &[SignalRecord], mut w: W) -> Result<()> {
    writeln!(w, "time,error,y,z")?;
    for r in records {
        writeln!(w, "{},{},{},{}", format_instant(&r.time), r.error, r.y, r.z)?;
    }
    w.flush()?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Failure probability over time with annotated failures shaded and the
/// failure threshold drawn as a dashed line. Records must be non-empty.
pub fn render_svg(
    records: &[SignalRecord],
    annotations: &[FailureAnnotation],
    tau_fail: f64,
) -> String {
    let t0 = records[0].time;
    let t1 = records[records.len() - 1].time;
    let span = (t1 - t0).num_milliseconds().max(1) as f64;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x =
        |t: Instant| MARGIN + plot_w * ((t - t0).num_milliseconds() as f64 / span).clamp(0.0, 1.0);
    let y = |z: f64| MARGIN + plot_h * (1.0 - z.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    for a in annotations.iter().filter(|a| a.end >= t0 && a.start <= t1) {
        let (xa, xb) = (x(a.start), x(a.end));
        let _ = writeln!(
            s,
            r##"<rect class="failure" x="{xa:.2}" y="{MARGIN}" width="{:.2}" height="{plot_h}" fill="#f4a6a6" fill-opacity="0.5"><title>{}</title></rect>"##,
            (xb - xa).max(1.0),
            escape(&a.label)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let yt = y(tau_fail);
    let _ = writeln!(
        s,
        r#"<line class="threshold" x1="{MARGIN}" y1="{yt:.2}" x2="{:.2}" y2="{yt:.2}" stroke="red" stroke-dasharray="6 4"/>"#,
        MARGIN + plot_w
    );
    let points: Vec<String> = records
        .iter()
        .map(|r| format!("{:.2},{:.2}", x(r.time), y(r.z)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline class="signal" fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
        points.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{:.2}" font-size="12">{}</text>"#,
        HEIGHT - 12.0,
        format_instant(&t0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{}</text>"#,
        WIDTH - MARGIN,
        HEIGHT - 12.0,
        format_instant(&t1)
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{:.2}" font-size="12">{tau_fail}</text>"#,
        yt + 4.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use failrules_core::ingest::parse_instant;
    use failrules_core::OperatingState;

    fn records() -> Vec<SignalRecord> {
        let t0 = parse_instant("2022-06-01 00:00:00").unwrap();
        (0..10)
            .map(|i| {
                let t = t0 + chrono::Duration::minutes(5 * i);
                SignalRecord {
                    time: t,
                    window_start: t,
                    error: 0.1,
                    y: 0,
                    z: 0.1 * i as f64,
                    state: OperatingState::Normal,
                }
            })
            .collect()
    }

    #[test]
    fn one_region_and_one_threshold() {
        let t = |s| parse_instant(s).unwrap();
        let a = FailureAnnotation::new(
            "leak",
            t("2022-06-01 00:10:00"),
            t("2022-06-01 00:30:00"),
            t("2022-06-01 00:20:00"),
        )
        .unwrap();
        let svg = render_svg(&records(), &[a], 0.5);
        assert_eq!(svg.matches(r#"class="failure""#).count(), 1);
        assert_eq!(svg.matches(r#"class="threshold""#).count(), 1);
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn series_columns() {
        let mut buf = Vec::new();
        write_series_csv(&records(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,error,y,z\n"));
        assert_eq!(text.lines().count(), 11);
    }
}
