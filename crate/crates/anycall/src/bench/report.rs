//! Render bench CSV output as a summary table with break-even markers,
//! optionally with a static SVG line chart.

use std::fmt::Write as _;

use thiserror::Error;

use super::{BenchRow, CSV_HEADER};
use crate::costmodel::{breakeven, BreakEven, CostParams};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("empty CSV input")]
    Empty,
    #[error("line {0}: malformed CSV row")]
    Malformed(usize),
    #[error("unexpected CSV header `{0}` (expected `{CSV_HEADER}`)")]
    BadHeader(String),
}

/// Parse CSV produced by the bench harness.
pub fn parse_csv(text: &str) -> Result<Vec<BenchRow>, ReportError> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(ReportError::Empty);
    };
    if header.trim() != CSV_HEADER {
        return Err(ReportError::BadHeader(header.trim().to_string()));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(ReportError::Malformed(idx + 1));
        }
        let parse_u = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| ReportError::Malformed(idx + 1))
        };
        let parse_f = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| ReportError::Malformed(idx + 1))
        };
        rows.push(BenchRow {
            k: parse_u(fields[0])?,
            modeled_us_traditional: parse_f(fields[1])?,
            modeled_us_anycall: parse_f(fields[2])?,
            transitions_traditional: parse_u(fields[3])?,
            transitions_anycall: parse_u(fields[4])?,
            kcalls_anycall: parse_u(fields[5])?,
        });
    }
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(rows)
}

/// Plain-text summary: one row per point plus break-even lines when the
/// preset admits one.
pub fn summarize(rows: &[BenchRow], params: Option<&CostParams>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8}  {:>16}  {:>16}  {:>12}  {:>12}  {:>10}",
        "k", "traditional(us)", "aggregated(us)", "trans(trad)", "trans(aggr)", "kcalls"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>8}  {:>16.3}  {:>16.3}  {:>12}  {:>12}  {:>10}",
            r.k,
            r.modeled_us_traditional,
            r.modeled_us_anycall,
            r.transitions_traditional,
            r.transitions_anycall,
            r.kcalls_anycall
        );
    }
    if rows.len() > 1 {
        if let Some(cross) = rows.windows(2).find(|w| {
            w[0].modeled_us_anycall >= w[0].modeled_us_traditional
                && w[1].modeled_us_anycall < w[1].modeled_us_traditional
        }) {
            let _ = writeln!(
                out,
                "modeled curves cross between k={} and k={}",
                cross[0].k, cross[1].k
            );
        }
    }
    if let Some(params) = params {
        match breakeven(params) {
            BreakEven::Calls(k) => {
                let _ = writeln!(
                    out,
                    "break-even (preset `{}`): {k} calls amortize the {:.0} us load cost",
                    params.preset, params.c_load_us
                );
            }
            BreakEven::Never => {
                let _ = writeln!(
                    out,
                    "break-even (preset `{}`): never (no per-call savings)",
                    params.preset
                );
            }
        }
    }
    out
}

/// Minimal static SVG line chart of the two modeled-time curves.
pub fn render_svg(rows: &[BenchRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const MARGIN: f64 = 48.0;
    let max_k = rows.iter().map(|r| r.k).max().unwrap_or(1).max(1) as f64;
    let max_t = rows
        .iter()
        .map(|r| r.modeled_us_traditional.max(r.modeled_us_anycall))
        .fold(1.0_f64, f64::max);
    let x = |k: u64| MARGIN + (k as f64 / max_k) * (W - 2.0 * MARGIN);
    let y = |t: f64| H - MARGIN - (t / max_t) * (H - 2.0 * MARGIN);
    let polyline = |points: &[(f64, f64)], color: &str| {
        let coords: Vec<String> = points
            .iter()
            .map(|(a, b)| format!("{a:.1},{b:.1}"))
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            coords.join(" ")
        )
    };
    let trad: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (x(r.k), y(r.modeled_us_traditional)))
        .collect();
    let aggr: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (x(r.k), y(r.modeled_us_anycall)))
        .collect();
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">"
    );
    let _ = write!(
        svg,
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\
         <line x1=\"{m}\" y1=\"{yb}\" x2=\"{xe}\" y2=\"{yb}\" stroke=\"black\"/>\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{yb}\" stroke=\"black\"/>",
        m = MARGIN,
        yb = H - MARGIN,
        xe = W - MARGIN
    );
    let _ = write!(svg, "{}", polyline(&trad, "#cc3333"));
    let _ = write!(svg, "{}", polyline(&aggr, "#3366cc"));
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"12\">\
         red: traditional, blue: aggregated (modeled us over k)</text></svg>",
        MARGIN
    );
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::rows_to_csv;
    use crate::costmodel::preset;

    fn sample_rows() -> Vec<BenchRow> {
        vec![
            BenchRow {
                k: 1,
                modeled_us_traditional: 0.9,
                modeled_us_anycall: 22340.9,
                transitions_traditional: 2,
                transitions_anycall: 2,
                kcalls_anycall: 1,
            },
            BenchRow {
                k: 300,
                modeled_us_traditional: 263.6,
                modeled_us_anycall: 22344.0,
                transitions_traditional: 600,
                transitions_anycall: 2,
                kcalls_anycall: 300,
            },
        ]
    }

    #[test]
    fn csv_roundtrip() {
        let rows = sample_rows();
        let parsed = parse_csv(&rows_to_csv(&rows)).unwrap();
        assert_eq!(parsed.len(), rows.len());
        assert_eq!(parsed[1].transitions_traditional, 600);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert_eq!(parse_csv(""), Err(ReportError::Empty));
        assert_eq!(parse_csv(CSV_HEADER), Err(ReportError::Empty));
        assert!(matches!(
            parse_csv("nonsense"),
            Err(ReportError::BadHeader(_))
        ));
        let text = format!("{CSV_HEADER}\n1,2,3\n");
        assert_eq!(parse_csv(&text), Err(ReportError::Malformed(2)));
    }

    #[test]
    fn summary_names_breakeven() {
        let params = preset("paper-kpti-getpid").unwrap();
        let text = summarize(&sample_rows(), Some(&params));
        assert!(text.contains("25817"), "{text}");
        assert!(text.contains("break-even"));
    }

    #[test]
    fn single_row_summary_has_no_breakeven_line() {
        let rows = vec![sample_rows().remove(0)];
        let text = summarize(&rows, None);
        assert!(!text.contains("break-even"));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn svg_contains_both_curves() {
        let svg = render_svg(&sample_rows());
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
