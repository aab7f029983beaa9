//! Deterministic SVG accuracy plot: one polyline per variant, averaged over
//! seeds. All coordinates use fixed-precision formatting so equal inputs
//! produce byte-equal output.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{CliError, Result};
use crate::experiment::METRICS_HEADER;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub variant: String,
    pub attack: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub beta: f64,
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(CliError::Config(format!(
                "bad metrics header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(CliError::Config(format!(
                "metrics line {}: expected 7 fields, got {}",
                i + 2,
                parts.len()
            )));
        }
        let field = |j: usize| -> &str { parts[j] };
        let num = |j: usize| -> Result<f64> {
            field(j)
                .parse()
                .map_err(|_| CliError::Config(format!("metrics line {}: bad number", i + 2)))
        };
        rows.push(MetricsRow {
            round: field(0)
                .parse()
                .map_err(|_| CliError::Config(format!("metrics line {}: bad round", i + 2)))?,
            variant: field(1).to_string(),
            attack: field(2).to_string(),
            seed: field(3)
                .parse()
                .map_err(|_| CliError::Config(format!("metrics line {}: bad seed", i + 2)))?,
            test_accuracy: num(4)?,
            test_loss: num(5)?,
            beta: num(6)?,
        });
    }
    Ok(rows)
}

/// Per-variant mean test accuracy by round, averaged over seeds.
fn series_by_variant(rows: &[MetricsRow]) -> Result<BTreeMap<String, Vec<f64>>> {
    if rows.is_empty() {
        return Err(CliError::Config("no metrics rows to plot".into()));
    }
    // variant -> round -> (sum, count)
    let mut acc: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for row in rows {
        let e = acc
            .entry(row.variant.clone())
            .or_default()
            .entry(row.round)
            .or_insert((0.0, 0));
        e.0 += row.test_accuracy;
        e.1 += 1;
    }
    let rounds: Vec<usize> = acc.values().next().unwrap().keys().copied().collect();
    let mut out = BTreeMap::new();
    for (variant, by_round) in acc {
        let this: Vec<usize> = by_round.keys().copied().collect();
        if this != rounds {
            return Err(CliError::Config(format!(
                "variant `{variant}` covers different rounds than the others"
            )));
        }
        out.insert(
            variant,
            by_round.values().map(|(s, n)| s / *n as f64).collect(),
        );
    }
    Ok(out)
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 60.0;
const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

/// Render mean test accuracy per variant as an SVG string.
pub fn render_accuracy_plot(rows: &[MetricsRow]) -> Result<String> {
    let series = series_by_variant(rows)?;
    let n_rounds = series.values().next().unwrap().len();
    if n_rounds == 0 {
        return Err(CliError::Config("no rounds to plot".into()));
    }
    let max_round = rows.iter().map(|r| r.round).max().unwrap() as f64;
    let min_round = rows.iter().map(|r| r.round).min().unwrap() as f64;
    let x = |round: f64| {
        if max_round > min_round {
            MARGIN_L + (round - min_round) / (max_round - min_round) * (WIDTH - MARGIN_L - MARGIN_R)
        } else {
            MARGIN_L
        }
    };
    let y = |accuracy: f64| HEIGHT - MARGIN_B - accuracy * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"13\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    );
    // axes
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B),
        fmt(WIDTH - MARGIN_R),
        fmt(HEIGHT - MARGIN_B)
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B)
    ));
    // y ticks at 0, 0.25, 0.5, 0.75, 1
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_L - 8.0),
            fmt(y(v) + 4.0),
            fmt(v)
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cccccc\"/>\n",
            fmt(MARGIN_L),
            fmt(y(v)),
            fmt(WIDTH - MARGIN_R),
            fmt(y(v))
        ));
    }
    // x ticks at min and max round
    for round in [min_round, max_round] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            fmt(x(round)),
            fmt(HEIGHT - MARGIN_B + 20.0),
            round as usize
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">round</text>\n",
        fmt((MARGIN_L + WIDTH - MARGIN_R) / 2.0),
        fmt(HEIGHT - 15.0)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">mean test accuracy</text>\n",
        fmt(HEIGHT / 2.0),
        fmt(HEIGHT / 2.0)
    ));

    let rounds: Vec<usize> = {
        let mut r: Vec<usize> = rows.iter().map(|r| r.round).collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    for (idx, (variant, values)) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let points: Vec<String> = rounds
            .iter()
            .zip(values)
            .map(|(&r, &v)| format!("{},{}", fmt(x(r as f64)), fmt(y(v))))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = MARGIN_T + 18.0 * idx as f64 + 10.0;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            fmt(WIDTH - MARGIN_R + 10.0),
            fmt(ly),
            fmt(WIDTH - MARGIN_R + 34.0),
            fmt(ly)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{variant}</text>\n",
            fmt(WIDTH - MARGIN_R + 40.0),
            fmt(ly + 4.0)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Read one or more metrics CSVs and write the combined plot.
pub fn plot_files(inputs: &[std::path::PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(CliError::Config("no metrics files given".into()));
    }
    let mut rows = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        rows.extend(parse_metrics(&text)?);
    }
    let svg = render_accuracy_plot(&rows)?;
    std::fs::write(out, svg).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_csv(variant: &str, seed: u64, shift: f64) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for round in 1..=4 {
            s.push_str(&format!(
                "{round},{variant},pgd,{seed},{:.6},{:.6},0.500000\n",
                0.1 * round as f64 + shift,
                2.0 - 0.1 * round as f64
            ));
        }
        s
    }

    #[test]
    fn parse_round_trips_fields() {
        let rows = parse_metrics(&sample_csv("FedAvg", 3, 0.0)).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[2].round, 3);
        assert_eq!(rows[2].seed, 3);
        assert!((rows[2].test_accuracy - 0.3).abs() < 1e-12);
        assert!(parse_metrics("bogus\n1,2,3").is_err());
    }

    #[test]
    fn render_is_deterministic_and_averages_seeds() {
        let mut rows = parse_metrics(&sample_csv("FedAvg", 0, 0.0)).unwrap();
        rows.extend(parse_metrics(&sample_csv("FedAvg", 1, 0.2)).unwrap());
        rows.extend(parse_metrics(&sample_csv("Retrain-All", 0, 0.3)).unwrap());
        let a = render_accuracy_plot(&rows).unwrap();
        let b = render_accuracy_plot(&rows).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.contains("FedAvg"));
        assert!(a.contains("Retrain-All"));
        assert_eq!(a.matches("<polyline").count(), 2);
    }

    #[test]
    fn mismatched_rounds_rejected() {
        let mut rows = parse_metrics(&sample_csv("FedAvg", 0, 0.0)).unwrap();
        let mut extra = parse_metrics(&sample_csv("Retrain-All", 0, 0.0)).unwrap();
        extra.pop();
        rows.extend(extra);
        assert!(render_accuracy_plot(&rows).is_err());
        assert!(render_accuracy_plot(&[]).is_err());
    }
}
