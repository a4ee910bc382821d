//! CSV rows and trace lines.
//!
//! Floats use Rust's shortest round-trip formatting, so identical runs give
//! byte-identical files. Non-finite or missing values are spelled out:
//! `unreached` for a goal never reached, `inf` for a distance with no agents,
//! `none` for an average with no recorded windows, `failed` for every metric
//! of a run that aborted.

use std::fmt::Write as _;

use crate::engine::{FrameRecord, RunMetrics, SimConfig, SweepRow};

pub const CSV_HEADER: &str = "epsilon,eta,tau,t_goal,n_collide,d_min,l_avg,inflation_events";

pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v != 0.0 && !(1e-5..1e16).contains(&v.abs()) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn config_columns(config: &SimConfig) -> String {
    format!(
        "{},{},{}",
        format_float(config.epsilon),
        format_float(config.eta),
        config.tau_frames
    )
}

pub fn metrics_row(config: &SimConfig, metrics: &RunMetrics) -> String {
    format!(
        "{},{},{},{},{},{}",
        config_columns(config),
        metrics.t_goal.map_or("unreached".into(), format_float),
        metrics.n_collide,
        format_float(metrics.d_min),
        metrics.l_avg.map_or("none".into(), format_float),
        metrics.inflation_events
    )
}

pub fn failed_row(config: &SimConfig) -> String {
    format!(
        "{},failed,failed,failed,failed,failed",
        config_columns(config)
    )
}

/// Header plus one line per row, each terminated by `\n`.
pub fn metrics_csv<'a, I>(rows: I) -> String
where
    I: IntoIterator<Item = (&'a SimConfig, Result<&'a RunMetrics, &'a str>)>,
{
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").expect("writing to a String");
    for (config, outcome) in rows {
        let line = match outcome {
            Ok(m) => metrics_row(config, m),
            Err(_) => failed_row(config),
        };
        writeln!(out, "{line}").expect("writing to a String");
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    metrics_csv(
        rows.iter()
            .map(|r| (&r.config, r.outcome.as_ref().map_err(String::as_str))),
    )
}

pub fn trace_line(record: &FrameRecord) -> String {
    serde_json::to_string(record).expect("frame records serialize")
}
