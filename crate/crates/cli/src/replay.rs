//! Stream a recorded `step,kl,reward[,entropy]` table through the asymmetric
//! and entropy-aware controllers.

use std::io::Read;

use safe_core::control::{ControllerConfig, EntropyAwareController};
use safe_core::divergence::{asym_controller_step, AsymConfig};
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayRow {
    pub step: i64,
    pub kl: f64,
    pub reward: f64,
    pub entropy: Option<f64>,
}

/// A unit-step sample; `observed` is false for interpolated steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayPoint {
    pub step: i64,
    pub kl: f64,
    pub reward: f64,
    pub entropy: Option<f64>,
    pub observed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplayOutput {
    pub step: i64,
    pub observed: bool,
    pub kl: f64,
    pub reward: f64,
    pub entropy: f64,
    pub l_asym: f64,
    pub l_mom: f64,
    pub l_akl: f64,
    pub tau_t: f64,
    pub kl_short: f64,
    pub gate: f64,
    pub gated_penalty: f64,
}

fn csv_err(line: u64, msg: impl Into<String>) -> CliError {
    CliError::Csv { line, msg: msg.into() }
}

/// Parse the replay table. A header row is required; the entropy column is optional.
pub fn parse_replay_csv<R: Read>(input: R) -> CliResult<Vec<ReplayRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let with_entropy = match names.as_slice() {
        ["step", "kl", "reward"] => false,
        ["step", "kl", "reward", "entropy"] => true,
        _ => {
            return Err(csv_err(
                1,
                format!("expected header 'step,kl,reward[,entropy]', found '{}'", names.join(",")),
            ))
        }
    };
    let mut rows: Vec<ReplayRow> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |idx: usize, name: &str| -> CliResult<f64> {
            let raw = rec.get(idx).unwrap_or("");
            let v: f64 = raw
                .parse()
                .map_err(|_| csv_err(line, format!("column '{name}': cannot parse '{raw}' as a number")))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("column '{name}' is not finite")));
            }
            Ok(v)
        };
        let raw_step = rec.get(0).unwrap_or("");
        let step: i64 = raw_step
            .parse()
            .map_err(|_| csv_err(line, format!("column 'step': cannot parse '{raw_step}' as an integer")))?;
        if let Some(prev) = rows.last() {
            if step <= prev.step {
                return Err(csv_err(line, format!("step {step} does not increase past {}", prev.step)));
            }
        }
        let entropy = if with_entropy {
            let h = num(3, "entropy")?;
            if h < 0.0 {
                return Err(csv_err(line, "column 'entropy' is negative"));
            }
            Some(h)
        } else {
            None
        };
        rows.push(ReplayRow {
            step,
            kl: num(1, "kl")?,
            reward: num(2, "reward")?,
            entropy,
        });
    }
    if rows.is_empty() {
        return Err(csv_err(2, "no data rows"));
    }
    Ok(rows)
}

/// Linear interpolation of every column onto consecutive integer steps.
pub fn interpolate(rows: &[ReplayRow]) -> Vec<ReplayPoint> {
    let mut out = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        out.push(ReplayPoint {
            step: r.step,
            kl: r.kl,
            reward: r.reward,
            entropy: r.entropy,
            observed: true,
        });
        if let Some(next) = rows.get(i + 1) {
            let span = (next.step - r.step) as f64;
            for s in r.step + 1..next.step {
                let t = (s - r.step) as f64 / span;
                let lerp = |a: f64, b: f64| a + t * (b - a);
                out.push(ReplayPoint {
                    step: s,
                    kl: lerp(r.kl, next.kl),
                    reward: lerp(r.reward, next.reward),
                    entropy: r.entropy.zip(next.entropy).map(|(a, b)| lerp(a, b)),
                    observed: false,
                });
            }
        }
    }
    out
}

pub fn replay(points: &[ReplayPoint], asym: &AsymConfig<f64>, ctrl: &ControllerConfig<f64>) -> CliResult<Vec<ReplayOutput>> {
    asym.validate()?;
    let mut controller = EntropyAwareController::new(*ctrl)?;
    let mut tracker = controller.make_tracker(asym.window_w);
    points
        .iter()
        .map(|p| {
            let entropy = p.entropy.unwrap_or(ctrl.gate.h_floor);
            let akl = asym_controller_step(&mut tracker, p.kl, asym);
            let out = controller.step(&mut tracker, p.kl, entropy, p.reward)?;
            Ok(ReplayOutput {
                step: p.step,
                observed: p.observed,
                kl: p.kl,
                reward: p.reward,
                entropy,
                l_asym: akl.l_asym,
                l_mom: akl.l_mom,
                l_akl: akl.l_total,
                tau_t: out.tau_t,
                kl_short: out.kl_short,
                gate: out.gate,
                gated_penalty: out.penalty,
            })
        })
        .collect()
}

pub fn render_replay(rows: &[ReplayOutput]) -> String {
    let mut s = format!(
        "{:>7} {:>3} {:>9} {:>8} {:>8} {:>10} {:>10} {:>10} {:>7} {:>9} {:>6} {:>10}\n",
        "step", "obs", "kl", "reward", "entropy", "l_asym", "l_mom", "l_akl", "tau_t", "kl_short", "gate", "gated"
    );
    for r in rows {
        s.push_str(&format!(
            "{:>7} {:>3} {:>9.4} {:>8.4} {:>8.4} {:>10.6} {:>10.6} {:>10.6} {:>7.4} {:>9.4} {:>6.3} {:>10.6}\n",
            r.step,
            if r.observed { "*" } else { "" },
            r.kl,
            r.reward,
            r.entropy,
            r.l_asym,
            r.l_mom,
            r.l_akl,
            r.tau_t,
            r.kl_short,
            r.gate,
            r.gated_penalty
        ));
    }
    s
}
