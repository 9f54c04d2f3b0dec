//! Multi-seed, multi-mode comparison reports.

use std::path::Path;

use rayon::prelude::*;
use safe_core::numerics::{ReportConfig, StabilityReport};
use safe_core::scalar::{mean, std_dev};
use safe_core::trainer::{run, Mode, RunConfig, RunError, TrainingTrace};
use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::trace::{save_trace, trace_file_name, TraceHeader};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(flatten)]
    pub stability: StabilityReport,
    pub mean_completion_length: f64,
}

impl RunMetrics {
    pub fn from_trace(trace: &TrainingTrace, cfg: &ReportConfig) -> Self {
        let lengths = trace.column(|r| r.completion_length);
        Self {
            stability: trace.report(cfg),
            mean_completion_length: if lengths.is_empty() { 0.0 } else { mean(&lengths) },
        }
    }

    /// Metric rows in display order.
    pub fn rows(&self) -> [(&'static str, f64); 8] {
        let s = &self.stability;
        [
            ("mean_reward", s.mean_reward),
            ("reward_std", s.reward_std),
            ("reward_cv", s.reward_cv),
            ("rolling_reward_std", s.rolling_reward_std),
            ("crash_count", s.crash_count as f64),
            ("kl_rolling_std", s.kl_rolling_std),
            ("value_spike_count", s.value_spike_count as f64),
            ("mean_completion_length", self.mean_completion_length),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: Mode,
    pub seed: u64,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub metrics: Vec<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    pub summary: Vec<ModeSummary>,
}

/// Modes in canonical order, deduplicated.
pub fn canonical_modes(modes: &[Mode]) -> Vec<Mode> {
    Mode::ALL.iter().copied().filter(|m| modes.contains(m)).collect()
}

pub fn canonical_seeds(seeds: &[u64]) -> Vec<u64> {
    let mut s = seeds.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

/// Aggregate cells (mean and population std across seeds of each metric).
pub fn build_report(mut cells: Vec<CellResult>) -> CompareReport {
    cells.sort_by_key(|c| (Mode::ALL.iter().position(|m| *m == c.mode), c.seed));
    let modes = canonical_modes(&cells.iter().map(|c| c.mode).collect::<Vec<_>>());
    let seeds = canonical_seeds(&cells.iter().map(|c| c.seed).collect::<Vec<_>>());
    let summary = modes
        .iter()
        .map(|&mode| {
            let ok: Vec<&RunMetrics> = cells
                .iter()
                .filter(|c| c.mode == mode)
                .filter_map(|c| c.metrics.as_ref())
                .collect();
            let names = RunMetrics {
                stability: StabilityReport::default(),
                mean_completion_length: 0.0,
            }
            .rows();
            let metrics = names
                .iter()
                .enumerate()
                .map(|(k, (name, _))| {
                    let xs: Vec<f64> = ok.iter().map(|m| m.rows()[k].1).collect();
                    MetricSummary {
                        metric: name.to_string(),
                        mean: (!xs.is_empty()).then(|| mean(&xs)),
                        std: (!xs.is_empty()).then(|| std_dev(&xs)),
                        n: xs.len(),
                    }
                })
                .collect();
            ModeSummary { mode, metrics }
        })
        .collect();
    CompareReport {
        modes,
        seeds,
        cells,
        summary,
    }
}

/// Run every (mode, seed) cell in parallel, writing one trace per successful cell into `out_dir`.
pub fn run_compare(base: &RunConfig, modes: &[Mode], seeds: &[u64], out_dir: Option<&Path>) -> CliResult<CompareReport> {
    let modes = canonical_modes(modes);
    let seeds = canonical_seeds(seeds);
    let jobs: Vec<(Mode, u64)> = modes.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let results: Vec<CliResult<CellResult>> = jobs
        .par_iter()
        .map(|&(mode, seed)| {
            let cfg = RunConfig {
                mode,
                seed,
                ..base.clone()
            };
            match run(&cfg) {
                Ok(out) => {
                    if let Some(dir) = out_dir {
                        save_trace(&dir.join(trace_file_name(mode, seed)), &TraceHeader::for_config(&cfg), &out.trace)?;
                    }
                    Ok(CellResult {
                        mode,
                        seed,
                        metrics: Some(RunMetrics::from_trace(&out.trace, &cfg.report)),
                        error: None,
                    })
                }
                Err(e @ RunError::Diverged { .. }) | Err(e @ RunError::Config(_)) => Ok(CellResult {
                    mode,
                    seed,
                    metrics: None,
                    error: Some(e.to_string()),
                }),
            }
        })
        .collect();
    let cells = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    Ok(build_report(cells))
}

/// Recompute a report from loaded traces.
pub fn report_from_traces(traces: &[(TraceHeader, TrainingTrace)], cfg: &ReportConfig) -> CompareReport {
    build_report(
        traces
            .iter()
            .map(|(h, t)| CellResult {
                mode: h.mode,
                seed: h.seed,
                metrics: Some(RunMetrics::from_trace(t, cfg)),
                error: None,
            })
            .collect(),
    )
}

fn fmt_cell(m: &MetricSummary) -> String {
    match (m.mean, m.std) {
        (Some(mu), Some(sd)) => format!("{mu:.4} ± {sd:.4}"),
        _ => "failed".to_string(),
    }
}

/// Aligned text table: one row per metric, one column per mode.
pub fn render_text(report: &CompareReport) -> String {
    let label_w = 24;
    let mut cols: Vec<Vec<String>> = report
        .summary
        .iter()
        .map(|s| s.metrics.iter().map(fmt_cell).collect())
        .collect();
    for (col, s) in cols.iter_mut().zip(&report.summary) {
        col.insert(0, s.mode.to_string());
    }
    let widths: Vec<usize> = cols
        .iter()
        .map(|c| c.iter().map(|x| x.chars().count()).max().unwrap_or(0))
        .collect();
    let names: Vec<String> = report
        .summary
        .first()
        .map(|s| s.metrics.iter().map(|m| m.metric.clone()).collect())
        .unwrap_or_default();
    let mut out = String::new();
    for row in 0..=names.len() {
        let label = if row == 0 { "metric" } else { names[row - 1].as_str() };
        out.push_str(&format!("{label:<label_w$}"));
        for (c, w) in cols.iter().zip(&widths) {
            let cell = &c[row];
            let pad = w.saturating_sub(cell.chars().count());
            out.push_str("  ");
            out.push_str(&" ".repeat(pad));
            out.push_str(cell);
        }
        out.push('\n');
    }
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    out.push_str(&format!("seeds: {}\n", seeds.join(",")));
    for c in report.cells.iter().filter(|c| c.error.is_some()) {
        out.push_str(&format!(
            "failed: {} seed {}: {}\n",
            c.mode,
            c.seed,
            c.error.as_deref().unwrap_or("")
        ));
    }
    out
}
