//! JSONL trace files. The first line is `# ` followed by a JSON header; every
//! following line is one [`TraceRecord`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use safe_core::trainer::{Mode, RunConfig, TraceRecord, TrainingTrace};
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{CliError, CliResult};

const HEADER_PREFIX: &str = "# ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub steps: usize,
}

impl TraceHeader {
    pub fn for_config(cfg: &RunConfig) -> Self {
        Self {
            config_hash: config_hash(cfg),
            seed: cfg.seed,
            mode: cfg.mode,
            steps: cfg.steps,
        }
    }
}

pub fn write_trace<W: Write>(mut w: W, header: &TraceHeader, trace: &TrainingTrace) -> std::io::Result<()> {
    writeln!(w, "{HEADER_PREFIX}{}", serde_json::to_string(header)?)?;
    for rec in &trace.records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_trace<R: BufRead>(r: R) -> CliResult<(TraceHeader, TrainingTrace)> {
    let mut lines = r.lines().enumerate();
    let bad = |line: usize, msg: String| CliError::Trace { line, msg };
    let header = match lines.next() {
        Some((_, Ok(l))) => {
            let body = l
                .strip_prefix(HEADER_PREFIX)
                .ok_or_else(|| bad(1, "missing '# ' header line".into()))?;
            serde_json::from_str::<TraceHeader>(body).map_err(|e| bad(1, e.to_string()))?
        }
        Some((_, Err(e))) => return Err(bad(1, e.to_string())),
        None => return Err(bad(1, "empty trace file".into())),
    };
    let mut trace = TrainingTrace::default();
    for (i, line) in lines {
        let line = line.map_err(|e| bad(i + 1, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
        if trace.records.last().is_some_and(|p| p.step >= rec.step) {
            return Err(bad(i + 1, format!("step {} does not increase", rec.step)));
        }
        trace.records.push(rec);
    }
    Ok((header, trace))
}

pub fn save_trace(path: &Path, header: &TraceHeader, trace: &TrainingTrace) -> CliResult<()> {
    let werr = |source| CliError::Write {
        path: path.to_path_buf(),
        source,
    };
    let f = File::create(path).map_err(werr)?;
    write_trace(BufWriter::new(f), header, trace).map_err(werr)
}

pub fn load_trace(path: &Path) -> CliResult<(TraceHeader, TrainingTrace)> {
    let f = File::open(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    read_trace(BufReader::new(f))
}

/// File name used for a single run's trace.
pub fn trace_file_name(mode: Mode, seed: u64) -> String {
    format!("trace_{}_seed{}.jsonl", mode.as_str(), seed)
}
