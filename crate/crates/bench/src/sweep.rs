use std::path::Path;

use anyhow::{Context, Result};

use crate::config::RunConfig;
use crate::experiment::run_loopback_world;
use crate::records::summarize;

pub const SWEEP_CSV_HEADER: &str = "bucket_cap_bytes,mean_total_s,p50_total_s,p95_total_s";

#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub bucket_cap_bytes: u64,
    pub mean_total_s: f64,
    pub p50_total_s: f64,
    pub p95_total_s: f64,
}

/// Per-iteration latency across bucket caps, one paired run per cap with the
/// same seed. Cap 0 is the one-AllReduce-per-gradient baseline; `u64::MAX`
/// stands in for the single-bucket extreme.
pub fn sweep_bucket_sizes(base: &RunConfig, caps: &[u64]) -> Result<Vec<SweepRow>> {
    assert!(!caps.is_empty());
    let mut rows = Vec::with_capacity(caps.len());
    for &cap in caps {
        let cfg = RunConfig {
            bucket_cap_bytes: cap,
            out: None,
            ..base.clone()
        };
        let all = run_loopback_world(&cfg).with_context(|| format!("sweep cap {cap}"))?;
        let summary = summarize(&all[0]);
        rows.push(SweepRow {
            bucket_cap_bytes: cap,
            mean_total_s: summary.mean_total_s,
            p50_total_s: summary.p50_total_s,
            p95_total_s: summary.p95_total_s,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut text = String::from(SWEEP_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.bucket_cap_bytes, r.mean_total_s, r.p50_total_s, r.p95_total_s
        ));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn parse_caps(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|c| {
            let c = c.trim();
            if c == "max" {
                Ok(u64::MAX)
            } else {
                c.parse::<u64>()
                    .with_context(|| format!("bad bucket cap '{c}'"))
            }
        })
        .collect()
}
