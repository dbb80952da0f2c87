use std::path::Path;

use anyhow::{bail, Context, Result};

/// Iterations excluded from summaries as warm-up.
pub const WARMUP_ITERATIONS: usize = 5;

pub const CSV_HEADER: &str =
    "iteration,forward_s,backward_compute_s,backward_comm_exposed_s,optimizer_s,total_s,loss";

/// One training iteration's latency breakdown. Serialized losslessly: fp64
/// fields print in shortest-roundtrip form and parse back bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    pub forward_s: f64,
    pub backward_compute_s: f64,
    pub backward_comm_exposed_s: f64,
    pub optimizer_s: f64,
    pub total_s: f64,
    pub loss: f64,
}

impl IterationRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.forward_s,
            self.backward_compute_s,
            self.backward_comm_exposed_s,
            self.optimizer_s,
            self.total_s,
            self.loss
        )
    }

    pub fn parse_csv_row(row: &str) -> Result<IterationRecord> {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 7 {
            bail!("expected 7 fields, got {} in '{row}'", fields.len());
        }
        Ok(IterationRecord {
            iteration: fields[0].parse().context("iteration")?,
            forward_s: fields[1].parse().context("forward_s")?,
            backward_compute_s: fields[2].parse().context("backward_compute_s")?,
            backward_comm_exposed_s: fields[3].parse().context("backward_comm_exposed_s")?,
            optimizer_s: fields[4].parse().context("optimizer_s")?,
            total_s: fields[5].parse().context("total_s")?,
            loss: fields[6].parse().context("loss")?,
        })
    }
}

pub fn write_csv(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut text = String::with_capacity(records.len() * 64 + CSV_HEADER.len() + 1);
    text.push_str(CSV_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.to_csv_row());
        text.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).ok();
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_csv(path: &Path) -> Result<Vec<IterationRecord>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == CSV_HEADER => {}
        other => bail!("bad CSV header {other:?}"),
    }
    lines.map(IterationRecord::parse_csv_row).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Summary {
    pub mean_total_s: f64,
    pub p50_total_s: f64,
    pub p95_total_s: f64,
}

/// Mean/p50/p95 of total iteration latency, excluding warm-up iterations.
pub fn summarize(records: &[IterationRecord]) -> Summary {
    let measured: Vec<f64> = records
        .iter()
        .filter(|r| r.iteration >= WARMUP_ITERATIONS as u64)
        .map(|r| r.total_s)
        .collect();
    assert!(!measured.is_empty(), "no measured iterations after warm-up");
    let mut sorted = measured.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
    Summary {
        mean_total_s: measured.iter().sum::<f64>() / measured.len() as f64,
        p50_total_s: pct(0.50),
        p95_total_s: pct(0.95),
    }
}
