use std::path::Path;

use anyhow::{Context, Result};

use crate::config::RunConfig;
use crate::experiment::run_loopback_world;

pub const CONVERGENCE_CSV_HEADER: &str = "n,iteration,loss,smoothed_loss";
pub const SMOOTHING_WINDOW: usize = 25;

#[derive(Debug, Clone, Copy)]
pub struct ConvergencePoint {
    pub n: u64,
    pub iteration: u64,
    pub loss: f64,
    pub smoothed_loss: f64,
}

/// Trailing moving average over a window of 25 losses (shorter at the head).
pub fn smooth(losses: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut window_sum = 0.0;
    for i in 0..losses.len() {
        window_sum += losses[i];
        if i >= SMOOTHING_WINDOW {
            window_sum -= losses[i - SMOOTHING_WINDOW];
        }
        let len = (i + 1).min(SMOOTHING_WINDOW);
        out.push(window_sum / len as f64);
    }
    out
}

/// Loss trajectories under different sync-skipping periods, one paired run
/// per n with the same seed; n = 1 is the exact-sync baseline.
pub fn convergence_experiment(base: &RunConfig, n_values: &[u64]) -> Result<Vec<ConvergencePoint>> {
    let mut points = Vec::new();
    for &n in n_values {
        let cfg = RunConfig {
            skip_sync_every: n,
            out: None,
            ..base.clone()
        };
        let all = run_loopback_world(&cfg).with_context(|| format!("convergence run n={n}"))?;
        let losses: Vec<f64> = all[0].iter().map(|r| r.loss).collect();
        let smoothed = smooth(&losses);
        for (i, (&loss, &smoothed_loss)) in losses.iter().zip(&smoothed).enumerate() {
            points.push(ConvergencePoint {
                n,
                iteration: i as u64,
                loss,
                smoothed_loss,
            });
        }
    }
    Ok(points)
}

pub fn write_convergence_csv(path: &Path, points: &[ConvergencePoint]) -> Result<()> {
    let mut text = String::from(CONVERGENCE_CSV_HEADER);
    text.push('\n');
    for p in points {
        text.push_str(&format!(
            "{},{},{},{}\n",
            p.n, p.iteration, p.loss, p.smoothed_loss
        ));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn parse_n_values(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .with_context(|| format!("bad n value '{v}'"))
        })
        .collect()
}
