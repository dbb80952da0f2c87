//! Alpha-beta latency model applied to loopback collectives.

/// Fixed per-operation latency plus payload transfer time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    pub alpha_seconds: f64,
    pub bytes_per_second: f64,
}

impl LatencyModel {
    pub fn new(alpha_seconds: f64, bytes_per_second: f64) -> LatencyModel {
        LatencyModel {
            alpha_seconds,
            bytes_per_second,
        }
    }
}

/// Simulated collective cost in seconds: `alpha + nbytes / bytes_per_second`.
/// Splitting one transfer into k operations pays the alpha term k times, so
/// the total cost is strictly decreasing in per-op size for fixed total work.
pub fn loopback_cost(model: &LatencyModel, nbytes: usize) -> f64 {
    model.alpha_seconds + nbytes as f64 / model.bytes_per_second
}
