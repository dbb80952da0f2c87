use bks_autograd::rng::SplitMix64;
use bks_autograd::{AutogradError, Model, Parameter, ParameterSet, Tensor};

const INIT_RANGE: f64 = 0.1;

/// When a gated branch participates in the forward pass. A pure function of
/// (iteration, rank), identical across runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateRule {
    Always,
    Never,
    /// Branch active on odd iteration numbers only.
    OddIterations,
    /// Branch active everywhere except on the given rank during odd
    /// iterations — one rank skips a sub-graph its peers still use.
    SkipRankOnOddIterations(u32),
}

impl GateRule {
    pub fn active(self, iteration: u64, rank: u32) -> bool {
        match self {
            GateRule::Always => true,
            GateRule::Never => false,
            GateRule::OddIterations => iteration % 2 == 1,
            GateRule::SkipRankOnOddIterations(r) => !(rank == r && iteration % 2 == 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatedBranch {
    pub width: usize,
    pub rule: GateRule,
}

/// Layer widths plus an optional gated branch attached after the first
/// hidden activation.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub gated_branch: Option<GatedBranch>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> MlpSpec {
        MlpSpec {
            widths,
            gated_branch: None,
        }
    }

    pub fn with_gated_branch(mut self, width: usize, rule: GateRule) -> MlpSpec {
        self.gated_branch = Some(GatedBranch { width, rule });
        self
    }
}

struct BranchParams {
    w1: Parameter,
    b1: Parameter,
    w2: Parameter,
    b2: Parameter,
    rule: GateRule,
}

/// Fully-connected regression network: relu on every layer but the last.
/// The gated branch, when present and active, adds a two-layer detour to the
/// first hidden activation; its parameters register after the trunk, so they
/// land in bucket 0 under reverse-order packing.
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<(Parameter, Parameter)>,
    branch: Option<BranchParams>,
    params: Vec<Parameter>,
    rank: u32,
    iteration: u64,
}

/// Seeded construction: the same spec and seed give bit-identical parameters
/// on every rank.
pub fn build_mlp(spec: &MlpSpec, seed: u64) -> Mlp {
    assert!(spec.widths.len() >= 2, "an MLP needs at least two widths");
    if spec.gated_branch.is_some() {
        assert!(
            spec.widths.len() >= 3,
            "a gated branch attaches after the first hidden activation"
        );
    }
    let mut rng = SplitMix64::new(seed);
    let mut set = ParameterSet::new();
    let mut layers = Vec::new();
    for pair in spec.widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w = set.add_param(
            vec![fan_in, fan_out],
            rng.fill_uniform(fan_in * fan_out, -INIT_RANGE, INIT_RANGE),
        );
        let b = set.add_param(
            vec![fan_out],
            rng.fill_uniform(fan_out, -INIT_RANGE, INIT_RANGE),
        );
        layers.push((w, b));
    }
    let branch = spec.gated_branch.map(|g| {
        let h = spec.widths[1];
        BranchParams {
            w1: set.add_param(
                vec![h, g.width],
                rng.fill_uniform(h * g.width, -INIT_RANGE, INIT_RANGE),
            ),
            b1: set.add_param(
                vec![g.width],
                rng.fill_uniform(g.width, -INIT_RANGE, INIT_RANGE),
            ),
            w2: set.add_param(
                vec![g.width, h],
                rng.fill_uniform(g.width * h, -INIT_RANGE, INIT_RANGE),
            ),
            b2: set.add_param(vec![h], rng.fill_uniform(h, -INIT_RANGE, INIT_RANGE)),
            rule: g.rule,
        }
    });
    Mlp {
        widths: spec.widths.clone(),
        layers,
        branch,
        params: set.into_params(),
        rank: 0,
        iteration: 0,
    }
}

impl Mlp {
    /// Rank feeds the gate predicate; models start at rank 0.
    pub fn with_rank(mut self, rank: u32) -> Mlp {
        self.rank = rank;
        self
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Total scalar elements across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn branch_param_indices(&self) -> Vec<usize> {
        self.branch
            .as_ref()
            .map(|b| vec![b.w1.index(), b.b1.index(), b.w2.index(), b.b2.index()])
            .unwrap_or_default()
    }

    pub fn branch_active_next(&self) -> bool {
        self.branch
            .as_ref()
            .map(|b| b.rule.active(self.iteration, self.rank))
            .unwrap_or(false)
    }
}

impl Model for Mlp {
    fn parameters(&self) -> Vec<Parameter> {
        self.params.clone()
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor, AutogradError> {
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(&w.as_tensor())?.add_bias(&b.as_tensor())?;
            if i < last {
                h = h.relu();
            }
            if i == 0 {
                if let Some(branch) = &self.branch {
                    if branch.rule.active(self.iteration, self.rank) {
                        let detour = h
                            .matmul(&branch.w1.as_tensor())?
                            .add_bias(&branch.b1.as_tensor())?
                            .relu()
                            .matmul(&branch.w2.as_tensor())?
                            .add_bias(&branch.b2.as_tensor())?;
                        h = h.add(&detour)?;
                    }
                }
            }
        }
        self.iteration += 1;
        Ok(h)
    }
}

/// An MLP preceded by an input-centering layer that keeps a running mean in a
/// buffer — non-learnable state updated during training forwards, the
/// batch-norm stand-in that buffer broadcast exists for.
pub struct CenteredMlp {
    running_mean: Parameter,
    momentum: f64,
    layers: Vec<(Parameter, Parameter)>,
    params: Vec<Parameter>,
    update_buffers: bool,
}

impl CenteredMlp {
    pub fn build(widths: &[usize], seed: u64) -> CenteredMlp {
        assert!(widths.len() >= 2);
        let mut rng = SplitMix64::new(seed);
        let mut set = ParameterSet::new();
        let running_mean = set.add_buffer(vec![widths[0]], vec![0.0; widths[0]]);
        let mut layers = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = set.add_param(
                vec![fan_in, fan_out],
                rng.fill_uniform(fan_in * fan_out, -INIT_RANGE, INIT_RANGE),
            );
            let b = set.add_param(
                vec![fan_out],
                rng.fill_uniform(fan_out, -INIT_RANGE, INIT_RANGE),
            );
            layers.push((w, b));
        }
        CenteredMlp {
            running_mean,
            momentum: 0.1,
            layers,
            params: set.into_params(),
            update_buffers: true,
        }
    }

    /// Freeze the running mean (eval mode); gradient checks need repeated
    /// forward passes over an unchanging function.
    pub fn set_update_buffers(&mut self, on: bool) {
        self.update_buffers = on;
    }

    pub fn running_mean(&self) -> Vec<f64> {
        self.running_mean.value()
    }
}

impl Model for CenteredMlp {
    fn parameters(&self) -> Vec<Parameter> {
        self.params.clone()
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor, AutogradError> {
        let negated_mean = Tensor::new(
            self.running_mean.shape(),
            self.running_mean.value().iter().map(|m| -m).collect(),
        )?;
        let mut h = input.add_bias(&negated_mean)?;
        if self.update_buffers {
            let (rows, cols) = (input.shape()[0], input.shape()[1]);
            let mut batch_mean = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    batch_mean[c] += input.data()[r * cols + c];
                }
            }
            let mut updated = self.running_mean.value();
            for (m, sum) in updated.iter_mut().zip(&batch_mean) {
                *m = (1.0 - self.momentum) * *m + self.momentum * (sum / rows as f64);
            }
            self.running_mean.set_value(updated)?;
        }
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(&w.as_tensor())?.add_bias(&b.as_tensor())?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }
}
