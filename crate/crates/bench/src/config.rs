use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use bks_modelzoo::{build_mlp, CenteredMlp, GateRule, MlpSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Loopback,
    Tcp,
}

impl TransportKind {
    pub fn parse(s: &str) -> Result<TransportKind> {
        match s {
            "loopback" => Ok(TransportKind::Loopback),
            "tcp" => Ok(TransportKind::Tcp),
            other => bail!("unknown transport '{other}' (expected loopback or tcp)"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransportKind::Loopback => "loopback",
            TransportKind::Tcp => "tcp",
        }
    }
}

/// One run's full configuration. Defaults < config file < command-line flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub rank: u32,
    pub world: u32,
    pub transport: TransportKind,
    pub master_addr: String,
    pub model: String,
    pub iters: u64,
    /// 0 means one bucket per parameter.
    pub bucket_cap_bytes: u64,
    pub find_unused: bool,
    /// Synchronize on iterations divisible by n, run no_sync otherwise.
    pub skip_sync_every: u64,
    pub round_robin: u32,
    pub alpha_ms: f64,
    pub beta_bps: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Defer every AllReduce launch to the end of backward (baseline mode).
    pub no_overlap: bool,
    /// Rows per rank per iteration.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Align ranks with a zero-cost collective before each iteration so
    /// per-iteration latency is measured from a common start line.
    pub iteration_barrier: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rank: 0,
            world: 1,
            transport: TransportKind::Loopback,
            master_addr: "127.0.0.1:29400".into(),
            model: "small".into(),
            iters: 100,
            bucket_cap_bytes: bks_reducer::DEFAULT_BUCKET_CAP_BYTES as u64,
            find_unused: false,
            skip_sync_every: 1,
            round_robin: 1,
            alpha_ms: 0.0,
            beta_bps: f64::INFINITY,
            seed: 0,
            out: None,
            no_overlap: false,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.0,
            iteration_barrier: false,
        }
    }
}

fn parse_on_off(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => bail!("{key} expects on/off, got '{other}'"),
    }
}

impl RunConfig {
    /// Apply one `key=value` setting; used by both the config-file parser and
    /// flag merging.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "rank" => self.rank = v.parse().context("rank")?,
            "world" => self.world = v.parse().context("world")?,
            "transport" => self.transport = TransportKind::parse(v)?,
            "master_addr" => self.master_addr = v.to_string(),
            "model" => self.model = v.to_string(),
            "iters" => self.iters = v.parse().context("iters")?,
            "bucket_cap_bytes" => {
                self.bucket_cap_bytes = if v == "max" {
                    u64::MAX
                } else {
                    v.parse().context("bucket_cap_bytes")?
                }
            }
            "find_unused" => self.find_unused = parse_on_off(key, v)?,
            "skip_sync_every" => self.skip_sync_every = v.parse().context("skip_sync_every")?,
            "round_robin" => self.round_robin = v.parse().context("round_robin")?,
            "alpha_ms" => self.alpha_ms = v.parse().context("alpha_ms")?,
            "beta_bps" => {
                self.beta_bps = if v == "inf" {
                    f64::INFINITY
                } else {
                    v.parse().context("beta_bps")?
                }
            }
            "seed" => self.seed = v.parse().context("seed")?,
            "out" => self.out = Some(PathBuf::from(v)),
            "no_overlap" => self.no_overlap = parse_on_off(key, v)?,
            "batch_size" => self.batch_size = v.parse().context("batch_size")?,
            "lr" => self.lr = v.parse().context("lr")?,
            "momentum" => self.momentum = v.parse().context("momentum")?,
            "iteration_barrier" => self.iteration_barrier = parse_on_off(key, v)?,
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    /// Flat `key=value` text file; blank lines and `#` comments ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got '{line}'", lineno + 1))?;
            self.set(key.trim(), value)
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.world == 0 {
            bail!("world must be at least 1");
        }
        if self.rank >= self.world {
            bail!("rank {} out of range for world {}", self.rank, self.world);
        }
        if self.skip_sync_every == 0 {
            bail!("skip_sync_every must be at least 1");
        }
        if self.round_robin == 0 {
            bail!("round_robin must be at least 1");
        }
        if self.batch_size == 0 {
            bail!("batch_size must be positive");
        }
        resolve_model(&self.model)?;
        Ok(())
    }

    /// Reducer cap in bytes; the CLI's 0 means one bucket per parameter,
    /// which an 8-byte cap produces exactly.
    pub fn reducer_cap_bytes(&self) -> usize {
        if self.bucket_cap_bytes == 0 {
            8
        } else {
            usize::try_from(self.bucket_cap_bytes).unwrap_or(usize::MAX)
        }
    }

    pub fn latency_model(&self) -> Option<bks_collectives::LatencyModel> {
        if self.alpha_ms > 0.0 || self.beta_bps.is_finite() {
            Some(bks_collectives::LatencyModel::new(
                self.alpha_ms / 1e3,
                self.beta_bps,
            ))
        } else {
            None
        }
    }

    /// Everything every rank must agree on, canonically serialized. Per-rank
    /// fields (rank, out) are excluded.
    pub fn canonical_shared(&self) -> String {
        format!(
            "world={}\ntransport={}\nmodel={}\niters={}\nbucket_cap_bytes={}\nfind_unused={}\n\
             skip_sync_every={}\nround_robin={}\nalpha_ms={}\nbeta_bps={}\nseed={}\n\
             no_overlap={}\nbatch_size={}\nlr={}\nmomentum={}\n",
            self.world,
            self.transport.name(),
            self.model,
            self.iters,
            self.bucket_cap_bytes,
            self.find_unused,
            self.skip_sync_every,
            self.round_robin,
            self.alpha_ms,
            self.beta_bps,
            self.seed,
            self.no_overlap,
            self.batch_size,
            self.lr,
            self.momentum,
        )
    }

    pub fn config_hash(&self) -> u64 {
        v_hash(self.canonical_shared().as_bytes())
    }

    /// Per-rank output path: `results.csv` becomes `results.rank3.csv`.
    pub fn rank_out_path(&self, rank: u32) -> Option<PathBuf> {
        self.out.as_ref().map(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
            let ext = p.extension().and_then(|s| s.to_str()).unwrap_or("csv");
            p.with_file_name(format!("{stem}.rank{rank}.{ext}"))
        })
    }
}

/// FNV-1a, 64-bit.
pub fn v_hash(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    Mlp(MlpSpec),
    Centered(Vec<usize>),
}

impl ModelKind {
    pub fn input_dim(&self) -> usize {
        match self {
            ModelKind::Mlp(spec) => spec.widths[0],
            ModelKind::Centered(widths) => widths[0],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ModelKind::Mlp(spec) => *spec.widths.last().unwrap(),
            ModelKind::Centered(widths) => *widths.last().unwrap(),
        }
    }

    pub fn build(&self, seed: u64, rank: u32) -> Box<dyn bks_autograd::Model> {
        match self {
            ModelKind::Mlp(spec) => Box::new(build_mlp(spec, seed).with_rank(rank)),
            ModelKind::Centered(widths) => Box::new(CenteredMlp::build(widths, seed)),
        }
    }
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    let widths: Vec<usize> = s
        .split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("bad width '{w}'"))
        })
        .collect::<Result<_>>()?;
    if widths.len() < 2 {
        bail!("a model needs at least two widths, got '{s}'");
    }
    Ok(widths)
}

fn parse_gate_rule(s: &str) -> Result<GateRule> {
    match s {
        "always" => Ok(GateRule::Always),
        "never" => Ok(GateRule::Never),
        "odd" => Ok(GateRule::OddIterations),
        "skip-rank0-odd" => Ok(GateRule::SkipRankOnOddIterations(0)),
        other => bail!("unknown gate rule '{other}'"),
    }
}

/// Model spec names:
///   small                                  16,32,8 MLP
///   medium                                 64,64,64,64,8 MLP
///   mlp:W0,W1,...                          explicit widths
///   gated:W0,W1,...;branch=B;rule=RULE     gated branch after first hidden
///   centered:W0,W1,...                     running-mean buffer layer + MLP
pub fn resolve_model(name: &str) -> Result<ModelKind> {
    match name {
        "small" => return Ok(ModelKind::Mlp(MlpSpec::new(vec![16, 32, 8]))),
        "medium" => return Ok(ModelKind::Mlp(MlpSpec::new(vec![64, 64, 64, 64, 8]))),
        _ => {}
    }
    if let Some(rest) = name.strip_prefix("mlp:") {
        return Ok(ModelKind::Mlp(MlpSpec::new(parse_widths(rest)?)));
    }
    if let Some(rest) = name.strip_prefix("centered:") {
        return Ok(ModelKind::Centered(parse_widths(rest)?));
    }
    if let Some(rest) = name.strip_prefix("gated:") {
        let mut widths = None;
        let mut branch = None;
        let mut rule = GateRule::OddIterations;
        for (i, part) in rest.split(';').enumerate() {
            if i == 0 {
                widths = Some(parse_widths(part)?);
            } else if let Some(b) = part.strip_prefix("branch=") {
                branch = Some(
                    b.trim()
                        .parse::<usize>()
                        .map_err(|_| anyhow!("bad branch '{b}'"))?,
                );
            } else if let Some(r) = part.strip_prefix("rule=") {
                rule = parse_gate_rule(r.trim())?;
            } else {
                bail!("unknown gated-model option '{part}'");
            }
        }
        let widths = widths.ok_or_else(|| anyhow!("gated model needs widths"))?;
        let branch = branch.ok_or_else(|| anyhow!("gated model needs branch=W"))?;
        if widths.len() < 3 {
            bail!("a gated model needs at least one hidden layer");
        }
        return Ok(ModelKind::Mlp(
            MlpSpec::new(widths).with_gated_branch(branch, rule),
        ));
    }
    bail!("unknown model spec '{name}'")
}
