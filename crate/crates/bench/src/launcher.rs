use std::path::Path;
use std::process::{Child, Command};

use anyhow::{bail, Context, Result};

/// Spawn `world` copies of `exe` on localhost with ranks 0..world, forwarding
/// `args` plus the per-child `--rank`. Blocks until every child exits and
/// fails with a report naming each nonzero rank.
pub fn launch_local_world(exe: &Path, args: &[String], world: u32) -> Result<()> {
    let mut children: Vec<(u32, Child)> = Vec::with_capacity(world as usize);
    for rank in 0..world {
        let child = Command::new(exe)
            .args(args)
            .arg("--rank")
            .arg(rank.to_string())
            .arg("--world")
            .arg(world.to_string())
            .spawn()
            .with_context(|| format!("spawning rank {rank}"))?;
        children.push((rank, child));
    }
    let mut failures = Vec::new();
    for (rank, mut child) in children {
        let status = child
            .wait()
            .with_context(|| format!("waiting for rank {rank}"))?;
        if !status.success() {
            failures.push(format!("rank {rank} exited with {status}"));
        }
    }
    if !failures.is_empty() {
        bail!("launch failed: {}", failures.join("; "));
    }
    Ok(())
}

/// Drop `--launch-world N`, `--rank N` and `--world N` from a raw argument
/// list so the launcher can append per-child values without clashing.
pub fn strip_launcher_args(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut skip_value = false;
    for arg in args {
        if skip_value {
            skip_value = false;
            continue;
        }
        match arg.as_str() {
            "--launch-world" | "--rank" | "--world" => skip_value = true,
            a if a.starts_with("--launch-world=")
                || a.starts_with("--rank=")
                || a.starts_with("--world=") => {}
            _ => out.push(arg.clone()),
        }
    }
    out
}
