//! Fold-level parallelism: each fold can run in a child process that
//! re-invokes this binary with `--fold k`.

use std::env;
use std::process::{Child, Command};

use neuronet::{Error, Result};

/// Set in child processes so they skip writing the shared run files.
pub const WORKER_ENV: &str = "NEURONET_FOLD_WORKER";

pub fn is_worker() -> bool {
    env::var_os(WORKER_ENV).is_some()
}

pub fn fold_dir(fold: usize) -> String {
    format!("fold_{fold}")
}

pub fn selected(fold: Option<usize>, count: usize) -> Result<Vec<usize>> {
    match fold {
        Some(k) if k >= count => Err(Error::Config(format!("--fold {k} but the split has {count} folds"))),
        Some(k) => Ok(vec![k]),
        None => Ok((0..count).collect()),
    }
}

/// Runs `work` for every fold, inline when `jobs <= 1`, otherwise in at most
/// `jobs` concurrent child processes.
pub fn run(folds: &[usize], jobs: usize, mut work: impl FnMut(usize) -> Result<()>) -> Result<()> {
    if jobs <= 1 || folds.len() <= 1 {
        return folds.iter().try_for_each(|&k| work(k));
    }
    let exe = env::current_exe()?;
    let base = child_args(env::args().skip(1));
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut pending = folds.iter().copied();
    loop {
        while running.len() < jobs {
            let Some(k) = pending.next() else { break };
            let child = Command::new(&exe)
                .args(&base)
                .args(["--fold", &k.to_string()])
                .env(WORKER_ENV, "1")
                .spawn()?;
            running.push((k, child));
        }
        if running.is_empty() {
            return Ok(());
        }
        let (k, mut child) = running.remove(0);
        let status = child.wait()?;
        if !status.success() {
            for (_, mut c) in running {
                let _ = c.kill();
            }
            return Err(Error::Io(std::io::Error::other(format!("fold {k} worker failed with {status}"))));
        }
    }
}

/// The parent's arguments without `--jobs` and `--fold`.
fn child_args(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip_value = false;
    for a in args {
        if skip_value {
            skip_value = false;
            continue;
        }
        match a.as_str() {
            "--jobs" | "--fold" => skip_value = true,
            s if s.starts_with("--jobs=") || s.starts_with("--fold=") => {}
            _ => out.push(a),
        }
    }
    out
}
