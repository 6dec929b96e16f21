//! The subcommand bodies. Each returns the text it printed so tests can
//! inspect it without spawning the binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use zsldg::dataio::{read_zfv, write_zfv};
use zsldg::evalharness::{ablate, evaluate_state, run_protocol, Protocol, ProtocolConfig};
use zsldg::gradcheck::{run_gradient_suite, TOLERANCE};
use zsldg::losses::AblationMode;
use zsldg::synthdata::{generate, Dataset};
use zsldg::trainer::{continue_training, load_checkpoint, run_training, TrainSet};

use crate::config::RunConfig;

pub const CONFIG_COPY: &str = "config.txt";

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.bench.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn save_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_COPY);
    std::fs::write(&path, cfg.to_text()).with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    match path {
        Some(p) => Ok(read_zfv(p).with_context(|| format!("reading dataset {}", p.display()))?),
        None => Ok(generate(&cfg.bench)?.dataset),
    }
}

/// Generates the benchmark and writes it as ZFV, with the resolved config
/// next to it as `<out>.config.txt`.
pub fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<String> {
    let cfg = load_config(config, seed)?;
    let bench = generate(&cfg.bench)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_zfv(&bench.dataset, out)?;
    let copy = PathBuf::from(format!("{}.{CONFIG_COPY}", out.display()));
    std::fs::write(&copy, cfg.to_text()).with_context(|| format!("writing {}", copy.display()))?;
    let drops: Vec<String> = bench.shift_drops.iter().map(|d| format!("{:.3}", d)).collect();
    Ok(format!(
        "wrote {} samples ({} classes, {} domains) to {}\noracle accuracy {:.3}; probe drop per fold [{}] after {} draw(s)\n",
        bench.dataset.len(),
        bench.dataset.n_classes,
        bench.dataset.n_domains,
        out.display(),
        bench.oracle_accuracy,
        drops.join(", "),
        bench.attempts,
    ))
}

/// Trains one model on the dataset's split. With `resume`, continues from a
/// checkpoint and appends to the existing metric log.
pub fn train(config: Option<&Path>, data: Option<&Path>, out: &Path, resume: Option<&Path>, seed: Option<u64>) -> Result<String> {
    let cfg = load_config(config, seed)?;
    let ds = load_data(data, &cfg)?;
    save_config(&cfg, out)?;
    let outcome = match resume {
        None => run_training(&ds, &ds.split, &cfg.train, Some(out))?,
        Some(ckpt) => {
            let state = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let set = TrainSet::new(&ds, &ds.split)?;
            continue_training(&set, &cfg.train, state, Some(out))?
        }
    };
    let last = outcome.log.last();
    Ok(format!(
        "trained {} for {} epochs ({} steps); final loss {}\ncheckpoint and metrics in {}\n",
        cfg.train.mode,
        outcome.state.epoch,
        outcome.state.step,
        last.map_or("n/a".into(), |m| format!("{:.6}", m.total)),
        out.display(),
    ))
}

/// Evaluates a checkpoint on the dataset's split, or without one trains
/// and evaluates every fold of the configured protocol.
pub fn eval(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    protocol: Option<Protocol>,
    out: &Path,
    jobs: usize,
    seed: Option<u64>,
) -> Result<String> {
    let mut cfg = load_config(config, seed)?;
    if let Some(p) = protocol {
        cfg.protocol = p;
    }
    let ds = load_data(data, &cfg)?;
    let report = match checkpoint {
        Some(path) => {
            if cfg.protocol == Protocol::LimitedSources {
                bail!("a single checkpoint is scored on its own split; use rotation or dg");
            }
            let state = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            evaluate_state(&state, &ds, cfg.protocol)?
        }
        None => run_protocol(
            &ds,
            &cfg.train,
            &ProtocolConfig {
                protocol: cfg.protocol,
                modes: vec![cfg.train.mode],
                seeds: vec![cfg.train.seed],
                ls_seen_domains: cfg.ls_seen_domains,
                jobs,
            },
        )?,
    };
    save_config(&cfg, out)?;
    report.write(out, &cfg.protocol.to_string())?;
    Ok(report.summary())
}

/// Runs M1, M2 and M3 on every rotation fold for each seed and writes the
/// unseen-class table and the seen-class (DG) table.
pub fn ablate_cmd(config: Option<&Path>, data: Option<&Path>, n_seeds: u64, jobs: usize, out: &Path, seed: Option<u64>) -> Result<String> {
    let cfg = load_config(config, seed)?;
    let ds = load_data(data, &cfg)?;
    let seeds: Vec<u64> = (cfg.train.seed..cfg.train.seed + n_seeds).collect();
    let result = ablate(&ds, &cfg.train, &seeds, jobs)?;
    save_config(&cfg, out)?;
    result.zsl.write(out, "ablation")?;
    result.dg.write(out, "ablation_dg")?;
    let mut text = result.zsl.summary();
    text.push_str("\nseen classes in the held-out domain:\n");
    text.push_str(&result.dg.summary());
    for m in AblationMode::ALL {
        text.push_str(&format!(
            "{m}: unseen-class AVG median {:.2}%, seen-class AVG mean {:.2}%\n",
            100.0 * result.zsl.median_avg(m),
            100.0 * result.dg.mean_avg(m)
        ));
    }
    Ok(text)
}

/// Central-difference check of every differentiable loss. Fails the command
/// when any relative error exceeds the tolerance.
pub fn gradcheck(seed: u64, points: usize) -> Result<String> {
    let report = run_gradient_suite(seed, points)?;
    let mut text = String::new();
    for e in &report.entries {
        text.push_str(&format!(
            "{:<16} max rel err {:.3e} over {} points  {}\n",
            e.name,
            e.max_rel_err,
            e.points,
            if e.passed() { "ok" } else { "FAIL" }
        ));
    }
    if report.passed() {
        text.push_str(&format!("all checks ≤ {TOLERANCE:.0e}: PASS\n"));
        Ok(text)
    } else {
        bail!("{text}gradient check above {TOLERANCE:.0e}: FAIL")
    }
}
