//! Command implementations behind the `cohortfl` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::engine::{bias_stats, run_experiment, time_to_accuracy, write_outputs, ExperimentOutcome};
use crate::error::{Error, Result};
use crate::report::{fmt_g9, fmt_opt};

/// Resolves the output directory: the flag wins over the config entry.
fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))
}

pub fn summary_text(outcome: &ExperimentOutcome, cfg: &ExperimentConfig, baseline: Option<&Path>) -> Result<String> {
    let s = &outcome.summary;
    let mut t = String::new();
    let line = |t: &mut String, k: &str, v: String| {
        let _ = writeln!(t, "{k} = {v}");
    };
    line(&mut t, "seed", cfg.seed.to_string());
    line(&mut t, "final_accuracy", fmt_opt(s.final_accuracy));
    line(&mut t, "best_global_accuracy", fmt_opt(outcome.best_global_accuracy()));
    if let Some(target) = cfg.engine.target_accuracy {
        line(&mut t, "time_to_target", outcome.time_to_accuracy(target).map_or("NA".into(), fmt_g9));
    }
    line(&mut t, "j_single_cohort", fmt_g9(s.j_single));
    line(&mut t, "j_leaves", fmt_g9(s.j_leaves));
    line(&mut t, "j_ratio", if s.j_single > 0.0 { fmt_g9(s.j_leaves / s.j_single) } else { "NA".into() });
    line(&mut t, "accuracy_variance", fmt_opt(s.bias.map(|b| b.variance)));
    line(&mut t, "worst10_accuracy", fmt_opt(s.bias.map(|b| b.worst10_mean)));
    line(&mut t, "best10_accuracy", fmt_opt(s.bias.map(|b| b.best10_mean)));
    line(&mut t, "ari", fmt_opt(s.ari));
    line(&mut t, "num_leaves", s.num_leaves.to_string());
    line(&mut t, "partitions", s.partitions.to_string());
    line(&mut t, "sim_time", fmt_g9(s.sim_time));
    line(&mut t, "participated_clients", s.participated_clients.to_string());
    line(&mut t, "corrupted_clients", s.corrupted_clients.to_string());
    line(&mut t, "blacklisted", s.blacklisted.to_string());
    line(&mut t, "blacklisted_clean", s.blacklisted_clean.to_string());
    if let Some(dir) = baseline {
        let base = read_rounds(dir)?;
        let best = base.iter().map(|(_, a)| *a).max_by(f64::total_cmp);
        let speedup = best.and_then(|b| {
            let tb = time_to_accuracy(base.iter().copied(), b)?;
            let to = outcome.time_to_accuracy(b)?;
            (to > 0.0).then(|| tb / to)
        });
        line(&mut t, "speedup_vs_baseline", speedup.map_or("NA".into(), fmt_g9));
    }
    Ok(t)
}

/// Runs one experiment and writes its CSVs, config copy and summary.
pub fn cmd_run(config_path: &Path, out: Option<&Path>, seed: Option<u64>, baseline: Option<&Path>) -> Result<PathBuf> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = output_dir(&cfg, out)?;
    run_into(&cfg, &dir, baseline)?;
    Ok(dir)
}

fn run_into(cfg: &ExperimentConfig, dir: &Path, baseline: Option<&Path>) -> Result<ExperimentOutcome> {
    let outcome = run_experiment(cfg)?;
    write_outputs(&outcome, dir)?;
    let mut copy = cfg.clone();
    copy.output_dir = None;
    std::fs::write(dir.join("config.toml"), copy.to_toml())?;
    std::fs::write(dir.join("summary.txt"), summary_text(&outcome, cfg, baseline)?)?;
    Ok(outcome)
}

/// (sim_end, global_accuracy) rows of a run directory's `rounds.csv`.
pub fn read_rounds(dir: &Path) -> Result<Vec<(f64, f64)>> {
    let path = dir.join("rounds.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{}: no {name} column", path.display())))
    };
    let (t_col, a_col) = (col("sim_end")?, col("global_accuracy")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec[a_col].is_empty() {
            continue;
        }
        let parse =
            |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("{}: bad number {s:?}", path.display())));
        out.push((parse(&rec[t_col])?, parse(&rec[a_col])?));
    }
    Ok(out)
}

fn read_client_accuracies(dir: &Path) -> Result<Vec<f64>> {
    let path = dir.join("clients.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "accuracy")
        .ok_or_else(|| Error::Config(format!("{}: no accuracy column", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if let Ok(v) = rec[col].parse::<f64>() {
            out.push(v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub time_a: Option<f64>,
    pub time_b: Option<f64>,
    /// Time for A over time for B.
    pub speedup: Option<f64>,
    pub final_accuracy_delta: Option<f64>,
    pub variance_delta: Option<f64>,
}

impl CompareReport {
    pub fn reached(&self) -> bool {
        self.speedup.is_some()
    }

    pub fn render(&self) -> String {
        let na = |v: Option<f64>| v.map_or("NA".to_string(), fmt_g9);
        let mut s = String::new();
        let _ = writeln!(s, "time_a = {}", na(self.time_a));
        let _ = writeln!(s, "time_b = {}", na(self.time_b));
        let _ = writeln!(s, "speedup = {}", na(self.speedup));
        let _ = writeln!(s, "final_accuracy_delta = {}", na(self.final_accuracy_delta));
        let _ = writeln!(s, "variance_delta = {}", na(self.variance_delta));
        if !self.reached() {
            let _ = writeln!(s, "target_not_reached = true");
        }
        s
    }
}

/// Speedup of run B over run A in reaching `target` global accuracy.
pub fn cmd_compare(run_a: &Path, run_b: &Path, target: f64) -> Result<CompareReport> {
    let (a, b) = (read_rounds(run_a)?, read_rounds(run_b)?);
    let time_a = time_to_accuracy(a.iter().copied(), target);
    let time_b = time_to_accuracy(b.iter().copied(), target);
    let speedup = match (time_a, time_b) {
        (Some(ta), Some(tb)) if tb > 0.0 => Some(ta / tb),
        _ => None,
    };
    let final_of = |v: &[(f64, f64)]| v.iter().max_by(|x, y| x.0.total_cmp(&y.0)).map(|p| p.1);
    let final_accuracy_delta = final_of(&b).zip(final_of(&a)).map(|(x, y)| x - y);
    let var =
        |dir: &Path| -> Result<Option<f64>> { Ok(bias_stats(&read_client_accuracies(dir)?).ok().map(|b| b.variance)) };
    let variance_delta = var(run_b)?.zip(var(run_a)?).map(|(x, y)| x - y);
    Ok(CompareReport { time_a, time_b, speedup, final_accuracy_delta, variance_delta })
}

pub const SWEEP_PARAMS: &[&str] = &[
    "max_depth",
    "partition_round",
    "epsilon",
    "corrupted_fraction",
    "sigma",
    "loss_rate",
    "k",
    "clustering_start_round",
];

/// Applies one sweep value to a config copy.
pub fn apply_sweep_value(cfg: &mut ExperimentConfig, param: &str, value: f64) -> Result<()> {
    let as_int = |v: f64| -> Result<u32> {
        if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) {
            Ok(v as u32)
        } else {
            Err(Error::Config(format!("{param} needs a non-negative integer, got {v}")))
        }
    };
    match param {
        "max_depth" => {
            cfg.clustering.max_tree_depth = as_int(value)? as usize;
        }
        "partition_round" => {
            let start = as_int(value)?;
            let end = cfg.partition_config().partition_window.1.max(start + 1);
            cfg.clustering.partition_window = Some((start, end));
        }
        "clustering_start_round" => cfg.clustering.clustering_start_round = Some(as_int(value)?),
        "epsilon" => cfg.clustering.epsilon = value,
        "corrupted_fraction" => cfg.faults.corrupted_fraction = value,
        "sigma" => {
            cfg.ldp.enabled = value > 0.0;
            cfg.ldp.noise_scale = value;
        }
        "loss_rate" => cfg.faults.affinity_loss_rate = value,
        "k" => cfg.clustering.k = as_int(value)? as usize,
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter {other:?} (expected one of {})",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    cfg.validate()
}

pub fn parse_values(values: &str) -> Result<Vec<f64>> {
    let parsed = values
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("bad sweep value {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if parsed.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    Ok(parsed)
}

/// One child run per value under `<out>/<param>=<value>/`, plus a combined
/// `summary.csv`.
pub fn cmd_sweep(
    config_path: &Path,
    param: &str,
    values: &[f64],
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<PathBuf> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut base = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        base.seed = s;
    }
    let dir = output_dir(&base, out)?;
    let configs = values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            apply_sweep_value(&mut cfg, param, v)?;
            Ok((v, cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    let outcomes = configs
        .par_iter()
        .map(|(v, cfg)| run_into(cfg, &dir.join(format!("{param}={}", fmt_g9(*v))), None))
        .collect::<Result<Vec<_>>>()?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record([
        "param",
        "value",
        "final_accuracy",
        "accuracy_variance",
        "worst10_accuracy",
        "best10_accuracy",
        "ari",
        "j_single_cohort",
        "j_leaves",
        "num_leaves",
        "partitions",
        "sim_time",
        "blacklisted",
    ])?;
    for ((v, _), o) in configs.iter().zip(&outcomes) {
        let s = &o.summary;
        w.write_record([
            param.to_string(),
            fmt_g9(*v),
            fmt_opt(s.final_accuracy),
            fmt_opt(s.bias.map(|b| b.variance)),
            fmt_opt(s.bias.map(|b| b.worst10_mean)),
            fmt_opt(s.bias.map(|b| b.best10_mean)),
            fmt_opt(s.ari),
            fmt_g9(s.j_single),
            fmt_g9(s.j_leaves),
            s.num_leaves.to_string(),
            s.partitions.to_string(),
            fmt_g9(s.sim_time),
            s.blacklisted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(dir)
}

/// Exit status for an error: 2 for configuration problems, 3 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 3,
    }
}
