#![allow(dead_code)]

use cohortfl::config::ExperimentConfig;
use cohortfl::engine::{run_experiment, ExperimentOutcome};

/// Four latent cohorts with conflicting label mappings, 1000 clients at 5%
/// availability, 100 participants per round for 300 rounds.
pub const SEPARATED: &str = r#"
seed = 1

[population]
num_clients = 1000
num_classes = 4
feature_dim = 8
num_latent_cohorts = 4
label_skew = 0.8
conflicting_labels = true

[population.generator]
class_separation = 1.5
client_concentration = 100.0

[population.generator.availability]
duty_cycle = 0.05
mean_session_secs = 7200.0

[engine]
rounds = 300
target_participants = 100
lr = 0.0002

[clustering]
k = 4
clustering_start_round = 5
"#;

/// A few hundred clients and a short horizon, for engine mechanics.
pub const SMALL: &str = r#"
seed = 7

[population]
num_clients = 300
num_classes = 4
feature_dim = 6
num_latent_cohorts = 2
label_skew = 0.8
conflicting_labels = true

[population.generator.availability]
duty_cycle = 0.2
mean_session_secs = 3600.0

[engine]
rounds = 40
target_participants = 30
lr = 0.01

[clustering]
k = 2
clustering_start_round = 3
partition_window = [8, 30]
"#;

pub fn config(text: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(text).expect("workload parses");
    cfg.seed = seed;
    cfg
}

pub fn separated(seed: u64) -> ExperimentConfig {
    config(SEPARATED, seed)
}

pub fn small(seed: u64) -> ExperimentConfig {
    config(SMALL, seed)
}

pub fn baseline_of(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut b = cfg.clone();
    b.clustering.enabled = false;
    b
}

pub fn run(cfg: &ExperimentConfig) -> ExperimentOutcome {
    run_experiment(cfg).expect("experiment runs")
}

/// (sim_end, global_accuracy) on evaluation rounds.
pub fn accuracy_series(o: &ExperimentOutcome) -> Vec<(f64, f64)> {
    o.reports.iter().filter_map(|r| r.global_accuracy.map(|a| (r.sim_end, a))).collect()
}
