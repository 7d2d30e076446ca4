//! Experiment configuration loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::PartitionConfig;
use crate::error::{Error, Result};
use crate::fltrain::{LdpConfig, ModelKind, ModelSpec, TrainParams, YogiConfig};
use crate::population::{AvailabilitySpec, GeneratorOptions, LatentCohortSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub population: PopulationSection,
    #[serde(default)]
    pub model: ModelSection,
    pub engine: EngineSection,
    #[serde(default)]
    pub clustering: ClusteringSection,
    #[serde(default)]
    pub yogi: YogiConfig,
    #[serde(default)]
    pub ldp: LdpConfig,
    #[serde(default)]
    pub faults: FaultSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSection {
    pub num_clients: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_latent")]
    pub num_latent_cohorts: usize,
    #[serde(default = "default_skew")]
    pub label_skew: f64,
    #[serde(default)]
    pub feature_shift: f64,
    #[serde(default)]
    pub conflicting_labels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub generator: GeneratorOptions,
}

fn default_classes() -> usize {
    4
}
fn default_feature_dim() -> usize {
    8
}
fn default_latent() -> usize {
    1
}
fn default_skew() -> f64 {
    0.8
}

impl PopulationSection {
    pub fn latent_spec(&self) -> LatentCohortSpec {
        let mut spec = LatentCohortSpec::uniform(self.num_latent_cohorts, self.label_skew, self.feature_shift);
        spec.conflicting_labels = self.conflicting_labels;
        if let Some(w) = &self.cohort_weights {
            spec.cohort_weights = w.clone();
        }
        spec
    }

    pub fn availability(&self) -> &AvailabilitySpec {
        &self.generator.availability
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden_units: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::Logistic, hidden_units: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    Yogi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub rounds: u32,
    #[serde(default = "default_target")]
    pub target_participants: usize,
    #[serde(default = "default_overcommit")]
    pub overcommit: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_k_steps")]
    pub k_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_true")]
    pub weighted_aggregation: bool,
    #[serde(default = "default_eval_every")]
    pub eval_every: u32,
    #[serde(default = "default_eval_clients")]
    pub eval_clients: usize,
    /// Seconds a cohort waits before retrying when nobody is available.
    #[serde(default = "default_idle")]
    pub idle_quantum_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

fn default_target() -> usize {
    100
}
fn default_overcommit() -> f64 {
    0.25
}
fn default_lr() -> f64 {
    0.05
}
fn default_k_steps() -> usize {
    10
}
fn default_batch() -> usize {
    6
}
fn default_algorithm() -> Algorithm {
    Algorithm::Fedavg
}
fn default_true() -> bool {
    true
}
fn default_eval_every() -> u32 {
    5
}
fn default_eval_clients() -> usize {
    100
}
fn default_idle() -> f64 {
    60.0
}

impl EngineSection {
    pub fn train_params(&self) -> TrainParams {
        TrainParams { k_steps: self.k_steps, batch_size: self.batch_size, lr: self.lr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringSection {
    pub enabled: bool,
    pub k: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub min_participants_per_cohort: usize,
    pub max_tree_depth: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clustering_start_round: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition_window: Option<(u32, u32)>,
    pub warmup_rounds: u32,
    pub churn_threshold: f64,
    pub churn_window: usize,
    pub reduction_window: usize,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        let p = PartitionConfig::default();
        Self {
            enabled: true,
            k: 2,
            epsilon: 0.9,
            gamma: 0.2,
            alpha: p.alpha,
            min_participants_per_cohort: p.min_participants_per_cohort,
            max_tree_depth: p.max_tree_depth,
            clustering_start_round: None,
            partition_window: None,
            warmup_rounds: p.warmup_rounds,
            churn_threshold: p.churn_threshold,
            churn_window: p.churn_window,
            reduction_window: p.reduction_window,
        }
    }
}

impl ClusteringSection {
    /// Whether the run may ever grow beyond a single cohort.
    pub fn partitioning(&self) -> bool {
        self.enabled && self.max_tree_depth > 0
    }

    pub fn partition_config(&self, rounds: u32) -> PartitionConfig {
        let base = PartitionConfig::for_rounds(rounds);
        let start = self.clustering_start_round.unwrap_or(base.clustering_start_round);
        PartitionConfig {
            alpha: self.alpha,
            min_participants_per_cohort: self.min_participants_per_cohort,
            required_reduction_exponent: base.required_reduction_exponent,
            clustering_start_round: start,
            partition_window: self.partition_window.unwrap_or(base.partition_window),
            max_tree_depth: self.max_tree_depth,
            warmup_rounds: self.warmup_rounds,
            churn_threshold: self.churn_threshold,
            churn_window: self.churn_window,
            reduction_window: self.reduction_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortCrash {
    /// Dotted cohort path, e.g. "0.1".
    pub cohort: String,
    /// Crash at this simulated time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    /// Crash right after the cohort finishes this round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after_round: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatorCrash {
    pub start: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultSection {
    pub cohort_crashes: Vec<CohortCrash>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coordinator_crash: Option<CoordinatorCrash>,
    pub affinity_loss_rate: f64,
    pub corrupted_fraction: f64,
    /// Corrupted clients claim random cluster indices.
    pub fake_affinity: bool,
    pub detection: bool,
    pub strike_threshold: u32,
    pub reward_gate: f64,
    pub checkpoint_every: u32,
    pub respawn_delay_secs: f64,
    /// Write checkpoint files here in addition to keeping them in memory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for FaultSection {
    fn default() -> Self {
        Self {
            cohort_crashes: Vec::new(),
            coordinator_crash: None,
            affinity_loss_rate: 0.0,
            corrupted_fraction: 0.0,
            fake_affinity: true,
            detection: false,
            strike_threshold: 3,
            reward_gate: 0.5,
            checkpoint_every: 5,
            respawn_delay_secs: 0.0,
            checkpoint_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> ModelSpec {
        let p = &self.population;
        match self.model.kind {
            ModelKind::Logistic => ModelSpec::logistic(p.feature_dim, p.num_classes),
            ModelKind::Mlp => ModelSpec::mlp(p.feature_dim, p.num_classes, self.model.hidden_units),
        }
    }

    pub fn partition_config(&self) -> PartitionConfig {
        self.clustering.partition_config(self.engine.rounds)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let p = &self.population;
        if p.num_clients == 0 {
            return bad("population.num_clients must be >= 1".into());
        }
        if p.num_classes < 2 {
            return bad("population.num_classes must be >= 2".into());
        }
        if p.feature_dim == 0 {
            return bad("population.feature_dim must be >= 1".into());
        }
        p.latent_spec().validate()?;
        p.generator.validate()?;
        let e = &self.engine;
        if e.rounds == 0 {
            return bad("engine.rounds must be >= 1".into());
        }
        if e.target_participants == 0 {
            return bad("engine.target_participants must be >= 1".into());
        }
        if !(e.overcommit >= 0.0 && e.overcommit.is_finite()) {
            return bad("engine.overcommit must be >= 0".into());
        }
        if !(e.lr > 0.0) || e.k_steps == 0 || e.batch_size == 0 {
            return bad("engine.lr, engine.k_steps and engine.batch_size must be positive".into());
        }
        if e.eval_every == 0 || e.eval_clients == 0 {
            return bad("engine.eval_every and engine.eval_clients must be >= 1".into());
        }
        if !(e.idle_quantum_secs > 0.0) {
            return bad("engine.idle_quantum_secs must be > 0".into());
        }
        if self.model.kind == ModelKind::Mlp && self.model.hidden_units == 0 {
            return bad("model.hidden_units must be >= 1".into());
        }
        let c = &self.clustering;
        if c.k < 2 {
            return bad("clustering.k must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&c.epsilon) {
            return bad("clustering.epsilon must be in [0, 1]".into());
        }
        if !(c.gamma > 0.0 && c.gamma <= 1.0) {
            return bad("clustering.gamma must be in (0, 1]".into());
        }
        self.partition_config().validate().map_err(|m| Error::Config(format!("clustering: {m}")))?;
        self.yogi.validate()?;
        self.ldp.validate()?;
        let f = &self.faults;
        if !(0.0..=1.0).contains(&f.affinity_loss_rate) {
            return bad("faults.affinity_loss_rate must be in [0, 1]".into());
        }
        if !(0.0..=0.15).contains(&f.corrupted_fraction) {
            return bad("faults.corrupted_fraction must be in [0, 0.15]".into());
        }
        if f.strike_threshold == 0 || f.checkpoint_every == 0 {
            return bad("faults.strike_threshold and faults.checkpoint_every must be >= 1".into());
        }
        if !(f.respawn_delay_secs >= 0.0) {
            return bad("faults.respawn_delay_secs must be >= 0".into());
        }
        for crash in &f.cohort_crashes {
            crash
                .cohort
                .parse::<crate::cohorttree::CohortId>()
                .map_err(|e| Error::Config(format!("faults.cohort_crashes: {e}")))?;
            if crash.time.is_some() == crash.after_round.is_some() {
                return bad(format!("faults.cohort_crashes[{}]: set exactly one of time or after_round", crash.cohort));
            }
        }
        if let Some(cc) = f.coordinator_crash {
            if !(cc.start >= 0.0 && cc.duration >= 0.0) {
                return bad("faults.coordinator_crash start and duration must be >= 0".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 7\n[population]\nnum_clients = 50\n[engine]\nrounds = 10\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.engine.batch_size, 6);
        assert_eq!(cfg.engine.overcommit, 0.25);
        assert_eq!(cfg.clustering.epsilon, 0.9);
        assert_eq!(cfg.clustering.gamma, 0.2);
        assert_eq!(cfg.partition_config().partition_window, (2, 8));
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn missing_field_is_named() {
        let err = ExperimentConfig::from_toml_str("seed = 1\n[engine]\nrounds = 3\n").unwrap_err();
        assert!(err.to_string().contains("population"), "{err}");
        let err = ExperimentConfig::from_toml_str("seed = 1\n[population]\n[engine]\nrounds = 3\n").unwrap_err();
        assert!(err.to_string().contains("num_clients"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let err = ExperimentConfig::from_toml_str(&format!("{MINIMAL}bogus = 1\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn validation_catches_ranges() {
        let cfg = format!("{MINIMAL}[faults]\ncorrupted_fraction = 0.5\n");
        assert!(ExperimentConfig::from_toml_str(&cfg).is_err());
        let cfg = format!("{MINIMAL}[clustering]\nk = 1\n");
        assert!(ExperimentConfig::from_toml_str(&cfg).is_err());
        let cfg = format!("{MINIMAL}[[faults.cohort_crashes]]\ncohort = \"0\"\n");
        assert!(ExperimentConfig::from_toml_str(&cfg).is_err());
        let cfg = format!("{MINIMAL}[[faults.cohort_crashes]]\ncohort = \"0\"\nafter_round = 3\n");
        assert!(ExperimentConfig::from_toml_str(&cfg).is_ok());
    }
}
