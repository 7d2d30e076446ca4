//! Discrete-event simulation of cohort training on a shared clock.
//!
//! Every active leaf runs its own sequence of rounds: match available
//! clients, select and time participants, aggregate their updates, cluster
//! them, send affinity feedback and decide whether to split. Rounds of
//! different leaves interleave on the clock but interact only through the
//! clients they compete for.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::clustering::{exploit_reward, partition_criteria, ClusterState, PartitionConfig, RootBaseline};
use crate::cohorttree::{
    client_apply_feedback, client_select_cohort, feedback, match_request, resolved_leaf, AffinityRequest,
    AffinityStore, CohortId, CohortTree, NodeStatus,
};
use crate::config::{Algorithm, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fltrain::{
    apply_ldp, client_accuracy, fedavg_aggregate, local_train, yogi_aggregate, GradientUpdate, ModelSpec, ModelWeights,
    YogiState,
};
use crate::population::{
    adjusted_rand_index, generate_population_with, heterogeneity_j, ClientId, ClientProfile, Population,
};
use crate::report::{fmt_g9, fmt_opt};
use crate::resilience::{
    client_affinity_loss, corrupt_clients, detect_anomalies, Blacklist, Checkpoint, CrashTrigger, DetectionConfig,
    FaultPlan,
};
use crate::rng::{derive_seed, key_hash, stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub cohort_id: CohortId,
    pub round: u32,
    pub sim_start: f64,
    pub sim_end: f64,
    pub invited: usize,
    pub participants: Vec<ClientId>,
    pub stragglers: usize,
    pub failures: usize,
    pub mean_loss: f64,
    /// Leaf model accuracy on a sample of its members, on evaluation rounds.
    pub test_accuracy: Option<f64>,
    /// Accuracy of every participated clean client on its assigned leaf.
    pub global_accuracy: Option<f64>,
    pub reduction: Option<f64>,
    pub num_leaves: usize,
    pub partition: Option<Vec<CohortId>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub kind: &'static str,
    pub cohort: Option<CohortId>,
    pub round: Option<u32>,
    pub client: Option<ClientId>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub client_id: ClientId,
    pub latent_cohort: usize,
    pub corrupted: bool,
    pub participations: u32,
    pub assigned_leaf: Option<CohortId>,
    /// Cohort of the client's most recent round.
    pub last_cohort: Option<CohortId>,
    pub accuracy: Option<f64>,
    pub blacklisted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasStats {
    pub variance: f64,
    pub worst10_mean: f64,
    pub best10_mean: f64,
}

/// Population variance and bottom/top decile means.
pub fn bias_stats(per_client_accuracy: &[f64]) -> Result<BiasStats> {
    let n = per_client_accuracy.len();
    if n < 10 {
        return Err(Error::Contract(format!("bias_stats needs >= 10 clients, got {n}")));
    }
    let mut v = per_client_accuracy.to_vec();
    v.sort_by(f64::total_cmp);
    // shifted by the minimum so equal inputs give exactly zero
    let shift = v[0];
    let mean = v.iter().map(|x| x - shift).sum::<f64>() / n as f64;
    let variance = v.iter().map(|x| (x - shift - mean) * (x - shift - mean)).sum::<f64>() / n as f64;
    let d = n / 10;
    Ok(BiasStats {
        variance,
        worst10_mean: v[..d].iter().sum::<f64>() / d as f64,
        best10_mean: v[n - d..].iter().sum::<f64>() / d as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub final_accuracy: Option<f64>,
    pub bias: Option<BiasStats>,
    pub ari: Option<f64>,
    pub j_single: f64,
    pub j_leaves: f64,
    pub num_leaves: usize,
    pub partitions: usize,
    pub sim_time: f64,
    pub participated_clients: usize,
    pub corrupted_clients: usize,
    pub blacklisted: usize,
    pub blacklisted_clean: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub events: Vec<EventRecord>,
    pub clients: Vec<ClientOutcome>,
    pub tree: CohortTree,
    pub models: BTreeMap<CohortId, ModelWeights>,
    pub summary: Summary,
}

impl ExperimentOutcome {
    /// Simulated time at which global accuracy first reached `target`.
    pub fn time_to_accuracy(&self, target: f64) -> Option<f64> {
        time_to_accuracy(self.reports.iter().filter_map(|r| r.global_accuracy.map(|a| (r.sim_end, a))), target)
    }

    pub fn best_global_accuracy(&self) -> Option<f64> {
        self.reports.iter().filter_map(|r| r.global_accuracy).max_by(f64::total_cmp)
    }
}

/// First time in a (time, accuracy) series at which accuracy reaches `target`.
pub fn time_to_accuracy(series: impl IntoIterator<Item = (f64, f64)>, target: f64) -> Option<f64> {
    series.into_iter().filter(|(_, a)| *a >= target).map(|(t, _)| t).min_by(f64::total_cmp)
}

#[derive(Debug, Clone, PartialEq)]
enum Pending {
    Idle,
    Matched { session: usize, leaf: CohortId, request: AffinityRequest, exploit: bool },
    Dropped { session: usize },
}

#[derive(Debug, Clone)]
struct ClientState {
    store: AffinityStore,
    busy_until: f64,
    pending: Pending,
    selections: u64,
    participations: u32,
    last_cohort: Option<CohortId>,
    loss_round: Option<u32>,
}

#[derive(Debug, Clone)]
struct InFlight {
    round: u32,
    start: f64,
    invited: Vec<ClientId>,
    kept: Vec<ClientId>,
    stragglers: usize,
    failures: usize,
    /// Request that brought each kept participant here, and whether it was an
    /// exploit (argmax) choice.
    requests: BTreeMap<ClientId, (AffinityRequest, bool)>,
}

#[derive(Debug, Clone)]
struct JournalEntry {
    round: u32,
    participants: Vec<ClientId>,
}

#[derive(Debug, Clone)]
struct CohortState {
    model: ModelWeights,
    yogi: Option<YogiState>,
    cluster: ClusterState,
    rounds_done: u32,
    generation: u64,
    in_flight: Option<InFlight>,
    checkpoint: Vec<u8>,
    journal: Vec<JournalEntry>,
}

#[derive(Debug, Clone, PartialEq)]
enum Event {
    RoundEnd { cohort: CohortId, generation: u64 },
    Crash { cohort: CohortId },
    RoundStart { cohort: CohortId, generation: u64 },
}

impl Event {
    fn priority(&self) -> u8 {
        match self {
            Event::RoundEnd { .. } => 0,
            Event::Crash { .. } => 1,
            Event::RoundStart { .. } => 2,
        }
    }

    fn cohort(&self) -> &CohortId {
        match self {
            Event::RoundEnd { cohort, .. } | Event::Crash { cohort } | Event::RoundStart { cohort, .. } => cohort,
        }
    }
}

struct Scheduled {
    time: f64,
    seq: u64,
    event: Event,
}

impl Scheduled {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.event.priority().cmp(&other.event.priority()))
            .then_with(|| self.event.cohort().cmp(other.event.cohort()))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.key_cmp(self)
    }
}

/// Simulated clock plus pending events, popped in time order.
#[derive(Default)]
pub struct SimClock {
    now: f64,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
}

impl SimClock {
    pub fn now(&self) -> f64 {
        self.now
    }

    fn schedule(&mut self, time: f64, event: Event) {
        debug_assert!(time >= self.now);
        self.seq += 1;
        self.queue.push(Scheduled { time, seq: self.seq, event });
    }

    fn pop(&mut self) -> Option<(f64, Event)> {
        let s = self.queue.pop()?;
        self.now = s.time;
        Some((s.time, s.event))
    }
}

fn cohort_key(id: &CohortId) -> u64 {
    key_hash(id.to_string().as_bytes())
}

/// Discriminator of one cohort round in the training and clustering streams.
pub fn round_key(id: &CohortId, round: u32) -> u64 {
    cohort_key(id) ^ (u64::from(round) << 40)
}

/// Root model before the first round.
pub fn initial_model(cfg: &ExperimentConfig) -> ModelWeights {
    cfg.model_spec().init(derive_seed(cfg.seed, Stream::Training, u64::MAX, 0))
}

/// Runs one configured experiment on a freshly generated population.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let population = build_population(cfg)?;
    Engine::new(cfg.clone(), population)?.run()
}

pub fn build_population(cfg: &ExperimentConfig) -> Result<Population> {
    let p = &cfg.population;
    let pop_seed = derive_seed(cfg.seed, Stream::Population, 0, 0);
    let mut population = generate_population_with(
        &p.latent_spec(),
        &p.generator,
        p.num_clients,
        p.num_classes,
        p.feature_dim,
        pop_seed,
    )?;
    if cfg.faults.corrupted_fraction > 0.0 {
        corrupt_clients(&mut population, cfg.faults.corrupted_fraction, derive_seed(cfg.seed, Stream::Faults, 0, 0))?;
    }
    Ok(population)
}

pub struct Engine {
    cfg: ExperimentConfig,
    spec: ModelSpec,
    partition: PartitionConfig,
    faults: FaultPlan,
    detection: DetectionConfig,
    population: Population,
    clients: Vec<ClientState>,
    tree: CohortTree,
    cohorts: BTreeMap<CohortId, CohortState>,
    clock: SimClock,
    blacklist: Blacklist,
    root_baseline: Option<RootBaseline>,
    /// Final cluster labels of each partitioned cohort, by client.
    identified: BTreeMap<CohortId, BTreeMap<ClientId, usize>>,
    global_round: u32,
    stopped: bool,
    reports: Vec<RoundReport>,
    events: Vec<EventRecord>,
}

impl Engine {
    pub fn new(cfg: ExperimentConfig, population: Population) -> Result<Self> {
        cfg.validate()?;
        if population.num_classes != cfg.population.num_classes || population.feature_dim != cfg.population.feature_dim
        {
            return Err(Error::Config("population shape does not match the model configuration".into()));
        }
        let spec = cfg.model_spec();
        let faults = FaultPlan::from_section(&cfg.faults)?;
        let loss = client_affinity_loss(
            population.len(),
            faults.client_affinity_loss_rate,
            cfg.engine.rounds,
            derive_seed(cfg.seed, Stream::Faults, 1, 0),
        );
        let clients = loss
            .into_iter()
            .map(|loss_round| ClientState {
                store: AffinityStore::default(),
                busy_until: f64::NEG_INFINITY,
                pending: Pending::Idle,
                selections: 0,
                participations: 0,
                last_cohort: None,
                loss_round,
            })
            .collect();
        let tree = CohortTree::new(cfg.engine.target_participants);
        let partition = cfg.partition_config();
        let detection =
            DetectionConfig { reward_gate: cfg.faults.reward_gate, strike_threshold: cfg.faults.strike_threshold };
        let mut engine = Self {
            spec,
            partition,
            faults,
            detection,
            population,
            clients,
            tree,
            cohorts: BTreeMap::new(),
            clock: SimClock::default(),
            blacklist: Blacklist::default(),
            root_baseline: None,
            identified: BTreeMap::new(),
            global_round: 0,
            stopped: false,
            reports: Vec::new(),
            events: Vec::new(),
            cfg,
        };
        let root = CohortId::root();
        let model = initial_model(&engine.cfg);
        engine.spawn_cohort(root, model, 0, 0.0)?;
        Ok(engine)
    }

    fn log(
        &mut self,
        kind: &'static str,
        cohort: Option<&CohortId>,
        round: Option<u32>,
        client: Option<ClientId>,
        detail: String,
    ) {
        self.events.push(EventRecord { time: self.clock.now, kind, cohort: cohort.cloned(), round, client, detail });
    }

    fn fresh_optimizer(&self) -> Option<YogiState> {
        (self.cfg.engine.algorithm == Algorithm::Yogi).then(|| YogiState::new(self.spec.dim(), self.cfg.yogi))
    }

    /// Participants the parent's clustering placed in this cohort. Falls back
    /// to clients that chose the cohort as their best fit.
    fn known_members(
        &self,
        id: &CohortId,
        participants: &[ClientId],
        requests: &BTreeMap<ClientId, (AffinityRequest, bool)>,
    ) -> BTreeSet<ClientId> {
        if let (Some(parent), Some(&index)) = (id.parent(), id.path().last()) {
            if let Some(labels) = self.identified.get(&parent) {
                let known: BTreeSet<ClientId> =
                    participants.iter().copied().filter(|c| labels.get(c) == Some(&(index as usize))).collect();
                if !known.is_empty() {
                    return known;
                }
            }
        }
        requests.iter().filter(|(_, (_, exploit))| *exploit).map(|(c, _)| *c).collect()
    }

    fn spawn_cohort(&mut self, id: CohortId, model: ModelWeights, rounds_done: u32, at: f64) -> Result<()> {
        let mut state = CohortState {
            model,
            yogi: self.fresh_optimizer(),
            cluster: ClusterState::new(self.cfg.clustering.k),
            rounds_done,
            generation: 0,
            in_flight: None,
            checkpoint: Vec::new(),
            journal: Vec::new(),
        };
        self.take_checkpoint(&id, &mut state)?;
        self.cohorts.insert(id.clone(), state);
        if rounds_done < self.cfg.engine.rounds {
            self.clock.schedule(at, Event::RoundStart { cohort: id, generation: 0 });
        }
        Ok(())
    }

    fn take_checkpoint(&self, id: &CohortId, state: &mut CohortState) -> Result<()> {
        let ck = Checkpoint {
            cohort_id: id.clone(),
            round: state.rounds_done,
            model: state.model.clone(),
            optimizer: state.yogi.clone(),
            cluster: state.cluster.clone(),
            tree: self.tree.clone(),
            written_at: self.clock.now,
        };
        if let Some(dir) = &self.cfg.faults.checkpoint_dir {
            ck.write_to_dir(dir)?;
        }
        state.checkpoint = ck.encode();
        state.journal.clear();
        Ok(())
    }

    pub fn run(mut self) -> Result<ExperimentOutcome> {
        if let Some((start, len)) = self.faults.coordinator_crash {
            if len > 0.0 {
                self.events.push(EventRecord {
                    time: start,
                    kind: "coordinator_crash",
                    cohort: None,
                    round: None,
                    client: None,
                    detail: format!("down for {}s", fmt_g9(len)),
                });
            }
        }
        for (trigger, cohort) in self.faults.cohort_crashes.clone() {
            if let CrashTrigger::At(t) = trigger {
                self.clock.schedule(t.max(0.0), Event::Crash { cohort });
            }
        }
        while let Some((t, event)) = self.clock.pop() {
            match event {
                Event::RoundStart { cohort, generation } => self.start_round(&cohort, generation, t)?,
                Event::RoundEnd { cohort, generation } => self.finish_round(&cohort, generation, t)?,
                Event::Crash { cohort } => self.crash(&cohort, t)?,
            }
        }
        Ok(self.finish())
    }

    /// Matching stage: every free online client without a live match sends a
    /// request to the coordinator.
    fn refresh_matches(&mut self, t: f64) {
        let leaves = self.tree.num_leaves();
        let coordinator_down = self.faults.coordinator_down(t);
        let mut dropped = 0usize;
        for idx in 0..self.clients.len() {
            let id = idx as ClientId;
            if self.blacklist.contains(id) {
                continue;
            }
            let Some((session, _)) = self.population.clients[idx].session_at(t) else {
                continue;
            };
            if self.clients[idx].busy_until > t {
                continue;
            }
            if self.clients[idx].loss_round.is_some_and(|r| r <= self.global_round) {
                let c = &mut self.clients[idx];
                c.loss_round = None;
                c.store.clear();
                c.pending = Pending::Idle;
                self.log("affinity_loss", None, Some(self.global_round), Some(id), String::new());
            }
            let c = &self.clients[idx];
            let live = match &c.pending {
                Pending::Matched { session: s, leaf, .. } => *s == session && self.tree.is_leaf(leaf),
                Pending::Dropped { session: s } => *s == session,
                Pending::Idle => false,
            };
            if live {
                continue;
            }
            if coordinator_down {
                self.clients[idx].pending = Pending::Dropped { session };
                dropped += 1;
                continue;
            }
            let c = &mut self.clients[idx];
            c.selections += 1;
            let sel_seed = derive_seed(self.cfg.seed, Stream::Selection, u64::from(id), c.selections);
            let mut request =
                client_select_cohort(id, &c.store, leaves, self.cfg.clustering.epsilon, self.global_round, sel_seed);
            let exploit = request.requested_cohort.is_some()
                && c.store.best().map(|(b, _)| b) == request.requested_cohort.as_ref();
            let mut rng = stream_rng(self.cfg.seed, Stream::Matching, u64::from(id), c.selections);
            if self.population.clients[idx].corrupted
                && self.cfg.faults.fake_affinity
                && request.requested_cohort.is_some()
            {
                request.cluster_index = Some(rng.random_range(0..self.cfg.clustering.k));
            }
            let leaf = match_request(&self.tree, &request, &mut rng);
            self.clients[idx].pending = Pending::Matched { session, leaf, request, exploit };
        }
        if dropped > 0 {
            self.log("requests_dropped", None, None, None, format!("{dropped}"));
        }
    }

    fn start_round(&mut self, id: &CohortId, generation: u64, t: f64) -> Result<()> {
        let Some(state) = self.cohorts.get(id) else { return Ok(()) };
        if state.generation != generation || state.in_flight.is_some() || self.stopped || !self.tree.is_leaf(id) {
            return Ok(());
        }
        if state.rounds_done >= self.cfg.engine.rounds {
            return Ok(());
        }
        let round = state.rounds_done;
        self.tree.set_status(id, NodeStatus::ActiveLeaf);
        self.refresh_matches(t);

        let mut candidates: Vec<ClientId> = self
            .clients
            .iter()
            .enumerate()
            .filter(|(_, c)| c.busy_until <= t)
            .filter_map(|(i, c)| match &c.pending {
                Pending::Matched { leaf, session, .. }
                    if leaf == id && self.population.clients[i].session_at(t).is_some_and(|(s, _)| s == *session) =>
                {
                    Some(i as ClientId)
                }
                _ => None,
            })
            .filter(|cid| !self.blacklist.contains(*cid))
            .collect();
        let quantum = self.cfg.engine.idle_quantum_secs;
        if candidates.is_empty() {
            self.log("idle", Some(id), Some(round), None, "no available clients".into());
            self.clock.schedule(t + quantum, Event::RoundStart { cohort: id.clone(), generation });
            return Ok(());
        }

        let target = self.tree.node(id).map_or(1, |n| n.budget.max(1));
        let oc = self.cfg.engine.overcommit;
        let invite_n = candidates.len().min((target as f64 * (1.0 + oc)).ceil() as usize);
        let keep_n = target.min((invite_n as f64 / (1.0 + oc)).ceil() as usize);
        let mut rng = stream_rng(self.cfg.seed, Stream::Selection, round_key(id, round), 0x5e1);
        candidates.shuffle(&mut rng);
        let mut invited: Vec<ClientId> = candidates[..invite_n].to_vec();
        invited.sort_unstable();
        if invite_n < (target as f64 * (1.0 + oc)).ceil() as usize {
            self.log("short_round", Some(id), Some(round), None, format!("{invite_n} available for target {target}"));
        }

        let work = (self.cfg.engine.batch_size * self.cfg.engine.k_steps) as f64;
        let mut finishers: Vec<(f64, ClientId)> = Vec::new();
        let mut failures = 0usize;
        for &cid in &invited {
            let p = &self.population.clients[cid as usize];
            let dur = work / p.compute_speed + p.network_time;
            let session_end = p.session_at(t).map_or(t, |(_, end)| end);
            if t + dur <= session_end {
                finishers.push((dur, cid));
            } else {
                failures += 1;
            }
        }
        finishers.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let kept_n = keep_n.min(finishers.len());
        let stragglers = finishers.len() - kept_n;
        if kept_n == 0 {
            for &cid in &invited {
                let c = &mut self.clients[cid as usize];
                c.pending = Pending::Idle;
            }
            self.log(
                "round_failed",
                Some(id),
                Some(round),
                None,
                format!("all {invite_n} invited clients dropped out"),
            );
            self.clock.schedule(t + quantum, Event::RoundStart { cohort: id.clone(), generation });
            return Ok(());
        }
        let end = t + finishers[kept_n - 1].0;
        let mut kept: Vec<ClientId> = finishers[..kept_n].iter().map(|(_, c)| *c).collect();
        kept.sort_unstable();

        let mut requests = BTreeMap::new();
        for &cid in &invited {
            let c = &mut self.clients[cid as usize];
            c.busy_until = end;
            if let Pending::Matched { request, exploit, .. } = std::mem::replace(&mut c.pending, Pending::Idle) {
                if kept.binary_search(&cid).is_ok() {
                    requests.insert(cid, (request, exploit));
                }
            }
        }
        let state = self.cohorts.get_mut(id).expect("checked above");
        state.in_flight = Some(InFlight { round, start: t, invited, kept, stragglers, failures, requests });
        self.clock.schedule(end, Event::RoundEnd { cohort: id.clone(), generation });
        Ok(())
    }

    /// Local training of `participants` against `model`, in client order.
    fn train(
        &self,
        id: &CohortId,
        round: u32,
        model: &ModelWeights,
        participants: &[ClientId],
    ) -> Vec<Result<GradientUpdate>> {
        let params = self.cfg.engine.train_params();
        let seed = self.cfg.seed;
        let key = round_key(id, round);
        let ldp = self.cfg.ldp;
        participants
            .par_iter()
            .map(|&cid| {
                let client = &self.population.clients[cid as usize];
                let train_seed = derive_seed(seed, Stream::Training, u64::from(cid), key);
                let update = local_train(&self.spec, model, client, params, train_seed)?;
                Ok(apply_ldp(&update, &ldp, derive_seed(seed, Stream::Ldp, u64::from(cid), key)))
            })
            .collect()
    }

    /// Aggregation and clustering: the part of a round that changes cohort
    /// state, shared by live rounds and checkpoint replay.
    fn apply_round(
        cfg: &ExperimentConfig,
        partition: &PartitionConfig,
        id: &CohortId,
        state: &mut CohortState,
        updates: &[GradientUpdate],
        round: u32,
    ) -> Result<Option<BTreeMap<ClientId, usize>>> {
        let weighted = cfg.engine.weighted_aggregation;
        match &state.yogi {
            Some(y) => {
                let (w, next) = yogi_aggregate(y, &state.model, updates, weighted)?;
                state.model = w;
                state.yogi = Some(next);
            }
            None => state.model = fedavg_aggregate(&state.model, updates, weighted)?,
        }
        if !cfg.clustering.partitioning() || round < partition.clustering_start_round {
            return Ok(None);
        }
        let seed = derive_seed(cfg.seed, Stream::Clustering, round_key(id, round), 0);
        let cluster = &mut state.cluster;
        if !cluster.initialized {
            if !cluster.init_prototypes(updates, round, seed) {
                return Ok(None);
            }
            cluster.estimate_reduction(updates, round, partition.reduction_window);
            return Ok(Some(updates.iter().map(|u| (u.client_id, cluster.persisted_labels[&u.client_id])).collect()));
        }
        let labels = cluster.assign_round(updates, round, seed);
        cluster.estimate_reduction(updates, round, partition.reduction_window);
        Ok(Some(labels))
    }

    fn finish_round(&mut self, id: &CohortId, generation: u64, t: f64) -> Result<()> {
        let Some(state) = self.cohorts.get_mut(id) else { return Ok(()) };
        if state.generation != generation {
            return Ok(());
        }
        let Some(flight) = state.in_flight.take() else { return Ok(()) };
        let round = flight.round;
        let model = state.model.clone();

        let mut updates = Vec::new();
        for result in self.train(id, round, &model, &flight.kept) {
            match result {
                Ok(u) => updates.push(u),
                Err(Error::TrainingFailure { client_id, reason }) => {
                    self.log("training_failure", Some(id), Some(round), Some(client_id), reason);
                }
                Err(e) => return Err(e),
            }
        }
        let quantum = self.cfg.engine.idle_quantum_secs;
        if updates.is_empty() {
            self.log("round_aborted", Some(id), Some(round), None, "no usable updates".into());
            self.clock.schedule(t + quantum.min(1.0), Event::RoundStart { cohort: id.clone(), generation });
            return Ok(());
        }
        let succeeded: Vec<ClientId> = updates.iter().map(|u| u.client_id).collect();
        let mean_loss = updates.iter().map(|u| u.loss).sum::<f64>() / updates.len() as f64;

        let state = self.cohorts.get_mut(id).expect("present");
        state.journal.push(JournalEntry { round, participants: succeeded.clone() });
        let labels = Self::apply_round(&self.cfg, &self.partition, id, state, &updates, round)?;
        let reduction = state.cluster.smoothed_reduction(self.partition.reduction_window).filter(|_| labels.is_some());
        if id.depth() == 0 && self.root_baseline.is_none() {
            if let Some(first) = state.cluster.dispersion_history.first() {
                self.root_baseline = Some(RootBaseline {
                    participants: self.cfg.engine.target_participants as f64,
                    dispersion: first.overall,
                });
            }
        }

        let known = self.known_members(id, &succeeded, &flight.requests);
        let rewards = exploit_reward(&updates, &known);
        if self.cfg.faults.detection {
            if let Some(assigned) = &labels {
                let claims: BTreeMap<ClientId, usize> = flight
                    .requests
                    .iter()
                    .filter(|(c, (req, _))| req.requested_cohort.as_ref() == Some(id) && assigned.contains_key(c))
                    .filter_map(|(c, (req, _))| req.cluster_index.map(|l| (*c, l)))
                    .collect();
                let newly =
                    detect_anomalies(&mut self.blacklist, id, round, assigned, &claims, &rewards, self.detection);
                for cid in newly {
                    let strikes = self.blacklist.strikes[&cid];
                    self.log("blacklist", Some(id), Some(round), Some(cid), format!("{strikes} strikes"));
                }
            }
        }

        let (no_rewards, no_labels) = (BTreeMap::new(), BTreeMap::new());
        let sent_rewards = if self.tree.num_leaves() > 1 { &rewards } else { &no_rewards };
        let label_map = labels.as_ref().unwrap_or(&no_labels);
        let messages = feedback(id, sent_rewards, label_map, &succeeded);
        let gamma = self.cfg.clustering.gamma;
        for (cid, msg) in messages {
            let c = &mut self.clients[cid as usize];
            client_apply_feedback(&mut c.store, &msg, &self.tree, gamma, round);
            c.participations += 1;
            c.last_cohort = Some(id.clone());
        }

        let state = self.cohorts.get_mut(id).expect("present");
        state.rounds_done += 1;
        let rounds_done = state.rounds_done;
        self.global_round = self.global_round.max(rounds_done);

        let eval_round =
            rounds_done.is_multiple_of(self.cfg.engine.eval_every) || rounds_done == self.cfg.engine.rounds;
        let (test_accuracy, global_accuracy) =
            if eval_round { (self.evaluate_leaf(id, round), self.global_accuracy()) } else { (None, None) };
        if let (Some(target), Some(acc)) = (self.cfg.engine.target_accuracy, global_accuracy) {
            if acc >= target && !self.stopped {
                self.stopped = true;
                self.log("target_reached", Some(id), Some(round), None, fmt_g9(acc));
            }
        }

        let mut partition = None;
        let state = self.cohorts.get(id).expect("present");
        if self.cfg.clustering.partitioning() && labels.is_some() && !self.stopped {
            let budget = self.tree.node(id).map_or(0, |n| n.budget) as f64;
            let decision =
                partition_criteria(&state.cluster, &self.partition, budget, round, id.depth(), self.root_baseline);
            if decision.split {
                let children = self.tree.partition_cohort(id, decision.arity, self.partition.max_tree_depth)?;
                let parent = self.cohorts.remove(id).expect("present");
                self.identified.insert(id.clone(), parent.cluster.persisted_labels.clone());
                self.log(
                    "partition",
                    Some(id),
                    Some(round),
                    None,
                    format!(
                        "reduction={} children={}",
                        fmt_opt(decision.reduction),
                        children.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
                    ),
                );
                for child in &children {
                    self.spawn_cohort(child.clone(), parent.model.clone(), parent.rounds_done, t)?;
                }
                partition = Some(children);
            }
        }
        if partition.is_none() {
            let mut state = self.cohorts.remove(id).expect("present");
            if state.rounds_done.is_multiple_of(self.cfg.faults.checkpoint_every) {
                self.take_checkpoint(id, &mut state)?;
            }
            let finished = state.rounds_done >= self.cfg.engine.rounds || self.stopped;
            let generation = state.generation;
            self.cohorts.insert(id.clone(), state);
            if !finished {
                self.clock.schedule(t, Event::RoundStart { cohort: id.clone(), generation });
            }
            for (trigger, cohort) in &self.faults.cohort_crashes {
                if *trigger == CrashTrigger::AfterRound(rounds_done) && cohort == id {
                    self.clock.schedule(t, Event::Crash { cohort: id.clone() });
                }
            }
        }

        self.reports.push(RoundReport {
            cohort_id: id.clone(),
            round,
            sim_start: flight.start,
            sim_end: t,
            invited: flight.invited.len(),
            participants: succeeded,
            stragglers: flight.stragglers,
            failures: flight.failures,
            mean_loss,
            test_accuracy,
            global_accuracy,
            reduction,
            num_leaves: self.tree.num_leaves(),
            partition,
        });
        Ok(())
    }

    fn crash(&mut self, id: &CohortId, t: f64) -> Result<()> {
        if !self.cohorts.contains_key(id) || !self.tree.is_leaf(id) {
            self.log("crash_ignored", Some(id), None, None, "not an active cohort".into());
            return Ok(());
        }
        let mut state = self.cohorts.remove(id).expect("checked");
        let aborted = state.in_flight.take();
        if let Some(f) = &aborted {
            for &cid in &f.invited {
                let c = &mut self.clients[cid as usize];
                c.busy_until = t;
                c.pending = Pending::Idle;
            }
            self.log("round_aborted", Some(id), Some(f.round), None, "cohort crashed mid-round".into());
        }
        let crashed_at = state.rounds_done;
        let ck = Checkpoint::decode(&state.checkpoint)?;
        self.log(
            "cohort_crash",
            Some(id),
            Some(crashed_at),
            None,
            format!("restoring round {} checkpoint, replaying {} rounds", ck.round, state.journal.len()),
        );
        let mut restored = CohortState {
            model: ck.model,
            yogi: ck.optimizer,
            cluster: ck.cluster,
            rounds_done: ck.round,
            generation: state.generation + 1,
            in_flight: None,
            checkpoint: std::mem::take(&mut state.checkpoint),
            journal: Vec::new(),
        };
        for entry in std::mem::take(&mut state.journal) {
            let model = restored.model.clone();
            let updates: Vec<GradientUpdate> =
                self.train(id, entry.round, &model, &entry.participants).into_iter().collect::<Result<_>>()?;
            Self::apply_round(&self.cfg, &self.partition, id, &mut restored, &updates, entry.round)?;
            restored.rounds_done = entry.round + 1;
            restored.journal.push(entry);
        }
        if restored.model != state.model || restored.rounds_done != crashed_at {
            return Err(Error::Checkpoint(format!("replay of cohort {id} diverged from its pre-crash state")));
        }
        let generation = restored.generation;
        let finished = restored.rounds_done >= self.cfg.engine.rounds || self.stopped;
        self.cohorts.insert(id.clone(), restored);
        let delay = self.cfg.faults.respawn_delay_secs;
        if delay > 0.0 {
            self.tree.set_status(id, NodeStatus::Recovering);
        }
        if !finished {
            self.clock.schedule(t + delay, Event::RoundStart { cohort: id.clone(), generation });
        }
        Ok(())
    }

    fn assigned_leaf(&self, cid: ClientId) -> Option<CohortId> {
        let c = &self.clients[cid as usize];
        resolved_leaf(&c.store, &self.tree).or_else(|| {
            let mut at = c.last_cohort.clone()?;
            while let Some(first) = self.tree.node(&at).and_then(|n| n.children.first()) {
                at = first.clone();
            }
            Some(at)
        })
    }

    fn evaluate_leaf(&self, id: &CohortId, round: u32) -> Option<f64> {
        let state = self.cohorts.get(id)?;
        let mut members: Vec<ClientId> = (0..self.clients.len() as ClientId)
            .filter(|&c| self.clients[c as usize].participations > 0 && !self.blacklist.contains(c))
            .filter(|&c| self.assigned_leaf(c).as_ref() == Some(id))
            .collect();
        if members.is_empty() {
            return None;
        }
        let mut rng = stream_rng(self.cfg.seed, Stream::Evaluation, round_key(id, round), 0);
        members.shuffle(&mut rng);
        members.truncate(self.cfg.engine.eval_clients);
        let acc: f64 = members
            .iter()
            .map(|&c| client_accuracy(&self.spec, &state.model, &self.population.clients[c as usize]))
            .sum();
        Some(acc / members.len() as f64)
    }

    /// Per-client accuracy of every participated clean client on its leaf.
    fn client_accuracies(&self) -> BTreeMap<ClientId, f64> {
        let ids: Vec<ClientId> = (0..self.clients.len() as ClientId)
            .filter(|&c| self.clients[c as usize].participations > 0 && !self.population.clients[c as usize].corrupted)
            .collect();
        ids.par_iter()
            .filter_map(|&c| {
                let leaf = self.assigned_leaf(c)?;
                let model = &self.cohorts.get(&leaf)?.model;
                Some((c, client_accuracy(&self.spec, model, &self.population.clients[c as usize])))
            })
            .collect()
    }

    fn global_accuracy(&self) -> Option<f64> {
        let acc = self.client_accuracies();
        (!acc.is_empty()).then(|| acc.values().sum::<f64>() / acc.len() as f64)
    }

    fn finish(self) -> ExperimentOutcome {
        let per_client = self.client_accuracies();
        let participated: Vec<ClientId> =
            (0..self.clients.len() as ClientId).filter(|&c| self.clients[c as usize].participations > 0).collect();
        let assigned: BTreeMap<ClientId, CohortId> =
            participated.iter().filter_map(|&c| Some((c, self.assigned_leaf(c)?))).collect();
        let leaves = self.tree.leaves();
        let leaf_index: BTreeMap<&CohortId, usize> = leaves.iter().enumerate().map(|(i, l)| (l, i)).collect();

        let members: Vec<&ClientProfile> = assigned.keys().map(|&c| &self.population.clients[c as usize]).collect();
        let by_leaf: BTreeMap<ClientId, usize> = assigned.iter().map(|(c, l)| (*c, leaf_index[l])).collect();
        let single: BTreeMap<ClientId, usize> = assigned.keys().map(|c| (*c, 0)).collect();
        let j_leaves = heterogeneity_j(&members, &by_leaf, leaves.len()).map(|h| h.j).unwrap_or(0.0);
        let j_single = heterogeneity_j(&members, &single, 1).map(|h| h.j).unwrap_or(0.0);
        let ari = (by_leaf.len() >= 2).then(|| {
            let a: Vec<usize> = by_leaf.values().copied().collect();
            let b: Vec<usize> = by_leaf.keys().map(|&c| self.population.clients[c as usize].latent_cohort).collect();
            adjusted_rand_index(&a, &b)
        });
        let accs: Vec<f64> = per_client.values().copied().collect();
        let final_accuracy = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
        let corrupted_clients = self.population.clients.iter().filter(|c| c.corrupted).count();
        let blacklisted_clean =
            self.blacklist.members.iter().filter(|&&c| !self.population.clients[c as usize].corrupted).count();
        let summary = Summary {
            final_accuracy,
            bias: bias_stats(&accs).ok(),
            ari,
            j_single,
            j_leaves,
            num_leaves: leaves.len(),
            partitions: self.events.iter().filter(|e| e.kind == "partition").count(),
            sim_time: self.clock.now,
            participated_clients: participated.len(),
            corrupted_clients,
            blacklisted: self.blacklist.members.len(),
            blacklisted_clean,
        };
        let clients = self
            .population
            .clients
            .iter()
            .map(|p| {
                let id = p.client_id;
                ClientOutcome {
                    client_id: id,
                    latent_cohort: p.latent_cohort,
                    corrupted: p.corrupted,
                    participations: self.clients[id as usize].participations,
                    assigned_leaf: assigned.get(&id).cloned(),
                    last_cohort: self.clients[id as usize].last_cohort.clone(),
                    accuracy: per_client.get(&id).copied(),
                    blacklisted: self.blacklist.contains(id),
                }
            })
            .collect();
        let models = self.cohorts.iter().map(|(id, s)| (id.clone(), s.model.clone())).collect();
        let mut events = self.events;
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        ExperimentOutcome { reports: self.reports, events, clients, tree: self.tree, models, summary }
    }
}

fn opt_str<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `rounds.csv`, `clients.csv` and `events.csv` into `dir`.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("rounds.csv"))?;
    w.write_record([
        "cohort",
        "round",
        "sim_start",
        "sim_end",
        "invited",
        "participants",
        "stragglers",
        "failures",
        "mean_loss",
        "test_accuracy",
        "global_accuracy",
        "reduction",
        "num_leaves",
        "partition",
    ])?;
    for r in &outcome.reports {
        w.write_record([
            r.cohort_id.to_string(),
            r.round.to_string(),
            fmt_g9(r.sim_start),
            fmt_g9(r.sim_end),
            r.invited.to_string(),
            r.participants.len().to_string(),
            r.stragglers.to_string(),
            r.failures.to_string(),
            fmt_g9(r.mean_loss),
            fmt_opt(r.test_accuracy),
            fmt_opt(r.global_accuracy),
            fmt_opt(r.reduction),
            r.num_leaves.to_string(),
            r.partition
                .as_ref()
                .map(|c| c.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"))
                .unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("clients.csv"))?;
    w.write_record([
        "client_id",
        "latent_cohort",
        "corrupted",
        "participations",
        "assigned_leaf",
        "last_cohort",
        "accuracy",
        "blacklisted",
    ])?;
    for c in &outcome.clients {
        w.write_record([
            c.client_id.to_string(),
            c.latent_cohort.to_string(),
            u8::from(c.corrupted).to_string(),
            c.participations.to_string(),
            opt_str(c.assigned_leaf.as_ref()),
            opt_str(c.last_cohort.as_ref()),
            fmt_opt(c.accuracy),
            u8::from(c.blacklisted).to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("events.csv"))?;
    w.write_record(["time", "kind", "cohort", "round", "client", "detail"])?;
    for e in &outcome.events {
        w.write_record([
            fmt_g9(e.time),
            e.kind.to_string(),
            opt_str(e.cohort.as_ref()),
            opt_str(e.round),
            opt_str(e.client),
            e.detail.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
