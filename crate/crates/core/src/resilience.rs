//! Checkpoints, fault injection and handling of misbehaving clients.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::clustering::{ClusterState, DispersionSample};
use crate::cohorttree::{CohortId, CohortTree, NodeStatus, TreeNode};
use crate::config::FaultSection;
use crate::error::{Error, Result};
use crate::fltrain::{ModelWeights, YogiConfig, YogiState};
use crate::population::{ClientId, Population};
use crate::rng::{stream_rng, Stream};

const MAGIC: &[u8; 8] = b"CFLCKPT\0";
const VERSION: u32 = 1;

/// A cohort's state at a round boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cohort_id: CohortId,
    /// Rounds completed by the cohort's lineage.
    pub round: u32,
    pub model: ModelWeights,
    pub optimizer: Option<YogiState>,
    /// Centroids are round-local and are not saved.
    pub cluster: ClusterState,
    pub tree: CohortTree,
    pub written_at: f64,
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }
    fn cohort(&mut self, c: &CohortId) {
        let s = c.to_string();
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn section(&mut self, tag: &[u8; 4], body: Enc) {
        self.0.extend_from_slice(tag);
        self.u64(body.0.len() as u64);
        self.0.extend_from_slice(&body.0);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {what}"))
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(corrupt("truncated"));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(unit) > self.buf.len() {
            return Err(corrupt("length exceeds payload"));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn cohort(&mut self) -> Result<CohortId> {
        let n = self.u32()? as usize;
        let s = std::str::from_utf8(self.take(n)?).map_err(|_| corrupt("cohort id"))?;
        s.parse().map_err(|_| corrupt("cohort id"))
    }
    fn section(&mut self, tag: &[u8; 4]) -> Result<Dec<'a>> {
        if self.take(4)? != tag {
            return Err(corrupt(&format!("expected section {}", String::from_utf8_lossy(tag))));
        }
        let n = self.u64()? as usize;
        Ok(Dec { buf: self.take(n)? })
    }
    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(corrupt("trailing bytes in section"))
        }
    }
}

fn status_code(s: NodeStatus) -> u8 {
    match s {
        NodeStatus::ActiveLeaf => 0,
        NodeStatus::Internal => 1,
        NodeStatus::Recovering => 2,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl Checkpoint {
    /// Versioned binary encoding: magic, version, tagged sections of
    /// little-endian fields, then a SHA-256 of everything before it.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Enc::default();
        out.0.extend_from_slice(MAGIC);
        out.u32(VERSION);

        let mut meta = Enc::default();
        meta.cohort(&self.cohort_id);
        meta.u32(self.round);
        meta.f64(self.written_at);
        out.section(b"META", meta);

        let mut model = Enc::default();
        model.f64s(&self.model.values);
        out.section(b"MODL", model);

        let mut opt = Enc::default();
        match &self.optimizer {
            None => opt.u8(0),
            Some(y) => {
                opt.u8(1);
                let c = y.config;
                [c.server_lr, c.beta1, c.beta2, c.tau].iter().for_each(|v| opt.f64(*v));
                opt.f64s(&y.first_moment);
                opt.f64s(&y.second_moment);
            }
        }
        out.section(b"OPTM", opt);

        let cs = &self.cluster;
        let mut clus = Enc::default();
        clus.u32(cs.k as u32);
        clus.u8(u8::from(cs.initialized));
        clus.i64(cs.init_round.map_or(-1, i64::from));
        clus.u64(cs.persisted_labels.len() as u64);
        for (id, l) in &cs.persisted_labels {
            clus.u32(*id);
            clus.u32(*l as u32);
        }
        clus.u64(cs.dispersion_history.len() as u64);
        for d in &cs.dispersion_history {
            clus.u32(d.round);
            clus.f64(d.overall);
            clus.f64(d.intra);
            clus.f64(d.ratio);
        }
        clus.u64(cs.churn_history.len() as u64);
        for (r, c) in &cs.churn_history {
            clus.u32(*r);
            clus.f64(*c);
        }
        out.section(b"CLUS", clus);

        let mut tree = Enc::default();
        let nodes: Vec<_> = self.tree.nodes().collect();
        tree.u64(nodes.len() as u64);
        for (id, n) in nodes {
            tree.cohort(id);
            tree.u8(status_code(n.status));
            tree.u64(n.budget as u64);
            tree.u32(n.children.len() as u32);
        }
        out.section(b"TREE", tree);

        let digest = Sha256::digest(&out.0);
        out.0.extend_from_slice(digest.as_slice());
        out.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(corrupt("too short"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut d = Dec { buf: body };
        if d.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = d.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }

        let mut meta = d.section(b"META")?;
        let cohort_id = meta.cohort()?;
        let round = meta.u32()?;
        let written_at = meta.f64()?;
        meta.finish()?;

        let mut m = d.section(b"MODL")?;
        let model = ModelWeights { values: m.f64s()? };
        m.finish()?;

        let mut o = d.section(b"OPTM")?;
        let optimizer = match o.u8()? {
            0 => None,
            1 => {
                let config = YogiConfig { server_lr: o.f64()?, beta1: o.f64()?, beta2: o.f64()?, tau: o.f64()? };
                let first_moment = o.f64s()?;
                let second_moment = o.f64s()?;
                Some(YogiState { first_moment, second_moment, config })
            }
            _ => return Err(corrupt("optimizer flag")),
        };
        o.finish()?;

        let mut c = d.section(b"CLUS")?;
        let k = c.u32()? as usize;
        if k < 2 {
            return Err(corrupt("cluster count"));
        }
        let mut cluster = ClusterState::new(k);
        cluster.initialized = c.u8()? != 0;
        cluster.init_round = match c.i64()? {
            -1 => None,
            r => Some(u32::try_from(r).map_err(|_| corrupt("init round"))?),
        };
        for _ in 0..c.len(8)? {
            let id = c.u32()?;
            let l = c.u32()? as usize;
            if l >= k {
                return Err(corrupt("cluster label out of range"));
            }
            cluster.persisted_labels.insert(id, l);
        }
        for _ in 0..c.len(28)? {
            cluster.dispersion_history.push(DispersionSample {
                round: c.u32()?,
                overall: c.f64()?,
                intra: c.f64()?,
                ratio: c.f64()?,
            });
        }
        for _ in 0..c.len(12)? {
            cluster.churn_history.push((c.u32()?, c.f64()?));
        }
        c.finish()?;

        let mut t = d.section(b"TREE")?;
        let mut nodes = BTreeMap::new();
        for _ in 0..t.len(17)? {
            let id = t.cohort()?;
            let status = match t.u8()? {
                0 => NodeStatus::ActiveLeaf,
                1 => NodeStatus::Internal,
                2 => NodeStatus::Recovering,
                _ => return Err(corrupt("node status")),
            };
            let budget = t.u64()? as usize;
            let arity = t.u32()? as usize;
            nodes.insert(id.clone(), TreeNode { children: id.children(arity), status, budget });
        }
        t.finish()?;
        d.finish()?;
        let tree = CohortTree::from_nodes(nodes).map_err(|e| corrupt(&e.to_string()))?;
        Ok(Self { cohort_id, round, model, optimizer, cluster, tree, written_at })
    }

    /// Human-readable summary written next to the binary file.
    pub fn manifest(&self, encoded: &[u8]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format = cohortfl-checkpoint v{VERSION}");
        let _ = writeln!(s, "cohort = {}", self.cohort_id);
        let _ = writeln!(s, "round = {}", self.round);
        let _ = writeln!(s, "written_at = {}", crate::report::fmt_g9(self.written_at));
        let _ = writeln!(s, "model_dim = {}", self.model.dim());
        let _ = writeln!(s, "optimizer = {}", if self.optimizer.is_some() { "yogi" } else { "none" });
        let _ = writeln!(s, "clusters = {}", self.cluster.k);
        let _ = writeln!(s, "labeled_clients = {}", self.cluster.persisted_labels.len());
        let _ = writeln!(s, "tree_leaves = {}", self.tree.num_leaves());
        let _ = writeln!(s, "bytes = {}", encoded.len());
        let _ = writeln!(s, "sha256 = {}", hex(&encoded[encoded.len() - 32..]));
        s
    }

    /// Writes `<cohort>_r<round>.ckpt` and its `.txt` manifest into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let bytes = self.encode();
        let stem = format!("cohort_{}_r{:05}", self.cohort_id, self.round);
        let path = dir.join(format!("{stem}.ckpt"));
        std::fs::write(&path, &bytes)?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.manifest(&bytes))?;
        Ok(path)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CrashTrigger {
    At(f64),
    AfterRound(u32),
}

/// Faults to inject during a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FaultPlan {
    pub cohort_crashes: Vec<(CrashTrigger, CohortId)>,
    /// (start, duration) in simulated seconds.
    pub coordinator_crash: Option<(f64, f64)>,
    pub client_affinity_loss_rate: f64,
    pub corrupted_fraction: f64,
}

impl FaultPlan {
    pub fn from_section(f: &FaultSection) -> Result<Self> {
        let mut cohort_crashes = Vec::new();
        for c in &f.cohort_crashes {
            let id: CohortId = c.cohort.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            let trigger = match (c.time, c.after_round) {
                (Some(t), None) => CrashTrigger::At(t),
                (None, Some(r)) => CrashTrigger::AfterRound(r),
                _ => return Err(Error::Config("cohort crash needs exactly one of time or after_round".into())),
            };
            cohort_crashes.push((trigger, id));
        }
        let plan = Self {
            cohort_crashes,
            coordinator_crash: f.coordinator_crash.map(|c| (c.start, c.duration)),
            client_affinity_loss_rate: f.affinity_loss_rate,
            corrupted_fraction: f.corrupted_fraction,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.client_affinity_loss_rate) {
            return Err(Error::Config("affinity loss rate must be in [0, 1]".into()));
        }
        if !(0.0..=0.15).contains(&self.corrupted_fraction) {
            return Err(Error::Config("corrupted fraction must be in [0, 0.15]".into()));
        }
        Ok(())
    }

    /// Whether the coordinator drops requests at time `t`.
    pub fn coordinator_down(&self, t: f64) -> bool {
        self.coordinator_crash.is_some_and(|(start, len)| t >= start && t < start + len)
    }
}

/// Round (of the longest-running lineage) at which each client loses its
/// affinity store, or `None` if it never does.
pub fn client_affinity_loss(num_clients: usize, rate: f64, rounds: u32, seed: u64) -> Vec<Option<u32>> {
    (0..num_clients)
        .map(|id| {
            let mut rng = stream_rng(seed, Stream::Faults, id as u64, 0xaff1);
            (rng.random::<f64>() < rate).then(|| rng.random_range(1..=rounds.max(1)))
        })
        .collect()
}

/// Flips labels of a random `fraction` of clients with a fixed derangement.
///
/// The derangement swaps classes pairwise (0<->1, 2<->3, ...); with an odd
/// class count the last three classes rotate instead.
pub fn corrupt_clients(population: &mut Population, fraction: f64, seed: u64) -> Result<BTreeSet<ClientId>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("corrupted fraction {fraction} outside [0, 1]")));
    }
    let n = population.len();
    let count = (fraction * n as f64).round() as usize;
    let mut ids: Vec<ClientId> = (0..n as ClientId).collect();
    let mut rng = stream_rng(seed, Stream::Faults, 0xc0_22, 0);
    ids.shuffle(&mut rng);
    let chosen: BTreeSet<ClientId> = ids.into_iter().take(count).collect();
    let perm = derangement(population.num_classes);
    for id in &chosen {
        let c = &mut population.clients[*id as usize];
        for y in c.dataset.labels.iter_mut() {
            *y = perm[*y as usize];
        }
        let mut hist = vec![0.0; population.num_classes];
        for (j, h) in c.label_histogram.iter().enumerate() {
            hist[perm[j] as usize] = *h;
        }
        c.label_histogram = hist;
        c.corrupted = true;
    }
    Ok(chosen)
}

pub fn derangement(num_classes: usize) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..num_classes as u32).collect();
    let pairs_end = if num_classes.is_multiple_of(2) { num_classes } else { num_classes - 3 };
    for j in (0..pairs_end).step_by(2) {
        perm.swap(j, j + 1);
    }
    if num_classes % 2 == 1 {
        let s = num_classes - 3;
        perm[s] = (s + 1) as u32;
        perm[s + 1] = (s + 2) as u32;
        perm[s + 2] = s as u32;
    }
    perm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub client_id: ClientId,
    pub cohort: CohortId,
    pub round: u32,
    pub claimed: usize,
    pub assigned: usize,
    pub reward: f64,
    pub strikes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionConfig {
    /// A strike needs the exploit reward below `-reward_gate`.
    pub reward_gate: f64,
    pub strike_threshold: u32,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self { reward_gate: 0.5, strike_threshold: 3 }
    }
}

/// Clients excluded from selection, with the strikes that put them there.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Blacklist {
    pub members: BTreeSet<ClientId>,
    pub strikes: BTreeMap<ClientId, u32>,
    pub log: Vec<Detection>,
}

impl Blacklist {
    pub fn contains(&self, id: ClientId) -> bool {
        self.members.contains(&id)
    }
}

/// Strikes participants whose claimed cluster disagrees with the one they
/// were assigned while also fitting the cohort badly. Returns the clients
/// newly blacklisted by this round.
pub fn detect_anomalies(
    blacklist: &mut Blacklist,
    cohort: &CohortId,
    round: u32,
    assignment: &BTreeMap<ClientId, usize>,
    claims: &BTreeMap<ClientId, usize>,
    rewards: &BTreeMap<ClientId, f64>,
    cfg: DetectionConfig,
) -> Vec<ClientId> {
    let mut newly = Vec::new();
    for (&id, &claimed) in claims {
        let (Some(&assigned), Some(&reward)) = (assignment.get(&id), rewards.get(&id)) else {
            continue;
        };
        if claimed == assigned || reward >= -cfg.reward_gate {
            continue;
        }
        let strikes = blacklist.strikes.entry(id).or_insert(0);
        *strikes += 1;
        let strikes = *strikes;
        blacklist.log.push(Detection {
            client_id: id,
            cohort: cohort.clone(),
            round,
            claimed,
            assigned,
            reward,
            strikes,
        });
        if strikes >= cfg.strike_threshold && blacklist.members.insert(id) {
            newly.push(id);
        }
    }
    newly
}
