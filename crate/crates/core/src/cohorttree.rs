//! Cohort hierarchy, the affinity protocol between cohorts and clients, and
//! client-side cohort selection.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::{decayed_reward, explore_increments, spawn_reward};
use crate::error::{Error, Result};
use crate::population::ClientId;

/// Path from the root; the root is the empty path and renders as `0`.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CohortId(Vec<u32>);

impl CohortId {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn from_path(path: Vec<u32>) -> Self {
        Self(path)
    }

    pub fn path(&self) -> &[u32] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn child(&self, k: u32) -> Self {
        let mut p = self.0.clone();
        p.push(k);
        Self(p)
    }

    pub fn children(&self, arity: usize) -> Vec<Self> {
        (0..arity as u32).map(|k| self.child(k)).collect()
    }

    pub fn parent(&self) -> Option<Self> {
        let (_, rest) = self.0.split_last()?;
        Some(Self(rest.to_vec()))
    }

    pub fn is_ancestor_of(&self, other: &Self) -> bool {
        other.0.len() > self.0.len() && other.0.starts_with(&self.0)
    }

    /// Edges on the path through the lowest common ancestor.
    pub fn distance(&self, other: &Self) -> usize {
        let lcp = self.0.iter().zip(&other.0).take_while(|(a, b)| a == b).count();
        self.0.len() + other.0.len() - 2 * lcp
    }
}

impl fmt::Display for CohortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("0")?;
        for k in &self.0 {
            write!(f, ".{k}")?;
        }
        Ok(())
    }
}

impl FromStr for CohortId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('.');
        if parts.next() != Some("0") {
            return Err(Error::Contract(format!("cohort id must start with 0: {s:?}")));
        }
        parts
            .map(|p| p.parse::<u32>().map_err(|_| Error::Contract(format!("bad cohort id segment in {s:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

pub fn tree_distance(a: &CohortId, b: &CohortId) -> usize {
    a.distance(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    ActiveLeaf,
    Internal,
    Recovering,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub children: Vec<CohortId>,
    pub status: NodeStatus,
    /// Participants per round.
    pub budget: usize,
}

/// The coordinator's leaf registry and split mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortTree {
    nodes: BTreeMap<CohortId, TreeNode>,
}

impl CohortTree {
    pub fn new(budget: usize) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(CohortId::root(), TreeNode { children: Vec::new(), status: NodeStatus::ActiveLeaf, budget });
        Self { nodes }
    }

    /// Rebuilds a tree from its node table, checking that edges are consistent.
    pub fn from_nodes(nodes: BTreeMap<CohortId, TreeNode>) -> Result<Self> {
        if !nodes.contains_key(&CohortId::root()) {
            return Err(Error::Contract("tree has no root".into()));
        }
        for (id, n) in &nodes {
            if let Some(p) = id.parent() {
                let ok = nodes.get(&p).is_some_and(|pn| pn.children.contains(id));
                if !ok {
                    return Err(Error::Contract(format!("cohort {id} is not listed by its parent")));
                }
            }
            if n.children.iter().any(|c| !nodes.contains_key(c)) {
                return Err(Error::Contract(format!("cohort {id} lists a missing child")));
            }
        }
        Ok(Self { nodes })
    }

    pub fn node(&self, id: &CohortId) -> Option<&TreeNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&CohortId, &TreeNode)> {
        self.nodes.iter()
    }

    pub fn contains(&self, id: &CohortId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn is_leaf(&self, id: &CohortId) -> bool {
        self.nodes.get(id).is_some_and(|n| n.children.is_empty())
    }

    /// Leaves in id order, including recovering ones.
    pub fn leaves(&self) -> Vec<CohortId> {
        self.nodes.iter().filter(|(_, n)| n.children.is_empty()).map(|(id, _)| id.clone()).collect()
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.values().filter(|n| n.children.is_empty()).count()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.keys().map(|id| id.depth()).max().unwrap_or(0)
    }

    pub fn total_leaf_budget(&self) -> usize {
        self.nodes.values().filter(|n| n.children.is_empty()).map(|n| n.budget).sum()
    }

    pub fn set_status(&mut self, id: &CohortId, status: NodeStatus) {
        if let Some(n) = self.nodes.get_mut(id) {
            if n.children.is_empty() {
                n.status = status;
            }
        }
    }

    /// Turns an active leaf into an internal node with `arity` children that
    /// share its budget; remainders go to the first children.
    pub fn partition_cohort(&mut self, parent: &CohortId, arity: usize, max_depth: usize) -> Result<Vec<CohortId>> {
        let node = self.nodes.get(parent).ok_or_else(|| Error::Contract(format!("unknown cohort {parent}")))?;
        if !node.children.is_empty() {
            return Err(Error::Contract(format!("cohort {parent} is not a leaf")));
        }
        if parent.depth() + 1 > max_depth {
            return Err(Error::Contract(format!("splitting {parent} exceeds max tree depth {max_depth}")));
        }
        if arity < 2 {
            return Err(Error::Contract("split arity must be >= 2".into()));
        }
        let budget = node.budget;
        let children = parent.children(arity);
        for (k, child) in children.iter().enumerate() {
            let share = budget / arity + usize::from(k < budget % arity);
            self.nodes.insert(
                child.clone(),
                TreeNode { children: Vec::new(), status: NodeStatus::ActiveLeaf, budget: share },
            );
        }
        let node = self.nodes.get_mut(parent).expect("checked above");
        node.children = children.clone();
        node.status = NodeStatus::Internal;
        Ok(children)
    }
}

/// Feedback from a cohort to one participant.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMessage {
    pub cohort_id: CohortId,
    pub reward: f64,
    pub cluster_index: Option<usize>,
}

impl AffinityMessage {
    pub fn to_text(&self) -> String {
        format!("{},{:?},{}", self.cohort_id, self.reward, encode_index(self.cluster_index))
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let bad = || Error::Contract(format!("malformed affinity message {s:?}"));
        let mut it = s.split(',');
        let (Some(c), Some(r), Some(l), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        Ok(Self {
            cohort_id: c.parse()?,
            reward: r.parse().map_err(|_| bad())?,
            cluster_index: decode_index(l.parse().map_err(|_| bad())?)?,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_cohort(w, &self.cohort_id)?;
        w.write_all(&self.reward.to_le_bytes())?;
        w.write_all(&encode_index(self.cluster_index).to_le_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let cohort_id = read_cohort(r)?;
        let reward = f64::from_le_bytes(read_array(r)?);
        let cluster_index = decode_index(i64::from_le_bytes(read_array(r)?))?;
        Ok(Self { cohort_id, reward, cluster_index })
    }
}

/// A client's check-in; `requested_cohort = None` asks the coordinator to choose.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityRequest {
    pub client_id: ClientId,
    pub requested_cohort: Option<CohortId>,
    pub cluster_index: Option<usize>,
}

impl AffinityRequest {
    pub fn to_text(&self) -> String {
        let c = self.requested_cohort.as_ref().map_or_else(|| "-".to_string(), |c| c.to_string());
        format!("{},{},{}", self.client_id, c, encode_index(self.cluster_index))
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let bad = || Error::Contract(format!("malformed affinity request {s:?}"));
        let mut it = s.split(',');
        let (Some(id), Some(c), Some(l), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        Ok(Self {
            client_id: id.parse().map_err(|_| bad())?,
            requested_cohort: if c == "-" { None } else { Some(c.parse()?) },
            cluster_index: decode_index(l.parse().map_err(|_| bad())?)?,
        })
    }
}

fn encode_index(l: Option<usize>) -> i64 {
    l.map_or(-1, |l| l as i64)
}

fn decode_index(v: i64) -> Result<Option<usize>> {
    match v {
        -1 => Ok(None),
        v if v >= 0 => Ok(Some(v as usize)),
        v => Err(Error::Contract(format!("invalid cluster index {v}"))),
    }
}

pub(crate) fn write_cohort(w: &mut impl Write, c: &CohortId) -> Result<()> {
    let s = c.to_string();
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_cohort(r: &mut impl Read) -> Result<CohortId> {
    let len = u32::from_le_bytes(read_array(r)?) as usize;
    if len > 1 << 16 {
        return Err(Error::Contract("cohort id too long".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Contract("cohort id is not utf-8".into()))?.parse()
}

pub(crate) fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinityRecord {
    pub reward: f64,
    pub cluster_index: Option<usize>,
    /// Whether the client has trained in this cohort (or inherited its
    /// membership through a split).
    pub explored: bool,
}

/// Client-held cohort affinities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffinityStore {
    pub records: BTreeMap<CohortId, AffinityRecord>,
    pub last_updated: Option<u32>,
}

impl AffinityStore {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clear(&mut self) {
        self.records.clear();
        self.last_updated = None;
    }

    /// Highest-reward record; ties go to the smallest id.
    pub fn best(&self) -> Option<(&CohortId, &AffinityRecord)> {
        let mut best: Option<(&CohortId, &AffinityRecord)> = None;
        for (id, rec) in &self.records {
            if best.is_none_or(|(_, b)| rec.reward > b.reward) {
                best = Some((id, rec));
            }
        }
        best
    }

    /// Replaces records of cohorts that have since split with records for
    /// their children, seeded by the spawn rule.
    pub fn expand_stale(&mut self, tree: &CohortTree) {
        loop {
            let stale: Vec<CohortId> =
                self.records.keys().filter(|id| !tree.is_leaf(id) && tree.contains(id)).cloned().collect();
            if stale.is_empty() {
                break;
            }
            for id in stale {
                let rec = self.records.remove(&id).expect("listed above");
                let children = &tree.node(&id).expect("contained").children;
                for (k, child) in children.iter().enumerate() {
                    let inherited = rec.explored && rec.cluster_index == Some(k);
                    self.records.entry(child.clone()).or_insert(AffinityRecord {
                        reward: spawn_reward(rec.reward, rec.cluster_index, k),
                        cluster_index: None,
                        explored: inherited,
                    });
                }
            }
        }
        self.records.retain(|id, _| tree.contains(id));
    }
}

/// Decaying epsilon-greedy choice over the store's cohorts.
///
/// Explores with probability `epsilon^round`. Exploration picks uniformly
/// among stored cohorts plus, when the client knows fewer than
/// `known_leaves_hint` cohorts, an unexplored sentinel that lets the
/// coordinator choose.
pub fn client_select_cohort(
    client_id: ClientId,
    store: &AffinityStore,
    known_leaves_hint: usize,
    epsilon: f64,
    round: u32,
    seed: u64,
) -> AffinityRequest {
    assert!((0.0..=1.0).contains(&epsilon), "epsilon must be in [0, 1]");
    let none = AffinityRequest { client_id, requested_cohort: None, cluster_index: None };
    let Some((best, best_rec)) = store.best() else {
        return none;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let explore_p = epsilon.powi(round.min(i32::MAX as u32) as i32);
    let (id, rec) = if rng.random::<f64>() < explore_p {
        let with_sentinel = store.records.len() < known_leaves_hint;
        let n = store.records.len() + usize::from(with_sentinel);
        let pick = rng.random_range(0..n);
        match store.records.iter().nth(pick) {
            Some(entry) => entry,
            None => return none,
        }
    } else {
        (best, best_rec)
    };
    AffinityRequest { client_id, requested_cohort: Some(id.clone()), cluster_index: rec.cluster_index }
}

/// Resolves a request to a leaf of the tree.
///
/// Unknown or absent cohorts get a uniformly random leaf. An internal cohort
/// is descended along the request's cluster index at the first hop and
/// uniformly at random below it.
pub fn match_request(tree: &CohortTree, req: &AffinityRequest, rng: &mut impl Rng) -> CohortId {
    let start = req.requested_cohort.as_ref().filter(|c| tree.contains(c));
    let Some(start) = start else {
        let leaves = tree.leaves();
        return leaves.choose(rng).expect("tree always has a leaf").clone();
    };
    let mut at = start.clone();
    let mut hint = req.cluster_index;
    loop {
        let node = tree.node(&at).expect("descended along existing edges");
        if node.children.is_empty() {
            return at;
        }
        at = match hint.take().filter(|&l| l < node.children.len()) {
            Some(l) => node.children[l].clone(),
            None => node.children.choose(rng).expect("internal node has children").clone(),
        };
    }
}

/// One message per successful participant, in client order.
pub fn feedback(
    cohort: &CohortId,
    rewards: &BTreeMap<ClientId, f64>,
    labels: &BTreeMap<ClientId, usize>,
    participants: &[ClientId],
) -> Vec<(ClientId, AffinityMessage)> {
    let mut ids = participants.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let msg = AffinityMessage {
                cohort_id: cohort.clone(),
                reward: rewards.get(&id).copied().unwrap_or(0.0),
                cluster_index: labels.get(&id).copied(),
            };
            (id, msg)
        })
        .collect()
}

/// Applies a cohort's feedback to the client's records.
///
/// The explored cohort takes the decayed update. Cohorts the client has not
/// explored receive the distance-scaled increments through the same decayed
/// update, so predictions stay on the scale of observed rewards. A zero
/// reward carries only the cluster label.
pub fn client_apply_feedback(
    store: &mut AffinityStore,
    msg: &AffinityMessage,
    tree: &CohortTree,
    gamma: f64,
    round: u32,
) {
    store.expand_stale(tree);
    store.last_updated = Some(round);
    let rec = store.records.entry(msg.cohort_id.clone()).or_insert(AffinityRecord {
        reward: 0.0,
        cluster_index: None,
        explored: true,
    });
    rec.explored = true;
    rec.cluster_index = msg.cluster_index;
    if msg.reward == 0.0 {
        return;
    }
    rec.reward = decayed_reward(rec.reward, msg.reward, gamma);
    for (leaf, inc) in explore_increments(tree, &msg.cohort_id, msg.reward) {
        let r =
            store.records.entry(leaf).or_insert(AffinityRecord { reward: 0.0, cluster_index: None, explored: false });
        if !r.explored {
            r.reward = decayed_reward(r.reward, inc, gamma);
        }
    }
}

/// Leaf a client's records point at, descending stale records by their
/// cluster index (or the first child when none is known).
pub fn resolved_leaf(store: &AffinityStore, tree: &CohortTree) -> Option<CohortId> {
    let (id, rec) = store.best()?;
    let mut at = if tree.contains(id) { id.clone() } else { return None };
    let mut hint = rec.cluster_index;
    while let Some(node) = tree.node(&at).filter(|n| !n.children.is_empty()) {
        let k = hint.take().filter(|&l| l < node.children.len()).unwrap_or(0);
        at = node.children[k].clone();
    }
    Some(at)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::RewardLedger;

    fn id(s: &str) -> CohortId {
        s.parse().unwrap()
    }

    /// Root split in two, 0.0 split in two again: leaves 0.0.0, 0.0.1, 0.1.
    fn fig_tree() -> CohortTree {
        let mut t = CohortTree::new(200);
        t.partition_cohort(&CohortId::root(), 2, 3).unwrap();
        t.partition_cohort(&id("0.0"), 2, 3).unwrap();
        t
    }

    #[test]
    fn ids_render_and_parse() {
        assert_eq!(CohortId::root().to_string(), "0");
        assert_eq!(CohortId::root().child(1).child(0).to_string(), "0.1.0");
        assert_eq!(id("0.0.1").path(), &[0, 1]);
        assert!("1.0".parse::<CohortId>().is_err());
        assert!(id("0") < id("0.0") && id("0.0.1") < id("0.1"));
    }

    #[test]
    fn distances() {
        assert_eq!(tree_distance(&id("0.0.1"), &id("0.0.0")), 2);
        assert_eq!(tree_distance(&id("0.0.1"), &id("0.1")), 3);
        assert_eq!(tree_distance(&id("0.1"), &id("0.1")), 0);
    }

    #[test]
    fn partition_bookkeeping() {
        let mut t = CohortTree::new(200);
        assert_eq!(t.num_leaves(), 1);
        let kids = t.partition_cohort(&CohortId::root(), 2, 3).unwrap();
        assert_eq!(kids, vec![id("0.0"), id("0.1")]);
        assert_eq!(t.num_leaves(), 2);
        assert_eq!(t.node(&id("0.0")).unwrap().budget, 100);
        assert_eq!(t.node(&CohortId::root()).unwrap().status, NodeStatus::Internal);
        assert!(t.partition_cohort(&CohortId::root(), 2, 3).is_err());
        let mut odd = CohortTree::new(101);
        odd.partition_cohort(&CohortId::root(), 3, 1).unwrap();
        assert_eq!(odd.total_leaf_budget(), 101);
        assert!(odd.partition_cohort(&id("0.0"), 2, 1).is_err());
    }

    #[test]
    fn match_examples() {
        let t = fig_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let req = AffinityRequest { client_id: 0, requested_cohort: Some(CohortId::root()), cluster_index: Some(1) };
        assert_eq!(match_request(&t, &req, &mut rng), id("0.1"));
        let req = AffinityRequest { client_id: 0, requested_cohort: Some(id("0.0.1")), cluster_index: None };
        assert_eq!(match_request(&t, &req, &mut rng), id("0.0.1"));
        let none = AffinityRequest { client_id: 0, requested_cohort: None, cluster_index: None };
        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| match_request(&t, &none, &mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| match_request(&t, &none, &mut r)).collect()
        };
        assert_eq!(a, b);
        assert!(a.iter().all(|l| t.is_leaf(l)));
        let gone = AffinityRequest { client_id: 0, requested_cohort: Some(id("0.7")), cluster_index: None };
        assert!(t.is_leaf(&match_request(&t, &gone, &mut rng)));
    }

    #[test]
    fn select_examples() {
        let empty = AffinityStore::default();
        assert_eq!(client_select_cohort(3, &empty, 4, 0.9, 1, 0).requested_cohort, None);
        let mut store = AffinityStore::default();
        store.records.insert(id("0.0"), AffinityRecord { reward: 0.5, cluster_index: Some(1), explored: true });
        store.records.insert(id("0.1"), AffinityRecord { reward: 0.2, cluster_index: None, explored: true });
        for seed in 0..50 {
            let r = client_select_cohort(3, &store, 2, 0.0, 5, seed);
            assert_eq!(r.requested_cohort, Some(id("0.0")));
            assert_eq!(r.cluster_index, Some(1));
        }
        store.records.insert(id("0.2"), AffinityRecord { reward: 0.5, cluster_index: None, explored: true });
        assert_eq!(client_select_cohort(3, &store, 3, 0.0, 5, 0).requested_cohort, Some(id("0.0")));
    }

    #[test]
    fn epsilon_greedy_concentrates_on_argmax() {
        let mut store = AffinityStore::default();
        for (k, r) in [0.1, 0.7, 0.3, 0.5].iter().enumerate() {
            store.records.insert(
                CohortId::root().child(k as u32),
                AffinityRecord { reward: *r, cluster_index: None, explored: true },
            );
        }
        let eps: f64 = 0.9;
        let r_star = (0.1f64.ln() / eps.ln()).ceil() as u32;
        assert!(eps.powi(r_star as i32) < 0.1 && eps.powi(r_star as i32 - 1) >= 0.1);
        let n = 20_000;
        let hits = (0..n)
            .filter(|&s| client_select_cohort(0, &store, 4, eps, r_star, s as u64).requested_cohort == Some(id("0.1")))
            .count();
        assert!(hits as f64 / n as f64 >= 0.9, "{hits}");
    }

    #[test]
    fn feedback_examples() {
        let rewards: BTreeMap<ClientId, f64> = [(1, 0.3), (2, -0.4), (3, 0.1)].into_iter().collect();
        let labels: BTreeMap<ClientId, usize> = [(1, 0), (2, 1), (3, 1)].into_iter().collect();
        let msgs = feedback(&id("0.1"), &rewards, &labels, &[3, 1]);
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].0, 1);
        assert_eq!(msgs[1].1.cluster_index, Some(1));
        assert!(msgs.iter().all(|(c, _)| *c != 2));
    }

    #[test]
    fn apply_feedback_examples() {
        let t = CohortTree::new(10);
        let mut store = AffinityStore::default();
        let msg = AffinityMessage { cohort_id: CohortId::root(), reward: 1.0, cluster_index: Some(1) };
        client_apply_feedback(&mut store, &msg, &t, 0.2, 1);
        let rec = store.records[&CohortId::root()];
        assert!((rec.reward - 0.2).abs() < 1e-15);

        let zero = AffinityMessage { cohort_id: CohortId::root(), reward: 0.0, cluster_index: Some(0) };
        client_apply_feedback(&mut store, &zero, &t, 0.2, 2);
        let rec = store.records[&CohortId::root()];
        assert_eq!(rec.reward, 0.2);
        assert_eq!(rec.cluster_index, Some(0));
    }

    #[test]
    fn explore_increments_match_ledger_oracle() {
        let t = fig_tree();
        let explored = id("0.0.1");
        let mut ledger = RewardLedger::new(0.2);
        ledger.explore_reward(&t, 7, &explored, -3.0);
        assert_eq!(ledger.get(7, &id("0.0.0")), Some(-1.0));
        assert_eq!(ledger.get(7, &id("0.1")), Some(-0.75));
        assert_eq!(ledger.get(7, &explored), None);

        let mut store = AffinityStore::default();
        let msg = AffinityMessage { cohort_id: explored.clone(), reward: -3.0, cluster_index: Some(0) };
        client_apply_feedback(&mut store, &msg, &t, 1.0, 1);
        for leaf in [id("0.0.0"), id("0.1")] {
            assert_eq!(store.records[&leaf].reward, ledger.get(7, &leaf).unwrap());
        }
        // with gamma < 1 the prediction is the same increment, decayed
        let mut store = AffinityStore::default();
        client_apply_feedback(&mut store, &msg, &t, 0.2, 1);
        assert_eq!(store.records[&id("0.1")].reward, 0.2 * -0.75);
        assert!(store.records[&id("0.1")].reward > store.records[&id("0.0.0")].reward);
    }

    #[test]
    fn stale_records_expand_with_spawn_bonus() {
        let t = fig_tree();
        let mut store = AffinityStore::default();
        store.records.insert(CohortId::root(), AffinityRecord { reward: 0.4, cluster_index: Some(1), explored: true });
        store.expand_stale(&t);
        assert!(!store.records.contains_key(&CohortId::root()));
        assert!((store.records[&id("0.1")].reward - 0.5).abs() < 1e-15);
        assert!(store.records[&id("0.1")].explored);
        assert!((store.records[&id("0.0.0")].reward - 0.4).abs() < 1e-15);
        assert_eq!(resolved_leaf(&store, &t), Some(id("0.1")));
    }

    #[test]
    fn message_encodings_roundtrip() {
        let msgs = [
            AffinityMessage { cohort_id: id("0.1.0"), reward: -0.1, cluster_index: Some(3) },
            AffinityMessage { cohort_id: CohortId::root(), reward: 1.0 / 3.0, cluster_index: None },
        ];
        for m in &msgs {
            assert_eq!(&AffinityMessage::from_text(&m.to_text()).unwrap(), m);
            let mut buf = Vec::new();
            m.write_to(&mut buf).unwrap();
            assert_eq!(&AffinityMessage::read_from(&mut buf.as_slice()).unwrap(), m);
        }
        assert_eq!(msgs[1].to_text(), "0,0.3333333333333333,-1");
        let req = AffinityRequest { client_id: 4, requested_cohort: None, cluster_index: None };
        assert_eq!(AffinityRequest::from_text(&req.to_text()).unwrap(), req);
        assert!(AffinityMessage::from_text("0,x,1").is_err());
        assert!(AffinityMessage::from_text("0,1.0,-2").is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn path() -> impl Strategy<Value = CohortId> {
        proptest::collection::vec(0u32..3, 0..5).prop_map(CohortId::from_path)
    }

    fn random_tree(splits: &[(usize, usize)], max_depth: usize) -> CohortTree {
        let mut t = CohortTree::new(120);
        for &(pick, arity) in splits {
            let leaves = t.leaves();
            let leaf = &leaves[pick % leaves.len()];
            let _ = t.partition_cohort(leaf, arity, max_depth);
        }
        t
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in path(), b in path(), c in path()) {
            prop_assert_eq!(a.distance(&b), b.distance(&a));
            prop_assert_eq!(a.distance(&a), 0);
            prop_assert!(a.distance(&c) <= a.distance(&b) + b.distance(&c));
            prop_assert_eq!(a.distance(&b) == 0, a == b);
        }

        #[test]
        fn matching_is_total_and_bounded(
            splits in proptest::collection::vec((0usize..10, 2usize..4), 0..8),
            req_path in path(),
            l in proptest::option::of(0usize..4),
            seed in any::<u64>(),
        ) {
            let max_depth = 3;
            let t = random_tree(&splits, max_depth);
            prop_assert_eq!(t.total_leaf_budget(), 120);
            for (_, n) in t.nodes() {
                prop_assert!(n.children.is_empty() || n.children.len() >= 2);
            }
            let req = AffinityRequest { client_id: 0, requested_cohort: Some(req_path.clone()), cluster_index: l };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let leaf = match_request(&t, &req, &mut rng);
            prop_assert!(t.is_leaf(&leaf));
            if t.contains(&req_path) {
                prop_assert!(leaf == req_path || req_path.is_ancestor_of(&leaf));
                prop_assert!(leaf.depth() - req_path.depth() <= max_depth);
            }
        }

        #[test]
        fn codec_roundtrip(p in path(), r in any::<f64>().prop_filter("finite", |x| x.is_finite()), l in proptest::option::of(0usize..1000)) {
            let m = AffinityMessage { cohort_id: p, reward: r, cluster_index: l };
            prop_assert_eq!(&AffinityMessage::from_text(&m.to_text()).unwrap(), &m);
            let mut buf = Vec::new();
            m.write_to(&mut buf).unwrap();
            prop_assert_eq!(&AffinityMessage::read_from(&mut buf.as_slice()).unwrap(), &m);
        }
    }
}
