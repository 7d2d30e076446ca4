//! Online clustering of participant updates, the exploit/explore rewards that
//! drive cohort selection, and the rule deciding when a cohort splits.
//!
//! Clustering geometry uses L2-normalized deltas, so squared Euclidean
//! distance is a monotone function of cosine distance. Exploit rewards are
//! the exception and compare raw deltas.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohorttree::{CohortId, CohortTree};
use crate::fltrain::GradientUpdate;
use crate::population::{ClientId, Population};

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-6;
/// Independent k-means++ restarts; the lowest-inertia run wins.
pub const KMEANS_RESTARTS: u64 = 10;
/// Reward bonus a child cohort grants to clients that clustered into it.
pub const SPAWN_BONUS: f64 = 0.1;

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(points: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for p in points {
        for (a, b) in m.iter_mut().zip(p.iter()) {
            *a += b;
        }
    }
    if !points.is_empty() {
        m.iter_mut().for_each(|a| *a /= points.len() as f64);
    }
    m
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Participant updates keyed and ordered by client id, normalized.
fn normalized_by_client(gradients: &[GradientUpdate]) -> BTreeMap<ClientId, Vec<f64>> {
    gradients.iter().map(|g| (g.client_id, normalize(&g.delta))).collect()
}

fn kmeans_pp_seeds(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut seeds: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].to_vec()];
    while seeds.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(&seeds, p).1).collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, w) in d.iter().enumerate() {
                if r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        seeds.push(points[next].to_vec());
    }
    seeds
}

/// Moves each empty centroid onto the point farthest from its own centroid.
fn reseed_empty(points: &[&[f64]], labels: &[usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let mut taken = BTreeSet::new();
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..points.len()).filter(|i| !taken.contains(i)).max_by(|&a, &b| {
            dist2(points[a], &centroids[labels[a]])
                .partial_cmp(&dist2(points[b], &centroids[labels[b]]))
                .expect("finite distances")
                .then(b.cmp(&a))
        });
        if let Some(i) = far {
            taken.insert(i);
            centroids[c] = points[i].to_vec();
        }
    }
}

/// Best of [`KMEANS_RESTARTS`] runs of [`kmeans_once`] by inertia.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut best = (f64::INFINITY, Vec::new(), Vec::new());
    for restart in 0..KMEANS_RESTARTS {
        let (labels, centroids) =
            kmeans_once(points, k, seed.wrapping_add(restart.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let inertia: f64 = points.iter().zip(&labels).map(|(p, &l)| dist2(p, &centroids[l])).sum();
        if restart == 0 || inertia < best.0 {
            best = (inertia, labels, centroids);
        }
    }
    (best.1, best.2)
}

/// Lloyd's algorithm with k-means++ seeding on the given points.
pub fn kmeans_once(points: &[&[f64]], k: usize, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>) {
    assert!(!points.is_empty() && k >= 1);
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_seeds(points, k, &mut rng);
    let mut labels = vec![0usize; points.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(&centroids, p).0;
        }
        let mut next: Vec<Vec<f64>> = (0..k)
            .map(|c| {
                let members: Vec<&[f64]> =
                    points.iter().zip(&labels).filter(|(_, l)| **l == c).map(|(p, _)| *p).collect();
                if members.is_empty() {
                    centroids[c].clone()
                } else {
                    mean_of(&members, dim)
                }
            })
            .collect();
        reseed_empty(points, &labels, &mut next);
        let shift = centroids.iter().zip(&next).map(|(a, b)| dist(a, b)).fold(0.0, f64::max);
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    for (l, p) in labels.iter_mut().zip(points) {
        *l = nearest(&centroids, p).0;
    }
    (labels, centroids)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionSample {
    pub round: u32,
    pub overall: f64,
    pub intra: f64,
    /// Unsmoothed intra/overall ratio for this round.
    pub ratio: f64,
}

/// Per-cohort clustering memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub k: usize,
    /// Cluster prototype memory: last label of every client seen by this cohort.
    pub persisted_labels: BTreeMap<ClientId, usize>,
    /// Valid only within the round that computed them.
    pub round_centroids: Vec<Vec<f64>>,
    pub initialized: bool,
    pub init_round: Option<u32>,
    pub dispersion_history: Vec<DispersionSample>,
    /// (round, fraction of returning participants whose label changed)
    pub churn_history: Vec<(u32, f64)>,
}

impl ClusterState {
    pub fn new(k: usize) -> Self {
        assert!(k >= 2, "split arity must be >= 2");
        Self {
            k,
            persisted_labels: BTreeMap::new(),
            round_centroids: Vec::new(),
            initialized: false,
            init_round: None,
            dispersion_history: Vec::new(),
            churn_history: Vec::new(),
        }
    }

    /// Trailing mean of the last `window` reduction ratios.
    pub fn smoothed_reduction(&self, window: usize) -> Option<f64> {
        let h = &self.dispersion_history;
        if h.is_empty() {
            return None;
        }
        let tail = &h[h.len().saturating_sub(window.max(1))..];
        Some(tail.iter().map(|s| s.ratio).sum::<f64>() / tail.len() as f64)
    }

    /// Mean churn over the last `window` measured rounds, if that many exist.
    pub fn recent_churn(&self, window: usize) -> Option<f64> {
        let h = &self.churn_history;
        if h.len() < window || window == 0 {
            return None;
        }
        let tail = &h[h.len() - window..];
        Some(tail.iter().map(|(_, c)| c).sum::<f64>() / window as f64)
    }

    /// Runs full K-means on this round's participants.
    ///
    /// Returns `false` (and stays uninitialized) when fewer than K clients
    /// participated.
    pub fn init_prototypes(&mut self, gradients: &[GradientUpdate], round: u32, seed: u64) -> bool {
        if self.initialized {
            return true;
        }
        if gradients.len() < self.k {
            return false;
        }
        let normed = normalized_by_client(gradients);
        let ids: Vec<ClientId> = normed.keys().copied().collect();
        let points: Vec<&[f64]> = normed.values().map(|v| v.as_slice()).collect();
        let (labels, centroids) = kmeans(&points, self.k, seed);
        for (id, l) in ids.iter().zip(labels) {
            self.persisted_labels.insert(*id, l);
        }
        self.round_centroids = centroids;
        self.initialized = true;
        self.init_round = Some(round);
        true
    }

    /// Assigns this round's participants to the nearest centroid estimated
    /// from the participants' persisted labels.
    pub fn assign_round(&mut self, gradients: &[GradientUpdate], round: u32, seed: u64) -> BTreeMap<ClientId, usize> {
        assert!(self.initialized, "assign_round before init_prototypes");
        if gradients.is_empty() {
            return BTreeMap::new();
        }
        let normed = normalized_by_client(gradients);
        let dim = normed.values().next().map(|v| v.len()).unwrap_or(0);
        let points: Vec<&[f64]> = normed.values().map(|v| v.as_slice()).collect();
        let ids: Vec<ClientId> = normed.keys().copied().collect();

        let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); self.k];
        for (id, p) in &normed {
            if let Some(&l) = self.persisted_labels.get(id) {
                groups[l].push(p);
            }
        }
        let occupied: Vec<usize> = (0..self.k).filter(|&k| !groups[k].is_empty()).collect();
        let mut centroids: Vec<Vec<f64>> = groups.iter().map(|g| mean_of(g, dim)).collect();
        if occupied.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            centroids = kmeans_pp_seeds(&points, self.k, &mut rng);
        } else if occupied.len() < self.k {
            let live: Vec<Vec<f64>> = occupied.iter().map(|&k| centroids[k].clone()).collect();
            let provisional: Vec<usize> = points.iter().map(|p| occupied[nearest(&live, p).0]).collect();
            reseed_empty(&points, &provisional, &mut centroids);
        }

        let mut assignment = BTreeMap::new();
        let (mut returning, mut changed) = (0usize, 0usize);
        for (id, p) in ids.iter().zip(&points) {
            let label = nearest(&centroids, p).0;
            if let Some(prev) = self.persisted_labels.insert(*id, label) {
                returning += 1;
                changed += usize::from(prev != label);
            }
            assignment.insert(*id, label);
        }
        if returning > 0 {
            self.churn_history.push((round, changed as f64 / returning as f64));
        }
        self.round_centroids = centroids;
        assignment
    }

    /// Estimated heterogeneity reduction `intra / overall` for this round,
    /// smoothed over `window` rounds.
    pub fn estimate_reduction(&mut self, gradients: &[GradientUpdate], round: u32, window: usize) -> f64 {
        let normed = normalized_by_client(gradients);
        let sample = dispersion_ratio(&normed, &self.persisted_labels, self.k, round);
        self.dispersion_history.push(sample);
        self.smoothed_reduction(window).unwrap_or(1.0)
    }
}

/// Overall and intra-cluster dispersion of normalized points under `labels`.
pub fn dispersion_ratio(
    normed: &BTreeMap<ClientId, Vec<f64>>,
    labels: &BTreeMap<ClientId, usize>,
    k: usize,
    round: u32,
) -> DispersionSample {
    let points: Vec<&[f64]> = normed.values().map(|v| v.as_slice()).collect();
    if points.is_empty() {
        return DispersionSample { round, overall: 0.0, intra: 0.0, ratio: 1.0 };
    }
    let dim = points[0].len();
    let global = mean_of(&points, dim);
    let overall = points.iter().map(|p| dist(p, &global)).sum::<f64>() / points.len() as f64;
    let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); k];
    for (id, p) in normed {
        if let Some(&l) = labels.get(id) {
            groups[l].push(p);
        }
    }
    let occupied: Vec<&Vec<&[f64]>> = groups.iter().filter(|g| !g.is_empty()).collect();
    let intra = if occupied.is_empty() {
        overall
    } else {
        occupied
            .iter()
            .map(|g| {
                let c = mean_of(g, dim);
                g.iter().map(|p| dist(p, &c)).sum::<f64>() / g.len() as f64
            })
            .sum::<f64>()
            / occupied.len() as f64
    };
    let ratio = if occupied.len() <= 1 || overall <= 1e-12 { 1.0 } else { intra / overall };
    DispersionSample { round, overall, intra, ratio }
}

/// `1 - D_i / (avg(D) + std(D))` against the mean of the known members.
///
/// Distances use raw deltas: once a cohort model fits its members their
/// updates shrink, and a misplaced client stands out by magnitude as much as
/// by direction. The ratio is still invariant to a common rescaling.
/// Falls back to all participants when none of them are known members.
pub fn exploit_reward(gradients: &[GradientUpdate], known_members: &BTreeSet<ClientId>) -> BTreeMap<ClientId, f64> {
    let deltas: BTreeMap<ClientId, &[f64]> = gradients.iter().map(|g| (g.client_id, g.delta.as_slice())).collect();
    if deltas.is_empty() {
        return BTreeMap::new();
    }
    let dim = deltas.values().next().map(|v| v.len()).unwrap_or(0);
    let known: Vec<&[f64]> = deltas.iter().filter(|(id, _)| known_members.contains(id)).map(|(_, v)| *v).collect();
    let center = if known.is_empty() {
        let all: Vec<&[f64]> = deltas.values().copied().collect();
        mean_of(&all, dim)
    } else {
        mean_of(&known, dim)
    };
    let d: Vec<(ClientId, f64)> = deltas.iter().map(|(id, v)| (*id, dist(v, &center))).collect();
    let n = d.len() as f64;
    let avg = d.iter().map(|(_, x)| x).sum::<f64>() / n;
    let std = (d.iter().map(|(_, x)| (x - avg) * (x - avg)).sum::<f64>() / n).sqrt();
    let threshold = avg + std;
    d.into_iter().map(|(id, x)| (id, if threshold > 0.0 { 1.0 - x / threshold } else { 1.0 })).collect()
}

/// `gamma * delta + (1 - gamma) * old`.
pub fn decayed_reward(old: f64, delta: f64, gamma: f64) -> f64 {
    gamma * delta + (1.0 - gamma) * old
}

/// Reward a child inherits from its parent at a split.
pub fn spawn_reward(parent_reward: f64, parent_label: Option<usize>, child_index: usize) -> f64 {
    parent_reward + if parent_label == Some(child_index) { SPAWN_BONUS } else { 0.0 }
}

/// Explore-reward increments `delta / (d(explored, m) + 1)` for every other leaf.
pub fn explore_increments(tree: &CohortTree, explored: &CohortId, delta: f64) -> Vec<(CohortId, f64)> {
    tree.leaves()
        .into_iter()
        .filter(|m| m != explored)
        .map(|m| {
            let d = explored.distance(&m);
            (m, delta / (d as f64 + 1.0))
        })
        .collect()
}

/// Client/cohort rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardLedger {
    pub rewards: BTreeMap<(ClientId, CohortId), f64>,
    pub gamma: f64,
}

impl Default for RewardLedger {
    fn default() -> Self {
        Self::new(0.2)
    }
}

impl RewardLedger {
    pub fn new(gamma: f64) -> Self {
        assert!(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0, 1]");
        Self { rewards: BTreeMap::new(), gamma }
    }

    pub fn get(&self, client: ClientId, cohort: &CohortId) -> Option<f64> {
        self.rewards.get(&(client, cohort.clone())).copied()
    }

    pub fn update_reward(&mut self, client: ClientId, cohort: &CohortId, delta: f64) -> f64 {
        assert!(delta.is_finite(), "reward increment must be finite");
        let slot = self.rewards.entry((client, cohort.clone())).or_insert(0.0);
        *slot = decayed_reward(*slot, delta, self.gamma);
        *slot
    }

    pub fn explore_reward(&mut self, tree: &CohortTree, client: ClientId, explored: &CohortId, delta: f64) {
        if delta == 0.0 {
            return;
        }
        for (m, inc) in explore_increments(tree, explored, delta) {
            *self.rewards.entry((client, m)).or_insert(0.0) += inc;
        }
    }

    pub fn spawn_rewards(
        &mut self,
        parent: &CohortId,
        children: &[CohortId],
        persisted_labels: &BTreeMap<ClientId, usize>,
    ) {
        let holders: Vec<(ClientId, f64)> =
            self.rewards.iter().filter(|((_, c), _)| c == parent).map(|((id, _), r)| (*id, *r)).collect();
        for (id, r) in holders {
            let label = persisted_labels.get(&id).copied();
            for (k, child) in children.iter().enumerate() {
                self.rewards.insert((id, child.clone()), spawn_reward(r, label, k));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    /// Folded constant of the resource lower bound.
    pub alpha: f64,
    pub min_participants_per_cohort: usize,
    /// Splitting into K requires the reduction ratio to reach `K^-exponent`.
    pub required_reduction_exponent: f64,
    pub clustering_start_round: u32,
    pub partition_window: (u32, u32),
    pub max_tree_depth: usize,
    /// Rounds after initialization before a split may be considered.
    pub warmup_rounds: u32,
    pub churn_threshold: f64,
    pub churn_window: usize,
    pub reduction_window: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self::for_rounds(300)
    }
}

impl PartitionConfig {
    /// Defaults scaled to the planned number of rounds.
    pub fn for_rounds(rounds: u32) -> Self {
        let start = (rounds as f64 * 0.2).round() as u32;
        let end = (rounds as f64 * 0.8).round() as u32;
        Self {
            alpha: 1.0,
            min_participants_per_cohort: 10,
            required_reduction_exponent: 0.5,
            clustering_start_round: start,
            partition_window: (start, end.max(start + 1)),
            max_tree_depth: 3,
            warmup_rounds: 3,
            churn_threshold: 0.2,
            churn_window: 3,
            reduction_window: 5,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0) {
            return Err("alpha must be > 0".into());
        }
        if self.min_participants_per_cohort == 0 {
            return Err("min_participants_per_cohort must be >= 1".into());
        }
        if self.partition_window.0 >= self.partition_window.1 {
            return Err("partition_window must satisfy earliest < latest".into());
        }
        Ok(())
    }
}

/// Values fixed by the root cohort that anchor the resource bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootBaseline {
    /// Root cohort's per-round participant budget.
    pub participants: f64,
    /// Root's first measured overall dispersion.
    pub dispersion: f64,
}

impl RootBaseline {
    pub fn resource_floor(&self, alpha: f64) -> f64 {
        if self.dispersion <= 0.0 {
            return f64::INFINITY;
        }
        alpha * (self.participants / (self.dispersion * self.dispersion)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CriteriaClauses {
    pub timing_and_stability: bool,
    pub reduction: bool,
    pub resources: bool,
    pub depth: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionDecision {
    pub split: bool,
    pub arity: usize,
    pub reduction: Option<f64>,
    pub clauses: CriteriaClauses,
}

/// Split iff the cohort is inside its window with stable labels, the
/// estimated reduction reaches `1/sqrt(K)`, each child keeps enough
/// participants, and the tree may still grow.
pub fn partition_criteria(
    state: &ClusterState,
    cfg: &PartitionConfig,
    per_round_resource: f64,
    current_round: u32,
    tree_depth: usize,
    root: Option<RootBaseline>,
) -> PartitionDecision {
    let k = state.k;
    let (earliest, latest) = cfg.partition_window;
    let in_window = current_round >= earliest && current_round <= latest;
    let warmed = state.initialized
        && current_round >= cfg.clustering_start_round
        && state.init_round.is_some_and(|r| current_round >= r + cfg.warmup_rounds);
    let stable = state.recent_churn(cfg.churn_window).is_some_and(|c| c < cfg.churn_threshold);
    let reduction = state.smoothed_reduction(cfg.reduction_window);
    let needed = (k as f64).powf(-cfg.required_reduction_exponent);
    let floor = root.map_or(f64::INFINITY, |r| r.resource_floor(cfg.alpha));
    let clauses = CriteriaClauses {
        timing_and_stability: in_window && warmed && stable,
        reduction: state.initialized && reduction.is_some_and(|r| r <= needed),
        resources: per_round_resource / k as f64 >= floor.max(cfg.min_participants_per_cohort as f64),
        depth: tree_depth < cfg.max_tree_depth,
    };
    PartitionDecision {
        split: clauses.timing_and_stability && clauses.reduction && clauses.resources && clauses.depth,
        arity: k,
        reduction,
        clauses,
    }
}

/// Pearson correlation between pairwise gradient cosine similarity and
/// pairwise negative label-histogram distance over all participant pairs.
pub fn similarity_correlation(gradients: &[GradientUpdate], population: &Population) -> f64 {
    let normed = normalized_by_client(gradients);
    let ids: Vec<ClientId> = normed.keys().copied().collect();
    if ids.len() < 3 {
        return 0.0;
    }
    let mut g = Vec::new();
    let mut d = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let (a, b) = (&normed[&ids[i]], &normed[&ids[j]]);
            g.push(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>());
            let ha = &population.client(ids[i]).label_histogram;
            let hb = &population.client(ids[j]).label_histogram;
            d.push(-ha.iter().zip(hb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    pearson(&g, &d)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 1e-300 || syy <= 1e-300 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn upd(id: ClientId, delta: Vec<f64>) -> GradientUpdate {
        GradientUpdate { client_id: id, delta, loss: 0.0, num_samples: 1 }
    }

    fn two_groups(n: usize, noise: f64, seed: u64) -> Vec<GradientUpdate> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise).unwrap();
        (0..n)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                let v: Vec<f64> = (0..6).map(|j| if j == 0 { s } else { 0.0 } + normal.sample(&mut rng)).collect();
                upd(i as ClientId, v)
            })
            .collect()
    }

    fn within_cost(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        (0..k)
            .map(|c| {
                let g: Vec<&[f64]> =
                    points.iter().zip(labels).filter(|(_, l)| **l == c).map(|(p, _)| p.as_slice()).collect();
                if g.is_empty() {
                    return 0.0;
                }
                let m = mean_of(&g, g[0].len());
                g.iter().map(|p| dist2(p, &m)).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn init_separates_antipodal_groups_like_brute_force() {
        let grads = two_groups(10, 0.05, 1);
        let mut st = ClusterState::new(2);
        assert!(st.init_prototypes(&grads, 0, 42));
        let points: Vec<Vec<f64>> = grads.iter().map(|g| normalize(&g.delta)).collect();
        // brute force: best labeling over all 2^n assignments
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 0u32..(1 << n) {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let c = within_cost(&points, &labels, 2);
            if c < best.0 - 1e-12 {
                best = (c, labels);
            }
        }
        let got: Vec<usize> = (0..n as ClientId).map(|i| st.persisted_labels[&i]).collect();
        assert!((within_cost(&points, &got, 2) - best.0).abs() < 1e-9);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(got[i] == got[j], i % 2 == j % 2);
            }
        }
    }

    #[test]
    fn identical_gradients_share_one_label() {
        let grads: Vec<_> = (0..5).map(|i| upd(i, vec![1.0, 2.0, 3.0])).collect();
        let mut st = ClusterState::new(2);
        st.init_prototypes(&grads, 0, 3);
        let labels: BTreeSet<usize> = st.persisted_labels.values().copied().collect();
        assert_eq!(labels.len(), 1);
    }

    #[test]
    fn init_deterministic_and_defers_when_too_few() {
        let grads = two_groups(12, 0.5, 2);
        let mut a = ClusterState::new(3);
        let mut b = ClusterState::new(3);
        a.init_prototypes(&grads, 0, 5);
        b.init_prototypes(&grads, 0, 5);
        assert_eq!(a, b);
        let mut c = ClusterState::new(3);
        assert!(!c.init_prototypes(&grads[..2], 0, 5));
        assert!(!c.initialized);
    }

    #[test]
    fn assign_round_examples() {
        let grads = two_groups(10, 0.05, 3);
        let mut st = ClusterState::new(2);
        st.init_prototypes(&grads, 0, 1);
        let label_a = st.persisted_labels[&0];
        // a participant equal to a centroid lands there
        let centroid_probe = upd(100, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut round = grads.clone();
        round.push(centroid_probe);
        let out = st.assign_round(&round, 1, 9);
        assert_eq!(out[&100], label_a);
        assert!(st.persisted_labels.contains_key(&100));
        assert!(out.values().all(|l| *l < 2));
    }

    #[test]
    fn new_client_nearest_group_mean() {
        // group A around (1,0), group B around (0,1); probe at 30 degrees from A
        let grads =
            vec![upd(0, vec![1.0, 0.1]), upd(1, vec![1.0, -0.1]), upd(2, vec![0.1, 1.0]), upd(3, vec![-0.1, 1.0])];
        let mut st = ClusterState::new(2);
        st.persisted_labels = [(0, 0), (1, 0), (2, 1), (3, 1)].into_iter().collect();
        st.initialized = true;
        let mut round = grads.clone();
        round.push(upd(9, vec![3f64.sqrt() / 2.0, 0.5]));
        let out = st.assign_round(&round, 1, 0);
        assert_eq!(out[&9], 0);
    }

    #[test]
    fn empty_cluster_is_reseeded_at_farthest_point() {
        let mut st = ClusterState::new(2);
        st.initialized = true;
        st.persisted_labels = [(0, 0), (1, 0), (2, 0)].into_iter().collect();
        let grads = vec![upd(0, vec![1.0, 0.0]), upd(1, vec![0.9, 0.1]), upd(2, vec![0.0, 1.0])];
        let out = st.assign_round(&grads, 1, 0);
        assert_eq!(out[&2], 1);
        assert_eq!(out[&0], 0);
    }

    #[test]
    fn exploit_reward_examples() {
        let grads = vec![upd(0, vec![1.0, 0.0]), upd(1, vec![1.0, 0.0])];
        let known: BTreeSet<ClientId> = [0, 1].into_iter().collect();
        let r = exploit_reward(&grads, &known);
        assert_eq!(r[&0], 1.0);
        assert_eq!(r[&1], 1.0);

        // five hand-built vectors against a naive recomputation
        let vs = [vec![1.0, 0.0], vec![0.8, 0.6], vec![0.6, 0.8], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let grads: Vec<_> = vs.iter().enumerate().map(|(i, v)| upd(i as ClientId, v.clone())).collect();
        let known: BTreeSet<ClientId> = [0, 1, 2].into_iter().collect();
        let r = exploit_reward(&grads, &known);
        let cx = (1.0 + 0.8 + 0.6) / 3.0;
        let cy = (0.0 + 0.6 + 0.8) / 3.0;
        let d: Vec<f64> = vs.iter().map(|v| ((v[0] - cx).powi(2) + (v[1] - cy).powi(2)).sqrt()).collect();
        let avg = d.iter().sum::<f64>() / 5.0;
        let var = d.iter().map(|x| (x - avg).powi(2)).sum::<f64>() / 5.0;
        let t = avg + var.sqrt();
        for i in 0..5 {
            assert!((r[&(i as ClientId)] - (1.0 - d[i] / t)).abs() < 1e-12);
        }
        assert!(r[&4] < 0.0);
    }

    #[test]
    fn exploit_boundary_is_zero() {
        // center at origin-ish: two known points symmetric, D equal for all -> std 0, T = avg
        let grads = vec![upd(0, vec![1.0, 0.0]), upd(1, vec![-1.0, 0.0])];
        let known: BTreeSet<ClientId> = [0, 1].into_iter().collect();
        let r = exploit_reward(&grads, &known);
        assert!(r[&0].abs() < 1e-12 && r[&1].abs() < 1e-12);
    }

    #[test]
    fn exploit_falls_back_to_all_participants() {
        let grads = vec![upd(0, vec![1.0, 0.0]), upd(1, vec![0.0, 1.0])];
        let none = BTreeSet::new();
        let all: BTreeSet<ClientId> = [0, 1].into_iter().collect();
        assert_eq!(exploit_reward(&grads, &none), exploit_reward(&grads, &all));
    }

    #[test]
    fn reward_recurrence() {
        let c = CohortId::root();
        let mut ledger = RewardLedger::new(0.2);
        assert!((ledger.update_reward(1, &c, 1.0) - 0.2).abs() < 1e-15);
        let mut fixed = RewardLedger::new(0.2);
        fixed.rewards.insert((1, c.clone()), 0.7);
        assert!((fixed.update_reward(1, &c, 0.7) - 0.7).abs() < 1e-15);
        let mut l = RewardLedger::new(0.2);
        for t in 1..=50 {
            let r = l.update_reward(2, &c, 1.0);
            assert!((r - (1.0 - 0.8f64.powi(t))).abs() < 1e-12);
        }
    }

    #[test]
    fn spawn_reward_examples() {
        let p = CohortId::root();
        let kids = p.children(2);
        let mut l = RewardLedger::new(0.2);
        l.rewards.insert((1, p.clone()), 0.4);
        l.rewards.insert((2, p.clone()), 0.3);
        let labels: BTreeMap<ClientId, usize> = [(1, 1)].into_iter().collect();
        l.spawn_rewards(&p, &kids, &labels);
        assert!((l.get(1, &kids[0]).unwrap() - 0.4).abs() < 1e-15);
        assert!((l.get(1, &kids[1]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(l.get(2, &kids[0]), Some(0.3));
        assert_eq!(l.get(2, &kids[1]), Some(0.3));
        assert_eq!(l.get(3, &kids[0]), None);
    }

    #[test]
    fn reduction_examples() {
        let grads = two_groups(40, 0.02, 4);
        let mut st = ClusterState::new(2);
        st.init_prototypes(&grads, 0, 1);
        assert!(st.estimate_reduction(&grads, 0, 5) < 0.2);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let iso: Vec<_> = (0..10_000).map(|i| upd(i, (0..50).map(|_| normal.sample(&mut rng)).collect())).collect();
        let mut st = ClusterState::new(2);
        st.init_prototypes(&iso, 0, 1);
        st.assign_round(&iso, 1, 2);
        assert!(st.estimate_reduction(&iso, 1, 5) > 0.8);

        let same: Vec<_> = (0..6).map(|i| upd(i, vec![1.0, 1.0])).collect();
        let mut st = ClusterState::new(2);
        st.init_prototypes(&same, 0, 1);
        assert_eq!(st.estimate_reduction(&same, 0, 5), 1.0);
    }

    #[test]
    fn reduction_is_smoothed_over_window() {
        let mut st = ClusterState::new(2);
        for (i, r) in [1.0, 0.9, 0.5, 0.5, 0.5, 0.5, 0.5].iter().enumerate() {
            st.dispersion_history.push(DispersionSample { round: i as u32, overall: 1.0, intra: *r, ratio: *r });
        }
        assert!((st.smoothed_reduction(5).unwrap() - 0.5).abs() < 1e-15);
        assert!((st.smoothed_reduction(7).unwrap() - 4.4 / 7.0).abs() < 1e-12);
    }

    fn ready_state(rho: f64, churn: f64) -> ClusterState {
        let mut st = ClusterState::new(2);
        st.initialized = true;
        st.init_round = Some(60);
        for r in 60..66 {
            st.dispersion_history.push(DispersionSample { round: r, overall: 1.0, intra: rho, ratio: rho });
            st.churn_history.push((r, churn));
        }
        st
    }

    #[test]
    fn criteria_examples() {
        let cfg = PartitionConfig::for_rounds(300);
        let root = Some(RootBaseline { participants: 200.0, dispersion: 2.0 });
        // floor = sqrt(200/4) = 7.07 -> threshold max(10, 7.07)
        let d = partition_criteria(&ready_state(0.9, 0.0), &cfg, 200.0, 70, 0, root);
        assert!(!d.split && !d.clauses.reduction);
        let d = partition_criteria(&ready_state(0.5, 0.0), &cfg, 200.0, 70, 0, root);
        assert!(d.split);
        assert_eq!(d.arity, 2);
        // resource below alpha floor: 15/2 = 7.5 < 10
        let mut tight = cfg;
        tight.min_participants_per_cohort = 1;
        tight.alpha = 3.0; // floor = 21.2
        for rho in [0.0, 0.1, 0.5] {
            let d = partition_criteria(&ready_state(rho, 0.0), &tight, 40.0, 70, 0, root);
            assert!(!d.split);
        }
    }

    #[test]
    fn criteria_truth_table() {
        let base = PartitionConfig::for_rounds(300);
        let root = Some(RootBaseline { participants: 100.0, dispersion: 1.0 });
        for mask in 0u8..16 {
            let timing = mask & 1 != 0;
            let reduction = mask & 2 != 0;
            let resources = mask & 4 != 0;
            let depth = mask & 8 != 0;
            let st = ready_state(if reduction { 0.5 } else { 0.8 }, if timing { 0.0 } else { 0.5 });
            let resource = if resources { 100.0 } else { 15.0 };
            let tree_depth = if depth { 1 } else { 3 };
            let d = partition_criteria(&st, &base, resource, 100, tree_depth, root);
            assert_eq!(d.split, mask == 15, "mask {mask:04b}: {d:?}");
            assert_eq!(d.clauses.timing_and_stability, timing);
            assert_eq!(d.clauses.reduction, reduction);
            assert_eq!(d.clauses.resources, resources);
            assert_eq!(d.clauses.depth, depth);
        }
    }

    #[test]
    fn criteria_respects_window_and_warmup() {
        let cfg = PartitionConfig::for_rounds(300);
        let root = Some(RootBaseline { participants: 100.0, dispersion: 1.0 });
        let st = ready_state(0.3, 0.0);
        assert!(!partition_criteria(&st, &cfg, 100.0, 250, 0, root).split);
        assert!(!partition_criteria(&st, &cfg, 100.0, 61, 0, root).split);
        assert!(partition_criteria(&st, &cfg, 100.0, 63, 0, root).split);
        assert!(!partition_criteria(&st, &cfg, 100.0, 100, 0, None).split);
    }

    #[test]
    fn correlation_examples() {
        use crate::population::{generate_population, LatentCohortSpec};
        let spec = LatentCohortSpec::uniform(3, 0.9, 0.0);
        let pop = generate_population(&spec, 12, 4, 2, 1).unwrap();
        // unit histograms as gradients give r = 1 exactly
        let mut pop2 = pop.clone();
        for (i, c) in pop2.clients.iter_mut().enumerate() {
            let mut h = vec![0.0; 4];
            h[i % 4] = 1.0;
            c.label_histogram = h;
        }
        let grads: Vec<_> = pop2.clients.iter().map(|c| upd(c.client_id, c.label_histogram.clone())).collect();
        assert!((similarity_correlation(&grads, &pop2) - 1.0).abs() < 1e-12);

        let flip: Vec<_> = pop2
            .clients
            .iter()
            .map(|c| {
                let k = c.label_histogram.iter().position(|v| *v == 1.0).unwrap();
                let mut v = vec![1.0; 4];
                v[k] = -3.0;
                upd(c.client_id, v)
            })
            .collect();
        let r = similarity_correlation(&flip, &pop2);
        assert!(r > 0.99, "same-class pairs still identical: {r}");

        // two classes whose gradients align across classes rather than within
        let mut pop3 = pop2.clone();
        for (i, c) in pop3.clients.iter_mut().enumerate() {
            c.label_histogram = if i % 2 == 0 { vec![1.0, 0.0, 0.0, 0.0] } else { vec![0.0, 1.0, 0.0, 0.0] };
        }
        let g: Vec<_> = pop3
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| {
                // within a class, members alternate between orthogonal directions
                let v = match (i % 2, (i / 2) % 2) {
                    (0, 0) => vec![1.0, 0.0],
                    (0, _) => vec![0.0, 1.0],
                    (_, 0) => vec![1.0, 0.05],
                    _ => vec![0.05, 1.0],
                };
                upd(c.client_id, v)
            })
            .collect();
        let r = similarity_correlation(&g, &pop3);
        assert!(r < 0.0, "r = {r}");
    }

    #[test]
    fn correlation_of_independent_signals_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        assert!(pearson(&x, &y).abs() < 0.3);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]), 0.0);
    }
}
