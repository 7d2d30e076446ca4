//! Synthetic client populations with a hidden cohort structure.
//!
//! Each client belongs to one latent cohort. A cohort fixes a label profile
//! (skewed towards its own block of classes), a mean shift in feature space
//! and, optionally, its own mapping from feature clusters to labels. The
//! latent assignment is ground truth for evaluation only.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub type ClientId = u32;

/// Ground-truth grouping of a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentCohortSpec {
    pub num_latent_cohorts: usize,
    /// Share of a cohort's label mass placed on its own block of classes.
    pub label_skew: f64,
    /// Norm of each cohort's mean offset in feature space.
    pub feature_shift: f64,
    pub cohort_weights: Vec<f64>,
    /// Cohort `c` observes latent class `j` as label `(j + c) mod C`.
    #[serde(default)]
    pub conflicting_labels: bool,
}

impl LatentCohortSpec {
    pub fn uniform(num_latent_cohorts: usize, label_skew: f64, feature_shift: f64) -> Self {
        let k = num_latent_cohorts.max(1);
        Self {
            num_latent_cohorts,
            label_skew,
            feature_shift,
            cohort_weights: vec![1.0 / k as f64; k],
            conflicting_labels: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_latent_cohorts == 0 {
            return Err(Error::Config("num_latent_cohorts must be >= 1".into()));
        }
        if !(self.label_skew > 0.0 && self.label_skew <= 1.0) {
            return Err(Error::Config(format!("label_skew {} outside (0, 1]", self.label_skew)));
        }
        if !(self.feature_shift >= 0.0) {
            return Err(Error::Config("feature_shift must be >= 0".into()));
        }
        if self.cohort_weights.len() != self.num_latent_cohorts {
            return Err(Error::Config(format!(
                "cohort_weights has {} entries, expected {}",
                self.cohort_weights.len(),
                self.num_latent_cohorts
            )));
        }
        if self.cohort_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("cohort_weights must be non-negative".into()));
        }
        let total: f64 = self.cohort_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("cohort_weights sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Synthetic on/off availability traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvailabilitySpec {
    /// Long-run fraction of time a client is online. `>= 1` means always on.
    pub duty_cycle: f64,
    pub mean_session_secs: f64,
    pub horizon_secs: f64,
}

impl Default for AvailabilitySpec {
    fn default() -> Self {
        Self { duty_cycle: 0.05, mean_session_secs: 1800.0, horizon_secs: 30.0 * 86_400.0 }
    }
}

/// Everything besides the latent structure that shapes generated clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorOptions {
    pub min_samples: usize,
    pub max_samples: usize,
    /// Norm of each class mean in feature space.
    pub class_separation: f64,
    pub noise_std: f64,
    /// Dirichlet concentration of a client's label distribution around its cohort profile.
    pub client_concentration: f64,
    pub compute_speed_median: f64,
    pub compute_speed_sigma: f64,
    pub network_time_min: f64,
    pub network_time_max: f64,
    pub availability: AvailabilitySpec,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            min_samples: 40,
            max_samples: 80,
            class_separation: 3.0,
            noise_std: 1.0,
            client_concentration: 20.0,
            compute_speed_median: 2.0,
            compute_speed_sigma: 0.5,
            network_time_min: 5.0,
            network_time_max: 20.0,
            availability: AvailabilitySpec::default(),
        }
    }
}

impl GeneratorOptions {
    pub fn validate(&self) -> Result<()> {
        if self.min_samples < 5 || self.max_samples < self.min_samples {
            return Err(Error::Config("need 5 <= min_samples <= max_samples".into()));
        }
        if !(self.noise_std >= 0.0 && self.class_separation >= 0.0) {
            return Err(Error::Config("noise_std and class_separation must be >= 0".into()));
        }
        if !(self.client_concentration > 0.0) {
            return Err(Error::Config("client_concentration must be > 0".into()));
        }
        if !(self.compute_speed_median > 0.0 && self.compute_speed_sigma >= 0.0) {
            return Err(Error::Config("compute speed parameters must be positive".into()));
        }
        if !(self.network_time_min >= 0.0 && self.network_time_max >= self.network_time_min) {
            return Err(Error::Config("need 0 <= network_time_min <= network_time_max".into()));
        }
        let a = &self.availability;
        if !(a.duty_cycle > 0.0 && a.mean_session_secs > 0.0 && a.horizon_secs > 0.0) {
            return Err(Error::Config("availability parameters must be positive".into()));
        }
        Ok(())
    }
}

/// A client's local labeled samples, row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Samples held out for evaluation: the last 20% (at least one).
    pub fn test_len(&self) -> usize {
        let n = self.len();
        if n < 2 {
            return n;
        }
        ((n as f64 * 0.2).floor() as usize).max(1)
    }

    pub fn train_len(&self) -> usize {
        let n = self.len();
        if n < 2 {
            n
        } else {
            n - self.test_len()
        }
    }

    pub fn train_range(&self) -> std::ops::Range<usize> {
        0..self.train_len()
    }

    pub fn test_range(&self) -> std::ops::Range<usize> {
        self.len() - self.test_len()..self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientProfile {
    pub client_id: ClientId,
    /// Hidden ground truth, never read by the algorithm.
    pub latent_cohort: usize,
    pub dataset: Dataset,
    pub label_histogram: Vec<f64>,
    /// Samples per second.
    pub compute_speed: f64,
    /// Seconds per model transfer.
    pub network_time: f64,
    /// Sorted, disjoint `[on, off)` intervals in simulated seconds.
    pub availability: Vec<(f64, f64)>,
    /// Set by label-flip corruption; evaluation only.
    pub corrupted: bool,
}

impl ClientProfile {
    pub fn is_available(&self, t: f64) -> bool {
        self.session_at(t).is_some()
    }

    /// Index and end time of the session covering `t`.
    pub fn session_at(&self, t: f64) -> Option<(usize, f64)> {
        let idx = self.availability.partition_point(|&(on, _)| on <= t);
        if idx == 0 {
            return None;
        }
        let (on, off) = self.availability[idx - 1];
        (on <= t && t < off).then_some((idx - 1, off))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub clients: Vec<ClientProfile>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub rng_seed: u64,
}

impl Population {
    pub fn client(&self, id: ClientId) -> &ClientProfile {
        &self.clients[id as usize]
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    /// Writes client histograms and latent assignments as CSV.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![
            "client_id".to_string(),
            "latent_cohort".to_string(),
            "corrupted".to_string(),
            "num_samples".to_string(),
        ];
        header.extend((0..self.num_classes).map(|c| format!("hist_{c}")));
        w.write_record(&header)?;
        for c in &self.clients {
            let mut row = vec![
                c.client_id.to_string(),
                c.latent_cohort.to_string(),
                u8::from(c.corrupted).to_string(),
                c.dataset.len().to_string(),
            ];
            row.extend(c.label_histogram.iter().map(|v| crate::report::fmt_g9(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The label profile of latent cohort `c` before any label remapping.
pub fn latent_label_profile(spec: &LatentCohortSpec, num_classes: usize, c: usize) -> Vec<f64> {
    let k = spec.num_latent_cohorts.max(1);
    let block: Vec<usize> =
        if k <= num_classes { (0..num_classes).filter(|j| j % k == c % k).collect() } else { vec![c % num_classes] };
    let base = (1.0 - spec.label_skew) / num_classes as f64;
    let mut p = vec![base; num_classes];
    for &j in &block {
        p[j] += spec.label_skew / block.len() as f64;
    }
    p
}

/// Observed-label mapping for cohort `c`.
pub fn label_map(spec: &LatentCohortSpec, num_classes: usize, c: usize) -> Vec<u32> {
    (0..num_classes).map(|j| if spec.conflicting_labels { ((j + c) % num_classes) as u32 } else { j as u32 }).collect()
}

/// Expected observed-label histogram of a member of cohort `c`.
pub fn expected_label_histogram(spec: &LatentCohortSpec, num_classes: usize, c: usize) -> Vec<f64> {
    let p = latent_label_profile(spec, num_classes, c);
    let map = label_map(spec, num_classes, c);
    let mut out = vec![0.0; num_classes];
    for (j, pj) in p.iter().enumerate() {
        out[map[j] as usize] += pj;
    }
    out
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn availability_trace(rng: &mut ChaCha8Rng, spec: &AvailabilitySpec) -> Vec<(f64, f64)> {
    if spec.duty_cycle >= 1.0 {
        return vec![(0.0, spec.horizon_secs)];
    }
    let on = Exp::new(1.0 / spec.mean_session_secs).expect("positive rate");
    let mean_off = spec.mean_session_secs * (1.0 - spec.duty_cycle) / spec.duty_cycle;
    let off = Exp::new(1.0 / mean_off).expect("positive rate");
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut online = rng.random::<f64>() < spec.duty_cycle;
    if !online {
        // Start somewhere inside an off period.
        t = off.sample(rng) * rng.random::<f64>();
        online = true;
    }
    while t < spec.horizon_secs {
        if online {
            let end = (t + on.sample(rng)).min(spec.horizon_secs);
            if end > t {
                out.push((t, end));
            }
            t = end;
        } else {
            t += off.sample(rng);
        }
        online = !online;
    }
    out
}

/// Dirichlet draw via normalized Gamma variates.
fn dirichlet(alpha: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut g = alpha
        .iter()
        .map(|&a| Ok(Gamma::new(a, 1.0).map_err(|e| Error::Config(e.to_string()))?.sample(rng)))
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = g.iter().sum();
    if total > 0.0 {
        g.iter_mut().for_each(|x| *x /= total);
    } else {
        let a: f64 = alpha.iter().sum();
        g = alpha.iter().map(|x| x / a).collect();
    }
    Ok(g)
}

pub fn generate_population(
    spec: &LatentCohortSpec,
    n_clients: usize,
    num_classes: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Population> {
    generate_population_with(spec, &GeneratorOptions::default(), n_clients, num_classes, feature_dim, seed)
}

pub fn generate_population_with(
    spec: &LatentCohortSpec,
    opts: &GeneratorOptions,
    n_clients: usize,
    num_classes: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Population> {
    spec.validate()?;
    opts.validate()?;
    if num_classes < 2 {
        return Err(Error::Config("num_classes must be >= 2".into()));
    }
    if feature_dim == 0 {
        return Err(Error::Config("feature_dim must be >= 1".into()));
    }
    if n_clients < spec.num_latent_cohorts {
        return Err(Error::Config(format!(
            "n_clients ({n_clients}) must be >= num_latent_cohorts ({})",
            spec.num_latent_cohorts
        )));
    }

    let mut global = stream_rng(seed, Stream::Population, u64::MAX, 0);
    let class_means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| random_direction(&mut global, feature_dim).into_iter().map(|x| x * opts.class_separation).collect())
        .collect();
    let shifts: Vec<Vec<f64>> = (0..spec.num_latent_cohorts)
        .map(|_| random_direction(&mut global, feature_dim).into_iter().map(|x| x * spec.feature_shift).collect())
        .collect();
    let profiles: Vec<Vec<f64>> =
        (0..spec.num_latent_cohorts).map(|c| latent_label_profile(spec, num_classes, c)).collect();
    let maps: Vec<Vec<u32>> = (0..spec.num_latent_cohorts).map(|c| label_map(spec, num_classes, c)).collect();

    let noise = Normal::new(0.0, opts.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let speed = LogNormal::new(opts.compute_speed_median.ln(), opts.compute_speed_sigma)
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut clients = Vec::with_capacity(n_clients);
    for id in 0..n_clients {
        let mut rng = stream_rng(seed, Stream::Population, id as u64, 0);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut latent = spec.num_latent_cohorts - 1;
        for (c, w) in spec.cohort_weights.iter().enumerate() {
            acc += w;
            if u < acc {
                latent = c;
                break;
            }
        }
        let alpha: Vec<f64> = profiles[latent].iter().map(|p| opts.client_concentration * p + 1e-3).collect();
        let q = dirichlet(&alpha, &mut rng)?;
        let n = rng.random_range(opts.min_samples..=opts.max_samples);
        let mut features = Vec::with_capacity(n * feature_dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let r: f64 = rng.random();
            let mut cum = 0.0;
            let mut j = num_classes - 1;
            for (idx, qj) in q.iter().enumerate() {
                cum += qj;
                if r < cum {
                    j = idx;
                    break;
                }
            }
            for d in 0..feature_dim {
                features.push(class_means[j][d] + shifts[latent][d] + noise.sample(&mut rng));
            }
            labels.push(maps[latent][j]);
        }
        let mut hist = vec![0.0; num_classes];
        for &y in &labels {
            hist[y as usize] += 1.0;
        }
        hist.iter_mut().for_each(|h| *h /= n as f64);
        let compute_speed = speed.sample(&mut rng);
        let network_time = if opts.network_time_max > opts.network_time_min {
            rng.random_range(opts.network_time_min..opts.network_time_max)
        } else {
            opts.network_time_min
        };
        let availability = availability_trace(&mut rng, &opts.availability);
        clients.push(ClientProfile {
            client_id: id as ClientId,
            latent_cohort: latent,
            dataset: Dataset { feature_dim, features, labels },
            label_histogram: hist,
            compute_speed,
            network_time,
            availability,
            corrupted: false,
        });
    }
    Ok(Population { clients, num_classes, feature_dim, rng_seed: seed })
}

/// Euclidean distance between two clients' label histograms.
pub fn pairwise_distribution_distance(a: &ClientProfile, b: &ClientProfile) -> Result<f64> {
    histogram_distance(&a.label_histogram, &b.label_histogram)
}

pub fn histogram_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("histogram lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Intra-cohort heterogeneity and the cohorts that had no members.
#[derive(Debug, Clone, PartialEq)]
pub struct Heterogeneity {
    pub j: f64,
    pub empty_cohorts: Vec<usize>,
}

/// `J = sum_m 1/(2|C_m|) sum_{i,j in C_m} ||x_i - x_j||^2` over label histograms.
pub fn heterogeneity_j(
    members: &[&ClientProfile],
    membership: &BTreeMap<ClientId, usize>,
    m: usize,
) -> Result<Heterogeneity> {
    let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); m];
    for c in members {
        let k = *membership
            .get(&c.client_id)
            .ok_or_else(|| Error::Contract(format!("client {} has no membership", c.client_id)))?;
        if k >= m {
            return Err(Error::Contract(format!("cohort index {k} out of range [0, {m})")));
        }
        groups[k].push(&c.label_histogram);
    }
    let mut j = 0.0;
    let mut empty_cohorts = Vec::new();
    for (k, g) in groups.iter().enumerate() {
        if g.is_empty() {
            empty_cohorts.push(k);
            continue;
        }
        // (1/2n) sum_{i,j} ||x_i - x_j||^2 == sum_i ||x_i - mean||^2
        let dim = g[0].len();
        let mut mean = vec![0.0; dim];
        for x in g {
            for (m, v) in mean.iter_mut().zip(x.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= g.len() as f64);
        j += g.iter().map(|x| x.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>();
    }
    Ok(Heterogeneity { j, empty_cohorts })
}

/// Clients whose availability covers `sim_time`, in id order.
pub fn sample_available(population: &Population, sim_time: f64) -> Vec<ClientId> {
    population.clients.iter().filter(|c| c.is_available(sim_time)).map(|c| c.client_id).collect()
}

/// Adjusted Rand Index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((*x, *y)).or_default() += 1;
        *rows.entry(*x).or_default() += 1;
        *cols.entry(*y).or_default() += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| c2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| c2(v)).sum();
    let total = c2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        return if (index - expected).abs() < 1e-12 { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn histogram_distance_is_a_metric(
            a in proptest::collection::vec(0.0f64..1.0, 5),
            b in proptest::collection::vec(0.0f64..1.0, 5),
            c in proptest::collection::vec(0.0f64..1.0, 5),
        ) {
            let ab = histogram_distance(&a, &b).unwrap();
            let ba = histogram_distance(&b, &a).unwrap();
            let ac = histogram_distance(&a, &c).unwrap();
            let cb = histogram_distance(&c, &b).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert_eq!(histogram_distance(&a, &a).unwrap(), 0.0);
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn refining_by_latent_cohort_never_increases_j(seed in 0u64..50) {
            let spec = LatentCohortSpec::uniform(3, 0.9, 0.0);
            let pop = generate_population(&spec, 30, 4, 2, seed).unwrap();
            let members: Vec<&ClientProfile> = pop.clients.iter().collect();
            let coarse: BTreeMap<_, _> = pop.clients.iter().map(|c| (c.client_id, 0)).collect();
            let fine: BTreeMap<_, _> = pop.clients.iter().map(|c| (c.client_id, c.latent_cohort)).collect();
            let jc = heterogeneity_j(&members, &coarse, 1).unwrap().j;
            let jf = heterogeneity_j(&members, &fine, 3).unwrap().j;
            prop_assert!(jf >= 0.0);
            prop_assert!(jf <= jc + 1e-12);
        }
    }
}
