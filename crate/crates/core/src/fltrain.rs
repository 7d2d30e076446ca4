//! Local training, server aggregation (FedAvg / YoGi), evaluation and
//! local differential privacy for client updates.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{ClientId, ClientProfile, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Multinomial logistic regression with a bias per class.
    Logistic,
    /// One tanh hidden layer followed by a softmax layer.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub hidden_units: usize,
}

impl ModelSpec {
    pub fn logistic(feature_dim: usize, num_classes: usize) -> Self {
        Self { kind: ModelKind::Logistic, feature_dim, num_classes, hidden_units: 0 }
    }

    pub fn mlp(feature_dim: usize, num_classes: usize, hidden_units: usize) -> Self {
        Self { kind: ModelKind::Mlp, feature_dim, num_classes, hidden_units }
    }

    pub fn dim(&self) -> usize {
        let (d, c, h) = (self.feature_dim, self.num_classes, self.hidden_units);
        match self.kind {
            ModelKind::Logistic => c * (d + 1),
            ModelKind::Mlp => h * (d + 1) + c * (h + 1),
        }
    }

    pub fn init(&self, seed: u64) -> ModelWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = match self.kind {
            ModelKind::Logistic => 0.01,
            ModelKind::Mlp => (1.0 / self.feature_dim as f64).sqrt(),
        };
        let normal = Normal::new(0.0, std).expect("finite std");
        ModelWeights { values: (0..self.dim()).map(|_| normal.sample(&mut rng)).collect() }
    }

    /// Class scores for one sample.
    pub fn logits(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let (d, c) = (self.feature_dim, self.num_classes);
        match self.kind {
            ModelKind::Logistic => affine(&w[..c * d], &w[c * d..c * (d + 1)], x, c),
            ModelKind::Mlp => {
                let h = self.hidden_units;
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                let hidden: Vec<f64> = affine(w1, b1, x, h).into_iter().map(f64::tanh).collect();
                affine(w2, b2, &hidden, c)
            }
        }
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        argmax(&self.logits(w, x))
    }

    /// Mean softmax cross-entropy over `rows` of `data` and its gradient.
    pub fn loss_and_grad(&self, w: &[f64], data: &Dataset, rows: &[usize]) -> (f64, Vec<f64>) {
        let (d, c) = (self.feature_dim, self.num_classes);
        let mut grad = vec![0.0; w.len()];
        let mut loss = 0.0;
        let scale = 1.0 / rows.len() as f64;
        for &i in rows {
            let x = data.x(i);
            let y = data.labels[i] as usize;
            match self.kind {
                ModelKind::Logistic => {
                    let logits = self.logits(w, x);
                    let (l, p) = softmax_xent(&logits, y);
                    loss += l;
                    for k in 0..c {
                        let g = (p[k] - f64::from(u8::from(k == y))) * scale;
                        let row = &mut grad[k * d..(k + 1) * d];
                        for (gj, xj) in row.iter_mut().zip(x) {
                            *gj += g * xj;
                        }
                        grad[c * d + k] += g;
                    }
                }
                ModelKind::Mlp => {
                    let h = self.hidden_units;
                    let (w1, rest) = w.split_at(h * d);
                    let (b1, rest) = rest.split_at(h);
                    let (w2, b2) = rest.split_at(c * h);
                    let hidden: Vec<f64> = affine(w1, b1, x, h).into_iter().map(f64::tanh).collect();
                    let logits = affine(w2, b2, &hidden, c);
                    let (l, p) = softmax_xent(&logits, y);
                    loss += l;
                    let off_w2 = h * d + h;
                    let off_b2 = off_w2 + c * h;
                    let mut dh = vec![0.0; h];
                    for k in 0..c {
                        let g = (p[k] - f64::from(u8::from(k == y))) * scale;
                        for u in 0..h {
                            grad[off_w2 + k * h + u] += g * hidden[u];
                            dh[u] += g * w2[k * h + u];
                        }
                        grad[off_b2 + k] += g;
                    }
                    for u in 0..h {
                        let dz = dh[u] * (1.0 - hidden[u] * hidden[u]);
                        for j in 0..d {
                            grad[u * d + j] += dz * x[j];
                        }
                        grad[h * d + u] += dz;
                    }
                }
            }
        }
        (loss * scale, grad)
    }

    pub fn mean_loss(&self, w: &[f64], data: &Dataset, rows: &[usize]) -> f64 {
        rows.iter().map(|&i| softmax_xent(&self.logits(w, data.x(i)), data.labels[i] as usize).0).sum::<f64>()
            / rows.len() as f64
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let d = x.len();
    (0..out).map(|k| b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>()).collect()
}

fn softmax_xent(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
    (z.ln() + max - logits[y], p)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub values: Vec<f64>,
}

impl ModelWeights {
    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// What a participant reports after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientUpdate {
    pub client_id: ClientId,
    /// `w_before - w_after`.
    pub delta: Vec<f64>,
    pub loss: f64,
    pub num_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub k_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { k_steps: 10, batch_size: 6, lr: 0.05 }
    }
}

/// Runs `k_steps` of minibatch SGD on the client's training split.
///
/// Batches walk a per-epoch shuffle of the training rows; a batch size at or
/// above the split size is full-batch gradient descent. The reported loss is
/// the mean training loss at the final weights.
pub fn local_train(
    spec: &ModelSpec,
    w: &ModelWeights,
    client: &ClientProfile,
    params: TrainParams,
    seed: u64,
) -> Result<GradientUpdate> {
    if params.k_steps == 0 || params.batch_size == 0 {
        return Err(Error::Contract("k_steps and batch_size must be >= 1".into()));
    }
    let data = &client.dataset;
    let n = data.train_len();
    if n == 0 {
        return Err(Error::Contract(format!("client {} has no training samples", client.client_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = data.train_range().collect();
    let mut cursor = n;
    let mut cur = w.values.clone();
    let mut batch = Vec::with_capacity(params.batch_size.min(n));
    for _ in 0..params.k_steps {
        batch.clear();
        if params.batch_size >= n {
            batch.extend(data.train_range());
        } else {
            while batch.len() < params.batch_size {
                if cursor == n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
        }
        let (loss, grad) = spec.loss_and_grad(&cur, data, &batch);
        if !loss.is_finite() {
            return Err(Error::TrainingFailure { client_id: client.client_id, reason: "non-finite loss".into() });
        }
        for (v, g) in cur.iter_mut().zip(&grad) {
            *v -= params.lr * g;
        }
    }
    let rows: Vec<usize> = data.train_range().collect();
    let loss = spec.mean_loss(&cur, data, &rows);
    if !loss.is_finite() || cur.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrainingFailure { client_id: client.client_id, reason: "diverged".into() });
    }
    Ok(GradientUpdate {
        client_id: client.client_id,
        delta: w.values.iter().zip(&cur).map(|(a, b)| a - b).collect(),
        loss,
        num_samples: n,
    })
}

/// Mean of the update deltas, sample-weighted when `weighted` is set.
///
/// Updates are reduced in client-id order so the result does not depend on
/// the order they arrived in.
pub fn mean_delta(dim: usize, updates: &[GradientUpdate], weighted: bool) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::RoundAborted("no updates to aggregate".into()));
    }
    let mut order: Vec<&GradientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for u in order {
        if u.delta.len() != dim {
            return Err(Error::Contract(format!("update dim {} != model dim {dim}", u.delta.len())));
        }
        let weight = if weighted { u.num_samples as f64 } else { 1.0 };
        for (a, d) in acc.iter_mut().zip(&u.delta) {
            *a += weight * d;
        }
        total += weight;
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(acc)
}

pub fn fedavg_aggregate(w: &ModelWeights, updates: &[GradientUpdate], weighted: bool) -> Result<ModelWeights> {
    let mean = mean_delta(w.dim(), updates, weighted)?;
    Ok(ModelWeights { values: w.values.iter().zip(&mean).map(|(a, d)| a - d).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct YogiConfig {
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
}

impl Default for YogiConfig {
    fn default() -> Self {
        Self { server_lr: 0.01, beta1: 0.9, beta2: 0.99, tau: 1e-3 }
    }
}

impl YogiConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.server_lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta2 > 0.0
            && self.beta2 <= 1.0
            && self.tau > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid yogi parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct YogiState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub config: YogiConfig,
}

impl YogiState {
    pub fn new(dim: usize, config: YogiConfig) -> Self {
        Self { first_moment: vec![0.0; dim], second_moment: vec![0.0; dim], config }
    }
}

/// One YoGi server step using the mean client delta as pseudo-gradient.
pub fn yogi_aggregate(
    state: &YogiState,
    w: &ModelWeights,
    updates: &[GradientUpdate],
    weighted: bool,
) -> Result<(ModelWeights, YogiState)> {
    let mean = mean_delta(w.dim(), updates, weighted)?;
    let YogiConfig { server_lr, beta1, beta2, tau } = state.config;
    let mut next = state.clone();
    let mut values = w.values.clone();
    for i in 0..values.len() {
        // Descent direction: the averaged client model movement.
        let step = -mean[i];
        let sq = step * step;
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * step;
        let v_old = state.second_moment[i];
        let v = (v_old - (1.0 - beta2) * sq * (v_old - sq).signum()).max(0.0);
        next.first_moment[i] = m;
        next.second_moment[i] = v;
        values[i] += server_lr * m / (v.sqrt() + tau);
    }
    Ok((ModelWeights { values }, next))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_accuracy: f64,
    pub per_client_accuracy: BTreeMap<ClientId, f64>,
}

/// Top-1 accuracy on one client's held-out split.
pub fn client_accuracy(spec: &ModelSpec, w: &ModelWeights, client: &ClientProfile) -> f64 {
    let data = &client.dataset;
    let range = data.test_range();
    let n = range.len();
    if n == 0 {
        return 0.0;
    }
    let correct = range.filter(|&i| spec.predict(&w.values, data.x(i)) == data.labels[i] as usize).count();
    correct as f64 / n as f64
}

/// Client-uniform mean accuracy on held-out splits.
pub fn evaluate(spec: &ModelSpec, w: &ModelWeights, clients: &[&ClientProfile]) -> Result<Evaluation> {
    if clients.is_empty() {
        return Err(Error::Contract("evaluate needs at least one client".into()));
    }
    let per_client: BTreeMap<ClientId, f64> =
        clients.iter().map(|c| (c.client_id, client_accuracy(spec, w, c))).collect();
    let mean_accuracy = per_client.values().sum::<f64>() / per_client.len() as f64;
    Ok(Evaluation { mean_accuracy, per_client_accuracy: per_client })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdpConfig {
    pub enabled: bool,
    pub noise_scale: f64,
    pub clip_norm: f64,
}

impl Default for LdpConfig {
    fn default() -> Self {
        Self { enabled: false, noise_scale: 0.0, clip_norm: 1.0 }
    }
}

impl LdpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::Config("ldp needs clip_norm > 0 and noise_scale >= 0".into()));
        }
        Ok(())
    }
}

/// Clips the delta to `clip_norm` and adds N(0, (sigma * clip_norm)^2) noise per coordinate.
pub fn apply_ldp(update: &GradientUpdate, cfg: &LdpConfig, seed: u64) -> GradientUpdate {
    if !cfg.enabled {
        return update.clone();
    }
    let mut out = update.clone();
    let norm = out.delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > cfg.clip_norm {
        let s = cfg.clip_norm / norm;
        out.delta.iter_mut().for_each(|v| *v *= s);
    }
    let std = cfg.noise_scale * cfg.clip_norm;
    if std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        out.delta.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{generate_population, LatentCohortSpec};

    fn client_with(features: Vec<f64>, labels: Vec<u32>, dim: usize) -> ClientProfile {
        let n = labels.len();
        ClientProfile {
            client_id: 0,
            latent_cohort: 0,
            dataset: Dataset { feature_dim: dim, features, labels },
            label_histogram: vec![1.0 / n as f64; n],
            compute_speed: 1.0,
            network_time: 0.0,
            availability: vec![(0.0, 1.0)],
            corrupted: false,
        }
    }

    fn separable() -> ClientProfile {
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..20 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            f.extend([s * (1.0 + 0.1 * i as f64), 0.3 * s]);
            l.push(u32::from(i % 2 == 1));
        }
        client_with(f, l, 2)
    }

    fn upd(id: ClientId, delta: Vec<f64>, n: usize) -> GradientUpdate {
        GradientUpdate { client_id: id, delta, loss: 0.0, num_samples: n }
    }

    #[test]
    fn zero_lr_gives_zero_delta() {
        let spec = ModelSpec::logistic(2, 2);
        let w = spec.init(1);
        let c = separable();
        let u = local_train(&spec, &w, &c, TrainParams { k_steps: 5, batch_size: 6, lr: 0.0 }, 3).unwrap();
        assert!(u.delta.iter().all(|v| *v == 0.0));
        let rows: Vec<usize> = c.dataset.train_range().collect();
        assert_eq!(u.loss, spec.mean_loss(&w.values, &c.dataset, &rows));
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let spec = ModelSpec::logistic(2, 2);
        let w = spec.init(1);
        let c = separable();
        let mut prev = f64::INFINITY;
        for k in 1..=30 {
            let u = local_train(&spec, &w, &c, TrainParams { k_steps: k, batch_size: 100, lr: 0.1 }, 3).unwrap();
            assert!(u.loss < prev, "step {k}: {} !< {prev}", u.loss);
            prev = u.loss;
        }
    }

    #[test]
    fn identical_clients_identical_deltas() {
        let spec = ModelSpec::logistic(2, 2);
        let w = spec.init(2);
        let p = TrainParams::default();
        let a = local_train(&spec, &w, &separable(), p, 9).unwrap();
        let b = local_train(&spec, &w, &separable(), p, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_training_failure() {
        let spec = ModelSpec::logistic(2, 2);
        let w = ModelWeights { values: vec![f64::MAX; spec.dim()] };
        let r = local_train(&spec, &w, &separable(), TrainParams::default(), 0);
        assert!(matches!(r, Err(Error::TrainingFailure { .. })));
    }

    fn finite_difference_check(spec: ModelSpec, seed: u64) {
        let latent = LatentCohortSpec::uniform(1, 1.0, 0.0);
        let pop = generate_population(&latent, 1, spec.num_classes, spec.feature_dim, seed).unwrap();
        let client = &pop.clients[0];
        let w = spec.init(seed);
        let lr = 1e-3;
        let u = local_train(&spec, &w, client, TrainParams { k_steps: 1, batch_size: 1000, lr }, seed).unwrap();
        let rows: Vec<usize> = client.dataset.train_range().collect();
        let h = 1e-5;
        let mut num = Vec::with_capacity(w.dim());
        for i in 0..w.dim() {
            let mut p = w.values.clone();
            let mut m = w.values.clone();
            p[i] += h;
            m[i] -= h;
            num.push(
                (spec.mean_loss(&p, &client.dataset, &rows) - spec.mean_loss(&m, &client.dataset, &rows)) / (2.0 * h),
            );
        }
        let analytic: Vec<f64> = u.delta.iter().map(|d| d / lr).collect();
        let err = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = num.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(err / scale < 1e-4, "seed {seed}: relative error {}", err / scale);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            finite_difference_check(ModelSpec::logistic(4, 3), seed);
            finite_difference_check(ModelSpec::mlp(4, 3, 5), seed);
        }
    }

    #[test]
    fn fedavg_examples() {
        let w = ModelWeights { values: vec![1.0, 2.0] };
        let one = fedavg_aggregate(&w, &[upd(0, vec![0.5, -1.0], 3)], true).unwrap();
        assert_eq!(one.values, vec![0.5, 3.0]);
        let sym = fedavg_aggregate(&w, &[upd(0, vec![0.5, -1.0], 4), upd(1, vec![-0.5, 1.0], 4)], true).unwrap();
        assert_eq!(sym.values, w.values);
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 4.0];
        let r = fedavg_aggregate(&w, &[upd(0, a.clone(), 1), upd(1, b.clone(), 3)], true).unwrap();
        let expect: Vec<f64> = (0..2).map(|i| w.values[i] - (a[i] + 3.0 * b[i]) / 4.0).collect();
        assert_eq!(r.values, expect);
        assert!(matches!(fedavg_aggregate(&w, &[], true), Err(Error::RoundAborted(_))));
        assert!(matches!(fedavg_aggregate(&w, &[upd(0, vec![1.0], 1)], true), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_counts_match_unweighted_mean() {
        let w = ModelWeights { values: vec![0.0; 3] };
        let ups: Vec<_> = (0..7).map(|i| upd(i, vec![i as f64 * 0.37, -(i as f64), 1.0 / (i + 1) as f64], 5)).collect();
        let a = fedavg_aggregate(&w, &ups, true).unwrap();
        let b = fedavg_aggregate(&w, &ups, false).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn yogi_zero_gradient_leaves_weights() {
        let w = ModelWeights { values: vec![0.3, -0.2] };
        let s = YogiState::new(2, YogiConfig::default());
        let (w2, s2) = yogi_aggregate(&s, &w, &[upd(0, vec![0.0, 0.0], 1)], true).unwrap();
        assert_eq!(w2, w);
        assert_eq!(s2.first_moment, vec![0.0, 0.0]);
        assert_eq!(s2.second_moment, vec![0.0, 0.0]);

        let mut primed = s.clone();
        primed.first_moment = vec![1.0, -1.0];
        primed.second_moment = vec![4.0, 4.0];
        let (_, s3) = yogi_aggregate(&primed, &w, &[upd(0, vec![0.0, 0.0], 1)], true).unwrap();
        assert_eq!(s3.first_moment, vec![0.9, -0.9]);
        assert_eq!(s3.second_moment, vec![4.0, 4.0]);
    }

    #[test]
    fn yogi_limit_matches_scaled_fedavg() {
        let w = ModelWeights { values: vec![0.3, -0.2, 1.0] };
        let ups = vec![upd(0, vec![0.1, 0.2, -0.3], 2), upd(1, vec![0.05, -0.1, 0.4], 5)];
        let cfg = YogiConfig { server_lr: 1e4, beta1: 1e-12, beta2: 1.0, tau: 1e4 };
        let (y, _) = yogi_aggregate(&YogiState::new(3, cfg), &w, &ups, true).unwrap();
        let f = fedavg_aggregate(&w, &ups, true).unwrap();
        for (a, b) in y.values.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn yogi_second_moment_grows_under_repeated_gradients() {
        let w = ModelWeights { values: vec![0.0; 3] };
        let ups = vec![upd(0, vec![0.5, -0.2, 0.1], 1)];
        let mut state = YogiState::new(3, YogiConfig::default());
        let mut cur = w;
        for _ in 0..10 {
            let (nw, ns) = yogi_aggregate(&state, &cur, &ups, true).unwrap();
            for i in 0..3 {
                assert!(ns.second_moment[i] >= state.second_moment[i]);
            }
            state = ns;
            cur = nw;
        }
    }

    #[test]
    fn random_model_is_near_chance() {
        let latent = LatentCohortSpec::uniform(1, 1.0, 0.0);
        let spec = ModelSpec::logistic(8, 10);
        let pop = generate_population(&latent, 200, 10, 8, 4).unwrap();
        let clients: Vec<&ClientProfile> = pop.clients.iter().collect();
        let mut total = 0.0;
        for s in 0..5 {
            total += evaluate(&spec, &spec.init(100 + s), &clients).unwrap().mean_accuracy;
        }
        let acc = total / 5.0;
        assert!((acc - 0.1).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn perfect_model_scores_one() {
        // label = argmax of the two features; identity weights classify perfectly
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..10 {
            if i % 2 == 0 {
                f.extend([2.0, -1.0]);
                l.push(0);
            } else {
                f.extend([-1.0, 2.0]);
                l.push(1);
            }
        }
        let c = client_with(f, l, 2);
        let spec = ModelSpec::logistic(2, 2);
        let w = ModelWeights { values: vec![10.0, 0.0, 0.0, 10.0, 0.0, 0.0] };
        let e = evaluate(&spec, &w, &[&c]).unwrap();
        assert_eq!(e.mean_accuracy, 1.0);
        assert_eq!(e.per_client_accuracy.len(), 1);
    }

    #[test]
    fn ldp_examples() {
        let u = upd(0, vec![0.3, 0.4], 1);
        let cfg = LdpConfig { enabled: true, noise_scale: 0.0, clip_norm: 1.0 };
        assert_eq!(apply_ldp(&u, &cfg, 1), u);
        let big = upd(0, vec![1.2, 1.6], 1);
        let out = apply_ldp(&big, &cfg, 1);
        let n = out.delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);

        let zero = upd(0, vec![0.0; 10_000], 1);
        let cfg = LdpConfig { enabled: true, noise_scale: 1.0, clip_norm: 0.5 };
        let out = apply_ldp(&zero, &cfg, 7);
        let mean = out.delta.iter().sum::<f64>() / 1e4;
        let sd = (out.delta.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e4).sqrt();
        assert!((sd - 0.5).abs() < 0.025, "sd {sd}");
        assert_eq!(apply_ldp(&zero, &cfg, 7), out);
    }
}
