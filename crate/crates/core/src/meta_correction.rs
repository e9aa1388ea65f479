//! Meta-learned correction of noisy partial-solution rewards.
//!
//! Every noisy reward carries a trainable residual. One iteration takes a
//! virtual gradient step of the reward model on the corrected noisy rewards,
//! measures the stepped model on clean final-solution rewards, and moves the
//! residuals along a finite-difference estimate of the resulting
//! hypergradient. A brute-force central-difference oracle over the whole
//! pipeline is kept alongside for verification.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward_model::{dot, grad_mse, mse_loss, score, FeatureVector, ModelError, PrmParams};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("unknown reward key {0}")]
    UnknownKey(RewardKey),
    #[error("duplicate reward key {0}")]
    DuplicateKey(RewardKey),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("reward {value} for {what} outside [0, 1]")]
    RewardOutOfRange { what: String, value: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Identifies one partial-solution reward.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RewardKey {
    pub problem_id: String,
    pub trajectory_id: String,
    pub step_index: usize,
}

impl RewardKey {
    pub fn new(problem_id: impl Into<String>, trajectory_id: impl Into<String>, step_index: usize) -> Self {
        Self { problem_id: problem_id.into(), trajectory_id: trajectory_id.into(), step_index }
    }
}

impl std::fmt::Display for RewardKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.problem_id, self.trajectory_id, self.step_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyRow {
    pub key: RewardKey,
    pub features: FeatureVector,
    /// Monte Carlo estimate in [0, 1].
    pub base: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaRow {
    pub features: FeatureVector,
    pub reward: f64,
}

#[derive(Debug, Clone, Default)]
pub struct NoisyDataset {
    pub rows: Vec<NoisyRow>,
}

impl NoisyDataset {
    pub fn new(rows: Vec<NoisyRow>) -> Result<Self, MetaError> {
        let mut seen = std::collections::HashSet::with_capacity(rows.len());
        for row in &rows {
            check_unit(&row.key.to_string(), row.base)?;
            if !seen.insert(&row.key) {
                return Err(MetaError::DuplicateKey(row.key.clone()));
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct MetaDataset {
    pub rows: Vec<MetaRow>,
}

impl MetaDataset {
    pub fn new(rows: Vec<MetaRow>) -> Result<Self, MetaError> {
        for (i, row) in rows.iter().enumerate() {
            check_unit(&format!("meta row {i}"), row.reward)?;
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn check_unit(what: &str, value: f64) -> Result<(), MetaError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(MetaError::RewardOutOfRange { what: what.to_string(), value });
    }
    Ok(())
}

/// Trainable residuals over the Monte Carlo base rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    keys: Vec<RewardKey>,
    index: HashMap<RewardKey, usize>,
    base: Vec<f64>,
    residual: Vec<f64>,
}

/// One serialized table entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTableRecord {
    pub problem_id: String,
    pub trajectory_id: String,
    pub step_index: usize,
    pub base: f64,
    pub residual: f64,
    pub corrected: f64,
}

impl RewardTable {
    /// Zero residuals over the dataset's base rewards.
    pub fn from_dataset(noisy: &NoisyDataset) -> Self {
        let keys: Vec<RewardKey> = noisy.rows.iter().map(|r| r.key.clone()).collect();
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        Self {
            base: noisy.rows.iter().map(|r| r.base).collect(),
            residual: vec![0.0; keys.len()],
            keys,
            index,
        }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (RewardKey, f64, f64)>) -> Result<Self, MetaError> {
        let mut table = Self { keys: Vec::new(), index: HashMap::new(), base: Vec::new(), residual: Vec::new() };
        for (key, base, residual) in entries {
            check_unit(&key.to_string(), base)?;
            if table.index.insert(key.clone(), table.keys.len()).is_some() {
                return Err(MetaError::DuplicateKey(key));
            }
            table.keys.push(key);
            table.base.push(base);
            table.residual.push(residual);
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[RewardKey] {
        &self.keys
    }

    fn slot(&self, key: &RewardKey) -> Result<usize, MetaError> {
        self.index.get(key).copied().ok_or_else(|| MetaError::UnknownKey(key.clone()))
    }

    pub fn base(&self, key: &RewardKey) -> Result<f64, MetaError> {
        Ok(self.base[self.slot(key)?])
    }

    pub fn residual(&self, key: &RewardKey) -> Result<f64, MetaError> {
        Ok(self.residual[self.slot(key)?])
    }

    pub fn set_residual(&mut self, key: &RewardKey, value: f64) -> Result<(), MetaError> {
        let i = self.slot(key)?;
        self.residual[i] = value;
        Ok(())
    }

    /// `base + residual` before clamping.
    pub fn raw(&self, key: &RewardKey) -> Result<f64, MetaError> {
        let i = self.slot(key)?;
        Ok(self.base[i] + self.residual[i])
    }

    pub fn corrected(&self, key: &RewardKey) -> Result<f64, MetaError> {
        Ok(self.raw(key)?.clamp(0.0, 1.0))
    }

    pub fn corrected_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.base.iter().zip(&self.residual).map(|(b, r)| (b + r).clamp(0.0, 1.0))
    }

    pub fn records(&self) -> Vec<RewardTableRecord> {
        self.keys
            .iter()
            .enumerate()
            .map(|(i, k)| RewardTableRecord {
                problem_id: k.problem_id.clone(),
                trajectory_id: k.trajectory_id.clone(),
                step_index: k.step_index,
                base: self.base[i],
                residual: self.residual[i],
                corrected: (self.base[i] + self.residual[i]).clamp(0.0, 1.0),
            })
            .collect()
    }
}

/// Free-function form of [`RewardTable::corrected`].
pub fn corrected(table: &RewardTable, key: &RewardKey) -> Result<f64, MetaError> {
    table.corrected(key)
}

/// Optimizer applied to the residual table.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetaOptimizer {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl MetaOptimizer {
    pub fn adam() -> Self {
        MetaOptimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub eta: f64,
    pub eta_meta: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub fd_alpha_scale: f64,
    pub seed: u64,
    pub meta_optimizer: MetaOptimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 1e-4,
            eta_meta: 1e-3,
            weight_decay: 1e-3,
            batch_size: 16,
            iterations: 2000,
            fd_alpha_scale: 0.01,
            seed: 0,
            meta_optimizer: MetaOptimizer::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        let positive = [("eta", self.eta), ("eta_meta", self.eta_meta), ("fd_alpha_scale", self.fd_alpha_scale)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(MetaError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(MetaError::InvalidConfig(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(MetaError::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

fn targets(table: &RewardTable, batch: &[&NoisyRow]) -> Result<Vec<(FeatureVector, f64)>, MetaError> {
    batch.iter().map(|r| Ok((r.features.clone(), table.corrected(&r.key)?))).collect()
}

/// One gradient step of the reward model on corrected noisy rewards. The
/// input parameters are left untouched.
pub fn inner_update(
    params: &PrmParams,
    table: &RewardTable,
    batch: &[&NoisyRow],
    eta: f64,
    weight_decay: f64,
) -> Result<PrmParams, MetaError> {
    if batch.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    let grad = grad_mse(params, &targets(table, batch)?, weight_decay)?;
    Ok(PrmParams { weights: params.weights.iter().zip(&grad).map(|(w, g)| w - eta * g).collect() })
}

fn meta_pairs(meta: &[&MetaRow]) -> Vec<(FeatureVector, f64)> {
    meta.iter().map(|r| (r.features.clone(), r.reward)).collect()
}

/// Mean squared error of the stepped model on clean final rewards.
pub fn meta_loss(params_hat: &PrmParams, meta: &[&MetaRow]) -> Result<f64, MetaError> {
    if meta.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    Ok(mse_loss(params_hat, &meta_pairs(meta), 0.0)?)
}

/// Hypergradient over the residuals of one noisy batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    pub keys: Vec<RewardKey>,
    pub values: Vec<f64>,
    /// Whether `base + residual` was strictly inside (0, 1) for each key.
    pub interior: Vec<bool>,
    pub v_norm: f64,
    pub alpha: f64,
    /// Set when the meta-loss gradient vanished and the estimate is zero.
    pub degenerate: bool,
}

impl MetaGradient {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn interior_mask(table: &RewardTable, batch: &[&NoisyRow]) -> Result<Vec<bool>, MetaError> {
    batch
        .iter()
        .map(|r| {
            let raw = table.raw(&r.key)?;
            Ok(raw > 0.0 && raw < 1.0)
        })
        .collect()
}

/// Per-key `∂L_n/∂θ` at the given parameters, clamp-gated.
fn inner_grad_wrt_residuals(
    params: &PrmParams,
    table: &RewardTable,
    batch: &[&NoisyRow],
    interior: &[bool],
) -> Result<Vec<f64>, MetaError> {
    let n = batch.len() as f64;
    batch
        .iter()
        .zip(interior)
        .map(|(row, &open)| {
            if !open {
                return Ok(0.0);
            }
            let s = score(params, &row.features)?;
            Ok(-(2.0 / n) * (s - table.corrected(&row.key)?))
        })
        .collect()
}

/// Finite-difference hypergradient: perturbs the reward-model parameters
/// along the meta-loss gradient instead of forming the mixed Hessian.
pub fn meta_gradient_fd(
    params: &PrmParams,
    table: &RewardTable,
    noisy_batch: &[&NoisyRow],
    meta_batch: &[&MetaRow],
    config: &TrainConfig,
) -> Result<MetaGradient, MetaError> {
    if noisy_batch.is_empty() || meta_batch.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    let keys: Vec<RewardKey> = noisy_batch.iter().map(|r| r.key.clone()).collect();
    let interior = interior_mask(table, noisy_batch)?;
    let params_hat = inner_update(params, table, noisy_batch, config.eta, config.weight_decay)?;
    let v = grad_mse(&params_hat, &meta_pairs(meta_batch), 0.0)?;
    let v_norm = dot(&v, &v).sqrt();
    if v_norm == 0.0 || !v_norm.is_finite() {
        return Ok(MetaGradient {
            values: vec![0.0; keys.len()],
            keys,
            interior,
            v_norm,
            alpha: 0.0,
            degenerate: true,
        });
    }
    let alpha = config.fd_alpha_scale / v_norm;
    let shifted = |sign: f64| PrmParams {
        weights: params.weights.iter().zip(&v).map(|(w, vi)| w + sign * alpha * vi).collect(),
    };
    let plus = inner_grad_wrt_residuals(&shifted(1.0), table, noisy_batch, &interior)?;
    let minus = inner_grad_wrt_residuals(&shifted(-1.0), table, noisy_batch, &interior)?;
    let values = plus
        .iter()
        .zip(&minus)
        .zip(&interior)
        .map(|((p, m), &open)| if open { -config.eta * (p - m) / (2.0 * alpha) } else { 0.0 })
        .collect();
    Ok(MetaGradient { keys, values, interior, v_norm, alpha, degenerate: false })
}

/// Step used by [`meta_gradient_bruteforce`].
pub const BRUTEFORCE_EPS: f64 = 1e-5;

/// Central difference of the full residual → inner step → meta loss
/// pipeline, one residual at a time. Verification oracle only.
pub fn meta_gradient_bruteforce(
    params: &PrmParams,
    table: &RewardTable,
    noisy_batch: &[&NoisyRow],
    meta_batch: &[&MetaRow],
    config: &TrainConfig,
) -> Result<Vec<f64>, MetaError> {
    if noisy_batch.is_empty() || meta_batch.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    let mut probe = table.clone();
    let mut out = Vec::with_capacity(noisy_batch.len());
    for row in noisy_batch {
        let theta = table.residual(&row.key)?;
        let mut eval = |residual: f64| -> Result<f64, MetaError> {
            probe.set_residual(&row.key, residual)?;
            let hat = inner_update(params, &probe, noisy_batch, config.eta, config.weight_decay)?;
            meta_loss(&hat, meta_batch)
        };
        let up = eval(theta + BRUTEFORCE_EPS)?;
        let down = eval(theta - BRUTEFORCE_EPS)?;
        probe.set_residual(&row.key, theta)?;
        out.push((up - down) / (2.0 * BRUTEFORCE_EPS));
    }
    Ok(out)
}

/// Plain gradient step on the residuals; base rewards are untouched.
pub fn meta_update(table: &RewardTable, gradient: &[(RewardKey, f64)], eta_meta: f64) -> Result<RewardTable, MetaError> {
    let mut next = table.clone();
    for (key, g) in gradient {
        let i = next.slot(key)?;
        next.residual[i] -= eta_meta * g;
    }
    Ok(next)
}

/// Stateful residual optimizer. SGD delegates to [`meta_update`]; Adam keeps
/// dense moment estimates over every table slot.
#[derive(Debug, Clone)]
pub struct ResidualOptimizer {
    kind: MetaOptimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ResidualOptimizer {
    pub fn new(kind: MetaOptimizer, lr: f64, slots: usize) -> Self {
        Self { kind, lr, m: vec![0.0; slots], v: vec![0.0; slots], t: 0 }
    }

    pub fn step(&mut self, table: &mut RewardTable, grad: &MetaGradient) -> Result<(), MetaError> {
        match self.kind {
            MetaOptimizer::Sgd => {
                let pairs: Vec<(RewardKey, f64)> = grad.keys.iter().cloned().zip(grad.values.iter().copied()).collect();
                *table = meta_update(table, &pairs, self.lr)?;
            }
            MetaOptimizer::Adam { beta1, beta2, eps } => {
                let mut dense = vec![0.0; table.len()];
                for (k, g) in grad.keys.iter().zip(&grad.values) {
                    dense[table.slot(k)?] += g;
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (i, g) in dense.iter().enumerate() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let step = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                    table.residual[i] -= step;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceKey {
    pub key: RewardKey,
    /// `base + residual` when the meta-gradient was taken.
    pub raw: f64,
    pub meta_grad: f64,
    /// Corrected reward after the residual update.
    pub corrected_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// Inner loss on the noisy batch at the committed parameters.
    pub inner_loss: f64,
    /// Meta loss of the virtually stepped model, before the residual update.
    pub meta_loss: f64,
    pub meta_grad_norm: f64,
    pub v_norm: f64,
    pub degenerate: bool,
    pub corrected_min: f64,
    pub corrected_max: f64,
    pub batch: Vec<TraceKey>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PrmParams,
    pub table: RewardTable,
    pub trace: TrainTrace,
}

/// Seeded epoch-wise shuffler. Batches never straddle an epoch boundary, so
/// keys inside one batch are distinct.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl EpochSampler {
    pub fn new(len: usize, batch: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, cursor: 0, batch: batch.min(len).max(1) }
    }

    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch;
        &self.order[start..self.cursor]
    }
}

/// Alternating training: residual (meta) step first, then the committed
/// inner step of the reward model on the freshly corrected rewards.
pub fn train(
    noisy: &NoisyDataset,
    meta: &MetaDataset,
    init: PrmParams,
    config: &TrainConfig,
) -> Result<TrainOutcome, MetaError> {
    config.validate()?;
    if noisy.is_empty() {
        return Err(MetaError::EmptyDataset("noisy"));
    }
    if meta.is_empty() {
        return Err(MetaError::EmptyDataset("meta"));
    }
    let mut params = init;
    let mut table = RewardTable::from_dataset(noisy);
    let mut trace = TrainTrace::default();
    if config.iterations == 0 {
        return Ok(TrainOutcome { params, table, trace });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noisy_sampler = EpochSampler::new(noisy.len(), config.batch_size, &mut rng);
    let mut meta_sampler = EpochSampler::new(meta.len(), config.batch_size, &mut rng);
    let mut optimizer = ResidualOptimizer::new(config.meta_optimizer, config.eta_meta, table.len());

    for iter in 0..config.iterations {
        let noisy_batch: Vec<&NoisyRow> = noisy_sampler.next_batch(&mut rng).iter().map(|&i| &noisy.rows[i]).collect();
        let meta_batch: Vec<&MetaRow> = meta_sampler.next_batch(&mut rng).iter().map(|&i| &meta.rows[i]).collect();

        let params_hat = inner_update(&params, &table, &noisy_batch, config.eta, config.weight_decay)?;
        let m_loss = meta_loss(&params_hat, &meta_batch)?;
        let raws: Vec<f64> = noisy_batch.iter().map(|r| table.raw(&r.key)).collect::<Result<_, _>>()?;

        let grad = meta_gradient_fd(&params, &table, &noisy_batch, &meta_batch, config)?;
        optimizer.step(&mut table, &grad)?;

        let pairs = targets(&table, &noisy_batch)?;
        let inner_loss = mse_loss(&params, &pairs, config.weight_decay)?;
        params = inner_update(&params, &table, &noisy_batch, config.eta, config.weight_decay)?;
        if !params.is_finite() {
            return Err(MetaError::Model(ModelError::NonFinite("reward model parameters")));
        }

        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for c in table.corrected_values() {
            lo = lo.min(c);
            hi = hi.max(c);
        }
        let batch = noisy_batch
            .iter()
            .zip(&raws)
            .zip(&grad.values)
            .zip(&pairs)
            .map(|(((row, &raw), &g), (_, after))| TraceKey { key: row.key.clone(), raw, meta_grad: g, corrected_after: *after })
            .collect();
        trace.records.push(TraceRecord {
            iter,
            inner_loss,
            meta_loss: m_loss,
            meta_grad_norm: grad.norm(),
            v_norm: grad.v_norm,
            degenerate: grad.degenerate,
            corrected_min: lo,
            corrected_max: hi,
            batch,
        });
    }
    Ok(TrainOutcome { params, table, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: usize) -> RewardKey {
        RewardKey::new("p", "t", i)
    }

    fn table_with(base: f64, residual: f64) -> RewardTable {
        RewardTable::from_entries([(key(1), base, residual)]).unwrap()
    }

    #[test]
    fn corrected_clamps() {
        assert_eq!(corrected(&table_with(0.5, 0.0), &key(1)).unwrap(), 0.5);
        assert_eq!(corrected(&table_with(0.9, 0.3), &key(1)).unwrap(), 1.0);
        assert_eq!(corrected(&table_with(0.1, -0.4), &key(1)).unwrap(), 0.0);
        assert!(matches!(corrected(&table_with(0.1, 0.0), &key(2)), Err(MetaError::UnknownKey(_))));
    }

    #[test]
    fn inner_update_hand_value() {
        let row = NoisyRow { key: key(1), features: FeatureVector::new(vec![1.0]), base: 1.0 };
        let table = RewardTable::from_dataset(&NoisyDataset::new(vec![row.clone()]).unwrap());
        let params = PrmParams::zeros(1);
        let hat = inner_update(&params, &table, &[&row], 0.1, 0.0).unwrap();
        assert!((hat.weights[0] - 0.025).abs() < 1e-15);
        assert_eq!(params.weights[0], 0.0);
        assert_eq!(inner_update(&params, &table, &[&row], 0.0, 0.0).unwrap(), params);
    }

    #[test]
    fn meta_loss_values() {
        let row = MetaRow { features: FeatureVector::new(vec![0.0]), reward: 1.0 };
        let params = PrmParams::zeros(1);
        assert_eq!(meta_loss(&params, &[&row]).unwrap(), 0.25);
        assert_eq!(meta_loss(&params, &[&row, &row]).unwrap(), 0.25);
        let exact = MetaRow { features: FeatureVector::new(vec![0.0]), reward: 0.5 };
        assert_eq!(meta_loss(&params, &[&exact]).unwrap(), 0.0);
    }

    #[test]
    fn meta_update_sgd_step() {
        let t = table_with(0.5, 0.0);
        let next = meta_update(&t, &[(key(1), 1.0)], 1e-3).unwrap();
        assert!((next.residual(&key(1)).unwrap() + 1e-3).abs() < 1e-18);
        assert_eq!(next.base(&key(1)).unwrap(), 0.5);
        assert_eq!(meta_update(&t, &[(key(1), 0.0)], 1e-3).unwrap(), t);
        assert!(matches!(meta_update(&t, &[(key(9), 1.0)], 1e-3), Err(MetaError::UnknownKey(_))));
        let pushed = meta_update(&table_with(0.99, 0.0), &[(key(1), -100.0)], 1e-3).unwrap();
        assert_eq!(pushed.corrected(&key(1)).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_when_meta_gradient_vanishes() {
        // Zero features on the meta row make v identically zero.
        let row = NoisyRow { key: key(1), features: FeatureVector::new(vec![1.0, 0.5]), base: 0.3 };
        let table = RewardTable::from_dataset(&NoisyDataset::new(vec![row.clone()]).unwrap());
        let m = MetaRow { features: FeatureVector::new(vec![0.0, 0.0]), reward: 1.0 };
        let cfg = TrainConfig { eta: 0.1, weight_decay: 0.0, ..Default::default() };
        let g = meta_gradient_fd(&PrmParams::zeros(2), &table, &[&row], &[&m], &cfg).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.values, vec![0.0]);
    }

    #[test]
    fn clamped_key_gets_zero() {
        let rows = vec![
            NoisyRow { key: key(1), features: FeatureVector::new(vec![1.0, 0.5]), base: 0.9 },
            NoisyRow { key: key(2), features: FeatureVector::new(vec![1.0, -0.5]), base: 0.4 },
        ];
        let noisy = NoisyDataset::new(rows).unwrap();
        let mut table = RewardTable::from_dataset(&noisy);
        table.set_residual(&key(1), 0.3).unwrap();
        let m = MetaRow { features: FeatureVector::new(vec![1.0, 1.0]), reward: 1.0 };
        let cfg = TrainConfig { eta: 0.5, ..Default::default() };
        let batch: Vec<&NoisyRow> = noisy.rows.iter().collect();
        let g = meta_gradient_fd(&PrmParams::zeros(2), &table, &batch, &[&m], &cfg).unwrap();
        assert_eq!(g.values[0], 0.0);
        assert!(!g.interior[0]);
        assert!(g.values[1] != 0.0);
    }

    #[test]
    fn zero_iterations_returns_inputs() {
        let noisy = NoisyDataset::new(vec![NoisyRow { key: key(1), features: FeatureVector::new(vec![1.0, 0.2]), base: 0.4 }]).unwrap();
        let meta = MetaDataset::new(vec![MetaRow { features: FeatureVector::new(vec![1.0, 0.1]), reward: 1.0 }]).unwrap();
        let init = PrmParams { weights: vec![0.1, 0.2] };
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        let out = train(&noisy, &meta, init.clone(), &cfg).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.table, RewardTable::from_dataset(&noisy));
        assert!(out.trace.records.is_empty());
    }

    #[test]
    fn rejects_bad_inputs() {
        let dup = vec![
            NoisyRow { key: key(1), features: FeatureVector::new(vec![1.0]), base: 0.4 },
            NoisyRow { key: key(1), features: FeatureVector::new(vec![1.0]), base: 0.5 },
        ];
        assert!(matches!(NoisyDataset::new(dup), Err(MetaError::DuplicateKey(_))));
        assert!(MetaDataset::new(vec![MetaRow { features: FeatureVector::new(vec![1.0]), reward: 1.5 }]).is_err());
        let cfg = TrainConfig { eta: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let empty = NoisyDataset::default();
        let meta = MetaDataset::new(vec![MetaRow { features: FeatureVector::new(vec![1.0]), reward: 1.0 }]).unwrap();
        assert!(matches!(train(&empty, &meta, PrmParams::zeros(1), &TrainConfig::default()), Err(MetaError::EmptyDataset("noisy"))));
    }

    #[test]
    fn sampler_batches_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = EpochSampler::new(10, 4, &mut rng);
        for _ in 0..20 {
            let b = s.next_batch(&mut rng).to_vec();
            let mut d = b.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), b.len());
        }
    }
}
