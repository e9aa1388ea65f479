//! Desk-scale process reward model: hashed bag-of-tokens features, a
//! sigmoid-linear scorer with closed-form MSE gradients, the generative
//! token-probability score, and mean-over-steps trajectory aggregation.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::step_parser::{prefix, ParseError, StepSequence};

pub const DEFAULT_DIMENSION: usize = 4096;
const PARAMS_MAGIC: &[u8; 4] = b"FPRM";
const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate token pair: both probabilities are zero")]
    DegeneratePair,
    #[error("invalid token probabilities ({p_plus}, {p_minus})")]
    InvalidPair { p_plus: f64, p_minus: f64 },
    #[error("feature dimension must be at least 2, got {0}")]
    InvalidDimension(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("bad params file: {0}")]
    BadParamsFile(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("scorer backend failed: {0}")]
    Backend(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrmParams {
    /// Component 0 is the bias.
    pub weights: Vec<f64>,
}

impl PrmParams {
    pub fn zeros(dim: usize) -> Self {
        Self { weights: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Writes the 16-byte header followed by little-endian f64 weights.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), ModelError> {
        let dim = u32::try_from(self.dim()).map_err(|_| ModelError::InvalidDimension(self.dim()))?;
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&PARAMS_VERSION.to_le_bytes())?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ModelError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|e| ModelError::BadParamsFile(format!("short header: {e}")))?;
        if &header[0..4] != PARAMS_MAGIC {
            return Err(ModelError::BadParamsFile("bad magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
        if version != PARAMS_VERSION {
            return Err(ModelError::BadParamsFile(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != dim * 8 {
            return Err(ModelError::BadParamsFile(format!("expected {} weight bytes, found {}", dim * 8, body.len())));
        }
        let weights: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let params = Self { weights };
        if !params.is_finite() {
            return Err(ModelError::NonFinite("params file"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::with_capacity(16 + self.dim() * 8);
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

/// Featurizer settings, persisted as the JSON sidecar next to a params file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub dim: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self { dim: DEFAULT_DIMENSION }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamsSidecar {
    pub schema_version: u32,
    pub featurizer: FeaturizerConfig,
    pub hash: String,
    pub tokenizer: String,
}

impl ParamsSidecar {
    pub fn new(featurizer: FeaturizerConfig) -> Self {
        Self {
            schema_version: crate::SCHEMA_VERSION,
            featurizer,
            hash: "fnv1a64".into(),
            tokenizer: "alnum-underscore-runs".into(),
        }
    }
}

/// Splits on whitespace and punctuation; a token is a maximal run of
/// alphanumeric characters or underscores.
pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_')).filter(|t| !t.is_empty())
}

/// Hashed bag of tokens over the problem statement and the code, scaled by
/// 1/sqrt(total tokens). Statement and code tokens hash into separate
/// namespaces. Component 0 is a constant 1 bias.
pub fn featurize(cfg: &FeaturizerConfig, problem_statement: &str, partial_text: &str) -> Result<FeatureVector, ModelError> {
    if cfg.dim < 2 {
        return Err(ModelError::InvalidDimension(cfg.dim));
    }
    let buckets = (cfg.dim - 1) as u64;
    let mut values = vec![0.0; cfg.dim];
    let mut total = 0usize;
    let mut key = Vec::with_capacity(64);
    for (ns, text) in [(b'p', problem_statement), (b'c', partial_text)] {
        for tok in tokenize(text) {
            key.clear();
            key.push(ns);
            key.push(b':');
            key.extend_from_slice(tok.as_bytes());
            let idx = (fnv1a64(&key) % buckets) as usize + 1;
            values[idx] += 1.0;
            total += 1;
        }
    }
    if total > 0 {
        let scale = 1.0 / (total as f64).sqrt();
        for v in &mut values[1..] {
            *v *= scale;
        }
    }
    values[0] = 1.0;
    Ok(FeatureVector { values })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_dim(params: &PrmParams, features: &FeatureVector) -> Result<(), ModelError> {
    if params.dim() != features.dim() {
        return Err(ModelError::DimensionMismatch { expected: params.dim(), got: features.dim() });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn score(params: &PrmParams, features: &FeatureVector) -> Result<f64, ModelError> {
    check_dim(params, features)?;
    Ok(sigmoid(dot(&params.weights, &features.values)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenProbPair {
    pub p_plus: f64,
    pub p_minus: f64,
}

/// `p+ / (p+ + p-)`.
pub fn generative_score(pair: TokenProbPair) -> Result<f64, ModelError> {
    let TokenProbPair { p_plus, p_minus } = pair;
    if !(p_plus.is_finite() && p_minus.is_finite()) || p_plus < 0.0 || p_minus < 0.0 {
        return Err(ModelError::InvalidPair { p_plus, p_minus });
    }
    let total = p_plus + p_minus;
    if total <= 0.0 {
        return Err(ModelError::DegeneratePair);
    }
    Ok(p_plus / total)
}

/// Scores one (problem statement, solution prefix) pair.
pub trait StepScorer {
    fn score_text(&self, problem_statement: &str, text: &str) -> Result<f64, ModelError>;
}

impl<F> StepScorer for F
where
    F: Fn(&str, &str) -> Result<f64, ModelError>,
{
    fn score_text(&self, problem_statement: &str, text: &str) -> Result<f64, ModelError> {
        self(problem_statement, text)
    }
}

/// The trainable sigmoid-linear scorer.
#[derive(Debug, Clone)]
pub struct LinearScorer {
    pub params: PrmParams,
    pub featurizer: FeaturizerConfig,
}

impl LinearScorer {
    pub fn new(params: PrmParams, featurizer: FeaturizerConfig) -> Result<Self, ModelError> {
        if params.dim() != featurizer.dim {
            return Err(ModelError::DimensionMismatch { expected: featurizer.dim, got: params.dim() });
        }
        Ok(Self { params, featurizer })
    }
}

impl StepScorer for LinearScorer {
    fn score_text(&self, problem_statement: &str, text: &str) -> Result<f64, ModelError> {
        score(&self.params, &featurize(&self.featurizer, problem_statement, text)?)
    }
}

/// Mean of the step scores over prefixes 1..=T.
pub fn score_trajectory(scorer: &dyn StepScorer, seq: &StepSequence, problem_statement: &str) -> Result<f64, ModelError> {
    let t_max = seq.len();
    if t_max == 0 {
        return Err(ModelError::Parse(ParseError::IndexOutOfRange { index: 1, len: 0 }));
    }
    let scores = (1..=t_max)
        .map(|t| scorer.score_text(problem_statement, &prefix(seq, t)?.text))
        .collect::<Result<Vec<f64>, ModelError>>()?;
    Ok(mean(&scores))
}

/// Sums in sorted order so the result does not depend on input order.
pub fn mean(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / xs.len() as f64
}

/// Batch loss `(1/B) Σ (σ(w·x) - g)² + (λ/2) Σ_{j≥1} w_j²`.
pub fn mse_loss(params: &PrmParams, batch: &[(FeatureVector, f64)], weight_decay: f64) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut sum = 0.0;
    for (x, g) in batch {
        let s = score(params, x)?;
        sum += (s - g) * (s - g);
    }
    let decay: f64 = params.weights.iter().skip(1).map(|w| w * w).sum();
    Ok(sum / batch.len() as f64 + 0.5 * weight_decay * decay)
}

/// Exact gradient of [`mse_loss`] with respect to the weights.
pub fn grad_mse(params: &PrmParams, batch: &[(FeatureVector, f64)], weight_decay: f64) -> Result<Vec<f64>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.dim()];
    for (x, g) in batch {
        let s = score(params, x)?;
        let coef = 2.0 * (s - g) * s * (1.0 - s) / n;
        for (gj, xj) in grad.iter_mut().zip(&x.values) {
            *gj += coef * xj;
        }
    }
    for (gj, wj) in grad.iter_mut().zip(&params.weights).skip(1) {
        *gj += weight_decay * wj;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logistic_values() {
        let zero = PrmParams::zeros(3);
        let x = FeatureVector::new(vec![1.0, 2.0, -4.0]);
        assert_eq!(score(&zero, &x).unwrap(), 0.5);

        let p = PrmParams { weights: vec![3f64.ln()] };
        let s = score(&p, &FeatureVector::new(vec![1.0])).unwrap();
        assert!((s - 0.75).abs() < 1e-15);

        let w = PrmParams { weights: vec![0.3, -1.2, 0.7] };
        let neg = PrmParams { weights: w.weights.iter().map(|v| -v).collect() };
        let a = score(&w, &x).unwrap();
        let b = score(&neg, &x).unwrap();
        assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let err = score(&PrmParams::zeros(3), &FeatureVector::new(vec![1.0, 2.0])).unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { expected: 3, got: 2 }));
    }

    #[test]
    fn generative_score_cases() {
        let r = generative_score(TokenProbPair { p_plus: 0.6, p_minus: 0.2 }).unwrap();
        assert!((r - 0.75).abs() < 1e-15);
        assert_eq!(generative_score(TokenProbPair { p_plus: 0.3, p_minus: 0.3 }).unwrap(), 0.5);
        assert_eq!(generative_score(TokenProbPair { p_plus: 0.9, p_minus: 0.0 }).unwrap(), 1.0);
        assert!(matches!(
            generative_score(TokenProbPair { p_plus: 0.0, p_minus: 0.0 }),
            Err(ModelError::DegeneratePair)
        ));
        assert!(generative_score(TokenProbPair { p_plus: -0.1, p_minus: 0.5 }).is_err());
    }

    #[test]
    fn featurize_whitespace_and_mass() {
        let cfg = FeaturizerConfig { dim: 64 };
        assert_eq!(featurize(&cfg, "p", "x").unwrap(), featurize(&cfg, "p", "x ").unwrap());
        // 4 statement tokens + 5 code tokens.
        let f = featurize(&cfg, "Sum two ints please", "def f(a, b): return").unwrap();
        assert_eq!(f.values[0], 1.0);
        let mass: f64 = f.values[1..].iter().sum();
        assert!((mass - 3.0).abs() < 1e-12, "{mass}");
        assert!(matches!(featurize(&FeaturizerConfig { dim: 1 }, "a", "b"), Err(ModelError::InvalidDimension(1))));
    }

    #[test]
    fn hand_gradient_d1() {
        let params = PrmParams::zeros(1);
        let batch = vec![(FeatureVector::new(vec![1.0]), 1.0)];
        assert!((mse_loss(&params, &batch, 0.0).unwrap() - 0.25).abs() < 1e-15);
        let g = grad_mse(&params, &batch, 0.0).unwrap();
        assert!((g[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_at_targets() {
        let params = PrmParams { weights: vec![0.2, -0.5, 1.0] };
        let batch: Vec<_> = [vec![1.0, 0.3, 0.1], vec![1.0, -1.0, 2.0]]
            .into_iter()
            .map(|v| {
                let x = FeatureVector::new(v);
                let s = score(&params, &x).unwrap();
                (x, s)
            })
            .collect();
        assert!(grad_mse(&params, &batch, 0.0).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn params_file_round_trip_and_header() {
        let p = PrmParams { weights: vec![1.5, -2.0, 0.25] };
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FPRM");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 16 + 24);
        assert_eq!(PrmParams::read_from(buf.as_slice()).unwrap(), p);
        buf[0] = b'X';
        assert!(PrmParams::read_from(buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn generative_antisymmetry(a in 0.0f64..10.0, b in 0.0f64..10.0) {
            prop_assume!(a + b > 0.0);
            let ab = generative_score(TokenProbPair { p_plus: a, p_minus: b }).unwrap();
            let ba = generative_score(TokenProbPair { p_plus: b, p_minus: a }).unwrap();
            prop_assert!((ab + ba - 1.0).abs() < 1e-12);
        }

        #[test]
        fn doubling_batch_leaves_gradient(ws in prop::collection::vec(-2.0f64..2.0, 4),
                                         xs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..8),
                                         gs in prop::collection::vec(0.0f64..1.0, 8)) {
            let params = PrmParams { weights: ws };
            let batch: Vec<_> = xs.into_iter().zip(gs).map(|(x, g)| (FeatureVector::new(x), g)).collect();
            let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
            let a = grad_mse(&params, &batch, 1e-3).unwrap();
            let b = grad_mse(&params, &doubled, 1e-3).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
