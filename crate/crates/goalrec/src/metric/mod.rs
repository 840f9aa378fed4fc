//! Siamese recurrent metric model: a shared-weight LSTM embeds observation
//! sequences, an exponential transform of the Manhattan distance between two
//! embeddings scores their similarity, and binary cross entropy on same-goal
//! labels drives training.

mod lstm;

pub use lstm::{backward, grad_check, forward as lstm_raw_forward, LstmParams, Mat, PairGradients};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{encode_sparse, EncodeMode, EncodedSequence, PairSample, SparseSeq};
use crate::env::GridEnv;
use crate::error::{Error, Result};
use crate::rl::Trace;
use crate::util::rng_from_seed;

pub(crate) const BCE_EPSILON: f64 = 1e-12;

/// A point in the learned sequence-embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Embeds an encoded sequence: the LSTM's final hidden state.
pub fn lstm_forward(params: &LstmParams, seq: &EncodedSequence) -> Result<Embedding> {
    let values = lstm::forward(params, &SparseSeq::from_dense(seq))?;
    Ok(Embedding { values })
}

/// exp(-L1 distance): 1 for identical embeddings, toward 0 as they diverge.
pub fn similarity(v1: &Embedding, v2: &Embedding) -> Result<f64> {
    if v1.dim() != v2.dim() {
        return Err(Error::Dimension(format!(
            "embedding dims {} vs {}",
            v1.dim(),
            v2.dim()
        )));
    }
    let dist: f64 = v1
        .values
        .iter()
        .zip(&v2.values)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok((-dist).exp())
}

/// Binary cross entropy with the prediction clamped away from 0 and 1.
pub fn bce_loss(y_hat: f64, y: f64) -> f64 {
    let p = y_hat.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Training hyperparameters for the metric model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub hidden_dim: usize,
    pub encoding: EncodeMode,
    /// Fraction of the dataset held out for pair-accuracy reporting.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            grad_clip: 5.0,
            seed: 0,
            hidden_dim: 32,
            encoding: EncodeMode::OneHot,
            holdout_fraction: 0.1,
        }
    }
}

/// A trained (or freshly initialized) Siamese metric model. One parameter
/// set serves both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricModel {
    pub params: LstmParams,
    pub encoding: EncodeMode,
    pub env_id: String,
}

impl MetricModel {
    pub fn new(env: &GridEnv, cfg: &TrainConfig) -> Self {
        let input_dim = cfg.encoding.dim(env);
        let mut rng = rng_from_seed(cfg.seed);
        Self {
            params: LstmParams::init(input_dim, cfg.hidden_dim, &mut rng),
            encoding: cfg.encoding,
            env_id: env.id.clone(),
        }
    }

    /// Encodes and embeds a trace in one call.
    pub fn embed(&self, trace: &Trace, env: &GridEnv) -> Result<Embedding> {
        let seq = encode_sparse(trace, env, self.encoding)?;
        let values = lstm::forward(&self.params, &seq)?;
        Ok(Embedding { values })
    }
}

/// Result of a training run: the model plus its loss curve and held-out
/// pair-classification accuracy (threshold 0.5), when a holdout exists.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MetricModel,
    pub loss_history: Vec<f64>,
    pub holdout_accuracy: Option<f64>,
}

struct Adam {
    m: LstmParams,
    v: LstmParams,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(shape: &LstmParams) -> Self {
        Self {
            m: LstmParams::zeros(shape.input_dim, shape.hidden_dim),
            v: LstmParams::zeros(shape.input_dim, shape.hidden_dim),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut LstmParams, grads: &LstmParams, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for t in 0..LstmParams::TENSORS {
            let g = grads.tensor(t);
            let m = self.m.tensor_mut(t);
            for (mv, gv) in m.iter_mut().zip(g) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            }
            let v = self.v.tensor_mut(t);
            for (vv, gv) in v.iter_mut().zip(g) {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            let m = self.m.tensor(t);
            let v = self.v.tensor(t);
            let p = params.tensor_mut(t);
            for j in 0..p.len() {
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

fn encode_pairs(
    dataset: &[PairSample],
    env: &GridEnv,
    mode: EncodeMode,
) -> Result<Vec<(SparseSeq, SparseSeq, f64)>> {
    dataset
        .iter()
        .map(|p| {
            Ok((
                encode_sparse(&p.trace_a, env, mode)?,
                encode_sparse(&p.trace_b, env, mode)?,
                p.y(),
            ))
        })
        .collect()
}

fn pair_accuracy(params: &LstmParams, pairs: &[(SparseSeq, SparseSeq, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("no pairs to score".into()));
    }
    let mut correct = 0;
    for (a, b, y) in pairs {
        let va = lstm::forward(params, a)?;
        let vb = lstm::forward(params, b)?;
        let dist: f64 = va.iter().zip(&vb).map(|(x, z)| (x - z).abs()).sum();
        let y_hat = (-dist).exp();
        if (y_hat >= 0.5) == (*y >= 0.5) {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Trains the Siamese model with minibatch Adam and gradient-norm clipping.
/// A seeded shuffle splits off the holdout before any updates; the same seed
/// always yields the same final parameters.
pub fn train(dataset: &[PairSample], cfg: &TrainConfig, env: &GridEnv) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    if cfg.learning_rate <= 0.0 {
        return Err(Error::Contract(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let mut model = MetricModel::new(env, cfg);
    let mut rng = rng_from_seed(cfg.seed);
    // burn one draw so the split is independent of the init stream
    let _: f64 = rng.gen();

    let encoded = encode_pairs(dataset, env, cfg.encoding)?;
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut rng);
    let holdout_len = ((cfg.holdout_fraction * encoded.len() as f64).round() as usize)
        .min(encoded.len().saturating_sub(1));
    let (train_idx, holdout_idx) = order.split_at(encoded.len() - holdout_len);
    let mut train_idx = train_idx.to_vec();

    let mut grads = LstmParams::zeros(model.params.input_dim, cfg.hidden_dim);
    let mut adam = Adam::new(&model.params);
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in train_idx.chunks(cfg.batch_size).enumerate() {
            grads.zero();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (a, b, y) = &encoded[i];
                let (loss, _) =
                    lstm::accumulate_pair_gradients(&model.params, a, b, *y, &mut grads)?;
                batch_loss += loss;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged at epoch {epoch}, batch {batch_no}"
                )));
            }
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.global_norm();
            if norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
            adam.step(&mut model.params, &grads, cfg.learning_rate);
            epoch_loss += batch_loss;
        }
        if !model.params.is_finite() {
            return Err(Error::Training(format!(
                "parameters diverged after epoch {epoch}"
            )));
        }
        loss_history.push(epoch_loss / train_idx.len() as f64);
    }

    let holdout_accuracy = if holdout_idx.is_empty() {
        None
    } else {
        let holdout: Vec<_> = holdout_idx.iter().map(|&i| encoded[i].clone()).collect();
        Some(pair_accuracy(&model.params, &holdout)?)
    };
    Ok(TrainOutcome {
        model,
        loss_history,
        holdout_accuracy,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints: text header plus row-major weight arrays, exact round-trip.
// ---------------------------------------------------------------------------

impl MetricModel {
    pub fn to_checkpoint(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        out.push_str("metric-model v1\n");
        out.push_str(&format!("env {}\n", self.env_id));
        let mode = match self.encoding {
            EncodeMode::OneHot => "onehot",
            EncodeMode::Coordinates => "coordinates",
        };
        out.push_str(&format!("encoding {mode}\n"));
        out.push_str(&format!("input_dim {}\n", p.input_dim));
        out.push_str(&format!("hidden_dim {}\n", p.hidden_dim));
        for t in 0..LstmParams::TENSORS {
            out.push_str(&LstmParams::tensor_name(t));
            match t {
                0..=3 => write_row_major(&mut out, &p.w[t]),
                4..=7 => write_row_major(&mut out, &p.u[t - 4]),
                _ => {
                    for v in &p.b[t - 8] {
                        out.push(' ');
                        out.push_str(&format!("{v}"));
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or_default();
        if magic != "metric-model v1" {
            return Err(Error::Checkpoint(format!("unexpected header {magic:?}")));
        }
        let env_id = strip(lines.next(), "env")?;
        let encoding = match strip(lines.next(), "encoding")?.as_str() {
            "onehot" => EncodeMode::OneHot,
            "coordinates" => EncodeMode::Coordinates,
            other => return Err(Error::Checkpoint(format!("unknown encoding {other:?}"))),
        };
        let input_dim: usize = strip(lines.next(), "input_dim")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad input_dim: {e}")))?;
        let hidden_dim: usize = strip(lines.next(), "hidden_dim")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad hidden_dim: {e}")))?;
        let mut params = LstmParams::zeros(input_dim, hidden_dim);
        for t in 0..LstmParams::TENSORS {
            let name = LstmParams::tensor_name(t);
            let body = strip(lines.next(), &name)?;
            let nums: Vec<f64> = body
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|e| Error::Checkpoint(format!("bad float {tok:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            match t {
                0..=3 => read_row_major(&nums, &mut params.w[t])?,
                4..=7 => read_row_major(&nums, &mut params.u[t - 4])?,
                _ => {
                    if nums.len() != hidden_dim {
                        return Err(Error::Checkpoint(format!(
                            "{name}: expected {hidden_dim} values, found {}",
                            nums.len()
                        )));
                    }
                    params.b[t - 8].copy_from_slice(&nums);
                }
            }
        }
        Ok(Self {
            params,
            encoding,
            env_id,
        })
    }
}

fn write_row_major(out: &mut String, m: &Mat) {
    for r in 0..m.rows {
        for c in 0..m.cols {
            out.push(' ');
            out.push_str(&format!("{}", m.data[c * m.rows + r]));
        }
    }
}

fn read_row_major(nums: &[f64], m: &mut Mat) -> Result<()> {
    if nums.len() != m.rows * m.cols {
        return Err(Error::Checkpoint(format!(
            "expected {} values, found {}",
            m.rows * m.cols,
            nums.len()
        )));
    }
    for r in 0..m.rows {
        for c in 0..m.cols {
            m.data[c * m.rows + r] = nums[r * m.cols + c];
        }
    }
    Ok(())
}

fn strip(line: Option<&str>, key: &str) -> Result<String> {
    line.and_then(|l| l.strip_prefix(key))
        .map(|v| v.trim().to_string())
        .ok_or_else(|| Error::Checkpoint(format!("missing {key:?} line")))
}
