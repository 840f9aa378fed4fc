//! Self-supervised pair-sample generation: observability masking, labeled
//! trace pairing and observation encoding.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, GridEnv, State};
use crate::error::{Error, Result};
use crate::rl::{MaskKind, Trace};

/// Observability ratios used for both training masks and the evaluation grid.
pub const MASK_RATIOS: [f64; 4] = [0.3, 0.5, 0.7, 1.0];

/// A labeled trace pair: `label` is true iff both traces lead to one goal.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub trace_a: Trace,
    pub trace_b: Trace,
    pub label: bool,
}

impl PairSample {
    pub fn y(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }
}

/// How observations are turned into feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeMode {
    /// Concatenated state one-hot (width*height) and action one-hot (4).
    OneHot,
    /// Normalized (x, y) plus action one-hot; dimension 6.
    Coordinates,
}

impl EncodeMode {
    pub fn dim(&self, env: &GridEnv) -> usize {
        match self {
            EncodeMode::OneHot => env.state_count() + Action::COUNT,
            EncodeMode::Coordinates => 2 + Action::COUNT,
        }
    }
}

/// A trace rendered as per-step feature vectors, all of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub steps: Vec<Vec<f64>>,
    pub dim: usize,
    pub source: Trace,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Keeps the first `ceil(ratio * len)` observations.
pub fn mask_consecutive(trace: &Trace, ratio: f64) -> Result<Trace> {
    check_mask_args(trace, ratio)?;
    let keep = mask_len(trace.len(), ratio);
    Ok(Trace {
        observations: trace.observations[..keep].to_vec(),
        goal: trace.goal,
        mask_kind: kind_for(ratio, MaskKind::Consecutive),
        observed_ratio: ratio,
    })
}

/// Keeps a uniformly random subset of `ceil(ratio * len)` observations,
/// preserving their original order.
pub fn mask_nonconsecutive(trace: &Trace, ratio: f64, rng: &mut impl Rng) -> Result<Trace> {
    check_mask_args(trace, ratio)?;
    let keep = mask_len(trace.len(), ratio);
    let mut idx = rand::seq::index::sample(rng, trace.len(), keep).into_vec();
    idx.sort_unstable();
    Ok(Trace {
        observations: idx.iter().map(|&i| trace.observations[i]).collect(),
        goal: trace.goal,
        mask_kind: kind_for(ratio, MaskKind::NonConsecutive),
        observed_ratio: ratio,
    })
}

fn check_mask_args(trace: &Trace, ratio: f64) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::Contract("cannot mask an empty trace".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Contract(format!("ratio {ratio} outside (0, 1]")));
    }
    Ok(())
}

fn mask_len(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64).ceil() as usize).clamp(1, len)
}

fn kind_for(ratio: f64, requested: MaskKind) -> MaskKind {
    if ratio >= 1.0 {
        MaskKind::Full
    } else {
        requested
    }
}

/// Builds `n_pairs` labeled samples by pairing traces across goals. The
/// positive fraction matches `balance` to within one sample; each member is
/// masked independently with a ratio from [`MASK_RATIOS`] and a random kind.
pub fn generate_pairs(
    traces_by_goal: &[(State, Vec<Trace>)],
    n_pairs: usize,
    balance: f64,
    rng: &mut impl Rng,
) -> Result<Vec<PairSample>> {
    if traces_by_goal.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 goals with traces, got {}",
            traces_by_goal.len()
        )));
    }
    if let Some((g, _)) = traces_by_goal.iter().find(|(_, ts)| ts.is_empty()) {
        return Err(Error::Contract(format!("goal {g} has no traces")));
    }
    if !(balance > 0.0 && balance < 1.0) {
        return Err(Error::Contract(format!("balance {balance} outside (0, 1)")));
    }
    let n_pos = ((balance * n_pairs as f64).round() as usize).min(n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let positive = i < n_pos;
        let (gi, gj) = if positive {
            let g = rng.gen_range(0..traces_by_goal.len());
            (g, g)
        } else {
            let a = rng.gen_range(0..traces_by_goal.len());
            let mut b = rng.gen_range(0..traces_by_goal.len() - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        };
        let ta = pick_masked(&traces_by_goal[gi].1, rng)?;
        let tb = pick_masked(&traces_by_goal[gj].1, rng)?;
        pairs.push(PairSample {
            trace_a: ta,
            trace_b: tb,
            label: positive,
        });
    }
    pairs.shuffle(rng);
    Ok(pairs)
}

fn pick_masked(traces: &[Trace], rng: &mut impl Rng) -> Result<Trace> {
    let trace = &traces[rng.gen_range(0..traces.len())];
    let ratio = MASK_RATIOS[rng.gen_range(0..MASK_RATIOS.len())];
    if rng.gen_bool(0.5) {
        mask_consecutive(trace, ratio)
    } else {
        mask_nonconsecutive(trace, ratio, rng)
    }
}

/// Encodes a trace for the metric model. One-hot steps carry exactly two
/// nonzero entries: the state cell and the action.
pub fn encode_trace(trace: &Trace, env: &GridEnv, mode: EncodeMode) -> Result<EncodedSequence> {
    let dim = mode.dim(env);
    let mut steps = Vec::with_capacity(trace.len());
    for &(s, a) in &trace.observations {
        if !env.is_valid_state(s) {
            return Err(Error::Encoding(format!(
                "observation state {s} invalid in {}",
                env.id
            )));
        }
        let mut v = vec![0.0; dim];
        match mode {
            EncodeMode::OneHot => {
                v[env.index(s)] = 1.0;
                v[env.state_count() + a.index()] = 1.0;
            }
            EncodeMode::Coordinates => {
                v[0] = s.x as f64 / env.width as f64;
                v[1] = s.y as f64 / env.height as f64;
                v[2 + a.index()] = 1.0;
            }
        }
        steps.push(v);
    }
    Ok(EncodedSequence {
        steps,
        dim,
        source: trace.clone(),
    })
}

/// Sparse view of an encoded step: (feature index, value) entries. One-hot
/// steps have two entries, coordinate steps up to three; the LSTM hot loops
/// skip the zeros either way.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSeq {
    pub dim: usize,
    pub steps: Vec<Vec<(u32, f64)>>,
}

impl SparseSeq {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn from_dense(seq: &EncodedSequence) -> Self {
        Self {
            dim: seq.dim,
            steps: seq
                .steps
                .iter()
                .map(|v| {
                    v.iter()
                        .enumerate()
                        .filter(|(_, x)| **x != 0.0)
                        .map(|(i, x)| (i as u32, *x))
                        .collect()
                })
                .collect(),
        }
    }
}

/// Direct trace-to-sparse encoding, bypassing the dense vectors. Feature
/// layout is identical to [`encode_trace`].
pub fn encode_sparse(trace: &Trace, env: &GridEnv, mode: EncodeMode) -> Result<SparseSeq> {
    let dim = mode.dim(env);
    let mut steps = Vec::with_capacity(trace.len());
    for &(s, a) in &trace.observations {
        if !env.is_valid_state(s) {
            return Err(Error::Encoding(format!(
                "observation state {s} invalid in {}",
                env.id
            )));
        }
        let entries = match mode {
            EncodeMode::OneHot => vec![
                (env.index(s) as u32, 1.0),
                ((env.state_count() + a.index()) as u32, 1.0),
            ],
            EncodeMode::Coordinates => {
                let mut e = Vec::with_capacity(3);
                if s.x > 0 {
                    e.push((0, s.x as f64 / env.width as f64));
                }
                if s.y > 0 {
                    e.push((1, s.y as f64 / env.height as f64));
                }
                e.push(((2 + a.index()) as u32, 1.0));
                e
            }
        };
        steps.push(entries);
    }
    Ok(SparseSeq { dim, steps })
}

// ---------------------------------------------------------------------------
// Dataset fixtures: one JSON record per line.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PairRecord {
    y: u8,
    goal_a: Option<(usize, usize)>,
    mask_a: MaskKind,
    ratio_a: f64,
    obs_a: Vec<(usize, usize, usize)>,
    goal_b: Option<(usize, usize)>,
    mask_b: MaskKind,
    ratio_b: f64,
    obs_b: Vec<(usize, usize, usize)>,
}

fn trace_to_parts(t: &Trace) -> (Option<(usize, usize)>, Vec<(usize, usize, usize)>) {
    (
        t.goal.map(|g| (g.x, g.y)),
        t.observations.iter().map(|&(s, a)| (s.x, s.y, a.index())).collect(),
    )
}

fn trace_from_parts(
    goal: Option<(usize, usize)>,
    mask: MaskKind,
    ratio: f64,
    obs: &[(usize, usize, usize)],
) -> Result<Trace> {
    Ok(Trace {
        observations: obs
            .iter()
            .map(|&(x, y, a)| Ok((State::new(x, y), Action::from_index(a)?)))
            .collect::<Result<_>>()?,
        goal: goal.map(|(x, y)| State::new(x, y)),
        mask_kind: mask,
        observed_ratio: ratio,
    })
}

/// Writes pair samples as line-delimited JSON records.
pub fn save_pairs(pairs: &[PairSample], writer: &mut impl Write) -> Result<()> {
    for p in pairs {
        let (goal_a, obs_a) = trace_to_parts(&p.trace_a);
        let (goal_b, obs_b) = trace_to_parts(&p.trace_b);
        let rec = PairRecord {
            y: p.label as u8,
            goal_a,
            mask_a: p.trace_a.mask_kind,
            ratio_a: p.trace_a.observed_ratio,
            obs_a,
            goal_b,
            mask_b: p.trace_b.mask_kind,
            ratio_b: p.trace_b.observed_ratio,
            obs_b,
        };
        serde_json::to_writer(&mut *writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a dataset written by [`save_pairs`].
pub fn load_pairs(reader: impl BufRead) -> Result<Vec<PairSample>> {
    let mut pairs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)?;
        pairs.push(PairSample {
            trace_a: trace_from_parts(rec.goal_a, rec.mask_a, rec.ratio_a, &rec.obs_a)?,
            trace_b: trace_from_parts(rec.goal_b, rec.mask_b, rec.ratio_b, &rec.obs_b)?,
            label: rec.y == 1,
        });
    }
    Ok(pairs)
}
