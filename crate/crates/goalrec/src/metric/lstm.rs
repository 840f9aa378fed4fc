//! Single-layer LSTM with hand-written backpropagation through time.
//!
//! One parameter set serves both branches of the Siamese pair: the pair
//! backward pass simply accumulates both branches' gradients into one
//! gradient set. Matrices are stored column-major so that both the input
//! matvec (sparse inputs: a handful of live columns) and the recurrent
//! matvec stream through contiguous memory.

use rand::Rng;

use crate::dataset::SparseSeq;
use crate::error::{Error, Result};

pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_OUTPUT: usize = 2;
pub const GATE_CELL: usize = 3;
const GATE_NAMES: [&str; 4] = ["i", "f", "o", "g"];

/// Column-major matrix: entry (r, c) lives at `data[c * rows + r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    fn col_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.rows..(c + 1) * self.rows]
    }
}

/// Shared-weight LSTM branch parameters: per-gate input weights, recurrent
/// weights and biases, in gate order i, f, o, g.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w: [Mat; 4],
    pub u: [Mat; 4],
    pub b: [Vec<f64>; 4],
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w: std::array::from_fn(|_| Mat::zeros(hidden_dim, input_dim)),
            u: std::array::from_fn(|_| Mat::zeros(hidden_dim, hidden_dim)),
            b: std::array::from_fn(|_| vec![0.0; hidden_dim]),
        }
    }

    /// Uniform(-1/sqrt(k), 1/sqrt(k)) weights, forget bias 1, other biases 0.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim);
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        for gate in 0..4 {
            for v in &mut p.w[gate].data {
                *v = rng.gen_range(-bound..bound);
            }
            for v in &mut p.u[gate].data {
                *v = rng.gen_range(-bound..bound);
            }
        }
        p.b[GATE_FORGET].iter_mut().for_each(|v| *v = 1.0);
        p
    }

    /// Number of flat tensors (4 w + 4 u + 4 b); used by the optimizer and
    /// the finite-difference checker to walk every parameter.
    pub const TENSORS: usize = 12;

    pub fn tensor(&self, idx: usize) -> &[f64] {
        match idx {
            0..=3 => &self.w[idx].data,
            4..=7 => &self.u[idx - 4].data,
            8..=11 => &self.b[idx - 8],
            _ => panic!("tensor index {idx} out of range"),
        }
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut [f64] {
        match idx {
            0..=3 => &mut self.w[idx].data,
            4..=7 => &mut self.u[idx - 4].data,
            8..=11 => &mut self.b[idx - 8],
            _ => panic!("tensor index {idx} out of range"),
        }
    }

    pub fn tensor_name(idx: usize) -> String {
        match idx {
            0..=3 => format!("w_{}", GATE_NAMES[idx]),
            4..=7 => format!("u_{}", GATE_NAMES[idx - 4]),
            8..=11 => format!("b_{}", GATE_NAMES[idx - 8]),
            _ => panic!("tensor index {idx} out of range"),
        }
    }

    pub fn param_count(&self) -> usize {
        (0..Self::TENSORS).map(|t| self.tensor(t).len()).sum()
    }

    pub fn scale(&mut self, s: f64) {
        for t in 0..Self::TENSORS {
            for v in self.tensor_mut(t) {
                *v *= s;
            }
        }
    }

    pub fn add(&mut self, other: &LstmParams) {
        for t in 0..Self::TENSORS {
            for (v, s) in self.tensor_mut(t).iter_mut().zip(other.tensor(t)) {
                *v += s;
            }
        }
    }

    pub fn zero(&mut self) {
        for t in 0..Self::TENSORS {
            self.tensor_mut(t).fill(0.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for t in 0..Self::TENSORS {
            for v in self.tensor(t) {
                sq += v * v;
            }
        }
        sq.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        (0..Self::TENSORS).all(|t| self.tensor(t).iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, seq: &SparseSeq) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Contract("cannot embed an empty sequence".into()));
        }
        if seq.dim != self.input_dim {
            return Err(Error::Dimension(format!(
                "sequence dim {} vs model input dim {}",
                seq.dim, self.input_dim
            )));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-step activations kept for the backward pass.
#[derive(Debug, Clone)]
struct StepCache {
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn gate_preactivations(params: &LstmParams, x: &[(u32, f64)], h_prev: &[f64]) -> [Vec<f64>; 4] {
    let k = params.hidden_dim;
    std::array::from_fn(|gate| {
        let mut a = params.b[gate].clone();
        for &(c, xc) in x {
            for (ar, wr) in a.iter_mut().zip(params.w[gate].col(c as usize)) {
                *ar += wr * xc;
            }
        }
        for c in 0..k {
            let hc = h_prev[c];
            if hc != 0.0 {
                for (ar, ur) in a.iter_mut().zip(params.u[gate].col(c)) {
                    *ar += ur * hc;
                }
            }
        }
        a
    })
}

fn forward_cached(params: &LstmParams, seq: &SparseSeq) -> Vec<StepCache> {
    let k = params.hidden_dim;
    let mut caches: Vec<StepCache> = Vec::with_capacity(seq.len());
    let zeros = vec![0.0; k];
    for (t, x) in seq.steps.iter().enumerate() {
        let (h_prev, c_prev) = if t == 0 {
            (&zeros, &zeros)
        } else {
            (&caches[t - 1].h, &caches[t - 1].c)
        };
        let [ai, af, ao, ag] = gate_preactivations(params, x, h_prev);
        let i: Vec<f64> = ai.iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = af.iter().map(|&v| sigmoid(v)).collect();
        let o: Vec<f64> = ao.iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = ag.iter().map(|&v| v.tanh()).collect();
        let c: Vec<f64> = (0..k).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|&v| v.tanh()).collect();
        let h: Vec<f64> = (0..k).map(|j| o[j] * tanh_c[j]).collect();
        caches.push(StepCache { i, f, o, g, c, tanh_c, h });
    }
    caches
}

/// Runs the LSTM recurrence from zero initial state and returns the final
/// hidden state.
pub fn forward(params: &LstmParams, seq: &SparseSeq) -> Result<Vec<f64>> {
    params.check_input(seq)?;
    let caches = forward_cached(params, seq);
    Ok(caches.last().expect("nonempty sequence").h.clone())
}

/// BPTT through one branch given dL/dh_T, accumulating into `grads`.
fn branch_backward(
    params: &LstmParams,
    seq: &SparseSeq,
    caches: &[StepCache],
    dh_last: &[f64],
    grads: &mut LstmParams,
) {
    let k = params.hidden_dim;
    let zeros = vec![0.0; k];
    let mut dh = dh_last.to_vec();
    let mut dc = vec![0.0; k];
    for t in (0..caches.len()).rev() {
        let cache = &caches[t];
        let (h_prev, c_prev) = if t == 0 {
            (&zeros, &zeros)
        } else {
            (&caches[t - 1].h, &caches[t - 1].c)
        };
        // split dh into the output gate path and the cell path
        let mut da = [
            Vec::with_capacity(k),
            Vec::with_capacity(k),
            Vec::with_capacity(k),
            Vec::with_capacity(k),
        ];
        let mut dc_prev = vec![0.0; k];
        for j in 0..k {
            let do_j = dh[j] * cache.tanh_c[j];
            let dc_j = dc[j] + dh[j] * cache.o[j] * (1.0 - cache.tanh_c[j] * cache.tanh_c[j]);
            let di_j = dc_j * cache.g[j];
            let df_j = dc_j * c_prev[j];
            let dg_j = dc_j * cache.i[j];
            dc_prev[j] = dc_j * cache.f[j];
            da[GATE_INPUT].push(di_j * cache.i[j] * (1.0 - cache.i[j]));
            da[GATE_FORGET].push(df_j * cache.f[j] * (1.0 - cache.f[j]));
            da[GATE_OUTPUT].push(do_j * cache.o[j] * (1.0 - cache.o[j]));
            da[GATE_CELL].push(dg_j * (1.0 - cache.g[j] * cache.g[j]));
        }
        let mut dh_prev = vec![0.0; k];
        for gate in 0..4 {
            let da_g = &da[gate];
            for (bv, dv) in grads.b[gate].iter_mut().zip(da_g) {
                *bv += dv;
            }
            for &(c, xc) in &seq.steps[t] {
                for (wv, dv) in grads.w[gate].col_mut(c as usize).iter_mut().zip(da_g) {
                    *wv += dv * xc;
                }
            }
            for c in 0..k {
                let hc = h_prev[c];
                if hc != 0.0 {
                    for (uv, dv) in grads.u[gate].col_mut(c).iter_mut().zip(da_g) {
                        *uv += dv * hc;
                    }
                }
                // dh_prev[c] += U[gate][:, c] . da_g
                let col = params.u[gate].col(c);
                let mut acc = 0.0;
                for (uv, dv) in col.iter().zip(da_g) {
                    acc += uv * dv;
                }
                dh_prev[c] += acc;
            }
        }
        dh = dh_prev;
        dc = dc_prev;
    }
}

/// Forward and backward pass for one labeled pair.
#[derive(Debug)]
pub struct PairGradients {
    /// Gradient set matching [`LstmParams`] shape.
    pub grads: LstmParams,
    pub loss: f64,
    pub y_hat: f64,
}

/// Accumulates one pair's gradients into `grads` (shared weights: both
/// branches sum into the same set) and returns (loss, y_hat). The training
/// loop calls this directly so batch accumulators are zeroed once per batch.
pub(crate) fn accumulate_pair_gradients(
    params: &LstmParams,
    seq_a: &SparseSeq,
    seq_b: &SparseSeq,
    y: f64,
    grads: &mut LstmParams,
) -> Result<(f64, f64)> {
    params.check_input(seq_a)?;
    params.check_input(seq_b)?;
    let caches_a = forward_cached(params, seq_a);
    let caches_b = forward_cached(params, seq_b);
    let va = &caches_a.last().expect("nonempty").h;
    let vb = &caches_b.last().expect("nonempty").h;

    let dist: f64 = va.iter().zip(vb).map(|(a, b)| (a - b).abs()).sum();
    let y_hat = (-dist).exp();
    let loss = super::bce_loss(y_hat, y);
    // dL/dd with the loss clamped exactly as in bce_loss
    let clamped = y_hat.clamp(super::BCE_EPSILON, 1.0 - super::BCE_EPSILON);
    let dl_dyhat = -(y / clamped - (1.0 - y) / (1.0 - clamped));
    let dl_dd = dl_dyhat * (-y_hat);

    let dva: Vec<f64> = va
        .iter()
        .zip(vb)
        .map(|(a, b)| {
            let diff = a - b;
            if diff == 0.0 {
                0.0
            } else {
                dl_dd * diff.signum()
            }
        })
        .collect();
    let dvb: Vec<f64> = dva.iter().map(|v| -v).collect();

    branch_backward(params, seq_a, &caches_a, &dva, grads);
    branch_backward(params, seq_b, &caches_b, &dvb, grads);
    Ok((loss, y_hat))
}

/// Computes the pair loss and exact analytic gradients with respect to every
/// shared parameter. The L1 head uses sign(0) = 0; both branches' gradient
/// contributions are summed because the weights are shared.
pub fn backward(
    params: &LstmParams,
    seq_a: &SparseSeq,
    seq_b: &SparseSeq,
    y: f64,
) -> Result<PairGradients> {
    let mut grads = LstmParams::zeros(params.input_dim, params.hidden_dim);
    let (loss, y_hat) = accumulate_pair_gradients(params, seq_a, seq_b, y, &mut grads)?;
    Ok(PairGradients { grads, loss, y_hat })
}

#[cfg(test)]
pub(crate) fn branch_backward_for_test(
    params: &LstmParams,
    seq: &SparseSeq,
    dh: &[f64],
    grads: &mut LstmParams,
) {
    let caches = forward_cached(params, seq);
    branch_backward(params, seq, &caches, dh, grads);
}

fn pair_loss(params: &LstmParams, seq_a: &SparseSeq, seq_b: &SparseSeq, y: f64) -> f64 {
    let va = forward(params, seq_a).expect("checked by caller");
    let vb = forward(params, seq_b).expect("checked by caller");
    let dist: f64 = va.iter().zip(&vb).map(|(a, b)| (a - b).abs()).sum();
    super::bce_loss((-dist).exp(), y)
}

/// Compares [`backward`] against central finite differences over every
/// parameter and returns the maximum relative error.
pub fn grad_check(
    params: &LstmParams,
    seq_a: &SparseSeq,
    seq_b: &SparseSeq,
    y: f64,
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Contract(format!("step size must be positive, got {h}")));
    }
    let analytic = backward(params, seq_a, seq_b, y)?.grads;
    let mut probe = params.clone();
    let mut max_rel: f64 = 0.0;
    for t in 0..LstmParams::TENSORS {
        for i in 0..params.tensor(t).len() {
            let orig = params.tensor(t)[i];
            probe.tensor_mut(t)[i] = orig + h;
            let up = pair_loss(&probe, seq_a, seq_b, y);
            probe.tensor_mut(t)[i] = orig - h;
            let down = pair_loss(&probe, seq_a, seq_b, y);
            probe.tensor_mut(t)[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.tensor(t)[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
