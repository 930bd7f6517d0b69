//! Gated cross-modal fusion: reference forward/backward kernels.
//!
//! Text states attend over projected visual features, and a learned
//! sigmoid gate mixes the attended context back into the text stream:
//!
//! ```text
//! H_v = H_v_raw · W_proj
//! A   = softmax( (H_t W_q)(H_v W_k)^T / sqrt(d) )      attention, row-wise
//! H_c = A · (H_v W_v)                                   attended context
//! λ   = sigmoid( H_t W_t + H_c W_c )                    per-element gate
//! H_f = (1 − λ) ⊙ H_t + λ ⊙ H_c                         fused output
//! ```
//!
//! The backward pass is hand-derived and exact; [`grad_check`] verifies it
//! against central finite differences, which is the point of the module —
//! a small, dependency-free kernel that a training stack can be validated
//! against. [`sequence_nll`] adds the summed next-token loss used on top.

use crate::matrix::{Matrix, MatrixError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("fusion inputs must have at least one row")]
    EmptyInput,
    #[error("target {target} at position {position} is out of vocabulary ({vocab})")]
    BadTarget { position: usize, target: usize, vocab: usize },
    #[error("expected {expected} targets (one per row), got {got}")]
    TargetLength { expected: usize, got: usize },
}

/// Learnable blocks. `w_proj` lifts visual features into the text width d;
/// the rest are square over d.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w_proj: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_t: Matrix,
    pub w_c: Matrix,
}

fn seeded_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0) * scale)
}

impl FusionParams {
    pub fn zeros(d: usize, d_v: usize) -> Self {
        Self {
            w_proj: Matrix::zeros(d_v, d),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_t: Matrix::zeros(d, d),
            w_c: Matrix::zeros(d, d),
        }
    }

    /// Reproducible init: entries uniform in `[-1/sqrt(d), 1/sqrt(d)]`, which
    /// keeps attention logits O(1) for unit-scale inputs.
    pub fn seeded(d: usize, d_v: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d as f64).sqrt();
        Self {
            w_proj: seeded_matrix(&mut rng, d_v, d, s),
            w_q: seeded_matrix(&mut rng, d, d, s),
            w_k: seeded_matrix(&mut rng, d, d, s),
            w_v: seeded_matrix(&mut rng, d, d, s),
            w_t: seeded_matrix(&mut rng, d, d, s),
            w_c: seeded_matrix(&mut rng, d, d, s),
        }
    }

    /// Text width and visual width, after checking block shapes agree.
    pub fn dims(&self) -> Result<(usize, usize), FusionError> {
        let d = self.w_q.rows();
        let d_v = self.w_proj.rows();
        for (name, m) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_t", &self.w_t),
            ("w_c", &self.w_c),
        ] {
            if m.rows() != d || m.cols() != d {
                return Err(MatrixError::ShapeMismatch {
                    context: name,
                    a_rows: d,
                    a_cols: d,
                    b_rows: m.rows(),
                    b_cols: m.cols(),
                }
                .into());
            }
        }
        if self.w_proj.cols() != d {
            return Err(MatrixError::ShapeMismatch {
                context: "w_proj",
                a_rows: d_v,
                a_cols: d,
                b_rows: self.w_proj.rows(),
                b_cols: self.w_proj.cols(),
            }
            .into());
        }
        Ok((d, d_v))
    }
}

/// Forward pass with every intermediate the backward pass needs.
#[derive(Debug, Clone)]
pub struct FusionState {
    pub h_t: Matrix,
    pub h_v_raw: Matrix,
    /// Projected visual features `H_v_raw · W_proj`.
    pub h_v: Matrix,
    /// Row-stochastic attention over visual positions.
    pub attention: Matrix,
    /// Attended visual context per text position.
    pub h_c: Matrix,
    /// Gate values, elementwise in (0, 1).
    pub lambda: Matrix,
    /// Fused output.
    pub h_f: Matrix,
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (c, e) in exps.iter().enumerate() {
            out.set(r, c, e / sum);
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Run the fused forward pass. `h_t` is (text length × d), `h_v_raw` is
/// (visual length × d_v); both need at least one row.
pub fn fusion_forward(
    h_t: &Matrix,
    h_v_raw: &Matrix,
    params: &FusionParams,
) -> Result<FusionState, FusionError> {
    let (d, d_v) = params.dims()?;
    if h_t.rows() == 0 || h_v_raw.rows() == 0 {
        return Err(FusionError::EmptyInput);
    }
    if h_t.cols() != d {
        return Err(MatrixError::ShapeMismatch {
            context: "h_t width",
            a_rows: h_t.rows(),
            a_cols: d,
            b_rows: h_t.rows(),
            b_cols: h_t.cols(),
        }
        .into());
    }
    if h_v_raw.cols() != d_v {
        return Err(MatrixError::ShapeMismatch {
            context: "h_v width",
            a_rows: h_v_raw.rows(),
            a_cols: d_v,
            b_rows: h_v_raw.rows(),
            b_cols: h_v_raw.cols(),
        }
        .into());
    }

    let h_v = h_v_raw.matmul(&params.w_proj)?;
    let q = h_t.matmul(&params.w_q)?;
    let k = h_v.matmul(&params.w_k)?;
    let v = h_v.matmul(&params.w_v)?;
    let scores = q.matmul(&k.transpose())?.scale(1.0 / (d as f64).sqrt());
    let attention = softmax_rows(&scores);
    let h_c = attention.matmul(&v)?;
    let z = h_t.matmul(&params.w_t)?.add(&h_c.matmul(&params.w_c)?)?;
    let lambda = z.map(sigmoid);
    let one_minus = lambda.map(|x| 1.0 - x);
    let h_f = one_minus.hadamard(h_t)?.add(&lambda.hadamard(&h_c)?)?;

    Ok(FusionState {
        h_t: h_t.clone(),
        h_v_raw: h_v_raw.clone(),
        h_v,
        attention,
        h_c,
        lambda,
        h_f,
    })
}

/// Gradients of a scalar loss with respect to every input and parameter.
#[derive(Debug, Clone)]
pub struct FusionGradients {
    pub d_h_t: Matrix,
    pub d_h_v_raw: Matrix,
    pub d_params: FusionParams,
}

/// Backpropagate `grad_out = dL/dH_f` through the forward pass in `state`.
pub fn fusion_backward(
    state: &FusionState,
    params: &FusionParams,
    grad_out: &Matrix,
) -> Result<FusionGradients, FusionError> {
    let (d, _) = params.dims()?;
    let g = grad_out;
    let lam = &state.lambda;

    // Mixing: H_f = (1-λ)⊙H_t + λ⊙H_c.
    let d_lambda = g.hadamard(&state.h_c.sub(&state.h_t)?)?;
    let mut d_h_t = g.hadamard(&lam.map(|x| 1.0 - x))?;

    // Gate: λ = sigmoid(Z), Z = H_t W_t + H_c W_c.
    let d_z = d_lambda.hadamard(&lam.zip_map(&lam.map(|x| 1.0 - x), "gate", |a, b| a * b)?)?;
    let d_w_t = state.h_t.transpose().matmul(&d_z)?;
    let d_w_c = state.h_c.transpose().matmul(&d_z)?;
    d_h_t = d_h_t.add(&d_z.matmul(&params.w_t.transpose())?)?;
    let d_h_c = g.hadamard(lam)?.add(&d_z.matmul(&params.w_c.transpose())?)?;

    // Context: H_c = A · V with V = H_v W_v.
    let v = state.h_v.matmul(&params.w_v)?;
    let d_a = d_h_c.matmul(&v.transpose())?;
    let d_v_mat = state.attention.transpose().matmul(&d_h_c)?;

    // Softmax rows: dS = A ⊙ (dA − rowsum(dA ⊙ A)).
    let a = &state.attention;
    let mut d_s = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let dot: f64 = a.row(r).iter().zip(d_a.row(r)).map(|(&x, &y)| x * y).sum();
        for c in 0..a.cols() {
            d_s.set(r, c, a.get(r, c) * (d_a.get(r, c) - dot));
        }
    }

    // Scores: S = Q K^T / sqrt(d).
    let scale = 1.0 / (d as f64).sqrt();
    let q = state.h_t.matmul(&params.w_q)?;
    let k = state.h_v.matmul(&params.w_k)?;
    let d_q = d_s.matmul(&k)?.scale(scale);
    let d_k = d_s.transpose().matmul(&q)?.scale(scale);

    let d_w_q = state.h_t.transpose().matmul(&d_q)?;
    d_h_t = d_h_t.add(&d_q.matmul(&params.w_q.transpose())?)?;
    let d_w_k = state.h_v.transpose().matmul(&d_k)?;
    let d_w_v = state.h_v.transpose().matmul(&d_v_mat)?;
    let d_h_v = d_k
        .matmul(&params.w_k.transpose())?
        .add(&d_v_mat.matmul(&params.w_v.transpose())?)?;

    // Projection: H_v = H_v_raw · W_proj.
    let d_w_proj = state.h_v_raw.transpose().matmul(&d_h_v)?;
    let d_h_v_raw = d_h_v.matmul(&params.w_proj.transpose())?;

    Ok(FusionGradients {
        d_h_t,
        d_h_v_raw,
        d_params: FusionParams {
            w_proj: d_w_proj,
            w_q: d_w_q,
            w_k: d_w_k,
            w_v: d_w_v,
            w_t: d_w_t,
            w_c: d_w_c,
        },
    })
}

// ---------------------------------------------------------------------------
// Sequence NLL
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Sum over positions (the training objective).
    #[default]
    Sum,
    /// Mean over positions, for comparable per-token numbers.
    Mean,
}

#[derive(Debug, Clone)]
pub struct NllResult {
    pub loss: f64,
    /// dLoss/dlogits, same shape as the logits.
    pub d_logits: Matrix,
}

/// Negative log-likelihood of `targets` under row-wise softmax of `logits`
/// (rows are positions, columns vocabulary entries), with its gradient
/// `softmax − onehot` (scaled by 1/rows for [`Reduction::Mean`]).
pub fn sequence_nll(
    logits: &Matrix,
    targets: &[usize],
    reduction: Reduction,
) -> Result<NllResult, FusionError> {
    if targets.len() != logits.rows() {
        return Err(FusionError::TargetLength { expected: logits.rows(), got: targets.len() });
    }
    for (position, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(FusionError::BadTarget { position, target: t, vocab: logits.cols() });
        }
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - logits.get(r, t);
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / logits.rows() as f64,
    };
    let mut d_logits = probs;
    for (r, &t) in targets.iter().enumerate() {
        d_logits.set(r, t, d_logits.get(r, t) - 1.0);
    }
    Ok(NllResult { loss: loss * scale, d_logits: d_logits.scale(scale) })
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GradDims {
    pub l_t: usize,
    pub l_v: usize,
    pub d: usize,
    pub d_v: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub dims: GradDims,
    /// Central-difference step.
    pub h: f64,
    /// Entries compared (across both loss heads).
    pub checks: usize,
    pub max_rel_error: f64,
    /// Block holding the worst entry, e.g. `"w_k"`.
    pub worst_block: String,
    pub tolerance: f64,
    pub passed: bool,
}

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone)]
struct Bundle {
    params: FusionParams,
    h_t: Matrix,
    h_v: Matrix,
}

const BLOCK_NAMES: [&str; 8] = ["w_proj", "w_q", "w_k", "w_v", "w_t", "w_c", "h_t", "h_v"];

fn block_mut(b: &mut Bundle, i: usize) -> &mut Matrix {
    match i {
        0 => &mut b.params.w_proj,
        1 => &mut b.params.w_q,
        2 => &mut b.params.w_k,
        3 => &mut b.params.w_v,
        4 => &mut b.params.w_t,
        5 => &mut b.params.w_c,
        6 => &mut b.h_t,
        _ => &mut b.h_v,
    }
}

fn grad_block(g: &FusionGradients, i: usize) -> &Matrix {
    match i {
        0 => &g.d_params.w_proj,
        1 => &g.d_params.w_q,
        2 => &g.d_params.w_k,
        3 => &g.d_params.w_v,
        4 => &g.d_params.w_t,
        5 => &g.d_params.w_c,
        6 => &g.d_h_t,
        _ => &g.d_h_v_raw,
    }
}

#[derive(Clone, Copy)]
enum LossHead {
    /// Sum of all fused outputs.
    SumOutput,
    /// Summed NLL of fixed targets after a fixed linear head.
    Nll,
}

fn eval_loss(
    bundle: &Bundle,
    head: LossHead,
    w_head: &Matrix,
    targets: &[usize],
) -> Result<f64, FusionError> {
    let state = fusion_forward(&bundle.h_t, &bundle.h_v, &bundle.params)?;
    match head {
        LossHead::SumOutput => Ok(state.h_f.data().iter().sum()),
        LossHead::Nll => {
            let logits = state.h_f.matmul(w_head)?;
            Ok(sequence_nll(&logits, targets, Reduction::Sum)?.loss)
        }
    }
}

fn analytic_grads(
    bundle: &Bundle,
    head: LossHead,
    w_head: &Matrix,
    targets: &[usize],
) -> Result<FusionGradients, FusionError> {
    let state = fusion_forward(&bundle.h_t, &bundle.h_v, &bundle.params)?;
    let grad_out = match head {
        LossHead::SumOutput => Matrix::from_fn(state.h_f.rows(), state.h_f.cols(), |_, _| 1.0),
        LossHead::Nll => {
            let logits = state.h_f.matmul(w_head)?;
            let nll = sequence_nll(&logits, targets, Reduction::Sum)?;
            nll.d_logits.matmul(&w_head.transpose())?
        }
    };
    fusion_backward(&state, &bundle.params, &grad_out)
}

/// Relative error that treats tiny gradients kindly: absolute error against
/// a denominator floored at 1.
fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// [`grad_check_at`] with the default step.
pub fn grad_check_with(
    dims: GradDims,
    seed: u64,
    tolerance: f64,
    samples_per_block: usize,
) -> Result<GradCheckReport, FusionError> {
    grad_check_at(dims, seed, tolerance, samples_per_block, DEFAULT_STEP)
}

/// Compare the analytic backward pass against central finite differences at
/// explicit dimensions and step `h`. `samples_per_block` entries of each
/// parameter and input block are checked (0 means every entry), under two
/// loss heads.
pub fn grad_check_at(
    dims: GradDims,
    seed: u64,
    tolerance: f64,
    samples_per_block: usize,
    h: f64,
) -> Result<GradCheckReport, FusionError> {
    let GradDims { l_t, l_v, d, d_v } = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let bundle = Bundle {
        params: FusionParams::seeded(d, d_v, seed),
        h_t: seeded_matrix(&mut rng, l_t, d, 1.0),
        h_v: seeded_matrix(&mut rng, l_v, d_v, 1.0),
    };
    let vocab = d + 3;
    let w_head = seeded_matrix(&mut rng, d, vocab, 1.0 / (d as f64).sqrt());
    let targets: Vec<usize> = (0..l_t).map(|_| rng.gen_range(0..vocab)).collect();

    let mut checks = 0usize;
    let mut max_rel_error = 0.0f64;
    let mut worst_block = String::from("none");

    for head in [LossHead::SumOutput, LossHead::Nll] {
        let grads = analytic_grads(&bundle, head, &w_head, &targets)?;
        for (bi, name) in BLOCK_NAMES.iter().enumerate() {
            let block = grad_block(&grads, bi);
            let total = block.rows() * block.cols();
            let entries: Vec<usize> = if samples_per_block == 0 || samples_per_block >= total {
                (0..total).collect()
            } else {
                (0..samples_per_block).map(|_| rng.gen_range(0..total)).collect()
            };
            for e in entries {
                let (r, c) = (e / block.cols(), e % block.cols());
                let analytic = block.get(r, c);
                let mut plus = bundle.clone();
                let m = block_mut(&mut plus, bi);
                m.set(r, c, m.get(r, c) + h);
                let mut minus = bundle.clone();
                let m = block_mut(&mut minus, bi);
                m.set(r, c, m.get(r, c) - h);
                let numeric = (eval_loss(&plus, head, &w_head, &targets)?
                    - eval_loss(&minus, head, &w_head, &targets)?)
                    / (2.0 * h);
                let err = rel_error(analytic, numeric);
                checks += 1;
                if err > max_rel_error {
                    max_rel_error = err;
                    worst_block = name.to_string();
                }
            }
        }
    }

    Ok(GradCheckReport {
        seed,
        dims,
        h,
        checks,
        max_rel_error,
        worst_block,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

/// [`grad_check_with`] at seed-derived dimensions: the text width cycles
/// through {3, 5, 8, 16} and sequence lengths vary with the seed.
pub fn grad_check(
    seed: u64,
    tolerance: f64,
    samples_per_block: usize,
) -> Result<GradCheckReport, FusionError> {
    let d = [3usize, 5, 8, 16][(seed % 4) as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = GradDims {
        l_t: rng.gen_range(2..5),
        l_v: rng.gen_range(2..6),
        d,
        d_v: d + 2,
    };
    grad_check_with(dims, seed, tolerance, samples_per_block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seeded_inputs(l_t: usize, l_v: usize, d: usize, d_v: usize, seed: u64) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h_t = seeded_matrix(&mut rng, l_t, d, 1.0);
        let h_v = seeded_matrix(&mut rng, l_v, d_v, 1.0);
        (h_t, h_v)
    }

    /// Straight-line recomputation on plain nested vectors, no Matrix ops.
    #[test]
    #[allow(clippy::needless_range_loop)] // index form mirrors the formulas
    fn forward_matches_straight_line_oracle() {
        let (l_t, l_v, d, d_v) = (3usize, 4usize, 5usize, 6usize);
        let params = FusionParams::seeded(d, d_v, 42);
        let (h_t, h_v_raw) = seeded_inputs(l_t, l_v, d, d_v, 43);
        let state = fusion_forward(&h_t, &h_v_raw, &params).unwrap();

        let at = |m: &Matrix, r: usize, c: usize| m.get(r, c);
        // H_v = H_v_raw W_proj
        let mut hv = vec![vec![0.0; d]; l_v];
        for i in 0..l_v {
            for j in 0..d {
                for k in 0..d_v {
                    hv[i][j] += at(&h_v_raw, i, k) * at(&params.w_proj, k, j);
                }
            }
        }
        // Q, K, V
        let lin = |x: &dyn Fn(usize, usize) -> f64, rows: usize, w: &Matrix| {
            let mut out = vec![vec![0.0; d]; rows];
            for i in 0..rows {
                for j in 0..d {
                    for k in 0..d {
                        out[i][j] += x(i, k) * at(w, k, j);
                    }
                }
            }
            out
        };
        let q = lin(&|i, k| at(&h_t, i, k), l_t, &params.w_q);
        let kk = lin(&|i, k| hv[i][k], l_v, &params.w_k);
        let vv = lin(&|i, k| hv[i][k], l_v, &params.w_v);
        // attention
        let mut attn = vec![vec![0.0; l_v]; l_t];
        for i in 0..l_t {
            let mut scores = vec![0.0; l_v];
            for (j, s) in scores.iter_mut().enumerate() {
                for k in 0..d {
                    *s += q[i][k] * kk[j][k];
                }
                *s /= (d as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                attn[i][j] = e / sum;
            }
        }
        // H_c, then gate and H_f from the oracle's own H_c.
        let mut hc = vec![vec![0.0; d]; l_t];
        for i in 0..l_t {
            for j in 0..d {
                for v in 0..l_v {
                    hc[i][j] += attn[i][v] * vv[v][j];
                }
            }
        }
        for i in 0..l_t {
            for j in 0..d {
                let mut z = 0.0;
                for k in 0..d {
                    z += at(&h_t, i, k) * at(&params.w_t, k, j)
                        + hc[i][k] * at(&params.w_c, k, j);
                }
                let lam = 1.0 / (1.0 + (-z).exp());
                let hf = (1.0 - lam) * at(&h_t, i, j) + lam * hc[i][j];

                assert!((hc[i][j] - at(&state.h_c, i, j)).abs() < 1e-12);
                assert!((lam - at(&state.lambda, i, j)).abs() < 1e-12);
                assert!((hf - at(&state.h_f, i, j)).abs() < 1e-12);
            }
        }
        for i in 0..l_t {
            for j in 0..l_v {
                assert!((attn[i][j] - at(&state.attention, i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_params_halve_the_text_stream() {
        let params = FusionParams::zeros(4, 6);
        let (h_t, h_v) = seeded_inputs(3, 5, 4, 6, 7);
        let state = fusion_forward(&h_t, &h_v, &params).unwrap();
        // Uniform attention, zero context, gate exactly one half.
        for r in 0..3 {
            for c in 0..5 {
                assert_eq!(state.attention.get(r, c), 0.2);
            }
        }
        assert_eq!(state.h_c, Matrix::zeros(3, 4));
        assert_eq!(state.h_f, h_t.scale(0.5));

        let g = seeded_inputs(3, 5, 4, 6, 8).0;
        let grads = fusion_backward(&state, &params, &g).unwrap();
        assert_eq!(grads.d_h_t, g.scale(0.5));
        assert_eq!(grads.d_h_v_raw, Matrix::zeros(5, 6));
    }

    #[test]
    fn shape_validation() {
        let params = FusionParams::seeded(4, 6, 1);
        let (h_t, h_v) = seeded_inputs(3, 5, 4, 6, 2);
        assert!(fusion_forward(&h_t, &h_v, &params).is_ok());
        let bad_t = Matrix::zeros(3, 5);
        assert!(fusion_forward(&bad_t, &h_v, &params).is_err());
        let bad_v = Matrix::zeros(5, 4);
        assert!(fusion_forward(&h_t, &bad_v, &params).is_err());
        assert!(fusion_forward(&Matrix::zeros(0, 4), &h_v, &params).is_err());
    }

    #[test]
    fn backward_matches_central_difference_everywhere() {
        let dims = GradDims { l_t: 2, l_v: 3, d: 3, d_v: 4 };
        let report = grad_check_with(dims, 11, 1e-6, 0).unwrap();
        assert!(
            report.passed,
            "max rel err {} in {}",
            report.max_rel_error, report.worst_block
        );
        // Every entry of six parameter blocks and two inputs, two heads.
        assert_eq!(report.checks, 2 * (12 + 9 * 5 + 6 + 12));
    }

    #[test]
    fn grad_check_covers_seeded_dims() {
        for seed in [0u64, 1, 2, 3] {
            let report = grad_check(seed, 1e-5, 4).unwrap();
            assert!(
                report.passed,
                "seed {seed}: max rel err {} in {}",
                report.max_rel_error, report.worst_block
            );
        }
    }

    #[test]
    fn nll_hand_values() {
        // Two-way uniform: loss is ln 2.
        let logits = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let r = sequence_nll(&logits, &[0], Reduction::Sum).unwrap();
        assert!((r.loss - 2.0f64.ln()).abs() < 1e-12);
        // Uniform rows sum to rows * ln(vocab); mean divides it out.
        let logits = Matrix::zeros(4, 7);
        let targets = [0, 1, 2, 3];
        let sum = sequence_nll(&logits, &targets, Reduction::Sum).unwrap();
        assert!((sum.loss - 4.0 * 7.0f64.ln()).abs() < 1e-12);
        let mean = sequence_nll(&logits, &targets, Reduction::Mean).unwrap();
        assert!((mean.loss - 7.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_gradient_is_softmax_minus_onehot() {
        let logits = Matrix::new(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let r = sequence_nll(&logits, &[1], Reduction::Sum).unwrap();
        let third = 1.0 / 3.0;
        assert!((r.d_logits.get(0, 0) - third).abs() < 1e-12);
        assert!((r.d_logits.get(0, 1) - (third - 1.0)).abs() < 1e-12);
        // Rows of the gradient sum to zero.
        let logits = Matrix::new(2, 4, vec![0.3, -1.0, 2.0, 0.1, 0.0, 0.5, -0.5, 1.0]).unwrap();
        let r = sequence_nll(&logits, &[2, 0], Reduction::Sum).unwrap();
        for row in 0..2 {
            let s: f64 = r.d_logits.row(row).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn nll_validation() {
        let logits = Matrix::zeros(2, 3);
        assert!(matches!(
            sequence_nll(&logits, &[0], Reduction::Sum),
            Err(FusionError::TargetLength { .. })
        ));
        assert!(matches!(
            sequence_nll(&logits, &[0, 3], Reduction::Sum),
            Err(FusionError::BadTarget { .. })
        ));
    }

    #[test]
    fn nll_step_along_negative_gradient_descends() {
        let logits = Matrix::new(2, 3, vec![0.5, -0.2, 0.1, 1.0, 0.0, -1.0]).unwrap();
        let targets = [2, 1];
        let r = sequence_nll(&logits, &targets, Reduction::Sum).unwrap();
        let stepped = logits.sub(&r.d_logits.scale(0.1)).unwrap();
        let r2 = sequence_nll(&stepped, &targets, Reduction::Sum).unwrap();
        assert!(r2.loss < r.loss);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn attention_rows_are_stochastic_and_gate_bounded(seed in 0u64..5000) {
            let d = 3 + (seed % 3) as usize;
            let d_v = d + 1;
            let params = FusionParams::seeded(d, d_v, seed);
            let (h_t, h_v) = seeded_inputs(2, 3, d, d_v, seed ^ 1);
            let state = fusion_forward(&h_t, &h_v, &params).unwrap();
            for r in 0..state.attention.rows() {
                let sum: f64 = state.attention.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(state.attention.row(r).iter().all(|&a| a >= 0.0));
            }
            for (i, &lam) in state.lambda.data().iter().enumerate() {
                prop_assert!(lam > 0.0 && lam < 1.0, "gate {i} = {lam}");
            }
            // Fused output lies between the two streams elementwise.
            for r in 0..state.h_f.rows() {
                for c in 0..state.h_f.cols() {
                    let t = state.h_t.get(r, c);
                    let ctx = state.h_c.get(r, c);
                    let f = state.h_f.get(r, c);
                    prop_assert!(f >= t.min(ctx) - 1e-12 && f <= t.max(ctx) + 1e-12);
                }
            }
        }
    }
}
