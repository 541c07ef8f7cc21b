//! Batched GRU recursion with exact within-sequence backpropagation.
//!
//! Gate convention:
//!
//! ```text
//! z_t = σ(W_z x_t + U_z h_{t-1} + b_z)
//! r_t = σ(W_r x_t + U_r h_{t-1} + b_r)
//! n_t = tanh(W_n x_t + U_n (r_t ⊙ h_{t-1}) + b_n)
//! h_t = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ n_t
//! ŷ_t = V h_t + c
//! ```
//!
//! The initial state is a constant: no gradient is ever produced for it.

use crate::error::{Error, Result};
use crate::kernel::{self, Matrix};

use super::params::{Block, GruDims, GruParams};

/// Previous-response feedback appended to the last `K` input channels.
///
/// At step `t` column `b` consumes `observed[t]` when
/// `use_observed[t * batch + b]` is set, otherwise the model's own output
/// from step `t - 1` (or `initial_prediction` at `t = 0`). Fed-back
/// predictions are treated as constants by the backward pass.
#[derive(Clone, Debug)]
pub struct Feedback {
    /// `W x K x B`, unit-major per step.
    pub observed: Vec<f64>,
    /// `W x B`.
    pub use_observed: Vec<bool>,
    /// `K x B`: the value fed at the first step when it is not observed.
    pub initial_prediction: Vec<f64>,
}

/// Everything the backward pass needs, for a batch of `B` sequences run in
/// lockstep. Arrays are step-major then unit-major: `[t][unit][column]`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    dims: GruDims,
    batch: usize,
    steps: usize,
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    y: Vec<f64>,
}

impl ForwardTrace {
    pub fn dims(&self) -> GruDims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Hidden state of column `b` after local step `t` (`t = 0` is the
    /// initial state, `t = W` the last).
    pub fn hidden(&self, b: usize, t: usize) -> Vec<f64> {
        let hsz = self.dims.hidden;
        let base = t * hsz * self.batch;
        (0..hsz).map(|i| self.h[base + i * self.batch + b]).collect()
    }

    pub fn h0_used(&self, b: usize) -> Vec<f64> {
        self.hidden(b, 0)
    }

    /// Prediction of column `b` at local step `t` (1-based, `1..=W`).
    pub fn output(&self, b: usize, t: usize) -> Vec<f64> {
        assert!(t >= 1 && t <= self.steps, "output step {t} outside 1..={}", self.steps);
        let k = self.dims.output;
        let base = (t - 1) * k * self.batch;
        (0..k).map(|i| self.y[base + i * self.batch + b]).collect()
    }

    /// `W x K` predictions of column `b`.
    pub fn outputs(&self, b: usize) -> Matrix {
        let k = self.dims.output;
        let mut m = Matrix::zeros(self.steps, k);
        for t in 0..self.steps {
            for i in 0..k {
                m.set(t, i, self.y[t * k * self.batch + i * self.batch + b]);
            }
        }
        m
    }

    /// `W x H` hidden states `h_1 ..= h_W` of column `b`.
    pub fn hidden_states(&self, b: usize) -> Matrix {
        let hsz = self.dims.hidden;
        let mut m = Matrix::zeros(self.steps, hsz);
        for t in 1..=self.steps {
            m.row_mut(t - 1).copy_from_slice(&self.hidden(b, t));
        }
        m
    }

    /// `W x D_in` inputs column `b` actually consumed, feedback included.
    pub fn inputs(&self, b: usize) -> Matrix {
        let d = self.dims.input;
        let mut m = Matrix::zeros(self.steps, d);
        for t in 0..self.steps {
            for i in 0..d {
                m.set(t, i, self.x[t * d * self.batch + i * self.batch + b]);
            }
        }
        m
    }
}

/// Runs one sequence from `h0`.
pub fn gru_forward(params: &GruParams, inputs: &Matrix, h0: &[f64]) -> Result<ForwardTrace> {
    forward_batch(params, &[inputs], Some(&[h0.to_vec()]), None)
}

/// Runs `inputs.len()` equal-length sequences in lockstep.
///
/// `h0 = None` starts every column from the zero state. With `feedback`,
/// each input matrix supplies only the first `D_in - K` channels.
pub fn forward_batch(
    params: &GruParams,
    inputs: &[&Matrix],
    h0: Option<&[Vec<f64>]>,
    feedback: Option<&Feedback>,
) -> Result<ForwardTrace> {
    let dims = params.dims();
    let (hsz, d, k) = (dims.hidden, dims.input, dims.output);
    let batch = inputs.len();
    if batch == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let steps = inputs[0].rows();
    let base_cols = if feedback.is_some() { d.checked_sub(k) } else { Some(d) }
        .ok_or_else(|| Error::Shape("feedback needs D_in >= K".into()))?;
    for (b, m) in inputs.iter().enumerate() {
        if m.rows() != steps || m.cols() != base_cols {
            return Err(Error::Shape(format!(
                "sequence {b} is {}x{}, expected {steps}x{base_cols} for model input width {d}",
                m.rows(),
                m.cols()
            )));
        }
        if !m.all_finite() {
            return Err(Error::Data(format!("sequence {b} has non-finite inputs")));
        }
    }
    if steps == 0 {
        return Err(Error::Shape("sequences must have at least one step".into()));
    }
    if let Some(fb) = feedback {
        if fb.observed.len() != steps * k * batch
            || fb.use_observed.len() != steps * batch
            || fb.initial_prediction.len() != k * batch
        {
            return Err(Error::Shape("feedback arrays do not match the batch".into()));
        }
    }

    let hb = hsz * batch;
    let mut x = vec![0.0; steps * d * batch];
    let mut h = vec![0.0; (steps + 1) * hb];
    let mut z = vec![0.0; steps * hb];
    let mut r = vec![0.0; steps * hb];
    let mut n = vec![0.0; steps * hb];
    let mut y = vec![0.0; steps * k * batch];

    if let Some(h0) = h0 {
        if h0.len() != batch {
            return Err(Error::Shape(format!("{} initial states for {batch} sequences", h0.len())));
        }
        for (b, s) in h0.iter().enumerate() {
            if s.len() != hsz {
                return Err(Error::Shape(format!("initial state {b} has {} units, expected {hsz}", s.len())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "initial state", step: 0 });
            }
            for (i, &v) in s.iter().enumerate() {
                h[i * batch + b] = v;
            }
        }
    }

    // Static input channels for every step.
    for (b, m) in inputs.iter().enumerate() {
        for t in 0..steps {
            let row = m.row(t);
            let xt = &mut x[t * d * batch..(t + 1) * d * batch];
            for (i, &v) in row.iter().enumerate() {
                xt[i * batch + b] = v;
            }
        }
    }

    let w_z = params.block(Block::InputUpdate);
    let w_r = params.block(Block::InputReset);
    let w_n = params.block(Block::InputCandidate);
    let u_z = params.block(Block::RecurrentUpdate);
    let u_r = params.block(Block::RecurrentReset);
    let u_n = params.block(Block::RecurrentCandidate);
    let b_z = params.block(Block::BiasUpdate);
    let b_r = params.block(Block::BiasReset);
    let b_n = params.block(Block::BiasCandidate);
    let v = params.block(Block::HeadWeight);
    let c = params.block(Block::HeadBias);

    let mut rh = vec![0.0; hb];
    for t in 0..steps {
        if let Some(fb) = feedback {
            let xt = &mut x[t * d * batch..(t + 1) * d * batch];
            for b in 0..batch {
                for j in 0..k {
                    let val = if fb.use_observed[t * batch + b] {
                        fb.observed[t * k * batch + j * batch + b]
                    } else if t == 0 {
                        fb.initial_prediction[j * batch + b]
                    } else {
                        y[(t - 1) * k * batch + j * batch + b]
                    };
                    xt[(base_cols + j) * batch + b] = val;
                }
            }
        }

        let xt = &x[t * d * batch..(t + 1) * d * batch];
        let (h_done, h_rest) = h.split_at_mut((t + 1) * hb);
        let h_prev = &h_done[t * hb..];
        let h_next = &mut h_rest[..hb];
        let zt = &mut z[t * hb..(t + 1) * hb];
        let rt = &mut r[t * hb..(t + 1) * hb];
        let nt = &mut n[t * hb..(t + 1) * hb];

        kernel::broadcast_rows(b_z, batch, zt);
        kernel::gemm_acc(w_z, hsz, d, xt, batch, zt);
        kernel::gemm_acc(u_z, hsz, hsz, h_prev, batch, zt);
        zt.iter_mut().for_each(|a| *a = kernel::sigmoid(*a));

        kernel::broadcast_rows(b_r, batch, rt);
        kernel::gemm_acc(w_r, hsz, d, xt, batch, rt);
        kernel::gemm_acc(u_r, hsz, hsz, h_prev, batch, rt);
        rt.iter_mut().for_each(|a| *a = kernel::sigmoid(*a));

        for ((o, &ri), &hi) in rh.iter_mut().zip(rt.iter()).zip(h_prev) {
            *o = ri * hi;
        }
        kernel::broadcast_rows(b_n, batch, nt);
        kernel::gemm_acc(w_n, hsz, d, xt, batch, nt);
        kernel::gemm_acc(u_n, hsz, hsz, &rh, batch, nt);
        nt.iter_mut().for_each(|a| *a = a.tanh());

        let mut finite = true;
        for j in 0..hb {
            let hv = (1.0 - zt[j]) * h_prev[j] + zt[j] * nt[j];
            finite &= hv.is_finite();
            h_next[j] = hv;
        }
        if !finite {
            return Err(Error::NonFinite { what: "hidden state", step: t + 1 });
        }

        let yt = &mut y[t * k * batch..(t + 1) * k * batch];
        kernel::broadcast_rows(c, batch, yt);
        kernel::gemm_acc(v, k, hsz, h_next, batch, yt);
        if yt.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "output", step: t + 1 });
        }
    }

    Ok(ForwardTrace {
        dims,
        batch,
        steps,
        x,
        h,
        z,
        r,
        n,
        y,
    })
}

/// Mean squared error over all `W x K` entries and its gradient with
/// respect to the predictions.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    let count = pred.as_slice().len() as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut sum = 0.0;
    for ((g, p), t) in grad.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(target.as_slice()) {
        let e = p - t;
        sum += e * e;
        *g = 2.0 * e / count;
    }
    Ok((sum / count, grad))
}

/// Exact gradients of the batch MSE (mean over all `B x W x K` entries)
/// with respect to every parameter. Returns `(gradients, loss)`.
pub fn gru_backward(params: &GruParams, trace: &ForwardTrace, targets: &[&Matrix]) -> Result<(GruParams, f64)> {
    let dims = params.dims();
    if dims != trace.dims {
        return Err(Error::Shape(format!(
            "trace was produced for {:?}, parameters are {dims:?}",
            trace.dims
        )));
    }
    let (hsz, d, k) = (dims.hidden, dims.input, dims.output);
    let (batch, steps) = (trace.batch, trace.steps);
    if targets.len() != batch {
        return Err(Error::Shape(format!("{} targets for a batch of {batch}", targets.len())));
    }
    for (b, m) in targets.iter().enumerate() {
        if m.shape() != (steps, k) {
            return Err(Error::Shape(format!(
                "target {b} is {:?}, expected ({steps}, {k})",
                m.shape()
            )));
        }
    }

    let hb = hsz * batch;
    let kb = k * batch;
    let count = (batch * steps * k) as f64;
    let mut grads = GruParams::zeros(dims);

    // Output errors, unit-major per step.
    let mut dy = vec![0.0; steps * kb];
    let mut loss = 0.0;
    for (b, m) in targets.iter().enumerate() {
        for t in 0..steps {
            for j in 0..k {
                let idx = t * kb + j * batch + b;
                let e = trace.y[idx] - m.get(t, j);
                loss += e * e;
                dy[idx] = 2.0 * e / count;
            }
        }
    }
    loss /= count;

    let u_z = params.block(Block::RecurrentUpdate);
    let u_r = params.block(Block::RecurrentReset);
    let u_n = params.block(Block::RecurrentCandidate);
    let v = params.block(Block::HeadWeight);

    let mut g_wz = vec![0.0; hsz * d];
    let mut g_wr = vec![0.0; hsz * d];
    let mut g_wn = vec![0.0; hsz * d];
    let mut g_uz = vec![0.0; hsz * hsz];
    let mut g_ur = vec![0.0; hsz * hsz];
    let mut g_un = vec![0.0; hsz * hsz];
    let mut g_bz = vec![0.0; hsz];
    let mut g_br = vec![0.0; hsz];
    let mut g_bn = vec![0.0; hsz];
    let mut g_v = vec![0.0; k * hsz];
    let mut g_c = vec![0.0; k];

    let mut dh_next = vec![0.0; hb];
    let mut dh = vec![0.0; hb];
    let mut da_z = vec![0.0; hb];
    let mut da_r = vec![0.0; hb];
    let mut da_n = vec![0.0; hb];
    let mut drh = vec![0.0; hb];
    let mut rh = vec![0.0; hb];

    for t in (0..steps).rev() {
        let xt = &trace.x[t * d * batch..(t + 1) * d * batch];
        let h_prev = &trace.h[t * hb..(t + 1) * hb];
        let h_cur = &trace.h[(t + 1) * hb..(t + 2) * hb];
        let zt = &trace.z[t * hb..(t + 1) * hb];
        let rt = &trace.r[t * hb..(t + 1) * hb];
        let nt = &trace.n[t * hb..(t + 1) * hb];
        let dyt = &dy[t * kb..(t + 1) * kb];

        kernel::outer_acc(dyt, k, h_cur, hsz, batch, &mut g_v);
        kernel::row_sum_acc(dyt, k, batch, &mut g_c);

        dh.copy_from_slice(&dh_next);
        kernel::gemm_t_acc(v, k, hsz, dyt, batch, &mut dh);

        for j in 0..hb {
            let (zj, nj, hp) = (zt[j], nt[j], h_prev[j]);
            da_z[j] = dh[j] * (nj - hp) * zj * (1.0 - zj);
            da_n[j] = dh[j] * zj * (1.0 - nj * nj);
            dh_next[j] = dh[j] * (1.0 - zj);
            rh[j] = rt[j] * hp;
        }

        kernel::outer_acc(&da_n, hsz, xt, d, batch, &mut g_wn);
        kernel::outer_acc(&da_n, hsz, &rh, hsz, batch, &mut g_un);
        kernel::row_sum_acc(&da_n, hsz, batch, &mut g_bn);
        drh.iter_mut().for_each(|v| *v = 0.0);
        kernel::gemm_t_acc(u_n, hsz, hsz, &da_n, batch, &mut drh);

        for j in 0..hb {
            let rj = rt[j];
            da_r[j] = drh[j] * h_prev[j] * rj * (1.0 - rj);
            dh_next[j] += drh[j] * rj;
        }

        kernel::outer_acc(&da_r, hsz, xt, d, batch, &mut g_wr);
        kernel::outer_acc(&da_r, hsz, h_prev, hsz, batch, &mut g_ur);
        kernel::row_sum_acc(&da_r, hsz, batch, &mut g_br);
        kernel::outer_acc(&da_z, hsz, xt, d, batch, &mut g_wz);
        kernel::outer_acc(&da_z, hsz, h_prev, hsz, batch, &mut g_uz);
        kernel::row_sum_acc(&da_z, hsz, batch, &mut g_bz);

        kernel::gemm_t_acc(u_r, hsz, hsz, &da_r, batch, &mut dh_next);
        kernel::gemm_t_acc(u_z, hsz, hsz, &da_z, batch, &mut dh_next);
    }
    // dh_next now holds d(loss)/d(h0); the initial state is detached, so it
    // is dropped here.

    for (block, g) in [
        (Block::InputUpdate, g_wz),
        (Block::InputReset, g_wr),
        (Block::InputCandidate, g_wn),
        (Block::RecurrentUpdate, g_uz),
        (Block::RecurrentReset, g_ur),
        (Block::RecurrentCandidate, g_un),
        (Block::BiasUpdate, g_bz),
        (Block::BiasReset, g_br),
        (Block::BiasCandidate, g_bn),
        (Block::HeadWeight, g_v),
        (Block::HeadBias, g_c),
    ] {
        grads.block_mut(block).copy_from_slice(&g);
    }
    Ok((grads, loss))
}
