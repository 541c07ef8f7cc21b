//! Training strategies sharing one GRU and one Adam optimizer.
//!
//! | strategy | batching | initial hidden state | extra inputs |
//! |----------|----------|----------------------|--------------|
//! | RMB  | shuffled | zero | none |
//! | SMB  | parallel temporal streams | last state of the slot's previous batch | none |
//! | SSMB | one sequence at a time, in order | last state of the previous sequence | none |
//! | TF   | shuffled | zero | observed `y_{t-1}` |
//! | SSPL | shuffled | zero | observed or predicted `y_{t-1}`, sampled per step |
//! | CMB  | shuffled | zero | `y0` replicated over the window |
//! | MPTT | shuffled | message read from the state-map | none |
//!
//! Every boundary state is a constant: gradients never cross sequences.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::inference::{self, InferenceStrategy};
use crate::kernel::Matrix;
use crate::memory::{self, KeyMap, MessageKeeper, SequenceId, StateMap};
use crate::model::{adam_step, forward_batch, gru_backward, init_gru, AdamState, Feedback, GruParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Rmb,
    Smb,
    Ssmb,
    Tf,
    Sspl,
    Cmb,
    Mptt,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Rmb,
        Strategy::Smb,
        Strategy::Ssmb,
        Strategy::Tf,
        Strategy::Sspl,
        Strategy::Cmb,
        Strategy::Mptt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rmb => "RMB",
            Strategy::Smb => "SMB",
            Strategy::Ssmb => "SSMB",
            Strategy::Tf => "TF",
            Strategy::Sspl => "SSPL",
            Strategy::Cmb => "CMB",
            Strategy::Mptt => "MPTT",
        }
    }

    /// Whether the model also consumes `K` response channels.
    pub fn uses_responses(self) -> bool {
        matches!(self, Strategy::Tf | Strategy::Sspl | Strategy::Cmb)
    }

    /// Whether the strategy needs non-overlapping adjacent sequences.
    pub fn needs_adjacent(self) -> bool {
        matches!(self, Strategy::Smb | Strategy::Ssmb)
    }

    /// Model input width for `drivers` driver channels and `responses`
    /// response channels.
    pub fn input_width(self, drivers: usize, responses: usize) -> usize {
        if self.uses_responses() {
            drivers + responses
        } else {
            drivers
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown training strategy {s:?}")))
    }
}

/// Parameters of the inverse-sigmoid sampling schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsplSchedule {
    pub alpha: f64,
    pub beta: f64,
    pub decay_epochs: usize,
}

impl Default for SsplSchedule {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 0.5, decay_epochs: 400 }
    }
}

impl SsplSchedule {
    /// Probability of feeding the observed response at epoch `epoch`.
    /// A zero-length decay means predictions are fed from the start.
    pub fn rate(&self, epoch: usize) -> Result<f64> {
        if self.decay_epochs == 0 {
            return Ok(0.0);
        }
        sspl_rate(epoch, self.alpha, self.beta, self.decay_epochs as f64)
    }
}

/// `ε = 1 / (1 + exp(α (e / E_decay - β)))` for `e <= E_decay`, else 0.
pub fn sspl_rate(epoch: usize, alpha: f64, beta: f64, decay_epochs: f64) -> Result<f64> {
    if !(decay_epochs > 0.0) {
        return Err(Error::Config(format!("decay length must be positive, got {decay_epochs}")));
    }
    if epoch == 0 {
        return Err(Error::Config("epochs are counted from 1".into()));
    }
    let e = epoch as f64;
    if e > decay_epochs {
        return Ok(0.0);
    }
    Ok(1.0 / (1.0 + (alpha * (e / decay_epochs - beta)).exp()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Message keeper, MPTT only.
    pub delta: Option<u8>,
    pub window: usize,
    pub stride: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub sspl: SsplSchedule,
    /// Evaluate validation RMSE every this many epochs (0 disables).
    pub val_every: usize,
    /// Return the parameters with the lowest validation RMSE instead of
    /// the last ones.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Rmb,
            delta: None,
            window: 366,
            stride: 183,
            hidden: 32,
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 500,
            seed: 0,
            sspl: SsplSchedule::default(),
            val_every: 0,
            select_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.strategy, self.delta) {
            (Strategy::Mptt, None) => {
                return Err(Error::Config("MPTT needs a message keeper delta (0 or 1)".into()))
            }
            (Strategy::Mptt, Some(d)) => {
                MessageKeeper::new(d)?;
            }
            (s, Some(_)) => {
                return Err(Error::Config(format!("delta only applies to MPTT, not {s}")));
            }
            _ => {}
        }
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("hidden size and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.window < 2 || self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "invalid window/stride {}/{}",
                self.window, self.stride
            )));
        }
        if self.strategy.needs_adjacent() && self.stride != self.window {
            return Err(Error::Config(format!(
                "{} trains on non-overlapping sequences; stride must equal window ({})",
                self.strategy, self.window
            )));
        }
        if self.select_best && self.val_every == 0 {
            return Err(Error::Config("select_best needs val_every > 0".into()));
        }
        Ok(())
    }

    pub fn keeper(&self) -> Option<MessageKeeper> {
        self.delta.and_then(|d| MessageKeeper::new(d).ok())
    }

    /// Inference strategy used for validation.
    pub fn validation_inference(&self) -> InferenceStrategy {
        match self.strategy {
            Strategy::Rmb => InferenceStrategy::Iif,
            Strategy::Tf | Strategy::Sspl => InferenceStrategy::Tfif,
            Strategy::Cmb => InferenceStrategy::Scif,
            Strategy::Smb | Strategy::Ssmb | Strategy::Mptt => InferenceStrategy::Ssif,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
    pub val_rmse: Option<f64>,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,loss,seconds,val_rmse";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        match self.val_rmse {
            Some(v) => format!("{},{},{},{}", self.epoch, self.loss, self.seconds, v),
            None => format!("{},{},{},", self.epoch, self.loss, self.seconds),
        }
    }
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait TrainObserver {
    /// After every optimizer step.
    fn on_batch(&mut self, _epoch: usize, _batch: usize, _ids: &[SequenceId], _loss: f64) {}
    /// MPTT only: after the last write of an epoch, before propagation.
    fn on_writes_complete(&mut self, _epoch: usize, _state: &StateMap) {}
    /// MPTT only: after propagation.
    fn on_epoch_state(&mut self, _epoch: usize, _state: &StateMap) {}
    fn on_epoch(&mut self, _log: &EpochLog) {}
}

impl TrainObserver for () {}

/// Collects per-batch losses, handy for comparing strategies.
#[derive(Clone, Debug, Default)]
pub struct BatchRecorder {
    pub batches: Vec<(usize, Vec<SequenceId>, f64)>,
}

impl TrainObserver for BatchRecorder {
    fn on_batch(&mut self, epoch: usize, _batch: usize, ids: &[SequenceId], loss: f64) {
        self.batches.push((epoch, ids.to_vec(), loss));
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: GruParams,
    pub logs: Vec<EpochLog>,
    /// Final state-map, MPTT only.
    pub state_map: Option<StateMap>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
}

pub fn train(config: &TrainConfig, train_seqs: &[Sequence], val_seqs: &[Sequence]) -> Result<TrainOutcome> {
    train_observed(config, train_seqs, val_seqs, &mut ())
}

/// [`train`] with an observer.
pub fn train_observed(
    config: &TrainConfig,
    train_seqs: &[Sequence],
    val_seqs: &[Sequence],
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    let seqs = sorted(train_seqs)?;
    let (d, k) = (seqs[0].inputs.cols(), seqs[0].targets.cols());
    for s in &seqs {
        if s.window() != config.window || s.inputs.cols() != d || s.targets.cols() != k {
            return Err(Error::Shape(format!(
                "sequence {} is {}x{} / {}x{}, expected window {} with {d} drivers and {k} responses",
                s.id,
                s.inputs.rows(),
                s.inputs.cols(),
                s.targets.rows(),
                s.targets.cols(),
                config.window
            )));
        }
    }
    if config.strategy.needs_adjacent() {
        check_no_overlap(&seqs)?;
    }
    if config.strategy == Strategy::Smb && config.batch_size > seqs.len() {
        return Err(Error::Config(format!(
            "SMB batch size {} exceeds the {} training sequences",
            config.batch_size,
            seqs.len()
        )));
    }

    let width = config.strategy.input_width(d, k);
    let mut params = init_gru(config.hidden, width, k, config.seed)?;
    let mut adam = AdamState::for_params(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed);
    mask_rng.set_stream(1);

    let mut mptt = match config.strategy {
        Strategy::Mptt => {
            let ids: Vec<SequenceId> = seqs.iter().map(|s| s.id.clone()).collect();
            let keeper = config.keeper().expect("validated");
            Some((
                memory::build_key_map(&ids, config.window)?,
                memory::init_state_map(&ids, config.hidden, keeper)?,
            ))
        }
        _ => None,
    };
    let val_inference = config.validation_inference();

    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, GruParams)> = None;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut ctx = EpochCtx {
            params: &mut params,
            adam: &mut adam,
            lr: config.learning_rate,
            epoch,
            observer: &mut *observer,
            loss_sum: 0.0,
            loss_count: 0,
        };
        match config.strategy {
            Strategy::Rmb => epoch_rmb(&mut ctx, &seqs, config.batch_size, &mut rng)?,
            Strategy::Cmb => epoch_cmb(&mut ctx, &seqs, config.batch_size, &mut rng)?,
            Strategy::Tf => epoch_sspl(&mut ctx, &seqs, config.batch_size, 1.0, &mut rng, &mut mask_rng)?,
            Strategy::Sspl => {
                let eps = config.sspl.rate(epoch)?;
                epoch_sspl(&mut ctx, &seqs, config.batch_size, eps, &mut rng, &mut mask_rng)?
            }
            Strategy::Smb => epoch_smb(&mut ctx, &seqs, config.batch_size)?,
            Strategy::Ssmb => epoch_ssmb(&mut ctx, &seqs, config.batch_size)?,
            Strategy::Mptt => {
                let (key_map, state_map) = mptt.as_mut().expect("MPTT state");
                epoch_mptt(&mut ctx, &seqs, key_map, state_map, config.batch_size, &mut rng)?
            }
        }
        let loss = ctx.loss_sum / ctx.loss_count as f64;
        let seconds = started.elapsed().as_secs_f64();

        let val_rmse = if config.val_every > 0 && epoch % config.val_every == 0 && !val_seqs.is_empty() {
            let preds = inference::infer(val_inference, &params, val_seqs)?;
            Some(preds.rmse_against(val_seqs)?)
        } else {
            None
        };
        if config.select_best {
            if let Some(v) = val_rmse {
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, epoch, params.clone()));
                }
            }
        }
        let log = EpochLog { epoch, loss, seconds, val_rmse };
        log::debug!("{} epoch {epoch}: loss {loss:.6} in {seconds:.4}s", config.strategy);
        observer.on_epoch(&log);
        logs.push(log);
    }

    let (params, selected_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, config.epochs),
    };
    Ok(TrainOutcome {
        params,
        logs,
        state_map: mptt.map(|(_, s)| s),
        selected_epoch,
    })
}

fn sorted(seqs: &[Sequence]) -> Result<Vec<&Sequence>> {
    if seqs.is_empty() {
        return Err(Error::Data("no sequences".into()));
    }
    let mut v: Vec<&Sequence> = seqs.iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(v)
}

fn check_no_overlap(seqs: &[&Sequence]) -> Result<()> {
    for pair in seqs.windows(2) {
        let (a, b) = (&pair[0].id, &pair[1].id);
        if a.entity == b.entity && b.initial_step < a.initial_step + pair[0].window() {
            return Err(Error::Config(format!(
                "sequences {a} and {b} overlap; stateful training needs non-overlapping sequences"
            )));
        }
    }
    Ok(())
}

/// Whether `next` starts exactly where `prev` ends.
fn adjacent(prev: &Sequence, next: &Sequence) -> bool {
    prev.id.entity == next.id.entity && next.initial_step() == prev.initial_step() + prev.window()
}

/// Per-epoch mutable training state.
pub struct EpochCtx<'a> {
    pub params: &'a mut GruParams,
    pub adam: &'a mut AdamState,
    pub lr: f64,
    pub epoch: usize,
    pub observer: &'a mut dyn TrainObserver,
    loss_sum: f64,
    loss_count: usize,
}

impl<'a> EpochCtx<'a> {
    pub fn new(
        params: &'a mut GruParams,
        adam: &'a mut AdamState,
        lr: f64,
        epoch: usize,
        observer: &'a mut dyn TrainObserver,
    ) -> Self {
        Self { params, adam, lr, epoch, observer, loss_sum: 0.0, loss_count: 0 }
    }

    /// Mean loss over the sequences seen so far this epoch.
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.loss_count as f64
    }

    fn record(&mut self, batch: usize, ids: &[SequenceId], loss: f64) {
        self.loss_sum += loss * ids.len() as f64;
        self.loss_count += ids.len();
        self.observer.on_batch(self.epoch, batch, ids, loss);
    }

    /// Forward, backward and one Adam step on one batch. Returns the trace.
    fn step(
        &mut self,
        batch: usize,
        members: &[&Sequence],
        inputs: &[&Matrix],
        h0: Option<&[Vec<f64>]>,
        feedback: Option<&Feedback>,
    ) -> Result<crate::model::ForwardTrace> {
        let trace = forward_batch(self.params, inputs, h0, feedback)?;
        let targets: Vec<&Matrix> = members.iter().map(|s| &s.targets).collect();
        let (grads, loss) = gru_backward(self.params, &trace, &targets)?;
        adam_step(self.params, &grads, self.adam, self.lr)?;
        let ids: Vec<SequenceId> = members.iter().map(|s| s.id.clone()).collect();
        self.record(batch, &ids, loss);
        Ok(trace)
    }
}

/// Shuffles sequence indices, cuts them into batches of `batch_size` and
/// sorts each batch by id.
pub fn random_partition(count: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| {
            let mut b = c.to_vec();
            b.sort_unstable();
            b
        })
        .collect()
}

pub fn epoch_rmb(ctx: &mut EpochCtx<'_>, seqs: &[&Sequence], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    for (bi, batch) in random_partition(seqs.len(), batch_size, rng).into_iter().enumerate() {
        let members: Vec<&Sequence> = batch.iter().map(|&i| seqs[i]).collect();
        let inputs: Vec<&Matrix> = members.iter().map(|s| &s.inputs).collect();
        ctx.step(bi, &members, &inputs, None, None)?;
    }
    Ok(())
}

/// RMB partitioning with messages from the state-map as initial states.
/// After each step the batch writes its detached hidden states to every
/// downstream sequence it covers; the epoch ends with propagation.
pub fn epoch_mptt(
    ctx: &mut EpochCtx<'_>,
    seqs: &[&Sequence],
    key_map: &KeyMap,
    state_map: &mut StateMap,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for (bi, batch) in random_partition(seqs.len(), batch_size, rng).into_iter().enumerate() {
        let members: Vec<&Sequence> = batch.iter().map(|&i| seqs[i]).collect();
        let inputs: Vec<&Matrix> = members.iter().map(|s| &s.inputs).collect();
        let h0: Vec<Vec<f64>> = members.iter().map(|s| state_map.read(&s.id)).collect::<Result<_>>()?;
        let trace = ctx.step(bi, &members, &inputs, Some(&h0), None)?;
        for (b, s) in members.iter().enumerate() {
            let keys = key_map
                .get(&s.id)
                .ok_or_else(|| Error::Memory(format!("{} missing from the key-map", s.id)))?;
            for j in keys {
                let offset = j.initial_step - s.initial_step();
                if offset == 0 || offset > s.window() {
                    return Err(Error::Memory(format!(
                        "key {j} of {} points at local step {offset}, outside 1..={}",
                        s.id,
                        s.window()
                    )));
                }
                state_map.write(j, &trace.hidden(b, offset))?;
            }
        }
    }
    ctx.observer.on_writes_complete(ctx.epoch, state_map);
    state_map.propagate_epoch();
    ctx.observer.on_epoch_state(ctx.epoch, state_map);
    Ok(())
}

/// Batch layout for stateful mini-batches over `m` ordered sequences:
/// a leading batch with the first `m mod B` sequences, then `m / B`
/// batches whose slot `s` walks the `s`-th contiguous chunk.
pub fn smb_layout(m: usize, batch_size: usize) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    if batch_size == 0 || batch_size > m {
        return Err(Error::Config(format!(
            "SMB batch size {batch_size} must be between 1 and the {m} sequences"
        )));
    }
    let rem = m % batch_size;
    let chunk = (m - rem) / batch_size;
    let leading: Vec<usize> = (0..rem).collect();
    let batches = (0..chunk)
        .map(|k| (0..batch_size).map(|s| rem + s * chunk + k).collect())
        .collect();
    Ok((leading, batches))
}

pub fn epoch_smb(ctx: &mut EpochCtx<'_>, seqs: &[&Sequence], batch_size: usize) -> Result<()> {
    let (leading, batches) = smb_layout(seqs.len(), batch_size)?;
    let mut bi = 0;
    if !leading.is_empty() {
        let members: Vec<&Sequence> = leading.iter().map(|&i| seqs[i]).collect();
        let inputs: Vec<&Matrix> = members.iter().map(|s| &s.inputs).collect();
        ctx.step(bi, &members, &inputs, None, None)?;
        bi += 1;
    }
    let hidden = ctx.params.dims().hidden;
    let mut carried: Vec<Vec<f64>> = vec![vec![0.0; hidden]; batch_size];
    let mut prev: Option<&Vec<usize>> = None;
    for batch in &batches {
        let members: Vec<&Sequence> = batch.iter().map(|&i| seqs[i]).collect();
        let h0: Vec<Vec<f64>> = (0..batch.len())
            .map(|slot| match prev {
                Some(p) if adjacent(seqs[p[slot]], members[slot]) => carried[slot].clone(),
                _ => vec![0.0; hidden],
            })
            .collect();
        let inputs: Vec<&Matrix> = members.iter().map(|s| &s.inputs).collect();
        let trace = ctx.step(bi, &members, &inputs, Some(&h0), None)?;
        for (slot, c) in carried.iter_mut().enumerate() {
            *c = trace.hidden(slot, members[slot].window());
        }
        prev = Some(batch);
        bi += 1;
    }
    Ok(())
}

/// Sequences run one by one in temporal order, each starting from the
/// previous one's last state when adjacent. Gradients are averaged over
/// `batch_size` consecutive sequences before each step.
pub fn epoch_ssmb(ctx: &mut EpochCtx<'_>, seqs: &[&Sequence], batch_size: usize) -> Result<()> {
    let hidden = ctx.params.dims().hidden;
    let mut carried = vec![0.0; hidden];
    let mut prev: Option<&Sequence> = None;
    for (bi, group) in seqs.chunks(batch_size).enumerate() {
        let mut grads = GruParams::zeros(ctx.params.dims());
        let mut loss = 0.0;
        for s in group {
            let h0 = match prev {
                Some(p) if adjacent(p, s) => carried.clone(),
                _ => vec![0.0; hidden],
            };
            let trace = forward_batch(ctx.params, &[&s.inputs], Some(&[h0]), None)?;
            let (g, l) = gru_backward(ctx.params, &trace, &[&s.targets])?;
            grads.add_scaled(&g, 1.0 / group.len() as f64)?;
            loss += l / group.len() as f64;
            carried = trace.hidden(0, s.window());
            prev = Some(s);
        }
        adam_step(ctx.params, &grads, ctx.adam, ctx.lr)?;
        let ids: Vec<SequenceId> = group.iter().map(|s| s.id.clone()).collect();
        ctx.record(bi, &ids, loss);
    }
    Ok(())
}

/// `[x_t ; y_{t-1}]` with observed responses, `y_0` at the first step.
pub fn augment_tf(inputs: &Matrix, responses: &Matrix, y0: &[f64]) -> Result<Matrix> {
    if inputs.rows() != responses.rows() || responses.cols() != y0.len() {
        return Err(Error::Shape(format!(
            "inputs {:?}, responses {:?}, y0 of {}",
            inputs.shape(),
            responses.shape(),
            y0.len()
        )));
    }
    let mut lagged = Matrix::zeros(responses.rows(), responses.cols());
    for t in 0..responses.rows() {
        let src = if t == 0 { y0 } else { responses.row(t - 1) };
        lagged.row_mut(t).copy_from_slice(src);
    }
    inputs.hcat(&lagged)
}

/// `[x_t ; y0]` at every step.
pub fn augment_cmb(inputs: &Matrix, y0: &[f64]) -> Result<Matrix> {
    let rep = Matrix::from_rows(&vec![y0.to_vec(); inputs.rows()])?;
    inputs.hcat(&rep)
}

/// Feedback arrays for a batch: `y_{t-1}` observed where `mask[t][b]`
/// holds, otherwise the model's previous prediction.
pub fn teacher_feedback(members: &[&Sequence], mask: Vec<bool>) -> Feedback {
    let batch = members.len();
    let (w, k) = members[0].targets.shape();
    let mut observed = vec![0.0; w * k * batch];
    let mut initial_prediction = vec![0.0; k * batch];
    for (b, s) in members.iter().enumerate() {
        for t in 0..w {
            let src = if t == 0 { &s.y0[..] } else { s.targets.row(t - 1) };
            for j in 0..k {
                observed[t * k * batch + j * batch + b] = src[j];
            }
        }
        for j in 0..k {
            initial_prediction[j * batch + b] = s.y0[j];
        }
    }
    Feedback { observed, use_observed: mask, initial_prediction }
}

/// Per-step mask: the first step always sees the observed `y0`, later
/// steps see the observation with probability `eps`.
pub fn sample_mask(steps: usize, batch: usize, eps: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask = vec![true; steps * batch];
    for m in mask.iter_mut().skip(batch) {
        *m = rng.random::<f64>() < eps;
    }
    mask
}

/// Scheduled sampling; `eps = 1` is plain teacher forcing.
pub fn epoch_sspl(
    ctx: &mut EpochCtx<'_>,
    seqs: &[&Sequence],
    batch_size: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
    mask_rng: &mut ChaCha8Rng,
) -> Result<()> {
    for (bi, batch) in random_partition(seqs.len(), batch_size, rng).into_iter().enumerate() {
        let members: Vec<&Sequence> = batch.iter().map(|&i| seqs[i]).collect();
        let mask = sample_mask(members[0].window(), members.len(), eps, mask_rng);
        let fb = teacher_feedback(&members, mask);
        let inputs: Vec<&Matrix> = members.iter().map(|s| &s.inputs).collect();
        ctx.step(bi, &members, &inputs, None, Some(&fb))?;
    }
    Ok(())
}

pub fn epoch_cmb(ctx: &mut EpochCtx<'_>, seqs: &[&Sequence], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    for (bi, batch) in random_partition(seqs.len(), batch_size, rng).into_iter().enumerate() {
        let members: Vec<&Sequence> = batch.iter().map(|&i| seqs[i]).collect();
        let augmented: Vec<Matrix> = members
            .iter()
            .map(|s| augment_cmb(&s.inputs, &s.y0))
            .collect::<Result<_>>()?;
        let inputs: Vec<&Matrix> = augmented.iter().collect();
        ctx.step(bi, &members, &inputs, None, None)?;
    }
    Ok(())
}

/// Number of keys each sequence receives, for checking write coverage.
pub fn expected_write_counts(key_map: &KeyMap) -> BTreeMap<SequenceId, usize> {
    key_map.in_degree()
}
