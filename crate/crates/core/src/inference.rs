//! Inference strategies and reconstruction of continuous series from
//! overlapping window predictions.
//!
//! * IIF: every sequence from the zero state.
//! * SSIF: hidden state handed from each sequence to its successor.
//! * TFIF: previous prediction fed back as input, hidden state handed on.
//! * SCIF: previous sequence's prediction replicated as the condition,
//!   hidden state reset to zero.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::kernel::Matrix;
use crate::memory::SequenceId;
use crate::model::{forward_batch, Feedback, ForwardTrace, GruParams};
use crate::strategies::augment_cmb;

const IIF_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceStrategy {
    Iif,
    Ssif,
    Tfif,
    Scif,
}

impl InferenceStrategy {
    pub const ALL: [InferenceStrategy; 4] = [
        InferenceStrategy::Iif,
        InferenceStrategy::Ssif,
        InferenceStrategy::Tfif,
        InferenceStrategy::Scif,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InferenceStrategy::Iif => "IIF",
            InferenceStrategy::Ssif => "SSIF",
            InferenceStrategy::Tfif => "TFIF",
            InferenceStrategy::Scif => "SCIF",
        }
    }

    pub fn uses_responses(self) -> bool {
        matches!(self, InferenceStrategy::Tfif | InferenceStrategy::Scif)
    }
}

impl fmt::Display for InferenceStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InferenceStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        InferenceStrategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown inference strategy {s:?}")))
    }
}

/// `W x K` predictions per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub strategy: InferenceStrategy,
    pub predictions: BTreeMap<SequenceId, Matrix>,
}

impl PredictionSet {
    pub fn new(strategy: InferenceStrategy) -> Self {
        Self { strategy, predictions: BTreeMap::new() }
    }

    /// Observed targets wrapped as predictions.
    pub fn from_targets(strategy: InferenceStrategy, seqs: &[Sequence]) -> Self {
        Self {
            strategy,
            predictions: seqs.iter().map(|s| (s.id.clone(), s.targets.clone())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn get(&self, id: &SequenceId) -> Option<&Matrix> {
        self.predictions.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SequenceId, &Matrix)> {
        self.predictions.iter()
    }

    /// Applies `f` to every prediction matrix (e.g. denormalization).
    pub fn map(&self, f: impl Fn(&Matrix) -> Matrix) -> Self {
        Self {
            strategy: self.strategy,
            predictions: self.predictions.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
        }
    }

    /// Pooled RMSE against the sequences' targets.
    pub fn rmse_against(&self, seqs: &[Sequence]) -> Result<f64> {
        let mut sse = 0.0;
        let mut n = 0usize;
        for s in seqs {
            let p = self
                .get(&s.id)
                .ok_or_else(|| Error::Data(format!("no prediction for {}", s.id)))?;
            if p.shape() != s.targets.shape() {
                return Err(Error::Shape(format!("prediction for {} has shape {:?}", s.id, p.shape())));
            }
            for (a, b) in p.as_slice().iter().zip(s.targets.as_slice()) {
                sse += (a - b) * (a - b);
            }
            n += p.as_slice().len();
        }
        if n == 0 {
            return Err(Error::Data("no predictions to score".into()));
        }
        Ok((sse / n as f64).sqrt())
    }

    /// Writes `entity,T,step,channel,y_pred[,y_true]` rows, `step` being the
    /// 1-based local step.
    pub fn write_csv<W: Write>(&self, truth: Option<&PredictionSet>, out: &mut W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if truth.is_some() {
            w.write_record(["entity", "T", "step", "channel", "y_pred", "y_true"])?;
        } else {
            w.write_record(["entity", "T", "step", "channel", "y_pred"])?;
        }
        for (id, p) in &self.predictions {
            let t = match truth {
                Some(set) => Some(
                    set.get(id)
                        .ok_or_else(|| Error::Data(format!("no truth for {id}")))?,
                ),
                None => None,
            };
            for step in 0..p.rows() {
                for ch in 0..p.cols() {
                    let mut rec = vec![
                        id.entity.to_string(),
                        id.initial_step.to_string(),
                        (step + 1).to_string(),
                        ch.to_string(),
                        p.get(step, ch).to_string(),
                    ];
                    if let Some(t) = t {
                        rec.push(t.get(step, ch).to_string());
                    }
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("predictions", e))?;
        Ok(())
    }
}

pub fn infer(strategy: InferenceStrategy, params: &GruParams, seqs: &[Sequence]) -> Result<PredictionSet> {
    match strategy {
        InferenceStrategy::Iif => infer_iif(params, seqs),
        InferenceStrategy::Ssif => infer_ssif(params, seqs),
        InferenceStrategy::Tfif => infer_tfif(params, seqs),
        InferenceStrategy::Scif => infer_scif(params, seqs),
    }
}

fn check_width(params: &GruParams, seqs: &[Sequence], strategy: InferenceStrategy) -> Result<()> {
    let dims = params.dims();
    for s in seqs {
        let expected = if strategy.uses_responses() {
            s.inputs.cols() + s.targets.cols()
        } else {
            s.inputs.cols()
        };
        if dims.input != expected || dims.output != s.targets.cols() {
            return Err(Error::Incompatible {
                train: format!("model with {} inputs and {} outputs", dims.input, dims.output),
                infer: strategy.name().to_string(),
                reason: format!(
                    "sequence {} needs {expected} inputs and {} outputs",
                    s.id,
                    s.targets.cols()
                ),
            });
        }
    }
    Ok(())
}

/// Sequences grouped by entity, each group sorted by initial step.
fn by_entity(seqs: &[Sequence]) -> Vec<Vec<&Sequence>> {
    let mut groups: BTreeMap<Arc<str>, Vec<&Sequence>> = BTreeMap::new();
    for s in seqs {
        groups.entry(s.id.entity.clone()).or_default().push(s);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_by_key(|s| s.initial_step());
            g
        })
        .collect()
}

/// Local step of `prev` at which `next` begins, or `None` when `next`
/// starts beyond `prev`'s window.
fn handoff_offset(prev: &Sequence, next: &Sequence) -> Option<usize> {
    let off = next.initial_step().checked_sub(prev.initial_step())?;
    (off >= 1 && off <= prev.window()).then_some(off)
}

pub fn infer_iif(params: &GruParams, seqs: &[Sequence]) -> Result<PredictionSet> {
    check_width(params, seqs, InferenceStrategy::Iif)?;
    let mut out = PredictionSet::new(InferenceStrategy::Iif);
    let mut by_window: BTreeMap<usize, Vec<&Sequence>> = BTreeMap::new();
    for s in seqs {
        by_window.entry(s.window()).or_default().push(s);
    }
    for group in by_window.values() {
        for chunk in group.chunks(IIF_CHUNK) {
            let inputs: Vec<&Matrix> = chunk.iter().map(|s| &s.inputs).collect();
            let trace = forward_batch(params, &inputs, None, None)?;
            for (b, s) in chunk.iter().enumerate() {
                out.predictions.insert(s.id.clone(), trace.outputs(b));
            }
        }
    }
    Ok(out)
}

pub fn infer_ssif(params: &GruParams, seqs: &[Sequence]) -> Result<PredictionSet> {
    check_width(params, seqs, InferenceStrategy::Ssif)?;
    let hidden = params.dims().hidden;
    let mut out = PredictionSet::new(InferenceStrategy::Ssif);
    for chain in by_entity(seqs) {
        let mut prev: Option<(&Sequence, ForwardTrace)> = None;
        for s in chain {
            let h0 = match &prev {
                None => vec![0.0; hidden],
                Some((p, trace)) => match handoff_offset(p, s) {
                    Some(off) => trace.hidden(0, off),
                    None => {
                        log::warn!("gap between {} and {}; starting {} from the zero state", p.id, s.id, s.id);
                        vec![0.0; hidden]
                    }
                },
            };
            let trace = forward_batch(params, &[&s.inputs], Some(&[h0]), None)?;
            out.predictions.insert(s.id.clone(), trace.outputs(0));
            prev = Some((s, trace));
        }
    }
    Ok(out)
}

/// Closed-loop run of one sequence: every step consumes the previous
/// prediction, the first one `y_prev`.
fn closed_loop(params: &GruParams, s: &Sequence, h0: Vec<f64>, y_prev: &[f64]) -> Result<ForwardTrace> {
    let (w, k) = s.targets.shape();
    let fb = Feedback {
        observed: vec![0.0; w * k],
        use_observed: vec![false; w],
        initial_prediction: y_prev.to_vec(),
    };
    forward_batch(params, &[&s.inputs], Some(&[h0]), Some(&fb))
}

pub fn infer_tfif(params: &GruParams, seqs: &[Sequence]) -> Result<PredictionSet> {
    check_width(params, seqs, InferenceStrategy::Tfif)?;
    let hidden = params.dims().hidden;
    let mut out = PredictionSet::new(InferenceStrategy::Tfif);
    for chain in by_entity(seqs) {
        let mut prev: Option<(&Sequence, ForwardTrace)> = None;
        for s in chain {
            let (h0, y_prev) = match &prev {
                None => (vec![0.0; hidden], s.y0.clone()),
                Some((p, trace)) => match handoff_offset(p, s) {
                    Some(off) => (trace.hidden(0, off), trace.output(0, off)),
                    None => {
                        log::warn!("gap between {} and {}; restarting from observed y0", p.id, s.id);
                        (vec![0.0; hidden], s.y0.clone())
                    }
                },
            };
            let trace = closed_loop(params, s, h0, &y_prev)?;
            out.predictions.insert(s.id.clone(), trace.outputs(0));
            prev = Some((s, trace));
        }
    }
    Ok(out)
}

pub fn infer_scif(params: &GruParams, seqs: &[Sequence]) -> Result<PredictionSet> {
    check_width(params, seqs, InferenceStrategy::Scif)?;
    let mut out = PredictionSet::new(InferenceStrategy::Scif);
    for chain in by_entity(seqs) {
        let mut prev: Option<(&Sequence, Matrix)> = None;
        for s in chain {
            let cond = match &prev {
                None => s.y0.clone(),
                Some((p, pred)) => match handoff_offset(p, s) {
                    Some(off) => pred.row(off - 1).to_vec(),
                    None => {
                        log::warn!("gap between {} and {}; conditioning on observed y0", p.id, s.id);
                        s.y0.clone()
                    }
                },
            };
            let x = augment_cmb(&s.inputs, &cond)?;
            let trace = forward_batch(params, &[&x], None, None)?;
            let pred = trace.outputs(0);
            out.predictions.insert(s.id.clone(), pred.clone());
            prev = Some((s, pred));
        }
    }
    Ok(out)
}

/// Runs every sequence as its own closed-loop run from the zero state and
/// its observed `y0`: the per-step error then measures how far errors
/// accumulate from a known starting point. Only TFIF and SCIF apply.
pub fn infer_anchored(strategy: InferenceStrategy, params: &GruParams, seqs: &[Sequence]) -> Result<PredictionSet> {
    check_width(params, seqs, strategy)?;
    let hidden = params.dims().hidden;
    let mut out = PredictionSet::new(strategy);
    for s in seqs {
        let trace = match strategy {
            InferenceStrategy::Tfif => closed_loop(params, s, vec![0.0; hidden], &s.y0)?,
            InferenceStrategy::Scif => forward_batch(params, &[&augment_cmb(&s.inputs, &s.y0)?], None, None)?,
            other => {
                return Err(Error::Config(format!("{other} has no anchored variant")));
            }
        };
        out.predictions.insert(s.id.clone(), trace.outputs(0));
    }
    Ok(out)
}

/// A continuous prediction for one entity.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstructed {
    pub entity: Arc<str>,
    /// Series index of the first row.
    pub first_step: usize,
    pub values: Matrix,
}

/// Stitches per-sequence rows into one series per entity: the first
/// sequence contributes all `W` rows, every later one its last
/// `W - overlap` rows.
pub fn reconstruct(preds: &PredictionSet, window: usize, overlap: usize) -> Result<Vec<Reconstructed>> {
    stitch(preds.iter(), window, overlap)
}

/// Same as [`reconstruct`] for any per-sequence `rows x C` blocks.
pub fn stitch<'a>(
    items: impl IntoIterator<Item = (&'a SequenceId, &'a Matrix)>,
    window: usize,
    overlap: usize,
) -> Result<Vec<Reconstructed>> {
    if overlap >= window {
        return Err(Error::Config(format!("overlap {overlap} must be below window {window}")));
    }
    let stride = window - overlap;
    let mut groups: BTreeMap<Arc<str>, Vec<(usize, &Matrix)>> = BTreeMap::new();
    for (id, m) in items {
        if m.rows() != window {
            return Err(Error::Shape(format!("{id} has {} rows, expected {window}", m.rows())));
        }
        groups.entry(id.entity.clone()).or_default().push((id.initial_step, m));
    }
    let mut out = Vec::with_capacity(groups.len());
    for (entity, mut list) in groups {
        list.sort_by_key(|(t, _)| *t);
        let mut blocks = vec![list[0].1.clone()];
        for pair in list.windows(2) {
            let step = pair[1].0 - pair[0].0;
            if step != stride {
                return Err(Error::Data(format!(
                    "entity {entity}: sequences at {} and {} are {step} apart, expected {stride}",
                    pair[0].0, pair[1].0
                )));
            }
            blocks.push(pair[1].1.slice_rows(overlap, window));
        }
        out.push(Reconstructed {
            entity,
            first_step: list[0].0 + 1,
            values: Matrix::vcat(&blocks)?,
        });
    }
    Ok(out)
}
