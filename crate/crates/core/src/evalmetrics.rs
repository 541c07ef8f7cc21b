//! Error metrics, per-step and per-day error traces, ECDFs and timing
//! summaries.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::PredictionSet;
use crate::kernel::Matrix;
use crate::strategies::EpochLog;

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions vs {} observations", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Data("no values to score".into()));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// `1 - SSE / SST`, negative for predictors worse than the truth mean.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let sst: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if sst == 0.0 {
        return Err(Error::Data("R² is undefined for constant observations".into()));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - sse / sst)
}

/// How per-step errors are combined across sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAverage {
    /// Root of the mean squared error over all sequences and channels.
    #[default]
    Pooled,
    /// Mean over sequences of each sequence's RMSE at that step.
    MeanOfRmse,
}

/// Error at each local step `1..=W`, combined across sequences.
pub fn avg_step_rmse(pred: &PredictionSet, truth: &PredictionSet, mode: StepAverage) -> Result<Vec<f64>> {
    let mut pairs = Vec::with_capacity(pred.len());
    for (id, p) in pred.iter() {
        let t = truth.get(id).ok_or_else(|| Error::Data(format!("no truth for {id}")))?;
        if p.shape() != t.shape() {
            return Err(Error::Shape(format!("{id}: prediction {:?} vs truth {:?}", p.shape(), t.shape())));
        }
        pairs.push((p, t));
    }
    let Some((first, _)) = pairs.first() else {
        return Err(Error::Data("no sequences to score".into()));
    };
    let (w, k) = first.shape();
    if pairs.iter().any(|(p, _)| p.shape() != (w, k)) {
        return Err(Error::Shape("sequences have different lengths".into()));
    }
    let n = pairs.len() as f64;
    let trace = (0..w)
        .map(|step| {
            let per_seq = pairs.iter().map(|(p, t)| {
                p.row(step).iter().zip(t.row(step)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / k as f64
            });
            match mode {
                StepAverage::Pooled => (per_seq.sum::<f64>() / n).sqrt(),
                StepAverage::MeanOfRmse => per_seq.map(f64::sqrt).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(trace)
}

/// One reconstructed series with its observations and day-of-year labels.
#[derive(Clone, Copy, Debug)]
pub struct DailySeries<'a> {
    pub pred: &'a Matrix,
    pub truth: &'a Matrix,
    pub doy: &'a [u16],
}

/// Error per day of year, pooled over all years and series. Index `d - 1`
/// holds day `d`; days without data are NaN.
pub fn avg_daily_rmse(series: &[DailySeries<'_>], year_length: usize) -> Result<Vec<f64>> {
    let mut sse = vec![0.0; year_length];
    let mut count = vec![0usize; year_length];
    for s in series {
        if s.pred.shape() != s.truth.shape() {
            return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", s.pred.shape(), s.truth.shape())));
        }
        if s.doy.len() != s.pred.rows() {
            return Err(Error::Data(format!(
                "{} day-of-year labels for {} steps",
                s.doy.len(),
                s.pred.rows()
            )));
        }
        for (row, &d) in s.doy.iter().enumerate() {
            let d = d as usize;
            if d == 0 || d > year_length {
                return Err(Error::Data(format!("day-of-year {d} outside 1..={year_length}")));
            }
            for (a, b) in s.pred.row(row).iter().zip(s.truth.row(row)) {
                sse[d - 1] += (a - b) * (a - b);
                count[d - 1] += 1;
            }
        }
    }
    Ok(sse
        .iter()
        .zip(&count)
        .map(|(&e, &c)| if c == 0 { f64::NAN } else { (e / c as f64).sqrt() })
        .collect())
}

/// Distinct values with the fraction of inputs at or below each.
pub fn ecdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Data("ECDF of an empty sample".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("ECDF input contains NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    Ok(out)
}

/// Evaluates a step function from [`ecdf`] at `x`.
pub fn ecdf_at(steps: &[(f64, f64)], x: f64) -> f64 {
    steps.iter().take_while(|(v, _)| *v <= x).last().map_or(0.0, |(_, f)| *f)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Median seconds per epoch for each labelled run.
pub fn timing_summary(runs: &[(String, Vec<EpochLog>)]) -> Result<Vec<(String, f64)>> {
    runs.iter()
        .map(|(name, logs)| {
            let secs: Vec<f64> = logs.iter().map(|l| l.seconds).collect();
            median(&secs)
                .map(|m| (name.clone(), m))
                .ok_or_else(|| Error::Data(format!("{name} has no epochs")))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scalars: BTreeMap<String, f64>,
    /// Error per local step.
    pub step_trace: Vec<f64>,
    /// Error per day of year.
    pub daily_trace: Vec<f64>,
    /// R² of each entity, unclamped.
    pub entity_r2: Vec<(String, f64)>,
    pub seconds_per_epoch: f64,
}

impl MetricReport {
    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).copied()
    }

    /// Element-wise mean of several reports (e.g. over seeds). Per-entity
    /// R² values are averaged by entity name.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        let first = reports.first().ok_or_else(|| Error::Data("no reports to average".into()))?;
        let n = reports.len() as f64;
        let mut out = MetricReport {
            step_trace: vec![0.0; first.step_trace.len()],
            daily_trace: vec![0.0; first.daily_trace.len()],
            ..MetricReport::default()
        };
        let mut r2: BTreeMap<String, f64> = BTreeMap::new();
        for r in reports {
            if r.step_trace.len() != out.step_trace.len() || r.daily_trace.len() != out.daily_trace.len() {
                return Err(Error::Shape("reports have traces of different lengths".into()));
            }
            for (k, v) in &r.scalars {
                *out.scalars.entry(k.clone()).or_default() += v / n;
            }
            for (a, b) in out.step_trace.iter_mut().zip(&r.step_trace) {
                *a += b / n;
            }
            for (a, b) in out.daily_trace.iter_mut().zip(&r.daily_trace) {
                *a += b / n;
            }
            for (name, v) in &r.entity_r2 {
                *r2.entry(name.clone()).or_default() += v / n;
            }
            out.seconds_per_epoch += r.seconds_per_epoch / n;
        }
        out.entity_r2 = r2.into_iter().collect();
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `metric,value` rows.
    pub fn write_scalars_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value"])?;
        for (k, v) in &self.scalars {
            w.write_record([k.as_str(), &v.to_string()])?;
        }
        w.write_record(["seconds_per_epoch", &self.seconds_per_epoch.to_string()])?;
        w.flush().map_err(|e| Error::io("metrics", e))?;
        Ok(())
    }

    /// Long-format plot data `kind,index,value`. Negative R² values are
    /// clamped to zero here, and only here.
    pub fn write_traces_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "index", "value"])?;
        for (i, v) in self.step_trace.iter().enumerate() {
            w.write_record(["avg_step_rmse", &(i + 1).to_string(), &v.to_string()])?;
        }
        for (i, v) in self.daily_trace.iter().enumerate() {
            w.write_record(["avg_daily_rmse", &(i + 1).to_string(), &v.to_string()])?;
        }
        for (i, (_, v)) in self.entity_r2.iter().enumerate() {
            w.write_record(["entity_r2", &i.to_string(), &v.max(0.0).to_string()])?;
        }
        w.flush().map_err(|e| Error::io("traces", e))?;
        Ok(())
    }
}
