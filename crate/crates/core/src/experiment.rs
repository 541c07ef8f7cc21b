//! Config-driven experiment runner: data, training, inference and
//! evaluation for a list of seeds, plus comparison grids over sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_csv, normalize, segment, split_periods, CsvSchema, NormMode, NormStats, PeriodBounds,
    SegmentationConfig, Sequence, SyntheticConfig, TimeSeriesEntity,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{self, avg_daily_rmse, avg_step_rmse, DailySeries, MetricReport, StepAverage};
use crate::inference::{self, reconstruct, stitch, InferenceStrategy, PredictionSet};
use crate::kernel::Matrix;
use crate::memory::{StateMap, STATE_MAP_CSV_HEADER};
use crate::model::GruParams;
use crate::strategies::{self, EpochLog, SsplSchedule, Strategy, TrainConfig, TrainObserver, EPOCH_CSV_HEADER};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// CSV file, when `source = "csv"`.
    pub path: Option<PathBuf>,
    pub drivers: Vec<String>,
    /// Response channels to predict, by name.
    pub responses: Vec<String>,
    pub statics: Vec<String>,
    pub strict: bool,
    /// Seed of the synthetic generator, shared by all model seeds.
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Share of the training period used, taken as a temporal prefix.
    pub data_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            drivers: Vec::new(),
            responses: vec!["slow_storage".into()],
            statics: Vec::new(),
            strict: true,
            seed: 0,
            train_fraction: 0.5,
            val_fraction: 0.1,
            data_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: usize,
    pub seeds: Vec<u64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden: 16, seeds: vec![0, 1, 2, 3, 4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub strategy: Strategy,
    pub delta: Option<u8>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sspl_alpha: f64,
    pub sspl_beta: f64,
    /// Decay length of the sampling schedule; defaults to 80% of `epochs`.
    pub sspl_decay_epochs: Option<usize>,
    pub val_every: usize,
    pub select_best: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let sspl = SsplSchedule::default();
        Self {
            strategy: Strategy::Rmb,
            delta: None,
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 100,
            sspl_alpha: sspl.alpha,
            sspl_beta: sspl.beta,
            sspl_decay_epochs: None,
            val_every: 0,
            select_best: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSpec {
    pub strategy: InferenceStrategy,
    pub step_average: StepAverage,
}

impl Default for InferSpec {
    fn default() -> Self {
        Self { strategy: InferenceStrategy::Iif, step_average: StepAverage::Pooled }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emit {
    Predictions,
    Metrics,
    Statemap,
    All,
}

impl FromStr for Emit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "predictions" => Ok(Emit::Predictions),
            "metrics" => Ok(Emit::Metrics),
            "statemap" => Ok(Emit::Statemap),
            "all" => Ok(Emit::All),
            _ => Err(Error::Config(format!("unknown output kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    pub emit: Vec<Emit>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: None, emit: vec![Emit::Metrics] }
    }
}

impl OutputSpec {
    pub fn wants(&self, kind: Emit) -> bool {
        self.emit.iter().any(|e| *e == kind || *e == Emit::All)
    }
}

/// Parameter sweep expanded by [`expand_sweep`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Train/inference pairs such as `"rmb-iif"` or `"mptt1-ssif"`.
    pub pairs: Vec<String>,
    pub data_fractions: Vec<f64>,
    pub windows: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub synthetic: SyntheticConfig,
    pub segmentation: SegmentationSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub infer: InferSpec,
    pub output: OutputSpec,
    pub sweep: SweepSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSpec {
    pub window: usize,
    pub stride: usize,
}

impl Default for SegmentationSpec {
    fn default() -> Self {
        Self { window: 60, stride: 30 }
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize spec: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        check_compatible(self.train.strategy, self.infer.strategy)?;
        SegmentationConfig::new(self.segmentation.window, self.segmentation.stride)?;
        if self.model.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.dataset.responses.is_empty() {
            return Err(Error::Config("no response channels selected".into()));
        }
        if !(self.dataset.data_fraction > 0.0 && self.dataset.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data_fraction must lie in (0, 1], got {}",
                self.dataset.data_fraction
            )));
        }
        if self.dataset.source == DataSource::Csv && self.dataset.path.is_none() {
            return Err(Error::Config("csv source needs dataset.path".into()));
        }
        self.train_config(self.model.seeds[0]).validate()
    }

    /// Stride of the training sequences: stateful strategies need
    /// non-overlapping windows.
    pub fn train_stride(&self) -> usize {
        if self.train.strategy.needs_adjacent() {
            self.segmentation.window
        } else {
            self.segmentation.stride
        }
    }

    /// Stride of validation and test sequences. SCIF is evaluated on
    /// non-overlapping windows only.
    pub fn eval_stride(&self) -> usize {
        if self.infer.strategy == InferenceStrategy::Scif {
            self.segmentation.window
        } else {
            self.segmentation.stride
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            strategy: t.strategy,
            delta: t.delta,
            window: self.segmentation.window,
            stride: self.train_stride(),
            hidden: self.model.hidden,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed,
            sspl: SsplSchedule {
                alpha: t.sspl_alpha,
                beta: t.sspl_beta,
                decay_epochs: t.sspl_decay_epochs.unwrap_or(t.epochs * 4 / 5),
            },
            val_every: t.val_every,
            select_best: t.select_best,
        }
    }

    pub fn pair_label(&self) -> String {
        PairSpec { train: self.train.strategy, delta: self.train.delta, infer: self.infer.strategy }.to_string()
    }
}

/// Inference strategies a training strategy can be paired with.
pub fn compatible_inference(train: Strategy) -> &'static [InferenceStrategy] {
    match train {
        Strategy::Rmb => &[InferenceStrategy::Iif, InferenceStrategy::Ssif],
        Strategy::Tf | Strategy::Sspl => &[InferenceStrategy::Tfif],
        Strategy::Cmb => &[InferenceStrategy::Scif],
        Strategy::Smb | Strategy::Ssmb | Strategy::Mptt => &[InferenceStrategy::Ssif],
    }
}

/// Printable compatibility table, one line per training strategy.
pub fn compatibility_table() -> String {
    Strategy::ALL
        .iter()
        .map(|s| {
            let inf: Vec<&str> = compatible_inference(*s).iter().map(|i| i.name()).collect();
            format!("  {:<5} -> {}\n", s.name(), inf.join(", "))
        })
        .collect()
}

pub fn check_compatible(train: Strategy, infer: InferenceStrategy) -> Result<()> {
    if compatible_inference(train).contains(&infer) {
        return Ok(());
    }
    let reason = match (train.uses_responses(), infer.uses_responses()) {
        (false, true) => "the model takes no response inputs".to_string(),
        (true, false) => "the model needs response inputs that this inference does not supply".to_string(),
        _ => "the pair is not part of the compared configurations".to_string(),
    };
    Err(Error::Incompatible {
        train: train.name().into(),
        infer: infer.name().into(),
        reason: format!("{reason}; allowed pairs:\n{}", compatibility_table()),
    })
}

/// A train/inference pairing, written `rmb-iif`, `mptt1-ssif` and so on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairSpec {
    pub train: Strategy,
    pub delta: Option<u8>,
    pub infer: InferenceStrategy,
}

impl fmt::Display for PairSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.delta {
            Some(d) => write!(f, "{}(δ={d})-{}", self.train, self.infer),
            None => write!(f, "{}-{}", self.train, self.infer),
        }
    }
}

impl FromStr for PairSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (train, infer) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("pair {s:?} is not of the form train-infer")))?;
        let digits = train.trim_start_matches(|c: char| c.is_ascii_alphabetic());
        let name = &train[..train.len() - digits.len()];
        let delta = if digits.is_empty() {
            None
        } else {
            Some(digits.parse::<u8>().map_err(|_| Error::Config(format!("bad keeper in {s:?}")))?)
        };
        let pair = PairSpec { train: name.parse()?, delta, infer: infer.parse()? };
        if pair.train == Strategy::Mptt && pair.delta.is_none() {
            return Err(Error::Config(format!("pair {s:?}: write mptt0 or mptt1")));
        }
        check_compatible(pair.train, pair.infer)?;
        Ok(pair)
    }
}

/// Expands the `[sweep]` section into one spec per pair and column.
/// Without a sweep the spec itself is returned.
pub fn expand_sweep(spec: &ExperimentSpec) -> Result<Vec<ExperimentSpec>> {
    let sw = &spec.sweep;
    let pairs: Vec<Option<PairSpec>> = if sw.pairs.is_empty() {
        vec![None]
    } else {
        sw.pairs.iter().map(|p| p.parse().map(Some)).collect::<Result<_>>()?
    };
    if !sw.data_fractions.is_empty() && !sw.windows.is_empty() {
        return Err(Error::Config("sweep either data fractions or windows, not both".into()));
    }
    let mut out = Vec::new();
    for pair in &pairs {
        let mut base = spec.clone();
        base.sweep = SweepSpec::default();
        if let Some(p) = pair {
            base.train.strategy = p.train;
            base.train.delta = p.delta;
            base.infer.strategy = p.infer;
        }
        if !sw.data_fractions.is_empty() {
            for &f in &sw.data_fractions {
                let mut s = base.clone();
                s.dataset.data_fraction = f;
                out.push(s);
            }
        } else if !sw.windows.is_empty() {
            let overlapping = spec.segmentation.stride != spec.segmentation.window;
            for &w in &sw.windows {
                let mut s = base.clone();
                s.segmentation.window = w;
                s.segmentation.stride = if overlapping { (w / 2).max(1) } else { w };
                out.push(s);
            }
        } else {
            out.push(base);
        }
    }
    for s in &out {
        s.validate()?;
    }
    Ok(out)
}

/// Normalized train/validation/test sequences for one spec.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<Sequence>,
    pub val: Vec<Sequence>,
    pub test: Vec<Sequence>,
    pub stats: NormStats,
    pub year_length: usize,
}

fn load_entities(spec: &ExperimentSpec) -> Result<(Vec<TimeSeriesEntity>, usize)> {
    let ds = &spec.dataset;
    match ds.source {
        DataSource::Synthetic => {
            let all = generate_synthetic(&spec.synthetic, ds.seed)?;
            let names = &all[0].response_names;
            let channels = ds
                .responses
                .iter()
                .map(|r| {
                    names
                        .iter()
                        .position(|n| n == r)
                        .ok_or_else(|| Error::Config(format!("unknown synthetic response {r:?}; choose from {names:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let picked = all.iter().map(|e| e.select_responses(&channels)).collect::<Result<_>>()?;
            Ok((picked, spec.synthetic.year_length as usize))
        }
        DataSource::Csv => {
            let schema = CsvSchema {
                drivers: ds.drivers.clone(),
                responses: ds.responses.clone(),
                statics: ds.statics.clone(),
                strict: ds.strict,
            };
            let path = ds.path.as_ref().expect("validated");
            Ok((load_csv(path, &schema)?, 366))
        }
    }
}

pub fn prepare_data(spec: &ExperimentSpec) -> Result<PreparedData> {
    let (entities, year_length) = load_entities(spec)?;
    let ds = &spec.dataset;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for e in &entities {
        let bounds = PeriodBounds::from_fractions(e.len(), ds.train_fraction, ds.val_fraction)?;
        let split = split_periods(e, &bounds)?;
        let keep = (split.train.len() as f64 * ds.data_fraction).round() as usize;
        train.push(split.train.view(0..keep));
        val.push(split.val);
        test.push(split.test);
    }
    let (train, stats) = normalize(&train, None, NormMode::Lenient)?;
    let (val, _) = normalize(&val, Some(&stats), NormMode::Lenient)?;
    let (test, _) = normalize(&test, Some(&stats), NormMode::Lenient)?;

    let w = spec.segmentation.window;
    let cut = |list: &[TimeSeriesEntity], stride: usize, required: bool| -> Result<Vec<Sequence>> {
        let seg = SegmentationConfig::new(w, stride)?;
        let mut out = Vec::new();
        for e in list {
            if e.len() < w + 1 {
                if required {
                    return Err(Error::Data(format!(
                        "entity {} has {} steps in this period; window {w} needs {}",
                        e.entity_id,
                        e.len(),
                        w + 1
                    )));
                }
                continue;
            }
            out.extend(segment(e, &seg, 0)?);
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    };
    Ok(PreparedData {
        train: cut(&train, spec.train_stride(), true)?,
        val: cut(&val, spec.eval_stride(), false)?,
        test: cut(&test, spec.eval_stride(), true)?,
        stats,
        year_length,
    })
}

/// Outputs of one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub params: GruParams,
    pub logs: Vec<EpochLog>,
    pub report: MetricReport,
    /// Denormalized predictions and observations.
    pub predictions: PredictionSet,
    pub truth: PredictionSet,
    /// Per-epoch state-map rows, MPTT only and on request.
    pub statemap_csv: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: ExperimentSpec,
    pub seeds: Vec<SeedRun>,
    /// Mean over seeds.
    pub mean: MetricReport,
}

#[derive(Default)]
struct StateDump {
    rows: Vec<u8>,
}

impl TrainObserver for StateDump {
    fn on_epoch_state(&mut self, epoch: usize, state: &StateMap) {
        state.dump_csv(epoch, &mut self.rows).expect("writing to memory");
    }
}

/// Scores denormalized predictions on the reconstructed test series.
pub fn evaluate(
    pred: &PredictionSet,
    truth: &PredictionSet,
    test: &[Sequence],
    window: usize,
    stride: usize,
    year_length: usize,
    step_average: StepAverage,
) -> Result<MetricReport> {
    let overlap = window - stride;
    let rec_pred = reconstruct(pred, window, overlap)?;
    let rec_truth = reconstruct(truth, window, overlap)?;
    let doy_blocks: Vec<(crate::memory::SequenceId, Matrix)> = test
        .iter()
        .map(|s| {
            let m = Matrix::from_vec(s.doy.len(), 1, s.doy.iter().map(|&d| f64::from(d)).collect())?;
            Ok((s.id.clone(), m))
        })
        .collect::<Result<_>>()?;
    let rec_doy = stitch(doy_blocks.iter().map(|(i, m)| (i, m)), window, overlap)?;

    let mut all_p = Vec::new();
    let mut all_t = Vec::new();
    let mut entity_r2 = Vec::new();
    let mut daily = Vec::new();
    let doys: Vec<Vec<u16>> = rec_doy.iter().map(|r| r.values.as_slice().iter().map(|&d| d as u16).collect()).collect();
    for ((p, t), d) in rec_pred.iter().zip(&rec_truth).zip(&doys) {
        all_p.extend_from_slice(p.values.as_slice());
        all_t.extend_from_slice(t.values.as_slice());
        let r2 = evalmetrics::r_squared(p.values.as_slice(), t.values.as_slice()).unwrap_or(f64::NAN);
        entity_r2.push((p.entity.to_string(), r2));
        daily.push(DailySeries { pred: &p.values, truth: &t.values, doy: d });
    }
    let mut scalars = BTreeMap::new();
    scalars.insert("rmse".to_string(), evalmetrics::rmse(&all_p, &all_t)?);
    scalars.insert("r2".to_string(), evalmetrics::r_squared(&all_p, &all_t).unwrap_or(f64::NAN));
    Ok(MetricReport {
        scalars,
        step_trace: avg_step_rmse(pred, truth, step_average)?,
        daily_trace: avg_daily_rmse(&daily, year_length)?,
        entity_r2,
        seconds_per_epoch: 0.0,
    })
}

/// Trains and evaluates one seed on prepared data.
pub fn run_seed(spec: &ExperimentSpec, data: &PreparedData, seed: u64, want_statemap: bool) -> Result<SeedRun> {
    let config = spec.train_config(seed);
    let mut dump = StateDump::default();
    let outcome = strategies::train_observed(&config, &data.train, &data.val, &mut dump)?;
    let preds = inference::infer(spec.infer.strategy, &outcome.params, &data.test)?;
    let responses = &data.stats.responses;
    let pred = preds.map(|m| responses.invert(m));
    let truth = PredictionSet::from_targets(spec.infer.strategy, &data.test).map(|m| responses.invert(m));
    let mut report = evaluate(
        &pred,
        &truth,
        &data.test,
        spec.segmentation.window,
        spec.eval_stride(),
        data.year_length,
        spec.infer.step_average,
    )?;
    let secs: Vec<f64> = outcome.logs.iter().map(|l| l.seconds).collect();
    report.seconds_per_epoch = evalmetrics::median(&secs).unwrap_or(0.0);
    let statemap_csv = (want_statemap && spec.train.strategy == Strategy::Mptt).then(|| {
        let mut s = format!("{STATE_MAP_CSV_HEADER}\n");
        s.push_str(&String::from_utf8_lossy(&dump.rows));
        s
    });
    Ok(SeedRun {
        seed,
        params: outcome.params,
        logs: outcome.logs,
        report,
        predictions: pred,
        truth,
        statemap_csv,
    })
}

/// Runs every seed, spreading them over `jobs` threads. Results do not
/// depend on `jobs`.
pub fn run_experiment(spec: &ExperimentSpec, jobs: usize) -> Result<RunResult> {
    spec.validate()?;
    let data = prepare_data(spec)?;
    let want_statemap = spec.output.wants(Emit::Statemap);
    let seeds = &spec.model.seeds;
    let jobs = jobs.clamp(1, seeds.len());
    let mut slots: Vec<Option<Result<SeedRun>>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = seeds.len().div_ceil(jobs);
        for (seed_chunk, slot_chunk) in seeds.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            let data = &data;
            scope.spawn(move || {
                for (seed, slot) in seed_chunk.iter().zip(slot_chunk.iter_mut()) {
                    log::info!("{}: seed {seed}", spec.pair_label());
                    *slot = Some(run_seed(spec, data, *seed, want_statemap));
                }
            });
        }
    });
    let runs = slots
        .into_iter()
        .map(|s| s.expect("every seed ran"))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricReport> = runs.iter().map(|r| r.report.clone()).collect();
    Ok(RunResult { spec: spec.clone(), mean: MetricReport::mean(&reports)?, seeds: runs })
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    created_unix: u64,
    pair: String,
    seeds: &'a [u64],
    data_fraction_policy: &'static str,
    spec: &'a ExperimentSpec,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    pair: String,
    mean: &'a MetricReport,
    per_seed: BTreeMap<u64, &'a MetricReport>,
}

/// Writes the bundle for `result` into `dir`:
/// `metrics.json`, `metrics.csv`, `traces.csv`, `epochs.csv`,
/// `manifest.json`, and on request `predictions.csv` / `statemap.csv`.
pub fn write_bundle(result: &RunResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    let spec = &result.spec;

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        pair: spec.pair_label(),
        seeds: &spec.model.seeds,
        data_fraction_policy: "temporal prefix of the training period",
        spec,
    };
    put("manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    let mut epochs = format!("seed,{EPOCH_CSV_HEADER}\n");
    for run in &result.seeds {
        for l in &run.logs {
            epochs.push_str(&format!("{},{}\n", run.seed, l.csv_row()));
        }
    }
    put("epochs.csv", epochs.as_bytes())?;

    if spec.output.wants(Emit::Metrics) {
        let metrics = MetricsFile {
            pair: spec.pair_label(),
            mean: &result.mean,
            per_seed: result.seeds.iter().map(|r| (r.seed, &r.report)).collect(),
        };
        put("metrics.json", serde_json::to_string_pretty(&metrics)?.as_bytes())?;
        let mut buf = Vec::new();
        result.mean.write_scalars_csv(&mut buf)?;
        put("metrics.csv", &buf)?;
        let mut buf = Vec::new();
        result.mean.write_traces_csv(&mut buf)?;
        put("traces.csv", &buf)?;
    }
    if spec.output.wants(Emit::Predictions) {
        for run in &result.seeds {
            let mut buf = Vec::new();
            run.predictions.write_csv(Some(&run.truth), &mut buf)?;
            put(&format!("predictions_seed{}.csv", run.seed), &buf)?;
        }
    }
    if spec.output.wants(Emit::Statemap) {
        for run in &result.seeds {
            if let Some(csv) = &run.statemap_csv {
                put(&format!("statemap_seed{}.csv", run.seed), csv.as_bytes())?;
            }
        }
    }
    Ok(written)
}

/// Dataset identity used to decide whether runs are comparable.
fn dataset_key(spec: &ExperimentSpec) -> (DatasetSpec, SyntheticConfig) {
    let mut ds = spec.dataset.clone();
    ds.data_fraction = 1.0;
    (ds, spec.synthetic.clone())
}

/// Comparison grid: rows are train/inference pairs, columns the
/// swept data fraction or window, cells the seed-mean RMSE.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonGrid {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl ComparisonGrid {
    pub fn cell(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(r, _)| r == row)?.1[c]
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("pair,{}\n", self.columns.join(","));
        for (row, cells) in &self.rows {
            let vals: Vec<String> = cells.iter().map(|c| c.map_or(String::new(), |v| format!("{v:.6}"))).collect();
            s.push_str(&format!("{row},{}\n", vals.join(",")));
        }
        s
    }
}

pub fn compare(results: &[RunResult]) -> Result<ComparisonGrid> {
    let first = results.first().ok_or_else(|| Error::Config("nothing to compare".into()))?;
    let key = dataset_key(&first.spec);
    for r in results {
        if dataset_key(&r.spec) != key {
            return Err(Error::Config(format!(
                "{} uses a different dataset than {}",
                r.spec.pair_label(),
                first.spec.pair_label()
            )));
        }
    }
    let fractions_vary = results.iter().any(|r| r.spec.dataset.data_fraction != first.spec.dataset.data_fraction);
    let windows_vary = results.iter().any(|r| r.spec.segmentation.window != first.spec.segmentation.window);
    if fractions_vary && windows_vary {
        return Err(Error::Config("compare sweeps one of data fraction or window, not both".into()));
    }
    let column_of = |s: &ExperimentSpec| {
        if windows_vary {
            format!("W={}", s.segmentation.window)
        } else {
            format!("{}%", (s.dataset.data_fraction * 100.0 * 1000.0).round() / 1000.0)
        }
    };
    let mut columns: Vec<String> = Vec::new();
    let mut rows: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    for r in results {
        let col = column_of(&r.spec);
        if !columns.contains(&col) {
            columns.push(col);
        }
    }
    for r in results {
        let label = r.spec.pair_label();
        let c = columns.iter().position(|x| *x == column_of(&r.spec)).expect("column listed");
        let idx = match rows.iter().position(|(l, _)| *l == label) {
            Some(i) => i,
            None => {
                rows.push((label, vec![None; columns.len()]));
                rows.len() - 1
            }
        };
        rows[idx].1[c] = r.mean.scalar("rmse");
    }
    Ok(ComparisonGrid { columns, rows })
}
