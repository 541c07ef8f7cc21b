//! Acceptance suite. Runs every criterion in sequence and prints one
//! PASS/FAIL line each; exits nonzero if any criterion fails.
//!
//! Sequential on purpose: the timing criterion must not share the CPU with
//! other tests, so this target runs without the libtest harness.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mptt_core::data::{segment, SegmentationConfig, Sequence, TimeSeriesEntity};
use mptt_core::evalmetrics::{self, avg_step_rmse, ecdf, ecdf_at, r_squared, rmse, StepAverage};
use mptt_core::experiment::{expand_sweep, prepare_data, run_experiment, ExperimentSpec};
use mptt_core::inference::{self, infer_anchored, reconstruct, InferenceStrategy, PredictionSet};
use mptt_core::kernel::Matrix;
use mptt_core::memory::{
    build_key_map, closed_form_mu0, init_state_map, read_message, MessageKeeper, SequenceId, StateEntry, StateMap,
};
use mptt_core::model::{finite_diff_grad, gru_backward, gru_forward, init_gru, AdamState, GruParams};
use mptt_core::strategies::{
    epoch_mptt, epoch_rmb, epoch_ssmb, sspl_rate, train, train_observed, BatchRecorder, EpochCtx, Strategy,
    TrainObserver,
};

// Tolerances and budgets.
const POLICY_TOL: f64 = 1e-10;
const POLICY_BUDGET_S: f64 = 1.0;
const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative gradient error.
const GRAD_REL_FLOOR: f64 = 1e-6;
const GRAD_FD_STEP: f64 = 1e-5;
const GRAD_BUDGET_S: f64 = 10.0;
const SSIF_TOL: f64 = 1e-12;
const SSIF_BUDGET_S: f64 = 5.0;
const EPOCH1_TOL: f64 = 1e-12;
const KEYMAP_SETS: usize = 1000;
const MPTT_GAIN_MIN: f64 = 0.10;
const SHORT_SPREAD_MAX: f64 = 1.15;
const TFIF_RATIO_MIN: f64 = 2.0;
const SCIF_RATIO_MAX: f64 = 1.5;
const TIMING_ROUNDS: usize = 1000;
const SSMB_EVERY: usize = 20;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

type Criterion = fn() -> Result<Verdict, String>;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 11] = [
        ("policy-algebra oracle", policy_algebra),
        ("gradient correctness", gradient_check),
        ("SSIF keystone", ssif_keystone),
        ("MPTT epoch 1 equals RMB", mptt_epoch_one),
        ("key-map brute force", key_map_brute_force),
        ("write coverage", write_coverage),
        ("SSPL schedule", sspl_schedule),
        ("ordering reproduction", ordering),
        ("timing ordering", timing),
        ("error accumulation", error_accumulation),
        ("metric identities", metric_identities),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let v = run().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        println!("{} {name}: {} [{secs:.2}s]", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn e2s(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, random_vec(rng, rows * cols)).expect("shape")
}

fn random_entity(rng: &mut ChaCha8Rng, name: &str, n: usize, d: usize, k: usize) -> TimeSeriesEntity {
    TimeSeriesEntity {
        entity_id: Arc::from(name),
        offset: 0,
        inputs: random_matrix(rng, n, d),
        responses: random_matrix(rng, n, k),
        day_of_year: (0..n).map(|i| (i % 365) as u16 + 1).collect(),
        static_attrs: None,
        driver_names: (0..d).map(|i| format!("x{i}")).collect(),
        response_names: (0..k).map(|i| format!("y{i}")).collect(),
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs one entry through `epochs` rounds of `count` writes and one
/// propagation each, and compares the message read at the start of every
/// epoch with the closed form.
fn policy_algebra() -> Result<Verdict, String> {
    let start = Instant::now();
    let hidden = 4;
    let epochs = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for delta in [0u8, 1] {
        let keeper = MessageKeeper::new(delta).map_err(e2s)?;
        for count in [1u32, 2, 4] {
            let mut entry = StateEntry::new(hidden);
            let mut hbars: Vec<Vec<f64>> = Vec::new();
            for e in 1..=epochs {
                let expected = closed_form_mu0(&hbars, count, keeper, e).map_err(e2s)?;
                worst = worst.max(max_abs_diff(&read_message(&entry, keeper), &expected));
                worst = worst.max(max_abs_diff(&entry.mu0, &expected));
                let writes: Vec<Vec<f64>> = (0..count).map(|_| random_vec(&mut rng, hidden)).collect();
                for h in &writes {
                    mptt_core::memory::write_state(&mut entry, h).map_err(e2s)?;
                }
                let mean: Vec<f64> =
                    (0..hidden).map(|u| writes.iter().map(|h| h[u]).sum::<f64>() / count as f64).collect();
                hbars.push(mean);
                mptt_core::memory::propagate_entry(&mut entry, keeper);
            }
            let expected = closed_form_mu0(&hbars, count, keeper, epochs + 1).map_err(e2s)?;
            worst = worst.max(max_abs_diff(&entry.mu0, &expected));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        worst <= POLICY_TOL && secs < POLICY_BUDGET_S,
        format!("max |iterated - closed form| = {worst:.2e} (tol {POLICY_TOL:.0e}), {secs:.3}s (budget {POLICY_BUDGET_S}s)"),
    ))
}

fn gradient_check() -> Result<Verdict, String> {
    let start = Instant::now();
    let (h, w, d, k) = (4, 5, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for instance in 0..20u64 {
        let params = init_gru(h, d, k, 1000 + instance).map_err(e2s)?;
        let inputs = random_matrix(&mut rng, w, d);
        let targets = random_matrix(&mut rng, w, k);
        let h0 = random_vec(&mut rng, h);
        let trace = gru_forward(&params, &inputs, &h0).map_err(e2s)?;
        let (analytic, _) = gru_backward(&params, &trace, &[&targets]).map_err(e2s)?;
        let numeric = finite_diff_grad(&params, &inputs, &h0, &targets, GRAD_FD_STEP).map_err(e2s)?;
        for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(GRAD_REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        worst < GRAD_REL_TOL && secs < GRAD_BUDGET_S,
        format!("20 instances, max relative error {worst:.2e} (tol {GRAD_REL_TOL:.0e}), {secs:.3}s (budget {GRAD_BUDGET_S}s)"),
    ))
}

fn ssif_keystone() -> Result<Verdict, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for model in 0..10u64 {
        let hidden = rng.random_range(2..=12);
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=2);
        let w = rng.random_range(3..=40);
        let n = w * rng.random_range(2..=8) + 1;
        let e = random_entity(&mut rng, "e", n, d, k);
        let params = init_gru(hidden, d, k, model).map_err(e2s)?;
        let seqs = segment(&e, &SegmentationConfig::new(w, w).map_err(e2s)?, 0).map_err(e2s)?;
        let preds = inference::infer_ssif(&params, &seqs).map_err(e2s)?;
        let full = gru_forward(&params, &e.inputs.slice_rows(1, n), &vec![0.0; hidden])
            .map_err(e2s)?
            .outputs(0);
        for (i, s) in seqs.iter().enumerate() {
            let p = preds.get(&s.id).ok_or("missing prediction")?;
            worst = worst.max(max_abs_diff(p.as_slice(), full.slice_rows(i * w, (i + 1) * w).as_slice()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        worst <= SSIF_TOL && secs < SSIF_BUDGET_S,
        format!("10 models, max |SSIF - full forward| = {worst:.2e} (tol {SSIF_TOL:.0e}), {secs:.3}s (budget {SSIF_BUDGET_S}s)"),
    ))
}

fn desk_spec() -> ExperimentSpec {
    ExperimentSpec::default()
}

fn mptt_epoch_one() -> Result<Verdict, String> {
    let mut spec = desk_spec();
    spec.train.epochs = 1;
    let data = prepare_data(&spec).map_err(e2s)?;
    let mut batches = Vec::new();
    for (strategy, delta) in [(Strategy::Rmb, None), (Strategy::Mptt, Some(1)), (Strategy::Mptt, Some(0))] {
        spec.train.strategy = strategy;
        spec.train.delta = delta;
        let mut rec = BatchRecorder::default();
        train_observed(&spec.train_config(7), &data.train, &[], &mut rec).map_err(e2s)?;
        batches.push(rec.batches);
    }
    let rmb = &batches[0];
    let mut worst: f64 = 0.0;
    let mut same_ids = true;
    for other in &batches[1..] {
        same_ids &= other.len() == rmb.len();
        for (a, b) in rmb.iter().zip(other) {
            same_ids &= a.1 == b.1;
            worst = worst.max((a.2 - b.2).abs());
        }
    }
    Ok(verdict(
        same_ids && worst <= EPOCH1_TOL,
        format!(
            "{} batches, identical partitions: {same_ids}, max |loss diff| over δ=0,1 = {worst:.2e} (tol {EPOCH1_TOL:.0e})",
            rmb.len()
        ),
    ))
}

fn random_ids(rng: &mut ChaCha8Rng) -> Vec<SequenceId> {
    let entities = rng.random_range(1..=3);
    let mut ids = Vec::new();
    for e in 0..entities {
        let n = rng.random_range(0..=25);
        let steps: BTreeSet<usize> = (0..n).map(|_| rng.random_range(0..60)).collect();
        ids.extend(steps.into_iter().map(|t| SequenceId::new(format!("e{e}"), t)));
    }
    ids
}

fn brute_keys(ids: &[SequenceId], i: &SequenceId, window: usize) -> BTreeSet<SequenceId> {
    ids.iter()
        .filter(|j| j.entity == i.entity && j.initial_step > i.initial_step && j.initial_step <= i.initial_step + window)
        .cloned()
        .collect()
}

fn key_map_brute_force() -> Result<Verdict, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut mismatches = 0usize;
    let mut total_keys = 0usize;
    for _ in 0..KEYMAP_SETS {
        let ids = random_ids(&mut rng);
        let window = rng.random_range(1..=20);
        let km = build_key_map(&ids, window).map_err(e2s)?;
        if km.len() != ids.len() {
            mismatches += 1;
            continue;
        }
        for i in &ids {
            let got: BTreeSet<SequenceId> = km.get(i).unwrap_or(&[]).iter().cloned().collect();
            let want = brute_keys(&ids, i, window);
            total_keys += want.len();
            if got != want {
                mismatches += 1;
            }
        }
    }
    Ok(verdict(
        mismatches == 0,
        format!("{KEYMAP_SETS} random id sets, {total_keys} keys, {mismatches} mismatching entries"),
    ))
}

struct CoverageCheck {
    ids: Vec<SequenceId>,
    window: usize,
    epochs_checked: usize,
    mismatches: usize,
}

impl TrainObserver for CoverageCheck {
    fn on_writes_complete(&mut self, _epoch: usize, state: &StateMap) {
        self.epochs_checked += 1;
        for j in &self.ids {
            let in_degree = self
                .ids
                .iter()
                .filter(|i| brute_keys(&self.ids, i, self.window).contains(j))
                .count();
            let c = state.get(j).map_or(u32::MAX, |e| e.count);
            if c as usize != in_degree {
                self.mismatches += 1;
            }
        }
    }
}

fn write_coverage() -> Result<Verdict, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let window = 12;
    let mut checked = 0;
    let mut mismatches = 0;
    let mut configs = Vec::new();
    for stride in [1, 3, 5, 12] {
        let mut seqs = Vec::new();
        for (e, n) in [("a", 80), ("b", 57), ("c", 30)] {
            let ent = random_entity(&mut rng, e, n, 2, 1);
            seqs.extend(segment(&ent, &SegmentationConfig::new(window, stride).map_err(e2s)?, 0).map_err(e2s)?);
        }
        let mut spec = desk_spec();
        spec.segmentation.window = window;
        spec.segmentation.stride = stride;
        spec.model.hidden = 3;
        spec.train.strategy = Strategy::Mptt;
        spec.train.delta = Some(1);
        spec.train.batch_size = 5;
        spec.train.epochs = 3;
        let mut obs = CoverageCheck {
            ids: seqs.iter().map(|s| s.id.clone()).collect(),
            window,
            epochs_checked: 0,
            mismatches: 0,
        };
        train_observed(&spec.train_config(1), &seqs, &[], &mut obs).map_err(e2s)?;
        checked += obs.epochs_checked;
        mismatches += obs.mismatches;
        configs.push(stride);
    }
    Ok(verdict(
        mismatches == 0 && checked == 12,
        format!("strides {configs:?} at W={window}, {checked} epochs checked, {mismatches} entries with c != in-degree"),
    ))
}

fn sspl_schedule() -> Result<Verdict, String> {
    let (alpha, beta, decay) = (10.0, 0.5, 400usize);
    let mid = sspl_rate((beta * decay as f64) as usize, alpha, beta, decay as f64).map_err(e2s)?;
    let mut prev = f64::INFINITY;
    let mut monotone = true;
    let mut zero_after = true;
    for e in 1..=2 * decay {
        let r = sspl_rate(e, alpha, beta, decay as f64).map_err(e2s)?;
        monotone &= r <= prev;
        prev = r;
        if e > decay {
            zero_after &= r == 0.0;
        }
    }
    Ok(verdict(
        mid == 0.5 && monotone && zero_after,
        format!("ε(200) = {mid}, zero after {decay}: {zero_after}, nonincreasing over 1..=800: {monotone}"),
    ))
}

fn mean_rmse(spec: &ExperimentSpec) -> Result<f64, String> {
    let result = run_experiment(spec, 1).map_err(e2s)?;
    result.mean.scalar("rmse").ok_or_else(|| "no rmse".to_string())
}

fn with_pair(base: &ExperimentSpec, pair: &str) -> Result<ExperimentSpec, String> {
    let mut s = base.clone();
    s.sweep.pairs = vec![pair.to_string()];
    Ok(expand_sweep(&s).map_err(e2s)?.remove(0))
}

fn ordering() -> Result<Verdict, String> {
    let long = desk_spec();

    // (a) across data-fraction columns.
    let mut a_pass = true;
    let mut a_detail = Vec::new();
    let mut full_rmb_iif = None;
    for fraction in [0.02, 0.08, 0.16, 0.32, 1.0] {
        let mut iif = with_pair(&long, "rmb-iif")?;
        iif.dataset.data_fraction = fraction;
        if prepare_data(&iif).is_err() {
            a_detail.push(format!("{:.0}%: no window fits", fraction * 100.0));
            continue;
        }
        let mut ssif = with_pair(&long, "rmb-ssif")?;
        ssif.dataset.data_fraction = fraction;
        let (r_iif, r_ssif) = (mean_rmse(&iif)?, mean_rmse(&ssif)?);
        a_pass &= r_ssif <= r_iif;
        a_detail.push(format!("{:.0}%: {r_ssif:.3} <= {r_iif:.3}", fraction * 100.0));
        if fraction == 1.0 {
            full_rmb_iif = Some(r_iif);
        }
    }

    // (b) at the full training period.
    let rmb_iif = full_rmb_iif.ok_or("full column missing")?;
    let mptt = mean_rmse(&with_pair(&long, "mptt1-ssif")?)?;
    let gain = 1.0 - mptt / rmb_iif;
    let b_pass = gain >= MPTT_GAIN_MIN;

    // (c) short-memory target.
    let mut short = desk_spec();
    short.dataset.responses = vec!["outflow".into()];
    let pairs = [
        "rmb-iif", "rmb-ssif", "mptt1-ssif", "mptt0-ssif", "smb-ssif", "ssmb-ssif", "tf-tfif", "sspl-tfif", "cmb-scif",
    ];
    let mut short_rmse = Vec::new();
    for p in pairs {
        short_rmse.push(mean_rmse(&with_pair(&short, p)?)?);
    }
    let hi = short_rmse.iter().cloned().fold(f64::MIN, f64::max);
    let lo = short_rmse.iter().cloned().fold(f64::MAX, f64::min);
    let c_pass = hi / lo <= SHORT_SPREAD_MAX;

    Ok(verdict(
        a_pass && b_pass && c_pass,
        format!(
            "(a) RMB-SSIF <= RMB-IIF [{}] {}; (b) MPTT(δ=1)-SSIF {mptt:.3} vs RMB-IIF {rmb_iif:.3}, gain {:.1}% (min {:.0}%) {}; (c) short-memory max/min {:.3} (max {SHORT_SPREAD_MAX}) over {} pairs {}",
            a_detail.join(", "),
            ok(a_pass),
            gain * 100.0,
            MPTT_GAIN_MIN * 100.0,
            ok(b_pass),
            hi / lo,
            pairs.len(),
            ok(c_pass),
        ),
    ))
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAILED"
    }
}

/// Paired rounds from a shared state: each round clones the current
/// parameters, optimizer and state-map, times one RMB and one MPTT epoch
/// from that same point (alternating which goes first), then continues
/// from the MPTT result. Every `SSMB_EVERY` rounds an SSMB epoch is timed
/// from the same point as well.
fn timing() -> Result<Verdict, String> {
    let mut spec = desk_spec();
    spec.segmentation.stride = spec.segmentation.window;
    let data = prepare_data(&spec).map_err(e2s)?;
    let seqs: Vec<&Sequence> = data.train.iter().collect();
    let ids: Vec<SequenceId> = seqs.iter().map(|s| s.id.clone()).collect();
    let (w, hidden, b, lr) = (spec.segmentation.window, spec.model.hidden, spec.train.batch_size, spec.train.learning_rate);
    let key_map = build_key_map(&ids, w).map_err(e2s)?;
    let mut state = init_state_map(&ids, hidden, MessageKeeper::KEEP).map_err(e2s)?;
    let width = seqs[0].inputs.cols();
    let mut params = init_gru(hidden, width, seqs[0].targets.cols(), 0).map_err(e2s)?;
    let mut adam = AdamState::for_params(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let time_rmb = |epoch: usize, p: &mut GruParams, a: &mut AdamState, r: &mut ChaCha8Rng| -> Result<f64, String> {
        let t = Instant::now();
        let mut quiet = ();
        let mut ctx = EpochCtx::new(p, a, lr, epoch, &mut quiet);
        epoch_rmb(&mut ctx, &seqs, b, r).map_err(e2s)?;
        Ok(t.elapsed().as_secs_f64())
    };
    let time_mptt = |epoch: usize, p: &mut GruParams, a: &mut AdamState, s: &mut StateMap, r: &mut ChaCha8Rng| {
        let t = Instant::now();
        let mut quiet = ();
        let mut ctx = EpochCtx::new(p, a, lr, epoch, &mut quiet);
        epoch_mptt(&mut ctx, &seqs, &key_map, s, b, r).map_err(e2s)?;
        Ok::<f64, String>(t.elapsed().as_secs_f64())
    };

    let (mut rmb, mut mptt, mut diff, mut ssmb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for epoch in 1..=TIMING_ROUNDS {
        let (mut p1, mut a1, mut r1) = (params.clone(), adam.clone(), rng.clone());
        let (mut p2, mut a2, mut r2, mut s2) = (params.clone(), adam.clone(), rng.clone(), state.clone());
        let (x, y) = if epoch % 2 == 0 {
            let x = time_rmb(epoch, &mut p1, &mut a1, &mut r1)?;
            (x, time_mptt(epoch, &mut p2, &mut a2, &mut s2, &mut r2)?)
        } else {
            let y = time_mptt(epoch, &mut p2, &mut a2, &mut s2, &mut r2)?;
            (time_rmb(epoch, &mut p1, &mut a1, &mut r1)?, y)
        };
        if epoch % SSMB_EVERY == 0 {
            let (mut p3, mut a3) = (params.clone(), adam.clone());
            let t = Instant::now();
            let mut quiet = ();
            let mut ctx = EpochCtx::new(&mut p3, &mut a3, lr, epoch, &mut quiet);
            epoch_ssmb(&mut ctx, &seqs, b).map_err(e2s)?;
            ssmb.push(t.elapsed().as_secs_f64());
        }
        (params, adam, rng, state) = (p2, a2, r2, s2);
        rmb.push(x);
        mptt.push(y);
        diff.push(y - x);
    }
    let med = |v: &[f64]| evalmetrics::median(v).unwrap_or(f64::NAN);
    let (m_rmb, m_mptt, m_ssmb, m_diff) = (med(&rmb), med(&mptt), med(&ssmb), med(&diff));
    let positive = diff.iter().filter(|d| **d > 0.0).count() as f64 / diff.len() as f64;
    Ok(verdict(
        m_diff > 0.0 && m_ssmb > m_mptt,
        format!(
            "{} train sequences, median s/epoch RMB {m_rmb:.5}, MPTT {m_mptt:.5}, SSMB {m_ssmb:.5}; paired MPTT-RMB median {m_diff:.2e} s over {TIMING_ROUNDS} rounds ({:.1}% positive)",
            seqs.len(),
            positive * 100.0
        ),
    ))
}

/// Every test sequence starts from its observed boundary response and a
/// zero state; per-step RMSE pooled over sequences, averaged over seeds.
/// Each pair is scored on the test cut the harness evaluates it on.
fn error_accumulation() -> Result<Verdict, String> {
    let mut ratios = BTreeMap::new();
    for (pair, strategy) in [("tf-tfif", InferenceStrategy::Tfif), ("cmb-scif", InferenceStrategy::Scif)] {
        let spec = with_pair(&desk_spec(), pair)?;
        let data = prepare_data(&spec).map_err(e2s)?;
        let test = &data.test;
        let truth = PredictionSet::from_targets(strategy, test);
        let mut traces = Vec::new();
        for &seed in &spec.model.seeds {
            let out = train(&spec.train_config(seed), &data.train, &data.val).map_err(e2s)?;
            let pred = infer_anchored(strategy, &out.params, test).map_err(e2s)?;
            traces.push(avg_step_rmse(&pred, &truth, StepAverage::Pooled).map_err(e2s)?);
        }
        let w = traces[0].len();
        let first = mean_of(&traces.iter().map(|t| t[0]).collect::<Vec<_>>());
        let last = mean_of(&traces.iter().map(|t| t[w - 1]).collect::<Vec<_>>());
        ratios.insert(strategy, (first, last, last / first));
    }
    let (tf1, tfw, tf) = ratios[&InferenceStrategy::Tfif];
    let (sc1, scw, sc) = ratios[&InferenceStrategy::Scif];
    Ok(verdict(
        tf >= TFIF_RATIO_MIN && sc < SCIF_RATIO_MAX,
        format!(
            "TFIF step W/step 1 = {tfw:.4}/{tf1:.4} = {tf:.2} (min {TFIF_RATIO_MIN}); SCIF = {scw:.4}/{sc1:.4} = {sc:.2} (max {SCIF_RATIO_MAX})"
        ),
    ))
}

fn metric_identities() -> Result<Verdict, String> {
    let truth = [1.0, 2.0, 3.0, 4.0];
    let shifted: Vec<f64> = truth.iter().map(|t| t + 2.0).collect();
    let steps = ecdf(&[1.0, 2.0, 3.0]).map_err(e2s)?;
    let scalar = [
        ("rmse(a, a) = 0", rmse(&truth, &truth).map_err(e2s)? == 0.0),
        ("constant error 2", rmse(&shifted, &truth).map_err(e2s)? == 2.0),
        ("errors {3, 4}", rmse(&[3.0, 4.0], &[0.0, 0.0]).map_err(e2s)? == 12.5f64.sqrt()),
        ("r2(a, a) = 1", r_squared(&truth, &truth).map_err(e2s)? == 1.0),
        ("r2(mean) = 0", r_squared(&[2.5; 4], &truth).map_err(e2s)? == 0.0),
        ("r2 worse than mean < 0", r_squared(&[4.0, 3.0, 2.0, 1.0], &truth).map_err(e2s)? < 0.0),
        ("r2 zero variance errors", r_squared(&[1.0, 1.0], &[2.0, 2.0]).is_err()),
        ("ecdf({1,2,3}) at 2", ecdf_at(&steps, 2.0) == 2.0 / 3.0),
        ("ecdf all equal", ecdf(&[5.0; 4]).map_err(e2s)? == vec![(5.0, 1.0)]),
        ("ecdf empty errors", ecdf(&[]).is_err()),
    ];
    let mut failures: Vec<String> = scalar.iter().filter(|(_, good)| !good).map(|(n, _)| n.to_string()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut cases = 0;
    for w in 2..=12 {
        for stride in 1..=w {
            let blocks = rng.random_range(1..=6);
            let n = w + 1 + (blocks - 1) * stride + rng.random_range(0..stride);
            let e = random_entity(&mut rng, "r", n, 1, 2);
            let seqs = segment(&e, &SegmentationConfig::new(w, stride).map_err(e2s)?, 0).map_err(e2s)?;
            let set = PredictionSet::from_targets(InferenceStrategy::Iif, &seqs);
            let rec = reconstruct(&set, w, w - stride).map_err(e2s)?;
            let covered = 1 + w + (seqs.len() - 1) * stride;
            let expected = e.responses.slice_rows(1, covered);
            cases += 1;
            if rec.len() != 1 || rec[0].first_step != 1 || rec[0].values != expected {
                failures.push(format!("reconstruct W={w} Δ={stride}"));
            }
        }
    }
    Ok(verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} scalar identities exact; reconstruct∘segment identity on {cases} (W, Δ) pairs", scalar.len())
        } else {
            format!("failed: {}", failures.join(", "))
        },
    ))
}
