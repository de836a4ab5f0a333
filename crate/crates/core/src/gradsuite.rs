//! The double-precision finite-difference suite: every differentiable
//! primitive, each model component and the full contrastive objective.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{info_nce, sample_negative_set, BatchLayout, NegativeOptions};
use crate::model::{forward_features, ModelConfig};
use crate::params::{Bound, ParamSet};
use crate::predictor::{dropout, predict_graph, Mode, PredictorKind};
use crate::probe::ctc_loss_graph;
use crate::sequence::{gru_step, lstm_step, RecurrenceKind};
use crate::tensor::gradcheck::{grad_check, EPSILON};
use crate::tensor::{concat_cols, concat_rows, Graph, Tensor, Var};
use crate::trainer::frame_cross_entropy;

/// Tolerance for single operations.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
/// Tolerance for composed models.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Tolerance for the CTC objective.
pub const CTC_TOLERANCE: f64 = 1e-5;
/// Finite-difference step of the model checks. The encoder has thousands of
/// relu inputs, and a step of 1e-5 lets a few of them cross zero between
/// the two evaluations.
pub const MODEL_EPSILON: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl SuiteEntry {
    pub fn line(&self) -> String {
        format!(
            "{}\t{:.3e}\t(tol {:.0e})\t{}",
            self.name,
            self.max_rel_error,
            self.tolerance,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values in `±[0.2, 1]`, clear of relu's kink.
fn off_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Contracts `v` with a fixed pseudo-random weight tensor, so every output
/// entry gets a distinct nonzero adjoint.
fn contract<'g>(v: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let shape = v.shape();
    let w = random(shape, &mut ChaCha8Rng::seed_from_u64(0xC0FFEE));
    Ok(v.mul(v.graph().constant(w))?.sum())
}

fn entry(
    name: &str,
    tolerance: f64,
    params: &[(String, Tensor<f64>)],
    f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
) -> Result<SuiteEntry> {
    entry_with_step(name, tolerance, EPSILON, params, f)
}

fn entry_with_step(
    name: &str,
    tolerance: f64,
    epsilon: f64,
    params: &[(String, Tensor<f64>)],
    f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
) -> Result<SuiteEntry> {
    let report = grad_check(f, params, epsilon, tolerance)?;
    Ok(SuiteEntry {
        name: name.to_string(),
        tolerance,
        max_rel_error: report.max_rel_error(),
        passed: report.passed(),
    })
}

fn named(ts: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("x{i}"), t)).collect()
}

fn model_entry(
    name: &str,
    tolerance: f64,
    epsilon: f64,
    params: &ParamSet<f64>,
    f: impl for<'g> Fn(&Bound<'g, f64>) -> Result<Var<'g, f64>>,
) -> Result<SuiteEntry> {
    let list: Vec<(String, Tensor<f64>)> = params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let names: Vec<String> = list.iter().map(|(k, _)| k.clone()).collect();
    entry_with_step(name, tolerance, epsilon, &list, |_, vars| {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        f(&bound)
    })
}

/// A short deterministic test waveform with some harmonic structure.
pub fn test_waveform(samples: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..samples)
        .map(|i| {
            let t = i as f64 / 16000.0;
            0.4 * (2.0 * PI * 220.0 * t).sin() + 0.2 * (2.0 * PI * 535.0 * t).sin() + 0.05 * rng.gen_range(-1.0..1.0)
        })
        .collect();
    Tensor::new(vec![samples, 1], data).unwrap()
}

/// Checks of single operations at [`PRIMITIVE_TOLERANCE`].
pub fn primitive_checks() -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tol = PRIMITIVE_TOLERANCE;
    let mut out = Vec::new();
    let r = &mut rng;

    out.push(entry(
        "conv1d",
        tol,
        &named(vec![random(vec![11, 3], r), random(vec![4, 3, 3], r), random(vec![4], r)]),
        |_, v| contract(v[0].conv1d(v[1], v[2], 2, 1)?),
    )?);
    out.push(entry("matmul", tol, &named(vec![random(vec![3, 4], r), random(vec![4, 2], r)]), |_, v| {
        contract(v[0].matmul(v[1])?)
    })?);
    out.push(entry(
        "affine",
        tol,
        &named(vec![random(vec![3, 4], r), random(vec![5, 4], r), random(vec![5], r)]),
        |_, v| contract(v[0].affine(v[1], v[2])?),
    )?);
    out.push(entry("transpose", tol, &named(vec![random(vec![3, 4], r)]), |_, v| contract(v[0].transpose()?))?);
    let pair = named(vec![random(vec![3, 4], r), random(vec![3, 4], r)]);
    out.push(entry("add", tol, &pair, |_, v| contract(v[0].add(v[1])?))?);
    out.push(entry("sub", tol, &pair, |_, v| contract(v[0].sub(v[1])?))?);
    out.push(entry("mul", tol, &pair, |_, v| contract(v[0].mul(v[1])?))?);
    let one = named(vec![random(vec![3, 4], r)]);
    out.push(entry("scale", tol, &one, |_, v| contract(v[0].scale(-1.7)))?);
    out.push(entry("add_scalar", tol, &one, |_, v| contract(v[0].add_scalar(0.3)))?);
    out.push(entry("tanh", tol, &one, |_, v| contract(v[0].tanh()))?);
    out.push(entry("sigmoid", tol, &one, |_, v| contract(v[0].sigmoid()))?);
    out.push(entry("relu", tol, &named(vec![off_zero(vec![3, 4], r)]), |_, v| contract(v[0].relu()))?);
    out.push(entry("sum", tol, &one, |_, v| Ok(v[0].mul(v[0])?.sum()))?);
    out.push(entry("mean", tol, &one, |_, v| Ok(v[0].mul(v[0])?.mean()))?);
    out.push(entry("log_softmax", tol, &one, |_, v| contract(v[0].log_softmax()?))?);
    out.push(entry("causal_softmax", tol, &named(vec![random(vec![4, 4], r)]), |_, v| {
        contract(v[0].causal_softmax()?)
    })?);
    out.push(entry(
        "channel_norm",
        tol,
        &named(vec![random(vec![3, 5], r), random(vec![5], r), random(vec![5], r)]),
        |_, v| contract(v[0].channel_norm(v[1], v[2], 1e-5)?),
    )?);
    out.push(entry("slice_rows", tol, &one, |_, v| contract(v[0].slice_rows(1, 2)?))?);
    out.push(entry("slice_cols", tol, &one, |_, v| contract(v[0].slice_cols(1, 2)?))?);
    out.push(entry("reshape", tol, &one, |_, v| contract(v[0].reshape(vec![2, 6])?))?);
    out.push(entry("gather_rows", tol, &one, |_, v| contract(v[0].gather_rows(vec![2, 0, 2, 1])?))?);
    out.push(entry(
        "candidate_scores",
        tol,
        &named(vec![random(vec![2, 3], r), random(vec![5, 3], r)]),
        |_, v| contract(v[0].candidate_scores(v[1], vec![0, 4, 4, 1, 2, 3], 3)?),
    )?);
    out.push(entry("pick_per_row", tol, &one, |_, v| contract(v[0].pick_per_row(vec![3, 0, 1])?))?);
    out.push(entry("concat_rows", tol, &pair, |_, v| contract(concat_rows(&[v[0], v[1], v[0]])?))?);
    out.push(entry("concat_cols", tol, &pair, |_, v| contract(concat_cols(&[v[1], v[0]])?))?);
    out.push(entry("dropout", tol, &one, |_, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        contract(dropout(v[0], 0.3, &mut rng)?)
    })?);

    let (c, h) = (3, 4);
    let lstm = crate::sequence::RecurrenceConfig::new(RecurrenceKind::Lstm, c, h).init_params::<f64>(r);
    let x = random(vec![1, c], r);
    let h0 = random(vec![1, h], r);
    let c0 = random(vec![1, h], r);
    out.push(model_entry("lstm_step", tol, EPSILON, &with_inputs(&lstm, &[("in.x", &x), ("in.h", &h0), ("in.c", &c0)]), |p| {
        let (h1, c1) = lstm_step(p, p.get("in.x")?, p.get("in.h")?, p.get("in.c")?)?;
        let a = contract(h1)?;
        let b = contract(c1)?;
        a.add(b.scale(0.5))
    })?);
    let gru = crate::sequence::RecurrenceConfig::new(RecurrenceKind::Gru, c, h).init_params::<f64>(r);
    out.push(model_entry("gru_step", tol, EPSILON, &with_inputs(&gru, &[("in.x", &x), ("in.h", &h0)]), |p| {
        contract(gru_step(p, p.get("in.x")?, p.get("in.h")?)?)
    })?);

    let logits = random(vec![5, 4], r);
    out.push(entry("ctc_loss", CTC_TOLERANCE, &named(vec![logits]), |_, v| ctc_loss_graph(v[0], &[1, 2, 2]))?);
    Ok(out)
}

fn with_inputs(base: &ParamSet<f64>, extra: &[(&str, &Tensor<f64>)]) -> ParamSet<f64> {
    let mut p = base.clone();
    for (k, v) in extra {
        p.insert(*k, (*v).clone());
    }
    p
}

/// Tiny contrastive model: C = H = 8, T = 16 frames, K = 2, 4 negatives.
pub fn tiny_cpc_config(recurrence: RecurrenceKind, predictor: PredictorKind) -> ModelConfig {
    let mut cfg = ModelConfig::new(8, 2, recurrence, predictor);
    cfg.predictor.heads = 2;
    cfg
}

/// Full InfoNCE objective of the tiny model over two windows of two speakers,
/// with fixed negatives and a fixed dropout mask.
pub fn cpc_objective_check(recurrence: RecurrenceKind, predictor: PredictorKind) -> Result<SuiteEntry> {
    let cfg = tiny_cpc_config(recurrence, predictor);
    let frames = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params: ParamSet<f64> = cfg.init_params(&mut rng);
    let waves = [test_waveform(frames * 160, 1), test_waveform(frames * 160, 2)];
    let layout = BatchLayout::new(vec![0, 0], frames);
    let negs = sample_negative_set(&layout, cfg.predictor.horizon, 4, NegativeOptions::default(), &mut rng)?;
    let name = format!("cpc[{}+{}]", recurrence.as_str(), predictor.as_str());
    model_entry(&name, MODEL_TOLERANCE, MODEL_EPSILON, &params, |p| {
        let g = p.get("enc.conv0.weight")?.graph();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(11);
        let mut encs = Vec::new();
        let mut preds = Vec::new();
        for w in &waves {
            let (enc, z) = forward_features(&cfg, p, g.constant(w.clone()))?;
            encs.push(enc);
            preds.push(predict_graph(&cfg.predictor, p, z, &mut Mode::Train(&mut drop_rng))?.preds);
        }
        Ok(info_nce(&preds, &encs, &negs)?.loss)
    })
}

/// Cross-entropy of the supervised head over fixed context states.
pub fn head_check() -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = random(vec![6, 4], &mut rng);
    let w = random(vec![3, 4], &mut rng);
    let b = random(vec![3], &mut rng);
    let labels = vec![vec![0, 2, 1, 1, 0, 2]];
    entry("head_cross_entropy", PRIMITIVE_TOLERANCE, &named(vec![z, w, b]), |_, v| {
        Ok(frame_cross_entropy(&v[1], &v[2], &[v[0]], &labels)?.0)
    })
}

/// Every check of the suite, primitives first.
pub fn run_gradient_suite() -> Result<Vec<SuiteEntry>> {
    let mut out = primitive_checks()?;
    out.push(head_check()?);
    for kind in PredictorKind::ALL {
        out.push(cpc_objective_check(RecurrenceKind::Lstm, kind)?);
    }
    out.push(cpc_objective_check(RecurrenceKind::Gru, PredictorKind::Linear)?);
    Ok(out)
}
