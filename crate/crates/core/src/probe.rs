//! Linear CTC phoneme probe over stacked context features, its decoder and
//! the phone error rate.
//!
//! Logit column 0 is the CTC blank; inventory symbol `i` is column `i + 1`.
//! Transcripts and decoded sequences are inventory indices throughout.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward_features, ModelConfig};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::params::{fan_in_uniform, ParamSet};
use crate::tensor::kernels::log_sum_exp;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const BLANK: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    Frozen,
    Finetune,
}

impl ProbeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeMode::Frozen => "frozen",
            ProbeMode::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(ProbeMode::Frozen),
            "finetune" => Ok(ProbeMode::Finetune),
            other => Err(Error::Config(format!("unknown probe mode `{other}` (expected frozen or finetune)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub concat_frames: usize,
    /// Hop between stacked blocks; equal to `concat_frames` for non-overlapping blocks.
    pub stride: usize,
    pub mode: ProbeMode,
    pub steps: u64,
    /// Utterances per update.
    pub batch_size: usize,
    /// Optimizer of the linear classifier.
    pub adam: AdamConfig,
    /// Learning rate of the encoder and context model in finetune mode.
    pub finetune_lr: f64,
    pub clip_norm: f64,
    /// Steps between dev evaluations; the best dev snapshot is kept.
    pub eval_interval: u64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            concat_frames: 8,
            stride: 8,
            mode: ProbeMode::Frozen,
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            finetune_lr: 1e-4,
            clip_norm: 5.0,
            eval_interval: 100,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concat_frames == 0 || self.stride == 0 {
            return Err(Error::Config("concat_frames and stride must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch_size and eval_interval must be at least 1".into()));
        }
        Ok(())
    }
}

fn stacked_len(t: usize, n: usize, stride: usize) -> Result<usize> {
    if n == 0 || stride == 0 {
        return Err(Error::Config("stack size and stride must be at least 1".into()));
    }
    if t < n {
        return Err(Error::Data(format!("cannot stack {n} frames from a sequence of {t}")));
    }
    Ok((t - n) / stride + 1)
}

fn stack_rows(t: usize, n: usize, stride: usize) -> Result<Vec<usize>> {
    let u = stacked_len(t, n, stride)?;
    Ok((0..u).flat_map(|b| (0..n).map(move |j| b * stride + j)).collect())
}

/// Concatenates blocks of `n` consecutive rows taken every `stride` rows:
/// `[T × H]` becomes `[U × nH]` with `U = (T − n) / stride + 1`. With
/// `stride = n` the blocks do not overlap and a remainder shorter than `n`
/// is dropped.
pub fn stack_frames<R: Real>(z: &Tensor<R>, n: usize, stride: usize) -> Result<Tensor<R>> {
    let (t, h) = (z.rows(), z.cols());
    let rows = stack_rows(t, n, stride)?;
    let data = rows.iter().flat_map(|&r| z.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len() / n, n * h], data)
}

pub fn stack_frames_graph<'g, R: Real>(z: Var<'g, R>, n: usize, stride: usize) -> Result<Var<'g, R>> {
    let (t, h) = {
        let v = z.value();
        (v.rows(), v.cols())
    };
    let rows = stack_rows(t, n, stride)?;
    let u = rows.len() / n;
    z.gather_rows(rows)?.reshape(vec![u, n * h])
}

/// Frames CTC needs for `labels`: one per label plus a blank between repeats.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-probability of `labels` under CTC, and its gradient with
/// respect to the logits, both in double precision.
///
/// `logits` is `[U × (P+1)]` (blank in column 0); `labels` are inventory
/// indices below `P`.
pub fn ctc_loss<R: Real>(logits: &Tensor<R>, labels: &[usize]) -> Result<(f64, Tensor<f64>)> {
    let (u_len, cols) = (logits.rows(), logits.cols());
    if cols < 2 {
        return Err(Error::shape("ctc_loss", "logits need a blank and at least one symbol"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l + 1 >= cols) {
        return Err(Error::Data(format!("label {bad} outside the {} inventory symbols", cols - 1)));
    }
    let need = ctc_min_frames(labels);
    if u_len < need.max(1) {
        return Err(Error::Data(format!(
            "CTC infeasible: {u_len} output frames for {} labels needing at least {need}",
            labels.len()
        )));
    }
    // Row-wise log-softmax.
    let mut lp = vec![0.0f64; u_len * cols];
    for t in 0..u_len {
        let row: Vec<f64> = logits.row(t).iter().map(|v| v.as_f64()).collect();
        let lse = log_sum_exp(&row);
        for c in 0..cols {
            lp[t * cols + c] = row[c] - lse;
        }
    }
    // Blank-augmented label sequence.
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(labels.iter().flat_map(|&l| [l + 1, BLANK]))
        .collect();
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; u_len * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..u_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = vec![prev[s]];
            if s >= 1 {
                terms.push(prev[s - 1]);
            }
            if skip(s) {
                terms.push(prev[s - 2]);
            }
            alpha[t * s_len + s] = lp[t * cols + ext[s]] + log_sum_exp(&terms);
        }
    }
    // beta excludes the emission at its own frame.
    let mut beta = vec![neg; u_len * s_len];
    let last = (u_len - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..u_len - 1).rev() {
        for s in 0..s_len {
            let emit = |s2: usize| lp[(t + 1) * cols + ext[s2]] + beta[(t + 1) * s_len + s2];
            let mut terms = vec![emit(s)];
            if s + 1 < s_len {
                terms.push(emit(s + 1));
            }
            if s + 2 < s_len && skip(s + 2) {
                terms.push(emit(s + 2));
            }
            beta[t * s_len + s] = log_sum_exp(&terms);
        }
    }
    let tail: Vec<f64> = alpha[last + s_len.saturating_sub(2)..last + s_len].to_vec();
    let log_p = log_sum_exp(&tail);
    if !log_p.is_finite() {
        return Err(Error::Numerical("CTC total probability underflowed".into()));
    }

    let mut grad = vec![0.0f64; u_len * cols];
    for t in 0..u_len {
        let mut occ = vec![neg; cols];
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occ[ext[s]] = log_sum_exp(&[occ[ext[s]], v]);
        }
        for c in 0..cols {
            grad[t * cols + c] = lp[t * cols + c].exp() - (occ[c] - log_p).exp();
        }
    }
    Ok((-log_p, Tensor::new(vec![u_len, cols], grad)?))
}

/// [`ctc_loss`] as a graph node over `logits`.
pub fn ctc_loss_graph<'g, R: Real>(logits: Var<'g, R>, labels: &[usize]) -> Result<Var<'g, R>> {
    let (loss, grad) = ctc_loss(&logits.value(), labels)?;
    logits.precomputed_scalar(
        R::from_f64_lossy(loss),
        grad.data().iter().map(|&g| R::from_f64_lossy(g)).collect(),
    )
}

/// Per-frame argmax, consecutive repeats merged, blanks removed.
pub fn ctc_greedy_decode<R: Real>(logits: &Tensor<R>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..logits.rows() {
        let best = crate::trainer::argmax(logits.row(t));
        if Some(best) != prev && best != BLANK {
            out.push(best - 1);
        }
        prev = Some(best);
    }
    out
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    for (i, h) in hyp.iter().enumerate() {
        let mut cur = vec![i + 1; reference.len() + 1];
        for (j, r) in reference.iter().enumerate() {
            cur[j + 1] = (prev[j] + (h != r) as usize).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[reference.len()]
}

/// Phone error rate: edit distance over reference length (may exceed 1).
pub fn per<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Data("PER needs a non-empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

pub fn init_probe(hidden: usize, cfg: &ProbeConfig, symbols: usize, rng: &mut impl Rng) -> ParamSet<f32> {
    let inp = hidden * cfg.concat_frames;
    let mut ps = ParamSet::new();
    ps.insert("probe.weight", fan_in_uniform(vec![symbols + 1, inp], inp, rng));
    ps.insert("probe.bias", Tensor::zeros(vec![symbols + 1]));
    ps
}

/// Probe logits `[U × (P+1)]` for context states `z`.
pub fn probe_logits<'g>(probe: &crate::params::Bound<'g, f32>, z: Var<'g, f32>, cfg: &ProbeConfig) -> Result<Var<'g, f32>> {
    stack_frames_graph(z, cfg.concat_frames, cfg.stride)?.affine(probe.get("probe.weight")?, probe.get("probe.bias")?)
}

fn context_states(model: &ModelConfig, params: &ParamSet<f32>, data: &Dataset) -> Result<Vec<Tensor<f32>>> {
    data.utterances
        .par_iter()
        .map(|u| Ok(crate::model::features(&u.samples, model, params)?.1.frames))
        .collect()
}

fn decode_all(probe: &ParamSet<f32>, feats: &[Tensor<f32>], cfg: &ProbeConfig) -> Result<Vec<Vec<usize>>> {
    feats
        .par_iter()
        .map(|z| {
            let g = Graph::new();
            let p = probe.bind(&g, |_| false);
            let logits = probe_logits(&p, g.constant(z.clone()), cfg)?;
            let decoded = ctc_greedy_decode(&logits.value());
            Ok(decoded)
        })
        .collect()
}

/// Corpus PER of `probe` on `data`: summed edit distance over summed reference length.
pub fn evaluate_per(
    model: &ModelConfig,
    params: &ParamSet<f32>,
    probe: &ParamSet<f32>,
    data: &Dataset,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let feats = context_states(model, params, data)?;
    corpus_per(probe, &feats, data, cfg)
}

fn corpus_per(probe: &ParamSet<f32>, feats: &[Tensor<f32>], data: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    if data.utterances.is_empty() {
        return Err(Error::Data("cannot score an empty split".into()));
    }
    let hyps = decode_all(probe, feats, cfg)?;
    let (mut dist, mut total) = (0usize, 0usize);
    for (h, u) in hyps.iter().zip(&data.utterances) {
        dist += edit_distance(h, &u.transcript.0);
        total += u.transcript.0.len();
    }
    if total == 0 {
        return Err(Error::Data("references are empty".into()));
    }
    Ok(dist as f64 / total as f64)
}

/// Result of probe training.
pub struct ProbeOutcome {
    /// Best-on-dev classifier.
    pub probe: ParamSet<f32>,
    /// Encoder and context parameters matching `probe` (updated only in finetune mode).
    pub params: ParamSet<f32>,
    pub best_step: u64,
    pub dev_per: f64,
    /// `(step, mean batch loss)`.
    pub trace: Vec<(u64, f64)>,
    pub warnings: Vec<String>,
}

/// Trains the linear CTC probe on `train`, keeping the snapshot with the
/// lowest dev PER (evaluated at step 0 and every `eval_interval` steps).
///
/// Frozen mode never touches `params`. Finetune mode updates every encoder
/// and context parameter as well. `init` seeds the classifier, e.g. with a
/// frozen-mode result.
pub fn train_probe(
    model: &ModelConfig,
    params: &ParamSet<f32>,
    init: Option<&ParamSet<f32>>,
    train: &Dataset,
    dev: &Dataset,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    if train.utterances.is_empty() || dev.utterances.is_empty() {
        return Err(Error::Data("probe training needs non-empty train and dev splits".into()));
    }
    let symbols = train.inventory.len();
    let mut warnings = Vec::new();
    let mut seen = vec![false; symbols];
    for u in &train.utterances {
        for &l in &u.transcript.0 {
            seen[l] = true;
        }
    }
    for (i, s) in seen.iter().enumerate() {
        if !s {
            warnings.push(format!(
                "inventory symbol `{}` never occurs in the training transcripts",
                train.inventory.symbol(i)
            ));
        }
    }
    let stacked = |frames: usize| stacked_len(frames, cfg.concat_frames, cfg.stride);
    for u in &train.utterances {
        let have = stacked(u.frames())?;
        let need = ctc_min_frames(&u.transcript.0);
        if have < need {
            return Err(Error::Data(format!(
                "utterance {}: {have} stacked frames cannot carry {} labels (CTC needs {need}); lower the stack stride",
                u.id,
                u.transcript.0.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = match init {
        Some(p) => p.clone(),
        None => init_probe(model.hidden(), cfg, symbols, &mut rng),
    };
    let mut model_params = params.clone();
    let finetune = cfg.mode == ProbeMode::Finetune;
    let model_trains = |n: &str| n.starts_with("enc.") || n.starts_with("ar.");
    let mut probe_adam = AdamState::new(&probe);
    let mut model_adam = AdamState::new(&model_params);
    let model_hyper = AdamConfig {
        lr: cfg.finetune_lr,
        ..cfg.adam
    };

    let mut train_feats = if finetune { None } else { Some(context_states(model, params, train)?) };
    let dev_feats_frozen = if finetune { None } else { Some(context_states(model, params, dev)?) };
    let dev_per = |probe: &ParamSet<f32>, mp: &ParamSet<f32>| -> Result<f64> {
        match &dev_feats_frozen {
            Some(f) => corpus_per(probe, f, dev, cfg),
            None => evaluate_per(model, mp, probe, dev, cfg),
        }
    };

    let mut best = (dev_per(&probe, &model_params)?, 0u64, probe.clone(), model_params.clone());
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..train.utterances.len()).collect();
    let mut cursor = order.len();
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(order.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let g = Graph::new();
        let pb = probe.bind(&g, |_| true);
        let mb = model_params.bind(&g, |n| finetune && model_trains(n));
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let u = &train.utterances[i];
            let z = match &mut train_feats {
                Some(f) => g.constant(f[i].clone()),
                None => {
                    let wave = g.constant(Tensor::new(vec![u.samples.len(), 1], u.samples.clone())?);
                    forward_features(model, &mb, wave)?.1
                }
            };
            let logits = probe_logits(&pb, z, cfg)?;
            losses.push(ctc_loss_graph(logits, &u.transcript.0).map_err(|e| match e {
                Error::Data(d) => Error::Data(format!("utterance {}: {d}", u.id)),
                other => other,
            })?);
        }
        let mut total = losses[0];
        for l in &losses[1..] {
            total = total.add(*l)?;
        }
        let loss = total.scale(1.0 / losses.len() as f32);
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite probe loss at step {step}")));
        }
        g.backward(loss)?;
        let mut grads = pb.grads();
        let mut mgrads = ParamSet::new();
        if finetune {
            for (name, t) in mb.grads().iter() {
                if model_trains(name) {
                    mgrads.insert(name.clone(), t.clone());
                }
            }
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        adam_step(&mut probe, &grads, &mut probe_adam, &cfg.adam)?;
        if finetune {
            clip_global_norm(&mut mgrads, cfg.clip_norm);
            adam_step(&mut model_params, &mgrads, &mut model_adam, &model_hyper)?;
        }
        trace.push((step, value));
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let d = dev_per(&probe, &model_params)?;
            if d < best.0 {
                best = (d, step, probe.clone(), model_params.clone());
            }
        }
    }
    let (dev_per, best_step, probe, params) = best;
    Ok(ProbeOutcome {
        probe,
        params,
        best_step,
        dev_per,
        trace,
        warnings,
    })
}
