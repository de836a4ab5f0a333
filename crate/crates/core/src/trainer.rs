//! Pretraining loop: contrastive (InfoNCE) or supervised frame classification,
//! Adam updates, checkpointing and exact resumption.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::checkpoint::{ArrayData, Checkpoint, NamedArray};
use crate::data::Dataset;
use crate::encoder::HOP;
use crate::error::{Error, Result};
use crate::loss::{info_nce, sample_negative_set, BatchLayout, NegativeOptions};
use crate::model::{forward_features, parse_kv, parse_num, ModelConfig};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::predictor::{predict_graph, Mode};
use crate::tensor::{concat_rows, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Cpc,
    Supervised,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Cpc => "cpc",
            TrainMode::Supervised => "supervised",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cpc" => Ok(TrainMode::Cpc),
            "supervised" => Ok(TrainMode::Supervised),
            other => Err(Error::Config(format!("unknown training mode `{other}` (expected cpc or supervised)"))),
        }
    }

    /// Whether parameter `name` is updated in this mode.
    pub fn trains(self, name: &str) -> bool {
        match self {
            TrainMode::Cpc => !name.starts_with("head."),
            TrainMode::Supervised => !name.starts_with("pred."),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub window_samples: usize,
    pub batch_size: usize,
    pub n_neg: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Steps between checkpoints (0: only at the end).
    pub eval_interval: u64,
    pub mode: TrainMode,
    pub shared_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window_samples: 20480,
            batch_size: 8,
            n_neg: 128,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            max_steps: 2000,
            seed: 0,
            eval_interval: 500,
            mode: TrainMode::Cpc,
            shared_negatives: false,
        }
    }
}

impl TrainConfig {
    pub fn window_frames(&self) -> usize {
        self.window_samples / HOP
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.window_samples == 0 || self.window_samples % HOP != 0 {
            return Err(Error::Config(format!(
                "window_samples = {} must be a positive multiple of {HOP}",
                self.window_samples
            )));
        }
        if self.mode == TrainMode::Cpc && model.predictor.horizon >= self.window_frames() {
            return Err(Error::Config(format!(
                "horizon K = {} must be below the window length of {} frames",
                model.predictor.horizon,
                self.window_frames()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.mode == TrainMode::Cpc && self.n_neg == 0 {
            return Err(Error::Config("n_neg must be at least 1".into()));
        }
        if self.mode == TrainMode::Supervised && model.head_classes == 0 {
            return Err(Error::Config("supervised mode needs head.classes > 0".into()));
        }
        if !(self.adam.lr >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr must be non-negative and clip_norm positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "train.mode={}", self.mode.as_str());
        let _ = writeln!(s, "train.window_samples={}", self.window_samples);
        let _ = writeln!(s, "train.batch_size={}", self.batch_size);
        let _ = writeln!(s, "train.n_neg={}", self.n_neg);
        let _ = writeln!(s, "train.shared_negatives={}", self.shared_negatives);
        let _ = writeln!(s, "train.lr={:e}", self.adam.lr);
        let _ = writeln!(s, "train.beta1={}", self.adam.beta1);
        let _ = writeln!(s, "train.beta2={}", self.adam.beta2);
        let _ = writeln!(s, "train.eps={:e}", self.adam.eps);
        let _ = writeln!(s, "train.clip_norm={}", self.clip_norm);
        let _ = writeln!(s, "train.max_steps={}", self.max_steps);
        let _ = writeln!(s, "train.eval_interval={}", self.eval_interval);
        let _ = writeln!(s, "train.seed={}", self.seed);
        s
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Config(format!("missing config key `{k}`")));
        let num = |k: &str| -> Result<f64> { parse_num(k, get(k)?) };
        Ok(Self {
            window_samples: parse_num("train.window_samples", get("train.window_samples")?)?,
            batch_size: parse_num("train.batch_size", get("train.batch_size")?)?,
            n_neg: parse_num("train.n_neg", get("train.n_neg")?)?,
            adam: AdamConfig {
                lr: num("train.lr")?,
                beta1: num("train.beta1")?,
                beta2: num("train.beta2")?,
                eps: num("train.eps")?,
            },
            clip_norm: num("train.clip_norm")?,
            max_steps: parse_num("train.max_steps", get("train.max_steps")?)?,
            seed: parse_num("train.seed", get("train.seed")?)?,
            eval_interval: parse_num("train.eval_interval", get("train.eval_interval")?)?,
            mode: TrainMode::parse(get("train.mode")?)?,
            shared_negatives: parse_num("train.shared_negatives", get("train.shared_negatives")?)?,
        })
    }
}

/// One line of the loss trace.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the update this record describes.
    pub step: u64,
    pub loss: f64,
    /// Per-horizon accuracy in contrastive mode, frame accuracy in supervised mode.
    pub accuracy: Vec<f64>,
}

impl StepRecord {
    /// `step<TAB>loss<TAB>acc...`, with shortest round-trip float formatting.
    pub fn trace_line(&self) -> String {
        let mut s = format!("{}\t{}", self.step, self.loss);
        for a in &self.accuracy {
            let _ = write!(s, "\t{a}");
        }
        s
    }
}

/// Utterances long enough for one window, plus a dense speaker index.
pub struct TrainData<'a> {
    dataset: &'a Dataset,
    eligible: Vec<usize>,
    speaker_index: Vec<usize>,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a Dataset, model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let frames = train.window_frames();
        let speakers = dataset.speakers();
        let eligible: Vec<usize> = (0..dataset.utterances.len())
            .filter(|&i| dataset.utterances[i].frames() >= frames)
            .collect();
        if eligible.is_empty() {
            return Err(Error::Data(format!(
                "no utterance is at least {} samples long",
                train.window_samples
            )));
        }
        if train.mode == TrainMode::Supervised {
            for u in &dataset.utterances {
                let labels = u.aligned.as_ref().ok_or_else(|| {
                    Error::Data(format!("supervised mode needs aligned labels; utterance {} has none", u.id))
                })?;
                if labels.len() != u.frames() {
                    return Err(Error::Data(format!(
                        "utterance {}: {} labels for {} frames",
                        u.id,
                        labels.len(),
                        u.frames()
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= model.head_classes) {
                    return Err(Error::Data(format!(
                        "utterance {}: label {bad} outside the {} head classes",
                        u.id, model.head_classes
                    )));
                }
            }
        }
        let speaker_index = dataset
            .utterances
            .iter()
            .map(|u| speakers.binary_search(&u.speaker).expect("speaker listed"))
            .collect();
        Ok(Self {
            dataset,
            eligible,
            speaker_index,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Window {
    utt: usize,
    start_frame: usize,
}

/// Mutable training state. Everything needed for bit-exact resumption lives here.
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
    /// Updates applied so far.
    pub step: u64,
    rng: ChaCha8Rng,
}

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

impl Trainer {
    /// Fresh parameters drawn from `train.seed`.
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate(&model)?;
        let mut init = ChaCha8Rng::seed_from_u64(train.seed);
        init.set_stream(INIT_STREAM);
        let params = model.init_params(&mut init);
        Ok(Self::with_params(model, train, params))
    }

    fn with_params(model: ModelConfig, train: TrainConfig, params: ParamSet<f32>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(TRAIN_STREAM);
        Self {
            adam: AdamState::new(&params),
            model,
            train,
            params,
            step: 0,
            rng,
        }
    }

    fn sample_windows(&mut self, data: &TrainData) -> Vec<Window> {
        let frames = self.train.window_frames();
        (0..self.train.batch_size)
            .map(|_| {
                let utt = data.eligible[self.rng.gen_range(0..data.eligible.len())];
                let slack = data.dataset.utterances[utt].frames() - frames;
                Window {
                    utt,
                    start_frame: self.rng.gen_range(0..=slack),
                }
            })
            .collect()
    }

    fn describe(&self, data: &TrainData, windows: &[Window]) -> String {
        windows
            .iter()
            .map(|w| {
                format!(
                    "{}@{}",
                    data.dataset.utterances[w.utt].id,
                    w.start_frame * HOP
                )
            })
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Samples one batch and applies one update.
    pub fn step(&mut self, data: &TrainData) -> Result<StepRecord> {
        let windows = self.sample_windows(data);
        let frames = self.train.window_frames();
        let mode = self.train.mode;
        let g = Graph::new();
        let bound = self.params.bind(&g, |n| mode.trains(n));
        let mut encs = Vec::with_capacity(windows.len());
        let mut zs = Vec::with_capacity(windows.len());
        for w in &windows {
            let u = &data.dataset.utterances[w.utt];
            let start = w.start_frame * HOP;
            let wave = g.constant(Tensor::new(
                vec![frames * HOP, 1],
                u.samples[start..start + frames * HOP].to_vec(),
            )?);
            let (enc, z) = forward_features(&self.model, &bound, wave)?;
            encs.push(enc);
            zs.push(z);
        }
        let (loss, accuracy) = match mode {
            TrainMode::Cpc => {
                let mut preds = Vec::with_capacity(windows.len());
                for &z in &zs {
                    preds.push(predict_graph(&self.model.predictor, &bound, z, &mut Mode::Train(&mut self.rng))?.preds);
                }
                let layout = BatchLayout::new(windows.iter().map(|w| data.speaker_index[w.utt]).collect(), frames);
                let options = NegativeOptions {
                    shared_across_k: self.train.shared_negatives,
                };
                let negs = sample_negative_set(&layout, self.model.predictor.horizon, self.train.n_neg, options, &mut self.rng)?;
                let report = info_nce(&preds, &encs, &negs)?;
                (report.loss, report.accuracy_per_k)
            }
            TrainMode::Supervised => {
                let labels: Vec<Vec<usize>> = windows
                    .iter()
                    .map(|w| {
                        let a = data.dataset.utterances[w.utt].aligned.as_ref().expect("checked in TrainData");
                        a[w.start_frame..w.start_frame + frames].to_vec()
                    })
                    .collect();
                frame_cross_entropy(&bound.get("head.weight")?, &bound.get("head.bias")?, &zs, &labels)?
            }
        };
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {value} at step {}; batch (utterance@sample offset): {}",
                self.step + 1,
                self.describe(data, &windows)
            )));
        }
        g.backward(loss)?;
        let mut grads = ParamSet::new();
        for (name, t) in bound.grads().iter() {
            if mode.trains(name) {
                grads.insert(name.clone(), t.clone());
            }
        }
        clip_global_norm(&mut grads, self.train.clip_norm);
        adam_step(&mut self.params, &grads, &mut self.adam, &self.train.adam).map_err(|e| {
            Error::Numerical(format!("{e} at step {}; batch: {}", self.step + 1, self.describe(data, &windows)))
        })?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss: value,
            accuracy,
        })
    }

    /// Steps until `train.max_steps`, reporting every record and calling
    /// `on_checkpoint` every `eval_interval` steps.
    pub fn run(
        &mut self,
        data: &TrainData,
        mut on_record: impl FnMut(&StepRecord) -> Result<()>,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.train.max_steps {
            let rec = self.step(data)?;
            on_record(&rec)?;
            if self.train.eval_interval > 0 && self.step % self.train.eval_interval == 0 && self.step < self.train.max_steps {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut arrays = Vec::new();
        let push = |arrays: &mut Vec<NamedArray>, prefix: &str, set: &ParamSet<f32>| {
            for (name, t) in set.iter() {
                arrays.push(NamedArray {
                    name: format!("{prefix}/{name}"),
                    dims: t.shape().to_vec(),
                    data: ArrayData::F32(t.data().to_vec()),
                });
            }
        };
        push(&mut arrays, "param", &self.params);
        push(&mut arrays, "adam.m", &self.adam.m);
        push(&mut arrays, "adam.v", &self.adam.v);
        arrays.push(NamedArray {
            name: "train/step".into(),
            dims: vec![2],
            data: ArrayData::U64(vec![self.step, self.adam.t]),
        });
        let mut rng = self.rng.get_seed().to_vec();
        rng.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        rng.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        arrays.push(NamedArray {
            name: "train/rng".into(),
            dims: vec![rng.len()],
            data: ArrayData::U8(rng),
        });
        Checkpoint {
            config: format!("{}{}", self.model.to_text(), self.train.to_text()),
            arrays,
        }
    }

    /// Restores the exact state saved by [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kv = parse_kv(&ckpt.config)?;
        let model = ModelConfig::from_kv(&kv)?;
        let train = TrainConfig::from_kv(&kv)?;
        train.validate(&model)?;
        let params = read_set(ckpt, "param")?;
        let m = read_set(ckpt, "adam.m")?;
        let v = read_set(ckpt, "adam.v")?;
        let steps = match ckpt.get("train/step").map(|a| &a.data) {
            Some(ArrayData::U64(s)) if s.len() == 2 => s.clone(),
            _ => return Err(Error::Config("checkpoint lacks train/step".into())),
        };
        let rng = match ckpt.get("train/rng").map(|a| &a.data) {
            Some(ArrayData::U8(b)) if b.len() == 56 => {
                let mut r = ChaCha8Rng::from_seed(b[..32].try_into().unwrap());
                r.set_stream(u64::from_le_bytes(b[48..56].try_into().unwrap()));
                r.set_word_pos(u128::from_le_bytes(b[32..48].try_into().unwrap()));
                r
            }
            _ => return Err(Error::Config("checkpoint lacks train/rng".into())),
        };
        Ok(Self {
            model,
            train,
            params,
            adam: AdamState { m, v, t: steps[1] },
            step: steps[0],
            rng,
        })
    }
}

fn read_set(ckpt: &Checkpoint, prefix: &str) -> Result<ParamSet<f32>> {
    let mut set = ParamSet::new();
    let lead = format!("{prefix}/");
    for a in &ckpt.arrays {
        if let Some(name) = a.name.strip_prefix(&lead) {
            let ArrayData::F32(d) = &a.data else {
                return Err(Error::Config(format!("array `{}` is not f32", a.name)));
            };
            set.insert(name, Tensor::new(a.dims.clone(), d.clone())?);
        }
    }
    Ok(set)
}

/// Model configuration and parameters stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(ModelConfig, ParamSet<f32>)> {
    let model = ModelConfig::from_kv(&parse_kv(&ckpt.config)?)?;
    let params = read_set(ckpt, "param")?;
    let want = model.init_params::<f32>(&mut ChaCha8Rng::seed_from_u64(0));
    for (name, t) in want.iter() {
        let got = params.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {:?}, the config implies {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok((model, params))
}

/// Mean per-frame cross-entropy of a linear head over context states, and
/// the fraction of frames classified correctly.
pub fn frame_cross_entropy<'g, R: Real>(
    weight: &Var<'g, R>,
    bias: &Var<'g, R>,
    zs: &[Var<'g, R>],
    labels: &[Vec<usize>],
) -> Result<(Var<'g, R>, Vec<f64>)> {
    let mut picked = Vec::with_capacity(zs.len());
    let mut hits = 0usize;
    let mut total = 0usize;
    for (z, lab) in zs.iter().zip(labels) {
        let logits = z.affine(*weight, *bias)?;
        {
            let v = logits.value();
            for (r, &l) in lab.iter().enumerate() {
                hits += (argmax(v.row(r)) == l) as usize;
            }
            total += lab.len();
        }
        let p = logits.log_softmax()?.pick_per_row(lab.clone())?;
        picked.push(p.reshape(vec![lab.len(), 1])?);
    }
    let loss = concat_rows(&picked)?.mean().scale(R::from_f64_lossy(-1.0));
    Ok((loss, vec![hits as f64 / total.max(1) as f64]))
}

pub(crate) fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frame accuracy of the supervised head over whole utterances.
pub fn frame_accuracy(model: &ModelConfig, params: &ParamSet<f32>, dataset: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    let w = params.get("head.weight")?;
    let b = params.get("head.bias")?;
    for u in &dataset.utterances {
        let labels = u
            .aligned
            .as_ref()
            .ok_or_else(|| Error::Data(format!("utterance {} has no aligned labels", u.id)))?;
        let (_, z) = crate::model::features(&u.samples, model, params)?;
        for (t, &l) in labels.iter().enumerate().take(z.frames.rows()) {
            let row = z.frames.row(t);
            let scores: Vec<f32> = (0..w.rows())
                .map(|c| crate::tensor::kernels::dot(row, w.row(c)) + b.data()[c])
                .collect();
            hits += (argmax(&scores) == l) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_dataset, SynthConfig};
    use crate::predictor::PredictorKind;
    use crate::sequence::RecurrenceKind;

    fn tiny() -> (Dataset, ModelConfig, TrainConfig) {
        let data = synth_dataset(&SynthConfig {
            speakers: 2,
            classes: 3,
            utterances_per_speaker: 2,
            min_frames: 40,
            ..SynthConfig::default()
        })
        .unwrap()
        .dataset;
        let model = ModelConfig::new(8, 2, RecurrenceKind::Gru, PredictorKind::Linear);
        let train = TrainConfig {
            window_samples: 16 * HOP,
            batch_size: 2,
            n_neg: 4,
            max_steps: 3,
            ..TrainConfig::default()
        };
        (data, model, train)
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (data, model, mut train) = tiny();
        train.adam.lr = 0.0;
        let mut t = Trainer::new(model, train).unwrap();
        let before = t.params.clone();
        let d = TrainData::new(&data, &t.model, &t.train).unwrap();
        t.run(&d, |_| Ok(()), |_| Ok(())).unwrap();
        assert_eq!(t.params, before);
        assert_eq!(t.step, 3);
    }

    #[test]
    fn config_text_round_trip() {
        let (_, model, train) = tiny();
        let t = Trainer::new(model, train.clone()).unwrap();
        let back = Trainer::from_checkpoint(&t.to_checkpoint()).unwrap();
        assert_eq!(back.train, train);
        assert_eq!(back.params, t.params);
    }

    #[test]
    fn short_data_rejected() {
        let (data, model, mut train) = tiny();
        train.window_samples = 1000 * HOP;
        assert!(TrainData::new(&data, &model, &train).is_err());
    }

    #[test]
    fn horizon_must_fit_window() {
        let (_, model, mut train) = tiny();
        train.window_samples = 2 * HOP;
        assert!(Trainer::new(model, train).is_err());
    }
}
