//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any of them fails.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::cell::{OnceCell, RefCell};
use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cpcx_core::abx::{abx_score, dtw_cosine_distance, AbxMode, AbxOptions, AbxSegment, Aggregation};
use cpcx_core::data::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cpcx_core::data::synth::{synth_dataset, SynthConfig};
use cpcx_core::data::Dataset;
use cpcx_core::encoder::{encode, EncoderConfig};
use cpcx_core::gradsuite::{run_gradient_suite, MODEL_TOLERANCE, PRIMITIVE_TOLERANCE};
use cpcx_core::loss::{info_nce, sample_negative_set, BatchLayout, NegativeOptions, NegativeSet};
use cpcx_core::model::ModelConfig;
use cpcx_core::optim::AdamConfig;
use cpcx_core::params::ParamSet;
use cpcx_core::predictor::{predict, PredictorKind};
use cpcx_core::probe::{ctc_loss, edit_distance, evaluate_per, train_probe, ProbeConfig, ProbeMode};
use cpcx_core::sequence::{context, RecurrenceKind};
use cpcx_core::tensor::{concat_rows, Graph, Tensor, Var};
use cpcx_core::trainer::{StepRecord, TrainConfig, TrainData, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_SUITE_BUDGET: Duration = Duration::from_secs(60);
const LOSS_TOLERANCE: f64 = 1e-6;
const CTC_TOLERANCE: f64 = 1e-5;
const DTW_TOLERANCE: f64 = 1e-9;
const CHANCE_BAND: f64 = 3.0;
/// Pretrained frozen probe must beat the random-init probe by this much PER.
const PER_MARGIN: f64 = 0.20;
const PRETRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const PRETRAIN_STEPS: u64 = 2000;
const RANDOM_INIT_SEED: u64 = 99;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn rand_f32(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let entries = run_gradient_suite().map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    for e in &entries {
        ensure(e.passed, format!("{}", e.line()))?;
        ensure(e.tolerance <= MODEL_TOLERANCE, format!("{} tolerance too loose", e.name))?;
    }
    ensure(PRIMITIVE_TOLERANCE <= 1e-6, "primitive tolerance above 1e-6")?;
    ensure(elapsed < GRAD_SUITE_BUDGET, format!("took {elapsed:?}"))?;
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    Ok(format!("{} checks, worst rel error {worst:.2e}, {:.1}s", entries.len(), elapsed.as_secs_f64()))
}

fn geometry() -> Outcome {
    let model = ModelConfig::new(8, 2, RecurrenceKind::Lstm, PredictorKind::Linear);
    let params = model.init_params::<f32>(&mut ChaCha8Rng::seed_from_u64(0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, want) in [(16000, 100), (20480, 128)] {
        let x: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = encode(&x, &model.encoder, &params).map_err(|e| e.to_string())?;
        ensure(out.len() == want, format!("{n} samples gave {} frames", out.len()))?;
        ensure(EncoderConfig::with_channels(8).output_len(n) == Some(want), "length formula")?;
    }
    Ok("16000 -> 100, 20480 -> 128".into())
}

fn nce(preds: &[Vec<Tensor<f64>>], targets: &[Tensor<f64>], negs: &NegativeSet) -> f64 {
    let g = Graph::new();
    let p: Vec<Vec<Var<f64>>> = preds.iter().map(|w| w.iter().map(|t| g.constant(t.clone())).collect()).collect();
    let z: Vec<Var<f64>> = targets.iter().map(|t| g.constant(t.clone())).collect();
    let v = info_nce(&p, &z, negs).unwrap().loss.item();
    v
}

fn loss_anchors() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n_neg in [1, 4, 16, 128] {
        let layout = BatchLayout::new(vec![0, 0], 10);
        let negs = sample_negative_set(&layout, 2, n_neg, NegativeOptions::default(), &mut rng).map_err(|e| e.to_string())?;
        let targets = vec![rand_tensor(10, 3, &mut rng, 1.0), rand_tensor(10, 3, &mut rng, 1.0)];
        let preds = vec![vec![Tensor::zeros(vec![10, 3]); 2]; 2];
        let loss = nce(&preds, &targets, &negs);
        let want = ((n_neg + 1) as f64).ln();
        ensure((loss - want).abs() < LOSS_TOLERANCE, format!("N={n_neg}: {loss} vs {want}"))?;
    }
    let targets = vec![Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap()];
    let preds = vec![vec![Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()]];
    let negs = NegativeSet {
        n_neg: 1,
        horizon: 1,
        positions: 1,
        windows: 1,
        indices: vec![0],
    };
    let loss = nce(&preds, &targets, &negs);
    let want = (1.0 + (-1.0f64).exp()).ln();
    ensure((loss - want).abs() < LOSS_TOLERANCE, format!("two-candidate: {loss} vs {want}"))?;
    Ok("ln(N+1) for N in 1,4,16,128 and ln(1+e^-1)".into())
}

fn ctc_and_per() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut feasible = 0;
    for _ in 0..200 {
        let u = rng.gen_range(1..=6);
        let p = rng.gen_range(1..=3);
        let l = rng.gen_range(1..=3);
        let labels: Vec<usize> = (0..l).map(|_| rng.gen_range(0..p)).collect();
        let logits = rand_tensor(u, p + 1, &mut rng, 3.0);
        let total = oracles::ctc_enumerate(&logits, &labels);
        match ctc_loss(&logits, &labels) {
            Ok((loss, _)) => {
                feasible += 1;
                worst = worst.max((loss + total.ln()).abs());
            }
            Err(_) => ensure(total == 0.0, "feasible instance rejected")?,
        }
    }
    ensure(worst < CTC_TOLERANCE, format!("max deviation {worst:.2e}"))?;
    for _ in 0..500 {
        let hyp: Vec<usize> = (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(0..4)).collect();
        let reference: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..4)).collect();
        ensure(
            edit_distance(&hyp, &reference) == oracles::levenshtein(&hyp, &reference),
            format!("{hyp:?} vs {reference:?}"),
        )?;
    }
    Ok(format!("{feasible} feasible instances, max deviation {worst:.2e}; 500 edit distances exact"))
}

fn seg(features: Tensor<f32>, category: usize, speaker: &str) -> AbxSegment {
    let end = features.rows();
    AbxSegment {
        features,
        category,
        speaker: speaker.into(),
        utterance: "u".into(),
        start: 0,
        end,
        context: None,
    }
}

fn abx() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let a = rand_f32(rng.gen_range(1..=5), 3, &mut rng);
        let b = rand_f32(rng.gen_range(1..=5), 3, &mut rng);
        let got = dtw_cosine_distance(&a, &b).map_err(|e| e.to_string())?;
        ensure((got - oracles::dtw_brute(&a, &b)).abs() < DTW_TOLERANCE, "dtw differs from path enumeration")?;
    }
    for (n, speakers, cats) in [(24, 2, 3), (50, 3, 4)] {
        let segs: Vec<_> = (0..n)
            .map(|i| {
                let mut f = rand_f32(rng.gen_range(2..=4), 3, &mut rng);
                let c = i % cats;
                for r in 0..f.rows() {
                    f.data_mut()[r * 3 + c % 3] += 0.8;
                }
                seg(f, c, &format!("s{}", (i / cats) % speakers))
            })
            .collect();
        for mode in [AbxMode::Within, AbxMode::Across] {
            for aggregation in [Aggregation::PairsThenSpeakers, Aggregation::SpeakersThenPairs] {
                let opts = AbxOptions {
                    aggregation,
                    triplet_cap: None,
                    ..AbxOptions::new(mode)
                };
                let got = abx_score(&segs, &opts).map_err(|e| e.to_string())?.error;
                let want = oracles::abx_brute(&segs, mode, aggregation).0;
                ensure(got == want, format!("{mode:?} {aggregation:?}: {got} vs {want}"))?;
            }
        }
    }
    let mut separated = Vec::new();
    for spk in ["a", "b"] {
        for c in 0..3 {
            for len in 2..5 {
                let mut f = Tensor::zeros(vec![len, 3]);
                for r in 0..len {
                    f.data_mut()[r * 3 + c] = 1.0 + r as f32;
                }
                separated.push(seg(f, c, spk));
            }
        }
    }
    for mode in [AbxMode::Within, AbxMode::Across] {
        let opts = AbxOptions { triplet_cap: None, ..AbxOptions::new(mode) };
        let e = abx_score(&separated, &opts).map_err(|e| e.to_string())?.error;
        ensure(e == 0.0, format!("separated {mode:?} scored {e}"))?;
    }
    let noise: Vec<_> = (0..80).map(|i| seg(rand_f32(rng.gen_range(2..6), 8, &mut rng), i % 2, "s")).collect();
    let opts = AbxOptions {
        triplet_cap: Some(1000),
        seed: 5,
        ..AbxOptions::new(AbxMode::Within)
    };
    let report = abx_score(&noise, &opts).map_err(|e| e.to_string())?;
    ensure(report.triplets >= 2000, format!("only {} triplets", report.triplets))?;
    ensure((report.error - 50.0).abs() <= CHANCE_BAND, format!("random features scored {}", report.error))?;
    Ok(format!("oracle exact, separated 0.0, random {:.2} over {} triplets", report.error, report.triplets))
}

fn perturb_after(x: &Tensor<f64>, t: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut y = x.clone();
    let c = y.cols();
    for v in &mut y.data_mut()[(t + 1) * c..] {
        *v += rng.gen_range(-5.0..5.0);
    }
    y
}

fn causality() -> Outcome {
    let (frames, c) = (12, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in [RecurrenceKind::Lstm, RecurrenceKind::Gru] {
        let cfg = ModelConfig::new(c, 2, kind, PredictorKind::Linear);
        let params = cfg.init_params::<f64>(&mut rng);
        let x = rand_tensor(frames, c, &mut rng, 1.0);
        let base = context(&x, &cfg.recurrence, &params).map_err(|e| e.to_string())?.z;
        for t in 0..frames - 1 {
            let z = context(&perturb_after(&x, t, &mut rng), &cfg.recurrence, &params).unwrap().z;
            for s in 0..=t {
                ensure(z.row(s) == base.row(s), format!("{kind:?} row {s} moved"))?;
            }
        }
    }
    for kind in PredictorKind::ALL {
        let mut cfg = ModelConfig::new(c, 3, RecurrenceKind::Lstm, kind);
        cfg.predictor.heads = 2;
        let params = cfg.init_params::<f64>(&mut rng);
        let z = rand_tensor(frames, c, &mut rng, 1.0);
        let base = predict(&z, &cfg.predictor, &params).map_err(|e| e.to_string())?;
        for t in 0..frames - 1 {
            let moved = predict(&perturb_after(&z, t, &mut rng), &cfg.predictor, &params).unwrap();
            for (k, (m, b)) in moved.iter().zip(&base).enumerate() {
                for s in 0..=t {
                    ensure(m.row(s) == b.row(s), format!("{kind:?} k={} row {s} moved", k + 1))?;
                }
            }
        }
    }
    Ok("lstm, gru and all four predictors unchanged under future edits".into())
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rows, c) = (6, 5);
    let gain = Tensor::new(vec![c], (0..c).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    let bias = Tensor::new(vec![c], (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
    let norm = |x: Tensor<f64>| {
        let g = Graph::new();
        let v = g
            .constant(x)
            .channel_norm(g.constant(gain.clone()), g.constant(bias.clone()), 1e-5)
            .unwrap()
            .value()
            .clone();
        v
    };
    let x = rand_tensor(rows, c, &mut rng, 3.0);
    let base = norm(x.clone());
    for t in 0..rows {
        let mut y = x.clone();
        for other in (0..rows).filter(|&r| r != t) {
            for j in 0..c {
                y.data_mut()[other * c + j] += rng.gen_range(-10.0..10.0);
            }
        }
        ensure(norm(y).row(t) == base.row(t), format!("row {t} depends on other frames"))?;
    }
    let other = rand_tensor(5, c, &mut rng, 9.0);
    let g = Graph::new();
    let batch = concat_rows(&[g.constant(x.clone()), g.constant(other)]).unwrap();
    let together = batch
        .channel_norm(g.constant(gain.clone()), g.constant(bias.clone()), 1e-5)
        .unwrap()
        .value()
        .clone();
    for t in 0..rows {
        ensure(together.row(t) == base.row(t), format!("row {t} depends on the batch"))?;
    }
    Ok("per-frame outputs independent of other frames and batch members".into())
}

struct Corpus {
    train: Dataset,
    dev: Dataset,
    test: Dataset,
}

fn corpus() -> Corpus {
    let data = synth_dataset(&SynthConfig::default()).unwrap().dataset;
    let set = |s: &[&str]| data.subset(&s.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>());
    Corpus {
        train: set(&["spk0", "spk1"]),
        dev: set(&["spk2"]),
        test: set(&["spk3"]),
    }
}

fn probe_config() -> ProbeConfig {
    ProbeConfig {
        concat_frames: 8,
        stride: 4,
        steps: 300,
        eval_interval: 50,
        batch_size: 8,
        adam: AdamConfig { lr: 1e-3, ..Default::default() },
        ..ProbeConfig::default()
    }
}

struct Pretrained {
    model: ModelConfig,
    params: ParamSet<f32>,
    frozen: cpcx_core::probe::ProbeOutcome,
    frozen_test: f64,
}

fn learning(c: &Corpus, slot: &mut Option<Pretrained>) -> Outcome {
    let model = ModelConfig::new(32, 4, RecurrenceKind::Lstm, PredictorKind::Linear);
    let train = TrainConfig {
        window_samples: 32 * 160,
        batch_size: 8,
        n_neg: 16,
        max_steps: PRETRAIN_STEPS,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let mut trainer = Trainer::new(model, train).map_err(|e| e.to_string())?;
    let data = TrainData::new(&c.train, &trainer.model, &trainer.train).map_err(|e| e.to_string())?;
    let mut last = None;
    trainer
        .run(
            &data,
            |r| {
                last = Some(r.clone());
                Ok(())
            },
            |_| Ok(()),
        )
        .map_err(|e| e.to_string())?;
    let pretrain_time = t0.elapsed();
    ensure(pretrain_time < PRETRAIN_BUDGET, format!("pretraining took {pretrain_time:?}"))?;

    let cfg = probe_config();
    let model = trainer.model.clone();
    let frozen = train_probe(&model, &trainer.params, None, &c.train, &c.dev, &cfg).map_err(|e| e.to_string())?;
    let frozen_test = evaluate_per(&model, &frozen.params, &frozen.probe, &c.test, &cfg).map_err(|e| e.to_string())?;

    let random: ParamSet<f32> = model.init_params(&mut ChaCha8Rng::seed_from_u64(RANDOM_INIT_SEED));
    let base = train_probe(&model, &random, None, &c.train, &c.dev, &cfg).map_err(|e| e.to_string())?;
    let base_test = evaluate_per(&model, &base.params, &base.probe, &c.test, &cfg).map_err(|e| e.to_string())?;

    let last = last.ok_or("no training steps ran")?;
    let summary = format!(
        "test PER pretrained {frozen_test:.4} vs random {base_test:.4} (final loss {:.3}, pretrain {:.0}s)",
        last.loss,
        pretrain_time.as_secs_f64()
    );
    *slot = Some(Pretrained {
        model,
        params: trainer.params.clone(),
        frozen,
        frozen_test,
    });
    ensure(frozen_test < base_test && base_test - frozen_test >= PER_MARGIN, summary.clone())?;
    Ok(summary)
}

fn finetuning(c: &Corpus, pre: Option<&Pretrained>) -> Outcome {
    let pre = pre.ok_or("needs the pretrained model from the previous criterion")?;
    let cfg = ProbeConfig {
        mode: ProbeMode::Finetune,
        steps: 100,
        eval_interval: 25,
        ..probe_config()
    };
    let tuned = train_probe(&pre.model, &pre.params, Some(&pre.frozen.probe), &c.train, &c.dev, &cfg)
        .map_err(|e| e.to_string())?;
    let test = evaluate_per(&pre.model, &tuned.params, &tuned.probe, &c.test, &cfg).map_err(|e| e.to_string())?;
    let summary = format!("test PER finetuned {test:.4} vs frozen {:.4}", pre.frozen_test);
    ensure(test <= pre.frozen_test, summary.clone())?;
    Ok(summary)
}

fn train_run(model: &ModelConfig, train: &TrainConfig, data: &Dataset, stop: u64) -> (Vec<StepRecord>, Trainer) {
    let mut t = Trainer::new(model.clone(), TrainConfig { max_steps: stop, ..train.clone() }).unwrap();
    let d = TrainData::new(data, &t.model, &t.train).unwrap();
    let mut trace = Vec::new();
    t.run(
        &d,
        |r| {
            trace.push(r.clone());
            Ok(())
        },
        |_| Ok(()),
    )
    .unwrap();
    (trace, t)
}

fn reproducibility() -> Outcome {
    let data = synth_dataset(&SynthConfig {
        speakers: 2,
        classes: 3,
        utterances_per_speaker: 3,
        min_frames: 60,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset;
    let mut model = ModelConfig::new(8, 2, RecurrenceKind::Lstm, PredictorKind::Transformer);
    model.predictor.heads = 2;
    let train = TrainConfig {
        window_samples: 16 * 160,
        batch_size: 3,
        n_neg: 4,
        eval_interval: 0,
        ..TrainConfig::default()
    };
    let (ta, a) = train_run(&model, &train, &data, 6);
    let (tb, b) = train_run(&model, &train, &data, 6);
    let bytes = a.to_checkpoint().to_bytes();
    ensure(ta == tb && bytes == b.to_checkpoint().to_bytes(), "same seed gave different bits")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("half.cpcx");
    let (mut trace, first) = train_run(&model, &train, &data, 3);
    save_checkpoint(&first.to_checkpoint(), &path).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::from_checkpoint(&load_checkpoint(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    resumed.train.max_steps = 6;
    let d = TrainData::new(&data, &resumed.model, &resumed.train).unwrap();
    resumed
        .run(
            &d,
            |r| {
                trace.push(r.clone());
                Ok(())
            },
            |_| Ok(()),
        )
        .map_err(|e| e.to_string())?;
    ensure(trace == ta, "resumed trace differs")?;
    ensure(resumed.to_checkpoint().to_bytes() == bytes, "resumed checkpoint differs")?;

    let mut bad = std::fs::read(&path).unwrap();
    let at = bad.len() / 2;
    bad[at] ^= 0x10;
    std::fs::write(&path, &bad).unwrap();
    ensure(load_checkpoint(&path).is_err(), "corrupted checkpoint loaded")?;
    ensure(Checkpoint::from_bytes(&bad, "mem".as_ref()).is_err(), "corrupted bytes parsed")?;
    Ok("bit-identical reruns, 3+3 resume equals 6 steps, corruption rejected".into())
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cpcx"))
        .args(args)
        .env_remove("CPCX_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("cpcx {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let out = dir.path().join("ablate");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    run_cli(&["synth-data", "--out", &p(&data), "--utterances", "6", "--min-frames", "150", "--classes", "4"])?;
    run_cli(&["make-splits", "--data", &p(&data), "--ratios", "2,1,1"])?;
    run_cli(&[
        "ablate", "--data", &p(&data), "--out", &p(&out), "--dim", "16", "--horizon", "3", "--heads", "2",
        "--window", "3200", "--batch", "4", "--negatives", "8", "--steps", "40", "--cap", "200",
    ])?;
    let table = std::fs::read_to_string(out.join("table.tsv")).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    ensure(rows.len() == 4, format!("{} rows", rows.len()))?;
    for (row, kind) in rows.iter().zip(["linear", "ffd", "conv8", "transformer"]) {
        ensure(row.len() == 5 && row[0] == kind, format!("bad row {row:?}"))?;
        let v: Vec<f64> = row[1..].iter().map(|s| s.parse().unwrap_or(f64::NAN)).collect();
        ensure(v[0].is_finite(), format!("{kind}: loss {}", v[0]))?;
        ensure((0.0..=1.0).contains(&v[1]), format!("{kind}: accuracy {}", v[1]))?;
        ensure(v[2..].iter().all(|e| (0.0..=100.0).contains(e)), format!("{kind}: abx {:?}", &v[2..]))?;
        let trace = out.join(format!("trace_{kind}.tsv"));
        let lines = std::fs::read_to_string(&trace).map_err(|e| format!("{}: {e}", trace.display()))?.lines().count();
        ensure(lines == 41, format!("{kind}: trace has {lines} lines"))?;
    }
    Ok("four valid rows and four traces".into())
}

fn main() {
    let shared = OnceCell::new();
    let pretrained = RefCell::new(None);
    let criteria: Vec<(&str, Box<dyn FnMut() -> Outcome + '_>)> = vec![
        ("gradient checks", Box::new(gradients)),
        ("encoder geometry", Box::new(geometry)),
        ("contrastive loss anchors", Box::new(loss_anchors)),
        ("ctc and edit distance oracles", Box::new(ctc_and_per)),
        ("abx oracles", Box::new(abx)),
        ("causality", Box::new(causality)),
        ("normalization locality", Box::new(normalization)),
        ("pretraining beats random init", Box::new(|| learning(shared.get_or_init(corpus), &mut pretrained.borrow_mut()))),
        ("finetuning does not hurt", Box::new(|| finetuning(shared.get_or_init(corpus), pretrained.borrow().as_ref()))),
        ("determinism and resume", Box::new(reproducibility)),
        ("predictor ablation", Box::new(ablation)),
    ];
    let mut failures = 0;
    for (i, (name, mut check)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check())).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failures += 1;
                println!("criterion {:>2} FAIL  {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
