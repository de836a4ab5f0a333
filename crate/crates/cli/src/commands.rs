use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use cpcx_core::ablation::{ablation_table, run_ablation};
use cpcx_core::abx::{abx_score, extract_segments, report_kv, report_text, write_segment_list, AbxMode, AbxOptions, Aggregation};
use cpcx_core::data::checkpoint::{load_checkpoint, save_checkpoint, ArrayData, Checkpoint, NamedArray};
use cpcx_core::data::features::write_features;
use cpcx_core::data::synth::{synth_dataset, SynthConfig};
use cpcx_core::data::{make_splits, write_dataset, Dataset, Inventory, Manifest, Split, MANIFEST_FILE};
use cpcx_core::encoder::NormKind;
use cpcx_core::gradsuite::run_gradient_suite;
use cpcx_core::model::{features, parse_kv, ModelConfig};
use cpcx_core::optim::AdamConfig;
use cpcx_core::params::ParamSet;
use cpcx_core::predictor::PredictorKind;
use cpcx_core::probe::{evaluate_per, train_probe, ProbeConfig, ProbeMode};
use cpcx_core::sequence::RecurrenceKind;
use cpcx_core::trainer::{load_model, StepRecord, TrainConfig, TrainData, TrainMode, Trainer};
use cpcx_core::{Error, Result};

use crate::args::*;

/// Config key recording the phoneme inventory a checkpoint was trained with.
const INVENTORY_KEY: &str = "data.inventory";
pub const RESOLVED_FILE: &str = "config.txt";

pub fn run(cmd: Command, resolved: &str) -> Result<()> {
    match cmd {
        Command::SynthData(a) => synth(a, resolved),
        Command::MakeSplits(a) => splits(a),
        Command::Pretrain(a) => pretrain(a, resolved),
        Command::Probe(a) => probe(a, resolved),
        Command::EvalAbx(a) => eval_abx(a, resolved),
        Command::Extract(a) => extract(a, resolved),
        Command::GradCheck(_) => grad_check(),
        Command::Ablate(a) => ablate(a, resolved),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    if s == "all" {
        return Ok(None);
    }
    Split::parse(s)
        .map(Some)
        .map_err(|_| Error::Config(format!("unknown split `{s}` (expected train, dev, test or all)")))
}

/// Loads the utterances of one manifest split (`all` for every record).
fn load_split(data: &Path, split: &str) -> Result<Dataset> {
    let path = manifest_path(data);
    let manifest = Manifest::load(&path)?;
    let selected = match parse_split(split)? {
        Some(s) => manifest.with_split(s),
        None => manifest,
    };
    if selected.records.is_empty() {
        return Err(Error::Data(format!(
            "split `{split}` of {} is empty (run make-splits first?)",
            path.display()
        )));
    }
    selected.load_dataset()
}

fn tag_inventory(ckpt: &mut Checkpoint, inventory: &Inventory) {
    let _ = writeln!(ckpt.config, "{INVENTORY_KEY}={}", inventory.symbols().join(","));
}

/// Rejects a dataset whose inventory differs from the one the checkpoint saw.
fn check_inventory(ckpt: &Checkpoint, inventory: &Inventory) -> Result<()> {
    let kv = parse_kv(&ckpt.config)?;
    match kv.get(INVENTORY_KEY) {
        Some(v) => {
            let saved: Vec<&str> = v.split(',').collect();
            let have: Vec<&str> = inventory.symbols().iter().map(String::as_str).collect();
            if saved != have {
                return Err(Error::Data(format!(
                    "inventory mismatch: checkpoint has [{}], dataset has [{}]",
                    saved.join(" "),
                    have.join(" ")
                )));
            }
        }
        None => eprintln!("warning: checkpoint records no phoneme inventory; skipping the consistency check"),
    }
    Ok(())
}

fn model_config(m: &ModelArgs, predictor: PredictorKind) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::new(m.dim, m.horizon, RecurrenceKind::parse(&m.recurrence)?, predictor);
    cfg.encoder.norm = NormKind::parse(&m.norm)?;
    cfg.predictor.dropout = m.dropout;
    cfg.predictor.heads = m.heads;
    cfg.predictor.heads_share_trunk = !m.separate_trunks;
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(t: &TrainArgs, mode: TrainMode) -> TrainConfig {
    TrainConfig {
        window_samples: t.window,
        batch_size: t.batch,
        n_neg: t.negatives,
        adam: AdamConfig {
            lr: t.lr,
            ..AdamConfig::default()
        },
        clip_norm: t.clip,
        max_steps: t.steps,
        seed: t.seed,
        eval_interval: t.eval_interval,
        mode,
        shared_negatives: t.shared_negatives,
    }
}

fn synth(a: SynthArgs, resolved: &str) -> Result<()> {
    let cfg = SynthConfig {
        speakers: a.speakers,
        classes: a.classes,
        utterances_per_speaker: a.utterances,
        min_frames: a.min_frames,
        min_unit_frames: a.min_unit_frames,
        max_unit_frames: a.max_unit_frames,
        snr_db: a.snr_db,
        seed: a.seed,
    };
    let synth = synth_dataset(&cfg)?;
    create_dir(&a.out)?;
    let manifest = write_dataset(&a.out, &synth.dataset)?;
    write_file(&a.out.join(RESOLVED_FILE), resolved)?;
    let seconds = synth.dataset.total_samples() as f64 / 16_000.0;
    println!(
        "wrote {} utterances from {} speakers ({seconds:.1} s) to {}",
        manifest.records.len(),
        manifest.speakers().len(),
        a.out.display()
    );
    Ok(())
}

fn splits(a: SplitArgs) -> Result<()> {
    let input = manifest_path(&a.data);
    let manifest = Manifest::load(&input)?;
    let ratios: Vec<f64> = a
        .ratios
        .split(',')
        .map(|r| r.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad --ratios `{}`", a.ratios)))?;
    let ratios: [f64; 3] = ratios
        .try_into()
        .map_err(|_| Error::Config(format!("--ratios needs three comma-separated weights, got `{}`", a.ratios)))?;
    let parts = make_splits(&manifest, ratios, a.seed)?;
    let mut records = manifest.records.clone();
    for r in &mut records {
        r.split = parts
            .iter()
            .find(|p| p.records.iter().any(|x| x.id == r.id))
            .and_then(|p| p.records.first())
            .map(|x| x.split)
            .expect("every record lands in one split");
    }
    let out = a.out.unwrap_or_else(|| input.clone());
    let out_root = out.parent().map(Path::to_path_buf).unwrap_or_default();
    if out_root != manifest.root {
        // Paths in a manifest are relative to its directory.
        let root = fs::canonicalize(&manifest.root).map_err(|e| io_err(&manifest.root, e))?;
        for r in &mut records {
            r.audio = root.join(&r.audio);
            r.transcript = root.join(&r.transcript);
            r.alignment = r.alignment.as_ref().map(|p| root.join(p));
        }
        let inv = manifest.root.join(cpcx_core::data::INVENTORY_FILE);
        let dst = out_root.join(cpcx_core::data::INVENTORY_FILE);
        fs::copy(&inv, &dst).map_err(|e| io_err(&dst, e))?;
    }
    Manifest { root: out_root, records }.save(&out)?;
    for p in &parts {
        let split = p.records[0].split;
        println!("{split}\t{}\t{}", p.speakers().into_iter().collect::<Vec<_>>().join(","), p.records.len());
    }
    Ok(())
}

fn trace_header(trainer: &Trainer) -> String {
    let mut s = String::from("step\tloss");
    match trainer.train.mode {
        TrainMode::Cpc => {
            for k in 1..=trainer.model.predictor.horizon {
                let _ = write!(s, "\tacc_k{k}");
            }
        }
        TrainMode::Supervised => s.push_str("\tacc"),
    }
    s
}

fn pretrain(a: PretrainArgs, resolved: &str) -> Result<()> {
    let dataset = load_split(&a.data, &a.split)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            check_inventory(&ckpt, &dataset.inventory)?;
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            if a.train.steps < t.step {
                return Err(Error::Config(format!(
                    "--steps {} is below the checkpoint's step {}",
                    a.train.steps, t.step
                )));
            }
            t.train.max_steps = a.train.steps;
            t
        }
        None => {
            let mode = TrainMode::parse(&a.mode)?;
            let mut model = model_config(&a.model, PredictorKind::parse(&a.predictor)?)?;
            if mode == TrainMode::Supervised {
                if !dataset.has_alignments() {
                    return Err(Error::Config(
                        "--mode supervised needs frame alignments for every training utterance".into(),
                    ));
                }
                model.head_classes = dataset.inventory.len();
            }
            Trainer::new(model, train_config(&a.train, mode))?
        }
    };
    create_dir(&a.out)?;
    write_file(&a.out.join(RESOLVED_FILE), resolved)?;
    let data = TrainData::new(&dataset, &trainer.model, &trainer.train)?;

    let trace_path = a.out.join("trace.tsv");
    let file = if a.resume.is_some() && trace_path.exists() {
        fs::OpenOptions::new().append(true).open(&trace_path)
    } else {
        fs::File::create(&trace_path)
    }
    .map_err(|e| io_err(&trace_path, e))?;
    let mut trace = BufWriter::new(file);
    if a.resume.is_none() {
        writeln!(trace, "{}", trace_header(&trainer)).map_err(|e| io_err(&trace_path, e))?;
    }

    let inventory = dataset.inventory.clone();
    let out = a.out.clone();
    let interval = trainer.train.eval_interval;
    let started = Instant::now();
    let mut last: Option<StepRecord> = None;
    trainer.run(
        &data,
        |r| {
            writeln!(trace, "{}", r.trace_line()).map_err(|e| io_err(&trace_path, e))?;
            if interval > 0 && r.step % interval == 0 {
                eprintln!(
                    "step {}\tloss {:.4}\tacc {:.4}\t{:.1}s",
                    r.step,
                    r.loss,
                    r.accuracy.first().copied().unwrap_or(0.0),
                    started.elapsed().as_secs_f64()
                );
            }
            last = Some(r.clone());
            Ok(())
        },
        |t| {
            let mut ckpt = t.to_checkpoint();
            tag_inventory(&mut ckpt, &inventory);
            save_checkpoint(&ckpt, &out.join(format!("step_{:06}.cpcx", t.step)))
        },
    )?;
    trace.flush().map_err(|e| io_err(&trace_path, e))?;
    let mut ckpt = trainer.to_checkpoint();
    tag_inventory(&mut ckpt, &inventory);
    let final_path = a.out.join("checkpoint.cpcx");
    save_checkpoint(&ckpt, &final_path)?;
    match last {
        Some(r) => println!("{}", r.trace_line()),
        None => println!("initialised model at step {}", trainer.step),
    }
    eprintln!("wrote {}", final_path.display());
    Ok(())
}

/// Probe classifier (and, after finetuning, the model) as a checkpoint.
fn probe_checkpoint(model: &ModelConfig, params: &ParamSet<f32>, probe: &ParamSet<f32>, inventory: &Inventory) -> Checkpoint {
    let mut arrays = Vec::new();
    for (prefix, set) in [("param", params), ("probe", probe)] {
        for (name, t) in set.iter() {
            arrays.push(NamedArray {
                name: format!("{prefix}/{name}"),
                dims: t.shape().to_vec(),
                data: ArrayData::F32(t.data().to_vec()),
            });
        }
    }
    let mut ckpt = Checkpoint {
        config: model.to_text(),
        arrays,
    };
    tag_inventory(&mut ckpt, inventory);
    ckpt
}

fn probe(a: ProbeArgs, resolved: &str) -> Result<()> {
    let modes: Vec<ProbeMode> = match a.mode.as_str() {
        "both" => vec![ProbeMode::Frozen, ProbeMode::Finetune],
        m => vec![ProbeMode::parse(m)?],
    };
    let ckpt = load_checkpoint(&a.ckpt)?;
    let (model, params) = load_model(&ckpt)?;
    let train = load_split(&a.data, "train")?;
    let dev = load_split(&a.data, "dev")?;
    let test = load_split(&a.data, "test")?;
    check_inventory(&ckpt, &train.inventory)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(&out.join(RESOLVED_FILE), resolved)?;
    }
    let base = ProbeConfig {
        concat_frames: a.stack,
        stride: a.stride,
        mode: ProbeMode::Frozen,
        steps: a.steps,
        batch_size: a.batch,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        finetune_lr: a.finetune_lr,
        clip_norm: a.clip,
        eval_interval: a.eval_interval,
        seed: a.seed,
    };
    let prefixed = modes.len() > 1;
    let mut table = String::new();
    let mut previous: Option<ParamSet<f32>> = None;
    for mode in modes {
        let cfg = ProbeConfig { mode, ..base.clone() };
        let started = Instant::now();
        let outcome = train_probe(&model, &params, previous.as_ref(), &train, &dev, &cfg)?;
        for w in &outcome.warnings {
            eprintln!("warning: {w}");
        }
        let test_per = evaluate_per(&model, &outcome.params, &outcome.probe, &test, &cfg)?;
        eprintln!(
            "{} probe: best dev PER at step {} ({:.1}s)",
            mode.as_str(),
            outcome.best_step,
            started.elapsed().as_secs_f64()
        );
        for (split, value) in [("dev", outcome.dev_per), ("test", test_per)] {
            let line = if prefixed {
                format!("{}.{split}\t{value:.4}", mode.as_str())
            } else {
                format!("{split}\t{value:.4}")
            };
            println!("{line}");
            table.push_str(&line);
            table.push('\n');
        }
        if let Some(out) = &a.out {
            let ck = probe_checkpoint(&model, &outcome.params, &outcome.probe, &train.inventory);
            save_checkpoint(&ck, &out.join(format!("probe_{}.cpcx", mode.as_str())))?;
        }
        previous = Some(outcome.probe);
    }
    if let Some(out) = &a.out {
        write_file(&out.join("per.tsv"), &table)?;
    }
    Ok(())
}

fn abx_options(flags: &AbxFlags, mode: AbxMode, seed: u64) -> Result<AbxOptions> {
    Ok(AbxOptions {
        mode,
        aggregation: Aggregation::parse(&flags.aggregation)?,
        triplet_cap: (flags.cap > 0).then_some(flags.cap),
        seed,
    })
}

fn eval_abx(a: AbxArgs, resolved: &str) -> Result<()> {
    let modes = match a.mode.as_str() {
        "within" => vec![AbxMode::Within],
        "across" => vec![AbxMode::Across],
        "both" => vec![AbxMode::Within, AbxMode::Across],
        other => return Err(Error::Config(format!("unknown ABX mode `{other}` (expected within, across or both)"))),
    };
    let ckpt = load_checkpoint(&a.ckpt)?;
    let (model, params) = load_model(&ckpt)?;
    let dataset = load_split(&a.data, &a.split)?;
    check_inventory(&ckpt, &dataset.inventory)?;
    let segments = extract_segments(&dataset, &model, &params)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(&out.join(RESOLVED_FILE), resolved)?;
        write_segment_list(&out.join("segments.tsv"), &segments, &dataset.inventory)?;
    }
    let mut kv = String::new();
    for mode in modes {
        let report = abx_score(&segments, &abx_options(&a.abx, mode, a.seed)?)?;
        println!("{}\t{:.4}", mode.as_str(), report.error);
        eprintln!(
            "{}: {} cells scored, {} skipped, {} triplets",
            mode.as_str(),
            report.scored_cells,
            report.skipped_cells,
            report.triplets
        );
        kv.push_str(&report_kv(&report));
        if let Some(out) = &a.out {
            write_file(
                &out.join(format!("abx_{}.txt", mode.as_str())),
                &report_text(&report, &dataset.inventory),
            )?;
        }
    }
    if let Some(out) = &a.out {
        write_file(&out.join("abx.kv"), &kv)?;
    }
    Ok(())
}

fn extract(a: ExtractArgs, resolved: &str) -> Result<()> {
    let encoder = match a.layer.as_str() {
        "context" => false,
        "encoder" => true,
        other => return Err(Error::Config(format!("unknown layer `{other}` (expected context or encoder)"))),
    };
    let ckpt = load_checkpoint(&a.ckpt)?;
    let (model, params) = load_model(&ckpt)?;
    let dataset = load_split(&a.data, &a.split)?;
    check_inventory(&ckpt, &dataset.inventory)?;
    create_dir(&a.out)?;
    write_file(&a.out.join(RESOLVED_FILE), resolved)?;
    dataset.utterances.par_iter().try_for_each(|u| {
        let (enc, z) = features(&u.samples, &model, &params)?;
        let m = if encoder { enc.frames } else { z.frames };
        write_features(&a.out.join(format!("{}.cpcf", u.id)), &m)
    })?;
    println!("wrote {} feature files to {}", dataset.utterances.len(), a.out.display());
    Ok(())
}

fn grad_check() -> Result<()> {
    let started = Instant::now();
    let entries = run_gradient_suite()?;
    for e in &entries {
        println!("{}", e.line());
    }
    let failed = entries.iter().filter(|e| !e.passed).count();
    println!(
        "{} checks, {failed} failed, {:.1}s",
        entries.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} of {} gradient checks failed", entries.len())));
    }
    Ok(())
}

fn ablate(a: AblateArgs, resolved: &str) -> Result<()> {
    let kinds: Vec<PredictorKind> = a
        .predictors
        .split(',')
        .map(|k| PredictorKind::parse(k.trim()))
        .collect::<Result<_>>()?;
    if kinds.is_empty() {
        return Err(Error::Config("--predictors is empty".into()));
    }
    let base = model_config(&a.model, kinds[0])?;
    let train_cfg = train_config(&a.train, TrainMode::Cpc);
    for &k in &kinds {
        let mut m = base.clone();
        m.predictor.kind = k;
        m.validate()?;
        train_cfg.validate(&m)?;
    }
    let train = load_split(&a.data, &a.split)?;
    let eval = load_split(&a.data, &a.eval_split)?;
    create_dir(&a.out)?;
    write_file(&a.out.join(RESOLVED_FILE), resolved)?;
    let abx = abx_options(&a.abx, AbxMode::Within, a.train.seed)?;
    let rows = run_ablation(&base, &train_cfg, &kinds, &train, &eval, &abx)?;
    for r in &rows {
        let mut text = String::from("step\tloss");
        for k in 1..=base.predictor.horizon {
            let _ = write!(text, "\tacc_k{k}");
        }
        text.push('\n');
        for rec in &r.trace {
            text.push_str(&rec.trace_line());
            text.push('\n');
        }
        write_file(&a.out.join(format!("trace_{}.tsv", r.predictor.as_str())), &text)?;
    }
    let table = ablation_table(&rows);
    write_file(&a.out.join("table.tsv"), &table)?;
    print!("{table}");
    if let Some(bad) = rows.iter().find(|r| !r.is_valid()) {
        return Err(Error::Numerical(format!("ablation row `{}` is invalid", bad.predictor.as_str())));
    }
    Ok(())
}
