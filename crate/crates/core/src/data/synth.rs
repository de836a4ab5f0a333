//! Synthetic speech-like corpus with exact frame alignments.
//!
//! Each class is a harmonic tone template with its own fundamental and
//! harmonic weights. Each speaker shifts every fundamental by a fixed pitch
//! factor and tilts the harmonic weights by a fixed spectral slope. An
//! utterance is a random class sequence without immediate repeats, each unit
//! lasting 5 to 10 whole frames, with white noise added at 20 dB SNR.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{wav::dequantize, Dataset, Inventory, Transcript, Utterance};
use crate::encoder::{HOP, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub speakers: usize,
    pub classes: usize,
    pub utterances_per_speaker: usize,
    /// Minimum utterance length in frames; units are appended until reached.
    pub min_frames: usize,
    pub min_unit_frames: usize,
    pub max_unit_frames: usize,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            speakers: 4,
            classes: 8,
            utterances_per_speaker: 60,
            min_frames: 500,
            min_unit_frames: 5,
            max_unit_frames: 10,
            snr_db: 20.0,
            seed: 0,
        }
    }
}

/// Ground-truth unit of a synthetic utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Unit {
    pub class: usize,
    pub start_frame: usize,
    pub frames: usize,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// Units of each utterance, parallel to `dataset.utterances`.
    pub units: Vec<Vec<Unit>>,
}

const HARMONICS: usize = 4;
const BASE_HZ: f64 = 150.0;
const CLASS_RATIO: f64 = 1.32;
const RAMP: usize = 64;

struct Template {
    f0: f64,
    weights: [f64; HARMONICS],
}

struct Voice {
    pitch: f64,
    tilt: f64,
}

pub fn class_symbol(c: usize) -> String {
    format!("ph{c}")
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if cfg.speakers == 0 || cfg.utterances_per_speaker == 0 {
        return Err(Error::Config("synthetic data needs speakers and utterances".into()));
    }
    if cfg.min_unit_frames < 2 || cfg.max_unit_frames < cfg.min_unit_frames {
        return Err(Error::Config("unit length range must be at least 2 frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates: Vec<Template> = (0..cfg.classes)
        .map(|c| {
            let mut weights = [0.0; HARMONICS];
            weights[0] = 1.0;
            for w in weights.iter_mut().skip(1) {
                *w = rng.gen_range(0.1..0.6);
            }
            Template {
                f0: BASE_HZ * CLASS_RATIO.powi(c as i32),
                weights,
            }
        })
        .collect();
    let voices: Vec<Voice> = (0..cfg.speakers)
        .map(|_| Voice {
            pitch: rng.gen_range(0.94..1.06),
            tilt: rng.gen_range(0.0..1.0),
        })
        .collect();
    let inventory = Inventory::new((0..cfg.classes).map(class_symbol).collect())?;

    let mut utterances = Vec::new();
    let mut all_units = Vec::new();
    for (s, voice) in voices.iter().enumerate() {
        for u in 0..cfg.utterances_per_speaker {
            let (samples, units) = synth_utterance(cfg, &templates, voice, &mut rng);
            let aligned = units
                .iter()
                .flat_map(|unit| std::iter::repeat(unit.class).take(unit.frames))
                .collect();
            utterances.push(Utterance {
                id: format!("s{s}_u{u:03}"),
                speaker: format!("spk{s}"),
                samples,
                transcript: Transcript(units.iter().map(|unit| unit.class).collect()),
                aligned: Some(aligned),
            });
            all_units.push(units);
        }
    }
    Ok(SynthDataset {
        dataset: Dataset { inventory, utterances },
        units: all_units,
    })
}

fn synth_utterance(cfg: &SynthConfig, templates: &[Template], voice: &Voice, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<Unit>) {
    let mut units = Vec::new();
    let mut frames = 0;
    let mut prev = None;
    while frames < cfg.min_frames {
        let class = loop {
            let c = rng.gen_range(0..cfg.classes);
            if Some(c) != prev {
                break c;
            }
        };
        let len = rng.gen_range(cfg.min_unit_frames..=cfg.max_unit_frames);
        units.push(Unit {
            class,
            start_frame: frames,
            frames: len,
        });
        frames += len;
        prev = Some(class);
    }

    let mut signal = vec![0.0f64; frames * HOP];
    for unit in &units {
        let t = &templates[unit.class];
        let jitter = rng.gen_range(0.985..1.015);
        let f0 = t.f0 * voice.pitch * jitter;
        let phases: Vec<f64> = (0..HARMONICS).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let n = unit.frames * HOP;
        let start = unit.start_frame * HOP;
        for i in 0..n {
            let time = i as f64 / SAMPLE_RATE as f64;
            let env = ramp(i, n);
            let mut v = 0.0;
            for h in 0..HARMONICS {
                let weight = t.weights[h] * ((h + 1) as f64).powf(-voice.tilt);
                v += weight * (2.0 * PI * (h + 1) as f64 * f0 * time + phases[h]).sin();
            }
            signal[start + i] = env * v;
        }
    }

    let power = signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64;
    let noise_std = (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, noise_std).expect("finite noise level");
    for v in signal.iter_mut() {
        *v += noise.sample(rng);
    }
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
    let samples = signal.iter().map(|&v| dequantize((v * gain) as f32)).collect();
    (samples, units)
}

fn ramp(i: usize, n: usize) -> f64 {
    let edge = i.min(n - 1 - i);
    if edge >= RAMP {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge as f64 / RAMP as f64).cos()
    }
}
