use cpcx_core::encoder::{encode, EncoderConfig, HOP};
use cpcx_core::model::ModelConfig;
use cpcx_core::predictor::PredictorKind;
use cpcx_core::sequence::RecurrenceKind;
use cpcx_core::tensor::{conv_output_len, concat_rows, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Frame count from the conv length formula, layer by layer.
fn chain(n: usize, cfg: &EncoderConfig) -> usize {
    let mut t = n;
    for i in 0..5 {
        t = (t + 2 * cfg.pads[i] - cfg.kernels[i]) / cfg.strides[i] + 1;
    }
    t
}

#[test]
fn frame_counts_follow_the_length_chain() {
    let cfg = EncoderConfig::with_channels(4);
    assert_eq!(chain(16000, &cfg), 100);
    assert_eq!(chain(20480, &cfg), 128);
    let params = ModelConfig::new(4, 2, RecurrenceKind::Lstm, PredictorKind::Linear)
        .init_params::<f64>(&mut ChaCha8Rng::seed_from_u64(0));
    for n in [160, 1600, 16000, 20480] {
        let out = encode(&noise(n, 1), &cfg, &params).unwrap();
        assert_eq!(out.len(), n / HOP, "N = {n}");
        assert_eq!(out.dim(), 4);
        assert_eq!(cfg.output_len(n), Some(n / HOP));
    }
    assert_eq!(conv_output_len(10, 4, 2, 1), Some(5));
}

#[test]
fn channel_norm_is_local_in_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = 6;
    let c = 5;
    let x: Vec<f64> = (0..rows * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let gain = Tensor::new(vec![c], (0..c).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    let bias = Tensor::new(vec![c], (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
    let norm = |data: Vec<f64>| {
        let g = Graph::new();
        let y = g
            .constant(Tensor::new(vec![rows, c], data).unwrap())
            .channel_norm(g.constant(gain.clone()), g.constant(bias.clone()), 1e-5)
            .unwrap();
        let v = y.value().clone();
        v
    };
    let base = norm(x.clone());
    for t in 0..rows {
        let mut y = x.clone();
        for other in (0..rows).filter(|&r| r != t) {
            for j in 0..c {
                y[other * c + j] += rng.gen_range(-10.0..10.0);
            }
        }
        assert_eq!(norm(y).row(t), base.row(t), "row {t} changed");
    }
}

#[test]
fn channel_norm_ignores_batch_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 4;
    let a = Tensor::new(vec![3, c], (0..3 * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let b = Tensor::new(vec![5, c], (0..5 * c).map(|_| rng.gen_range(-9.0..9.0)).collect()).unwrap();
    let g = Graph::new();
    let gain = g.constant(Tensor::full(vec![c], 1.0));
    let bias = g.constant(Tensor::zeros(vec![c]));
    let alone = g.constant(a.clone()).channel_norm(gain, bias, 1e-5).unwrap().value().clone();
    let batch = concat_rows(&[g.constant(a), g.constant(b)]).unwrap();
    let together = batch.channel_norm(gain, bias, 1e-5).unwrap().value().clone();
    for t in 0..3 {
        assert_eq!(together.row(t), alone.row(t));
    }
}

#[test]
fn encoding_is_independent_of_other_utterances() {
    let cfg = ModelConfig::new(6, 2, RecurrenceKind::Lstm, PredictorKind::Linear);
    let params = cfg.init_params::<f32>(&mut ChaCha8Rng::seed_from_u64(2));
    let x: Vec<f32> = noise(3200, 7).into_iter().map(|v| v as f32).collect();
    let first = encode(&x, &cfg.encoder, &params).unwrap();
    let _ = encode(&vec![0.5f32; 4800], &cfg.encoder, &params).unwrap();
    let again = encode(&x, &cfg.encoder, &params).unwrap();
    assert_eq!(first, again);
}
