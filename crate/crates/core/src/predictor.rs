//! Future-frame predictors: from context `z_1..z_t` to guesses of the encoder
//! output at `t+1..t+K`.
//!
//! Four kinds are available. `Linear` is one matrix per horizon. `Ffd` is a
//! per-frame MLP shared by all horizons. `Conv8` is a causal width-8
//! convolution over the context sequence. `Transformer` is one causally
//! masked self-attention layer. All non-linear kinds end in one affine
//! projection per horizon.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::tensor::{concat_cols, concat_rows, Graph, Real, Tensor, Var};

pub const CONV_WIDTH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PredictorKind {
    Linear,
    Ffd,
    Conv8,
    Transformer,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 4] = [
        PredictorKind::Linear,
        PredictorKind::Ffd,
        PredictorKind::Conv8,
        PredictorKind::Transformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PredictorKind::Linear => "linear",
            PredictorKind::Ffd => "ffd",
            PredictorKind::Conv8 => "conv8",
            PredictorKind::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(PredictorKind::Linear),
            "ffd" => Ok(PredictorKind::Ffd),
            "conv8" => Ok(PredictorKind::Conv8),
            "transformer" => Ok(PredictorKind::Transformer),
            other => Err(Error::Config(format!(
                "unknown predictor `{other}` (expected linear|ffd|conv8|transformer)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    /// Prediction horizon K.
    pub horizon: usize,
    /// Context size H.
    pub hidden: usize,
    /// Encoder size C of the predicted frames.
    pub channels: usize,
    pub dropout: f64,
    pub heads: usize,
    /// One transformer trunk feeding all K projections (otherwise one trunk per horizon).
    pub heads_share_trunk: bool,
}

impl PredictorConfig {
    pub fn new(kind: PredictorKind, horizon: usize, hidden: usize, channels: usize) -> Self {
        Self {
            kind,
            horizon,
            hidden,
            channels,
            dropout: 0.1,
            heads: 4,
            heads_share_trunk: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("prediction horizon K must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.kind == PredictorKind::Transformer && (self.heads == 0 || self.hidden % self.heads != 0) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} attention heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    fn trunks(&self) -> usize {
        if self.heads_share_trunk {
            1
        } else {
            self.horizon
        }
    }

    pub fn init_params<R: Real>(&self, rng: &mut impl Rng) -> ParamSet<R> {
        let (h, c) = (self.hidden, self.channels);
        let mut ps = ParamSet::new();
        let affine = |ps: &mut ParamSet<R>, name: &str, out: usize, inp: usize, mut rng: &mut dyn rand::RngCore| {
            ps.insert(format!("{name}.weight"), fan_in_uniform(vec![out, inp], inp, &mut rng));
            ps.insert(format!("{name}.bias"), Tensor::zeros(vec![out]));
        };
        match self.kind {
            PredictorKind::Linear => {
                for k in 0..self.horizon {
                    ps.insert(format!("pred.a{k}"), fan_in_uniform(vec![c, h], h, rng));
                }
            }
            PredictorKind::Ffd => {
                affine(&mut ps, "pred.ffd.l1", h, h, rng);
                affine(&mut ps, "pred.ffd.l2", h, h, rng);
            }
            PredictorKind::Conv8 => {
                ps.insert("pred.conv.weight", fan_in_uniform(vec![h, h, CONV_WIDTH], h * CONV_WIDTH, rng));
                ps.insert("pred.conv.bias", Tensor::zeros(vec![h]));
            }
            PredictorKind::Transformer => {
                for j in 0..self.trunks() {
                    let p = format!("pred.tf{j}");
                    for name in ["q", "k", "v", "o"] {
                        affine(&mut ps, &format!("{p}.{name}"), h, h, rng);
                    }
                    affine(&mut ps, &format!("{p}.ff1"), 2 * h, h, rng);
                    affine(&mut ps, &format!("{p}.ff2"), h, 2 * h, rng);
                    for ln in ["ln1", "ln2"] {
                        ps.insert(format!("{p}.{ln}.gain"), Tensor::full(vec![h], R::one()));
                        ps.insert(format!("{p}.{ln}.bias"), Tensor::zeros(vec![h]));
                    }
                }
            }
        }
        if self.kind != PredictorKind::Linear {
            for k in 0..self.horizon {
                affine(&mut ps, &format!("pred.proj{k}"), c, h, rng);
            }
        }
        ps
    }
}

/// Whether dropout is active.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn rand::RngCore),
}

/// `preds[k]` is `[T × C]`; row `t` predicts the encoder frame `t + k + 1`.
pub struct PredictionSet<'g, R: Real> {
    pub preds: Vec<Var<'g, R>>,
}

/// Inverted dropout: keeps each entry with probability `1 − rate` and scales
/// survivors by `1 / (1 − rate)`, so the expectation equals the input.
pub fn dropout<'g, R: Real>(x: Var<'g, R>, rate: f64, rng: &mut dyn rand::RngCore) -> Result<Var<'g, R>> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let keep = R::from_f64_lossy(1.0 / (1.0 - rate));
    let n: usize = shape.iter().product();
    let mask: Vec<R> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { R::zero() } else { keep })
        .collect();
    let mask = x.graph().constant(Tensor::new(shape, mask)?);
    x.mul(mask)
}

/// Sinusoidal position encoding `[T × H]`.
pub fn position_encoding<R: Real>(t_len: usize, h: usize) -> Tensor<R> {
    let mut data = Vec::with_capacity(t_len * h);
    for t in 0..t_len {
        for j in 0..h {
            let i = (j / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * i / h as f64);
            data.push(R::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![t_len, h], data).unwrap()
}

fn affine<'g, R: Real>(p: &Bound<'g, R>, name: &str, x: Var<'g, R>) -> Result<Var<'g, R>> {
    x.affine(p.get(&format!("{name}.weight"))?, p.get(&format!("{name}.bias"))?)
}

fn check_input<R: Real>(config: &PredictorConfig, z: &Var<'_, R>) -> Result<usize> {
    let s = z.shape();
    if s.len() != 2 || s[1] != config.hidden || s[0] == 0 {
        return Err(Error::shape(
            "predict",
            format!("context {s:?} does not match hidden size {}", config.hidden),
        ));
    }
    Ok(s[0])
}

fn project<'g, R: Real>(p: &Bound<'g, R>, x: Var<'g, R>, k: usize) -> Result<Var<'g, R>> {
    affine(p, &format!("pred.proj{k}"), x)
}

pub fn predict_linear<'g, R: Real>(
    config: &PredictorConfig,
    p: &Bound<'g, R>,
    z: Var<'g, R>,
) -> Result<PredictionSet<'g, R>> {
    check_input(config, &z)?;
    let preds = (0..config.horizon)
        .map(|k| {
            let a = p.get(&format!("pred.a{k}"))?;
            let s = a.shape();
            if s != [config.channels, config.hidden] {
                return Err(Error::shape("predict_linear", format!("A_{k} is {s:?}")));
            }
            z.matmul(a.transpose()?)
        })
        .collect::<Result<_>>()?;
    Ok(PredictionSet { preds })
}

pub fn predict_ffd<'g, R: Real>(
    config: &PredictorConfig,
    p: &Bound<'g, R>,
    z: Var<'g, R>,
) -> Result<PredictionSet<'g, R>> {
    check_input(config, &z)?;
    let hidden = affine(p, "pred.ffd.l1", z)?.relu();
    let trunk = affine(p, "pred.ffd.l2", hidden)?;
    let preds = (0..config.horizon)
        .map(|k| project(p, trunk, k))
        .collect::<Result<_>>()?;
    Ok(PredictionSet { preds })
}

pub fn predict_conv8<'g, R: Real>(
    config: &PredictorConfig,
    p: &Bound<'g, R>,
    z: Var<'g, R>,
) -> Result<PredictionSet<'g, R>> {
    check_input(config, &z)?;
    let left = z.graph().constant(Tensor::zeros(vec![CONV_WIDTH - 1, config.hidden]));
    let padded = concat_rows(&[left, z])?;
    let trunk = padded.conv1d(p.get("pred.conv.weight")?, p.get("pred.conv.bias")?, 1, 0)?;
    let preds = (0..config.horizon)
        .map(|k| project(p, trunk, k))
        .collect::<Result<_>>()?;
    Ok(PredictionSet { preds })
}

fn transformer_trunk<'g, R: Real>(
    config: &PredictorConfig,
    p: &Bound<'g, R>,
    prefix: &str,
    x: Var<'g, R>,
    mode: &mut Mode<'_>,
) -> Result<Var<'g, R>> {
    let h = config.hidden;
    let dh = h / config.heads;
    let q = affine(p, &format!("{prefix}.q"), x)?;
    let k = affine(p, &format!("{prefix}.k"), x)?;
    let v = affine(p, &format!("{prefix}.v"), x)?;
    let scale = R::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let heads = (0..config.heads)
        .map(|i| {
            let qh = q.slice_cols(i * dh, dh)?;
            let kh = k.slice_cols(i * dh, dh)?;
            let vh = v.slice_cols(i * dh, dh)?;
            qh.matmul(kh.transpose()?)?.scale(scale).causal_softmax()?.matmul(vh)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut attn = affine(p, &format!("{prefix}.o"), concat_cols(&heads)?)?;
    if let Mode::Train(rng) = mode {
        attn = dropout(attn, config.dropout, &mut **rng)?;
    }
    let x = x
        .add(attn)?
        .channel_norm(p.get(&format!("{prefix}.ln1.gain"))?, p.get(&format!("{prefix}.ln1.bias"))?, norm_eps())?;
    let mut ff = affine(p, &format!("{prefix}.ff2"), affine(p, &format!("{prefix}.ff1"), x)?.relu())?;
    if let Mode::Train(rng) = mode {
        ff = dropout(ff, config.dropout, &mut **rng)?;
    }
    x.add(ff)?
        .channel_norm(p.get(&format!("{prefix}.ln2.gain"))?, p.get(&format!("{prefix}.ln2.bias"))?, norm_eps())
}

fn norm_eps<R: Real>() -> R {
    R::from_f64_lossy(crate::encoder::NORM_EPS)
}

pub fn predict_transformer<'g, R: Real>(
    config: &PredictorConfig,
    p: &Bound<'g, R>,
    z: Var<'g, R>,
    mode: &mut Mode<'_>,
) -> Result<PredictionSet<'g, R>> {
    let t_len = check_input(config, &z)?;
    if config.heads == 0 || config.hidden % config.heads != 0 {
        return Err(Error::shape(
            "predict_transformer",
            format!("hidden size {} not divisible by {} heads", config.hidden, config.heads),
        ));
    }
    let x = z.add(z.graph().constant(position_encoding(t_len, config.hidden)))?;
    let mut preds = Vec::with_capacity(config.horizon);
    if config.heads_share_trunk {
        let trunk = transformer_trunk(config, p, "pred.tf0", x, mode)?;
        for k in 0..config.horizon {
            preds.push(project(p, trunk, k)?);
        }
    } else {
        for k in 0..config.horizon {
            let trunk = transformer_trunk(config, p, &format!("pred.tf{k}"), x, mode)?;
            preds.push(project(p, trunk, k)?);
        }
    }
    Ok(PredictionSet { preds })
}

pub fn predict_graph<'g, R: Real>(
    config: &PredictorConfig,
    p: &Bound<'g, R>,
    z: Var<'g, R>,
    mode: &mut Mode<'_>,
) -> Result<PredictionSet<'g, R>> {
    match config.kind {
        PredictorKind::Linear => predict_linear(config, p, z),
        PredictorKind::Ffd => predict_ffd(config, p, z),
        PredictorKind::Conv8 => predict_conv8(config, p, z),
        PredictorKind::Transformer => predict_transformer(config, p, z, mode),
    }
}

/// Evaluation-mode predictions without recording gradients.
pub fn predict<R: Real>(z: &Tensor<R>, config: &PredictorConfig, params: &ParamSet<R>) -> Result<Vec<Tensor<R>>> {
    let g = Graph::new();
    let bound = params.bind(&g, |_| false);
    let set = predict_graph(config, &bound, g.constant(z.clone()), &mut Mode::Eval)?;
    Ok(set.preds.iter().map(|v| v.value().clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_predictor() {
        let cfg = PredictorConfig::new(PredictorKind::Linear, 3, 2, 2);
        let mut ps = ParamSet::<f64>::new();
        for k in 0..3 {
            ps.insert(format!("pred.a{k}"), Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
        }
        let z = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        for p in predict(&z, &cfg, &ps).unwrap() {
            assert_eq!(p, z);
        }
    }

    #[test]
    fn linear_hand_matrix_first_column() {
        let cfg = PredictorConfig::new(PredictorKind::Linear, 1, 2, 2);
        let mut ps = ParamSet::<f64>::new();
        ps.insert("pred.a0", Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let z = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(predict(&z, &cfg, &ps).unwrap()[0].data(), &[1.0, 3.0]);
    }

    #[test]
    fn zero_weight_ffd_gives_bias() {
        let cfg = PredictorConfig::new(PredictorKind::Ffd, 2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps: ParamSet<f64> = cfg.init_params(&mut rng);
        for (name, t) in ps.iter_mut() {
            let bias = name == "pred.proj1.bias" || name == "pred.proj0.bias";
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = if bias { 0.25 + i as f64 } else { 0.0 });
        }
        let z = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        for p in predict(&z, &cfg, &ps).unwrap() {
            for r in 0..4 {
                assert_eq!(p.row(r), &[0.25, 1.25]);
            }
        }
    }

    #[test]
    fn conv8_first_frame_sees_only_itself() {
        let cfg = PredictorConfig::new(PredictorKind::Conv8, 1, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps: ParamSet<f64> = cfg.init_params(&mut rng);
        let z1 = Tensor::new(vec![1, 2], vec![0.4, -0.2]).unwrap();
        let z3 = Tensor::new(vec![3, 2], vec![0.4, -0.2, 9.0, 9.0, -7.0, 3.0]).unwrap();
        let a = predict(&z1, &cfg, &ps).unwrap();
        let b = predict(&z3, &cfg, &ps).unwrap();
        assert_eq!(a[0].row(0), b[0].row(0));
    }

    #[test]
    fn transformer_rejects_indivisible_heads() {
        let mut cfg = PredictorConfig::new(PredictorKind::Transformer, 1, 6, 2);
        cfg.heads = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn transformer_single_token_matches_prefix() {
        let mut cfg = PredictorConfig::new(PredictorKind::Transformer, 2, 8, 4);
        cfg.heads = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps: ParamSet<f64> = cfg.init_params(&mut rng);
        let z: Tensor<f64> = crate::params::uniform(vec![5, 8], 1.0, &mut rng);
        let first = Tensor::new(vec![1, 8], z.row(0).to_vec()).unwrap();
        let a = predict(&first, &cfg, &ps).unwrap();
        let b = predict(&z, &cfg, &ps).unwrap();
        for k in 0..2 {
            assert_eq!(a[k].row(0), b[k].row(0));
        }
    }

    #[test]
    fn unshared_trunks_have_own_params() {
        let mut cfg = PredictorConfig::new(PredictorKind::Transformer, 3, 4, 4);
        cfg.heads = 2;
        cfg.heads_share_trunk = false;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps: ParamSet<f64> = cfg.init_params(&mut rng);
        assert!(ps.contains("pred.tf2.q.weight"));
        let z: Tensor<f64> = crate::params::uniform(vec![3, 4], 1.0, &mut rng);
        assert_eq!(predict(&z, &cfg, &ps).unwrap().len(), 3);
    }
}
