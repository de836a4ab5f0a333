//! The full network: encoder, context model, predictor and the optional
//! supervised frame classifier, plus the canonical text form of its config.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::encoder::{encode_graph, EncoderConfig, FrameSequence, NormKind};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::predictor::{PredictorConfig, PredictorKind};
use crate::sequence::{context_graph, RecurrenceConfig, RecurrenceKind};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub recurrence: RecurrenceConfig,
    pub predictor: PredictorConfig,
    /// Size of the per-frame classifier used by supervised pretraining (0: none).
    pub head_classes: usize,
}

impl ModelConfig {
    /// Encoder and context of width `dim`, horizon `horizon`.
    pub fn new(dim: usize, horizon: usize, recurrence: RecurrenceKind, predictor: PredictorKind) -> Self {
        Self {
            encoder: EncoderConfig::with_channels(dim),
            recurrence: RecurrenceConfig::new(recurrence, dim, dim),
            predictor: PredictorConfig::new(predictor, horizon, dim, dim),
            head_classes: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.encoder.channels
    }

    pub fn hidden(&self) -> usize {
        self.recurrence.hidden
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.recurrence.validate()?;
        self.predictor.validate()?;
        if self.recurrence.input != self.encoder.channels {
            return Err(Error::Config("recurrence input size must equal encoder channels".into()));
        }
        if self.predictor.hidden != self.recurrence.hidden || self.predictor.channels != self.encoder.channels {
            return Err(Error::Config("predictor sizes must match the encoder and context sizes".into()));
        }
        Ok(())
    }

    pub fn init_params<R: Real>(&self, rng: &mut impl Rng) -> ParamSet<R> {
        let mut ps = self.encoder.init_params(rng);
        ps.merge(self.recurrence.init_params(rng));
        ps.merge(self.predictor.init_params(rng));
        if self.head_classes > 0 {
            ps.insert(
                "head.weight",
                fan_in_uniform(vec![self.head_classes, self.hidden()], self.hidden(), rng),
            );
            ps.insert("head.bias", Tensor::zeros(vec![self.head_classes]));
        }
        ps
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let e = &self.encoder;
        let r = &self.recurrence;
        let p = &self.predictor;
        let _ = writeln!(s, "encoder.kernels={}", join(&e.kernels));
        let _ = writeln!(s, "encoder.strides={}", join(&e.strides));
        let _ = writeln!(s, "encoder.pads={}", join(&e.pads));
        let _ = writeln!(s, "encoder.channels={}", e.channels);
        let _ = writeln!(s, "encoder.norm={}", e.norm.as_str());
        let _ = writeln!(s, "recurrence.kind={}", r.kind.as_str());
        let _ = writeln!(s, "recurrence.hidden={}", r.hidden);
        let _ = writeln!(s, "recurrence.layers={}", r.layers);
        let _ = writeln!(s, "predictor.kind={}", p.kind.as_str());
        let _ = writeln!(s, "predictor.horizon={}", p.horizon);
        let _ = writeln!(s, "predictor.dropout={}", p.dropout);
        let _ = writeln!(s, "predictor.heads={}", p.heads);
        let _ = writeln!(s, "predictor.heads_share_trunk={}", p.heads_share_trunk);
        let _ = writeln!(s, "head.classes={}", self.head_classes);
        s
    }

    /// Parses the `model` keys of a key-value map produced by [`parse_kv`].
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Config(format!("missing config key `{k}`")));
        let list = |k: &str| -> Result<Vec<usize>> { get(k)?.split(',').map(|x| parse_num(k, x)).collect() };
        let channels = parse_num("encoder.channels", get("encoder.channels")?)?;
        let hidden = parse_num("recurrence.hidden", get("recurrence.hidden")?)?;
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                kernels: list("encoder.kernels")?,
                strides: list("encoder.strides")?,
                pads: list("encoder.pads")?,
                channels,
                norm: NormKind::parse(get("encoder.norm")?)?,
            },
            recurrence: RecurrenceConfig {
                kind: RecurrenceKind::parse(get("recurrence.kind")?)?,
                input: channels,
                hidden,
                layers: parse_num("recurrence.layers", get("recurrence.layers")?)?,
            },
            predictor: PredictorConfig {
                kind: PredictorKind::parse(get("predictor.kind")?)?,
                horizon: parse_num("predictor.horizon", get("predictor.horizon")?)?,
                hidden,
                channels,
                dropout: parse_num("predictor.dropout", get("predictor.dropout")?)?,
                heads: parse_num("predictor.heads", get("predictor.heads")?)?,
                heads_share_trunk: parse_num("predictor.heads_share_trunk", get("predictor.heads_share_trunk")?)?,
            },
            head_classes: parse_num("head.classes", get("head.classes")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Encoder output and context states of one waveform on a graph.
pub fn forward_features<'g, R: Real>(
    config: &ModelConfig,
    params: &Bound<'g, R>,
    waveform: Var<'g, R>,
) -> Result<(Var<'g, R>, Var<'g, R>)> {
    let enc = encode_graph(&config.encoder, params, waveform)?;
    let z = context_graph(&config.recurrence, params, enc)?;
    Ok((enc, z))
}

/// Encoder frames and context states of a waveform, without gradients.
pub fn features<R: Real>(
    samples: &[R],
    config: &ModelConfig,
    params: &ParamSet<R>,
) -> Result<(FrameSequence<R>, FrameSequence<R>)> {
    let g = Graph::new();
    let bound = params.bind(&g, |_| false);
    let wave = g.constant(Tensor::new(vec![samples.len(), 1], samples.to_vec())?);
    let (enc, z) = forward_features(config, &bound, wave)?;
    let enc = FrameSequence {
        frames: enc.value().clone(),
    };
    let z = FrameSequence { frames: z.value().clone() };
    Ok((enc, z))
}
