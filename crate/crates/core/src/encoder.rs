//! Strided convolutional waveform encoder with per-timestep channel normalisation.
//!
//! Five conv layers take 16 kHz samples down to one frame per 160 samples
//! (10 ms). Each layer is conv → channel norm → ReLU. The normalisation
//! statistics are computed over the channels of a single frame, so no frame
//! sees statistics from another frame or from another sequence in the batch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::tensor::{conv_output_len, Graph, Real, Tensor, Var};

pub const SAMPLE_RATE: u32 = 16_000;
/// Samples per encoder frame.
pub const HOP: usize = 160;
/// Variance floor of the channel normalisation.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    Channel,
    None,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Channel => "channel",
            NormKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "channel" | "channel_norm" => Ok(NormKind::Channel),
            "none" => Ok(NormKind::None),
            other => Err(Error::Config(format!("unknown norm `{other}` (expected channel|none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncoderConfig {
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub pads: Vec<usize>,
    pub channels: usize,
    pub norm: NormKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kernels: vec![10, 8, 4, 4, 4],
            strides: vec![5, 4, 2, 2, 2],
            pads: vec![3, 2, 1, 1, 1],
            channels: 256,
            norm: NormKind::Channel,
        }
    }
}

impl EncoderConfig {
    pub fn with_channels(channels: usize) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.len() != 5 || self.strides.len() != 5 || self.pads.len() != 5 {
            return Err(Error::Config("encoder needs exactly 5 kernels, strides and pads".into()));
        }
        if self.strides.iter().product::<usize>() != HOP {
            return Err(Error::Config(format!("encoder strides must multiply to {HOP}")));
        }
        if self.channels == 0 {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        if self.norm == NormKind::Channel && self.channels < 2 {
            return Err(Error::Config("channel normalisation needs at least 2 channels".into()));
        }
        Ok(())
    }

    /// Number of frames produced for `samples` input samples, if any.
    pub fn output_len(&self, samples: usize) -> Option<usize> {
        let mut t = samples;
        for i in 0..self.kernels.len() {
            t = conv_output_len(t, self.kernels[i], self.strides[i], self.pads[i])?;
        }
        Some(t)
    }

    /// Width in samples of the input span one output frame depends on.
    pub fn receptive_field(&self) -> usize {
        let mut width = 1;
        let mut jump = 1;
        for (k, s) in self.kernels.iter().zip(&self.strides) {
            width += (k - 1) * jump;
            jump *= s;
        }
        width
    }

    /// Offset of the first input sample seen by frame 0 (negative: inside the padding).
    pub fn receptive_offset(&self) -> isize {
        let mut off = 0isize;
        let mut jump = 1isize;
        for (p, s) in self.pads.iter().zip(&self.strides) {
            off -= *p as isize * jump;
            jump *= *s as isize;
        }
        off
    }

    pub fn init_params<R: Real>(&self, rng: &mut impl Rng) -> ParamSet<R> {
        let mut ps = ParamSet::new();
        let mut c_in = 1;
        for (i, &k) in self.kernels.iter().enumerate() {
            let c = self.channels;
            ps.insert(format!("enc.conv{i}.weight"), fan_in_uniform(vec![c, c_in, k], c_in * k, rng));
            ps.insert(format!("enc.conv{i}.bias"), Tensor::zeros(vec![c]));
            if self.norm == NormKind::Channel {
                ps.insert(format!("enc.norm{i}.gain"), Tensor::full(vec![c], R::one()));
                ps.insert(format!("enc.norm{i}.bias"), Tensor::zeros(vec![c]));
            }
            c_in = c;
        }
        ps
    }
}

/// Per-frame features at 10 ms resolution, `[T × C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence<R: Real> {
    pub frames: Tensor<R>,
}

impl<R: Real> FrameSequence<R> {
    pub const FRAME_MS: u32 = 10;

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Per-timestep channel normalisation on graph values.
pub fn channel_norm<'g, R: Real>(x: Var<'g, R>, gain: Var<'g, R>, bias: Var<'g, R>) -> Result<Var<'g, R>> {
    x.channel_norm(gain, bias, R::from_f64_lossy(NORM_EPS))
}

/// Encodes a `[N × 1]` waveform node into `[T × C]` frames.
pub fn encode_graph<'g, R: Real>(
    config: &EncoderConfig,
    params: &Bound<'g, R>,
    waveform: Var<'g, R>,
) -> Result<Var<'g, R>> {
    let n = waveform.value().rows();
    if n < HOP {
        return Err(Error::Data(format!(
            "waveform of {n} samples is shorter than one {HOP}-sample frame; nothing to encode"
        )));
    }
    let mut x = waveform;
    for i in 0..config.kernels.len() {
        let w = params.get(&format!("enc.conv{i}.weight"))?;
        let b = params.get(&format!("enc.conv{i}.bias"))?;
        x = x.conv1d(w, b, config.strides[i], config.pads[i])?;
        if config.norm == NormKind::Channel {
            let gain = params.get(&format!("enc.norm{i}.gain"))?;
            let beta = params.get(&format!("enc.norm{i}.bias"))?;
            x = channel_norm(x, gain, beta)?;
        }
        x = x.relu();
    }
    Ok(x)
}

/// Encodes raw samples without recording gradients.
pub fn encode<R: Real>(samples: &[R], config: &EncoderConfig, params: &ParamSet<R>) -> Result<FrameSequence<R>> {
    let g = Graph::new();
    let bound = params.bind(&g, |_| false);
    let wave = g.constant(Tensor::new(vec![samples.len(), 1], samples.to_vec())?);
    let out = encode_graph(config, &bound, wave)?;
    let frames = out.value().clone();
    Ok(FrameSequence { frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_counts() {
        let cfg = EncoderConfig::default();
        for n in [160, 320, 16_000, 20_480] {
            assert_eq!(cfg.output_len(n), Some(n / 160), "N = {n}");
        }
    }

    #[test]
    fn receptive_field_geometry() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.receptive_field(), 465);
        assert_eq!(cfg.receptive_offset(), -153);
    }

    #[test]
    fn rejects_bad_strides() {
        let mut cfg = EncoderConfig::default();
        cfg.strides[0] = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn short_waveform_rejected() {
        let cfg = EncoderConfig::with_channels(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = cfg.init_params::<f32>(&mut rng);
        assert!(matches!(encode(&[0.0f32; 159], &cfg, &p), Err(Error::Data(_))));
    }

    #[test]
    fn channel_norm_constant_row_is_zero() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 4], vec![5.0; 4]).unwrap());
        let gain = g.constant(Tensor::full(vec![4], 1.0));
        let bias = g.constant(Tensor::zeros(vec![4]));
        let y = channel_norm(x, gain, bias).unwrap();
        assert_eq!(y.value().data(), &[0.0; 4]);
    }

    #[test]
    fn channel_norm_two_points() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let gain = g.constant(Tensor::full(vec![2], 1.0));
        let bias = g.constant(Tensor::zeros(vec![2]));
        let y = channel_norm(x, gain, bias).unwrap();
        let v = y.value();
        assert!((v.data()[0] - 1.0).abs() < 1e-5 && (v.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn channel_norm_single_channel_rejected() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![3, 1]));
        let one = g.constant(Tensor::full(vec![1], 1.0));
        let zero = g.constant(Tensor::zeros(vec![1]));
        assert!(channel_norm(x, one, zero).is_err());
    }

    #[test]
    fn zero_waveform_gives_finite_frames() {
        let cfg = EncoderConfig::with_channels(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = cfg.init_params::<f32>(&mut rng);
        let out = encode(&vec![0.0f32; 1600], &cfg, &p).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.frames.data().iter().all(|v| v.is_finite()));
    }
}
