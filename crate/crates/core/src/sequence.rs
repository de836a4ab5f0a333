//! Causal single-layer recurrent context model (LSTM or GRU).

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, orthogonal, Bound, ParamSet};
use crate::tensor::{concat_rows, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RecurrenceKind {
    Lstm,
    Gru,
}

impl RecurrenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecurrenceKind::Lstm => "lstm",
            RecurrenceKind::Gru => "gru",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(RecurrenceKind::Lstm),
            "gru" => Ok(RecurrenceKind::Gru),
            other => Err(Error::Config(format!("unknown recurrence `{other}` (expected lstm|gru)"))),
        }
    }

    fn gates(self) -> usize {
        match self {
            RecurrenceKind::Lstm => 4,
            RecurrenceKind::Gru => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RecurrenceConfig {
    pub kind: RecurrenceKind,
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl RecurrenceConfig {
    pub fn new(kind: RecurrenceKind, input: usize, hidden: usize) -> Self {
        Self {
            kind,
            input,
            hidden,
            layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers != 1 {
            return Err(Error::Config("only single-layer recurrence is supported".into()));
        }
        if self.hidden == 0 || self.input == 0 {
            return Err(Error::Config("recurrence sizes must be positive".into()));
        }
        Ok(())
    }

    /// LSTM gates are ordered input, forget, cell, output; GRU gates reset,
    /// update, candidate. The forget-gate bias starts at 1.
    pub fn init_params<R: Real>(&self, rng: &mut impl Rng) -> ParamSet<R> {
        let h = self.hidden;
        let g = self.kind.gates();
        let mut ps = ParamSet::new();
        ps.insert("ar.w_ih", fan_in_uniform(vec![g * h, self.input], self.input, rng));
        let mut w_hh = Vec::with_capacity(g * h * h);
        for _ in 0..g {
            w_hh.extend(orthogonal(h, h, rng).into_iter().map(R::from_f64_lossy));
        }
        ps.insert("ar.w_hh", Tensor::new(vec![g * h, h], w_hh).unwrap());
        match self.kind {
            RecurrenceKind::Lstm => {
                let mut b = vec![R::zero(); 4 * h];
                b[h..2 * h].iter_mut().for_each(|v| *v = R::one());
                ps.insert("ar.b", Tensor::new(vec![4 * h], b).unwrap());
            }
            RecurrenceKind::Gru => {
                ps.insert("ar.b_ih", Tensor::zeros(vec![3 * h]));
                ps.insert("ar.b_hh", Tensor::zeros(vec![3 * h]));
            }
        }
        ps
    }
}

/// Context states `z` for every frame, `[T × H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextState<R: Real> {
    pub z: Tensor<R>,
    /// Final cell memory (LSTM only).
    pub cell: Option<Tensor<R>>,
}

struct LstmWeights<'g, R: Real> {
    w_hh_t: Var<'g, R>,
    hidden: usize,
}

struct GruWeights<'g, R: Real> {
    w_hh: Var<'g, R>,
    b_hh: Var<'g, R>,
    hidden: usize,
}

fn check_hidden<R: Real>(w_hh: &Var<'_, R>, gates: usize, hidden: usize) -> Result<()> {
    let s = w_hh.shape();
    if s != [gates * hidden, hidden] {
        return Err(Error::shape(
            "recurrence",
            format!("recurrent weight {s:?} does not match hidden size {hidden}"),
        ));
    }
    Ok(())
}

fn lstm_cell<'g, R: Real>(
    w: &LstmWeights<'g, R>,
    x_proj: Var<'g, R>,
    h: Var<'g, R>,
    c: Var<'g, R>,
) -> Result<(Var<'g, R>, Var<'g, R>)> {
    let hs = w.hidden;
    let pre = x_proj.add(h.matmul(w.w_hh_t)?)?;
    let i = pre.slice_cols(0, hs)?.sigmoid();
    let f = pre.slice_cols(hs, hs)?.sigmoid();
    let g = pre.slice_cols(2 * hs, hs)?.tanh();
    let o = pre.slice_cols(3 * hs, hs)?.sigmoid();
    let c_next = f.mul(c)?.add(i.mul(g)?)?;
    let h_next = o.mul(c_next.tanh())?;
    Ok((h_next, c_next))
}

fn gru_cell<'g, R: Real>(w: &GruWeights<'g, R>, x_proj: Var<'g, R>, h: Var<'g, R>) -> Result<Var<'g, R>> {
    let hs = w.hidden;
    let hh = h.affine(w.w_hh, w.b_hh)?;
    let r = x_proj.slice_cols(0, hs)?.add(hh.slice_cols(0, hs)?)?.sigmoid();
    let u = x_proj.slice_cols(hs, hs)?.add(hh.slice_cols(hs, hs)?)?.sigmoid();
    let n = x_proj
        .slice_cols(2 * hs, hs)?
        .add(r.mul(hh.slice_cols(2 * hs, hs)?)?)?
        .tanh();
    // h' = (1 − u)·n + u·h = n + u·(h − n)
    n.add(u.mul(h.sub(n)?)?)
}

/// One LSTM step on `[1 × C]` input and `[1 × H]` state.
pub fn lstm_step<'g, R: Real>(
    params: &Bound<'g, R>,
    x: Var<'g, R>,
    h: Var<'g, R>,
    c: Var<'g, R>,
) -> Result<(Var<'g, R>, Var<'g, R>)> {
    let w_hh = params.get("ar.w_hh")?;
    let hidden = w_hh.shape()[1];
    check_hidden(&w_hh, 4, hidden)?;
    let x_proj = x.affine(params.get("ar.w_ih")?, params.get("ar.b")?)?;
    let w = LstmWeights {
        w_hh_t: w_hh.transpose()?,
        hidden,
    };
    lstm_cell(&w, x_proj, h, c)
}

/// One GRU step on `[1 × C]` input and `[1 × H]` state.
pub fn gru_step<'g, R: Real>(params: &Bound<'g, R>, x: Var<'g, R>, h: Var<'g, R>) -> Result<Var<'g, R>> {
    let w_hh = params.get("ar.w_hh")?;
    let hidden = w_hh.shape()[1];
    check_hidden(&w_hh, 3, hidden)?;
    let x_proj = x.affine(params.get("ar.w_ih")?, params.get("ar.b_ih")?)?;
    let w = GruWeights {
        w_hh,
        b_hh: params.get("ar.b_hh")?,
        hidden,
    };
    gru_cell(&w, x_proj, h)
}

/// Runs the recurrence over `[T × C]` frames from a zero state and returns
/// `[T × H]` context vectors. Row `t` depends on frames `0..=t` only.
pub fn context_graph<'g, R: Real>(
    config: &RecurrenceConfig,
    params: &Bound<'g, R>,
    frames: Var<'g, R>,
) -> Result<Var<'g, R>> {
    let (t_len, c) = {
        let v = frames.value();
        (v.rows(), v.cols())
    };
    if t_len == 0 {
        return Err(Error::shape("context", "no frames"));
    }
    if c != config.input {
        return Err(Error::shape(
            "context",
            format!("frames have {c} channels, recurrence expects {}", config.input),
        ));
    }
    let graph = frames.graph();
    let hs = config.hidden;
    let w_hh = params.get("ar.w_hh")?;
    check_hidden(&w_hh, config.kind.gates(), hs)?;
    let zero = || graph.constant(Tensor::zeros(vec![1, hs]));
    let mut outputs = Vec::with_capacity(t_len);
    match config.kind {
        RecurrenceKind::Lstm => {
            let x_proj = frames.affine(params.get("ar.w_ih")?, params.get("ar.b")?)?;
            let w = LstmWeights {
                w_hh_t: w_hh.transpose()?,
                hidden: hs,
            };
            let (mut h, mut cell) = (zero(), zero());
            for t in 0..t_len {
                let (h2, c2) = lstm_cell(&w, x_proj.slice_rows(t, 1)?, h, cell)?;
                outputs.push(h2);
                h = h2;
                cell = c2;
            }
        }
        RecurrenceKind::Gru => {
            let x_proj = frames.affine(params.get("ar.w_ih")?, params.get("ar.b_ih")?)?;
            let w = GruWeights {
                w_hh,
                b_hh: params.get("ar.b_hh")?,
                hidden: hs,
            };
            let mut h = zero();
            for t in 0..t_len {
                h = gru_cell(&w, x_proj.slice_rows(t, 1)?, h)?;
                outputs.push(h);
            }
        }
    }
    concat_rows(&outputs)
}

/// Context states for a frame sequence without recording gradients.
pub fn context<R: Real>(frames: &Tensor<R>, config: &RecurrenceConfig, params: &ParamSet<R>) -> Result<ContextState<R>> {
    let g = Graph::new();
    let bound = params.bind(&g, |_| false);
    let z = context_graph(config, &bound, g.constant(frames.clone()))?;
    let z = z.value().clone();
    Ok(ContextState { z, cell: None })
}
