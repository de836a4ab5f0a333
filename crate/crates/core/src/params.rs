//! Named parameter arrays and their initialisers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Ordered map from parameter name to array. Iteration order is the
/// lexicographic name order, which is also the serialisation order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<R: Real> {
    params: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<R>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<R>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<R>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<R>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Copies of every parameter whose name starts with `prefix`.
    pub fn extract_prefix(&self, prefix: &str) -> ParamSet<R> {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ParamSet<R>) {
        self.params.extend(other.params);
    }

    pub fn cast<S: Real>(&self) -> ParamSet<S> {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet<R> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    /// Registers every parameter on `graph`; those for which `trainable`
    /// returns true become leaves, the rest constants.
    pub fn bind<'g>(&self, graph: &'g Graph<R>, trainable: impl Fn(&str) -> bool) -> Bound<'g, R> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| {
                    let var = if trainable(k) {
                        graph.leaf(v.clone())
                    } else {
                        graph.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

/// Parameters registered on one graph.
pub struct Bound<'g, R: Real> {
    vars: BTreeMap<String, Var<'g, R>>,
}

impl<'g, R: Real> Bound<'g, R> {
    /// Wraps vars created elsewhere, e.g. the leaves a gradient check hands out.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'g, R>)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, R>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Adjoints of every bound parameter, in name order.
    pub fn grads(&self) -> ParamSet<R> {
        ParamSet {
            params: self.vars.iter().map(|(k, v)| (k.clone(), v.grad())).collect(),
        }
    }
}

pub(crate) fn uniform<R: Real>(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor<R> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| R::from_f64_lossy(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("uniform init shape")
}

/// Uniform in ±1/√fan_in.
pub(crate) fn fan_in_uniform<R: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<R> {
    uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// `rows × cols` matrix with orthonormal columns (or rows, when wider than tall),
/// from modified Gram–Schmidt on a Gaussian draw.
pub(crate) fn orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // m vectors of length n.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            if rows >= cols {
                out[i * cols + j] = x;
            } else {
                out[j * cols + i] = x;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthogonal(6, 4, &mut rng);
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = (0..6).map(|i| q[i * 4 + a] * q[i * 4 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }
}
