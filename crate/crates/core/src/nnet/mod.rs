//! Minimal differentiable-network kernel: named parameter sets, dense and
//! recurrent layers on top of the reverse-mode [`tape`], and Adam.

mod adam;
pub mod tape;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

pub use adam::{opt_step, AdamConfig, OptimState};
pub use tape::{Gradients, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Named real tensors with unique names, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `self += c * other` over the names both sets share.
    pub fn add_scaled(&mut self, other: &ParamSet, c: f64) {
        for (k, v) in self.tensors.iter_mut() {
            if let Some(o) = other.get(k) {
                v.scaled_add(c, o);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.tensors.values_mut() {
            v.mapv_inplace(|x| x * c);
        }
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Parameters bound to tape leaves, looked up by name.
#[derive(Clone)]
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn empty() -> Self {
        Self {
            vars: BTreeMap::new(),
        }
    }

    /// Binds every tensor of `params`; trainable leaves receive gradient.
    pub fn bind(tape: &'t Tape, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Self { vars }
    }

    pub fn extend(&mut self, other: Bound<'t>) {
        self.vars.extend(other.vars);
    }

    /// Panics on a missing name: parameter layouts are validated when a
    /// model is built or loaded.
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    pub fn gradients(&self, grads: &mut Gradients) -> ParamSet {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.take(*v)))
            .collect()
    }
}

/// Evaluates `f` on `params` bound as trainable leaves and returns the
/// scalar value with exact reverse-mode gradients, keyed like `params`.
pub fn value_and_grad<F>(params: &ParamSet, f: F) -> Result<(f64, ParamSet)>
where
    F: for<'t> FnOnce(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = Bound::bind(&tape, params, true);
    let out = f(&tape, &bound)?;
    let mut grads = tape.backward(out)?;
    let value = out.item();
    Ok((value, bound.gradients(&mut grads)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
    Softplus,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Softplus => x.softplus(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Relu => x.relu(),
        }
    }
}

/// `x W + b` for the tensors `{prefix}.w` (`in x out`) and `{prefix}.b`.
pub fn linear<'t>(b: &Bound<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
    x.matmul(b.get(&format!("{prefix}.w")))
        .add(b.get(&format!("{prefix}.b")))
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrix.
pub fn init_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Adds `{prefix}.w` (`fan_in x out`) and a zero `{prefix}.b`.
pub fn init_dense<R: Rng + ?Sized>(
    params: &mut ParamSet,
    prefix: &str,
    fan_in: usize,
    out: usize,
    rng: &mut R,
) -> Result<()> {
    params.insert(format!("{prefix}.w"), init_uniform(fan_in, out, fan_in, rng))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros((1, out)))
}

fn expect_shape<'a>(params: &'a ParamSet, name: &str, shape: (usize, usize)) -> Result<&'a Tensor> {
    let t = params
        .get(name)
        .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
    if t.dim() != shape {
        return Err(Error::Shape(format!(
            "{name} has shape {:?}, expected {shape:?}",
            t.dim()
        )));
    }
    Ok(t)
}

/// `activation(x W + b)` for a single input vector.
pub fn dense(params: &ParamSet, prefix: &str, x: &[f64], act: Activation) -> Result<Vec<f64>> {
    let wname = format!("{prefix}.w");
    let w = params
        .get(&wname)
        .ok_or_else(|| Error::Shape(format!("missing tensor {wname}")))?;
    if w.nrows() != x.len() {
        return Err(Error::Shape(format!(
            "{wname} expects {} inputs, got {}",
            w.nrows(),
            x.len()
        )));
    }
    expect_shape(params, &format!("{prefix}.b"), (1, w.ncols()))?;
    let tape = Tape::new();
    let b = Bound::bind(&tape, params, false);
    let y = act.apply(linear(&b, prefix, tape.row(x)));
    Ok(y.value().into_raw_vec_and_offset().0)
}

/// Backward four-gate memory cell over per-step input projections
/// `xproj[t] = x_t W_x + b` (`batch x 4H`, gate order i, f, g, o).
/// Runs from the last step to the first with zero initial state; the
/// returned states are in time order, so `h[t]` depends on steps `t..`.
pub fn lstm_backward<'t>(b: &Bound<'t>, wh_name: &str, xproj: &[Var<'t>]) -> Vec<Var<'t>> {
    let Some(first) = xproj.first() else {
        return Vec::new();
    };
    let tape = first.tape();
    let wh = b.get(wh_name);
    let hidden = wh.rows();
    let batch = first.rows();
    let mut h = tape.constant(Tensor::zeros((batch, hidden)));
    let mut c = h;
    let mut out = vec![h; xproj.len()];
    for t in (0..xproj.len()).rev() {
        let pre = xproj[t].add(h.matmul(wh));
        let i = pre.slice_cols(0, hidden).sigmoid();
        let f = pre.slice_cols(hidden, hidden).sigmoid();
        let g = pre.slice_cols(2 * hidden, hidden).tanh();
        let o = pre.slice_cols(3 * hidden, hidden).sigmoid();
        c = f.mul(c).add(i.mul(g));
        h = o.mul(c.tanh());
        out[t] = h;
    }
    out
}

/// Adds `{prefix}.wx`, `{prefix}.wh`, `{prefix}.b` for an LSTM layer.
pub fn init_lstm<R: Rng + ?Sized>(
    params: &mut ParamSet,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    let fan_in = input + hidden;
    params.insert(format!("{prefix}.wx"), init_uniform(input, 4 * hidden, fan_in, rng))?;
    params.insert(format!("{prefix}.wh"), init_uniform(hidden, 4 * hidden, fan_in, rng))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros((1, 4 * hidden)))
}

/// Backward recurrent pass over a sequence of equal-length vectors.
pub fn recurrent_backward(params: &ParamSet, prefix: &str, seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = seq.first() else {
        return Err(Error::Empty("recurrent input sequence"));
    };
    let dim = first.len();
    if seq.iter().any(|u| u.len() != dim) {
        return Err(Error::Shape("non-uniform feature dimension".into()));
    }
    let wh = params
        .get(&format!("{prefix}.wh"))
        .ok_or_else(|| Error::Shape(format!("missing tensor {prefix}.wh")))?;
    let hidden = wh.nrows();
    expect_shape(params, &format!("{prefix}.wh"), (hidden, 4 * hidden))?;
    expect_shape(params, &format!("{prefix}.wx"), (dim, 4 * hidden))?;
    expect_shape(params, &format!("{prefix}.b"), (1, 4 * hidden))?;

    let tape = Tape::new();
    let b = Bound::bind(&tape, params, false);
    let wx = b.get(&format!("{prefix}.wx"));
    let bias = b.get(&format!("{prefix}.b"));
    let xproj: Vec<_> = seq
        .iter()
        .map(|u| tape.row(u).matmul(wx).add(bias))
        .collect();
    Ok(lstm_backward(&b, &format!("{prefix}.wh"), &xproj)
        .into_iter()
        .map(|h| h.value().into_raw_vec_and_offset().0)
        .collect())
}
