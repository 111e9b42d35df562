//! Parameterised layers shared by the tokenizers, backbone and heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

/// How fresh weights are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    FanIn,
    Normal(f64),
    Zeros,
    Ones,
    Constant(f64),
}

pub(crate) fn init_tensor<T: Element, R: Rng + ?Sized>(
    shape: Vec<usize>,
    init: Init,
    rng: &mut R,
) -> Tensor<T> {
    let fan_in = shape.first().copied().unwrap_or(1).max(1);
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::from_fn(shape, |_| T::one()),
        Init::Constant(c) => Tensor::from_fn(shape, |_| T::from_f64_lossy(c)),
        Init::FanIn | Init::Normal(_) => {
            let std = match init {
                Init::Normal(s) => s,
                _ => 1.0 / (fan_in as f64).sqrt(),
            };
            let dist = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
        }
    }
}

/// Registers a parameter, or reuses one of the same name and shape that is
/// already in the store (e.g. loaded from a checkpoint).
pub(crate) fn param<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: Vec<usize>,
    init: Init,
    rng: &mut R,
) -> Result<ParamId> {
    if let Some(id) = store.id(name) {
        let have = store.get(id).shape();
        if have != shape.as_slice() {
            return Err(crate::error::Error::format(
                name.to_string(),
                format!("expected shape {shape:?}, found {have:?}"),
            ));
        }
        return Ok(id);
    }
    let t = init_tensor(shape, init, rng).with_requires_grad(true);
    store.insert(name, t)
}

/// `y = x·W + b` with `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, Init::FanIn, true, rng)
    }

    pub fn with_init<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = param(store, &format!("{name}.weight"), vec![in_dim, out_dim], init, rng)?;
        let bias = if bias {
            Some(param(store, &format!("{name}.bias"), vec![out_dim], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            gamma: param(store, &format!("{name}.gamma"), vec![dim], Init::Ones, rng)?,
            beta: param(store, &format!("{name}.beta"), vec![dim], Init::Zeros, rng)?,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b, self.eps)
    }
}
