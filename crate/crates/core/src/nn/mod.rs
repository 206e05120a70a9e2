//! A small dense-tensor layer library with explicit backward passes.
//!
//! Every layer exposes three entry points:
//!
//! * `infer(&self, ..)` runs in evaluation mode without caching anything, so
//!   an immutable model can be shared across threads;
//! * `forward(&mut self, ..)` runs in training mode and caches what the
//!   backward pass needs;
//! * `backward(&mut self, ..)` consumes that cache, accumulates parameter
//!   gradients and returns the gradient with respect to the layer input.
//!
//! Feature maps are `[batch, channels, height, width]`; token matrices are
//! `[rows, features]`.

mod attention;
mod conv;
mod linear;
pub mod loss;
mod norm;
pub mod ops;

pub use attention::MultiHeadAttention;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm2d, LayerNorm};

use ndarray::{Array, Dimension};
use rand::Rng;
use std::fmt::{Debug, Display};

/// Floating-point element type of every tensor.
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag stored in checkpoints.
    const DTYPE: &'static str;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Vec<Self>;
}

impl Real for f32 {
    const DTYPE: &'static str = "F32";

    fn lit(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "F64";

    fn lit(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

/// Whether a named tensor is trained or only tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    /// Running statistics and similar state; never touched by the optimizer.
    Buffer,
}

/// A trainable array together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<S, D: Dimension> {
    pub name: String,
    pub value: Array<S, D>,
    pub grad: Array<S, D>,
}

impl<S: Real, D: Dimension> Param<S, D> {
    pub fn new(name: impl Into<String>, value: Array<S, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn view(&self) -> TensorRef<'_, S> {
        TensorRef {
            name: &self.name,
            kind: TensorKind::Param,
            shape: self.value.shape(),
            value: self.value.as_slice().expect("standard layout"),
            grad: Some(self.grad.as_slice().expect("standard layout")),
        }
    }

    pub fn view_mut(&mut self) -> TensorMut<'_, S> {
        TensorMut {
            name: &self.name,
            kind: TensorKind::Param,
            shape: self.value.shape().to_vec(),
            value: self.value.as_slice_mut().expect("standard layout"),
            grad: Some(self.grad.as_slice_mut().expect("standard layout")),
        }
    }
}

/// Non-trainable state that still belongs to the model.
#[derive(Debug, Clone)]
pub struct Buffer<S, D: Dimension> {
    pub name: String,
    pub value: Array<S, D>,
}

impl<S: Real, D: Dimension> Buffer<S, D> {
    pub fn new(name: impl Into<String>, value: Array<S, D>) -> Self {
        Buffer {
            name: name.into(),
            value,
        }
    }

    pub fn view(&self) -> TensorRef<'_, S> {
        TensorRef {
            name: &self.name,
            kind: TensorKind::Buffer,
            shape: self.value.shape(),
            value: self.value.as_slice().expect("standard layout"),
            grad: None,
        }
    }

    pub fn view_mut(&mut self) -> TensorMut<'_, S> {
        TensorMut {
            name: &self.name,
            kind: TensorKind::Buffer,
            shape: self.value.shape().to_vec(),
            value: self.value.as_slice_mut().expect("standard layout"),
            grad: None,
        }
    }
}

pub struct TensorRef<'a, S> {
    pub name: &'a str,
    pub kind: TensorKind,
    pub shape: &'a [usize],
    pub value: &'a [S],
    pub grad: Option<&'a [S]>,
}

pub struct TensorMut<'a, S> {
    pub name: &'a str,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub value: &'a mut [S],
    pub grad: Option<&'a mut [S]>,
}

/// Uniform access to every named tensor of a module, in a fixed order.
pub trait Parameters<S: Real> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |t| {
            if let Some(g) = t.grad {
                g.fill(S::zero());
            }
        });
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| {
            if t.kind == TensorKind::Param {
                n += t.value.len();
            }
        });
        n
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t.name.to_string()));
        out
    }
}

impl<S: Real, P: Parameters<S>> Parameters<S> for Option<P> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        if let Some(p) = self {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        if let Some(p) = self {
            p.visit_mut(f);
        }
    }
}

impl<S: Real, P: Parameters<S>> Parameters<S> for Vec<P> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        for p in self {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        for p in self {
            p.visit_mut(f);
        }
    }
}

/// Uniform(-bound, bound) initialisation with `bound = sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn xavier_uniform<S: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, n: usize) -> Vec<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| S::lit(rng.random_range(-bound..bound))).collect()
}

/// He/Kaiming uniform initialisation for layers followed by ReLU.
pub(crate) fn kaiming_uniform<S: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| S::lit(rng.random_range(-bound..bound))).collect()
}

/// Adds `src` into `dst` elementwise.
pub(crate) fn accumulate<S: Real>(dst: &mut [S], src: &[S]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}
