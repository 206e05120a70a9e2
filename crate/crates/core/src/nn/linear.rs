use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{xavier_uniform, Param, Parameters, Real, TensorMut, TensorRef};

/// Affine map over rows: `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<S: Real> {
    pub weight: Param<S, ndarray::Ix2>,
    pub bias: Param<S, ndarray::Ix1>,
    input: Option<Array2<S>>,
}

impl<S: Real> Linear<S> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = xavier_uniform(rng, inputs, outputs, inputs * outputs);
        Linear {
            weight: Param::new(
                format!("{prefix}.weight"),
                Array2::from_shape_vec((inputs, outputs), w).unwrap(),
            ),
            bias: Param::new(format!("{prefix}.bias"), Array1::zeros(outputs)),
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn infer(&self, x: ArrayView2<'_, S>) -> Array2<S> {
        let mut y = x.dot(&self.weight.value);
        y += &self.bias.value;
        y
    }

    pub fn forward(&mut self, x: Array2<S>) -> Array2<S> {
        let y = self.infer(x.view());
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, dy: ArrayView2<'_, S>) -> Array2<S> {
        let x = self.input.take().expect("Linear::backward without forward");
        general_mat_mul(S::one(), &x.t(), &dy, S::one(), &mut self.weight.grad);
        self.bias.grad += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.value.t())
    }
}

impl<S: Real> Parameters<S> for Linear<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        f(self.weight.view());
        f(self.bias.view());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        f(self.weight.view_mut());
        f(self.bias.view_mut());
    }
}
