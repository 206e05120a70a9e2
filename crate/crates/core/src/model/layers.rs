use ndarray::{s, Array4, ArrayView4};
use rand::Rng;

use crate::nn::ops::{relu, relu_backward};
use crate::nn::{BatchNorm2d, Conv2d, Parameters, Real, TensorMut, TensorRef};

/// Convolution, batch normalisation and ReLU, named `<prefix>.conv` and `<prefix>.bn`.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<S: Real> {
    pub conv: Conv2d<S>,
    pub bn: BatchNorm2d<S>,
    out: Option<Array4<S>>,
}

impl<S: Real> ConvBnRelu<S> {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(&format!("{prefix}.conv"), cin, cout, kernel, stride, kernel / 2, rng),
            bn: BatchNorm2d::new(&format!("{prefix}.bn"), cout),
            out: None,
        }
    }

    pub fn infer(&self, x: ArrayView4<'_, S>) -> Array4<S> {
        relu(&self.bn.infer(self.conv.infer(x).view()))
    }

    pub fn forward(&mut self, x: ArrayView4<'_, S>) -> Array4<S> {
        let y = relu(&self.bn.forward(self.conv.forward(x).view()));
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: ArrayView4<'_, S>) -> Option<Array4<S>> {
        let y = self.out.take().expect("ConvBnRelu::backward without forward");
        let d = relu_backward(&y, dy);
        let d = self.bn.backward(d.view());
        self.conv.backward(d.view())
    }
}

impl<S: Real> Parameters<S> for ConvBnRelu<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// Gradient of [`crate::nn::ops::crop`]: zero-pads `dy` back to `h` x `w`.
pub fn crop_backward<S: Real>(dy: ArrayView4<'_, S>, h: usize, w: usize) -> Array4<S> {
    let (n, c, ch, cw) = dy.dim();
    if (ch, cw) == (h, w) {
        return dy.to_owned();
    }
    let mut out = Array4::zeros((n, c, h, w));
    out.slice_mut(s![.., .., ..ch, ..cw]).assign(&dy);
    out
}
