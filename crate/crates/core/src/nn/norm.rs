use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis, Ix1, Zip};

use super::{Buffer, Param, Parameters, Real, TensorMut, TensorRef};

/// Normalisation over the feature axis of a `[rows, features]` matrix.
#[derive(Debug, Clone)]
pub struct LayerNorm<S: Real> {
    pub gamma: Param<S, Ix1>,
    pub beta: Param<S, Ix1>,
    eps: S,
    cache: Option<(Array2<S>, Array1<S>)>,
}

impl<S: Real> LayerNorm<S> {
    pub fn new(prefix: &str, features: usize) -> Self {
        LayerNorm {
            gamma: Param::new(format!("{prefix}.gamma"), Array1::ones(features)),
            beta: Param::new(format!("{prefix}.beta"), Array1::zeros(features)),
            eps: S::lit(1e-6),
            cache: None,
        }
    }

    fn normalise(&self, x: ArrayView2<'_, S>) -> (Array2<S>, Array1<S>) {
        let d = S::lit(x.ncols() as f64);
        let mut xhat = x.to_owned();
        let mut inv = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<S>() / d;
            *inv = S::one() / (var + self.eps).sqrt();
            let s = *inv;
            row.mapv_inplace(|v| v * s);
        }
        (xhat, inv)
    }

    fn affine(&self, xhat: &Array2<S>) -> Array2<S> {
        let mut y = xhat * &self.gamma.value;
        y += &self.beta.value;
        y
    }

    pub fn infer(&self, x: ArrayView2<'_, S>) -> Array2<S> {
        self.affine(&self.normalise(x).0)
    }

    pub fn forward(&mut self, x: ArrayView2<'_, S>) -> Array2<S> {
        let (xhat, inv) = self.normalise(x);
        let y = self.affine(&xhat);
        self.cache = Some((xhat, inv));
        y
    }

    pub fn backward(&mut self, dy: ArrayView2<'_, S>) -> Array2<S> {
        let (xhat, inv) = self.cache.take().expect("LayerNorm::backward without forward");
        self.gamma.grad += &(&dy * &xhat).sum_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0));
        let d = S::lit(dy.ncols() as f64);
        let dxhat = &dy * &self.gamma.value;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(xhat.rows())
            .zip(inv.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>();
            Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                *o = inv / d * (d * gi - sum_g - xi * sum_gx);
            });
        }
        dx
    }
}

impl<S: Real> Parameters<S> for LayerNorm<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        f(self.gamma.view());
        f(self.beta.view());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        f(self.gamma.view_mut());
        f(self.beta.view_mut());
    }
}

/// Batch normalisation over `[batch, channels, h, w]` maps.
///
/// Training mode normalises with batch statistics and folds them into the
/// running estimates; evaluation mode uses the running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<S: Real> {
    pub gamma: Param<S, Ix1>,
    pub beta: Param<S, Ix1>,
    pub running_mean: Buffer<S, Ix1>,
    pub running_var: Buffer<S, Ix1>,
    pub momentum: S,
    /// When false, training-mode passes leave the running estimates alone.
    pub track_running_stats: bool,
    eps: S,
    cache: Option<(Array4<S>, Array1<S>)>,
}

impl<S: Real> BatchNorm2d<S> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{prefix}.gamma"), Array1::ones(channels)),
            beta: Param::new(format!("{prefix}.beta"), Array1::zeros(channels)),
            running_mean: Buffer::new(format!("{prefix}.running_mean"), Array1::zeros(channels)),
            running_var: Buffer::new(format!("{prefix}.running_var"), Array1::ones(channels)),
            momentum: S::lit(0.1),
            track_running_stats: true,
            eps: S::lit(1e-5),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn scale_shift(&self, mean: &Array1<S>, inv_std: &Array1<S>) -> (Array1<S>, Array1<S>) {
        let scale = &self.gamma.value * inv_std;
        let shift = &self.beta.value - &(mean * &scale);
        (scale, shift)
    }

    fn apply(x: ArrayView4<'_, S>, scale: &Array1<S>, shift: &Array1<S>) -> Array4<S> {
        let mut y = x.to_owned();
        for mut img in y.outer_iter_mut() {
            for ((mut plane, &a), &b) in img.outer_iter_mut().zip(scale).zip(shift) {
                plane.mapv_inplace(|v| v * a + b);
            }
        }
        y
    }

    pub fn infer(&self, x: ArrayView4<'_, S>) -> Array4<S> {
        let inv_std = self.running_var.value.mapv(|v| S::one() / (v + self.eps).sqrt());
        let (scale, shift) = self.scale_shift(&self.running_mean.value, &inv_std);
        Self::apply(x, &scale, &shift)
    }

    pub fn forward(&mut self, x: ArrayView4<'_, S>) -> Array4<S> {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut mean = Array1::<S>::zeros(c);
        let mut var = Array1::<S>::zeros(c);
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let m = plane.sum() / S::lit(count);
            let v = plane.iter().map(|&p| (p - m) * (p - m)).sum::<S>() / S::lit(count);
            mean[ch] = m;
            var[ch] = v;
        }
        let inv_std = var.mapv(|v| S::one() / (v + self.eps).sqrt());
        let unbiased = if count > 1.0 {
            S::lit(count / (count - 1.0))
        } else {
            S::one()
        };
        if self.track_running_stats {
            let m = self.momentum;
            Zip::from(&mut self.running_mean.value)
                .and(&mean)
                .for_each(|r, &b| *r = (S::one() - m) * *r + m * b);
            Zip::from(&mut self.running_var.value)
                .and(&var)
                .for_each(|r, &b| *r = (S::one() - m) * *r + m * b * unbiased);
        }
        let zero = Array1::zeros(c);
        let xhat = Self::apply(x, &inv_std, &(&zero - &(&mean * &inv_std)));
        let y = Self::apply(xhat.view(), &self.gamma.value, &self.beta.value);
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: ArrayView4<'_, S>) -> Array4<S> {
        let (xhat, inv_std) = self.cache.take().expect("BatchNorm2d::backward without forward");
        let (n, c, h, w) = dy.dim();
        let count = S::lit((n * h * w) as f64);
        let mut dx = Array4::zeros(dy.raw_dim());
        for ch in 0..c {
            let g = dy.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            let sum_dy = g.sum();
            let sum_dy_xh = Zip::from(&g).and(&xh).fold(S::zero(), |acc, &a, &b| acc + a * b);
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let k = self.gamma.value[ch] * inv_std[ch] / count;
            Zip::from(dx.index_axis_mut(Axis(1), ch))
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = k * (count * gi - sum_dy - xi * sum_dy_xh));
        }
        dx
    }
}

impl<S: Real> Parameters<S> for BatchNorm2d<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        f(self.gamma.view());
        f(self.beta.view());
        f(self.running_mean.view());
        f(self.running_var.view());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        f(self.gamma.view_mut());
        f(self.beta.view_mut());
        f(self.running_mean.view_mut());
        f(self.running_var.view_mut());
    }
}
