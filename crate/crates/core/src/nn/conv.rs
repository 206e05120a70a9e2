use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;

use super::{accumulate, kaiming_uniform, Param, Parameters, Real, TensorMut, TensorRef};
use crate::par;

/// 2-D convolution with square kernels, zero padding and a shared stride.
///
/// The weight is stored as `[out_channels, in_channels * k * k]` so that each
/// image reduces to one matrix product against its column buffer.
#[derive(Debug, Clone)]
pub struct Conv2d<S: Real> {
    pub weight: Param<S, ndarray::Ix2>,
    pub bias: Param<S, ndarray::Ix1>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// When false, `backward` skips the input gradient (first layer of a stem).
    pub input_grad: bool,
    cache: Option<ConvCache<S>>,
}

#[derive(Debug, Clone)]
struct ConvCache<S> {
    cols: Vec<Array2<S>>,
    in_h: usize,
    in_w: usize,
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl<S: Real> Conv2d<S> {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = kaiming_uniform(rng, fan_in, out_channels * fan_in);
        Conv2d {
            weight: Param::new(
                format!("{prefix}.weight"),
                Array2::from_shape_vec((out_channels, fan_in), w).unwrap(),
            ),
            bias: Param::new(format!("{prefix}.bias"), Array1::zeros(out_channels)),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input_grad: true,
            cache: None,
        }
    }

    /// Pointwise (1x1) convolution.
    pub fn pointwise<R: Rng + ?Sized>(prefix: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(prefix, cin, cout, 1, 1, 0, rng)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (oh, ow) = self.output_size(h, w);
        Geometry {
            c: self.in_channels,
            h,
            w,
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            oh,
            ow,
        }
    }

    fn columns(&self, x: ArrayView4<'_, S>, b: usize, g: Geometry) -> Array2<S> {
        let img = x.index_axis(Axis(0), b);
        if self.is_pointwise() {
            img.to_shape((g.c, g.h * g.w)).unwrap().into_owned()
        } else {
            let img = img.as_standard_layout();
            im2col(img.as_slice().unwrap(), g)
        }
    }

    fn check_input(&self, x: &ArrayView4<'_, S>) {
        assert_eq!(
            x.shape()[1],
            self.in_channels,
            "conv {} expects {} input channels",
            self.weight.name,
            self.in_channels
        );
    }

    fn apply(&self, col: &Array2<S>) -> Array2<S> {
        let mut y = self.weight.value.dot(col);
        y += &self.bias.value.view().insert_axis(Axis(1));
        y
    }

    fn assemble(&self, n: usize, g: Geometry, ys: Vec<Array2<S>>) -> Array4<S> {
        let mut out = Vec::with_capacity(n * self.out_channels * g.oh * g.ow);
        for y in ys {
            out.extend(y.iter().copied());
        }
        Array4::from_shape_vec((n, self.out_channels, g.oh, g.ow), out).unwrap()
    }

    pub fn infer(&self, x: ArrayView4<'_, S>) -> Array4<S> {
        self.check_input(&x);
        let (n, _, h, w) = x.dim();
        let g = self.geometry(h, w);
        let ys = par::map_range(n, |b| self.apply(&self.columns(x, b, g)));
        self.assemble(n, g, ys)
    }

    pub fn forward(&mut self, x: ArrayView4<'_, S>) -> Array4<S> {
        self.check_input(&x);
        let (n, _, h, w) = x.dim();
        let g = self.geometry(h, w);
        let this = &*self;
        let pairs = par::map_range(n, |b| {
            let col = this.columns(x, b, g);
            let y = this.apply(&col);
            (col, y)
        });
        let (cols, ys): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let out = self.assemble(n, g, ys);
        self.cache = Some(ConvCache { cols, in_h: h, in_w: w });
        out
    }

    /// Returns the input gradient, or `None` when `input_grad` is disabled.
    pub fn backward(&mut self, dy: ArrayView4<'_, S>) -> Option<Array4<S>> {
        let cache = self.cache.take().expect("Conv2d::backward without forward");
        let (n, cout, oh, ow) = dy.dim();
        let g = self.geometry(cache.in_h, cache.in_w);
        debug_assert_eq!((oh, ow), (g.oh, g.ow));
        let this = &*self;
        let parts = par::map_range(n, |b| {
            let dyb = dy.index_axis(Axis(0), b);
            let dyb = dyb.to_shape((cout, oh * ow)).unwrap();
            let mut dw = Array2::<S>::zeros(this.weight.value.raw_dim());
            general_mat_mul(S::one(), &dyb, &cache.cols[b].t(), S::zero(), &mut dw);
            let db = dyb.sum_axis(Axis(1));
            let dx = this.input_grad.then(|| {
                let dcol = this.weight.value.t().dot(&dyb);
                if this.is_pointwise() {
                    dcol.into_raw_vec_and_offset().0
                } else {
                    col2im(dcol.view(), g)
                }
            });
            (dw, db, dx)
        });
        let mut dx_all = self.input_grad.then(|| Vec::with_capacity(n * g.c * g.h * g.w));
        for (dw, db, dx) in parts {
            accumulate(self.weight.grad.as_slice_mut().unwrap(), dw.as_slice().unwrap());
            self.bias.grad += &db;
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.extend(dx);
            }
        }
        dx_all.map(|v| Array4::from_shape_vec((n, g.c, g.h, g.w), v).unwrap())
    }
}

fn im2col<S: Real>(x: &[S], g: Geometry) -> Array2<S> {
    let plane = g.oh * g.ow;
    let mut col = vec![S::zero(); g.c * g.k * g.k * plane];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.c * g.k * g.k, plane), col).unwrap()
}

fn col2im<S: Real>(col: ArrayView2<'_, S>, g: Geometry) -> Vec<S> {
    let col = col.as_standard_layout();
    let col = col.as_slice().unwrap();
    let plane = g.oh * g.ow;
    let mut x = vec![S::zero(); g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

impl<S: Real> Parameters<S> for Conv2d<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        f(self.weight.view());
        f(self.bias.view());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        f(self.weight.view_mut());
        f(self.bias.view_mut());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct nested-loop convolution used as an oracle.
    fn naive(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut y = Array4::zeros((n, conv.out_channels, oh, ow));
        for b in 0..n {
            for o in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight.value[[o, (ci * k + ky) * k + kx]]
                                            * x[[b, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[b, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_input(rng: &mut impl Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn strided_conv_matches_naive_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 4, 0)] {
            let mut conv = Conv2d::<f64>::new("t.c.0.conv", 3, 5, k, s, p, &mut rng);
            conv.bias.value.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            let x = random_input(&mut rng, (2, 3, 8, 8));
            let fast = conv.infer(x.view());
            let slow = naive(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(conv.forward(x.view()), fast);
        }
    }

    #[test]
    fn input_gradient_is_adjoint_of_forward() {
        // <conv(x) - b, dy> == <x, conv^T dy> for the linear part.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new("t.c.0.conv", 2, 3, 3, 2, 1, &mut rng);
        let x = random_input(&mut rng, (1, 2, 7, 6));
        let y = conv.forward(x.view());
        let dy = random_input(&mut rng, y.dim());
        let dx = conv.backward(dy.view()).unwrap();
        let lhs: f64 = (&y * &dy).sum();
        let rhs: f64 = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
