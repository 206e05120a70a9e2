//! Stateless feature-map operations and their adjoints.

use ndarray::{s, Array2, Array3, Array4, ArrayView4, Axis, Zip};

use super::Real;

pub fn relu<S: Real>(x: &Array4<S>) -> Array4<S> {
    x.mapv(|v| if v > S::zero() { v } else { S::zero() })
}

/// Gradient of `relu` given its output.
pub fn relu_backward<S: Real>(y: &Array4<S>, dy: ArrayView4<'_, S>) -> Array4<S> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= S::zero() {
            *d = S::zero();
        }
    });
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu<S: Real>(x: S) -> S {
    let c = S::lit(GELU_C);
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::lit(GELU_C);
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::lit(3.0) * k * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

pub fn upsample_nearest2x<S: Real>(x: ArrayView4<'_, S>) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(b, ch, y, xx)| x[[b, ch, y / 2, xx / 2]])
}

pub fn upsample_nearest2x_backward<S: Real>(dy: ArrayView4<'_, S>) -> Array4<S> {
    let (n, c, h2, w2) = dy.dim();
    let mut dx = Array4::zeros((n, c, h2 / 2, w2 / 2));
    for ((b, ch, y, x), &g) in dy.indexed_iter() {
        dx[[b, ch, y / 2, x / 2]] += g;
    }
    dx
}

/// Interpolation taps for one axis: (low index, high index, low weight, high weight).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 < input - 1 { i0 + 1 } else { i0 };
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (no corner alignment).
pub fn resize_bilinear<S: Real>(x: ArrayView4<'_, S>, oh: usize, ow: usize) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    if (h, w) == (oh, ow) {
        return x.to_owned();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Array4::zeros((n, c, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            let src = x.slice(s![b, ch, .., ..]);
            let mut dst = out.slice_mut(s![b, ch, .., ..]);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (S::lit(wy0), S::lit(wy1));
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (S::lit(wx0), S::lit(wx1));
                    dst[[oy, ox]] = wy0 * (wx0 * src[[y0, x0]] + wx1 * src[[y0, x1]])
                        + wy1 * (wx0 * src[[y1, x0]] + wx1 * src[[y1, x1]]);
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<S: Real>(dy: ArrayView4<'_, S>, h: usize, w: usize) -> Array4<S> {
    let (n, c, oh, ow) = dy.dim();
    if (h, w) == (oh, ow) {
        return dy.to_owned();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            let g = dy.slice(s![b, ch, .., ..]);
            let mut dst = dx.slice_mut(s![b, ch, .., ..]);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (S::lit(wy0), S::lit(wy1));
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (S::lit(wx0), S::lit(wx1));
                    let v = g[[oy, ox]];
                    dst[[y0, x0]] += wy0 * wx0 * v;
                    dst[[y0, x1]] += wy0 * wx1 * v;
                    dst[[y1, x0]] += wy1 * wx0 * v;
                    dst[[y1, x1]] += wy1 * wx1 * v;
                }
            }
        }
    }
    dx
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

/// Reflection-pads the bottom and right edges by `ph` and `pw` pixels.
/// Each pad must be smaller than the corresponding dimension.
pub fn reflect_pad<S: Real>(x: ArrayView4<'_, S>, ph: usize, pw: usize) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    if ph == 0 && pw == 0 {
        return x.to_owned();
    }
    assert!(ph < h && pw < w, "reflection pad larger than input");
    Array4::from_shape_fn((n, c, h + ph, w + pw), |(b, ch, y, xx)| {
        x[[b, ch, reflect(y, h), reflect(xx, w)]]
    })
}

pub fn crop<S: Real>(x: ArrayView4<'_, S>, h: usize, w: usize) -> Array4<S> {
    x.slice(s![.., .., ..h, ..w]).to_owned()
}

/// Mirrors the width axis.
pub fn flip_horizontal<S: Clone>(x: ArrayView4<'_, S>) -> Array4<S> {
    x.slice(s![.., .., .., ..;-1]).to_owned()
}

pub fn flip_horizontal3<S: Clone>(x: ndarray::ArrayView3<'_, S>) -> Array3<S> {
    x.slice(s![.., .., ..;-1]).to_owned()
}

pub fn flip_horizontal2<S: Clone>(x: ndarray::ArrayView2<'_, S>) -> Array2<S> {
    x.slice(s![.., ..;-1]).to_owned()
}

/// Softmax over the channel axis of `[batch, classes, h, w]`.
pub fn softmax_channels<S: Real>(x: ArrayView4<'_, S>) -> Array4<S> {
    let mut out = x.to_owned();
    for mut img in out.outer_iter_mut() {
        softmax_axis0(&mut img);
    }
    out
}

pub(crate) fn softmax_axis0<S: Real>(img: &mut ndarray::ArrayViewMut3<'_, S>) {
    let (c, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let mut m = S::neg_infinity();
            for k in 0..c {
                m = m.max(img[[k, y, x]]);
            }
            let mut z = S::zero();
            for k in 0..c {
                let e = (img[[k, y, x]] - m).exp();
                img[[k, y, x]] = e;
                z += e;
            }
            for k in 0..c {
                img[[k, y, x]] /= z;
            }
        }
    }
}

/// Channel argmax per pixel; ties resolve to the lowest class id.
pub fn argmax_channels<S: Real>(x: ndarray::ArrayView3<'_, S>) -> Array2<u8> {
    let (c, h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(y, xx)| {
        let mut best = 0;
        for k in 1..c {
            if x[[k, y, xx]] > x[[best, y, xx]] {
                best = k;
            }
        }
        best as u8
    })
}

/// Fixed 2-D sine/cosine position code, `[h * w, dim]`, row-major over the grid.
/// Half the channels encode the row, half the column.
pub fn sincos_position<S: Real>(h: usize, w: usize, dim: usize) -> Array2<S> {
    let quarter = (dim / 4).max(1);
    let mut pe = Array2::zeros((h * w, dim));
    for y in 0..h {
        for x in 0..w {
            let mut row = pe.row_mut(y * w + x);
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                let cols = [
                    ((y as f64) * freq).sin(),
                    ((y as f64) * freq).cos(),
                    ((x as f64) * freq).sin(),
                    ((x as f64) * freq).cos(),
                ];
                for (j, v) in cols.into_iter().enumerate() {
                    let idx = j * quarter + i;
                    if idx < dim {
                        row[idx] = S::lit(v);
                    }
                }
            }
        }
    }
    pe
}

/// `[b, d, h, w]` feature map to `[b*h*w, d]` rows.
pub fn map_to_rows<S: Real>(x: ArrayView4<'_, S>) -> Array2<S> {
    let (n, d, h, w) = x.dim();
    let t = x.permuted_axes([0, 2, 3, 1]);
    let t = t.as_standard_layout();
    t.to_shape((n * h * w, d)).unwrap().into_owned()
}

/// Inverse of [`map_to_rows`].
pub fn rows_to_map<S: Real>(rows: ndarray::ArrayView2<'_, S>, n: usize, h: usize, w: usize) -> Array4<S> {
    let d = rows.ncols();
    let rows = rows.as_standard_layout();
    let t = rows.to_shape((n, h, w, d)).unwrap();
    t.permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned()
}

/// Sum of two maps with the same shape.
pub fn add<S: Real>(a: &Array4<S>, b: &Array4<S>) -> Array4<S> {
    let mut out = a.clone();
    out += b;
    out
}

pub fn stack_images<S: Real>(images: &[ndarray::ArrayView3<'_, S>]) -> Array4<S> {
    ndarray::stack(Axis(0), images).expect("images share one shape")
}
