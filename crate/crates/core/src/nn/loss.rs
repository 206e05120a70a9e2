//! Loss functions returning both the value and the gradient w.r.t. their input.

use ndarray::{Array4, ArrayView3, ArrayView4, Axis};

use super::Real;

/// Per-pixel weighted cross-entropy over `[batch, classes, h, w]` logits.
///
/// Pixels labelled `ignore` contribute nothing. The sum of weighted
/// per-pixel losses is divided by the number of non-ignored pixels.
pub fn weighted_cross_entropy<S: Real>(
    logits: ArrayView4<'_, S>,
    labels: ArrayView3<'_, u8>,
    weights: ArrayView3<'_, S>,
    ignore: u8,
) -> (S, Array4<S>) {
    let (n, c, h, w) = logits.dim();
    assert_eq!(labels.dim(), (n, h, w), "label shape mismatch");
    assert_eq!(weights.dim(), (n, h, w), "weight shape mismatch");
    let valid = labels.iter().filter(|&&l| l != ignore).count();
    let mut grad = Array4::zeros(logits.raw_dim());
    if valid == 0 {
        return (S::zero(), grad);
    }
    let norm = S::lit(valid as f64);
    let mut total = S::zero();
    let mut probs = vec![S::zero(); c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let label = labels[[b, y, x]];
                if label == ignore {
                    continue;
                }
                let label = label as usize;
                assert!(label < c, "label {label} outside class range");
                let wt = weights[[b, y, x]];
                let mut m = S::neg_infinity();
                for k in 0..c {
                    m = m.max(logits[[b, k, y, x]]);
                }
                let mut z = S::zero();
                for (k, p) in probs.iter_mut().enumerate() {
                    *p = (logits[[b, k, y, x]] - m).exp();
                    z += *p;
                }
                let log_z = z.ln() + m;
                total += wt * (log_z - logits[[b, label, y, x]]);
                if wt != S::zero() {
                    for (k, p) in probs.iter().enumerate() {
                        let target = if k == label { S::one() } else { S::zero() };
                        grad[[b, k, y, x]] = wt * (*p / z - target) / norm;
                    }
                }
            }
        }
    }
    (total / norm, grad)
}

/// Norm floor applied to both feature vectors of a cosine pair.
pub const COSINE_EPS: f64 = 1e-8;

/// Mean over grid positions of `1 - cos(student, teacher)`; inputs are
/// `[batch, dim, h, w]`. Only the student receives a gradient.
pub fn cosine_distance<S: Real>(student: ArrayView4<'_, S>, teacher: ArrayView4<'_, S>) -> (S, Array4<S>) {
    assert_eq!(student.dim(), teacher.dim(), "feature grids differ in shape");
    let (n, d, h, w) = student.dim();
    let positions = S::lit((n * h * w) as f64);
    let eps = S::lit(COSINE_EPS);
    let mut grad = Array4::zeros(student.raw_dim());
    let mut total = S::zero();
    for b in 0..n {
        let sb = student.index_axis(Axis(0), b);
        let tb = teacher.index_axis(Axis(0), b);
        for y in 0..h {
            for x in 0..w {
                let mut dot = S::zero();
                let mut ss = S::zero();
                let mut tt = S::zero();
                for k in 0..d {
                    let (s, t) = (sb[[k, y, x]], tb[[k, y, x]]);
                    dot += s * t;
                    ss += s * s;
                    tt += t * t;
                }
                let s_raw = ss.sqrt();
                let t_raw = tt.sqrt();
                let ns = s_raw.max(eps);
                let nt = t_raw.max(eps);
                // sqrt(ss * tt) keeps the parallel and antiparallel cases exact
                let denom = if s_raw >= eps && t_raw >= eps {
                    (ss * tt).sqrt()
                } else {
                    ns * nt
                };
                let cos = dot / denom;
                total += S::one() - cos;
                let clamped = s_raw < eps;
                for k in 0..d {
                    let mut dcos = tb[[k, y, x]] / (ns * nt);
                    if !clamped {
                        dcos -= cos * sb[[k, y, x]] / (ns * ns);
                    }
                    grad[[b, k, y, x]] = -dcos / positions;
                }
            }
        }
    }
    (total / positions, grad)
}
