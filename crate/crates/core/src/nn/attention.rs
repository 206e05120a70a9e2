use ndarray::{s, Array2, ArrayView2, Zip};
use rand::Rng;

use super::{Linear, Parameters, Real, TensorMut, TensorRef};
use crate::par;

/// Multi-head self-attention over groups of `tokens` consecutive rows.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<S: Real> {
    pub qkv: Linear<S>,
    pub proj: Linear<S>,
    pub heads: usize,
    cache: Option<AttnCache<S>>,
}

#[derive(Debug, Clone)]
struct AttnCache<S> {
    qkv: Array2<S>,
    probs: Vec<Array2<S>>,
    tokens: usize,
}

impl<S: Real> MultiHeadAttention<S> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(
            dim.is_multiple_of(heads),
            "embedding dim must split evenly across heads"
        );
        MultiHeadAttention {
            qkv: Linear::new(&format!("{prefix}.attn_qkv"), dim, 3 * dim, rng),
            proj: Linear::new(&format!("{prefix}.attn_proj"), dim, dim, rng),
            heads,
            cache: None,
        }
    }

    fn dim(&self) -> usize {
        self.proj.outputs()
    }

    /// Attention probabilities and head outputs for every (item, head) pair.
    fn attend(&self, qkv: &Array2<S>, tokens: usize) -> (Vec<Array2<S>>, Array2<S>) {
        let d = self.dim();
        let dh = d / self.heads;
        let items = qkv.nrows() / tokens;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let heads = self.heads;
        let parts = par::map_range(items * heads, |i| {
            let (b, h) = (i / heads, i % heads);
            let rows = s![b * tokens..(b + 1) * tokens, ..];
            let block = qkv.slice(rows);
            let q = block.slice(s![.., h * dh..(h + 1) * dh]);
            let k = block.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = block.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t());
            p.mapv_inplace(|x| x * scale);
            for mut row in p.rows_mut() {
                let m = row.fold(S::neg_infinity(), |a, &b| a.max(b));
                row.mapv_inplace(|x| (x - m).exp());
                let z = row.sum();
                row.mapv_inplace(|x| x / z);
            }
            let o = p.dot(&v);
            (p, o)
        });
        let mut out = Array2::zeros((qkv.nrows(), d));
        let mut probs = Vec::with_capacity(parts.len());
        for (i, (p, o)) in parts.into_iter().enumerate() {
            let (b, h) = (i / heads, i % heads);
            out.slice_mut(s![b * tokens..(b + 1) * tokens, h * dh..(h + 1) * dh])
                .assign(&o);
            probs.push(p);
        }
        (probs, out)
    }

    pub fn infer(&self, x: ArrayView2<'_, S>, tokens: usize) -> Array2<S> {
        let qkv = self.qkv.infer(x);
        let (_, o) = self.attend(&qkv, tokens);
        self.proj.infer(o.view())
    }

    pub fn forward(&mut self, x: Array2<S>, tokens: usize) -> Array2<S> {
        let qkv = self.qkv.forward(x);
        let (probs, o) = self.attend(&qkv, tokens);
        self.cache = Some(AttnCache { qkv, probs, tokens });
        self.proj.forward(o)
    }

    pub fn backward(&mut self, dy: ArrayView2<'_, S>) -> Array2<S> {
        let cache = self.cache.take().expect("attention backward without forward");
        let d_o = self.proj.backward(dy);
        let d = self.dim();
        let dh = d / self.heads;
        let tokens = cache.tokens;
        let heads = self.heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let qkv = &cache.qkv;
        let probs = &cache.probs;
        let parts = par::map_range(probs.len(), |i| {
            let (b, h) = (i / heads, i % heads);
            let rows = s![b * tokens..(b + 1) * tokens, ..];
            let block = qkv.slice(rows);
            let q = block.slice(s![.., h * dh..(h + 1) * dh]);
            let k = block.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = block.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let g = d_o.slice(s![b * tokens..(b + 1) * tokens, h * dh..(h + 1) * dh]);
            let p = &probs[i];
            let dv = p.t().dot(&g);
            let dp = g.dot(&v.t());
            let mut ds = Array2::zeros(p.raw_dim());
            for ((mut out, prow), dprow) in ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
                let dot = prow.iter().zip(dprow).map(|(&a, &b)| a * b).sum::<S>();
                Zip::from(&mut out)
                    .and(&prow)
                    .and(&dprow)
                    .for_each(|o, &pi, &gi| *o = pi * (gi - dot) * scale);
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            (dq, dk, dv)
        });
        let mut dqkv = Array2::zeros(qkv.raw_dim());
        for (i, (dq, dk, dv)) in parts.into_iter().enumerate() {
            let (b, h) = (i / heads, i % heads);
            let r = b * tokens..(b + 1) * tokens;
            dqkv.slice_mut(s![r.clone(), h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![r.clone(), d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![r, 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
        self.qkv.backward(dqkv.view())
    }
}

impl<S: Real> Parameters<S> for MultiHeadAttention<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        self.qkv.visit(f);
        self.proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        self.qkv.visit_mut(f);
        self.proj.visit_mut(f);
    }
}
