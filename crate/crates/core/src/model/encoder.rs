use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Zip};
use rand::Rng;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::ops::{gelu, gelu_grad, map_to_rows, rows_to_map, sincos_position};
use crate::nn::{Conv2d, LayerNorm, Linear, MultiHeadAttention, Parameters, Real, TensorMut, TensorRef};

/// Pre-norm transformer block: attention and a GELU MLP, each residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock<S: Real> {
    pub ln1: LayerNorm<S>,
    pub attn: MultiHeadAttention<S>,
    pub ln2: LayerNorm<S>,
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
    hidden: Option<Array2<S>>,
}

impl<S: Real> TransformerBlock<S> {
    fn new<R: Rng + ?Sized>(prefix: &str, dim: usize, heads: usize, mlp: usize, rng: &mut R) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::new(prefix, dim, heads, rng),
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), dim),
            fc1: Linear::new(&format!("{prefix}.mlp_fc1"), dim, mlp, rng),
            fc2: Linear::new(&format!("{prefix}.mlp_fc2"), mlp, dim, rng),
            hidden: None,
        }
    }

    fn infer(&self, x: ArrayView2<'_, S>, tokens: usize) -> Array2<S> {
        let mut x = &x + &self.attn.infer(self.ln1.infer(x).view(), tokens);
        let u = self.fc1.infer(self.ln2.infer(x.view()).view());
        x += &self.fc2.infer(u.mapv(gelu).view());
        x
    }

    fn forward(&mut self, x: Array2<S>, tokens: usize) -> Array2<S> {
        let h = self.ln1.forward(x.view());
        let mut x = x + self.attn.forward(h, tokens);
        let u = self.fc1.forward(self.ln2.forward(x.view()));
        x += &self.fc2.forward(u.mapv(gelu));
        self.hidden = Some(u);
        x
    }

    fn backward(&mut self, dy: ArrayView2<'_, S>) -> Array2<S> {
        let u = self.hidden.take().expect("TransformerBlock::backward without forward");
        let mut du = self.fc2.backward(dy);
        Zip::from(&mut du).and(&u).for_each(|g, &v| *g *= gelu_grad(v));
        let dh2 = self.fc1.backward(du.view());
        let dx1 = &dy + &self.ln2.backward(dh2.view());
        let dh = self.attn.backward(dx1.view());
        dx1 + self.ln1.backward(dh.view())
    }
}

impl<S: Real> Parameters<S> for TransformerBlock<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        self.ln1.visit(f);
        self.attn.visit(f);
        self.ln2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        self.ln1.visit_mut(f);
        self.attn.visit_mut(f);
        self.ln2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Single-scale patch-token transformer.
///
/// Images are cut into non-overlapping `patch_size` patches, embedded, given a
/// fixed 2-D sine-cosine position code and passed through pre-norm blocks.
/// The output is a `[batch, embed_dim, H/p, W/p]` token grid.
#[derive(Debug, Clone)]
pub struct Encoder<S: Real> {
    pub config: EncoderConfig,
    pub patch_embed: Conv2d<S>,
    pub blocks: Vec<TransformerBlock<S>>,
    pub norm: LayerNorm<S>,
    grid: Option<(usize, usize, usize)>,
}

impl<S: Real> Encoder<S> {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (p, d) = (config.patch_size, config.embed_dim);
        let mut patch_embed = Conv2d::new("encoder.patch_embed.0.proj", 3, d, p, p, 0, rng);
        patch_embed.input_grad = false;
        let blocks = (0..config.depth)
            .map(|i| {
                TransformerBlock::new(
                    &format!("encoder.block.{i}"),
                    d,
                    config.num_heads,
                    d * config.mlp_ratio,
                    rng,
                )
            })
            .collect();
        Ok(Encoder {
            config: config.clone(),
            patch_embed,
            blocks,
            norm: LayerNorm::new("encoder.norm.0", d),
            grid: None,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn check_input(&self, x: &ArrayView4<'_, S>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let p = self.config.patch_size;
        if c != 3 {
            return Err(Error::shape(format!("encoder expects 3 input channels, got {c}")));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by patch size {p}"
            )));
        }
        Ok(())
    }

    fn add_position(&self, rows: &mut Array2<S>, n: usize, hp: usize, wp: usize) {
        let pe = sincos_position::<S>(hp, wp, self.config.embed_dim);
        let t = hp * wp;
        for b in 0..n {
            let mut part = rows.slice_mut(s![b * t..(b + 1) * t, ..]);
            part += &pe;
        }
    }

    /// Token grid for an input whose sides are multiples of the patch size.
    pub fn infer(&self, x: ArrayView4<'_, S>) -> Result<Array4<S>> {
        self.check_input(&x)?;
        let e = self.patch_embed.infer(x);
        let (n, _, hp, wp) = e.dim();
        let mut rows = map_to_rows(e.view());
        self.add_position(&mut rows, n, hp, wp);
        for b in &self.blocks {
            rows = b.infer(rows.view(), hp * wp);
        }
        Ok(rows_to_map(self.norm.infer(rows.view()).view(), n, hp, wp))
    }

    pub fn forward(&mut self, x: ArrayView4<'_, S>) -> Result<Array4<S>> {
        self.check_input(&x)?;
        let e = self.patch_embed.forward(x);
        let (n, _, hp, wp) = e.dim();
        let mut rows = map_to_rows(e.view());
        self.add_position(&mut rows, n, hp, wp);
        for b in &mut self.blocks {
            rows = b.forward(rows, hp * wp);
        }
        self.grid = Some((n, hp, wp));
        Ok(rows_to_map(self.norm.forward(rows.view()).view(), n, hp, wp))
    }

    /// Accumulates parameter gradients from the gradient of the token grid.
    pub fn backward(&mut self, dgrid: ArrayView4<'_, S>) {
        let (n, hp, wp) = self.grid.take().expect("Encoder::backward without forward");
        debug_assert_eq!(dgrid.dim(), (n, self.config.embed_dim, hp, wp));
        let mut d = self.norm.backward(map_to_rows(dgrid).view());
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(d.view());
        }
        let dmap = rows_to_map(d.view(), n, hp, wp);
        self.patch_embed.backward(dmap.view());
    }
}

impl<S: Real> Parameters<S> for Encoder<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        self.patch_embed.visit(f);
        self.blocks.visit(f);
        self.norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        self.patch_embed.visit_mut(f);
        self.blocks.visit_mut(f);
        self.norm.visit_mut(f);
    }
}
