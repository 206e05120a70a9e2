use ndarray::{Array4, ArrayView4};
use rand::Rng;

use super::layers::ConvBnRelu;
use super::{AdapterConfig, MultiScaleFeatures, LEVEL_STRIDES};
use crate::error::{Error, Result};
use crate::nn::ops::{resize_bilinear, resize_bilinear_backward};
use crate::nn::{Conv2d, Parameters, Real, TensorMut, TensorRef};

/// Multi-scale adapter.
///
/// A strided convolutional pyramid over the raw image provides spatial priors
/// at strides 2, 4, 8, 16 and 32. Each of the last four is projected to the
/// token width by a pointwise "fusion" convolution and added to the token grid
/// resampled (bilinearly) to that stride.
#[derive(Debug, Clone)]
pub struct Adapter<S: Real> {
    pub prior: Vec<ConvBnRelu<S>>,
    pub fuse: Vec<Conv2d<S>>,
    patch_size: usize,
    cache: Option<AdapterCache>,
}

#[derive(Debug, Clone, Copy)]
struct AdapterCache {
    token_hw: (usize, usize),
}

impl<S: Real> Adapter<S> {
    pub fn new<R: Rng + ?Sized>(
        config: &AdapterConfig,
        embed_dim: usize,
        patch_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config.prior_channels;
        let widths = [c[0], c[0], c[1], c[2], c[3]];
        let mut cin = 3;
        let mut prior = Vec::with_capacity(5);
        for (i, &w) in widths.iter().enumerate() {
            prior.push(ConvBnRelu::new(&format!("adapter.prior.{i}"), cin, w, 3, 2, rng));
            cin = w;
        }
        prior[0].conv.input_grad = false;
        let fuse = (0..4)
            .map(|l| Conv2d::pointwise(&format!("adapter.fuse.{l}"), widths[l + 1], embed_dim, rng))
            .collect();
        Ok(Adapter {
            prior,
            fuse,
            patch_size,
            cache: None,
        })
    }

    fn check(&self, tokens: &ArrayView4<'_, S>, image: &ArrayView4<'_, S>) -> Result<()> {
        let (n, _, hp, wp) = tokens.dim();
        let (ni, _, h, w) = image.dim();
        let p = self.patch_size;
        if n != ni || hp != h.div_ceil(p) || wp != w.div_ceil(p) {
            return Err(Error::shape(format!(
                "token grid {n}x{hp}x{wp} does not belong to a {ni}x{h}x{w} image at patch size {p}"
            )));
        }
        Ok(())
    }

    /// Zeroes every fusion weight and bias, reducing the levels to pure
    /// resampled tokens.
    pub fn zero_fusion(&mut self) {
        for f in &mut self.fuse {
            f.weight.value.fill(S::zero());
            f.bias.value.fill(S::zero());
        }
    }

    pub fn infer(&self, tokens: ArrayView4<'_, S>, image: ArrayView4<'_, S>) -> Result<MultiScaleFeatures<S>> {
        self.check(&tokens, &image)?;
        let mut x = self.prior[0].infer(image);
        let mut levels = Vec::with_capacity(4);
        for l in 0..4 {
            x = self.prior[l + 1].infer(x.view());
            let (_, _, h, w) = x.dim();
            let mut level = resize_bilinear(tokens, h, w);
            level += &self.fuse[l].infer(x.view());
            levels.push(level);
        }
        MultiScaleFeatures::new(levels)
    }

    pub fn forward(&mut self, tokens: ArrayView4<'_, S>, image: ArrayView4<'_, S>) -> Result<MultiScaleFeatures<S>> {
        self.check(&tokens, &image)?;
        let mut x = self.prior[0].forward(image);
        let mut levels = Vec::with_capacity(4);
        for l in 0..4 {
            x = self.prior[l + 1].forward(x.view());
            let (_, _, h, w) = x.dim();
            let mut level = resize_bilinear(tokens, h, w);
            level += &self.fuse[l].forward(x.view());
            levels.push(level);
        }
        let (_, _, hp, wp) = tokens.dim();
        self.cache = Some(AdapterCache { token_hw: (hp, wp) });
        MultiScaleFeatures::new(levels)
    }

    /// Returns the gradient with respect to the token grid.
    pub fn backward(&mut self, dlevels: &[Array4<S>; 4]) -> Array4<S> {
        let cache = self.cache.take().expect("Adapter::backward without forward");
        let (hp, wp) = cache.token_hw;
        let mut dtokens: Option<Array4<S>> = None;
        let mut dprior: Option<Array4<S>> = None;
        for l in (0..4).rev() {
            let dl = dlevels[l].view();
            let dt = resize_bilinear_backward(dl, hp, wp);
            dtokens = Some(match dtokens {
                Some(acc) => acc + dt,
                None => dt,
            });
            let mut dx = self.fuse[l].backward(dl).expect("fusion input gradient");
            if let Some(up) = dprior.take() {
                dx += &up;
            }
            dprior = self.prior[l + 1].backward(dx.view());
        }
        self.prior[0].backward(dprior.expect("prior gradient").view());
        dtokens.expect("four levels")
    }

    /// Level spatial sizes for an input of `h` x `w`.
    pub fn level_sizes(h: usize, w: usize) -> [(usize, usize); 4] {
        LEVEL_STRIDES.map(|s| (h.div_ceil(s), w.div_ceil(s)))
    }
}

impl<S: Real> Parameters<S> for Adapter<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        self.prior.visit(f);
        self.fuse.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        self.prior.visit_mut(f);
        self.fuse.visit_mut(f);
    }
}
