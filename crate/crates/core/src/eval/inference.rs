use ndarray::{s, Array3, Array4, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn::ops::{flip_horizontal, softmax_channels};
use crate::nn::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub window: usize,
    pub stride: usize,
    pub flip: bool,
    /// Tiles per forward pass.
    pub batch: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            window: 64,
            stride: 48,
            flip: true,
            batch: 8,
        }
    }
}

impl InferConfig {
    /// `min_input` is the smallest side the model accepts (its patch size).
    pub fn validate(&self, min_input: usize) -> Result<()> {
        if self.window < min_input {
            return Err(Error::param(format!(
                "window {} is smaller than the model minimum input {min_input}",
                self.window
            )));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::param(format!(
                "stride must be in 1..={}, got {}",
                self.window, self.stride
            )));
        }
        if self.batch == 0 {
            return Err(Error::param("inference batch must be positive"));
        }
        Ok(())
    }
}

/// Evaluation-mode class probabilities.
pub fn predict_probs<S: Real>(model: &ModelBundle<S>, x: ArrayView4<'_, S>) -> Result<Array4<S>> {
    Ok(softmax_channels(model.infer(x)?.logits.view()))
}

/// Mean of the probabilities for `x` and the un-flipped probabilities for
/// its mirror image.
pub fn flip_aggregated_probs<S: Real>(model: &ModelBundle<S>, x: ArrayView4<'_, S>) -> Result<Array4<S>> {
    let direct = predict_probs(model, x)?;
    let mirrored = predict_probs(model, flip_horizontal(x).view())?;
    Ok(average_pair(direct, flip_horizontal(mirrored.view())))
}

fn average_pair<S: Real, D: ndarray::Dimension>(
    a: ndarray::Array<S, D>,
    b: ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    let half = S::lit(0.5);
    (a + b).mapv(|v| v * half)
}

/// Window origins along one axis: stride-spaced, with the last window flush
/// against the far edge.
fn origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let last = len - window;
    let mut out: Vec<usize> = (0..last).step_by(stride).collect();
    out.push(last);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Tiles covering an `h` x `w` image. Sides smaller than the window yield a
/// single tile spanning that side.
pub fn tiles(h: usize, w: usize, window: usize, stride: usize) -> Vec<Tile> {
    let (th, tw) = (h.min(window), w.min(window));
    let mut out = Vec::new();
    for &y in &origins(h, window, stride) {
        for &x in &origins(w, window, stride) {
            out.push(Tile { y, x, h: th, w: tw });
        }
    }
    out
}

/// Sliding-window probabilities for one unflipped image, running tiles in
/// batches.
fn window_probs<S: Real>(model: &ModelBundle<S>, image: ArrayView3<'_, S>, cfg: &InferConfig) -> Result<Array3<S>> {
    let (_, h, w) = image.dim();
    let c = model.num_classes();
    let all = tiles(h, w, cfg.window, cfg.stride);
    let mut sum = Array3::<S>::zeros((c, h, w));
    let mut cover = ndarray::Array2::<u32>::zeros((h, w));
    for chunk in all.chunks(cfg.batch) {
        let crops: Vec<_> = chunk
            .iter()
            .map(|t| image.slice(s![.., t.y..t.y + t.h, t.x..t.x + t.w]))
            .collect();
        let batch = ndarray::stack(Axis(0), &crops).expect("tiles share a size");
        let probs = predict_probs(model, batch.view())?;
        for (t, p) in chunk.iter().zip(probs.outer_iter()) {
            let mut dst = sum.slice_mut(s![.., t.y..t.y + t.h, t.x..t.x + t.w]);
            dst += &p;
            cover
                .slice_mut(s![t.y..t.y + t.h, t.x..t.x + t.w])
                .mapv_inplace(|v| v + 1);
        }
    }
    for mut plane in sum.outer_iter_mut() {
        ndarray::Zip::from(&mut plane)
            .and(&cover)
            .for_each(|v, &n| *v /= S::lit(n as f64));
    }
    Ok(sum)
}

/// Coverage-normalised class probabilities `[C, H, W]` for one image.
///
/// With `flip`, the result is averaged with the mirrored prediction of the
/// mirrored image, which makes the output exactly flip-equivariant.
pub fn sliding_window_infer<S: Real>(
    model: &ModelBundle<S>,
    image: ArrayView3<'_, S>,
    cfg: &InferConfig,
) -> Result<Array3<S>> {
    cfg.validate(model.min_input())?;
    let direct = window_probs(model, image, cfg)?;
    if !cfg.flip {
        return Ok(direct);
    }
    let flipped = image.slice(s![.., .., ..;-1]);
    let mirrored = window_probs(model, flipped, cfg)?;
    let back = mirrored.slice(s![.., .., ..;-1]).to_owned();
    Ok(average_pair(direct, back))
}
