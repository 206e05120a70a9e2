use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Real;

/// A cross-domain mixed training image.
#[derive(Debug, Clone, PartialEq)]
pub struct MixResult<S> {
    pub image: Array3<S>,
    pub label: Array2<u8>,
    pub weight: Array2<S>,
    /// True where the pixel comes from the source image.
    pub mask: Array2<bool>,
    /// Source classes pasted onto the target.
    pub classes: Vec<u8>,
}

/// Pastes the pixels of half (rounded up) of the source classes, chosen
/// uniformly, onto the target image. Pasted pixels keep their source label
/// with weight 1; the rest take the pseudo-label with weight `q`.
#[allow(clippy::too_many_arguments)]
pub fn dacs_mix<S: Real, R: Rng + ?Sized>(
    source_image: ArrayView3<'_, S>,
    source_label: ArrayView2<'_, u8>,
    target_image: ArrayView3<'_, S>,
    pseudo_label: ArrayView2<'_, u8>,
    q: S,
    ignore: u8,
    rng: &mut R,
) -> Result<MixResult<S>> {
    let (c, h, w) = source_image.dim();
    if target_image.dim() != (c, h, w) || source_label.dim() != (h, w) || pseudo_label.dim() != (h, w) {
        return Err(Error::shape("source, target and label maps must share one size"));
    }
    let mut present = [false; 256];
    for &l in source_label.iter() {
        present[l as usize] = true;
    }
    present[ignore as usize] = false;
    let classes: Vec<u8> = (0..=255u8).filter(|&k| present[k as usize]).collect();
    if classes.is_empty() {
        return Err(Error::NoLabeledPixels);
    }
    let pick = classes.len().div_ceil(2);
    let mut chosen: Vec<u8> = sample(rng, classes.len(), pick)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    chosen.sort_unstable();
    let mut selected = [false; 256];
    for &k in &chosen {
        selected[k as usize] = true;
    }
    let mask = source_label.mapv(|l| selected[l as usize]);
    let mut image = target_image.to_owned();
    for (mut dst, src) in image.axis_iter_mut(Axis(0)).zip(source_image.axis_iter(Axis(0))) {
        Zip::from(&mut dst).and(&src).and(&mask).for_each(|d, &s, &m| {
            if m {
                *d = s;
            }
        });
    }
    let mut label = pseudo_label.to_owned();
    let mut weight = Array2::from_elem((h, w), q);
    Zip::from(&mut label)
        .and(&mut weight)
        .and(&source_label)
        .and(&mask)
        .for_each(|l, wt, &s, &m| {
            if m {
                *l = s;
                *wt = if s == ignore { S::zero() } else { S::one() };
            }
        });
    Ok(MixResult {
        image,
        label,
        weight,
        mask,
        classes: chosen,
    })
}

/// Zeroes each `patch` x `patch` cell independently with probability
/// `ratio`. Returns the masked image and the per-cell drop grid.
pub fn mask_image<S: Real, R: Rng + ?Sized>(
    image: ArrayView3<'_, S>,
    patch: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<(Array3<S>, Array2<bool>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::param(format!("mask ratio must be in [0, 1], got {ratio}")));
    }
    if patch == 0 {
        return Err(Error::param("mask patch size must be positive"));
    }
    let (_, h, w) = image.dim();
    let grid = Array2::from_shape_simple_fn((h.div_ceil(patch), w.div_ceil(patch)), || rng.random_bool(ratio));
    let mut out = image.to_owned();
    for mut plane in out.outer_iter_mut() {
        for ((y, x), v) in plane.indexed_iter_mut() {
            if grid[[y / patch, x / patch]] {
                *v = S::zero();
            }
        }
    }
    Ok((out, grid))
}
