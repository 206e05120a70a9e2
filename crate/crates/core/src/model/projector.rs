use ndarray::{Array2, Array4, ArrayView4, Zip};
use rand::Rng;

use super::ProjectorConfig;
use crate::error::{Error, Result};
use crate::nn::ops::{gelu, gelu_grad, map_to_rows, rows_to_map};
use crate::nn::{Linear, Parameters, Real, TensorMut, TensorRef};

/// Pointwise projection of student tokens into the reference feature space.
#[derive(Debug, Clone)]
pub struct Projector<S: Real> {
    pub layers: Vec<Linear<S>>,
    cache: Option<(usize, usize, usize, Option<Array2<S>>)>,
}

impl<S: Real> Projector<S> {
    pub fn new<R: Rng + ?Sized>(config: &ProjectorConfig, embed_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let t = config.teacher_dim;
        let mut layers = vec![Linear::new("projector.layer.0", embed_dim, t, rng)];
        if config.layers == 2 {
            layers.push(Linear::new("projector.layer.1", t, t, rng));
        }
        Ok(Projector { layers, cache: None })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs()
    }

    fn check(&self, x: &ArrayView4<'_, S>) -> Result<()> {
        let d = self.layers[0].inputs();
        if x.dim().1 != d {
            return Err(Error::shape(format!(
                "projector expects {d} channels, got {}",
                x.dim().1
            )));
        }
        Ok(())
    }

    pub fn infer(&self, grid: ArrayView4<'_, S>) -> Result<Array4<S>> {
        self.check(&grid)?;
        let (n, _, h, w) = grid.dim();
        let mut rows = self.layers[0].infer(map_to_rows(grid).view());
        if let Some(second) = self.layers.get(1) {
            rows = second.infer(rows.mapv(gelu).view());
        }
        Ok(rows_to_map(rows.view(), n, h, w))
    }

    pub fn forward(&mut self, grid: ArrayView4<'_, S>) -> Result<Array4<S>> {
        self.check(&grid)?;
        let (n, _, h, w) = grid.dim();
        let mut rows = self.layers[0].forward(map_to_rows(grid));
        let mut hidden = None;
        if self.layers.len() == 2 {
            hidden = Some(rows.clone());
            rows = self.layers[1].forward(rows.mapv(gelu));
        }
        self.cache = Some((n, h, w, hidden));
        Ok(rows_to_map(rows.view(), n, h, w))
    }

    /// Returns the gradient with respect to the input token grid.
    pub fn backward(&mut self, dy: ArrayView4<'_, S>) -> Array4<S> {
        let (n, h, w, hidden) = self.cache.take().expect("Projector::backward without forward");
        let mut d = map_to_rows(dy);
        if let Some(u) = hidden {
            d = self.layers[1].backward(d.view());
            Zip::from(&mut d).and(&u).for_each(|g, &v| *g *= gelu_grad(v));
        }
        let d = self.layers[0].backward(d.view());
        rows_to_map(d.view(), n, h, w)
    }
}

impl<S: Real> Parameters<S> for Projector<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        self.layers.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        self.layers.visit_mut(f);
    }
}
