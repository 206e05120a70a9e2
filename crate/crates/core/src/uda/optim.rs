use crate::error::{Error, Result};
use crate::model::TensorArchive;
use crate::nn::{Parameters, Real, TensorKind};

/// Adam with decoupled weight decay and per-tensor learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Real> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. `lr_of` maps a parameter name to its learning rate.
    pub fn step(&mut self, model: &mut dyn Parameters<S>, lr_of: &mut dyn FnMut(&str) -> Result<f64>) -> Result<()> {
        self.t += 1;
        let bc1 = S::lit(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::lit(1.0 - self.beta2.powi(self.t as i32));
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (one, eps, wd) = (S::one(), S::lit(self.eps), S::lit(self.weight_decay));
        let init = self.m.is_empty();
        let mut j = 0;
        let mut err = None;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |t| {
            if t.kind != TensorKind::Param || err.is_some() {
                return;
            }
            let lr = match lr_of(t.name) {
                Ok(lr) => S::lit(lr),
                Err(e) => {
                    err = Some(e);
                    return;
                }
            };
            if init {
                ms.push(vec![S::zero(); t.value.len()]);
                vs.push(vec![S::zero(); t.value.len()]);
            }
            let (m, v) = (&mut ms[j], &mut vs[j]);
            let g = t.grad.expect("parameters carry gradients");
            for i in 0..t.value.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                t.value[i] = t.value[i] - lr * wd * t.value[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            j += 1;
        });
        err.map_or(Ok(()), Err)
    }

    pub fn save_into(&self, archive: &mut TensorArchive, model: &dyn Parameters<S>) {
        archive.metadata.insert("optim.t".into(), self.t.to_string());
        let mut j = 0;
        model.visit(&mut |t| {
            if t.kind == TensorKind::Param && j < self.m.len() {
                archive.insert_raw(format!("optim.m.{}", t.name), vec![t.value.len()], &self.m[j]);
                archive.insert_raw(format!("optim.v.{}", t.name), vec![t.value.len()], &self.v[j]);
                j += 1;
            }
        });
    }

    pub fn load_from(&mut self, archive: &TensorArchive, model: &dyn Parameters<S>) -> Result<()> {
        self.t = archive
            .metadata
            .get("optim.t")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("optimizer step missing".into()))?;
        self.m.clear();
        self.v.clear();
        if self.t == 0 {
            return Ok(());
        }
        let mut err = None;
        model.visit(&mut |t| {
            if t.kind != TensorKind::Param || err.is_some() {
                return;
            }
            let m = archive.get_raw::<S>(&format!("optim.m.{}", t.name));
            let v = archive.get_raw::<S>(&format!("optim.v.{}", t.name));
            match (m, v) {
                (Ok((_, m)), Ok((_, v))) if m.len() == t.value.len() && v.len() == t.value.len() => {
                    self.m.push(m);
                    self.v.push(v);
                }
                (Err(e), _) | (_, Err(e)) => err = Some(e),
                _ => {
                    err = Some(Error::Checkpoint(format!(
                        "optimizer state for {} has the wrong size",
                        t.name
                    )))
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Scales all parameter gradients so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<S: Real>(model: &mut dyn Parameters<S>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit(&mut |t| {
        if let Some(g) = t.grad {
            sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = S::lit(max_norm / norm);
        model.visit_mut(&mut |t| {
            if let Some(g) = t.grad {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        });
    }
    norm
}
