use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn::{Parameters, Real, TensorKind};

/// Exponential moving average of the student, used to produce pseudo-labels.
#[derive(Debug, Clone)]
pub struct TeacherState<S: Real> {
    pub model: ModelBundle<S>,
    pub alpha: f64,
}

impl<S: Real> TeacherState<S> {
    pub fn from_student(student: &ModelBundle<S>, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::param(format!("EMA momentum must be in [0, 1], got {alpha}")));
        }
        Ok(TeacherState {
            model: student.clone(),
            alpha,
        })
    }

    pub fn update(&mut self, student: &ModelBundle<S>) -> Result<()> {
        ema_update(&mut self.model, student, self.alpha)
    }
}

/// `teacher = alpha * teacher + (1 - alpha) * student` for parameters;
/// buffers (normalisation statistics) are copied from the student.
pub fn ema_update<S: Real>(teacher: &mut dyn Parameters<S>, student: &dyn Parameters<S>, alpha: f64) -> Result<()> {
    let mut src: Vec<(&str, &[usize], &[S])> = Vec::new();
    student.visit(&mut |t| src.push((t.name, t.shape, t.value)));
    let (a, b) = (S::lit(alpha), S::lit(1.0 - alpha));
    let mut i = 0;
    let mut err = None;
    teacher.visit_mut(&mut |t| {
        if err.is_some() {
            return;
        }
        match src.get(i) {
            Some(&(name, shape, value)) if name == t.name && shape == t.shape.as_slice() => match t.kind {
                TensorKind::Param => {
                    for (x, &s) in t.value.iter_mut().zip(value) {
                        *x = a * *x + b * s;
                    }
                }
                TensorKind::Buffer => t.value.copy_from_slice(value),
            },
            _ => {
                err = Some(Error::Structure(format!(
                    "teacher tensor {} has no matching student tensor",
                    t.name
                )))
            }
        }
        i += 1;
    });
    if err.is_none() && i != src.len() {
        err = Some(Error::Structure(format!(
            "teacher has {i} tensors, student has {}",
            src.len()
        )));
    }
    err.map_or(Ok(()), Err)
}
