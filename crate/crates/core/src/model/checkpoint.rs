//! Named-tensor archives in the safetensors format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::nn::{Parameters, Real};

fn dtype<S: Real>() -> Dtype {
    match S::DTYPE {
        "F32" => Dtype::F32,
        "F64" => Dtype::F64,
        other => unreachable!("unsupported element type {other}"),
    }
}

/// Serialisable snapshot of named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, (Vec<usize>, Dtype, Vec<u8>)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every tensor of `module`, with names prefixed by `prefix`.
    pub fn insert_module<S: Real>(&mut self, prefix: &str, module: &dyn Parameters<S>) {
        module.visit(&mut |t| {
            let mut bytes = Vec::with_capacity(std::mem::size_of_val(t.value));
            for &v in t.value {
                v.write_le(&mut bytes);
            }
            self.tensors
                .insert(format!("{prefix}{}", t.name), (t.shape.to_vec(), dtype::<S>(), bytes));
        });
    }

    pub fn insert_raw<S: Real>(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[S]) {
        let mut bytes = Vec::with_capacity(std::mem::size_of_val(values));
        for &v in values {
            v.write_le(&mut bytes);
        }
        self.tensors.insert(name.into(), (shape, dtype::<S>(), bytes));
    }

    pub fn get_raw<S: Real>(&self, name: &str) -> Result<(Vec<usize>, Vec<S>)> {
        let (shape, dt, bytes) = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if *dt != dtype::<S>() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has dtype {dt:?}, expected {}",
                S::DTYPE
            )));
        }
        Ok((shape.clone(), S::read_le(bytes)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Overwrites every tensor of `module` from entries named `prefix + name`.
    /// Missing entries and shape mismatches are errors.
    pub fn load_module<S: Real>(&self, prefix: &str, module: &mut dyn Parameters<S>) -> Result<()> {
        let mut err = None;
        module.visit_mut(&mut |t| {
            if err.is_some() {
                return;
            }
            let name = format!("{prefix}{}", t.name);
            match self.get_raw::<S>(&name) {
                Ok((shape, values)) if shape == t.shape => t.value.copy_from_slice(&values),
                Ok((shape, _)) => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor {name} has shape {shape:?}, model expects {:?}",
                        t.shape
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let views = self
            .tensors
            .iter()
            .map(|(name, (shape, dt, bytes))| {
                TensorView::new(*dt, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(bad)?;
        let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
        let st = SafeTensors::deserialize(bytes).map_err(bad)?;
        let tensors = st
            .tensors()
            .into_iter()
            .map(|(name, v)| (name, (v.shape().to_vec(), v.dtype(), v.data().to_vec())))
            .collect();
        Ok(TensorArchive { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
