use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, shaped float32 array; the unit of checkpoint storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, self.shape.as_slice(), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

/// Ordered collection of trainable variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "parameter {name} registered twice"
            )));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Registers a parameter drawn from `U(-bound, bound)`.
    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F64, &self.device)? * value)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn to_arrays(&self) -> Result<Vec<NamedArray>> {
        self.vars
            .iter()
            .map(|(k, v)| NamedArray::from_tensor(k.clone(), v.as_tensor()))
            .collect()
    }

    /// Overwrites every parameter from `arrays`; names and shapes must match exactly.
    pub fn load_arrays(&self, arrays: &[NamedArray]) -> Result<()> {
        let given: BTreeMap<&str, &NamedArray> =
            arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        if given.len() != self.vars.len() {
            return Err(Error::shape(
                "parameter count",
                self.vars.len(),
                given.len(),
            ));
        }
        for (name, var) in &self.vars {
            let arr = given
                .get(name.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            if arr.shape != var.dims() {
                return Err(Error::shape(format!("parameter {name}"), var.dims(), &arr.shape));
            }
            var.set(&arr.to_tensor(&self.device, self.dtype)?)?;
        }
        Ok(())
    }
}
