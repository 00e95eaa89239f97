use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::{NamedArray, ParamStore};
use crate::error::{Error, Result};

/// Serializable snapshot of the optimizer's moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<NamedArray>,
    pub second: Vec<NamedArray>,
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let mut moments = BTreeMap::new();
        for (name, var) in store.iter() {
            let z = var.as_tensor().zeros_like()?;
            moments.insert(name.clone(), (z.clone(), z));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients keep their autograd history; drop it so moments stay flat
            let g = g.detach();
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&*m / c1)?;
            let denom = ((&*v / c2)?.sqrt()? + self.eps)?;
            let update = (m_hat.div(&denom)? * self.lr)?;
            var.set(&var.as_tensor().detach().sub(&update)?)?;
        }
        Ok(())
    }

    pub fn state(&self) -> Result<AdamState> {
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (name, (m, v)) in &self.moments {
            first.push(NamedArray::from_tensor(name.clone(), m)?);
            second.push(NamedArray::from_tensor(name.clone(), v)?);
        }
        Ok(AdamState {
            step: self.step,
            first,
            second,
        })
    }

    /// Restores moments saved by [`Adam::state`].
    ///
    /// Moments are stored as float32; restoring into a float32 store is exact.
    pub fn load_state(&mut self, state: &AdamState) -> Result<()> {
        let lookup = |arrays: &[NamedArray], name: &str| -> Result<NamedArray> {
            arrays
                .iter()
                .find(|a| a.name == name)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("optimizer state lacks {name}")))
        };
        for (name, (m, v)) in self.moments.iter_mut() {
            let fm = lookup(&state.first, name)?;
            let sm = lookup(&state.second, name)?;
            if fm.shape != m.dims() || sm.shape != v.dims() {
                return Err(Error::shape(format!("optimizer moment {name}"), m.dims(), &fm.shape));
            }
            *m = fm.to_tensor(m.device(), m.dtype())?;
            *v = sm.to_tensor(v.device(), v.dtype())?;
        }
        self.step = state.step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new(DType::F64);
        let p = store.constant("p", &[2], 3.0).unwrap();
        let mut opt = Adam::new(&store, 0.1).unwrap();
        for _ in 0..500 {
            let loss = p.sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads).unwrap();
        }
        let v = p.to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn rejects_bad_learning_rate() {
        let store = ParamStore::new(DType::F32);
        assert!(Adam::new(&store, 0.0).is_err());
    }
}
