use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{conv2d, ConvGeom};
use crate::error::{Error, Result};

/// Named trainable parameters. Layers keep handles to the same storage, so
/// in-place updates through [`Var::set`] are visible to every holder.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
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
            return Err(Error::param(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    /// He-normal initialization with standard deviation `sqrt(2 / fan_in)`.
    pub fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.normal(name, shape, std)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::param(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, DType::F64, &self.device)?;
        self.insert(name, t)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Current values keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrites every parameter from `values`; names and shapes must match.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (name, var) in &self.vars {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if v.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    var.dims(),
                    v.dims()
                )));
            }
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    geom: ConvGeom,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, geom: ConvGeom) -> Result<Self> {
        Self::with_kernel(ps, name, c_in, c_out, (kernel, kernel), geom, true)
    }

    pub fn with_kernel(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        bias: bool,
    ) -> Result<Self> {
        let c_in_g = c_in / geom.groups;
        let fan_in = c_in_g * kernel.0 * kernel.1;
        let weight = ps.he_normal(&format!("{name}.weight"), &[c_out, c_in_g, kernel.0, kernel.1], fan_in)?;
        let bias = if bias {
            Some(ps.zeros(&format!("{name}.bias"), &[c_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias, geom })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.geom)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.he_normal(&format!("{name}.weight"), &[d_out, d_in], d_in)?,
            bias: ps.zeros(&format!("{name}.bias"), &[d_out])?,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// `x` of shape `(n, d_in)` to `(n, d_out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_scaled() {
        let mut a = ParamStore::new(DType::F64, 3);
        let mut b = ParamStore::new(DType::F64, 3);
        let ta = a.he_normal("w", &[64, 32, 3, 3], 288).unwrap();
        let tb = b.he_normal("w", &[64, 32, 3, 3], 288).unwrap();
        let va = ta.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(va, tb.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let var = va.iter().map(|v| v * v).sum::<f64>() / va.len() as f64;
        assert!((var - 2.0 / 288.0).abs() < 0.1 * 2.0 / 288.0, "variance {var}");
        assert!(a.zeros("w", &[1]).is_err());
    }

    #[test]
    fn layer_handles_observe_loaded_values() {
        let mut ps = ParamStore::new(DType::F32, 0);
        let lin = Linear::new(&mut ps, "fc", 2, 1).unwrap();
        let mut values = ps.snapshot();
        values.insert("fc.weight".into(), Tensor::new(&[[1f32, 2.0]], &Device::Cpu).unwrap());
        values.insert("fc.bias".into(), Tensor::new(&[0.5f32], &Device::Cpu).unwrap());
        ps.load(&values).unwrap();
        let x = Tensor::new(&[[3f32, 4.0]], &Device::Cpu).unwrap();
        let y = lin.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![11.5]);
        values.remove("fc.bias");
        assert!(ps.load(&values).is_err());
    }
}
