//! Parameter storage and the handful of layers every network in the crate is
//! assembled from.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Layers hold cheap
//! clones of the underlying [`Var`] tensors, so an optimizer updating a var in
//! place is immediately visible to every layer that uses it.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-b, b]` with `b = gain / sqrt(fan_in)`.
    FanIn(f64),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.len())
            .field("dtype", &self.dtype)
            .finish()
    }
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

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, prefix: &str) -> Scope<'_> {
        Scope {
            store: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Vars whose name starts with any of the prefixes, in name order.
    pub fn vars_with_prefixes(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    fn create(&mut self, name: String, dims: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::invalid(format!("parameter {name} defined twice")));
        }
        let n: usize = dims.iter().product();
        let fan_in: usize = dims.iter().skip(1).product::<usize>().max(1);
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::FanIn(gain) => {
                let bound = gain / (fan_in as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    /// Overwrites the value of an existing parameter, keeping its identity.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::invalid(format!(
                "shape mismatch for {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.contiguous()?)?;
        Ok(())
    }

    /// Named snapshot of all parameters with the given prefix.
    pub fn snapshot(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.as_tensor().detach().copy().expect("copy")))
            .collect()
    }

    /// SHA-256 over names, shapes and raw values of every parameter under `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            hash_tensor_into(&mut hasher, name, var.as_tensor())?;
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

pub(crate) fn hash_tensor_into(hasher: &mut Sha256, name: &str, t: &Tensor) -> Result<()> {
    hasher.update(name.as_bytes());
    for d in t.dims() {
        hasher.update((*d as u64).to_le_bytes());
    }
    for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
        hasher.update(v.to_le_bytes());
    }
    Ok(())
}

pub fn hash_tensors<'a>(items: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in items {
        hash_tensor_into(&mut hasher, name, t)?;
    }
    Ok(hex::encode(hasher.finalize()))
}

pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, dims, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same(usize),
    /// Zero padding of `before` rows/cols ahead and `after` behind, for even kernels.
    Split {
        before: usize,
        after: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new(
        s: &mut Scope,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        init: Init,
    ) -> Result<Self> {
        let weight = s.param("weight", &[c_out, c_in, kernel, kernel], init)?;
        let bias = s.param("bias", &[c_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// 3x3, stride 1, same padding.
    pub fn same3(s: &mut Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(s, c_in, c_out, 3, 1, Padding::Same(1), Init::FanIn(1.0))
    }

    pub fn num_params(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match self.padding {
            Padding::Same(p) => x.conv2d(&self.weight, p, self.stride, 1, 1)?,
            Padding::Split { before, after } => {
                let x = x.pad_with_zeros(2, before, after)?;
                let x = x.pad_with_zeros(3, before, after)?;
                x.conv2d(&self.weight, 0, self.stride, 1, 1)?
            }
        };
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &mut Scope, d_in: usize, d_out: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = s.param("weight", &[d_out, d_in], init)?;
        let bias = if bias {
            Some(s.param("bias", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(s: &mut Scope, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "group count {groups} must divide channel count {channels}"
            )));
        }
        Ok(Self {
            weight: s.param("weight", &[channels], Init::Ones)?,
            bias: s.param("bias", &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    /// Input layout `(n, c, h, w)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let xg = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: s.param("weight", &[dim], Init::Ones)?,
            bias: s.param("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    /// Normalizes over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last dimension, evaluated in f64.
///
/// The row maximum is subtracted as a detached constant; the gradient of
/// softmax does not depend on that shift.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let dtype = x.dtype();
    let x = x.to_dtype(DType::F64)?;
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?.to_dtype(dtype)?)
}

/// Sinusoidal embedding of (possibly fractional) positions, shape `(n, dim)`.
pub fn sinusoidal_embedding(
    positions: &[f64],
    dim: usize,
    max_period: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(max_period.ln()) * k as f64 / half.max(1) as f64).exp();
            let v = if i < half {
                (p * freq).cos()
            } else if i < 2 * half {
                (p * freq).sin()
            } else {
                0.0
            };
            data.push(v);
        }
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), device)?.to_dtype(dtype)?)
}

/// Draws a standard-normal tensor from a seeded generator.
pub fn randn_seeded(rng: &mut impl Rng, dims: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, dims, device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_creation_is_seeded() {
        let make = || {
            let mut st = ParamStore::new(DType::F32, 3);
            let mut s = st.root();
            let c = Conv2d::same3(&mut s.pp("c"), 2, 4).unwrap();
            c.weight.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut st = ParamStore::new(DType::F32, 0);
        let mut s = st.root();
        s.param("a", &[1], Init::Zeros).unwrap();
        assert!(s.param("a", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn split_padding_keeps_size_for_even_kernel() {
        let mut st = ParamStore::new(DType::F32, 0);
        let mut s = st.root();
        let c = Conv2d::new(
            &mut s.pp("c"),
            3,
            5,
            4,
            1,
            Padding::Split { before: 1, after: 2 },
            Init::FanIn(1.0),
        )
        .unwrap();
        let x = Tensor::zeros((2, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(c.forward(&x).unwrap().dims(), &[2, 5, 8, 8]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_zeroes() {
        let x = Tensor::new(&[[1.0f64, 2.0, f64::NEG_INFINITY], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let p = softmax_last_dim(&x).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(p[0][2], 0.0);
        for row in p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hash_changes_with_values() {
        let mut st = ParamStore::new(DType::F32, 0);
        st.root().param("w", &[3], Init::Ones).unwrap();
        let before = st.hash_prefix("").unwrap();
        st.assign("w", &Tensor::new(&[1f32, 1., 2.], &Device::Cpu).unwrap())
            .unwrap();
        assert_ne!(before, st.hash_prefix("").unwrap());
    }
}
