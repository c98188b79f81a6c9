//! Parameter registry, seeded initialisation and the small set of layers the
//! models are assembled from.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ops;

pub const INIT_STD: f64 = 0.02;

/// Every tensor a model owns, keyed by a dotted path. Frozen entries are saved
/// and loaded like the rest but must never reach an optimizer.
#[derive(Default)]
pub struct Registry {
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, var: Var, frozen: bool) -> Result<()> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        if frozen {
            self.frozen.insert(name.clone());
        }
        self.vars.insert(name, var);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.vars.keys().filter(|n| !self.frozen.contains(*n)).cloned().collect()
    }

    /// Marks every parameter as frozen.
    pub fn freeze_all(&mut self) {
        self.frozen = self.vars.keys().cloned().collect();
    }

    /// Resolves names to variables, refusing any frozen entry.
    pub fn optimizer_vars(&self, names: &[String]) -> Result<Vec<Var>> {
        names
            .iter()
            .map(|n| {
                if self.frozen.contains(n) {
                    return Err(Error::Config(format!("frozen parameter `{n}` cannot be optimized")));
                }
                self.vars
                    .get(n)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown parameter `{n}`")))
            })
            .collect()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Stable hash over the bytes of all frozen parameters.
    pub fn frozen_hash(&self) -> Result<u64> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for name in &self.frozen {
            h.write(name.as_bytes());
            hash_tensor(&mut h, self.vars[name].as_tensor())?;
        }
        Ok(h.finish())
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_detached_tensor())).collect()
    }

    /// Overwrites every parameter in place. The key sets must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in tensors.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: {:?} vs {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

pub(crate) fn hash_tensor(h: &mut impl Hasher, t: &Tensor) -> Result<()> {
    for d in t.dims() {
        h.write_usize(*d);
    }
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| h.write_u64(v.to_bits())),
        _ => flat
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .iter()
            .for_each(|v| h.write_u32(v.to_bits())),
    }
    Ok(())
}

/// Hands out freshly initialised parameters under a path prefix.
pub struct Builder<'a> {
    registry: &'a mut Registry,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    dtype: DType,
    device: Device,
    frozen: bool,
}

impl<'a> Builder<'a> {
    pub fn new(registry: &'a mut Registry, rng: &'a mut ChaCha8Rng, dtype: DType) -> Self {
        Self { registry, rng, prefix: String::new(), dtype, device: Device::Cpu, frozen: false }
    }

    pub fn pp(&mut self, name: impl AsRef<str>) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder {
            registry: self.registry,
            rng: self.rng,
            prefix,
            dtype: self.dtype,
            device: self.device.clone(),
            frozen: self.frozen,
        }
    }

    /// Parameters created through the returned builder are registered frozen.
    pub fn frozen(&mut self) -> Builder<'_> {
        Builder {
            registry: self.registry,
            rng: self.rng,
            prefix: self.prefix.clone(),
            dtype: self.dtype,
            device: self.device.clone(),
            frozen: true,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = if self.frozen { var.as_detached_tensor() } else { var.as_tensor().clone() };
        self.registry.insert(self.path(name), var, self.frozen)?;
        Ok(out)
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let z: f64 = self.rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                values.push(z * std);
            }
        }
        self.register(name, values, shape)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.constant(name, shape, 0.0)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `y = x W + b`, `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.trunc_normal("weight", &[in_dim, out_dim], INIT_STD)?,
            bias: b.zeros("bias", &[out_dim])?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().unwrap_or(&0);
        if last != self.in_dim() {
            return Err(Error::Validation(format!(
                "linear expects last dim {}, got {:?}",
                self.in_dim(),
                dims
            )));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, last))?.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(Self { gamma: b.constant("gamma", &[dim], 1.0)?, beta: b.zeros("beta", &[dim])?, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        use candle_core::D;
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&mut b.pp("fc1"), in_dim, hidden)?, fc2: Linear::new(&mut b.pp("fc2"), hidden, out_dim)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&ops::gelu(&self.fc1.forward(x)?)?)
    }
}

/// 1-D linear interpolation weights (`out × in`, half-pixel centres, edge clamp).
pub fn interp_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        m[o * in_len + lo] += 1.0 - frac;
        m[o * in_len + hi] += frac;
    }
    m
}

/// Bilinear resize of row-major square token grids expressed as one matrix:
/// `out_tokens = R · in_tokens`, `R = Ry ⊗ Rx` with shape `(out²) × (in²)`.
pub fn token_resize_matrix(in_side: usize, out_side: usize, dtype: DType) -> Result<Tensor> {
    let r = interp_matrix(in_side, out_side);
    let (n_in, n_out) = (in_side * in_side, out_side * out_side);
    let mut k = vec![0.0; n_out * n_in];
    for oy in 0..out_side {
        for ox in 0..out_side {
            let row = (oy * out_side + ox) * n_in;
            for iy in 0..in_side {
                let wy = r[oy * in_side + iy];
                if wy == 0.0 {
                    continue;
                }
                for ix in 0..in_side {
                    k[row + iy * in_side + ix] = wy * r[ox * in_side + ix];
                }
            }
        }
    }
    Ok(Tensor::from_vec(k, (n_out, n_in), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_deterministic_and_truncated() {
        let make = || {
            let mut reg = Registry::new();
            let mut rng = seeded_rng(3);
            let mut b = Builder::new(&mut reg, &mut rng, DType::F64);
            b.trunc_normal("w", &[64, 64], INIT_STD).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        let (a, b) = (make(), make());
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 2.0 * INIT_STD));
    }

    #[test]
    fn optimizer_refuses_frozen_params() {
        let mut reg = Registry::new();
        let mut rng = seeded_rng(0);
        let mut b = Builder::new(&mut reg, &mut rng, DType::F32);
        b.frozen().zeros("enc", &[2]).unwrap();
        b.zeros("adapter", &[2]).unwrap();
        assert!(reg.optimizer_vars(&["adapter".into()]).is_ok());
        assert!(matches!(reg.optimizer_vars(&["enc".into()]), Err(Error::Config(_))));
        assert_eq!(reg.trainable_names(), vec!["adapter".to_string()]);
    }

    #[test]
    fn resize_matrix_rows_sum_to_one_and_identity_when_same_size() {
        let r = interp_matrix(16, 12);
        for row in r.chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let id = interp_matrix(5, 5);
        for (i, row) in id.chunks(5).enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn resize_of_constant_grid_is_constant() {
        let m = token_resize_matrix(4, 7, DType::F64).unwrap();
        let x = Tensor::ones((16, 3), DType::F64, &Device::Cpu).unwrap();
        let y = m.matmul(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
