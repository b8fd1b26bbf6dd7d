//! Named parameter storage and small layer descriptors.
//!
//! Parameters live in a [`ParamSet`] as leaf tensors keyed by dotted names
//! (`"enc_src.conv1.w"`). Layers hold only their name prefix and geometry,
//! and look their weights up at forward time, so an optimizer step can
//! replace the leaves without invalidating any layer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Result};
use crate::tensor::{Conv2dSpec, GradientMap, Tensor};

#[derive(Debug, Clone)]
struct Entry {
    tensor: Tensor,
    trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Re-registering a name overwrites it.
    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<()> {
        let tensor = Tensor::param(data, shape)?;
        self.entries.insert(name.to_string(), Entry { tensor, trainable: true });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| contract(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    /// Frozen parameters are stored as constants, so gradients still flow
    /// through them but never accumulate on them.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) && e.trainable != trainable {
                let data = e.tensor.data().to_vec();
                let shape = e.tensor.shape().to_vec();
                e.tensor = if trainable {
                    Tensor::param(data, &shape).expect("shape already validated")
                } else {
                    Tensor::new(data, &shape).expect("shape already validated")
                };
                e.trainable = trainable;
            }
        }
    }

    /// Replaces a parameter's values, keeping its shape and trainability.
    pub fn set_values(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter '{name}'")))?;
        let shape = e.tensor.shape().to_vec();
        e.tensor = if e.trainable {
            Tensor::param(data, &shape)?
        } else {
            Tensor::new(data, &shape)?
        };
        Ok(())
    }

    /// Trainable parameters together with their gradient from `grads`
    /// (zeros when the backward pass did not reach them).
    pub fn trainable_grads(&self, grads: &GradientMap) -> Vec<(String, Vec<f64>)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| {
                let g = grads
                    .get(&e.tensor)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; e.tensor.numel()]);
                (k.clone(), g)
            })
            .collect()
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Scaled(f64),
    Zeros,
    Constant(f64),
}

fn init_values(init: Init, n: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Constant(c) => vec![c; n],
        Init::Scaled(gain) => {
            let std = gain / (fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| normal.sample(rng)).collect()
        }
    }
}

/// Uniform samples in `[lo, hi)`, used by tests and data generation.
pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            name: name.to_string(),
            cin,
            cout,
            kernel,
            spec: Conv2dSpec { stride, pad },
        }
    }

    /// 3×3 kernel with padding 1.
    pub fn k3(name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self::new(name, cin, cout, 3, stride, 1)
    }

    fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng, weight: Init, bias: Init) -> Result<()> {
        let fan_in = self.cin * self.kernel * self.kernel;
        let n = self.cout * fan_in;
        params.insert(
            &self.weight_name(),
            init_values(weight, n, fan_in, rng),
            &[self.cout, self.cin, self.kernel, self.kernel],
        )?;
        params.insert(&self.bias_name(), init_values(bias, self.cout, 1, rng), &[self.cout])
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let w = params.get(&self.weight_name())?;
        let b = params.get(&self.bias_name())?;
        x.conv2d(w, Some(b), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(name: &str, inp: usize, out: usize) -> Self {
        Linear { name: name.to_string(), inp, out }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng, weight: Init, bias: Init) -> Result<()> {
        params.insert(
            &format!("{}.w", self.name),
            init_values(weight, self.out * self.inp, self.inp, rng),
            &[self.out, self.inp],
        )?;
        params.insert(&format!("{}.b", self.name), init_values(bias, self.out, 1, rng), &[self.out])
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let w = params.get(&format!("{}.w", self.name))?;
        let b = params.get(&format!("{}.b", self.name))?;
        x.linear(w, b)
    }
}

/// Activation used throughout the networks.
pub fn act(x: &Tensor) -> Tensor {
    x.leaky_relu(0.2)
}
