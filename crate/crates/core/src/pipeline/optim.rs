//! First-order parameter updates over a [`ParamSet`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::pipeline::config::OptimizerKind;
use crate::tensor::GradientMap;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, t: 0, moments: BTreeMap::new() }
    }

    /// Applies one update to every trainable parameter with a gradient.
    /// Returns the number of parameter tensors touched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradientMap) -> Result<usize> {
        self.t += 1;
        let updates = params.trainable_grads(grads);
        for (name, g) in &updates {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: format!("gradient of {name}"), index: i });
            }
            let cur = params.get(name)?.data().to_vec();
            let next: Vec<f64> = match self.kind {
                OptimizerKind::Sgd => cur.iter().zip(g).map(|(w, d)| w - self.lr * d).collect(),
                OptimizerKind::Adam => {
                    let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let (c1, c2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
                    cur.iter()
                        .enumerate()
                        .map(|(i, w)| {
                            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                            w - self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS)
                        })
                        .collect()
                }
            };
            params.set_values(name, next)?;
        }
        Ok(updates.len())
    }
}
