use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order update rule with global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip: f64) -> Self {
        Self {
            kind,
            lr,
            clip,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn apply(&mut self, store: &mut ParameterStore, grads: &Gradients) -> f64 {
        let norm = grads.norm();
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        for (name, param) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in param.data.iter_mut().zip(&g.data) {
                        *p -= self.lr * scale * g;
                    }
                }
                OptimizerKind::Adam => {
                    let n = param.data.len();
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                    let bc1 = 1.0 - BETA1.powi(t);
                    let bc2 = 1.0 - BETA2.powi(t);
                    for i in 0..n {
                        let gi = g.data[i] * scale;
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        param.data[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        norm
    }
}
