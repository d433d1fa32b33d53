use serde::{Deserialize, Serialize};

use super::model::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub enum Optimizer<T: Real> {
    Sgd {
        lr: T,
    },
    Adam {
        lr: f64,
        step: i32,
        m: Vec<T>,
        v: Vec<T>,
    },
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr: T::of(lr) },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                step: 0,
                m: vec![T::zero(); n_params],
                v: vec![T::zero(); n_params],
            },
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        debug_assert_eq!(params.len(), grad.len());
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p = *p - *lr * *g;
                }
            }
            Optimizer::Adam { lr, step, m, v } => {
                *step += 1;
                let (b1, b2) = (T::of(BETA1), T::of(BETA2));
                let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
                // Bias corrections folded into the step size.
                let lr_t = T::of(
                    *lr * (1.0 - BETA2.powi(*step)).sqrt() / (1.0 - BETA1.powi(*step)),
                );
                let eps = T::of(ADAM_EPS);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = b1 * *m + one_b1 * *g;
                    *v = b2 * *v + one_b2 * *g * *g;
                    *p = *p - lr_t * *m / (v.sqrt() + eps);
                }
            }
        }
    }
}
