//! Parameter update rules: plain gradient descent and Adam.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

/// Update rule selection. The reference setup trains with Adam; plain SGD is
/// kept selectable for ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: learning rate, per-parameter moment accumulators, and the
/// global step count used for Adam bias correction.
pub struct OptimizerState<E: Element> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step_count: u64,
    slots: BTreeMap<String, (Tensor<E>, Tensor<E>)>,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "learning rate {learning_rate} must be non-negative"
            )));
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            step_count: 0,
            slots: BTreeMap::new(),
        })
    }

    /// Apply one update over every trainable parameter present in `grads`.
    /// SGD: p <- p - lr * g. Adam: standard moment recurrences with bias
    /// correction.
    pub fn step(
        &mut self,
        params: &mut ParamStore<E>,
        grads: &BTreeMap<String, Tensor<E>>,
    ) -> Result<()> {
        self.step_count += 1;
        let lr = E::from_f64(self.learning_rate);
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != grad.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "optimizer: parameter '{name}' {:?} vs gradient {:?}",
                    p.shape(),
                    grad.shape()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(grad.data()) {
                        *pv -= lr * gv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = self
                        .slots
                        .entry(name.clone())
                        .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
                    if m.shape() != grad.shape() {
                        return Err(Error::ShapeMismatch(format!(
                            "optimizer: accumulator for '{name}' {:?} vs gradient {:?}",
                            m.shape(),
                            grad.shape()
                        )));
                    }
                    let b1 = E::from_f64(beta1);
                    let b2 = E::from_f64(beta2);
                    let one_m_b1 = E::from_f64(1.0 - beta1);
                    let one_m_b2 = E::from_f64(1.0 - beta2);
                    let corr1 = E::from_f64(1.0 - beta1.powi(self.step_count as i32));
                    let corr2 = E::from_f64(1.0 - beta2.powi(self.step_count as i32));
                    let epse = E::from_f64(eps);
                    for i in 0..grad.numel() {
                        let g = grad.data()[i];
                        let md = &mut m.data_mut()[i];
                        *md = b1 * *md + one_m_b1 * g;
                        let vd = &mut v.data_mut()[i];
                        *vd = b2 * *vd + one_m_b2 * g * g;
                        let mhat = *md / corr1;
                        let vhat = *vd / corr2;
                        p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + epse);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::scalar(v));
        s
    }

    #[test]
    fn sgd_update_is_exact() {
        // lr=0.1, param=1, grad=2 -> 0.8.
        let mut params = store_with("p", 1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(2.0));
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("p").unwrap().item().unwrap(), 0.8);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut params = store_with("p", 1.5);
            let mut opt = OptimizerState::new(kind, 0.1).unwrap();
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), Tensor::scalar(0.0));
            opt.step(&mut params, &grads).unwrap();
            assert_eq!(params.get("p").unwrap().item().unwrap(), 1.5);
        }
    }

    #[test]
    fn gradient_descent_contracts_on_quadratic_bowl() {
        // f(p) = p^2, grad 2p, lr 0.4: p <- 0.2 p, strictly decreasing |p|.
        let mut params = store_with("p", 1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.4).unwrap();
        let mut prev: f64 = 1.0;
        for _ in 0..10 {
            let p = params.get("p").unwrap().item().unwrap();
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), Tensor::scalar(2.0 * p));
            opt.step(&mut params, &grads).unwrap();
            let next = params.get("p").unwrap().item().unwrap();
            assert!(next.abs() < prev.abs(), "{next} not below {prev}");
            prev = next;
        }
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut params = store_with("p", 1.0);
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.05).unwrap();
        for _ in 0..400 {
            let p = params.get("p").unwrap().item().unwrap();
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), Tensor::scalar(2.0 * p));
            opt.step(&mut params, &grads).unwrap();
        }
        assert!(params.get("p").unwrap().item().unwrap().abs() < 1e-2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = ParamStore::<f64>::new();
        params.insert("p", Tensor::zeros(&[2]));
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::zeros(&[3]));
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
