use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::ParamStore;

/// SGD with classical momentum and L2 weight decay:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

/// Optimizer settings stored alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub kind: String,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn info(&self) -> OptimizerInfo {
        OptimizerInfo {
            kind: "sgd_momentum".into(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Applies one update. Gradients for names missing from `params` are
    /// ignored.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Vec<f64>)], lr: f64) {
        for (name, g) in grads {
            let Some(w) = params.get_mut(name) else {
                continue;
            };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Global L2 norm over all gradients.
pub fn grad_norm(grads: &[(String, Vec<f64>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(String, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|x| *x *= k);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        p
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = store();
        let before = p.checksum();
        let mut opt = Sgd::new(0.9, 1e-4);
        opt.step(&mut p, &[("a".into(), vec![3.0, 4.0])], 0.0);
        assert_eq!(p.checksum(), before);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = store();
        let mut opt = Sgd::new(0.9, 0.0);
        let g = [("a".to_string(), vec![1.0, 0.0])];
        opt.step(&mut p, &g, 0.1);
        opt.step(&mut p, &g, 0.1);
        // v1 = 1, v2 = 1.9
        assert!((p.get("a").unwrap().data()[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
        assert_eq!(p.get("a").unwrap().data()[1], -2.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![("a".to_string(), vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut g, 2.0), grad_norm(&g));
    }
}
