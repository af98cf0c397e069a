use std::collections::BTreeMap;

use crate::tensor::ParamSet;

/// Learning-rate policy: the feature extractor runs an order of magnitude
/// below everything else, and the whole schedule decays by `decay_factor`
/// at each listed step.
#[derive(Debug, Clone)]
pub struct LrPolicy {
    pub base_lr: f64,
    pub backbone_lr: f64,
    pub decay_factor: f64,
    pub decay_steps: Vec<usize>,
}

impl Default for LrPolicy {
    fn default() -> Self {
        LrPolicy {
            base_lr: 4e-4,
            backbone_lr: 4e-5,
            decay_factor: 0.1,
            decay_steps: Vec::new(),
        }
    }
}

impl LrPolicy {
    fn is_backbone(name: &str) -> bool {
        name.starts_with("backbone/") || name.starts_with("embed/")
    }

    fn lr_at(&self, name: &str, step: usize) -> f64 {
        let mut lr = if Self::is_backbone(name) {
            self.backbone_lr
        } else {
            self.base_lr
        };
        for &s in &self.decay_steps {
            if step >= s {
                lr *= self.decay_factor;
            }
        }
        lr
    }
}

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub lr: LrPolicy,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: LrPolicy::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay. State is keyed by parameter name, so
/// the sweep order (name order) is deterministic.
pub struct AdamW {
    config: OptimConfig,
    step: usize,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one update using the gradients currently stored on the
    /// trainable parameters. Parameters without a gradient, and frozen
    /// parameters, are left untouched. Gradients are consumed.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);

        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.value.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let lr = c.lr.lr_at(&p.name, self.step);
            let n = grad.len();
            let m = self.first.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = p.value.data_mut();
            for i in 0..n {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                data[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * data[i]);
            }
            p.value.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn frozen_params_never_move() {
        let mut ps = ParamSet::new();
        ps.insert("frozen", Tensor::full(vec![2], 1.0), false).unwrap();
        ps.insert("live", Tensor::full(vec![2], 1.0), true).unwrap();
        // hand both a gradient; only the trainable one may move
        ps.get_mut("frozen").unwrap().value.accumulate_grad(&[1.0, 1.0]);
        ps.get_mut("live").unwrap().value.accumulate_grad(&[1.0, 1.0]);
        let before = ps.get("frozen").unwrap().value.clone();

        let mut opt = AdamW::new(OptimConfig::default());
        opt.step(&mut ps);

        assert!(ps.get("frozen").unwrap().value.bits_eq(&before));
        assert!(ps.get("live").unwrap().value.data()[0] < 1.0);
    }

    #[test]
    fn quadratic_converges() {
        // minimize (x - 3)^2 with plain gradients
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::scalar(0.0), true).unwrap();
        let mut opt = AdamW::new(OptimConfig {
            lr: LrPolicy { base_lr: 0.05, backbone_lr: 0.05, decay_factor: 1.0, decay_steps: vec![] },
            weight_decay: 0.0,
            ..OptimConfig::default()
        });
        for _ in 0..2000 {
            let x = ps.get("x").unwrap().value.data()[0];
            ps.get_mut("x").unwrap().value.accumulate_grad(&[2.0 * (x - 3.0)]);
            opt.step(&mut ps);
        }
        let x = ps.get("x").unwrap().value.data()[0];
        assert!((x - 3.0).abs() < 1e-3, "x = {x}");
    }

    #[test]
    fn lr_decay_applies_after_boundary() {
        let lr = LrPolicy {
            base_lr: 1.0,
            backbone_lr: 0.1,
            decay_factor: 0.1,
            decay_steps: vec![10],
        };
        assert_eq!(lr.lr_at("head/w", 5), 1.0);
        assert_eq!(lr.lr_at("head/w", 10), 0.1);
        assert!((lr.lr_at("backbone/w", 10) - 0.01).abs() < 1e-15);
    }
}
