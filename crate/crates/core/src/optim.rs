//! AdamW with decoupled weight decay, cosine learning-rate schedule with
//! linear warmup, and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::nn::ParamSet;
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps: 1e-8, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every gradient entry. Parameters without a gradient
    /// entry are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &BTreeMap<String, Tensor<S>>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let b1 = lit::<S>(self.beta1);
        let b2 = lit::<S>(self.beta2);
        let ob1 = lit::<S>(1.0 - self.beta1);
        let ob2 = lit::<S>(1.0 - self.beta2);
        let eps = lit::<S>(self.eps);
        let lr_s = lit::<S>(lr / bc1);
        let rt2 = lit::<S>(1.0 / bc2.sqrt());
        let decay = lit::<S>(lr * self.weight_decay);

        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = g.data();
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + ob1 * gd[i];
                vd[i] = b2 * vd[i] + ob2 * gd[i] * gd[i];
                let denom = (vd[i] * rt2 * rt2).sqrt() + eps;
                pd[i] = pd[i] - lr_s * md[i] / denom - decay * pd[i];
            }
        }
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor<S>>, &BTreeMap<String, Tensor<S>>) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: BTreeMap<String, Tensor<S>>, v: BTreeMap<String, Tensor<S>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Cosine decay from `peak` to `min` after `warmup` linear steps.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    /// Learning rate for the update performed at 0-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let done = step.saturating_sub(self.warmup_steps).min(span);
        let progress = done as f64 / span as f64;
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut BTreeMap<String, Tensor<S>>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            let v = v.to_f64_exact();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = lit::<S>(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_converges_on_quadratic() {
        // minimize (p - 3)^2
        let mut ps = ParamSet::<f64>::new();
        ps.insert("p", Tensor::scalar(0.0));
        let mut opt = AdamW::new(0.9, 0.999, 0.0);
        for _ in 0..2000 {
            let p = ps.get("p").scalar_value().unwrap();
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), Tensor::scalar(2.0 * (p - 3.0)));
            opt.step(&mut ps, &grads, 0.01);
        }
        let p = ps.get("p").scalar_value().unwrap();
        assert!((p - 3.0).abs() < 1e-3, "p = {p}");
    }

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule { peak: 1.0, min: 0.1, warmup_steps: 10, total_steps: 110 };
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        // midpoint of cosine span
        assert!((s.lr(60) - 0.55).abs() < 1e-12);
        // floor at the end and beyond
        assert!((s.lr(110) - 0.1).abs() < 1e-12);
        assert!((s.lr(500) - 0.1).abs() < 1e-12);
        // monotone non-increasing after warmup
        let mut prev = f64::INFINITY;
        for t in 10..=110 {
            let lr = s.lr(t);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::<f64>::new(vec![2], vec![3.0, 0.0]).unwrap());
        grads.insert("b".to_string(), Tensor::<f64>::new(vec![1], vec![4.0]).unwrap());
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let mut sq = 0.0;
        for g in grads.values() {
            for &v in g.data() {
                sq += v * v;
            }
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-12);
    }
}
