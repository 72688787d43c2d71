//! Named parameter storage and the AdamW update rule.

use std::collections::BTreeMap;

use super::{Graph, NodeId, Result, Tensor, TensorError};

#[derive(Debug, Clone)]
struct Param {
    value: Tensor,
    /// First/second moment buffers; present only while the parameter is
    /// trainable.
    m: Option<Vec<f64>>,
    v: Option<Vec<f64>>,
    trainable: bool,
}

/// All parameters of a model, keyed by stable names. Iteration order is the
/// name order, which keeps every consumer deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, weight_decay: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor, trainable: bool) {
        value.requires_grad = trainable;
        let numel = value.numel();
        let param = Param {
            value,
            m: trainable.then(|| vec![0.0; numel]),
            v: trainable.then(|| vec![0.0; numel]),
            trainable,
        };
        self.params.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).map(|p| p.trainable).unwrap_or(false)
    }

    /// Flip trainability; moments are created fresh or dropped accordingly.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(p) = self.params.get_mut(name) {
            if p.trainable != trainable {
                p.trainable = trainable;
                p.value.requires_grad = trainable;
                let numel = p.value.numel();
                p.m = trainable.then(|| vec![0.0; numel]);
                p.v = trainable.then(|| vec![0.0; numel]);
            }
        }
    }

    /// Apply `set_trainable` to every parameter whose name starts with the
    /// prefix; returns how many matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let names: Vec<String> =
            self.params.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        for n in &names {
            self.set_trainable(n, trainable);
        }
        names.len()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(k, _)| k.clone()).collect()
    }

    /// Overwrite parameter values (not moments) from another store for every
    /// name both sides share with matching shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (name, src) in other.iter() {
            if let Some(p) = self.params.get_mut(name) {
                if p.value.shape() != src.shape() {
                    return Err(TensorError::Shape {
                        op: "load_values_from",
                        detail: format!("{name}: {:?} vs {:?}", p.value.shape(), src.shape()),
                    });
                }
                p.value.data_mut().copy_from_slice(src.data());
                n += 1;
            }
        }
        Ok(n)
    }

    /// One AdamW step over the supplied gradients. Decoupled weight decay,
    /// bias-corrected moments, frozen parameters skipped.
    pub fn optimizer_step(&mut self, grads: &BTreeMap<String, Vec<f64>>, cfg: &AdamConfig) -> Result<()> {
        if cfg.lr <= 0.0 {
            return Err(TensorError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, grad) in grads {
            let p = match self.params.get_mut(name) {
                Some(p) => p,
                None => {
                    return Err(TensorError::Config(format!("gradient for unknown parameter {name:?}")))
                }
            };
            if !p.trainable {
                continue;
            }
            if grad.len() != p.value.numel() {
                return Err(TensorError::Shape {
                    op: "optimizer_step",
                    detail: format!("{name}: grad len {} vs {}", grad.len(), p.value.numel()),
                });
            }
            let m = p.m.as_mut().expect("trainable implies moments");
            let v = p.v.as_mut().expect("trainable implies moments");
            let data = p.value.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= cfg.lr * cfg.weight_decay * data[i];
                data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Tracks which parameters a graph run touched and where their leaves live.
#[derive(Debug, Default)]
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf node for a named parameter, inserted on first use. Frozen
    /// parameters come in without gradient tracking.
    pub fn get(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let p = store
            .params
            .get(name)
            .ok_or_else(|| TensorError::Config(format!("unknown parameter {name:?}")))?;
        let id = g.leaf(p.value.clone());
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    /// Gradients for every bound parameter that received one.
    pub fn collect_grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.ids {
            if let Some(grad) = g.grad(id) {
                out.insert(name.clone(), grad.to_vec());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, data: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::vector(data), true);
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut s = store_with("w", vec![1.5, -0.5]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        s.optimizer_step(&grads, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.5, -0.5]);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_multiplicatively() {
        let mut s = store_with("w", vec![2.0]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.1, ..Default::default() };
        s.optimizer_step(&grads, &cfg).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn single_step_on_quadratic_matches_hand_calc() {
        // f(x) = x^2 at x = 1: g = 2. With betas (0.9, 0.999) the first
        // bias-corrected step moves by lr * 2 / (2 + eps).
        let mut s = store_with("x", vec![1.0]);
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), vec![2.0]);
        let cfg = AdamConfig::with_lr(0.05);
        s.optimizer_step(&grads, &cfg).unwrap();
        let want = 1.0 - 0.05 * 2.0 / (2.0 + cfg.eps);
        assert!((s.get("x").unwrap().data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn non_positive_lr_is_config_error() {
        let mut s = store_with("x", vec![1.0]);
        let grads = BTreeMap::new();
        assert!(s.optimizer_step(&grads, &AdamConfig::with_lr(0.0)).is_err());
        assert!(s.optimizer_step(&grads, &AdamConfig::with_lr(-1.0)).is_err());
    }

    #[test]
    fn frozen_parameters_stay_bit_identical() {
        let mut s = store_with("x", vec![1.0]);
        s.insert("frozen", Tensor::vector(vec![3.0]), false);
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), vec![1.0]);
        grads.insert("frozen".to_string(), vec![100.0]);
        s.optimizer_step(&grads, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(s.get("frozen").unwrap().data(), &[3.0]);
        assert!(s.get("x").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn moments_follow_trainability() {
        let mut s = store_with("x", vec![1.0]);
        assert!(s.params["x"].m.is_some());
        s.set_trainable("x", false);
        assert!(s.params["x"].m.is_none());
        s.set_trainable("x", true);
        assert!(s.params["x"].m.is_some());
    }

    #[test]
    fn binding_round_trip() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![2.0, 3.0]), true);
        let mut g = Graph::new();
        let mut bind = Binding::new();
        let w = bind.get(&mut g, &s, "w").unwrap();
        let w_again = bind.get(&mut g, &s, "w").unwrap();
        assert_eq!(w, w_again);
        let loss = g.sum_all(w);
        g.backward(loss).unwrap();
        let grads = bind.collect_grads(&g);
        assert_eq!(grads["w"], vec![1.0, 1.0]);
        assert!(bind.get(&mut g, &s, "missing").is_err());
    }
}
