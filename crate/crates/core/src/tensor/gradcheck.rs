//! Central-difference verification of reverse-mode gradients.

use super::optim::{Binding, ParamStore};
use super::{Graph, NodeId, Result, TensorError};

pub const DEFAULT_STEP: f64 = 1e-5;

/// A forward pass described as a closure result: the tape, the scalar loss
/// node, and the parameter leaves that were bound into it.
pub struct BoundGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub binding: Binding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compare autodiff gradients against central differences for every
/// trainable parameter touched by `build`. The relative error is
/// `|ad - fd| / (|fd| + 1e-8)`; the report carries the worst offender.
pub fn grad_check<F>(store: &mut ParamStore, build: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<BoundGraph>,
{
    if h <= 0.0 {
        return Err(TensorError::Config(format!("step must be positive, got {h}")));
    }
    let mut bound = build(store)?;
    let base = scalar_loss(&bound.graph, bound.loss)?;
    if !base.is_finite() {
        return Err(TensorError::Numeric { op: "grad_check", detail: "loss is not finite".into() });
    }
    bound.graph.backward(bound.loss)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for name in store.trainable_names() {
        if let Some(id) = bound.binding.node(&name) {
            let numel = bound.graph.value(id).numel();
            let grad = bound.graph.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; numel]);
            analytic.push((name, grad));
        }
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let orig = store.get(name).expect("bound param exists").data()[i];
            store.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = eval_loss(store, &build)?;
            store.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = eval_loss(store, &build)?;
            store.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / (fd.abs() + 1e-8);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn eval_loss<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<BoundGraph>,
{
    let bound = build(store)?;
    let v = scalar_loss(&bound.graph, bound.loss)?;
    if !v.is_finite() {
        return Err(TensorError::Numeric { op: "grad_check", detail: "perturbed loss is not finite".into() });
    }
    Ok(v)
}

fn scalar_loss(graph: &Graph, loss: NodeId) -> Result<f64> {
    let v = graph.value(loss);
    if v.numel() != 1 {
        return Err(TensorError::Shape { op: "grad_check", detail: format!("loss shape {:?}", v.shape()) });
    }
    Ok(v.data()[0])
}
