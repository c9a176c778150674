//! Central finite-difference gradient checking.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares analytic gradients of a scalar function of several tensors to
/// central differences with step `eps`. Returns the largest relative error
/// `|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)` over every coordinate.
///
/// `f` builds the scalar from parameter leaves it is handed, in the same
/// order as `points`. Graphs may borrow anything living for `'a`.
pub fn grad_check_many<'a, F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'a>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(points)
        .map(|(&id, p)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros_like(p)))
        .collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(v.item())
    };

    let mut work = points.to_vec();
    let mut worst: f64 = 0.0;
    for (ti, grad) in analytic.iter().enumerate() {
        for ci in 0..points[ti].len() {
            let orig = points[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[ci] = orig - eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let ga = grad.data()[ci];
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-tensor form of [`grad_check_many`].
pub fn grad_check<'a, F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'a>, NodeId) -> Result<NodeId>,
{
    grad_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(point), eps)
}
