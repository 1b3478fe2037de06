//! Masked smooth-L1 regression loss.

use crate::error::{invalid, Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over valid entries.
    Mean,
    /// Sum over valid entries.
    Sum,
}

/// Huber-style smooth L1 between `pred` and a constant `target`, restricted
/// to entries where `target > 0`:
/// `0.5·δ²/β` for `|δ| < β`, else `|δ| − 0.5·β`.
pub fn smooth_l1<'t>(pred: Var<'t>, target: &Tensor, beta: f64, reduction: Reduction) -> Result<Var<'t>> {
    if !(beta > 0.0) {
        return Err(invalid("smooth_l1", format!("beta must be positive, got {beta}")));
    }
    let p = pred.value();
    if p.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "smooth_l1",
            expected: p.shape().to_vec(),
            got: target.shape().to_vec(),
        });
    }
    let valid = target.data().iter().filter(|&&t| t > 0.0).count();
    if valid == 0 {
        return Err(invalid("smooth_l1", "target has no valid (> 0) entries"));
    }
    let norm = match reduction {
        Reduction::Mean => 1.0 / valid as f64,
        Reduction::Sum => 1.0,
    };
    let mut total = 0.0;
    let mut dpred = vec![0.0; p.numel()];
    for (i, (&y, &t)) in p.data().iter().zip(target.data()).enumerate() {
        if t <= 0.0 {
            continue;
        }
        let delta = y - t;
        if delta.abs() < beta {
            total += 0.5 * delta * delta / beta;
            dpred[i] = delta / beta;
        } else {
            total += delta.abs() - 0.5 * beta;
            dpred[i] = delta.signum();
        }
    }
    let shape = p.shape().to_vec();
    let ip = pred.id;
    Ok(pred.tape.push(
        Tensor::scalar(total * norm),
        pred.requires_grad(),
        Some(Box::new(move |g, sink| {
            let s = g.item() * norm;
            sink.accumulate(
                ip,
                Tensor::new(&shape, dpred.iter().map(|d| d * s).collect()).expect("shape"),
            );
        })),
    ))
}
