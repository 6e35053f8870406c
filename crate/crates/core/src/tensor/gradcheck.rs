//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Relative-error floor: avoids division blowups when a whole gradient is ~0.
const REL_FLOOR: f64 = 1e-8;

/// Checks the tape gradient of a scalar function against central finite
/// differences and returns the maximum relative error over all parameters,
/// where each parameter's error is the norm ratio
/// `‖g_auto − g_fd‖ / max(‖g_auto‖, ‖g_fd‖, 1e-8)`.
///
/// (A per-element ratio would be dominated by f64 round-off for elements
/// whose true gradient is tiny: central differences carry an absolute
/// noise floor of about ε·|f|/h regardless of implementation quality.)
///
/// `f` receives a fresh tape plus the node ids of `params` (in order) and
/// must return a scalar loss node. It must be deterministic: two forward
/// passes that disagree bit-for-bit (train-mode dropout, for instance) are
/// rejected with a contract error.
pub fn grad_check<F>(params: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Parameter(format!("step size h must be positive, got {h}")));
    }
    if params.is_empty() {
        return Err(Error::Contract("grad_check needs at least one parameter".into()));
    }

    let loss_a = eval_loss(params, &f)?;
    let loss_b = eval_loss(params, &f)?;
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(Error::Contract(
            "function is not deterministic across forward passes (is dropout in train mode?)".into(),
        ));
    }

    // Reverse-mode gradients.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &ids)?;
    ensure_scalar(&tape, loss)?;
    tape.backward(loss)?;
    let auto_grads: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(id).numel()]))
        .collect();

    // Central differences, one element at a time; errors aggregate per
    // parameter as norm ratios.
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, auto) in auto_grads.iter().enumerate() {
        let mut diff_sq = 0.0;
        let mut auto_sq = 0.0;
        let mut fd_sq = 0.0;
        for (j, &ga) in auto.iter().enumerate() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let plus = eval_loss(&work, &f)?;
            work[pi].data_mut()[j] = orig - h;
            let minus = eval_loss(&work, &f)?;
            work[pi].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            diff_sq += (ga - fd) * (ga - fd);
            auto_sq += ga * ga;
            fd_sq += fd * fd;
        }
        let rel = diff_sq.sqrt() / auto_sq.sqrt().max(fd_sq.sqrt()).max(REL_FLOOR);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn eval_loss<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &ids)?;
    ensure_scalar(&tape, loss)?;
    Ok(tape.value(loss).data()[0])
}

fn ensure_scalar(tape: &Tape, loss: NodeId) -> Result<()> {
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check target must be scalar, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    Ok(())
}
