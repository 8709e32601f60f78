use num_traits::Float;

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between the reverse-mode gradient of `loss` with
/// respect to parameter `param` and its central-difference estimate with step `h`.
pub fn grad_check(graph: &Graph<f64>, loss: NodeId, param: &str, h: f64) -> Result<f64> {
    let leaf = graph
        .param_id(param)
        .ok_or_else(|| Error::UnknownParam(param.into()))?;
    let grads = graph.backward(loss)?;
    let analytic = grads
        .get(param)
        .expect("registered parameter has a gradient");
    let base = graph.value(leaf).clone();
    let mut worst = 0.0f64;
    for i in 0..base.numel() {
        let numeric = central_difference(graph, leaf, loss, &base, i, h)?;
        let e = rel_err(analytic.data()[i], numeric);
        if e.is_nan() {
            return Err(Error::NonFinite(alloc::format!(
                "gradient check of `{param}` element {i}"
            )));
        }
        worst = Float::max(worst, e);
    }
    Ok(worst)
}

/// Like [`grad_check`], but with the reverse-mode gradient taken from the
/// recording replayed in `f32`. Differences are still estimated in `f64`, and
/// each error is relative to at least `1e-3` of the largest numeric gradient
/// of the parameter.
pub fn grad_check_f32(graph: &Graph<f64>, loss: NodeId, param: &str, h: f64) -> Result<f64> {
    let leaf = graph
        .param_id(param)
        .ok_or_else(|| Error::UnknownParam(param.into()))?;
    let grads = graph.cast::<f32>()?.backward(loss)?;
    let analytic = grads
        .get(param)
        .expect("registered parameter has a gradient");
    let base = graph.value(leaf).clone();
    let numeric = (0..base.numel())
        .map(|i| central_difference(graph, leaf, loss, &base, i, h))
        .collect::<Result<alloc::vec::Vec<f64>>>()?;
    let floor = numeric
        .iter()
        .fold(1e-8f64, |m, n| Float::max(m, 1e-3 * n.abs()));
    let mut worst = 0.0f64;
    for (i, &n) in numeric.iter().enumerate() {
        let a = analytic.data()[i] as f64;
        let e = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if e.is_nan() {
            return Err(Error::NonFinite(alloc::format!(
                "gradient check of `{param}` element {i}"
            )));
        }
        worst = Float::max(worst, e);
    }
    Ok(worst)
}

fn central_difference(
    graph: &Graph<f64>,
    leaf: NodeId,
    loss: NodeId,
    base: &Tensor<f64>,
    i: usize,
    h: f64,
) -> Result<f64> {
    let mut plus = base.clone();
    plus.data_mut()[i] = base.data()[i] + h;
    let mut minus = base.clone();
    minus.data_mut()[i] = base.data()[i] - h;
    let fp = graph.replay_with(leaf, plus, loss)?.item();
    let fm = graph.replay_with(leaf, minus, loss)?.item();
    Ok((fp - fm) / (2.0 * h))
}
