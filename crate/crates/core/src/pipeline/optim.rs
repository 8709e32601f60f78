use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::Gradients;
use crate::error::{invalid, Error, Result};
use crate::nn::{Params, Role};
use crate::tensor::Real;

/// `base · (1 − iter/total)^power`.
pub fn poly_lr(base: f64, iter: usize, total: usize, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(invalid("poly schedule needs at least one iteration"));
    }
    if iter > total {
        return Err(invalid(format!(
            "iteration {iter} is past the schedule end {total}"
        )));
    }
    Ok(base * Float::powf(1.0 - iter as f64 / total as f64, power))
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every trainable tensor that has a gradient. Fails without touching
    /// any parameter when a gradient is non-finite.
    pub fn step<M: Params<T> + ?Sized>(
        &mut self,
        model: &mut M,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads.iter() {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        let velocity = &mut self.velocity;
        let mut failure = None;
        model.visit_mut("", &mut |name, w, role| {
            if role != Role::Trainable {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            let v = velocity
                .entry(String::from(name))
                .or_insert_with(|| alloc::vec![T::zero(); w.numel()]);
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi = *wi - lr * *vi;
                if !wi.is_finite() && failure.is_none() {
                    failure = Some(Error::NonFinite(format!("parameter `{name}` after update")));
                }
            }
        });
        failure.map_or(Ok(()), Err)
    }
}

/// One plain step for callers that keep their own momentum buffer.
pub fn sgd_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (mu, wd, lr) = (T::of(momentum), T::of(weight_decay), T::of(lr));
    for ((w, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v + g + wd * *w;
        *w = *w - lr * *v;
    }
}
