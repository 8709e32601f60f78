//! Parameter containers for convolutions and batch normalisation, and the
//! traversal used by optimisers, checkpoints and gradient checks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, NodeId};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

/// Named traversal over every tensor a model owns, in a fixed order.
pub trait Params<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Role));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role));

    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<T>, Role)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t, r| {
            out.push((String::from(n), t.clone(), r))
        });
        out
    }

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, r| {
            if r == Role::Trainable {
                n += t.numel();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in `±sqrt(6 / fan_in)`.
pub(crate) fn he_uniform<T: Real>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<T> {
    let bound = Float::sqrt(6.0 / fan_in as f64);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape matches by construction")
}

/// 1D convolution, weight `[k, cin, cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv1d<T> {
    pub fn init(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> Self {
        Conv1d {
            weight: he_uniform(rng, &[k, cin, cout], k * cin),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = g.param(&join(prefix, "weight"), self.weight.clone());
        let b = g.param(&join(prefix, "bias"), self.bias.clone());
        g.conv1d(x, w, b)
    }

    pub fn cast<U: Real>(&self) -> Conv1d<U> {
        Conv1d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Real> Params<T> for Conv1d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Role)) {
        f(&join(prefix, "weight"), &self.weight, Role::Trainable);
        f(&join(prefix, "bias"), &self.bias, Role::Trainable);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        f(&join(prefix, "weight"), &mut self.weight, Role::Trainable);
        f(&join(prefix, "bias"), &mut self.bias, Role::Trainable);
    }
}

/// 2D convolution, weight `[kh, kw, cin, cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn init(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize, stride: usize) -> Self {
        Conv2d {
            weight: he_uniform(rng, &[k, k, cin, cout], k * k * cin),
            bias: Tensor::zeros(&[cout]),
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = g.param(&join(prefix, "weight"), self.weight.clone());
        let b = g.param(&join(prefix, "bias"), self.bias.clone());
        g.conv2d(x, w, b, self.stride)
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
        }
    }
}

impl<T: Real> Params<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Role)) {
        f(&join(prefix, "weight"), &self.weight, Role::Trainable);
        f(&join(prefix, "bias"), &self.bias, Role::Trainable);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        f(&join(prefix, "weight"), &mut self.weight, Role::Trainable);
        f(&join(prefix, "bias"), &mut self.bias, Role::Trainable);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    /// Train mode normalises with batch statistics; eval mode with the running ones.
    pub fn forward(&self, g: &mut Graph<T>, prefix: &str, x: NodeId, mode: Mode) -> Result<NodeId> {
        let gamma = g.param(&join(prefix, "gamma"), self.gamma.clone());
        let beta = g.param(&join(prefix, "beta"), self.beta.clone());
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some((self.running_mean.data(), self.running_var.data())),
        };
        g.batch_norm(x, gamma, beta, T::of(BN_EPS), running, prefix)
    }

    /// Exponential moving average update; the variance uses the unbiased estimate.
    pub fn absorb(&mut self, mean: &[T], var: &[T], population: usize) {
        ema(self.running_mean.data_mut(), mean, T::one());
        ema(self.running_var.data_mut(), var, unbias(population));
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }
}

impl<T: Real> Params<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Role)) {
        f(&join(prefix, "gamma"), &self.gamma, Role::Trainable);
        f(&join(prefix, "beta"), &self.beta, Role::Trainable);
        f(
            &join(prefix, "running_mean"),
            &self.running_mean,
            Role::Buffer,
        );
        f(
            &join(prefix, "running_var"),
            &self.running_var,
            Role::Buffer,
        );
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        f(&join(prefix, "gamma"), &mut self.gamma, Role::Trainable);
        f(&join(prefix, "beta"), &mut self.beta, Role::Trainable);
        f(
            &join(prefix, "running_mean"),
            &mut self.running_mean,
            Role::Buffer,
        );
        f(
            &join(prefix, "running_var"),
            &mut self.running_var,
            Role::Buffer,
        );
    }
}

/// Folds the batch statistics recorded in `graph` into the matching batch-norm
/// layers of `model`, identified by their tag (the layer's name prefix).
pub fn absorb_batch_stats<T: Real, M: Params<T> + ?Sized>(model: &mut M, graph: &Graph<T>) {
    let stats: Vec<_> = graph
        .batch_stats()
        .map(|s| (join(s.tag, "running_mean"), join(s.tag, "running_var"), s))
        .collect();
    model.visit_mut("", &mut |name, t, role| {
        if role != Role::Buffer {
            return;
        }
        for (mean_name, var_name, s) in &stats {
            if name == mean_name {
                ema(t.data_mut(), s.mean, T::one());
            } else if name == var_name {
                ema(t.data_mut(), s.var, unbias(s.population));
            }
        }
    });
}

fn unbias<T: Real>(population: usize) -> T {
    T::of(population as f64 / (population.max(2) - 1) as f64)
}

fn ema<T: Real>(running: &mut [T], batch: &[T], factor: T) {
    let m = T::of(BN_MOMENTUM);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (T::one() - m) * *r + m * b * factor;
    }
}
