//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every builder method evaluates its node eagerly and records the operation
//! so that [`Graph::backward`] can walk the tape in reverse and
//! [`Graph::replay_with`] can re-run it with one leaf substituted.

mod gradcheck;
pub mod kernels;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

pub use gradcheck::{grad_check, grad_check_f32, rel_err};
use kernels::{Dims1, Dims2, Kernel2};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial axis of an `[H, W, C]` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Height,
    Width,
}

impl Axis {
    pub fn other(self) -> Axis {
        match self {
            Axis::Height => Axis::Width,
            Axis::Width => Axis::Height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Param,
    Constant,
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    },
    AxisAvgPool {
        x: NodeId,
        axis: Axis,
    },
    Broadcast {
        x: NodeId,
        axis: Axis,
        len: usize,
    },
    Resize {
        x: NodeId,
        height: usize,
        width: usize,
    },
    Sigmoid(NodeId),
    Relu(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    ScalarMul {
        s: NodeId,
        x: NodeId,
    },
    Concat(NodeId, NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        /// Running statistics in eval mode; `None` normalises with batch statistics.
        fixed: Option<(Vec<T>, Vec<T>)>,
        tag: String,
    },
    Mean(NodeId),
    Mse {
        pred: NodeId,
        target: Tensor<T>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        weights: Vec<T>,
        denom: T,
    },
}

#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Softmax(Vec<T>),
}

/// Batch statistics observed by one training-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<'a, T> {
    pub tag: &'a str,
    pub mean: &'a [T],
    pub var: &'a [T],
    /// Number of positions normalised per channel.
    pub population: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T = f32> {
    ops: Vec<Op<T>>,
    values: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
    params: BTreeMap<String, NodeId>,
}

/// Gradients of a scalar loss with respect to every named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn dims1(shape: &[usize], op: &'static str) -> Result<Dims1> {
    match *shape {
        [len, channels] => Ok(Dims1 {
            batch: 1,
            len,
            channels,
        }),
        [batch, len, channels] => Ok(Dims1 {
            batch,
            len,
            channels,
        }),
        _ => Err(Error::Rank {
            op,
            expected: "[L, C] or [B, L, C]",
            found: shape.to_vec(),
        }),
    }
}

fn dims2(shape: &[usize], op: &'static str) -> Result<Dims2> {
    match *shape {
        [height, width, channels] => Ok(Dims2 {
            batch: 1,
            height,
            width,
            channels,
        }),
        [batch, height, width, channels] => Ok(Dims2 {
            batch,
            height,
            width,
            channels,
        }),
        _ => Err(Error::Rank {
            op,
            expected: "[H, W, C] or [B, H, W, C]",
            found: shape.to_vec(),
        }),
    }
}

fn with_batch(batched: bool, batch: usize, rest: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(rest.len() + 1);
    if batched {
        s.push(batch);
    }
    s.extend_from_slice(rest);
    s
}

fn expect_dim(op: &'static str, axis: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dim {
            op,
            axis,
            expected,
            found,
        })
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Rank {
            op,
            expected: "matching ranks",
            found: b.to_vec(),
        });
    }
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        expect_dim(op, AXIS_NAMES[i.min(3)], x, y)?;
    }
    Ok(())
}

const AXIS_NAMES: [&str; 4] = ["0", "1", "2", "3"];

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn compute<T: Real>(op: &Op<T>, values: &[Tensor<T>]) -> Result<(Tensor<T>, Aux<T>)> {
    let v = |id: &NodeId| &values[id.0];
    let plain = |t: Tensor<T>| Ok((t, Aux::None));
    match op {
        Op::Param | Op::Constant => unreachable!("leaves are never recomputed"),
        Op::Conv1d { x, w, b } => {
            let (x, w, b) = (v(x), v(w), v(b));
            let d = dims1(x.shape(), "conv1d")?;
            let &[k, cin, cout] = w.shape() else {
                return Err(Error::Rank {
                    op: "conv1d",
                    expected: "weight [K, Cin, Cout]",
                    found: w.shape().to_vec(),
                });
            };
            if k % 2 == 0 {
                return Err(invalid("conv1d: kernel size must be odd"));
            }
            expect_dim("conv1d", "input channels", cin, d.channels)?;
            expect_dim("conv1d", "bias", cout, b.numel())?;
            let out = kernels::conv1d(x.data(), d, w.data(), k, cout, b.data());
            plain(Tensor::new(
                &with_batch(x.rank() == 3, d.batch, &[d.len, cout]),
                out,
            )?)
        }
        Op::Conv2d { x, w, b, stride } => {
            let (x, w, b) = (v(x), v(w), v(b));
            let d = dims2(x.shape(), "conv2d")?;
            let &[kh, kw, cin, cout] = w.shape() else {
                return Err(Error::Rank {
                    op: "conv2d",
                    expected: "weight [Kh, Kw, Cin, Cout]",
                    found: w.shape().to_vec(),
                });
            };
            if kh % 2 == 0 || kw % 2 == 0 || *stride == 0 {
                return Err(invalid(
                    "conv2d: kernel sizes must be odd and stride positive",
                ));
            }
            expect_dim("conv2d", "input channels", cin, d.channels)?;
            expect_dim("conv2d", "bias", cout, b.numel())?;
            let kern = Kernel2 {
                kh,
                kw,
                cout,
                stride: *stride,
            };
            let (oh, ow) = kern.out_hw(d);
            let out = kernels::conv2d(x.data(), d, w.data(), kern, b.data());
            plain(Tensor::new(
                &with_batch(x.rank() == 4, d.batch, &[oh, ow, cout]),
                out,
            )?)
        }
        Op::AxisAvgPool { x, axis } => {
            let x = v(x);
            let d = dims2(x.shape(), "axis_avg_pool")?;
            let over_height = *axis == Axis::Height;
            let keep = if over_height { d.width } else { d.height };
            let out = kernels::axis_mean(x.data(), d, over_height);
            plain(Tensor::new(
                &with_batch(x.rank() == 4, d.batch, &[keep, d.channels]),
                out,
            )?)
        }
        Op::Broadcast { x, axis, len } => {
            let x = v(x);
            let d1 = dims1(x.shape(), "broadcast_upsample")?;
            let along_height = *axis == Axis::Height;
            let (height, width) = if along_height {
                (*len, d1.len)
            } else {
                (d1.len, *len)
            };
            let d = Dims2 {
                batch: d1.batch,
                height,
                width,
                channels: d1.channels,
            };
            let out = kernels::broadcast(x.data(), d, along_height);
            plain(Tensor::new(
                &with_batch(x.rank() == 3, d.batch, &[height, width, d.channels]),
                out,
            )?)
        }
        Op::Resize { x, height, width } => {
            let x = v(x);
            let d = dims2(x.shape(), "resize")?;
            let out = kernels::resize_bilinear(x.data(), d, *height, *width);
            plain(Tensor::new(
                &with_batch(x.rank() == 4, d.batch, &[*height, *width, d.channels]),
                out,
            )?)
        }
        Op::Sigmoid(x) => plain(v(x).map(sigmoid)),
        Op::Relu(x) => plain(v(x).map(|a| a.max(T::zero()))),
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (a, b) = (v(a), v(b));
            same_shape("pointwise", a.shape(), b.shape())?;
            let data = if matches!(op, Op::Add(..)) {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&p, &q)| p + q)
                    .collect()
            } else {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&p, &q)| p * q)
                    .collect()
            };
            plain(Tensor::new(a.shape(), data)?)
        }
        Op::Scale(x, c) => plain(v(x).map(|a| a * *c)),
        Op::ScalarMul { s, x } => {
            let s = v(s);
            if s.numel() != 1 {
                return Err(Error::Rank {
                    op: "scalar_mul",
                    expected: "scalar",
                    found: s.shape().to_vec(),
                });
            }
            let k = s.item();
            plain(v(x).map(|a| a * k))
        }
        Op::Concat(a, b) => {
            let (a, b) = (v(a), v(b));
            let (ra, rb) = (a.rank(), b.rank());
            if ra != rb {
                return Err(Error::Rank {
                    op: "concat_channels",
                    expected: "matching ranks",
                    found: b.shape().to_vec(),
                });
            }
            same_shape(
                "concat_channels",
                &a.shape()[..ra - 1],
                &b.shape()[..rb - 1],
            )?;
            let (ca, cb) = (a.shape()[ra - 1], b.shape()[rb - 1]);
            let mut data = Vec::with_capacity(a.numel() + b.numel());
            for (ra, rb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
                data.extend_from_slice(ra);
                data.extend_from_slice(rb);
            }
            let mut shape = a.shape().to_vec();
            shape[ra - 1] = ca + cb;
            plain(Tensor::new(&shape, data)?)
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            eps,
            fixed,
            ..
        } => {
            let (x, gamma, beta) = (v(x), v(gamma), v(beta));
            if x.rank() < 2 {
                return Err(Error::Rank {
                    op: "batch_norm",
                    expected: "rank >= 2",
                    found: x.shape().to_vec(),
                });
            }
            let c = x.shape()[x.rank() - 1];
            expect_dim("batch_norm", "gamma", c, gamma.numel())?;
            expect_dim("batch_norm", "beta", c, beta.numel())?;
            let (mean, var) = match fixed {
                Some((m, s)) => (m.clone(), s.clone()),
                None => {
                    if x.numel() / c < 2 {
                        return Err(invalid(
                            "batch_norm: training mode needs at least 2 samples per channel",
                        ));
                    }
                    kernels::channel_stats(x.data(), c)
                }
            };
            let (y, xhat, inv_std) =
                kernels::batch_norm(x.data(), c, gamma.data(), beta.data(), &mean, &var, *eps);
            Ok((
                Tensor::new(x.shape(), y)?,
                Aux::BatchNorm {
                    xhat,
                    inv_std,
                    mean,
                    var,
                },
            ))
        }
        Op::Mean(x) => {
            let x = v(x);
            plain(Tensor::scalar(x.sum() / T::of(x.numel() as f64)))
        }
        Op::Mse { pred, target } => {
            let p = v(pred);
            same_shape("mse", target.shape(), p.shape())?;
            let s = p
                .data()
                .iter()
                .zip(target.data())
                .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
            plain(Tensor::scalar(s / T::of(p.numel() as f64)))
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            denom,
        } => {
            let l = v(logits);
            let n = l.shape()[l.rank() - 1];
            expect_dim("cross_entropy", "pixels", l.numel() / n, targets.len())?;
            let mut total = T::zero();
            for ((row, &t), &w) in l.data().chunks(n).zip(targets).zip(weights) {
                if w != T::zero() {
                    total = total + w * kernels::row_nll(row, t as usize);
                }
            }
            let probs = kernels::softmax_rows(l.data(), n);
            Ok((Tensor::scalar(total / *denom), Aux::Softmax(probs)))
        }
    }
}

impl<T: Real> Op<T> {
    fn cast<U: Real>(&self) -> Op<U> {
        let c = |v: T| U::of(v.as_f64());
        let cv = |v: &[T]| v.iter().map(|&x| c(x)).collect::<Vec<U>>();
        match self {
            Op::Param => Op::Param,
            Op::Constant => Op::Constant,
            &Op::Conv1d { x, w, b } => Op::Conv1d { x, w, b },
            &Op::Conv2d { x, w, b, stride } => Op::Conv2d { x, w, b, stride },
            &Op::AxisAvgPool { x, axis } => Op::AxisAvgPool { x, axis },
            &Op::Broadcast { x, axis, len } => Op::Broadcast { x, axis, len },
            &Op::Resize { x, height, width } => Op::Resize { x, height, width },
            &Op::Sigmoid(x) => Op::Sigmoid(x),
            &Op::Relu(x) => Op::Relu(x),
            &Op::Add(a, b) => Op::Add(a, b),
            &Op::Mul(a, b) => Op::Mul(a, b),
            &Op::Scale(x, k) => Op::Scale(x, c(k)),
            &Op::ScalarMul { s, x } => Op::ScalarMul { s, x },
            &Op::Concat(a, b) => Op::Concat(a, b),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                fixed,
                tag,
            } => Op::BatchNorm {
                x: *x,
                gamma: *gamma,
                beta: *beta,
                eps: c(*eps),
                fixed: fixed.as_ref().map(|(m, v)| (cv(m), cv(v))),
                tag: tag.clone(),
            },
            &Op::Mean(x) => Op::Mean(x),
            Op::Mse { pred, target } => Op::Mse {
                pred: *pred,
                target: target.cast(),
            },
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                denom,
            } => Op::CrossEntropy {
                logits: *logits,
                targets: targets.clone(),
                weights: cv(weights),
                denom: c(*denom),
            },
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            aux: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push_leaf(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        self.aux.push(Aux::None);
        NodeId(self.ops.len() - 1)
    }

    fn push(&mut self, op: Op<T>) -> Result<NodeId> {
        let (value, aux) = compute(&op, &self.values)?;
        self.ops.push(op);
        self.values.push(value);
        self.aux.push(aux);
        Ok(NodeId(self.ops.len() - 1))
    }

    /// Registers a trainable leaf. Registering the same name twice returns the first node.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push_leaf(Op::Param, value);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(Op::Constant, value)
    }

    /// The same recording at another precision: leaves are converted and every
    /// operation is recomputed.
    pub fn cast<U: Real>(&self) -> Result<Graph<U>> {
        let mut g = Graph::new();
        for (op, value) in self.ops.iter().zip(&self.values) {
            match op {
                Op::Param | Op::Constant => {
                    g.push_leaf(op.cast(), value.cast());
                }
                _ => {
                    g.push(op.cast())?;
                }
            }
        }
        g.params = self.params.clone();
        Ok(g)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Conv1d { x, w, b })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        self.push(Op::Conv2d { x, w, b, stride })
    }

    /// Averages out `axis`: pooling over `Height` yields `[W, C]`, over `Width` yields `[H, C]`.
    pub fn axis_avg_pool(&mut self, x: NodeId, axis: Axis) -> Result<NodeId> {
        self.push(Op::AxisAvgPool { x, axis })
    }

    /// Inverse of [`Graph::axis_avg_pool`]'s shape: replicates `[L, C]` `len` times along `axis`.
    pub fn broadcast_upsample(&mut self, x: NodeId, axis: Axis, len: usize) -> Result<NodeId> {
        if len == 0 {
            return Err(invalid(
                "broadcast_upsample: target length must be positive",
            ));
        }
        self.push(Op::Broadcast { x, axis, len })
    }

    /// Half-pixel-centred bilinear resize of an `[H, W, C]` map.
    pub fn resize_bilinear(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        if height == 0 || width == 0 {
            return Err(invalid("resize: target size must be positive"));
        }
        self.push(Op::Resize { x, height, width })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.push(Op::Scale(x, c))
    }

    /// Multiplies `x` by the single-element node `s`; both receive gradients.
    pub fn scalar_mul(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        self.push(Op::ScalarMul { s, x })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Concat(a, b))
    }

    /// Channel-last batch normalisation. `running` supplies `(mean, var)` for eval mode;
    /// pass `None` to normalise with the statistics of this batch. `tag` names the
    /// node for [`Graph::batch_stats`].
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        running: Option<(&[T], &[T])>,
        tag: &str,
    ) -> Result<NodeId> {
        let fixed = running.map(|(m, v)| (m.to_vec(), v.to_vec()));
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            eps,
            fixed,
            tag: tag.to_string(),
        })
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(x))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Mse { pred, target })
    }

    /// `sum_p weights[p] * -log softmax(logits[p])[targets[p]] / denom` over the
    /// channel-last rows of `logits`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<u32>,
        weights: Vec<T>,
        denom: T,
    ) -> Result<NodeId> {
        let l = self.value(logits);
        let n = l.shape()[l.rank() - 1];
        expect_dim("cross_entropy", "weights", targets.len(), weights.len())?;
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= n) {
            return Err(invalid(alloc::format!(
                "cross_entropy: target {t} out of range for {n} classes"
            )));
        }
        if denom <= T::zero() {
            return Err(invalid("cross_entropy: non-positive normaliser"));
        }
        self.push(Op::CrossEntropy {
            logits,
            targets,
            weights,
            denom,
        })
    }

    /// Statistics of every training-mode batch-norm node, in creation order.
    pub fn batch_stats(&self) -> impl Iterator<Item = BatchStats<'_, T>> {
        self.ops
            .iter()
            .zip(&self.aux)
            .zip(&self.values)
            .filter_map(|((op, aux), out)| match (op, aux) {
                (
                    Op::BatchNorm {
                        fixed: None, tag, ..
                    },
                    Aux::BatchNorm { mean, var, .. },
                ) => Some(BatchStats {
                    tag,
                    mean,
                    var,
                    population: out.numel() / mean.len(),
                }),
                _ => None,
            })
    }

    /// Re-evaluates the tape with `leaf` replaced by `value` and returns node `out`.
    pub fn replay_with(&self, leaf: NodeId, value: Tensor<T>, out: NodeId) -> Result<Tensor<T>> {
        if !matches!(self.ops[leaf.0], Op::Param | Op::Constant) {
            return Err(invalid("replay_with: substituted node must be a leaf"));
        }
        same_shape("replay", self.values[leaf.0].shape(), value.shape())?;
        let mut values: Vec<Tensor<T>> = self.values[..leaf.0].to_vec();
        values.push(value);
        for i in leaf.0 + 1..=out.0 {
            let v = match &self.ops[i] {
                Op::Param | Op::Constant => self.values[i].clone(),
                op => compute(op, &values)?.0,
            };
            values.push(v);
        }
        Ok(values.swap_remove(out.0))
    }

    /// Reverse-mode gradients of the scalar node `loss` for every registered parameter.
    /// Parameters that do not reach the loss get zero tensors.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let keep = matches!(self.ops[i], Op::Param);
            self.propagate(i, &g, &mut grads)?;
            if keep {
                grads[i] = Some(g);
            }
        }
        let map = self
            .params
            .iter()
            .map(|(name, &id)| {
                let g = grads
                    .get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.values[id.0].shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { map })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let v = |id: &NodeId| &self.values[id.0];
        let out = &self.values[i];
        let mut acc = |id: NodeId, data: Vec<T>| -> Result<()> {
            let shape = self.values[id.0].shape();
            match &mut grads[id.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&data) {
                        *a = *a + *b;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(shape, data)?),
            }
            Ok(())
        };
        match &self.ops[i] {
            Op::Param | Op::Constant => {}
            Op::Conv1d { x, w, b } => {
                let (xv, wv) = (v(x), v(w));
                let d = dims1(xv.shape(), "conv1d")?;
                let (k, cout) = (wv.shape()[0], wv.shape()[2]);
                let (dx, dw, db) =
                    kernels::conv1d_backward(xv.data(), d, wv.data(), k, cout, g.data());
                acc(*x, dx)?;
                acc(*w, dw)?;
                acc(*b, db)?;
            }
            Op::Conv2d { x, w, b, stride } => {
                let (xv, wv) = (v(x), v(w));
                let d = dims2(xv.shape(), "conv2d")?;
                let s = wv.shape();
                let kern = Kernel2 {
                    kh: s[0],
                    kw: s[1],
                    cout: s[3],
                    stride: *stride,
                };
                let (dx, dw, db) =
                    kernels::conv2d_backward(xv.data(), d, wv.data(), kern, g.data());
                acc(*x, dx)?;
                acc(*w, dw)?;
                acc(*b, db)?;
            }
            Op::AxisAvgPool { x, axis } => {
                // The adjoint of a mean is a scaled broadcast.
                let d = dims2(v(x).shape(), "axis_avg_pool")?;
                let along_height = *axis == Axis::Height;
                let n = if along_height { d.height } else { d.width };
                let inv = T::one() / T::of(n as f64);
                let mut dx = kernels::broadcast(g.data(), d, along_height);
                dx.iter_mut().for_each(|a| *a = *a * inv);
                acc(*x, dx)?;
            }
            Op::Broadcast { x, axis, .. } => {
                let d = dims2(out.shape(), "broadcast_upsample")?;
                acc(
                    *x,
                    kernels::broadcast_backward(g.data(), d, *axis == Axis::Height),
                )?;
            }
            Op::Resize { x, height, width } => {
                let d = dims2(v(x).shape(), "resize")?;
                acc(
                    *x,
                    kernels::resize_bilinear_backward(g.data(), d, *height, *width),
                )?;
            }
            Op::Sigmoid(x) => {
                let dx = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                acc(*x, dx)?;
            }
            Op::Relu(x) => {
                let dx = v(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| if a > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, dx)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.data().to_vec())?;
                acc(*b, g.data().to_vec())?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let da = g
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&gv, &y)| gv * y)
                    .collect();
                let db = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &y)| gv * y)
                    .collect();
                acc(*a, da)?;
                acc(*b, db)?;
            }
            Op::Scale(x, c) => acc(*x, g.data().iter().map(|&gv| gv * *c).collect())?,
            Op::ScalarMul { s, x } => {
                let (sv, xv) = (v(s).item(), v(x));
                let ds = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .fold(T::zero(), |a, (&gv, &y)| a + gv * y);
                acc(*s, vec![ds])?;
                acc(*x, g.data().iter().map(|&gv| gv * sv).collect())?;
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (*v(a).shape().last().unwrap(), *v(b).shape().last().unwrap());
                let mut da = Vec::with_capacity(v(a).numel());
                let mut db = Vec::with_capacity(v(b).numel());
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(*a, da)?;
                acc(*b, db)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                fixed,
                ..
            } => {
                let Aux::BatchNorm { xhat, inv_std, .. } = &self.aux[i] else {
                    unreachable!("batch norm node without saved statistics")
                };
                let (dx, dgamma, dbeta) = kernels::batch_norm_backward(
                    g.data(),
                    xhat,
                    inv_std,
                    v(gamma).data(),
                    fixed.is_none(),
                );
                acc(*x, dx)?;
                acc(*gamma, dgamma)?;
                acc(*beta, dbeta)?;
            }
            Op::Mean(x) => {
                let n = v(x).numel();
                let dv = g.item() / T::of(n as f64);
                acc(*x, vec![dv; n])?;
            }
            Op::Mse { pred, target } => {
                let p = v(pred);
                let k = g.item() * T::of(2.0) / T::of(p.numel() as f64);
                let dp = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| k * (a - b))
                    .collect();
                acc(*pred, dp)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                denom,
            } => {
                let Aux::Softmax(probs) = &self.aux[i] else {
                    unreachable!("cross entropy node without saved softmax")
                };
                let n = *v(logits).shape().last().unwrap();
                let up = g.item() / *denom;
                let mut dl = Vec::with_capacity(probs.len());
                for ((row, &t), &w) in probs.chunks(n).zip(targets).zip(weights) {
                    for (c, &p) in row.iter().enumerate() {
                        let ind = if c == t as usize { T::one() } else { T::zero() };
                        dl.push(up * w * (p - ind));
                    }
                }
                acc(*logits, dl)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 1], &[1., 2., 3.]));
        let w = g.constant(t(&[3, 1, 1], &[0., 1., 0.]));
        let b = g.constant(t(&[1], &[0.]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3.]);
    }

    #[test]
    fn conv1d_ones_kernel_zero_padding() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 1], &[1., 2., 3.]));
        let w = g.constant(t(&[3, 1, 1], &[1., 1., 1.]));
        let b = g.constant(t(&[1], &[0.]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3., 6., 5.]);
    }

    #[test]
    fn conv1d_zero_weight_annihilates() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4, 2], &[1., -2., 3., 4., 5., 6., -7., 8.]));
        let w = g.constant(Tensor::zeros(&[3, 2, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.conv1d(x, w, b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_channel_mismatch_names_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4, 2]));
        let w = g.constant(Tensor::zeros(&[3, 3, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        match g.conv1d(x, w, b).unwrap_err() {
            Error::Dim {
                axis,
                expected,
                found,
                ..
            } => {
                assert_eq!(axis, "input channels");
                assert_eq!((expected, found), (3, 2));
            }
            e => panic!("unexpected error {e:?}"),
        }
    }

    #[test]
    fn conv2d_ones_kernel_on_2x2() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 2, 1], 1.0));
        let w = g.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[4., 4., 4., 4.]);
    }

    #[test]
    fn conv2d_unit_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = g.constant(t(&[2, 3, 2], &data));
        let w = g.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn axis_pool_row_and_column_means() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2, 1], &[1., 2., 3., 4.]));
        let zh = g.axis_avg_pool(x, Axis::Height).unwrap();
        let zv = g.axis_avg_pool(x, Axis::Width).unwrap();
        assert_eq!(g.value(zh).data(), &[2., 3.]);
        assert_eq!(g.value(zh).shape(), &[2, 1]);
        assert_eq!(g.value(zv).data(), &[1.5, 3.5]);
    }

    #[test]
    fn broadcast_replicates() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 1], &[7., 9.]));
        let y = g.broadcast_upsample(x, Axis::Height, 3).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 2, 1]);
        assert_eq!(g.value(y).data(), &[7., 9., 7., 9., 7., 9.]);
        let s = g.constant(t(&[1, 1], &[5.]));
        let r = g.broadcast_upsample(s, Axis::Width, 4).unwrap();
        assert_eq!(g.value(r).shape(), &[1, 4, 1]);
        assert_eq!(g.value(r).data(), &[5.; 4]);
        assert!(g.broadcast_upsample(s, Axis::Width, 0).is_err());
    }

    #[test]
    fn pointwise_basics() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., -2., 3.]));
        let s = g.sigmoid(x).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(r).data(), &[0., 0., 3.]);
        let a = g.constant(Tensor::zeros(&[2, 2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2, 5]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2, 8]);
        let bad = g.constant(Tensor::zeros(&[2, 3, 5]));
        assert!(g.concat_channels(a, bad).is_err());
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn batch_norm_cases() {
        let mut g = Graph::<f64>::new();
        let one = g.constant(t(&[1], &[1.]));
        let zero = g.constant(t(&[1], &[0.]));
        let x0 = g.constant(Tensor::zeros(&[4, 1]));
        let y0 = g.batch_norm(x0, one, zero, 1e-5, None, "bn").unwrap();
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));

        let x1 = g.constant(t(&[4, 1], &[-1., 1., -1., 1.]));
        let y1 = g.batch_norm(x1, one, zero, 1e-12, None, "bn").unwrap();
        for (a, b) in g.value(y1).data().iter().zip([-1., 1., -1., 1.]) {
            assert!((a - b).abs() < 1e-9);
        }

        let c = g.constant(t(&[1], &[2.5]));
        let z = g.constant(t(&[1], &[0.]));
        let y2 = g.batch_norm(x1, z, c, 1e-5, None, "bn").unwrap();
        assert!(g.value(y2).data().iter().all(|&v| v == 2.5));

        let single = g.constant(Tensor::zeros(&[1, 1]));
        assert!(g.batch_norm(single, one, zero, 1e-5, None, "bn").is_err());
    }

    #[test]
    fn backward_polynomial_and_sigmoid() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[1], &[3.]));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get("x").unwrap().data(), &[6.]);

        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[1], &[0.]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.backward(y).unwrap().get("x").unwrap().data(), &[0.25]);
    }

    #[test]
    fn disconnected_param_gets_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[1], &[2.]));
        g.param("unused", t(&[2, 2], &[1., 2., 3., 4.]));
        let y = g.scale(x, 3.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(grads.get("x").unwrap().data(), &[3.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[2], &[1., 2.]));
        assert_eq!(g.backward(x).unwrap_err(), Error::NonScalarLoss(vec![2]));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[2, 2, 4]));
        let ce = g
            .weighted_cross_entropy(l, vec![0, 1, 2, 3], vec![1.0; 4], 4.0)
            .unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn replay_matches_fresh_evaluation() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[2], &[0.5, -1.0]));
        let s = g.sigmoid(x).unwrap();
        let m = g.mul(s, x).unwrap();
        let loss = g.mean(m).unwrap();
        let moved = g.replay_with(x, t(&[2], &[1.0, 2.0]), loss).unwrap();

        let mut h = Graph::<f64>::new();
        let x2 = h.param("x", t(&[2], &[1.0, 2.0]));
        let s2 = h.sigmoid(x2).unwrap();
        let m2 = h.mul(s2, x2).unwrap();
        let l2 = h.mean(m2).unwrap();
        assert_eq!(&moved, h.value(l2));
    }
}
