//! The class distribution guided (CDG) module.
//!
//! Given a feature map `X_i` of shape `[H, W, C]` the module
//!
//! 1. averages it over height (`Z_h`, `[W, C]`) and over width (`Z_v`, `[H, C]`);
//! 2. halves the channels of each with a kernel-3 conv + BN + ReLU (`U_h`, `U_v`);
//! 3. predicts the class distributions `P_h = σ(conv3(U_h))` (`[W, N]`) and
//!    `P_v` (`[H, N]`), which the CDG loss supervises;
//! 4. produces per-channel gates `A_h = σ(conv7(U_h))` (`[W, C]`) and `A_v`;
//! 5. replicates the gates back to `[H, W, C]` and mixes them into the spatial
//!    guidance map `A_d = α·A'_h + β·A'_v` with learnable scalars;
//! 6. returns `X_o = ReLU(BN(conv3x3(concat(X_i, X_i ⊙ A_d))))`.
//!
//! The only guidance state is `(H + W)·C` values per sample, versus the
//! `(H·W)²` attention matrix of pixel-pair attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Axis, Graph, Mode, NodeId};
use crate::error::{invalid, Error, Result};
use crate::nn::{join, BatchNorm, Conv1d, Conv2d, Params, Role};
use crate::tensor::{Real, Tensor};

pub const REDUCE_KERNEL: usize = 3;
pub const DIST_KERNEL: usize = 3;
pub const GATE_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct CdgParams<T = f32> {
    pub channels: usize,
    pub classes: usize,
    pub reduce_h: Conv1d<T>,
    pub reduce_h_bn: BatchNorm<T>,
    pub reduce_v: Conv1d<T>,
    pub reduce_v_bn: BatchNorm<T>,
    pub dist_head_h: Conv1d<T>,
    pub dist_head_v: Conv1d<T>,
    pub gate_h: Conv1d<T>,
    pub gate_v: Conv1d<T>,
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
    pub fuse: Conv2d<T>,
    pub fuse_bn: BatchNorm<T>,
}

/// Node ids of everything [`CdgParams::forward`] exposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CdgOutput {
    pub x_o: NodeId,
    pub p_h: NodeId,
    pub p_v: NodeId,
    pub a_h: NodeId,
    pub a_v: NodeId,
    pub a_d: NodeId,
}

impl CdgOutput {
    /// Elements held by the pre-broadcast guidance maps `A_h` and `A_v`.
    pub fn guidance_elements<T: Real>(&self, g: &Graph<T>) -> usize {
        g.value(self.a_h).numel() + g.value(self.a_v).numel()
    }
}

/// Initialises a CDG module for `channels` input channels and `classes` classes.
pub fn init_params<T: Real>(channels: usize, classes: usize, seed: u64) -> Result<CdgParams<T>> {
    CdgParams::init(channels, classes, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Builds the module on `x` (an `[H, W, C]` or `[B, H, W, C]` node) under the name prefix `cdg`.
pub fn cdg_forward<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    params: &CdgParams<T>,
    mode: Mode,
) -> Result<CdgOutput> {
    params.forward(g, "cdg", x, mode)
}

impl<T: Real> CdgParams<T> {
    pub fn init(channels: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(2) {
            return Err(invalid(alloc::format!(
                "CDG channel count must be even and positive, got {channels}"
            )));
        }
        if classes == 0 {
            return Err(invalid("CDG class count must be positive"));
        }
        let half = channels / 2;
        Ok(CdgParams {
            channels,
            classes,
            reduce_h: Conv1d::init(rng, REDUCE_KERNEL, channels, half),
            reduce_h_bn: BatchNorm::new(half),
            reduce_v: Conv1d::init(rng, REDUCE_KERNEL, channels, half),
            reduce_v_bn: BatchNorm::new(half),
            dist_head_h: Conv1d::init(rng, DIST_KERNEL, half, classes),
            dist_head_v: Conv1d::init(rng, DIST_KERNEL, half, classes),
            gate_h: Conv1d::init(rng, GATE_KERNEL, half, channels),
            gate_v: Conv1d::init(rng, GATE_KERNEL, half, channels),
            alpha: Tensor::scalar(T::of(0.5)),
            beta: Tensor::scalar(T::of(0.5)),
            fuse: Conv2d::init(rng, 3, 2 * channels, channels, 1),
            fuse_bn: BatchNorm::new(channels),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        x: NodeId,
        mode: Mode,
    ) -> Result<CdgOutput> {
        let shape = g.value(x).shape().to_vec();
        let (height, width, channels) = match *shape.as_slice() {
            [h, w, c] | [_, h, w, c] => (h, w, c),
            _ => {
                return Err(Error::Rank {
                    op: "cdg_forward",
                    expected: "[H, W, C] or [B, H, W, C]",
                    found: shape,
                })
            }
        };
        if channels != self.channels {
            return Err(Error::Dim {
                op: "cdg_forward",
                axis: "channels",
                expected: self.channels,
                found: channels,
            });
        }
        let p = |name: &str| join(prefix, name);

        // Horizontal branch: pool away the height, keep one row per column.
        let z_h = g.axis_avg_pool(x, Axis::Height)?;
        let u_h = self.reduce_h.forward(g, &p("reduce_h"), z_h)?;
        let u_h = self.reduce_h_bn.forward(g, &p("reduce_h_bn"), u_h, mode)?;
        let u_h = g.relu(u_h)?;
        let p_h = self.dist_head_h.forward(g, &p("dist_head_h"), u_h)?;
        let p_h = g.sigmoid(p_h)?;
        let a_h = self.gate_h.forward(g, &p("gate_h"), u_h)?;
        let a_h = g.sigmoid(a_h)?;

        let z_v = g.axis_avg_pool(x, Axis::Width)?;
        let u_v = self.reduce_v.forward(g, &p("reduce_v"), z_v)?;
        let u_v = self.reduce_v_bn.forward(g, &p("reduce_v_bn"), u_v, mode)?;
        let u_v = g.relu(u_v)?;
        let p_v = self.dist_head_v.forward(g, &p("dist_head_v"), u_v)?;
        let p_v = g.sigmoid(p_v)?;
        let a_v = self.gate_v.forward(g, &p("gate_v"), u_v)?;
        let a_v = g.sigmoid(a_v)?;

        let a_h_up = g.broadcast_upsample(a_h, Axis::Height, height)?;
        let a_v_up = g.broadcast_upsample(a_v, Axis::Width, width)?;
        let alpha = g.param(&p("alpha"), self.alpha.clone());
        let beta = g.param(&p("beta"), self.beta.clone());
        let wh = g.scalar_mul(alpha, a_h_up)?;
        let wv = g.scalar_mul(beta, a_v_up)?;
        let a_d = g.add(wh, wv)?;

        let gated = g.mul(x, a_d)?;
        let cat = g.concat_channels(x, gated)?;
        let fused = self.fuse.forward(g, &p("fuse"), cat)?;
        let fused = self.fuse_bn.forward(g, &p("fuse_bn"), fused, mode)?;
        let x_o = g.relu(fused)?;
        Ok(CdgOutput {
            x_o,
            p_h,
            p_v,
            a_h,
            a_v,
            a_d,
        })
    }

    /// The same module with the horizontal and vertical parameter groups
    /// exchanged and the fusion kernel transposed; applied to a spatially
    /// transposed input it yields the transposed output.
    pub fn transposed(&self) -> Self {
        let w = &self.fuse.weight;
        let (k, cin, cout) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let mut data = w.data().to_vec();
        for ky in 0..k {
            for kx in 0..k {
                let dst = (ky * k + kx) * cin * cout;
                let src = (kx * k + ky) * cin * cout;
                data[dst..dst + cin * cout].copy_from_slice(&w.data()[src..src + cin * cout]);
            }
        }
        let mut out = self.clone();
        core::mem::swap(&mut out.reduce_h, &mut out.reduce_v);
        core::mem::swap(&mut out.reduce_h_bn, &mut out.reduce_v_bn);
        core::mem::swap(&mut out.dist_head_h, &mut out.dist_head_v);
        core::mem::swap(&mut out.gate_h, &mut out.gate_v);
        core::mem::swap(&mut out.alpha, &mut out.beta);
        out.fuse.weight = Tensor::new(w.shape(), data).expect("same shape");
        out
    }

    pub fn cast<U: Real>(&self) -> CdgParams<U> {
        CdgParams {
            channels: self.channels,
            classes: self.classes,
            reduce_h: self.reduce_h.cast(),
            reduce_h_bn: self.reduce_h_bn.cast(),
            reduce_v: self.reduce_v.cast(),
            reduce_v_bn: self.reduce_v_bn.cast(),
            dist_head_h: self.dist_head_h.cast(),
            dist_head_v: self.dist_head_v.cast(),
            gate_h: self.gate_h.cast(),
            gate_v: self.gate_v.cast(),
            alpha: self.alpha.cast(),
            beta: self.beta.cast(),
            fuse: self.fuse.cast(),
            fuse_bn: self.fuse_bn.cast(),
        }
    }
}

impl<T: Real> Params<T> for CdgParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Role)) {
        let p = |name: &str| join(prefix, name);
        self.reduce_h.visit(&p("reduce_h"), f);
        self.reduce_h_bn.visit(&p("reduce_h_bn"), f);
        self.reduce_v.visit(&p("reduce_v"), f);
        self.reduce_v_bn.visit(&p("reduce_v_bn"), f);
        self.dist_head_h.visit(&p("dist_head_h"), f);
        self.dist_head_v.visit(&p("dist_head_v"), f);
        self.gate_h.visit(&p("gate_h"), f);
        self.gate_v.visit(&p("gate_v"), f);
        f(&p("alpha"), &self.alpha, Role::Trainable);
        f(&p("beta"), &self.beta, Role::Trainable);
        self.fuse.visit(&p("fuse"), f);
        self.fuse_bn.visit(&p("fuse_bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        let p = |name: &str| join(prefix, name);
        self.reduce_h.visit_mut(&p("reduce_h"), f);
        self.reduce_h_bn.visit_mut(&p("reduce_h_bn"), f);
        self.reduce_v.visit_mut(&p("reduce_v"), f);
        self.reduce_v_bn.visit_mut(&p("reduce_v_bn"), f);
        self.dist_head_h.visit_mut(&p("dist_head_h"), f);
        self.dist_head_v.visit_mut(&p("dist_head_v"), f);
        self.gate_h.visit_mut(&p("gate_h"), f);
        self.gate_v.visit_mut(&p("gate_v"), f);
        f(&p("alpha"), &mut self.alpha, Role::Trainable);
        f(&p("beta"), &mut self.beta, Role::Trainable);
        self.fuse.visit_mut(&p("fuse"), f);
        self.fuse_bn.visit_mut(&p("fuse_bn"), f);
    }
}

/// Element counts of the CDG guidance state and of a pixel-pair attention matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GuidanceMemory {
    pub cdg: u64,
    pub attention_reference: u64,
}

pub fn guidance_memory(height: u64, width: u64, channels: u64) -> GuidanceMemory {
    let pixels = height * width;
    GuidanceMemory {
        cdg: (height + width) * channels,
        attention_reference: pixels * pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::Rng;

    fn random_input(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_shapes() {
        let p: CdgParams<f32> = init_params(8, 4, 0).unwrap();
        assert_eq!(p.dist_head_h.weight.shape(), &[3, 4, 4]);
        assert_eq!(p.gate_h.weight.shape(), &[7, 4, 8]);
        assert_eq!(p.fuse.weight.shape(), &[3, 3, 16, 8]);
        assert_eq!(p.reduce_v.weight.shape(), &[3, 8, 4]);
        assert_eq!((p.alpha.item(), p.beta.item()), (0.5, 0.5));
        assert!(init_params::<f32>(7, 4, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a: CdgParams<f32> = init_params(8, 4, 3).unwrap();
        let b: CdgParams<f32> = init_params(8, 4, 3).unwrap();
        let c: CdgParams<f32> = init_params(8, 4, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f32 / 24.0).sqrt();
        assert!(a.reduce_h.weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn forward_shapes() {
        let p: CdgParams<f64> = init_params(8, 4, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random_input(0, &[8, 6, 8]));
        let out = cdg_forward(&mut g, x, &p, Mode::Train).unwrap();
        assert_eq!(g.value(out.x_o).shape(), &[8, 6, 8]);
        assert_eq!(g.value(out.p_h).shape(), &[6, 4]);
        assert_eq!(g.value(out.p_v).shape(), &[8, 4]);
        assert_eq!(g.value(out.a_d).shape(), &[8, 6, 8]);
    }

    #[test]
    fn zero_pipeline_is_half_gates_and_zero_output() {
        let mut p: CdgParams<f64> = init_params(8, 4, 1).unwrap();
        p.visit_mut("", &mut |name, t, role| {
            let bn = name.contains("_bn.");
            if role == Role::Trainable && !bn && !name.ends_with("alpha") && !name.ends_with("beta")
            {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let mut g = Graph::new();
        let x = g.constant(random_input(2, &[8, 8, 8]));
        let out = cdg_forward(&mut g, x, &p, Mode::Train).unwrap();
        for id in [out.p_h, out.p_v, out.a_h, out.a_v, out.a_d] {
            assert!(g.value(id).data().iter().all(|&v| v == 0.5));
        }
        assert!(g.value(out.x_o).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_input_gives_position_independent_interior_rows() {
        let p: CdgParams<f64> = init_params(8, 4, 5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[12, 12, 8], 0.7));
        let out = cdg_forward(&mut g, x, &p, Mode::Eval).unwrap();
        for id in [out.p_h, out.p_v] {
            let rows: Vec<_> = g.value(id).data().chunks(4).map(<[f64]>::to_vec).collect();
            for r in &rows[3..rows.len() - 3] {
                assert_eq!(r, &rows[3]);
            }
        }
    }

    #[test]
    fn sigmoid_branches_in_open_unit_interval() {
        let p: CdgParams<f32> = init_params(8, 4, 9).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random_input(9, &[8, 8, 8]).cast());
        let out = cdg_forward(&mut g, x, &p, Mode::Train).unwrap();
        for id in [out.p_h, out.p_v, out.a_h, out.a_v] {
            assert!(g.value(id).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn channel_mismatch() {
        let p: CdgParams<f64> = init_params(8, 4, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 4, 6]));
        assert!(matches!(
            cdg_forward(&mut g, x, &p, Mode::Train),
            Err(Error::Dim {
                axis: "channels",
                ..
            })
        ));
    }

    #[test]
    fn memory_formulas() {
        assert_eq!(
            guidance_memory(30, 30, 512),
            GuidanceMemory {
                cdg: 30720,
                attention_reference: 810_000
            }
        );
        assert_eq!(
            guidance_memory(1, 1, 16),
            GuidanceMemory {
                cdg: 32,
                attention_reference: 1
            }
        );
        let ratios: Vec<f64> = [8u64, 16, 32]
            .iter()
            .map(|&s| {
                let m = guidance_memory(s, s, 16);
                m.attention_reference as f64 / m.cdg as f64
            })
            .collect();
        assert!(ratios.windows(2).all(|w| w[1] > w[0]));
    }
}
