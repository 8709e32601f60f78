//! Training objectives.
//!
//! Total loss: `τ·(L_parsing + L_edge) + γ·l_CDG`, where
//! `l_CDG = θ·MSE(P_h, G_Dh) + φ·MSE(P_v, G_Dv)`.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::error::{invalid, Error, Result};
use crate::labels::{ClassDistribution, LabelMap};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Horizontal CDG term.
    pub theta: f64,
    /// Vertical CDG term.
    pub phi: f64,
    /// Baseline (parsing + edge) term.
    pub tau: f64,
    /// Whole CDG loss.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            theta: 1.0,
            phi: 1.0,
            tau: 1.0,
            gamma: 40.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta", self.theta),
            ("phi", self.phi),
            ("tau", self.tau),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss weight {name}")));
            }
        }
        Ok(())
    }
}

fn mse(a: &ClassDistribution, b: &ClassDistribution) -> Result<f64> {
    if a.axis != b.axis || a.len != b.len || a.classes != b.classes {
        return Err(invalid(format!(
            "distribution shapes differ: {} {}x{} vs {} {}x{}",
            a.axis.name(),
            a.len,
            a.classes,
            b.axis.name(),
            b.len,
            b.classes
        )));
    }
    let s: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(p, g)| (p - g) * (p - g))
        .sum();
    Ok(s / a.values.len() as f64)
}

/// `θ·l_h + φ·l_v` with both terms mean-squared errors over their `L x N` grid.
pub fn cdg_loss(
    p_h: &ClassDistribution,
    p_v: &ClassDistribution,
    g_h: &ClassDistribution,
    g_v: &ClassDistribution,
    w: &LossWeights,
) -> Result<f64> {
    for d in [p_h, p_v, g_h, g_v] {
        d.check_normalized()?;
    }
    Ok(w.theta * mse(p_h, g_h)? + w.phi * mse(p_v, g_v)?)
}

/// Graph form of [`cdg_loss`] against constant targets shaped like `p_h` / `p_v`.
pub fn cdg_loss_node<T: Real>(
    g: &mut Graph<T>,
    p_h: NodeId,
    p_v: NodeId,
    g_h: Tensor<T>,
    g_v: Tensor<T>,
    w: &LossWeights,
) -> Result<NodeId> {
    for t in [&g_h, &g_v] {
        if t.data().iter().any(|v| *v < T::zero() || *v > T::one()) {
            return Err(invalid("CDG targets must be normalized to [0, 1]"));
        }
    }
    let lh = g.mse(p_h, g_h)?;
    let lv = g.mse(p_v, g_v)?;
    let lh = g.scale(lh, T::of(w.theta))?;
    let lv = g.scale(lv, T::of(w.phi))?;
    g.add(lh, lv)
}

/// Mean pixel cross-entropy of `logits` (`[H, W, N]` or `[B, H, W, N]`) against one
/// label map per batch item. Pixels equal to `ignore` do not contribute.
pub fn cross_entropy<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &[LabelMap],
    ignore: Option<u8>,
) -> Result<NodeId> {
    check_spatial(g.value(logits).shape(), labels, "cross_entropy")?;
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for l in labels {
        for &p in l.pixels() {
            let keep = ignore != Some(p);
            targets.push(if keep { p as u32 } else { 0 });
            weights.push(if keep { T::one() } else { T::zero() });
        }
    }
    let kept = weights.iter().filter(|w| **w != T::zero()).count();
    if kept == 0 {
        return Err(invalid("cross_entropy: every pixel is ignored"));
    }
    g.weighted_cross_entropy(logits, targets, weights, T::of(kept as f64))
}

/// Class-balanced edge cross-entropy. For each image, edge pixels are weighted by
/// the non-edge fraction and non-edge pixels by the edge fraction; the result is
/// the mean over all pixels of the batch.
pub fn weighted_edge_ce<T: Real>(
    g: &mut Graph<T>,
    edge_logits: NodeId,
    edges: &[Tensor<T>],
) -> Result<NodeId> {
    let shape = g.value(edge_logits).shape().to_vec();
    if shape.last() != Some(&2) {
        return Err(Error::Dim {
            op: "weighted_edge_ce",
            axis: "channels",
            expected: 2,
            found: *shape.last().unwrap(),
        });
    }
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for e in edges {
        let pos = e.data().iter().filter(|v| **v != T::zero()).count();
        let total = e.numel();
        let w_pos = T::of((total - pos) as f64 / total as f64);
        let w_neg = T::of(pos as f64 / total as f64);
        for &v in e.data() {
            let is_edge = v != T::zero();
            targets.push(is_edge as u32);
            weights.push(if is_edge { w_pos } else { w_neg });
        }
    }
    let n = targets.len();
    if n * 2 != g.value(edge_logits).numel() {
        return Err(Error::Dim {
            op: "weighted_edge_ce",
            axis: "pixels",
            expected: g.value(edge_logits).numel() / 2,
            found: n,
        });
    }
    g.weighted_cross_entropy(edge_logits, targets, weights, T::of(n as f64))
}

/// `τ·(parsing + edge) + γ·cdg`; `edge` is ignored unless `edge_enabled`.
pub fn total_loss(
    parsing_ce: f64,
    edge_ce: f64,
    cdg: f64,
    w: &LossWeights,
    edge_enabled: bool,
) -> f64 {
    let baseline = parsing_ce + if edge_enabled { edge_ce } else { 0.0 };
    w.tau * baseline + w.gamma * cdg
}

/// Graph form of [`total_loss`]. Terms that are absent or weighted by zero are
/// left out of the graph entirely.
pub fn total_loss_node<T: Real>(
    g: &mut Graph<T>,
    parsing_ce: NodeId,
    edge_ce: Option<NodeId>,
    cdg: Option<NodeId>,
    w: &LossWeights,
) -> Result<NodeId> {
    let baseline = match edge_ce {
        Some(e) => g.add(parsing_ce, e)?,
        None => parsing_ce,
    };
    let mut total = g.scale(baseline, T::of(w.tau))?;
    if let Some(c) = cdg.filter(|_| w.gamma != 0.0) {
        let c = g.scale(c, T::of(w.gamma))?;
        total = g.add(total, c)?;
    }
    Ok(total)
}

fn check_spatial(shape: &[usize], labels: &[LabelMap], op: &'static str) -> Result<()> {
    let (b, h, w) = match *shape {
        [h, w, _] => (1, h, w),
        [b, h, w, _] => (b, h, w),
        _ => {
            return Err(Error::Rank {
                op,
                expected: "[H, W, N] or [B, H, W, N]",
                found: shape.to_vec(),
            })
        }
    };
    if labels.len() != b {
        return Err(Error::Dim {
            op,
            axis: "batch",
            expected: b,
            found: labels.len(),
        });
    }
    for l in labels {
        if l.height() != h {
            return Err(Error::Dim {
                op,
                axis: "height",
                expected: h,
                found: l.height(),
            });
        }
        if l.width() != w {
            return Err(Error::Dim {
                op,
                axis: "width",
                expected: w,
                found: l.width(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::DistAxis;
    use alloc::vec;

    fn dist(axis: DistAxis, len: usize, n: usize, v: &[f64]) -> ClassDistribution {
        ClassDistribution::new(axis, len, n, v.to_vec(), true).unwrap()
    }

    #[test]
    fn cdg_loss_examples() {
        let gh = dist(DistAxis::Horizontal, 1, 2, &[0.5, 1.0]);
        let ph = dist(DistAxis::Horizontal, 1, 2, &[0.0, 0.0]);
        let gv = dist(DistAxis::Vertical, 2, 2, &[0.25, 0.75, 1.0, 0.0]);
        let w = LossWeights {
            theta: 1.0,
            phi: 1.0,
            ..Default::default()
        };
        assert_eq!(cdg_loss(&gh, &gv, &gh, &gv, &w).unwrap(), 0.0);
        let l = cdg_loss(&ph, &gv, &gh, &gv, &w).unwrap();
        assert!((l - 0.625).abs() < 1e-12);
        let w2 = LossWeights {
            theta: 2.0,
            phi: 0.0,
            ..w
        };
        let pv = dist(DistAxis::Vertical, 2, 2, &[0.0; 4]);
        let lh = cdg_loss(&ph, &gv, &gh, &gv, &w).unwrap();
        assert_eq!(cdg_loss(&ph, &pv, &gh, &gv, &w2).unwrap(), 2.0 * lh);
    }

    #[test]
    fn cdg_loss_rejects_bad_inputs() {
        let w = LossWeights::default();
        let gh = dist(DistAxis::Horizontal, 1, 2, &[0.5, 1.0]);
        let gv = dist(DistAxis::Vertical, 2, 2, &[0.0; 4]);
        let raw =
            ClassDistribution::new(DistAxis::Horizontal, 1, 2, vec![3.0, 1.0], false).unwrap();
        assert!(cdg_loss(&gh, &gv, &raw, &gv, &w).is_err());
        let wrong = dist(DistAxis::Horizontal, 2, 2, &[0.0; 4]);
        assert!(cdg_loss(&wrong, &gv, &gh, &gv, &w).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let label = LabelMap::new(1, 2, 4, vec![0, 3]).unwrap();
        let mut g = Graph::<f64>::new();
        let zeros = g.constant(Tensor::zeros(&[1, 2, 4]));
        let ce = cross_entropy(&mut g, zeros, core::slice::from_ref(&label), None).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 8];
        logits[0] = 20.0;
        logits[7] = 20.0;
        let sharp = g.constant(Tensor::from_f64(&[1, 2, 4], &logits).unwrap());
        let ce = cross_entropy(&mut g, sharp, core::slice::from_ref(&label), None).unwrap();
        assert!(g.value(ce).item() < 1e-8);

        // Ignoring class 0 leaves only the second pixel.
        let mixed =
            g.constant(Tensor::from_f64(&[1, 2, 4], &[5., 1., 2., 3., 0.5, -1., 2., 1.]).unwrap());
        let ce = cross_entropy(&mut g, mixed, core::slice::from_ref(&label), Some(0)).unwrap();
        let row = [0.5f64, -1., 2., 1.];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((g.value(ce).item() - (lse - 1.0)).abs() < 1e-12);

        let all_bg = LabelMap::filled(1, 2, 4, 0).unwrap();
        assert!(cross_entropy(&mut g, mixed, &[all_bg], Some(0)).is_err());
    }

    #[test]
    fn edge_ce_examples() {
        let mut g = Graph::<f64>::new();
        let edges = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let sharp = g.constant(Tensor::from_f64(&[1, 2, 2], &[-20., 20., 20., -20.]).unwrap());
        let l = weighted_edge_ce(&mut g, sharp, core::slice::from_ref(&edges)).unwrap();
        assert!(g.value(l).item() < 1e-6);

        let none = Tensor::<f64>::zeros(&[1, 2]);
        let any = g.constant(Tensor::from_f64(&[1, 2, 2], &[3., -1., 0.2, 4.]).unwrap());
        let l = weighted_edge_ce(&mut g, any, core::slice::from_ref(&none)).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        // Balanced map: both weights are 0.5.
        let l = weighted_edge_ce(&mut g, any, core::slice::from_ref(&edges)).unwrap();
        let plain = g
            .weighted_cross_entropy(any, vec![1, 0], vec![1.0, 1.0], 2.0)
            .unwrap();
        assert!((g.value(l).item() - 0.5 * g.value(plain).item()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 0.0, 0.1, &w, true) - 5.0).abs() < 1e-12);
        let w0 = LossWeights { gamma: 0.0, ..w };
        assert_eq!(total_loss(0.7, 0.2, 9.0, &w0, true), 0.7 + 0.2);
        assert_eq!(total_loss(0.7, 0.2, 9.0, &w0, false), 0.7);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w, true), 0.0);
    }

    #[test]
    fn total_node_matches_scalar() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::scalar(1.25));
        let e = g.constant(Tensor::scalar(0.5));
        let c = g.constant(Tensor::scalar(0.03));
        let w = LossWeights {
            tau: 0.5,
            gamma: 40.0,
            ..Default::default()
        };
        let t = total_loss_node(&mut g, p, Some(e), Some(c), &w).unwrap();
        assert!((g.value(t).item() - total_loss(1.25, 0.5, 0.03, &w, true)).abs() < 1e-12);
    }
}
