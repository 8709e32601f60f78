use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, NodeId};
use crate::error::{invalid, Result};
use crate::labels::{edge_label, LabelMap};
use crate::loss::{cdg_loss_node, cross_entropy, total_loss_node, weighted_edge_ce, LossWeights};
use crate::metrics::Confusion;
use crate::nn::absorb_batch_stats;
use crate::tensor::Tensor;

use super::data::{augment, Augment, Sample};
use super::infer::argmax_labels;
use super::net::{NetSpec, ToyNet, OUTPUT_STRIDE};
use super::optim::{poly_lr, Sgd};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub crop_size: usize,
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Image scales averaged at inference time.
    pub scales: Vec<f64>,
    pub loss: LossWeights,
    pub channels: usize,
    pub cdg_enabled: bool,
    pub edge_head_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 4,
            base_lr: 3e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            crop_size: 64,
            scale_range: (0.5, 1.25),
            flip_prob: 0.5,
            scales: vec![0.75, 1.0, 1.25],
            loss: LossWeights::default(),
            channels: 16,
            cdg_enabled: true,
            edge_head_enabled: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be positive"));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(OUTPUT_STRIDE) {
            return Err(invalid(alloc::format!(
                "crop_size must be a positive multiple of {OUTPUT_STRIDE}"
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(invalid("scale range must satisfy 0 < low <= high"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid("flip probability must lie in [0, 1]"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid(
                "inference scales must be a non-empty list of positive values",
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn net_spec(&self, classes: usize) -> NetSpec {
        NetSpec {
            channels: self.channels,
            classes,
            cdg_enabled: self.cdg_enabled,
            edge_head_enabled: self.edge_head_enabled,
        }
    }

    fn augment(&self) -> Augment {
        Augment {
            crop_size: self.crop_size,
            scale_range: self.scale_range,
            flip_prob: self.flip_prob,
        }
    }
}

/// Mean loss terms over one epoch's iterations, plus training-batch mIoU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the epoch's first iteration.
    pub lr: f64,
    pub total: f64,
    pub parsing: f64,
    pub edge: f64,
    pub cdg: f64,
    pub train_miou: f64,
}

/// Normalized ground-truth distributions of `label` nearest-neighbour
/// downscaled by `factor`, as `[W / factor, N]` and `[H / factor, N]` tensors.
pub fn feature_distributions(
    label: &LabelMap,
    factor: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, v) = label.downscale(factor)?.distributions(true);
    Ok((h.to_tensor(), v.to_tensor()))
}

struct StepLosses {
    total: f64,
    parsing: f64,
    edge: f64,
    cdg: f64,
}

struct BatchNodes {
    total: NodeId,
    parsing: NodeId,
    edge: Option<NodeId>,
    cdg: Option<NodeId>,
    logits: NodeId,
}

/// Builds the full training graph for one batch.
fn batch_graph(
    net: &ToyNet<f32>,
    g: &mut Graph<f32>,
    images: &Tensor<f32>,
    labels: &[LabelMap],
    w: &LossWeights,
) -> Result<BatchNodes> {
    let out = net.forward(g, images, Mode::Train)?;
    let parsing = cross_entropy(g, out.logits, labels, None)?;
    let edge = match out.edge_logits {
        Some(e) => {
            let edges: Vec<Tensor<f32>> = labels.iter().map(edge_label).collect();
            Some(weighted_edge_ce(g, e, &edges)?)
        }
        None => None,
    };
    let cdg = match &out.cdg {
        Some(c) if w.gamma != 0.0 => {
            let mut gh = Vec::with_capacity(labels.len());
            let mut gv = Vec::with_capacity(labels.len());
            for l in labels {
                let (h, v) = feature_distributions(l, OUTPUT_STRIDE)?;
                gh.push(h);
                gv.push(v);
            }
            Some(cdg_loss_node(
                g,
                c.p_h,
                c.p_v,
                Tensor::stack(&gh)?,
                Tensor::stack(&gv)?,
                w,
            )?)
        }
        _ => None,
    };
    let total = total_loss_node(g, parsing, edge, cdg, w)?;
    Ok(BatchNodes {
        total,
        parsing,
        edge,
        cdg,
        logits: out.logits,
    })
}

/// Trains a fresh network on `dataset`. Runs are bit-for-bit reproducible for a
/// fixed config and dataset. A non-finite gradient or weight aborts training.
pub fn train(config: &TrainConfig, dataset: &[Sample]) -> Result<(ToyNet<f32>, Vec<EpochLog>)> {
    train_with(config, dataset, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &TrainConfig,
    dataset: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ToyNet<f32>, Vec<EpochLog>)> {
    config.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| invalid("training set is empty"))?;
    let classes = first.label.classes();
    if dataset.iter().any(|s| s.label.classes() != classes) {
        return Err(invalid("samples disagree on the class count"));
    }
    let mut net = ToyNet::init(config.net_spec(classes), config.seed)?;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let aug = config.augment();
    let iters_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total_iters = iters_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut iter = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = StepLosses {
            total: 0.0,
            parsing: 0.0,
            edge: 0.0,
            cdg: 0.0,
        };
        let mut confusion = Confusion::new(classes);
        let epoch_lr = poly_lr(config.base_lr, iter, total_iters, config.poly_power)?;
        for batch in order.chunks(config.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let (img, lab) = augment(&dataset[i], &aug, &mut rng)?;
                images.push(img);
                labels.push(lab);
            }
            let images = Tensor::stack(&images)?;
            let mut g = Graph::new();
            let BatchNodes {
                total,
                parsing,
                edge,
                cdg,
                logits,
            } = batch_graph(&net, &mut g, &images, &labels, &config.loss)?;
            g.value(total).check_finite("training loss")?;
            let grads = g.backward(total)?;
            let lr = poly_lr(config.base_lr, iter, total_iters, config.poly_power)?;
            sgd.step(&mut net, &grads, lr)?;
            absorb_batch_stats(&mut net, &g);

            let scalar = |n: Option<NodeId>| n.map_or(0.0, |n| g.value(n).item() as f64);
            sums.total += scalar(Some(total));
            sums.parsing += scalar(Some(parsing));
            sums.edge += scalar(edge);
            sums.cdg += scalar(cdg);
            for (pred, gt) in argmax_labels(g.value(logits))?.iter().zip(&labels) {
                confusion.accumulate(pred, gt)?;
            }
            iter += 1;
        }
        let k = iters_per_epoch as f64;
        let log = EpochLog {
            epoch,
            lr: epoch_lr,
            total: sums.total / k,
            parsing: sums.parsing / k,
            edge: sums.edge / k,
            cdg: sums.cdg / k,
            train_miou: confusion.report().mean_iou,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((net, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::synth_dataset;

    fn small() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            crop_size: 16,
            channels: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn feature_distributions_stay_normalized() {
        let s = &synth_dataset(0, 1, 32, 32, 5).unwrap()[0];
        let (h, v) = feature_distributions(&s.label, 4).unwrap();
        assert_eq!((h.shape(), v.shape()), (&[8, 5][..], &[8, 5][..]));
        for x in h.data().iter().chain(v.data()) {
            assert!((0.0..=1.0).contains(x));
        }
        // Per position, the classes of a column sum to one.
        for row in h.data().chunks(5) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn deterministic_runs() {
        let data = synth_dataset(1, 3, 16, 16, 5).unwrap();
        let (a, la) = train(&small(), &data).unwrap();
        let (b, lb) = train(&small(), &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 2);
        assert_eq!(la[0].lr, 3e-3);
    }

    #[test]
    fn rejects_bad_configs() {
        let data = synth_dataset(1, 1, 16, 16, 5).unwrap();
        assert!(train(
            &TrainConfig {
                crop_size: 18,
                ..small()
            },
            &data
        )
        .is_err());
        assert!(train(
            &TrainConfig {
                epochs: 0,
                ..small()
            },
            &data
        )
        .is_err());
        assert!(train(
            &TrainConfig {
                scales: vec![],
                ..small()
            },
            &data
        )
        .is_err());
        assert!(train(
            &TrainConfig {
                scales: vec![1.0, -0.5],
                ..small()
            },
            &data
        )
        .is_err());
        assert!(train(&small(), &[]).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let data = synth_dataset(1, 2, 16, 16, 5).unwrap();
        let cfg = TrainConfig {
            base_lr: 1e30,
            epochs: 3,
            ..small()
        };
        let err = train(&cfg, &data).unwrap_err();
        assert!(matches!(err, crate::Error::NonFinite(_)), "{err:?}");
    }
}
