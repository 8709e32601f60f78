use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, NodeId};
use crate::cdg::{CdgOutput, CdgParams};
use crate::error::{invalid, Error, Result};
use crate::nn::{BatchNorm, Conv2d, Params, Role};
use crate::tensor::{Real, Tensor};

/// Spatial reduction of the encoder.
pub const OUTPUT_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetSpec {
    /// Feature channels `C` entering the CDG module (even).
    pub channels: usize,
    pub classes: usize,
    pub cdg_enabled: bool,
    pub edge_head_enabled: bool,
}

/// Two stride-2 conv blocks, an optional CDG module, a 3x3 classifier and an
/// optional 3x3 edge head; logits are bilinearly upsampled back to the input size.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet<T = f32> {
    pub spec: NetSpec,
    pub enc1: Conv2d<T>,
    pub enc1_bn: BatchNorm<T>,
    pub enc2: Conv2d<T>,
    pub enc2_bn: BatchNorm<T>,
    pub cdg: Option<CdgParams<T>>,
    pub decoder: Conv2d<T>,
    pub edge_head: Option<Conv2d<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// Encoder features `X_i`.
    pub features: NodeId,
    pub cdg: Option<CdgOutput>,
    /// `[.., H, W, N]` at input resolution.
    pub logits: NodeId,
    /// `[.., H, W, 2]` at input resolution.
    pub edge_logits: Option<NodeId>,
}

fn libm_ln(x: f64) -> f64 {
    num_traits::Float::ln(x)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Maps `[0, 1]` pixel intensities to `[-1, 1]`.
pub fn normalize_image<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    image.map(|v| (v - T::of(0.5)) * T::of(2.0))
}

impl<T: Real> ToyNet<T> {
    /// Each component draws from its own random stream, so toggling the CDG module
    /// or the edge head leaves the remaining initial weights unchanged.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        let c = spec.channels;
        if c < 2 || !c.is_multiple_of(2) {
            return Err(invalid(format!("channels must be even and >= 2, got {c}")));
        }
        if spec.classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        let mut enc = stream(seed, 0);
        let mut cdg = if spec.cdg_enabled {
            Some(CdgParams::init(c, spec.classes, &mut stream(seed, 1))?)
        } else {
            None
        };
        if let Some(p) = cdg.as_mut() {
            let prior = T::of(libm_ln(1.0 / (spec.classes as f64 - 1.0)));
            for head in [&mut p.dist_head_h, &mut p.dist_head_v] {
                head.bias.data_mut().iter_mut().for_each(|b| *b = prior);
            }
        }
        Ok(ToyNet {
            spec,
            enc1: Conv2d::init(&mut enc, 3, 3, c / 2, 2),
            enc1_bn: BatchNorm::new(c / 2),
            enc2: Conv2d::init(&mut enc, 3, c / 2, c, 2),
            enc2_bn: BatchNorm::new(c),
            cdg,
            decoder: Conv2d::init(&mut stream(seed, 2), 3, c, spec.classes, 1),
            edge_head: spec
                .edge_head_enabled
                .then(|| Conv2d::init(&mut stream(seed, 3), 3, c, 2, 1)),
        })
    }

    /// Builds the network on an `[H, W, 3]` or `[B, H, W, 3]` image tensor with
    /// intensities in `[0, 1]`; `H` and `W` must be multiples of 4.
    pub fn forward(&self, g: &mut Graph<T>, image: &Tensor<T>, mode: Mode) -> Result<NetOutput> {
        let (h, w) = match *image.shape() {
            [h, w, 3] | [_, h, w, 3] => (h, w),
            _ => {
                return Err(Error::Rank {
                    op: "forward",
                    expected: "[H, W, 3] or [B, H, W, 3]",
                    found: image.shape().to_vec(),
                })
            }
        };
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(invalid(format!(
                "image size {h}x{w} is not divisible by {OUTPUT_STRIDE}"
            )));
        }
        let x = g.constant(normalize_image(image));
        let x = self.enc1.forward(g, "encoder.conv1", x)?;
        let x = self.enc1_bn.forward(g, "encoder.bn1", x, mode)?;
        let x = g.relu(x)?;
        let x = self.enc2.forward(g, "encoder.conv2", x)?;
        let x = self.enc2_bn.forward(g, "encoder.bn2", x, mode)?;
        let features = g.relu(x)?;

        let (head_in, cdg) = match &self.cdg {
            Some(p) => {
                let out = p.forward(g, "cdg", features, mode)?;
                (out.x_o, Some(out))
            }
            None => (features, None),
        };
        let logits = self.decoder.forward(g, "decoder", head_in)?;
        let logits = g.resize_bilinear(logits, h, w)?;
        let edge_logits = match &self.edge_head {
            Some(e) => {
                let l = e.forward(g, "edge", head_in)?;
                Some(g.resize_bilinear(l, h, w)?)
            }
            None => None,
        };
        Ok(NetOutput {
            features,
            cdg,
            logits,
            edge_logits,
        })
    }

    pub fn cast<U: Real>(&self) -> ToyNet<U> {
        ToyNet {
            spec: self.spec,
            enc1: self.enc1.cast(),
            enc1_bn: self.enc1_bn.cast(),
            enc2: self.enc2.cast(),
            enc2_bn: self.enc2_bn.cast(),
            cdg: self.cdg.as_ref().map(CdgParams::cast),
            decoder: self.decoder.cast(),
            edge_head: self.edge_head.as_ref().map(Conv2d::cast),
        }
    }

    /// Rebuilds a network from the tensors produced by [`Params::named_tensors`].
    /// The architecture is inferred from the names and shapes present.
    pub fn from_named(tensors: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let shape_of = |name: &str| {
            tensors
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::UnknownParam(name.into()))
        };
        let enc2 = shape_of("encoder.conv2.weight")?;
        let dec = shape_of("decoder.weight")?;
        if enc2.len() != 4 || dec.len() != 4 {
            return Err(invalid("malformed encoder or decoder weight"));
        }
        let spec = NetSpec {
            channels: enc2[3],
            classes: dec[3],
            cdg_enabled: tensors.contains_key("cdg.alpha"),
            edge_head_enabled: tensors.contains_key("edge.weight"),
        };
        let mut net = ToyNet::init(spec, 0)?;
        let mut used = 0;
        let mut failure = None;
        net.visit_mut("", &mut |name, t, _| match tensors.get(name) {
            Some(src) if src.shape() == t.shape() => {
                *t = src.clone();
                used += 1;
            }
            Some(src) => {
                failure.get_or_insert_with(|| {
                    invalid(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    ))
                });
            }
            None => {
                failure.get_or_insert_with(|| Error::UnknownParam(name.into()));
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if used != tensors.len() {
            let known: BTreeMap<String, ()> = net
                .named_tensors("")
                .into_iter()
                .map(|(n, _, _)| (n, ()))
                .collect();
            let extra = tensors
                .keys()
                .find(|k| !known.contains_key(*k))
                .cloned()
                .unwrap_or_default();
            return Err(invalid(format!("unexpected tensor `{extra}`")));
        }
        Ok(net)
    }
}

impl<T: Real> Params<T> for ToyNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, Role)) {
        let p = |n: &str| crate::nn::join(prefix, n);
        self.enc1.visit(&p("encoder.conv1"), f);
        self.enc1_bn.visit(&p("encoder.bn1"), f);
        self.enc2.visit(&p("encoder.conv2"), f);
        self.enc2_bn.visit(&p("encoder.bn2"), f);
        if let Some(c) = &self.cdg {
            c.visit(&p("cdg"), f);
        }
        self.decoder.visit(&p("decoder"), f);
        if let Some(e) = &self.edge_head {
            e.visit(&p("edge"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, Role)) {
        let p = |n: &str| crate::nn::join(prefix, n);
        self.enc1.visit_mut(&p("encoder.conv1"), f);
        self.enc1_bn.visit_mut(&p("encoder.bn1"), f);
        self.enc2.visit_mut(&p("encoder.conv2"), f);
        self.enc2_bn.visit_mut(&p("encoder.bn2"), f);
        if let Some(c) = &mut self.cdg {
            c.visit_mut(&p("cdg"), f);
        }
        self.decoder.visit_mut(&p("decoder"), f);
        if let Some(e) = &mut self.edge_head {
            e.visit_mut(&p("edge"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(cdg: bool, edge: bool) -> NetSpec {
        NetSpec {
            channels: 8,
            classes: 5,
            cdg_enabled: cdg,
            edge_head_enabled: edge,
        }
    }

    #[test]
    fn logits_match_input_size() {
        let net: ToyNet<f32> = ToyNet::init(spec(true, true), 0).unwrap();
        let mut g = Graph::new();
        let out = net
            .forward(&mut g, &Tensor::full(&[2, 16, 12, 3], 0.3), Mode::Train)
            .unwrap();
        assert_eq!(g.value(out.logits).shape(), &[2, 16, 12, 5]);
        assert_eq!(g.value(out.edge_logits.unwrap()).shape(), &[2, 16, 12, 2]);
        assert_eq!(g.value(out.features).shape(), &[2, 4, 3, 8]);
        assert!(net
            .forward(&mut g, &Tensor::zeros(&[10, 12, 3]), Mode::Eval)
            .is_err());
    }

    #[test]
    fn encoder_independent_of_cdg_switch() {
        let a: ToyNet<f32> = ToyNet::init(spec(true, false), 11).unwrap();
        let b: ToyNet<f32> = ToyNet::init(spec(false, false), 11).unwrap();
        assert_eq!(
            (&a.enc1, &a.enc2, &a.decoder),
            (&b.enc1, &b.enc2, &b.decoder)
        );
        let img =
            Tensor::new(&[8, 8, 3], (0..192).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let (mut ga, mut gb) = (Graph::new(), Graph::new());
        let oa = a.forward(&mut ga, &img, Mode::Eval).unwrap();
        let ob = b.forward(&mut gb, &img, Mode::Eval).unwrap();
        assert_eq!(ga.value(oa.features), gb.value(ob.features));
        assert_ne!(ga.value(oa.logits), gb.value(ob.logits));
    }

    #[test]
    fn named_round_trip() {
        let net: ToyNet<f32> = ToyNet::init(spec(true, true), 4).unwrap();
        let map: BTreeMap<String, Tensor<f32>> = net
            .named_tensors("")
            .into_iter()
            .map(|(n, t, _)| (n, t))
            .collect();
        assert_eq!(ToyNet::from_named(&map).unwrap(), net);

        let mut extra = map.clone();
        extra.insert("bogus".into(), Tensor::zeros(&[1]));
        assert!(ToyNet::from_named(&extra).is_err());
        let mut missing = map;
        missing.remove("cdg.fuse_bn.gamma");
        assert!(ToyNet::from_named(&missing).is_err());
    }
}
