//! Greyscale renderings of class distributions and CDG activations.

use cdg_core::labels::{ClassDistribution, DistAxis};
use cdg_core::pipeline::ToyNet;
use cdg_core::{Graph, Mode, Tensor};

use crate::error::Result;
use crate::pnm::Raster;

/// `floor(255 p + 0.5)`: 0.5 maps to 128 and 1.0 to 255.
pub fn quantize(p: f64) -> u8 {
    (255.0 * p + 0.5).floor() as u8
}

fn check_unit(values: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    for (i, v) in values.enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(cdg_core::Error::Invalid(format!(
                "{what} value {v} at index {i} outside [0, 1]"
            ))
            .into());
        }
    }
    Ok(())
}

/// An `L x N` strip: one row per position, one column per class.
pub fn distribution(d: &ClassDistribution) -> Result<Raster> {
    d.check_normalized()?;
    Ok(Raster {
        width: d.classes,
        height: d.len,
        channels: 1,
        samples: d.values.iter().map(|&v| quantize(v)).collect(),
    })
}

/// One channel of an `[H, W, C]` map whose values lie in `[0, 1]`.
pub fn channel(t: &Tensor<f32>, c: usize) -> Result<Raster> {
    let &[height, width, channels] = t.shape() else {
        return Err(cdg_core::Error::Rank {
            op: "heatmap",
            expected: "[H, W, C]",
            found: t.shape().to_vec(),
        }
        .into());
    };
    if c >= channels {
        return Err(cdg_core::Error::Invalid(format!(
            "channel {c} out of range for {channels} channels"
        ))
        .into());
    }
    let values: Vec<f64> = t
        .data()
        .iter()
        .skip(c)
        .step_by(channels)
        .map(|&v| v as f64)
        .collect();
    check_unit(values.iter().copied(), "activation")?;
    Ok(Raster {
        width,
        height,
        channels: 1,
        samples: values.into_iter().map(quantize).collect(),
    })
}

/// CDG activations of a network on one image, at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    pub p_h: ClassDistribution,
    pub p_v: ClassDistribution,
    /// `A_d / (|α| + |β|)`, which lies in `[0, 1]` whenever α and β are non-negative.
    pub a_d: Tensor<f32>,
}

pub fn activations(net: &ToyNet<f32>, image: &Tensor<f32>) -> Result<Activations> {
    let params = net
        .cdg
        .as_ref()
        .ok_or_else(|| cdg_core::Error::Invalid("network has no CDG module".into()))?;
    let mut g = Graph::new();
    let out = net.forward(&mut g, image, Mode::Eval)?;
    let c = out.cdg.expect("CDG output present when the module is");
    let scale = params.alpha.item().abs() + params.beta.item().abs();
    let a_d = if scale > 0.0 {
        g.value(c.a_d).map(|v| v / scale)
    } else {
        g.value(c.a_d).clone()
    };
    Ok(Activations {
        p_h: ClassDistribution::from_tensor(DistAxis::Horizontal, g.value(c.p_h))?,
        p_v: ClassDistribution::from_tensor(DistAxis::Vertical, g.value(c.p_v))?,
        a_d,
    })
}
