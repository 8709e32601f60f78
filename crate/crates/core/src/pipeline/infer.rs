use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::kernels::{resize_bilinear, softmax_rows, Dims2};
use crate::autodiff::{Graph, Mode};
use crate::error::{invalid, Error, Result};
use crate::labels::{flip_width, LabelMap, SwapTable};
use crate::tensor::Tensor;

use super::data::resize_image;
use super::net::{ToyNet, OUTPUT_STRIDE};

/// Per-pixel argmax over the last axis of `[H, W, N]` or `[B, H, W, N]`; ties
/// go to the lowest class id.
pub fn argmax_labels(scores: &Tensor<f32>) -> Result<Vec<LabelMap>> {
    let (b, h, w, n) = match *scores.shape() {
        [h, w, n] => (1, h, w, n),
        [b, h, w, n] => (b, h, w, n),
        _ => {
            return Err(Error::Rank {
                op: "argmax",
                expected: "[H, W, N] or [B, H, W, N]",
                found: scores.shape().to_vec(),
            })
        }
    };
    if n > 256 {
        return Err(invalid(format!("{n} classes do not fit 8-bit labels")));
    }
    let best = |row: &[f32]| {
        let mut k = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[k] {
                k = c;
            }
        }
        k as u8
    };
    scores
        .data()
        .chunks(h * w * n)
        .take(b)
        .map(|img| LabelMap::new(h, w, n, img.chunks(n).map(best).collect()))
        .collect()
}

/// Softmax probabilities `[H, W, N]` from a single eval-mode forward pass.
pub fn predict_probs(net: &ToyNet<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, image, Mode::Eval)?;
    let logits = g.value(out.logits);
    let n = net.spec.classes;
    let probs = softmax_rows(logits.data(), n);
    probs.iter().try_for_each(|p| {
        if p.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("class probabilities".into()))
        }
    })?;
    Tensor::new(logits.shape(), probs)
}

/// Label map from one eval-mode forward pass.
pub fn predict(net: &ToyNet<f32>, image: &Tensor<f32>) -> Result<LabelMap> {
    let probs = predict_probs(net, image)?;
    Ok(argmax_labels(&probs)?.remove(0))
}

/// Nearest multiple of the output stride (at least one stride).
fn snap(len: f64) -> usize {
    let s = OUTPUT_STRIDE as f64;
    ((Float::round(len / s) as usize).max(1)) * OUTPUT_STRIDE
}

/// Averaged class probabilities over `scales` (and mirrored copies when `use_flip`),
/// each resized back to the input size. Flipped predictions are mirrored back and
/// have their swap-pair channels exchanged before averaging.
pub fn multiscale_probs(
    net: &ToyNet<f32>,
    image: &Tensor<f32>,
    scales: &[f64],
    swaps: &SwapTable,
    use_flip: bool,
) -> Result<Tensor<f32>> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::Rank {
            op: "infer",
            expected: "[H, W, 3]",
            found: image.shape().to_vec(),
        });
    };
    if scales.is_empty() {
        return Err(invalid("at least one inference scale is required"));
    }
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(invalid(format!("inference scale {s} must be positive")));
    }
    let n = net.spec.classes;
    swaps.check_classes(n)?;
    let perm = swaps.permutation(n);
    let mut acc = vec![0f32; h * w * n];
    let mut count = 0usize;
    for &s in scales {
        let (sh, sw) = (snap(h as f64 * s), snap(w as f64 * s));
        let scaled = if (sh, sw) == (h, w) {
            image.clone()
        } else {
            resize_image(image, sh, sw)?
        };
        let mut passes = vec![(scaled.clone(), false)];
        if use_flip {
            passes.push((flip_width(&scaled)?, true));
        }
        for (input, flipped) in passes {
            let probs = predict_probs(net, &input)?;
            let d = Dims2 {
                batch: 1,
                height: sh,
                width: sw,
                channels: n,
            };
            let back = if (sh, sw) == (h, w) {
                probs.into_data()
            } else {
                resize_bilinear(probs.data(), d, h, w)
            };
            for y in 0..h {
                for x in 0..w {
                    let dst = (y * w + x) * n;
                    if flipped {
                        let src = (y * w + (w - 1 - x)) * n;
                        for c in 0..n {
                            acc[dst + c] += back[src + perm[c]];
                        }
                    } else {
                        for c in 0..n {
                            acc[dst + c] += back[dst + c];
                        }
                    }
                }
            }
            count += 1;
        }
    }
    let k = count as f32;
    acc.iter_mut().for_each(|v| *v /= k);
    Tensor::new(&[h, w, n], acc)
}

/// Argmax of [`multiscale_probs`].
pub fn infer_multiscale_flip(
    net: &ToyNet<f32>,
    image: &Tensor<f32>,
    scales: &[f64],
    swaps: &SwapTable,
    use_flip: bool,
) -> Result<LabelMap> {
    let probs = multiscale_probs(net, image, scales, swaps, use_flip)?;
    Ok(argmax_labels(&probs)?.remove(0))
}
