//! Procedurally drawn "figures" standing in for a human parsing dataset, and
//! the training-time augmentation chain.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::kernels::{resize_bilinear, Dims2};
use crate::error::{invalid, Result};
use crate::labels::{hflip, LabelMap, SwapTable};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]`, intensities in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub swaps: SwapTable,
}

/// Class ids used by the synthetic figures for a given class count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartIds {
    pub head: Option<u8>,
    pub torso: Option<u8>,
    pub left_arm: u8,
    pub right_arm: u8,
    pub legs: Option<(u8, u8)>,
}

impl PartIds {
    pub fn for_classes(classes: usize) -> Result<Self> {
        Ok(match classes {
            0..=2 => {
                return Err(invalid(format!(
                    "synthetic figures need at least 3 classes, got {classes}"
                )))
            }
            3 => PartIds {
                head: None,
                torso: None,
                left_arm: 1,
                right_arm: 2,
                legs: None,
            },
            4 => PartIds {
                head: Some(1),
                torso: None,
                left_arm: 2,
                right_arm: 3,
                legs: None,
            },
            5 | 6 => PartIds {
                head: Some(1),
                torso: Some(2),
                left_arm: 3,
                right_arm: 4,
                legs: None,
            },
            _ => PartIds {
                head: Some(1),
                torso: Some(2),
                left_arm: 3,
                right_arm: 4,
                legs: Some((5, 6)),
            },
        })
    }

    pub fn swaps(&self) -> SwapTable {
        let mut pairs = vec![(self.left_arm, self.right_arm)];
        pairs.extend(self.legs);
        SwapTable::new(pairs).expect("part ids are distinct")
    }
}

const PALETTE: [[f32; 3]; 7] = [
    [0.15, 0.15, 0.20],
    [0.95, 0.80, 0.60],
    [0.20, 0.40, 0.90],
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.30],
    [0.90, 0.90, 0.20],
    [0.60, 0.20, 0.80],
];

const NOISE: f64 = 0.08;

/// `count` seeded figures of size `height x width` with `classes` classes.
pub fn synth_dataset(
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
    classes: usize,
) -> Result<Vec<Sample>> {
    if height < 16 || width < 16 {
        return Err(invalid(format!(
            "{height}x{width} is too small to place body parts (minimum 16x16)"
        )));
    }
    let ids = PartIds::for_classes(classes)?;
    let swaps = ids.swaps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| draw_figure(&mut rng, height, width, classes, &ids, &swaps))
        .collect()
}

struct Rect {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

fn draw_figure(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    classes: usize,
    ids: &PartIds,
    swaps: &SwapTable,
) -> Result<Sample> {
    let (hf, wf) = (height as f64, width as f64);
    let cx = wf * (0.5 + rng.gen_range(-0.08..0.08));
    let s = rng.gen_range(0.85..1.05);
    let torso = Rect {
        x0: cx - 0.17 * wf * s,
        x1: cx + 0.17 * wf * s,
        y0: 0.33 * hf,
        y1: 0.33 * hf + 0.42 * hf * s,
    };
    let arm_w = 0.15 * wf * s;
    let arm_y = (0.35 * hf, 0.35 * hf + 0.38 * hf * s);
    let left = Rect {
        x0: torso.x0 - arm_w,
        x1: torso.x0,
        y0: arm_y.0,
        y1: arm_y.1,
    };
    let right = Rect {
        x0: torso.x1,
        x1: torso.x1 + arm_w,
        y0: arm_y.0,
        y1: arm_y.1,
    };
    let legs_y = (torso.y1, (torso.y1 + 0.2 * hf).min(hf));
    let left_leg = Rect {
        x0: cx - 0.15 * wf * s,
        x1: cx - 0.02 * wf * s,
        y0: legs_y.0,
        y1: legs_y.1,
    };
    let right_leg = Rect {
        x0: cx + 0.02 * wf * s,
        x1: cx + 0.15 * wf * s,
        y0: legs_y.0,
        y1: legs_y.1,
    };
    let head = (cx, 0.18 * hf, 0.14 * hf.min(wf) * s);

    let mut pixels = vec![0u8; height * width];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c = 0u8;
            if let Some(t) = ids.torso.filter(|_| torso.contains(px, py)) {
                c = t;
            }
            if let Some((l, r)) = ids.legs {
                if left_leg.contains(px, py) {
                    c = l;
                } else if right_leg.contains(px, py) {
                    c = r;
                }
            }
            if left.contains(px, py) {
                c = ids.left_arm;
            } else if right.contains(px, py) {
                c = ids.right_arm;
            }
            if let Some(hd) = ids.head {
                let (dx, dy) = (px - head.0, py - head.1);
                if dx * dx + dy * dy <= head.2 * head.2 {
                    c = hd;
                }
            }
            pixels[y * width + x] = c;
        }
    }
    let mut data = Vec::with_capacity(height * width * 3);
    for &c in &pixels {
        for &base in &PALETTE[c as usize % PALETTE.len()] {
            let v = base as f64 + rng.gen_range(-NOISE..NOISE);
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(Sample {
        image: Tensor::new(&[height, width, 3], data)?,
        label: LabelMap::new(height, width, classes, pixels)?,
        swaps: swaps.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub crop_size: usize,
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
}

/// Bilinear resize of an `[H, W, C]` image.
pub fn resize_image(image: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    let d = Dims2 {
        batch: 1,
        height: s[0],
        width: s[1],
        channels: s[2],
    };
    Tensor::new(
        &[height, width, s[2]],
        resize_bilinear(image.data(), d, height, width),
    )
}

/// Random scale, crop-or-pad to a square `crop_size`, then a random mirrored flip.
/// Padding is black in the image and background in the label.
pub fn augment(
    sample: &Sample,
    cfg: &Augment,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, LabelMap)> {
    let (lo, hi) = cfg.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let (h0, w0) = (sample.label.height(), sample.label.width());
    let h = (Float::round(h0 as f64 * scale) as usize).max(1);
    let w = (Float::round(w0 as f64 * scale) as usize).max(1);
    let image = resize_image(&sample.image, h, w)?;
    let label = sample.label.resize_nearest(h, w)?;

    let crop = cfg.crop_size;
    let mut offset = |len: usize| {
        if len == crop {
            0
        } else {
            rng.gen_range(0..=len.abs_diff(crop))
        }
    };
    let (oy, ox) = (offset(h), offset(w));
    let mut img = vec![0f32; crop * crop * 3];
    let mut lab = vec![0u8; crop * crop];
    for y in 0..crop {
        // Source row when cropping (h > crop), destination row when padding.
        let sy = if h >= crop {
            Some(y + oy)
        } else {
            y.checked_sub(oy).filter(|&v| v < h)
        };
        let Some(sy) = sy else { continue };
        for x in 0..crop {
            let sx = if w >= crop {
                Some(x + ox)
            } else {
                x.checked_sub(ox).filter(|&v| v < w)
            };
            let Some(sx) = sx else { continue };
            img[(y * crop + x) * 3..][..3].copy_from_slice(&image.data()[(sy * w + sx) * 3..][..3]);
            lab[y * crop + x] = label.get(sy, sx);
        }
    }
    let image = Tensor::new(&[crop, crop, 3], img)?;
    let label = LabelMap::new(crop, crop, label.classes(), lab)?;
    if rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        hflip(&image, &label, &sample.swaps)
    } else {
        Ok((image, label))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroid_x(label: &LabelMap, class: u8) -> f64 {
        let (mut s, mut n) = (0.0, 0.0);
        for y in 0..label.height() {
            for x in 0..label.width() {
                if label.get(y, x) == class {
                    s += x as f64;
                    n += 1.0;
                }
            }
        }
        s / n
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            synth_dataset(3, 4, 32, 32, 5).unwrap(),
            synth_dataset(3, 4, 32, 32, 5).unwrap()
        );
        assert_ne!(
            synth_dataset(3, 4, 32, 32, 5).unwrap(),
            synth_dataset(4, 4, 32, 32, 5).unwrap()
        );
    }

    #[test]
    fn construction_invariants() {
        for n in [3, 4, 5, 8] {
            for s in synth_dataset(7, 6, 64, 48, n).unwrap() {
                let ids = PartIds::for_classes(n).unwrap();
                assert!(s.label.pixels().iter().all(|&p| (p as usize) < n));
                assert!(centroid_x(&s.label, ids.left_arm) < centroid_x(&s.label, ids.right_arm));
            }
        }
    }

    #[test]
    fn head_peaks_in_top_half() {
        for s in synth_dataset(1, 8, 64, 64, 5).unwrap() {
            let (_, v) = s.label.distributions(false);
            let peak = (0..v.len)
                .max_by(|&a, &b| v.get(a, 1).partial_cmp(&v.get(b, 1)).unwrap())
                .unwrap();
            assert!(peak < 32, "head peak at row {peak}");
        }
    }

    #[test]
    fn too_small_or_too_few_classes() {
        assert!(synth_dataset(0, 1, 8, 64, 5).is_err());
        assert!(synth_dataset(0, 1, 64, 64, 2).is_err());
    }

    #[test]
    fn augmentation_keeps_labels_valid() {
        let data = synth_dataset(2, 4, 64, 64, 5).unwrap();
        let cfg = Augment {
            crop_size: 48,
            scale_range: (0.5, 1.25),
            flip_prob: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in &data {
            for _ in 0..5 {
                let (img, lab) = augment(s, &cfg, &mut rng).unwrap();
                assert_eq!(img.shape(), &[48, 48, 3]);
                assert!(lab.pixels().iter().all(|&p| p < 5));
            }
        }
    }

    #[test]
    fn identity_augmentation() {
        let s = &synth_dataset(2, 1, 32, 32, 5).unwrap()[0];
        let cfg = Augment {
            crop_size: 32,
            scale_range: (1.0, 1.0),
            flip_prob: 0.0,
        };
        let (img, lab) = augment(s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((img, lab), (s.image.clone(), s.label.clone()));
    }
}
