//! Label maps and the supervision signals derived from them.
//!
//! The horizontal class distribution counts, for every column `w` and class
//! `n`, how many pixels of that column carry class `n`; the vertical one does
//! the same per row. Normalised distributions divide by the orthogonal extent
//! so every value lies in `[0, 1]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tensor};

/// `H x W` map of class ids in `0..classes`; class 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    pixels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("label map dimensions must be positive"));
        }
        if classes == 0 || classes > 256 {
            return Err(invalid(format!("class count {classes} outside 1..=256")));
        }
        if pixels.len() != height * width {
            return Err(Error::DataLength {
                shape: vec![height, width],
                len: pixels.len(),
            });
        }
        if let Some(p) = pixels.iter().position(|&v| v as usize >= classes) {
            return Err(invalid(format!(
                "pixel ({}, {}) has class {} but only {classes} classes exist",
                p / width,
                p % width,
                pixels[p]
            )));
        }
        Ok(LabelMap {
            height,
            width,
            classes,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, classes: usize, class: u8) -> Result<Self> {
        Self::new(height, width, classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, h: usize, w: usize) -> u8 {
        self.pixels[h * self.width + w]
    }

    /// One-hot expansion `M[h, w, n] = 1` iff `label[h, w] == n`.
    pub fn one_hot<T: Real>(&self) -> Tensor<T> {
        let n = self.classes;
        let mut data = vec![T::zero(); self.pixels.len() * n];
        for (i, &c) in self.pixels.iter().enumerate() {
            data[i * n + c as usize] = T::one();
        }
        Tensor::new(&[self.height, self.width, n], data).expect("shape matches by construction")
    }

    /// Both class distributions of this map.
    pub fn distributions(&self, normalize: bool) -> (ClassDistribution, ClassDistribution) {
        let n = self.classes;
        let mut horizontal = vec![0.0; self.width * n];
        let mut vertical = vec![0.0; self.height * n];
        for h in 0..self.height {
            for w in 0..self.width {
                let c = self.get(h, w) as usize;
                horizontal[w * n + c] += 1.0;
                vertical[h * n + c] += 1.0;
            }
        }
        finish_distributions(horizontal, vertical, self.height, self.width, n, normalize)
    }

    /// Nearest-neighbour resample (pixel-centre sampling) to `height x width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("resize target must be positive"));
        }
        let src =
            |dst: usize, len: usize, out: usize| ((2 * dst + 1) * len / (2 * out)).min(len - 1);
        let mut pixels = Vec::with_capacity(height * width);
        for h in 0..height {
            let sh = src(h, self.height, height);
            for w in 0..width {
                pixels.push(self.get(sh, src(w, self.width, width)));
            }
        }
        Ok(LabelMap {
            height,
            width,
            classes: self.classes,
            pixels,
        })
    }

    /// Labels at the resolution of a feature map `factor` times smaller.
    pub fn downscale(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor)
        {
            return Err(invalid(format!(
                "{}x{} label map is not divisible by {factor}",
                self.height, self.width
            )));
        }
        self.resize_nearest(self.height / factor, self.width / factor)
    }

    pub fn map_classes(&self, f: impl Fn(u8) -> u8) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.classes,
            self.pixels.iter().map(|&p| f(p)).collect(),
        )
    }

    /// Mirrors along the width axis and applies the left/right swap table.
    pub fn hflip(&self, swaps: &SwapTable) -> Result<Self> {
        swaps.check_classes(self.classes)?;
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            pixels.extend(row.iter().rev().map(|&p| swaps.partner(p)));
        }
        Ok(LabelMap {
            pixels,
            ..self.clone()
        })
    }

    /// Binary boundary map: 1 where any in-bounds 4-neighbour has a different class.
    pub fn edges(&self) -> Vec<u8> {
        let (hh, ww) = (self.height, self.width);
        let mut out = vec![0u8; hh * ww];
        for h in 0..hh {
            for w in 0..ww {
                let c = self.get(h, w);
                let differs = (h > 0 && self.get(h - 1, w) != c)
                    || (h + 1 < hh && self.get(h + 1, w) != c)
                    || (w > 0 && self.get(h, w - 1) != c)
                    || (w + 1 < ww && self.get(h, w + 1) != c);
                out[h * ww + w] = differs as u8;
            }
        }
        out
    }
}

/// [`LabelMap::one_hot`] as a free function.
pub fn one_hot<T: Real>(label: &LabelMap) -> Tensor<T> {
    label.one_hot()
}

/// Edge label as a `[H, W]` tensor of zeros and ones.
pub fn edge_label<T: Real>(label: &LabelMap) -> Tensor<T> {
    let data = label
        .edges()
        .into_iter()
        .map(|e| if e == 1 { T::one() } else { T::zero() })
        .collect();
    Tensor::new(&[label.height, label.width], data).expect("shape matches by construction")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistAxis {
    /// Indexed by column: `W x N`.
    Horizontal,
    /// Indexed by row: `H x N`.
    Vertical,
}

impl DistAxis {
    pub fn name(self) -> &'static str {
        match self {
            DistAxis::Horizontal => "horizontal",
            DistAxis::Vertical => "vertical",
        }
    }
}

/// Per-position, per-class distribution along one axis, stored row-major as `len x classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub axis: DistAxis,
    pub len: usize,
    pub classes: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl ClassDistribution {
    pub fn new(
        axis: DistAxis,
        len: usize,
        classes: usize,
        values: Vec<f64>,
        normalized: bool,
    ) -> Result<Self> {
        if len == 0 || classes == 0 {
            return Err(invalid("distribution dimensions must be positive"));
        }
        if values.len() != len * classes {
            return Err(Error::DataLength {
                shape: vec![len, classes],
                len: values.len(),
            });
        }
        let d = ClassDistribution {
            axis,
            len,
            classes,
            values,
            normalized,
        };
        if normalized {
            d.check_normalized()?;
        }
        Ok(d)
    }

    pub fn get(&self, pos: usize, class: usize) -> f64 {
        self.values[pos * self.classes + class]
    }

    pub fn check_normalized(&self) -> Result<()> {
        if !self.normalized {
            return Err(invalid(format!(
                "{} distribution is not normalized",
                self.axis.name()
            )));
        }
        match self.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            None => Ok(()),
            Some(i) => Err(invalid(format!(
                "{} distribution value {} at ({}, {}) outside [0, 1]",
                self.axis.name(),
                self.values[i],
                i / self.classes,
                i % self.classes
            ))),
        }
    }

    /// `[len, classes]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.len, self.classes], &self.values)
            .expect("shape matches by construction")
    }

    /// Wraps a predicted `[len, classes]` map (e.g. a sigmoid head output).
    pub fn from_tensor<T: Real>(axis: DistAxis, t: &Tensor<T>) -> Result<Self> {
        let &[len, classes] = t.shape() else {
            return Err(Error::Rank {
                op: "distribution",
                expected: "[L, N]",
                found: t.shape().to_vec(),
            });
        };
        Self::new(
            axis,
            len,
            classes,
            t.data().iter().map(|v| v.as_f64()).collect(),
            true,
        )
    }

    /// Reverses position order (what a width flip does to a horizontal distribution).
    pub fn reversed(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(self.classes).rev() {
            values.extend_from_slice(row);
        }
        ClassDistribution {
            values,
            ..self.clone()
        }
    }

    /// Exchanges the columns of every swap pair.
    pub fn swap_classes(&self, swaps: &SwapTable) -> Self {
        let mut values = self.values.clone();
        for (row_out, row_in) in values
            .chunks_mut(self.classes)
            .zip(self.values.chunks(self.classes))
        {
            for (c, v) in row_out.iter_mut().enumerate() {
                *v = row_in[swaps.partner(c as u8) as usize];
            }
        }
        ClassDistribution {
            values,
            ..self.clone()
        }
    }
}

/// Horizontal (`W x N`) and vertical (`H x N`) class distributions of a one-hot tensor.
pub fn class_distributions<T: Real>(
    m: &Tensor<T>,
    normalize: bool,
) -> Result<(ClassDistribution, ClassDistribution)> {
    let &[hh, ww, n] = m.shape() else {
        return Err(Error::Rank {
            op: "class_distributions",
            expected: "[H, W, N]",
            found: m.shape().to_vec(),
        });
    };
    let mut horizontal = vec![0.0; ww * n];
    let mut vertical = vec![0.0; hh * n];
    for (p, px) in m.data().chunks(n).enumerate() {
        let (h, w) = (p / ww, p % ww);
        let mut ones = 0;
        for (c, &v) in px.iter().enumerate() {
            if v == T::one() {
                ones += 1;
                horizontal[w * n + c] += 1.0;
                vertical[h * n + c] += 1.0;
            } else if v != T::zero() {
                ones = usize::MAX;
                break;
            }
        }
        if ones != 1 {
            return Err(invalid(format!("pixel ({h}, {w}) is not one-hot")));
        }
    }
    Ok(finish_distributions(
        horizontal, vertical, hh, ww, n, normalize,
    ))
}

fn finish_distributions(
    mut horizontal: Vec<f64>,
    mut vertical: Vec<f64>,
    height: usize,
    width: usize,
    n: usize,
    normalize: bool,
) -> (ClassDistribution, ClassDistribution) {
    if normalize {
        horizontal.iter_mut().for_each(|v| *v /= height as f64);
        vertical.iter_mut().for_each(|v| *v /= width as f64);
    }
    let dist = |axis, len, values| ClassDistribution {
        axis,
        len,
        classes: n,
        values,
        normalized: normalize,
    };
    (
        dist(DistAxis::Horizontal, width, horizontal),
        dist(DistAxis::Vertical, height, vertical),
    )
}

/// Pairs of mirrored classes (left arm / right arm) exchanged by horizontal flips.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct SwapTable {
    pairs: Vec<(u8, u8)>,
}

impl SwapTable {
    pub fn new(pairs: Vec<(u8, u8)>) -> Result<Self> {
        let mut seen = [false; 256];
        for &(a, b) in &pairs {
            if a == b {
                return Err(invalid(format!(
                    "swap pair ({a}, {b}) maps a class to itself"
                )));
            }
            for id in [a, b] {
                if core::mem::replace(&mut seen[id as usize], true) {
                    return Err(invalid(format!(
                        "class {id} appears in more than one swap pair"
                    )));
                }
            }
        }
        Ok(SwapTable { pairs })
    }

    pub fn empty() -> Self {
        SwapTable::default()
    }

    pub fn pairs(&self) -> &[(u8, u8)] {
        &self.pairs
    }

    pub fn partner(&self, id: u8) -> u8 {
        for &(a, b) in &self.pairs {
            if id == a {
                return b;
            }
            if id == b {
                return a;
            }
        }
        id
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self
            .pairs
            .iter()
            .find(|&&(a, b)| a as usize >= classes || b as usize >= classes)
        {
            None => Ok(()),
            Some(&(a, b)) => Err(invalid(format!(
                "swap pair ({a}, {b}) exceeds class count {classes}"
            ))),
        }
    }

    /// Channel permutation for `classes` channels: output channel `c` reads input `perm[c]`.
    pub fn permutation(&self, classes: usize) -> Vec<usize> {
        (0..classes)
            .map(|c| {
                if c < 256 {
                    self.partner(c as u8) as usize
                } else {
                    c
                }
            })
            .collect()
    }
}

/// Mirrors a `[H, W, C]` image along the width axis.
pub fn flip_width<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let &[hh, ww, c] = image.shape() else {
        return Err(Error::Rank {
            op: "hflip",
            expected: "[H, W, C]",
            found: image.shape().to_vec(),
        });
    };
    let src = image.data();
    let mut data = Vec::with_capacity(src.len());
    for h in 0..hh {
        for w in (0..ww).rev() {
            data.extend_from_slice(&src[(h * ww + w) * c..][..c]);
        }
    }
    Tensor::new(image.shape(), data)
}

/// Horizontal flip of an aligned image/label pair; mirrored classes trade ids.
pub fn hflip<T: Real>(
    image: &Tensor<T>,
    label: &LabelMap,
    swaps: &SwapTable,
) -> Result<(Tensor<T>, LabelMap)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != label.height || s[1] != label.width {
        return Err(invalid(format!(
            "image {:?} not aligned with {}x{} label",
            s, label.height, label.width
        )));
    }
    Ok((flip_width(image)?, label.hflip(swaps)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, n: usize, px: &[u8]) -> LabelMap {
        LabelMap::new(h, w, n, px.to_vec()).unwrap()
    }

    #[test]
    fn one_hot_examples() {
        let m: Tensor<f64> = map(1, 1, 3, &[2]).one_hot();
        assert_eq!(m.data(), &[0., 0., 1.]);

        let m: Tensor<f64> = map(2, 2, 2, &[0, 1, 1, 1]).one_hot();
        let ch = |c: usize| (0..4).map(|p| m.data()[p * 2 + c]).collect::<Vec<_>>();
        assert_eq!(ch(0), [1., 0., 0., 0.]);
        assert_eq!(ch(1), [0., 1., 1., 1.]);
    }

    #[test]
    fn distributions_of_2x2_fixture() {
        let m: Tensor<f64> = map(2, 2, 2, &[0, 1, 1, 1]).one_hot();
        let (h, v) = class_distributions(&m, true).unwrap();
        assert_eq!(h.values, [0.5, 0.5, 0.0, 1.0]);
        assert_eq!(v.values, [0.5, 0.5, 0.0, 1.0]);
        assert_eq!((h.len, v.len), (2, 2));
    }

    #[test]
    fn uniform_background_distribution() {
        let (h, _) = LabelMap::filled(3, 5, 4, 0).unwrap().distributions(true);
        for w in 0..5 {
            assert_eq!(h.get(w, 0), 1.0);
            assert!((1..4).all(|c| h.get(w, c) == 0.0));
        }
    }

    #[test]
    fn rejects_non_one_hot() {
        let mut m: Tensor<f64> = map(1, 2, 2, &[0, 1]).one_hot();
        m.data_mut()[1] = 1.0;
        assert!(class_distributions(&m, false).is_err());
        let mut m: Tensor<f64> = map(1, 2, 2, &[0, 1]).one_hot();
        m.data_mut()[0] = 0.5;
        assert!(class_distributions(&m, false).is_err());
    }

    #[test]
    fn edge_examples() {
        assert!(LabelMap::filled(4, 4, 3, 2)
            .unwrap()
            .edges()
            .iter()
            .all(|&e| e == 0));
        assert_eq!(map(2, 2, 2, &[0, 1, 0, 1]).edges(), [1, 1, 1, 1]);
        assert_eq!(map(1, 1, 2, &[1]).edges(), [0]);
    }

    #[test]
    fn hflip_examples() {
        let none = SwapTable::new(vec![(1, 2)]).unwrap();
        assert_eq!(
            map(1, 2, 4, &[0, 3]).hflip(&none).unwrap().pixels(),
            &[3, 0]
        );
        assert_eq!(
            map(1, 2, 4, &[1, 2]).hflip(&none).unwrap().pixels(),
            &[1, 2]
        );
    }

    #[test]
    fn hflip_image_and_label_is_involution() {
        let img = Tensor::<f32>::new(&[2, 3, 3], (0..18).map(|i| i as f32).collect()).unwrap();
        let lab = map(2, 3, 5, &[0, 3, 4, 1, 2, 3]);
        let swaps = SwapTable::new(vec![(3, 4)]).unwrap();
        let (i1, l1) = hflip(&img, &lab, &swaps).unwrap();
        assert_ne!(l1, lab);
        let (i2, l2) = hflip(&i1, &l1, &swaps).unwrap();
        assert_eq!((i2, l2), (img, lab));
    }

    #[test]
    fn swap_table_validation() {
        assert!(SwapTable::new(vec![(1, 1)]).is_err());
        assert!(SwapTable::new(vec![(1, 2), (2, 3)]).is_err());
        let t = SwapTable::new(vec![(3, 4)]).unwrap();
        assert!(t.check_classes(4).is_err());
        assert!(map(1, 1, 4, &[0]).hflip(&t).is_err());
        assert_eq!(t.permutation(6), [0, 1, 2, 4, 3, 5]);
    }

    #[test]
    fn label_validation() {
        assert!(LabelMap::new(1, 2, 2, vec![0, 2]).is_err());
        assert!(LabelMap::new(0, 2, 2, vec![]).is_err());
        assert!(LabelMap::new(2, 2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn downscale_picks_block_centres() {
        let px: Vec<u8> = (0..16).map(|i| (i % 4) as u8).collect();
        let l = map(4, 4, 4, &px).downscale(2).unwrap();
        assert_eq!(l.pixels(), &[1, 3, 1, 3]);
        assert!(map(3, 4, 4, &px[..12]).downscale(2).is_err());
    }
}
