//! Binary netpbm codecs: P5 greyscale for label maps and heatmaps, P6 for RGB images.

use std::path::Path;

use cdg_core::labels::LabelMap;
use cdg_core::Tensor;

use crate::error::{read_file, write_file, Error, Result};

/// A decoded 8-bit raster with one or three samples per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl Cursor<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            what: self.what,
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments running to the end of their line.
    fn skip_blank(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, name: &str) -> Result<usize> {
        self.skip_blank();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {name}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse().map_err(|_| Error::Parse {
            what: self.what,
            offset: start,
            msg: format!("{name} `{text}` out of range"),
        })
    }
}

/// Decodes a binary P5 or P6 file with maxval 255.
pub fn decode(bytes: &[u8], what: &'static str) -> Result<Raster> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        what,
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.fail("expected magic `P5` or `P6`")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    c.skip_blank();
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            what,
            offset: maxval_at,
            msg: format!("maxval must be 255, found {maxval}"),
        });
    }
    if width == 0 || height == 0 {
        return Err(c.fail("image dimensions must be positive"));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.fail("expected a single whitespace byte before the raster")),
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| c.fail("image dimensions overflow"))?;
    let payload = &bytes[c.pos..];
    if payload.len() < len {
        return Err(Error::Parse {
            what,
            offset: bytes.len(),
            msg: format!(
                "truncated raster: expected {len} bytes, found {}",
                payload.len()
            ),
        });
    }
    if payload.len() > len {
        return Err(Error::Parse {
            what,
            offset: c.pos + len,
            msg: "trailing bytes after raster".into(),
        });
    }
    Ok(Raster {
        width,
        height,
        channels,
        samples: payload.to_vec(),
    })
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.samples);
    out
}

/// Decodes a P5 label map. With `classes` given, every pixel must be below it;
/// otherwise the class count is one more than the largest id present.
pub fn decode_label(bytes: &[u8], classes: Option<usize>) -> Result<LabelMap> {
    let r = decode(bytes, "label map")?;
    if r.channels != 1 {
        return Err(Error::Parse {
            what: "label map",
            offset: 0,
            msg: "label maps must be P5".into(),
        });
    }
    let max = r.samples.iter().copied().max().unwrap_or(0) as usize;
    let n = classes.unwrap_or(max + 1);
    Ok(LabelMap::new(r.height, r.width, n, r.samples)?)
}

pub fn encode_label(label: &LabelMap) -> Vec<u8> {
    encode(&Raster {
        width: label.width(),
        height: label.height(),
        channels: 1,
        samples: label.pixels().to_vec(),
    })
}

pub fn read_label(path: &Path, classes: Option<usize>) -> Result<LabelMap> {
    decode_label(&read_file(path)?, classes)
}

pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    write_file(path, &encode_label(label))
}

/// Decodes a P6 image into an `[H, W, 3]` tensor with intensities in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let r = decode(bytes, "image")?;
    if r.channels != 3 {
        return Err(Error::Parse {
            what: "image",
            offset: 0,
            msg: "images must be P6".into(),
        });
    }
    let data = r.samples.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(&[r.height, r.width, 3], data)?)
}

/// Quantizes an `[H, W, 3]` tensor to `round(255 v)` after clamping to `[0, 1]`.
pub fn encode_image(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[height, width, 3] = image.shape() else {
        return Err(cdg_core::Error::Rank {
            op: "encode_image",
            expected: "[H, W, 3]",
            found: image.shape().to_vec(),
        }
        .into());
    };
    let samples = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(encode(&Raster {
        width,
        height,
        channels: 3,
        samples,
    }))
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    decode_image(&read_file(path)?)
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_file(path, &encode_image(image)?)
}
