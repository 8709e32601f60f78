//! Binary checkpoints.
//!
//! Layout, all integers `u32` little-endian: magic `CDGC`, version, tensor count,
//! then per tensor the name length, UTF-8 name, rank, dims and `f32` LE payload.
//! A CRC-32 of every preceding byte closes the file.

use std::collections::BTreeMap;
use std::path::Path;

use cdg_core::labels::SwapTable;
use cdg_core::nn::Params;
use cdg_core::pipeline::ToyNet;
use cdg_core::Tensor;

use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 4] = b"CDGC";
pub const VERSION: u32 = 1;
const SWAP_TENSOR: &str = "meta.swap_pairs";
const WHAT: &str = "checkpoint";

/// Serializes named tensors in the given order.
pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let u32_le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    u32_le(&mut out, VERSION as usize);
    u32_le(&mut out, tensors.len());
    for (name, t) in tensors {
        u32_le(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        u32_le(&mut out, t.rank());
        for &d in t.shape() {
            u32_le(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            what: WHAT,
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.fail("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    }
}

/// Parses a checkpoint, verifying the trailing checksum before anything else.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Parse {
            what: WHAT,
            offset: bytes.len(),
            msg: "file too short".into(),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse {
            what: WHAT,
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Parse {
            what: WHAT,
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Parse {
                what: WHAT,
                offset: at,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = r.u32()?;
        if !(1..=4).contains(&rank) {
            return Err(r.fail(format!("`{name}` has unsupported rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.fail("shape overflows"))?;
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| r.fail("shape overflows"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(r.fail("trailing bytes before checksum"));
    }
    Ok(tensors)
}

/// A trained network plus the class-swap table used for flipped inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: ToyNet<f32>,
    pub swaps: SwapTable,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, Tensor<f32>)> = self
            .net
            .named_tensors("")
            .into_iter()
            .map(|(n, t, _)| (n, t))
            .collect();
        let pairs = self.swaps.pairs();
        if !pairs.is_empty() {
            let data = pairs
                .iter()
                .flat_map(|&(a, b)| [a as f32, b as f32])
                .collect();
            let t = Tensor::new(&[pairs.len(), 2], data).expect("shape matches by construction");
            tensors.push((SWAP_TENSOR.into(), t));
        }
        encode(&tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut named = BTreeMap::new();
        for (name, t) in decode(bytes)? {
            if named.insert(name.clone(), t).is_some() {
                return Err(Error::Parse {
                    what: WHAT,
                    offset: 0,
                    msg: format!("duplicate tensor `{name}`"),
                });
            }
        }
        let swaps = match named.remove(SWAP_TENSOR) {
            None => SwapTable::empty(),
            Some(t) => {
                let ids = t
                    .data()
                    .iter()
                    .map(|&v| {
                        (v.fract() == 0.0 && (0.0..=255.0).contains(&v))
                            .then_some(v as u8)
                            .ok_or_else(|| Error::Parse {
                                what: WHAT,
                                offset: 0,
                                msg: format!("swap entry {v} is not a class id"),
                            })
                    })
                    .collect::<Result<Vec<u8>>>()?;
                if t.shape().len() != 2 || t.shape()[1] != 2 {
                    return Err(Error::Parse {
                        what: WHAT,
                        offset: 0,
                        msg: "swap table must be [P, 2]".into(),
                    });
                }
                SwapTable::new(ids.chunks(2).map(|p| (p[0], p[1])).collect())?
            }
        };
        let net = ToyNet::from_named(&named)?;
        swaps.check_classes(net.spec.classes)?;
        Ok(Checkpoint { net, swaps })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cdg_core::pipeline::NetSpec;

    fn sample() -> Checkpoint {
        let spec = NetSpec {
            channels: 4,
            classes: 5,
            cdg_enabled: true,
            edge_head_enabled: true,
        };
        Checkpoint {
            net: ToyNet::init(spec, 3).unwrap(),
            swaps: SwapTable::new(vec![(3, 4)]).unwrap(),
        }
    }

    #[test]
    fn round_trips_exactly() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn empty_tensor_list() {
        let bytes = encode(&[]);
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(bytes.len(), 16);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn any_flipped_bit_is_refused() {
        let bytes = sample().to_bytes();
        for pos in [0, 9, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "byte {pos}");
        }
        let mut bad = bytes.clone();
        bad[bytes.len() / 2] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn truncation_is_refused() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }
}
