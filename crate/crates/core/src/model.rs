//! Binary model file.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "CIRC"  version:u16  layers:u32
//! per layer:
//!   kind:u8 (0 dense, 1 circulant, 2 circulant without sign flip)
//!   activation:u8 (0 identity, 1 relu)
//!   d_in:u32  k_out:u32  n:u32 (0 for dense)
//!   mode:u8 (0 trained, 1 randomized; 0 for dense)
//!   sign_seed:u64
//!   payload: n f64 for circulant, k_out*d_in f64 row-major for dense
//! crc32:u32 over every preceding byte
//! ```
//!
//! Sign vectors are regenerated from `sign_seed` on load.

use std::path::Path;

use crate::circulant::{CirculantLayer, Mode, SignVector};
use crate::error::{Error, Result};
use crate::fft::next_pow2;
use crate::matrix::Matrix;
use crate::nn::{Activation, DenseLayer, Linear, Network, Stage};

pub const MAGIC: &[u8; 4] = b"CIRC";
pub const FORMAT_VERSION: u16 = 1;

const KIND_DENSE: u8 = 0;
const KIND_CIRCULANT: u8 = 1;
const KIND_CIRCULANT_NO_FLIP: u8 = 2;

/// Largest layer side accepted on load; keeps a corrupt header from
/// requesting an absurd allocation.
const MAX_DIM: usize = 1 << 24;

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * net.total_floats());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.stages().len() as u32).to_le_bytes());
    for stage in net.stages() {
        let (kind, n, mode, seed, payload): (u8, usize, u8, u64, &[f64]) = match &stage.linear {
            Linear::Dense(l) => (KIND_DENSE, 0, 0, 0, l.weights().as_slice()),
            Linear::Circulant(l) => {
                let kind = if l.signs().is_flipping() {
                    KIND_CIRCULANT
                } else {
                    KIND_CIRCULANT_NO_FLIP
                };
                let mode = match l.mode() {
                    Mode::Trained => 0,
                    Mode::Randomized => 1,
                };
                (kind, l.n(), mode, l.signs().seed(), l.params())
            }
        };
        out.push(kind);
        out.push(match stage.activation {
            Activation::Identity => 0,
            Activation::Relu => 1,
        });
        out.extend_from_slice(&(stage.linear.d_in() as u32).to_le_bytes());
        out.extend_from_slice(&(stage.linear.k_out() as u32).to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.push(mode);
        out.extend_from_slice(&seed.to_le_bytes());
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(field, "file ends early"))?;
        let bytes = &self.buf[self.pos..end];
        self.pos = end;
        Ok(bytes)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn dim(&mut self, field: &str) -> Result<usize> {
        let v = self.u32(field)? as usize;
        if v > MAX_DIM {
            return Err(Error::format(field, format!("{v} exceeds {MAX_DIM}")));
        }
        Ok(v)
    }

    fn f64s(&mut self, count: usize, field: &str) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| Error::format(field, "length overflows"))?;
        Ok(self
            .take(len, field)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::format("magic", "not a CIRC model file"));
    }
    if bytes.len() < 14 {
        return Err(Error::format("header", "file ends early"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let count = r.u32("layer count")? as usize;
    if count == 0 {
        return Err(Error::format("layer count", "model has no layers"));
    }
    let mut stages = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let field = |name: &str| format!("layer {i} {name}");
        let kind = r.u8(&field("kind"))?;
        let activation = match r.u8(&field("activation"))? {
            0 => Activation::Identity,
            1 => Activation::Relu,
            other => {
                return Err(Error::format(
                    field("activation"),
                    format!("unknown tag {other}"),
                ))
            }
        };
        let d_in = r.dim(&field("d_in"))?;
        let k_out = r.dim(&field("k_out"))?;
        let n = r.dim(&field("n"))?;
        let mode = r.u8(&field("mode"))?;
        let seed = r.u64(&field("sign seed"))?;
        if d_in == 0 || k_out == 0 {
            return Err(Error::format(
                field("dims"),
                format!("{d_in}->{k_out} has a zero side"),
            ));
        }
        let linear = match kind {
            KIND_DENSE => {
                if n != 0 || mode != 0 || seed != 0 {
                    return Err(Error::format(
                        field("header"),
                        "dense record has circulant fields set",
                    ));
                }
                let w = r.f64s(d_in * k_out, &field("payload"))?;
                Linear::Dense(DenseLayer::from_matrix(Matrix::from_vec(k_out, d_in, w)?)?)
            }
            KIND_CIRCULANT | KIND_CIRCULANT_NO_FLIP => {
                let expected = next_pow2(d_in.max(k_out));
                if n != expected {
                    return Err(Error::format(
                        field("n"),
                        format!("{n} does not match {d_in}->{k_out}, expected {expected}"),
                    ));
                }
                let mode = match mode {
                    0 => Mode::Trained,
                    1 => Mode::Randomized,
                    other => {
                        return Err(Error::format(field("mode"), format!("unknown tag {other}")))
                    }
                };
                let params = r.f64s(n, &field("payload"))?;
                let signs = if kind == KIND_CIRCULANT {
                    SignVector::rademacher(n, seed)
                } else {
                    SignVector::identity(n)
                };
                if signs.len() != n {
                    return Err(Error::State(format!(
                        "layer {i}: regenerated sign vector has wrong length"
                    )));
                }
                Linear::Circulant(CirculantLayer::from_parts(
                    d_in, k_out, mode, params, signs,
                )?)
            }
            other => return Err(Error::format(field("kind"), format!("unknown tag {other}"))),
        };
        stages.push(Stage::new(linear, activation));
    }
    if r.pos != body.len() {
        return Err(Error::format(
            "trailer",
            format!(
                "{} unexpected bytes after the last layer",
                body.len() - r.pos
            ),
        ));
    }
    Network::new(stages)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
