//! Binary model files.
//!
//! ```text
//! magic[4] version:u16 K:u8 bits:u8
//! codewords: n × ceil(K²/8) bytes          (SPKS only)
//! layers:u16
//! per layer: c_out c_in k stride pad flags (u16 each), then
//!   coded (flags 0 or 0x1): packed indices, [scale f32 × c_out, bias f32 × c_out]
//!   real conv (0x2):        weights f32 × c_out·c_in·k², bias f32 × c_out
//!   dense (0x4):            weights f32 × c_out·c_in, bias f32 × c_out
//! ```
//!
//! All integers are little endian; indices are packed LSB first. An `SPK1`
//! file stores raw `K²`-bit kernel patterns instead of indices and has no
//! codeword section; it loads with the full codebook in pattern order.

use std::path::Path;

use super::{Affine, CodedConv, ConvGeometry, Dense, IndexCodedModel, Layer, RealConv};
use crate::codebook::{Codeword, SubCodebook, MAX_KERNEL_SIZE, MIN_KERNEL_SIZE};
use crate::error::{Result, SparksError};

pub const MAGIC_SUBBIT: &[u8; 4] = b"SPKS";
pub const MAGIC_1BIT: &[u8; 4] = b"SPK1";
pub const FORMAT_VERSION: u16 = 1;

const FLAG_AFFINE: u16 = 0x1;
const FLAG_REAL_CONV: u16 = 0x2;
const FLAG_DENSE: u16 = 0x4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileFormat {
    /// Indices into a stored sub-codebook.
    SubBit,
    /// One raw bit per weight.
    OneBit,
}

/// Packs `bits`-wide values LSB first.
pub fn pack_indices(values: &[u32], bits: u32) -> Vec<u8> {
    let total = values.len() * bits as usize;
    let mut out = vec![0u8; total.div_ceil(8)];
    let mut pos = 0usize;
    for &v in values {
        for b in 0..bits {
            if (v >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_indices(bytes: &[u8], bits: u32, count: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut v = 0u32;
        for b in 0..bits {
            if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                v |= 1 << b;
            }
            pos += 1;
        }
        out.push(v);
    }
    out
}

fn codeword_bytes(kernel_size: usize) -> usize {
    (kernel_size * kernel_size).div_ceil(8)
}

fn put_u16(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| SparksError::InvalidArgument(format!("{what} = {v} does not fit in u16")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_geometry(out: &mut Vec<u8>, g: &ConvGeometry, flags: u16) -> Result<()> {
    put_u16(out, g.c_out, "c_out")?;
    put_u16(out, g.c_in, "c_in")?;
    put_u16(out, g.kernel_size, "kernel size")?;
    put_u16(out, g.stride, "stride")?;
    put_u16(out, g.padding, "padding")?;
    out.extend_from_slice(&flags.to_le_bytes());
    Ok(())
}

pub fn encode_model(model: &IndexCodedModel, format: FileFormat) -> Result<Vec<u8>> {
    let sub = model.sub_codebook();
    let k = sub.kernel_size();
    let mut out = Vec::new();
    let (magic, bits) = match format {
        FileFormat::SubBit => (MAGIC_SUBBIT, sub.index_bits()),
        FileFormat::OneBit => (MAGIC_1BIT, (k * k) as u32),
    };
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(k as u8);
    out.push(bits as u8);
    if format == FileFormat::SubBit {
        let width = codeword_bytes(k);
        for u in sub.codewords() {
            out.extend_from_slice(&u.bits().to_le_bytes()[..width]);
        }
    }
    put_u16(&mut out, model.layers().len(), "layer count")?;
    for layer in model.layers() {
        match layer {
            Layer::Coded(l) => {
                let flags = if l.affine.is_some() { FLAG_AFFINE } else { 0 };
                put_geometry(&mut out, &l.geom, flags)?;
                match format {
                    FileFormat::SubBit => out.extend_from_slice(l.packed_indices()),
                    FileFormat::OneBit => {
                        let patterns: Vec<u32> = l.indices().iter().map(|&j| sub.indices()[j as usize]).collect();
                        out.extend_from_slice(&pack_indices(&patterns, bits));
                    }
                }
                if let Some(a) = &l.affine {
                    put_f32s(&mut out, &a.scale);
                    put_f32s(&mut out, &a.bias);
                }
            }
            Layer::Real(l) => {
                put_geometry(&mut out, &l.geom, FLAG_REAL_CONV)?;
                put_f32s(&mut out, &l.weights);
                put_f32s(&mut out, &l.bias);
            }
            Layer::Dense(l) => {
                put_u16(&mut out, l.out_features, "out features")?;
                put_u16(&mut out, l.in_features, "in features")?;
                out.extend_from_slice(&[0; 6]);
                out.extend_from_slice(&FLAG_DENSE.to_le_bytes());
                put_f32s(&mut out, &l.weights);
                put_f32s(&mut out, &l.bias);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T> {
        Err(SparksError::Format {
            offset,
            msg: msg.into(),
        })
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return self.fail(self.pos, format!("truncated {what}: need {len} bytes, {} left", self.buf.len() - self.pos));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| SparksError::Format {
                offset: self.pos,
                msg: format!("{what} too large"),
            })?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<IndexCodedModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    let format = if magic == MAGIC_SUBBIT {
        FileFormat::SubBit
    } else if magic == MAGIC_1BIT {
        FileFormat::OneBit
    } else {
        return r.fail(0, format!("bad magic {magic:?}"));
    };
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return r.fail(4, format!("unsupported version {version}"));
    }
    let k = r.u8("kernel size")? as usize;
    if !(MIN_KERNEL_SIZE..=MAX_KERNEL_SIZE).contains(&k) {
        return r.fail(6, format!("kernel size {k} out of range"));
    }
    let bits = u32::from(r.u8("index width")?);
    let kk = (k * k) as u32;
    let sub = match format {
        FileFormat::SubBit => {
            if bits == 0 || bits > kk {
                return r.fail(7, format!("index width {bits} out of range for K = {k}"));
            }
            let section = r.pos;
            let width = codeword_bytes(k);
            let mut words = Vec::with_capacity(1 << bits);
            for _ in 0..1usize << bits {
                let at = r.pos;
                let mut le = [0u8; 4];
                le[..width].copy_from_slice(r.take(width, "codeword")?);
                let w = u32::from_le_bytes(le);
                if Codeword::new(w, k).is_err() {
                    return r.fail(at, format!("codeword {w:#x} has bits beyond {kk}"));
                }
                words.push(w);
            }
            match SubCodebook::new(k, words) {
                Ok(sub) => sub,
                Err(e) => return r.fail(section, format!("bad codeword section: {e}")),
            }
        }
        FileFormat::OneBit => {
            if bits != kk {
                return r.fail(7, format!("1-bit file must store {kk} bits per kernel, header says {bits}"));
            }
            SubCodebook::full(k)?
        }
    };

    let count = r.u16("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let at = r.pos;
        let mut f = [0usize; 5];
        for (slot, name) in f.iter_mut().zip(["c_out", "c_in", "kernel size", "stride", "padding"]) {
            *slot = r.u16(name)? as usize;
        }
        let flags = r.u16("flags")?;
        let [c_out, c_in, lk, stride, padding] = f;
        let layer = match flags {
            0 | FLAG_AFFINE => {
                let geom = match ConvGeometry::new(c_out, c_in, lk, stride, padding) {
                    Ok(g) if lk == k => g,
                    Ok(_) => return r.fail(at, format!("layer {i}: kernel size {lk}, codewords are {k}")),
                    Err(e) => return r.fail(at, format!("layer {i}: {e}")),
                };
                let packed_at = r.pos;
                let total_bits = c_out * c_in * bits as usize;
                let packed = r.take(total_bits.div_ceil(8), "indices")?.to_vec();
                if !total_bits.is_multiple_of(8) && packed[packed.len() - 1] >> (total_bits % 8) != 0 {
                    return r.fail(packed_at + packed.len() - 1, format!("layer {i}: nonzero padding bits"));
                }
                let affine = if flags == FLAG_AFFINE {
                    Some(Affine {
                        scale: r.f32s(c_out, "scale")?,
                        bias: r.f32s(c_out, "bias")?,
                    })
                } else {
                    None
                };
                Layer::Coded(CodedConv::from_packed(geom, bits, packed, affine))
            }
            FLAG_REAL_CONV => {
                let geom = match ConvGeometry::new(c_out, c_in, lk, stride, padding) {
                    Ok(g) => g,
                    Err(e) => return r.fail(at, format!("layer {i}: {e}")),
                };
                let weights = r.f32s(c_out * c_in * lk * lk, "conv weights")?;
                let bias = r.f32s(c_out, "conv bias")?;
                Layer::Real(RealConv { geom, weights, bias })
            }
            FLAG_DENSE => {
                if lk != 0 || stride != 0 || padding != 0 || c_out == 0 || c_in == 0 {
                    return r.fail(at, format!("layer {i}: malformed dense record"));
                }
                Layer::Dense(Dense {
                    in_features: c_in,
                    out_features: c_out,
                    weights: r.f32s(c_out * c_in, "dense weights")?,
                    bias: r.f32s(c_out, "dense bias")?,
                })
            }
            other => return r.fail(at + 10, format!("layer {i}: unknown flags {other:#x}")),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
    }
    IndexCodedModel::new(sub, layers).map_err(|e| SparksError::Format {
        offset: r.pos,
        msg: e.to_string(),
    })
}

pub fn save_model(model: &IndexCodedModel, path: &Path, format: FileFormat) -> Result<()> {
    std::fs::write(path, encode_model(model, format)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<IndexCodedModel> {
    decode_model(&std::fs::read(path)?)
}

/// Bytes taken by the fixed file header and the codeword section.
pub fn header_len(model: &IndexCodedModel, format: FileFormat) -> usize {
    let codewords = match format {
        FileFormat::SubBit => model.sub_codebook().len() * codeword_bytes(model.kernel_size()),
        FileFormat::OneBit => 0,
    };
    8 + codewords + 2
}
