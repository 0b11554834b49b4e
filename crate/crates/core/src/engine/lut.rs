use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::codebook::{Codeword, SubCodebook};
use crate::error::{invalid, Result};

/// Convolution geometry. Feature maps are `C×H×W`, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub c_out: usize,
    pub c_in: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(c_out: usize, c_in: usize, kernel_size: usize, stride: usize, padding: usize) -> Result<Self> {
        let g = ConvGeometry {
            c_out,
            c_in,
            kernel_size,
            stride,
            padding,
        };
        if c_out == 0 || c_in == 0 || kernel_size == 0 || stride == 0 {
            return invalid(format!("degenerate geometry {g:?}"));
        }
        if padding >= kernel_size {
            return invalid(format!("padding {padding} must be smaller than the kernel"));
        }
        Ok(g)
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    /// Output spatial size for an `h×w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel_size || pw < self.kernel_size {
            return invalid(format!("{h}x{w} input is smaller than a {0}x{0} kernel", self.kernel_size));
        }
        Ok(((ph - self.kernel_size) / self.stride + 1, (pw - self.kernel_size) / self.stride + 1))
    }
}

/// A `±1` feature map, `C×H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<i8>,
}

impl SignMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<i8>) -> Result<Self> {
        if data.len() != channels * height * width {
            return invalid(format!("{} values for a {channels}x{height}x{width} map", data.len()));
        }
        if let Some(pos) = data.iter().position(|&v| v != 1 && v != -1) {
            return invalid(format!("entry {pos} is {}, expected +1 or -1", data[pos]));
        }
        Ok(SignMap {
            channels,
            height,
            width,
            data,
        })
    }

    /// `sign` of a real map with `sign(0) = +1`.
    pub fn binarize<T: Copy + Into<f64>>(channels: usize, height: usize, width: usize, values: &[T]) -> Result<Self> {
        let data = values.iter().map(|&v| if v.into() >= 0.0 { 1 } else { -1 }).collect();
        SignMap::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.data
    }

    fn at(&self, c: usize, y: usize, x: usize) -> i8 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Counts binary operations executed by the LUT path.
///
/// The table costs `K²` per codeword, input channel and output position.
/// The gather charges half an operation per accumulated term beyond the
/// first of each output channel.
#[derive(Debug, Default)]
pub struct OpCounter {
    lut: AtomicU64,
    gather_halves: AtomicU64,
}

impl OpCounter {
    pub fn lut_ops(&self) -> u64 {
        self.lut.load(Ordering::Relaxed)
    }

    pub fn gather_ops(&self) -> u64 {
        self.gather_halves.load(Ordering::Relaxed) / 2
    }

    pub fn total(&self) -> u64 {
        self.lut_ops() + self.gather_ops()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LutOptions {
    /// Fill a codeword's slice by negating its opposite's when both are selected.
    pub use_opposites: bool,
}

/// `T[j, c, y, x]`: codeword `j` correlated with input channel `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LutTensor {
    n: usize,
    c_in: usize,
    h_out: usize,
    w_out: usize,
    data: Vec<i32>,
}

impl LutTensor {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c_in, self.h_out, self.w_out)
    }

    pub fn slice(&self, j: usize, c: usize) -> &[i32] {
        let hw = self.h_out * self.w_out;
        let start = (j * self.c_in + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn as_slice(&self) -> &[i32] {
        &self.data
    }
}

/// Packed window bits and validity mask for every (channel, output position).
fn extract_patches(x: &SignMap, k: usize, stride: usize, padding: usize, h_out: usize, w_out: usize) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(x.channels * h_out * w_out);
    for c in 0..x.channels {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let (mut bits, mut mask) = (0u32, 0u32);
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        let bit = 1u32 << (ky * k + kx);
                        mask |= bit;
                        if x.at(c, iy as usize, ix as usize) > 0 {
                            bits |= bit;
                        }
                    }
                }
                out.push((bits, mask));
            }
        }
    }
    out
}

pub fn precompute_lut(x: &SignMap, sub: &SubCodebook, stride: usize, padding: usize) -> Result<LutTensor> {
    precompute_lut_with(x, sub, stride, padding, LutOptions::default(), None)
}

pub fn precompute_lut_with(
    x: &SignMap,
    sub: &SubCodebook,
    stride: usize,
    padding: usize,
    opts: LutOptions,
    counter: Option<&OpCounter>,
) -> Result<LutTensor> {
    let k = sub.kernel_size();
    let geom = ConvGeometry::new(1, x.channels, k, stride, padding)?;
    let (h_out, w_out) = geom.output_dims(x.height, x.width)?;
    let patches = extract_patches(x, k, stride, padding, h_out, w_out);
    let n = sub.len();
    let plane = x.channels * h_out * w_out;
    let words: Vec<Codeword> = sub.codewords().collect();

    // source[j] = earlier local index holding the opposite codeword
    let full = 1u64 << (k * k);
    let source: Vec<Option<usize>> = (0..n)
        .map(|j| {
            if !opts.use_opposites {
                return None;
            }
            let mirror = (full - 1 - u64::from(sub.indices()[j])) as u32;
            sub.position(mirror).filter(|&l| l < j)
        })
        .collect();

    let mut data = vec![0i32; n * plane];
    data.par_chunks_mut(plane).enumerate().for_each(|(j, out)| {
        if source[j].is_some() {
            return;
        }
        let u = words[j].bits();
        for (o, &(bits, mask)) in out.iter_mut().zip(&patches) {
            *o = mask.count_ones() as i32 - 2 * ((bits ^ u) & mask).count_ones() as i32;
        }
        if let Some(ctr) = counter {
            ctr.lut.fetch_add((plane * k * k) as u64, Ordering::Relaxed);
        }
    });
    for (j, from) in source.iter().enumerate() {
        if let Some(l) = *from {
            let (head, tail) = data.split_at_mut(j * plane);
            let src = &head[l * plane..(l + 1) * plane];
            for (d, s) in tail[..plane].iter_mut().zip(src) {
                *d = -s;
            }
        }
    }
    Ok(LutTensor {
        n,
        c_in: x.channels,
        h_out,
        w_out,
        data,
    })
}

/// `out[o] = Σ_c T[idx(o, c), c]`, with `indices` in `(c_out, c_in)` order.
pub fn reconstruct_output(t: &LutTensor, indices: &[u32], c_out: usize, counter: Option<&OpCounter>) -> Result<Vec<i32>> {
    if indices.len() != c_out * t.c_in {
        return invalid(format!("{} indices for {c_out}x{} kernels", indices.len(), t.c_in));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i as usize >= t.n) {
        return invalid(format!("index {bad} out of range for n = {}", t.n));
    }
    let hw = t.h_out * t.w_out;
    let mut out = vec![0i32; c_out * hw];
    if hw == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(hw).enumerate().for_each(|(o, acc)| {
        for c in 0..t.c_in {
            let src = t.slice(indices[o * t.c_in + c] as usize, c);
            for (a, &s) in acc.iter_mut().zip(src) {
                *a += s;
            }
        }
        if let Some(ctr) = counter {
            ctr.gather_halves.fetch_add((t.c_in * hw - 1) as u64, Ordering::Relaxed);
        }
    });
    Ok(out)
}

/// Naive correlation with explicit `±1` kernels, `(c_out, c_in)` order.
/// Padded positions contribute 0.
pub fn direct_conv_reference(x: &SignMap, kernels: &[Codeword], geom: &ConvGeometry) -> Result<Vec<i32>> {
    if x.channels != geom.c_in {
        return invalid(format!("input has {} channels, layer expects {}", x.channels, geom.c_in));
    }
    if kernels.len() != geom.c_out * geom.c_in {
        return invalid(format!("{} kernels for {}x{}", kernels.len(), geom.c_out, geom.c_in));
    }
    if kernels.iter().any(|u| u.kernel_size() != geom.kernel_size) {
        return invalid("kernel size mismatch");
    }
    let (h_out, w_out) = geom.output_dims(x.height, x.width)?;
    let k = geom.kernel_size;
    let mut out = vec![0i32; geom.c_out * h_out * w_out];
    for o in 0..geom.c_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = 0i32;
                for c in 0..geom.c_in {
                    let u = &kernels[o * geom.c_in + c];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                continue;
                            }
                            acc += i32::from(u.sign_at(ky * k + kx)) * i32::from(x.at(c, iy as usize, ix as usize));
                        }
                    }
                }
                out[(o * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    Ok(out)
}
