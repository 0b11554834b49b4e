//! Inference on index-coded models.
//!
//! Binarized layers store one `log2(n)`-bit index per kernel into a single
//! sub-codebook shared by the whole model. A layer runs as a codeword lookup
//! table over the input followed by a per-output-channel gather.

mod format;
mod lut;

use std::time::{Duration, Instant};

pub use format::{
    decode_model, encode_model, header_len, load_model, pack_indices, save_model, unpack_indices, FileFormat, FORMAT_VERSION,
    MAGIC_1BIT, MAGIC_SUBBIT,
};
pub use lut::{
    direct_conv_reference, precompute_lut, precompute_lut_with, reconstruct_output, ConvGeometry, LutOptions,
    LutTensor, OpCounter, SignMap,
};

use crate::codebook::{nearest_codeword, Codeword, SubCodebook};
use crate::error::{invalid, Result};

/// Per-output-channel `y = scale·acc + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub scale: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Real-valued convolution, zero padded, applied to a real input.
#[derive(Clone, Debug, PartialEq)]
pub struct RealConv {
    pub geom: ConvGeometry,
    /// `(c_out, c_in, K, K)` row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Binarized convolution stored as packed codeword indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedConv {
    geom: ConvGeometry,
    index_bits: u32,
    packed: Vec<u8>,
    pub affine: Option<Affine>,
}

impl CodedConv {
    /// `indices` are local sub-codebook positions in `(c_out, c_in)` order.
    pub fn new(geom: ConvGeometry, indices: &[u32], index_bits: u32, affine: Option<Affine>) -> Result<Self> {
        if indices.len() != geom.c_out * geom.c_in {
            return invalid(format!("{} indices for {}x{} kernels", indices.len(), geom.c_out, geom.c_in));
        }
        if index_bits == 0 || index_bits > 25 {
            return invalid(format!("index width {index_bits} out of range"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| u64::from(i) >= 1u64 << index_bits) {
            return invalid(format!("index {bad} does not fit in {index_bits} bits"));
        }
        if let Some(a) = &affine {
            if a.scale.len() != geom.c_out || a.bias.len() != geom.c_out {
                return invalid("affine parameters must have one entry per output channel");
            }
        }
        Ok(CodedConv {
            geom,
            index_bits,
            packed: pack_indices(indices, index_bits),
            affine,
        })
    }

    pub(crate) fn from_packed(geom: ConvGeometry, index_bits: u32, packed: Vec<u8>, affine: Option<Affine>) -> Self {
        CodedConv {
            geom,
            index_bits,
            packed,
            affine,
        }
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    pub fn index_bits(&self) -> u32 {
        self.index_bits
    }

    pub fn packed_indices(&self) -> &[u8] {
        &self.packed
    }

    pub fn indices(&self) -> Vec<u32> {
        unpack_indices(&self.packed, self.index_bits, self.geom.c_out * self.geom.c_in)
    }
}

/// Fully connected classifier over globally average-pooled channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out, in)` row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Real(RealConv),
    Coded(CodedConv),
    Dense(Dense),
}

impl Layer {
    fn in_channels(&self) -> usize {
        match self {
            Layer::Real(l) => l.geom.c_in,
            Layer::Coded(l) => l.geom.c_in,
            Layer::Dense(l) => l.in_features,
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            Layer::Real(l) => l.geom.c_out,
            Layer::Coded(l) => l.geom.c_out,
            Layer::Dense(l) => l.out_features,
        }
    }
}

/// A network whose binarized layers share one sub-codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexCodedModel {
    sub: SubCodebook,
    layers: Vec<Layer>,
}

impl IndexCodedModel {
    pub fn new(sub: SubCodebook, layers: Vec<Layer>) -> Result<Self> {
        let bits = sub.index_bits();
        let k = sub.kernel_size();
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Real(l) => {
                    if l.weights.len() != l.geom.c_out * l.geom.c_in * l.geom.kernel_len() || l.bias.len() != l.geom.c_out {
                        return invalid(format!("layer {i}: real conv parameter sizes disagree with geometry"));
                    }
                }
                Layer::Coded(l) => {
                    if l.index_bits != bits {
                        return invalid(format!("layer {i}: {}-bit indices, model uses {bits}", l.index_bits));
                    }
                    if l.geom.kernel_size != k {
                        return invalid(format!("layer {i}: kernel size {} but codewords are {k}x{k}", l.geom.kernel_size));
                    }
                    if l.indices().iter().any(|&j| j as usize >= sub.len()) {
                        return invalid(format!("layer {i}: index out of range for n = {}", sub.len()));
                    }
                }
                Layer::Dense(l) => {
                    if l.weights.len() != l.in_features * l.out_features || l.bias.len() != l.out_features {
                        return invalid(format!("layer {i}: dense parameter sizes disagree"));
                    }
                    if l.in_features == 0 || l.out_features == 0 {
                        return invalid(format!("layer {i}: empty dense layer"));
                    }
                }
            }
            if i > 0 && layers[i - 1].out_channels() != layer.in_channels() {
                return invalid(format!(
                    "layer {i} expects {} channels, previous layer produces {}",
                    layer.in_channels(),
                    layers[i - 1].out_channels()
                ));
            }
        }
        Ok(IndexCodedModel { sub, layers })
    }

    pub fn sub_codebook(&self) -> &SubCodebook {
        &self.sub
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn kernel_size(&self) -> usize {
        self.sub.kernel_size()
    }

    pub fn input_channels(&self) -> Option<usize> {
        self.layers.first().map(Layer::in_channels)
    }

    /// Codeword of every binarized kernel, layer by layer in `(c_out, c_in)` order.
    pub fn kernel_codewords(&self) -> Vec<Codeword> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Coded(c) => Some(c.indices()),
                _ => None,
            })
            .flatten()
            .map(|j| self.sub.codeword(j as usize))
            .collect()
    }

    /// Same model with every binarized kernel moved to its nearest word in `sub`.
    pub fn regroup(&self, sub: SubCodebook) -> Result<Self> {
        if sub.kernel_size() != self.kernel_size() {
            return invalid(format!(
                "sub-codebook is {0}x{0}, model kernels are {1}x{1}",
                sub.kernel_size(),
                self.kernel_size()
            ));
        }
        let bits = sub.index_bits();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Coded(c) => {
                    let idx: Vec<u32> = c
                        .indices()
                        .iter()
                        .map(|&j| nearest_codeword(&self.sub.codeword(j as usize).to_f64(), &sub).0 as u32)
                        .collect();
                    CodedConv::new(c.geom, &idx, bits, c.affine.clone()).map(Layer::Coded)
                }
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        IndexCodedModel::new(sub, layers)
    }

    /// Same model with the sub-codebook reordered by `order` (new position
    /// `p` holds old position `order[p]`) and every index remapped.
    pub fn permute_codebook(&self, order: &[usize]) -> Result<Self> {
        let n = self.sub.len();
        let mut inverse = vec![usize::MAX; n];
        for (p, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return invalid("order is not a permutation of the sub-codebook");
            }
            inverse[old] = p;
        }
        if order.len() != n {
            return invalid("order is not a permutation of the sub-codebook");
        }
        let sub = SubCodebook::new(self.sub.kernel_size(), order.iter().map(|&o| self.sub.indices()[o]).collect())?;
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Coded(c) => {
                    let idx: Vec<u32> = c.indices().iter().map(|&j| inverse[j as usize] as u32).collect();
                    CodedConv::new(c.geom, &idx, c.index_bits, c.affine.clone()).map(Layer::Coded)
                }
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        IndexCodedModel::new(sub, layers)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvPath {
    #[default]
    Lut,
    Direct,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferOptions {
    pub path: ConvPath,
    pub lut: LutOptions,
}

/// Output plus per-layer intermediates of one inference.
#[derive(Clone, Debug, PartialEq)]
pub struct InferTrace {
    pub output: Vec<f32>,
    /// Integer accumulators of each coded layer, in layer order.
    pub accumulators: Vec<Vec<i32>>,
    pub layer_times: Vec<Duration>,
}

/// Real map flowing between layers.
struct Activation {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

fn real_conv(x: &Activation, l: &RealConv) -> Result<Activation> {
    let g = &l.geom;
    let (ho, wo) = g.output_dims(x.h, x.w)?;
    let k = g.kernel_size;
    let mut out = vec![0f32; g.c_out * ho * wo];
    for o in 0..g.c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = l.bias[o];
                for c in 0..g.c_in {
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let wv = l.weights[((o * g.c_in + c) * k + ky) * k + kx];
                            acc += wv * x.data[(c * x.h + iy as usize) * x.w + ix as usize];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Ok(Activation {
        c: g.c_out,
        h: ho,
        w: wo,
        data: out,
    })
}

fn dense(x: &Activation, l: &Dense) -> Activation {
    let hw = (x.h * x.w) as f32;
    let pooled: Vec<f32> = x.data.chunks_exact(x.h * x.w).map(|ch| ch.iter().sum::<f32>() / hw).collect();
    let data = (0..l.out_features)
        .map(|o| {
            let row = &l.weights[o * l.in_features..(o + 1) * l.in_features];
            l.bias[o] + row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f32>()
        })
        .collect();
    Activation {
        c: l.out_features,
        h: 1,
        w: 1,
        data,
    }
}

/// Integer accumulators of a coded layer on a binarized input.
pub fn coded_conv_accumulate(
    x: &SignMap,
    layer: &CodedConv,
    sub: &SubCodebook,
    opts: InferOptions,
    counter: Option<&OpCounter>,
) -> Result<Vec<i32>> {
    let g = &layer.geom;
    if x.channels() != g.c_in {
        return invalid(format!("input has {} channels, layer expects {}", x.channels(), g.c_in));
    }
    let indices = layer.indices();
    match opts.path {
        ConvPath::Lut => {
            let t = precompute_lut_with(x, sub, g.stride, g.padding, opts.lut, counter)?;
            reconstruct_output(&t, &indices, g.c_out, counter)
        }
        ConvPath::Direct => {
            let kernels: Vec<Codeword> = indices.iter().map(|&j| sub.codeword(j as usize)).collect();
            direct_conv_reference(x, &kernels, g)
        }
    }
}

pub fn infer(model: &IndexCodedModel, input: &[f32], dims: (usize, usize, usize), opts: InferOptions) -> Result<Vec<f32>> {
    Ok(infer_detailed(model, input, dims, opts)?.output)
}

/// Runs the model on one `C×H×W` input.
pub fn infer_detailed(
    model: &IndexCodedModel,
    input: &[f32],
    dims: (usize, usize, usize),
    opts: InferOptions,
) -> Result<InferTrace> {
    let (c, h, w) = dims;
    if input.len() != c * h * w {
        return invalid(format!("{} input values for {c}x{h}x{w}", input.len()));
    }
    if let Some(expect) = model.input_channels() {
        if expect != c {
            return invalid(format!("model expects {expect} input channels, got {c}"));
        }
    }
    let mut x = Activation {
        c,
        h,
        w,
        data: input.to_vec(),
    };
    let mut accumulators = Vec::new();
    let mut layer_times = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let start = Instant::now();
        x = match layer {
            Layer::Real(l) => real_conv(&x, l)?,
            Layer::Dense(l) => dense(&x, l),
            Layer::Coded(l) => {
                let xb = SignMap::binarize(x.c, x.h, x.w, &x.data)?;
                let acc = coded_conv_accumulate(&xb, l, &model.sub, opts, None)?;
                let (ho, wo) = l.geom.output_dims(x.h, x.w)?;
                let hw = ho * wo;
                let data = acc
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| match &l.affine {
                        Some(af) => af.scale[i / hw] * a as f32 + af.bias[i / hw],
                        None => a as f32,
                    })
                    .collect();
                accumulators.push(acc);
                Activation {
                    c: l.geom.c_out,
                    h: ho,
                    w: wo,
                    data,
                }
            }
        };
        layer_times.push(start.elapsed());
    }
    Ok(InferTrace {
        output: x.data,
        accumulators,
        layer_times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{select_random, Codebook};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64, n: usize, channels: &[usize], with_head: bool) -> IndexCodedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let book = Codebook::new(3).unwrap();
        let sub = select_random(seed, n, &book).unwrap();
        let bits = sub.index_bits();
        let mut layers = Vec::new();
        for pair in channels.windows(2) {
            let stride = rng.random_range(1..=2);
            let geom = ConvGeometry::new(pair[1], pair[0], 3, stride, 1).unwrap();
            let idx: Vec<u32> = (0..pair[0] * pair[1]).map(|_| rng.random_range(0..n as u32)).collect();
            let affine = Affine {
                scale: (0..pair[1]).map(|_| rng.random_range(0.1..1.0)).collect(),
                bias: (0..pair[1]).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            layers.push(Layer::Coded(CodedConv::new(geom, &idx, bits, Some(affine)).unwrap()));
        }
        if with_head {
            let last = *channels.last().unwrap();
            layers.push(Layer::Dense(Dense {
                in_features: last,
                out_features: 3,
                weights: (0..3 * last).map(|_| rng.random_range(-1.0..1.0)).collect(),
                bias: vec![0.5, -0.5, 0.0],
            }));
        }
        IndexCodedModel::new(sub, layers).unwrap()
    }

    #[test]
    fn lut_and_direct_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..6 {
            let model = random_model(seed, [16, 32, 64][seed as usize % 3], &[3, 8, 5], true);
            let input: Vec<f32> = (0..3 * 10 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = infer_detailed(&model, &input, (3, 10, 9), InferOptions::default()).unwrap();
            let direct = InferOptions {
                path: ConvPath::Direct,
                ..Default::default()
            };
            let b = infer_detailed(&model, &input, (3, 10, 9), direct).unwrap();
            assert_eq!(a.accumulators, b.accumulators);
            assert_eq!(a.output, b.output);
            let fast = InferOptions {
                lut: LutOptions { use_opposites: true },
                ..Default::default()
            };
            assert_eq!(infer(&model, &input, (3, 10, 9), fast).unwrap(), a.output);
        }
    }

    #[test]
    fn zero_input_is_reproducible() {
        let model = random_model(3, 16, &[2, 4, 4], true);
        let input = vec![0.0f32; 2 * 6 * 6];
        let a = infer(&model, &input, (2, 6, 6), InferOptions::default()).unwrap();
        let b = infer(&model, &input, (2, 6, 6), InferOptions::default()).unwrap();
        assert_eq!(a, b);
        // sign(0) = +1 everywhere, so the first layer sees an all-ones map
        let ones = vec![1.0f32; 2 * 6 * 6];
        let t0 = infer_detailed(&model, &input, (2, 6, 6), InferOptions::default()).unwrap();
        let t1 = infer_detailed(&model, &ones, (2, 6, 6), InferOptions::default()).unwrap();
        assert_eq!(t0.accumulators[0], t1.accumulators[0]);
    }

    #[test]
    fn codebook_order_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(7, 32, &[4, 6, 6], true);
        let mut order: Vec<usize> = (0..32).collect();
        order.reverse();
        order.swap(3, 17);
        let permuted = model.permute_codebook(&order).unwrap();
        assert_ne!(permuted.sub_codebook(), model.sub_codebook());
        let input: Vec<f32> = (0..4 * 7 * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(
            infer(&model, &input, (4, 7, 7), InferOptions::default()).unwrap(),
            infer(&permuted, &input, (4, 7, 7), InferOptions::default()).unwrap()
        );
        assert!(model.permute_codebook(&[0; 32]).is_err());
    }

    #[test]
    fn model_validation() {
        let sub = SubCodebook::new(3, vec![0, 1, 2, 3]).unwrap();
        let g = ConvGeometry::new(2, 3, 3, 1, 1).unwrap();
        let l1 = CodedConv::new(g, &[0; 6], 2, None).unwrap();
        let l2 = CodedConv::new(g, &[0; 6], 2, None).unwrap();
        // 2 output channels cannot feed 3 input channels
        assert!(IndexCodedModel::new(sub.clone(), vec![Layer::Coded(l1.clone()), Layer::Coded(l2)]).is_err());
        let wide = CodedConv::new(g, &[0; 6], 3, None).unwrap();
        assert!(IndexCodedModel::new(sub.clone(), vec![Layer::Coded(wide)]).is_err());
        assert!(CodedConv::new(g, &[4; 6], 2, None).is_err());
        let model = IndexCodedModel::new(sub, vec![Layer::Coded(l1)]).unwrap();
        assert!(infer(&model, &[0.0; 10], (2, 5, 1), InferOptions::default()).is_err());
    }

    #[test]
    fn real_conv_and_dense() {
        let sub = SubCodebook::new(3, vec![0, 511]).unwrap();
        let conv = RealConv {
            geom: ConvGeometry::new(1, 1, 3, 1, 1).unwrap(),
            weights: vec![0., 0., 0., 0., 2., 0., 0., 0., 0.],
            bias: vec![1.0],
        };
        let head = Dense {
            in_features: 1,
            out_features: 2,
            weights: vec![1.0, -1.0],
            bias: vec![0.0, 0.5],
        };
        let model = IndexCodedModel::new(sub, vec![Layer::Real(conv), Layer::Dense(head)]).unwrap();
        let out = infer(&model, &[1.0, 2.0, 3.0, 4.0], (1, 2, 2), InferOptions::default()).unwrap();
        // conv doubles and adds 1: mean of 3,5,7,9 is 6
        assert_eq!(out, vec![6.0, -5.5]);
    }

    #[test]
    fn regroup_keeps_members_and_shrinks() {
        let model = random_model(11, 32, &[3, 4, 4], true);
        let words = model.kernel_codewords();
        assert_eq!(words.len(), 3 * 4 + 4 * 4);
        // regrouping onto the same words is the identity
        assert_eq!(model.regroup(model.sub_codebook().clone()).unwrap(), model);
        let small = SubCodebook::new(3, model.sub_codebook().indices()[..4].to_vec()).unwrap();
        let r = model.regroup(small.clone()).unwrap();
        assert_eq!(r.sub_codebook(), &small);
        for (before, after) in words.iter().zip(r.kernel_codewords()) {
            if small.contains(before.bits()) {
                assert_eq!(*before, after);
            }
        }
        assert!(model.regroup(SubCodebook::new(2, vec![0, 1]).unwrap()).is_err());
    }
}
