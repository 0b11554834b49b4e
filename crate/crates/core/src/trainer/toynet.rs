use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binconv::{binconv_backward, binconv_forward, for_each_tap, BinConvCache, BinConvLayer, ChannelAffine};
use super::data::Dataset;
use super::{TrainConfig, LOGIT_SEED_SALT};
use crate::accounting::LayerSpec;
use crate::codebook::{Codebook, SubCodebook};
use crate::engine::{Affine, CodedConv, ConvGeometry, Dense, IndexCodedModel, Layer, RealConv};
use crate::error::{invalid, Result, SparksError};
use crate::optim::Optimizer;
use crate::pste::{codeword_gradients, PermGapTrace, SelectionState, SelectionTrace};

/// Geometry of the small classifier, independent of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyNetConfig {
    pub kernel_size: usize,
    pub stem_channels: usize,
    /// `(channels, stride)` of each binarized layer.
    pub binary: Vec<(usize, usize)>,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        ToyNetConfig {
            kernel_size: 3,
            stem_channels: 8,
            binary: vec![(8, 1), (8, 2)],
        }
    }
}

impl ToyNetConfig {
    /// Layer table for inputs of `dims = (c, h, w)` and `classes` outputs.
    pub fn arch(&self, dims: (usize, usize, usize), classes: usize) -> Result<Vec<LayerSpec>> {
        let (c, h, w) = dims;
        let k = self.kernel_size as u64;
        let p = self.kernel_size / 2;
        let mut arch = vec![LayerSpec::conv(
            "stem",
            (w as u64, h as u64, c as u64),
            (w as u64, h as u64, self.stem_channels as u64),
            k,
            false,
        )];
        let (mut ch, mut hh, mut ww) = (self.stem_channels, h, w);
        for (i, &(out_c, stride)) in self.binary.iter().enumerate() {
            let g = ConvGeometry::new(out_c, ch, self.kernel_size, stride, p)?;
            let (ho, wo) = g.output_dims(hh, ww)?;
            arch.push(LayerSpec::conv(
                &format!("bin{}", i + 1),
                (ww as u64, hh as u64, ch as u64),
                (wo as u64, ho as u64, out_c as u64),
                k,
                true,
            ));
            (ch, hh, ww) = (out_c, ho, wo);
        }
        arch.push(LayerSpec {
            name: "fc".into(),
            in_w: 1,
            in_h: 1,
            in_c: ch as u64,
            out_w: 1,
            out_h: 1,
            out_c: classes as u64,
            k_w: 0,
            k_h: 0,
            binarized: false,
        });
        Ok(arch)
    }
}

/// Convolution geometry of a layer row, with `padding = K/2` and the stride
/// implied by the input/output widths.
fn geometry_of(spec: &LayerSpec) -> Result<ConvGeometry> {
    if spec.k_w != spec.k_h || spec.k_w == 0 {
        return invalid(format!("layer {}: needs a square kernel", spec.name));
    }
    let k = spec.k_w as usize;
    let stride = (spec.in_w / spec.out_w).max(1) as usize;
    let g = ConvGeometry::new(spec.out_c as usize, spec.in_c as usize, k, stride, k / 2)?;
    let dims = g.output_dims(spec.in_h as usize, spec.in_w as usize)?;
    if dims != (spec.out_h as usize, spec.out_w as usize) {
        return invalid(format!(
            "layer {}: {}x{} input cannot give {}x{} with a {k}x{k} kernel and padding {}",
            spec.name,
            spec.in_h,
            spec.in_w,
            spec.out_h,
            spec.out_w,
            k / 2
        ));
    }
    Ok(g)
}

/// Real stem convolution, binarized convolutions, global average pooling and
/// a real classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    input: (usize, usize, usize),
    stem: ConvGeometry,
    stem_w: Vec<f64>,
    stem_b: Vec<f64>,
    layers: Vec<BinConvLayer>,
    classes: usize,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
    /// Grouping target; `None` runs the binarized layers on real weights.
    sub: Option<SubCodebook>,
}

struct SampleGrads {
    loss: f64,
    correct: bool,
    flat: Vec<f64>,
    g_what: Vec<Vec<f64>>,
}

impl ToyNet {
    /// Builds and initializes a net from a layer table: one real conv, one or
    /// more binarized convs, then a dense classifier.
    pub fn from_arch(arch: &[LayerSpec], channel_scale: bool, seed: u64) -> Result<Self> {
        if arch.len() < 3 {
            return invalid("toy net needs a stem, at least one binarized layer and a classifier");
        }
        for l in arch {
            l.validate()?;
        }
        let (first, rest) = arch.split_first().expect("nonempty");
        let (last, middle) = rest.split_last().expect("nonempty");
        if first.binarized || first.is_dense() {
            return invalid(format!("layer {}: the first layer must be a real convolution", first.name));
        }
        if !last.is_dense() || last.binarized {
            return invalid(format!("layer {}: the last layer must be a real dense layer", last.name));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = geometry_of(first)?;
        let fan = (stem.c_in * stem.kernel_len()) as f64;
        let a = 1.0 / fan.sqrt();
        let stem_w = (0..stem.c_out * stem.c_in * stem.kernel_len())
            .map(|_| rng.random_range(-a..a))
            .collect();
        let mut layers = Vec::with_capacity(middle.len());
        let mut prev = first;
        for spec in middle {
            if !spec.binarized {
                return invalid(format!("layer {}: inner layers must be binarized", spec.name));
            }
            if spec.k_w != middle[0].k_w {
                return invalid(format!("layer {}: all binarized layers must share one kernel size", spec.name));
            }
            if (spec.in_w, spec.in_h, spec.in_c) != (prev.out_w, prev.out_h, prev.out_c) {
                return invalid(format!("layer {}: input does not match layer {}", spec.name, prev.name));
            }
            let g = geometry_of(spec)?;
            let weights = (0..g.c_out * g.c_in * g.kernel_len())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            let fan = (g.c_in * g.kernel_len()) as f64;
            let affine = channel_scale.then(|| ChannelAffine {
                scale: vec![2.0 / fan.sqrt(); g.c_out],
                bias: vec![0.0; g.c_out],
            });
            layers.push(BinConvLayer::new(g, weights, affine)?);
            prev = spec;
        }
        if last.in_c != prev.out_c {
            return invalid(format!("layer {}: expects {} features, got {}", last.name, last.in_c, prev.out_c));
        }
        let (features, classes) = (last.in_c as usize, last.out_c as usize);
        let a = 1.0 / (features as f64).sqrt();
        let fc_w = (0..features * classes).map(|_| rng.random_range(-a..a)).collect();
        Ok(ToyNet {
            input: (first.in_c as usize, first.in_h as usize, first.in_w as usize),
            stem,
            stem_w,
            stem_b: vec![0.0; stem.c_out],
            layers,
            classes,
            fc_w,
            fc_b: vec![0.0; classes],
            sub: None,
        })
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn kernel_size(&self) -> usize {
        self.layers[0].geom.kernel_size
    }

    pub fn layers(&self) -> &[BinConvLayer] {
        &self.layers
    }

    pub fn sub_codebook(&self) -> Option<&SubCodebook> {
        self.sub.as_ref()
    }

    /// All latent binarized-layer weights, layer after layer.
    pub fn binary_weights(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().copied()).collect()
    }

    /// Switches to grouped weights (or back to real weights with `None`).
    pub fn set_codebook(&mut self, sub: Option<SubCodebook>) -> Result<()> {
        if let Some(s) = &sub {
            for l in &mut self.layers {
                l.regroup(s)?;
            }
        }
        self.sub = sub;
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let (c, h, w) = self.input;
        if x.len() != c * h * w {
            return invalid(format!("{} input values, net expects {c}x{h}x{w}", x.len()));
        }
        Ok(())
    }

    fn stem_forward(&self, x: &[f64]) -> Result<(Vec<f64>, usize, usize)> {
        let (_, h, w) = self.input;
        let g = &self.stem;
        let (ho, wo) = g.output_dims(h, w)?;
        let kk = g.kernel_len();
        let hw = ho * wo;
        let mut z: Vec<f64> = (0..g.c_out * hw).map(|p| self.stem_b[p / hw]).collect();
        for_each_tap(g, h, w, ho, wo, |o, c, t, p, i| {
            z[p] += self.stem_w[(o * g.c_in + c) * kk + t] * x[i];
        });
        Ok((z, ho, wo))
    }

    /// Class scores for one image.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<BinConvCache>, usize)> {
        self.check_input(x)?;
        let (mut z, mut h, mut w) = self.stem_forward(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, cache) = binconv_forward(&z, h, w, l, self.sub.as_ref())?;
            (h, w) = cache.output_dims();
            caches.push(cache);
            z = y;
        }
        let hw = h * w;
        let pooled: Vec<f64> = z.chunks_exact(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        let f = pooled.len();
        let logits = (0..self.classes)
            .map(|o| self.fc_b[o] + (0..f).map(|i| self.fc_w[o * f + i] * pooled[i]).sum::<f64>())
            .collect();
        Ok((logits, pooled, caches, hw))
    }

    fn param_count(&self) -> usize {
        self.stem_w.len()
            + self.stem_b.len()
            + self
                .layers
                .iter()
                .map(|l| l.weights.len() + l.affine.as_ref().map_or(0, |a| 2 * a.scale.len()))
                .sum::<usize>()
            + self.fc_w.len()
            + self.fc_b.len()
    }

    fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut out: Vec<&mut f64> = Vec::new();
        out.extend(self.stem_w.iter_mut());
        out.extend(self.stem_b.iter_mut());
        for l in &mut self.layers {
            out.extend(l.weights.iter_mut());
            if let Some(a) = &mut l.affine {
                out.extend(a.scale.iter_mut());
                out.extend(a.bias.iter_mut());
            }
        }
        out.extend(self.fc_w.iter_mut());
        out.extend(self.fc_b.iter_mut());
        out
    }

    /// Loss, correctness and flattened gradients for one labeled image.
    fn sample_grads(&self, x: &[f64], label: usize) -> Result<SampleGrads> {
        let (logits, pooled, caches, hw) = self.forward(x)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = sum.ln() + max - logits[label];
        let correct = argmax(&logits) == label;
        let g_logits: Vec<f64> = exps
            .iter()
            .enumerate()
            .map(|(i, e)| e / sum - if i == label { 1.0 } else { 0.0 })
            .collect();

        let f = pooled.len();
        let mut g_fc_w = vec![0.0; self.fc_w.len()];
        let mut g_pooled = vec![0.0; f];
        for o in 0..self.classes {
            for i in 0..f {
                g_fc_w[o * f + i] = g_logits[o] * pooled[i];
                g_pooled[i] += g_logits[o] * self.fc_w[o * f + i];
            }
        }
        let mut g_z: Vec<f64> = (0..f * hw).map(|p| g_pooled[p / hw] / hw as f64).collect();

        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (l, cache) in self.layers.iter().zip(&caches).rev() {
            let g = binconv_backward(&g_z, cache, l)?;
            g_z = g.g_x.clone();
            layer_grads.push(g);
        }
        layer_grads.reverse();

        let (_, h, w) = self.input;
        let g = &self.stem;
        let (ho, wo) = g.output_dims(h, w)?;
        let kk = g.kernel_len();
        let mut g_stem_w = vec![0.0; self.stem_w.len()];
        for_each_tap(g, h, w, ho, wo, |o, c, t, p, i| {
            g_stem_w[(o * g.c_in + c) * kk + t] += g_z[p] * x[i];
        });
        let g_stem_b: Vec<f64> = g_z.chunks_exact(ho * wo).map(|ch| ch.iter().sum()).collect();

        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend(g_stem_w);
        flat.extend(g_stem_b);
        let mut g_what = Vec::with_capacity(self.layers.len());
        for (l, lg) in self.layers.iter().zip(layer_grads) {
            flat.extend(&lg.g_w);
            if l.affine.is_some() {
                flat.extend(&lg.g_scale);
                flat.extend(&lg.g_bias);
            }
            g_what.push(lg.g_what);
        }
        flat.extend(g_fc_w);
        flat.extend(g_logits);
        Ok(SampleGrads {
            loss,
            correct,
            flat,
            g_what,
        })
    }

    /// Mean cross-entropy and accuracy over a dataset.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        if data.is_empty() {
            return invalid("cannot evaluate on an empty dataset");
        }
        let results: Vec<(f64, bool)> = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let logits = self.logits(&data.image(i))?;
                let label = usize::from(data.label(i));
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                Ok((lse - logits[label], argmax(&logits) == label))
            })
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
        let acc = results.iter().filter(|r| r.1).count() as f64 / n;
        Ok((loss, acc))
    }

    /// Rescales each binarized layer's channel scale by the mean absolute
    /// latent weight of that channel, keeping output magnitudes comparable
    /// when the real weights are replaced by `±1` codewords.
    fn rescale_for_codewords(&mut self) {
        for l in &mut self.layers {
            let per = l.geom.c_in * l.geom.kernel_len();
            if let Some(a) = &mut l.affine {
                for (o, s) in a.scale.iter_mut().enumerate() {
                    let m = l.weights[o * per..(o + 1) * per].iter().map(|v| v.abs()).sum::<f64>() / per as f64;
                    *s *= m.max(1e-3);
                }
            }
        }
    }

    /// Index-coded copy of the net; requires a sub-codebook.
    pub fn export(&self) -> Result<IndexCodedModel> {
        let Some(sub) = &self.sub else {
            return Err(SparksError::State("export needs a sub-codebook; call set_codebook".into()));
        };
        let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut layers = vec![Layer::Real(RealConv {
            geom: self.stem,
            weights: f32s(&self.stem_w),
            bias: f32s(&self.stem_b),
        })];
        for l in &self.layers {
            let affine = l.affine.as_ref().map(|a| Affine {
                scale: f32s(&a.scale),
                bias: f32s(&a.bias),
            });
            layers.push(Layer::Coded(CodedConv::new(l.geom, &l.assign.0, sub.index_bits(), affine)?));
        }
        let features = self.fc_w.len() / self.classes;
        layers.push(Layer::Dense(Dense {
            in_features: features,
            out_features: self.classes,
            weights: f32s(&self.fc_w),
            bias: f32s(&self.fc_b),
        }));
        IndexCodedModel::new(sub.clone(), layers)
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            input: [self.input.0, self.input.1, self.input.2],
            stem: ConvRecord::of(&self.stem, &self.stem_w, Some(&self.stem_b), None),
            layers: self
                .layers
                .iter()
                .map(|l| ConvRecord::of(&l.geom, &l.weights, None, l.affine.as_ref()))
                .collect(),
            classes: self.classes,
            fc_w: self.fc_w.clone(),
            fc_b: self.fc_b.clone(),
            sub: self.sub.as_ref().map(|s| (s.kernel_size(), s.indices().to_vec())),
        };
        serde_json::to_string_pretty(&ck).map_err(|e| SparksError::State(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| SparksError::InvalidArgument(format!("bad checkpoint: {e}")))?;
        let stem = ck.stem.geometry()?;
        let stem_b = ck.stem.bias.clone().unwrap_or_default();
        if ck.stem.weights.len() != stem.c_out * stem.c_in * stem.kernel_len() || stem_b.len() != stem.c_out {
            return invalid("checkpoint stem parameters disagree with its geometry");
        }
        let mut layers = Vec::with_capacity(ck.layers.len());
        for rec in &ck.layers {
            let affine = match (&rec.scale, &rec.bias) {
                (Some(s), Some(b)) => Some(ChannelAffine {
                    scale: s.clone(),
                    bias: b.clone(),
                }),
                (None, None) => None,
                _ => return invalid("checkpoint layer has a scale without a bias or the reverse"),
            };
            layers.push(BinConvLayer::new(rec.geometry()?, rec.weights.clone(), affine)?);
        }
        if layers.is_empty() || ck.classes == 0 {
            return invalid("checkpoint has no binarized layers or no classes");
        }
        let features = layers.last().expect("nonempty").geom.c_out;
        if ck.fc_w.len() != features * ck.classes || ck.fc_b.len() != ck.classes {
            return invalid("checkpoint classifier sizes disagree");
        }
        let mut net = ToyNet {
            input: (ck.input[0], ck.input[1], ck.input[2]),
            stem,
            stem_w: ck.stem.weights,
            stem_b,
            layers,
            classes: ck.classes,
            fc_w: ck.fc_w,
            fc_b: ck.fc_b,
            sub: None,
        };
        if let Some((k, idx)) = ck.sub {
            net.set_codebook(Some(SubCodebook::new(k, idx)?))?;
        }
        Ok(net)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        ToyNet::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ConvRecord {
    c_out: usize,
    c_in: usize,
    kernel_size: usize,
    stride: usize,
    padding: usize,
    weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
}

impl ConvRecord {
    fn of(g: &ConvGeometry, w: &[f64], bias: Option<&[f64]>, affine: Option<&ChannelAffine>) -> Self {
        ConvRecord {
            c_out: g.c_out,
            c_in: g.c_in,
            kernel_size: g.kernel_size,
            stride: g.stride,
            padding: g.padding,
            weights: w.to_vec(),
            scale: affine.map(|a| a.scale.clone()),
            bias: bias.map(<[f64]>::to_vec).or_else(|| affine.map(|a| a.bias.clone())),
        }
    }

    fn geometry(&self) -> Result<ConvGeometry> {
        ConvGeometry::new(self.c_out, self.c_in, self.kernel_size, self.stride, self.padding)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    input: [usize; 3],
    stem: ConvRecord,
    layers: Vec<ConvRecord>,
    classes: usize,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
    #[serde(default)]
    sub: Option<(usize, Vec<u32>)>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One row of the metrics CSV: running means over an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ToyRun {
    pub net: ToyNet,
    pub metrics: Vec<EpochMetrics>,
    pub selection: SelectionTrace,
    pub gaps: PermGapTrace,
    /// Training-set accuracy with the final noise-free selection.
    pub final_accuracy: f64,
}

impl ToyRun {
    pub fn write_metrics_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,loss,accuracy")?;
        for m in &self.metrics {
            writeln!(out, "{},{},{}", m.step, m.loss, m.accuracy)?;
        }
        Ok(())
    }
}

/// Iterates shuffled mini-batches and records per-epoch running metrics.
struct BatchStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    loss_sum: f64,
    correct: usize,
    seen: usize,
}

impl BatchStream {
    fn new(len: usize, batch: usize, seed: u64) -> Self {
        BatchStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            cursor: len,
            batch: batch.min(len),
            loss_sum: 0.0,
            correct: 0,
            seen: 0,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }

    /// Adds batch results; returns the epoch summary when an epoch just ended.
    fn record(&mut self, step: usize, loss_sum: f64, correct: usize, count: usize) -> Option<EpochMetrics> {
        self.loss_sum += loss_sum;
        self.correct += correct;
        self.seen += count;
        if self.cursor < self.order.len() {
            return None;
        }
        let m = EpochMetrics {
            step,
            loss: self.loss_sum / self.seen as f64,
            accuracy: self.correct as f64 / self.seen as f64,
        };
        (self.loss_sum, self.correct, self.seen) = (0.0, 0, 0);
        Some(m)
    }
}

/// Flat parameter gradient, per-layer `g_what`, summed loss, correct count.
type BatchGrads = (Vec<f64>, Vec<Vec<f64>>, f64, usize);

/// Per-batch mean gradients, summed in sample order.
fn batch_grads(net: &ToyNet, data: &Dataset, batch: &[usize]) -> Result<BatchGrads> {
    let per: Vec<SampleGrads> = batch
        .par_iter()
        .map(|&i| net.sample_grads(&data.image(i), usize::from(data.label(i))))
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut flat = vec![0.0; per[0].flat.len()];
    let mut g_what: Vec<Vec<f64>> = per[0].g_what.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut loss = 0.0;
    let mut correct = 0;
    for s in &per {
        for (a, b) in flat.iter_mut().zip(&s.flat) {
            *a += b * inv;
        }
        for (acc, g) in g_what.iter_mut().zip(&s.g_what) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b * inv;
            }
        }
        loss += s.loss;
        correct += usize::from(s.correct);
    }
    if !loss.is_finite() {
        return Err(SparksError::Training {
            step: 0,
            msg: format!("loss is {loss}"),
        });
    }
    Ok((flat, g_what, loss, correct))
}

/// Two-phase training: `cfg.warmup_steps` with real weights and sign
/// activations, then `cfg.steps` with grouped weights and PSTE selection of
/// a shared `cfg.n`-word sub-codebook, then `cfg.settle_steps` of weight
/// updates under the final noise-free selection. The stem and classifier
/// stay real.
pub fn train_toynet(data: &Dataset, arch: &[LayerSpec], cfg: &TrainConfig) -> Result<ToyRun> {
    cfg.validate()?;
    if data.is_empty() {
        return invalid("dataset is empty");
    }
    let mut net = ToyNet::from_arch(arch, cfg.channel_scale.unwrap_or(true), cfg.seed)?;
    if net.input_dims() != data.dims() {
        return invalid(format!("dataset images are {:?}, net expects {:?}", data.dims(), net.input_dims()));
    }
    if data.classes() > net.classes() {
        return invalid(format!("dataset has {} classes, classifier has {}", data.classes(), net.classes()));
    }
    let k = net.kernel_size();
    let book = Codebook::new(k)?;
    // With every codeword kept, any permutation selects the same set.
    let full = cfg.n == book.len();
    let mut state = if full {
        None
    } else {
        let mode = cfg.mode_for(k);
        Some(SelectionState::with_random_logits(&book, cfg.n, mode, cfg.sinkhorn(), cfg.seed ^ LOGIT_SEED_SALT)?)
    };
    let mut opt = Optimizer::new(cfg.optimizer, net.param_count(), cfg.weight_decay);
    let mut x_opt = state
        .as_ref()
        .map(|s| Optimizer::new(cfg.optimizer, s.logits().dim().pow(2), cfg.weight_decay));

    let mut stream = BatchStream::new(data.len(), cfg.batch, cfg.seed.wrapping_add(1));
    let mut metrics = Vec::new();
    let mut selection = SelectionTrace::default();
    let mut gaps = PermGapTrace::default();
    let fail = |step: usize, e: SparksError| match e {
        SparksError::Training { msg, .. } => SparksError::Training { step, msg },
        other => other,
    };

    for step in 0..cfg.warmup_steps {
        let batch = stream.next();
        let (flat, _, loss, correct) = batch_grads(&net, data, &batch).map_err(|e| fail(step, e))?;
        opt.step(net.params_mut(), &flat, cfg.lr_at(step, cfg.warmup_steps));
        if let Some(m) = stream.record(step, loss, correct, batch.len()) {
            log::debug!("warmup step {step}: loss {:.4} acc {:.3}", m.loss, m.accuracy);
            metrics.push(m);
        }
    }

    net.rescale_for_codewords();
    if full {
        net.set_codebook(Some(SubCodebook::full(k)?))?;
    }
    for s in 0..cfg.steps {
        let step = cfg.warmup_steps + s;
        if let Some(st) = &mut state {
            let sub = st.forward_select(&book)?.clone();
            net.set_codebook(Some(sub.clone()))?;
            gaps.record(step, st)?;
            if s % cfg.log_interval == 0 {
                selection.record(step, &sub);
            }
        } else {
            let sub = net.sub_codebook().expect("full codebook set").clone();
            for l in &mut net.layers {
                l.regroup(&sub)?;
            }
        }
        let batch = stream.next();
        let (flat, g_what, loss, correct) = batch_grads(&net, data, &batch).map_err(|e| fail(step, e))?;
        let lr = cfg.lr_at(s, cfg.steps);
        if let (Some(st), Some(xo)) = (&mut state, &mut x_opt) {
            let mut g_u = codeword_gradients(&g_what[0], &net.layers[0].assign, cfg.n);
            for (l, g) in net.layers.iter().zip(&g_what).skip(1) {
                g_u += &codeword_gradients(g, &l.assign, cfg.n);
            }
            let g_x = st.backward(&g_u, &book)?;
            if g_x.iter().any(|v| !v.is_finite()) {
                return Err(SparksError::Training {
                    step,
                    msg: "non-finite logits gradient".into(),
                });
            }
            xo.step(st.logits_mut().values_mut().iter_mut(), g_x.as_slice().expect("standard layout"), lr);
        }
        opt.step(net.params_mut(), &flat, lr);
        if let Some(m) = stream.record(step, loss, correct, batch.len()) {
            log::debug!("step {step}: loss {:.4} acc {:.3}", m.loss, m.accuracy);
            metrics.push(m);
        }
    }

    let final_sub = match &mut state {
        Some(st) => st.select_deterministic(&book)?.clone(),
        None => SubCodebook::full(k)?,
    };
    selection.record(cfg.warmup_steps + cfg.steps, &final_sub);
    net.set_codebook(Some(final_sub))?;
    for s in 0..cfg.settle_steps {
        let step = cfg.warmup_steps + cfg.steps + s;
        let batch = stream.next();
        let (flat, _, loss, correct) = batch_grads(&net, data, &batch).map_err(|e| fail(step, e))?;
        opt.step(net.params_mut(), &flat, cfg.lr_at(s, cfg.settle_steps));
        let sub = net.sub_codebook().expect("codebook set").clone();
        net.set_codebook(Some(sub))?;
        if let Some(m) = stream.record(step, loss, correct, batch.len()) {
            log::debug!("settle step {step}: loss {:.4} acc {:.3}", m.loss, m.accuracy);
            metrics.push(m);
        }
    }
    let (_, final_accuracy) = net.evaluate(data)?;
    Ok(ToyRun {
        net,
        metrics,
        selection,
        gaps,
        final_accuracy,
    })
}
