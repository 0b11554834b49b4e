use crate::codebook::SubCodebook;
use crate::engine::ConvGeometry;
use crate::error::{invalid, Result};
use crate::pste::{ste_weight_grad, AssignmentMap};

/// Per-output-channel `y = scale·acc + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAffine {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Convolution with sign activations and either real or grouped weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BinConvLayer {
    pub geom: ConvGeometry,
    /// Latent real weights, `(c_out, c_in, K²)`.
    pub weights: Vec<f64>,
    pub affine: Option<ChannelAffine>,
    /// Local sub-codebook index of every kernel.
    pub assign: AssignmentMap,
}

impl BinConvLayer {
    pub fn new(geom: ConvGeometry, weights: Vec<f64>, affine: Option<ChannelAffine>) -> Result<Self> {
        if weights.len() != geom.c_out * geom.c_in * geom.kernel_len() {
            return invalid(format!("{} weights for geometry {geom:?}", weights.len()));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return invalid("weights contain a non-finite value");
        }
        if let Some(a) = &affine {
            if a.scale.len() != geom.c_out || a.bias.len() != geom.c_out {
                return invalid("affine parameters must have one entry per output channel");
            }
        }
        Ok(BinConvLayer {
            geom,
            weights,
            affine,
            assign: AssignmentMap::default(),
        })
    }

    /// Groups every kernel to its nearest codeword in `sub`.
    pub fn regroup(&mut self, sub: &SubCodebook) -> Result<()> {
        if sub.kernel_size() != self.geom.kernel_size {
            return invalid("sub-codebook kernel size differs from the layer's");
        }
        self.assign = AssignmentMap::group(&self.weights, sub);
        Ok(())
    }

    fn grouped_kernels(&self, sub: &SubCodebook) -> Result<Vec<i8>> {
        if self.assign.len() != self.geom.c_out * self.geom.c_in {
            return invalid("assignment does not cover every kernel; call regroup first");
        }
        if sub.kernel_size() != self.geom.kernel_size {
            return invalid("sub-codebook kernel size differs from the layer's");
        }
        let mut out = Vec::with_capacity(self.weights.len());
        for &j in &self.assign.0 {
            if j as usize >= sub.len() {
                return invalid(format!("assignment {j} out of range for n = {}", sub.len()));
            }
            out.extend(sub.codeword(j as usize).to_signs());
        }
        Ok(out)
    }
}

/// State saved by [`binconv_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BinConvCache {
    input: Vec<f64>,
    signs: Vec<i8>,
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
    /// Pre-affine accumulations; integers on the grouped path.
    pub acc: Vec<f64>,
    /// Effective kernels `ŵ`.
    kernels: Vec<f64>,
    grouped: bool,
}

impl BinConvCache {
    pub fn output_dims(&self) -> (usize, usize) {
        (self.h_out, self.w_out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinConvGrads {
    pub g_x: Vec<f64>,
    /// Gradient w.r.t. the effective kernels.
    pub g_what: Vec<f64>,
    /// Gradient w.r.t. the latent weights.
    pub g_w: Vec<f64>,
    pub g_scale: Vec<f64>,
    pub g_bias: Vec<f64>,
}

/// Calls `f(o, c, k_index, out_pos, in_pos)` for every tap that lands inside the input.
#[inline]
pub(crate) fn for_each_tap(g: &ConvGeometry, h: usize, w: usize, h_out: usize, w_out: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let k = g.kernel_size;
    for o in 0..g.c_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let p = (o * h_out + oy) * w_out + ox;
                for c in 0..g.c_in {
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            f(o, c, ky * k + kx, p, (c * h + iy as usize) * w + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass on one `c_in×h×w` input. With `sub = None` the latent real
/// weights are used directly; otherwise each kernel is its assigned codeword
/// and accumulation is in integers.
pub fn binconv_forward(
    x: &[f64],
    h: usize,
    w: usize,
    layer: &BinConvLayer,
    sub: Option<&SubCodebook>,
) -> Result<(Vec<f64>, BinConvCache)> {
    let g = &layer.geom;
    if x.len() != g.c_in * h * w {
        return invalid(format!("{} input values for {}x{h}x{w}", x.len(), g.c_in));
    }
    let (h_out, w_out) = g.output_dims(h, w)?;
    let kk = g.kernel_len();
    let signs: Vec<i8> = x.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
    let hw = h_out * w_out;

    let (acc, kernels) = match sub {
        Some(sub) => {
            let kern = layer.grouped_kernels(sub)?;
            let mut acc = vec![0i32; g.c_out * hw];
            for_each_tap(g, h, w, h_out, w_out, |o, c, t, p, i| {
                acc[p] += i32::from(kern[(o * g.c_in + c) * kk + t]) * i32::from(signs[i]);
            });
            (acc.into_iter().map(f64::from).collect(), kern.into_iter().map(f64::from).collect())
        }
        None => {
            let mut acc = vec![0f64; g.c_out * hw];
            for_each_tap(g, h, w, h_out, w_out, |o, c, t, p, i| {
                acc[p] += layer.weights[(o * g.c_in + c) * kk + t] * f64::from(signs[i]);
            });
            (acc, layer.weights.clone())
        }
    };
    let y = match &layer.affine {
        Some(a) => acc.iter().enumerate().map(|(p, &v)| a.scale[p / hw] * v + a.bias[p / hw]).collect(),
        None => acc.clone(),
    };
    Ok((
        y,
        BinConvCache {
            input: x.to_vec(),
            signs,
            h,
            w,
            h_out,
            w_out,
            acc,
            kernels,
            grouped: sub.is_some(),
        },
    ))
}

/// Backward pass. Activation and weight gradients pass the sign only where
/// the real value lies in `(−1, 1)`.
pub fn binconv_backward(g_y: &[f64], cache: &BinConvCache, layer: &BinConvLayer) -> Result<BinConvGrads> {
    let g = &layer.geom;
    let hw = cache.h_out * cache.w_out;
    if g_y.len() != g.c_out * hw {
        return invalid(format!("{} output gradients for {}x{hw}", g_y.len(), g.c_out));
    }
    let kk = g.kernel_len();
    let (g_acc, g_scale, g_bias) = match &layer.affine {
        Some(a) => {
            let mut g_scale = vec![0.0; g.c_out];
            let mut g_bias = vec![0.0; g.c_out];
            let g_acc = g_y
                .iter()
                .enumerate()
                .map(|(p, &gy)| {
                    let o = p / hw;
                    g_scale[o] += gy * cache.acc[p];
                    g_bias[o] += gy;
                    gy * a.scale[o]
                })
                .collect();
            (g_acc, g_scale, g_bias)
        }
        None => (g_y.to_vec(), Vec::new(), Vec::new()),
    };

    let mut g_what = vec![0.0; layer.weights.len()];
    let mut g_xb = vec![0.0; cache.input.len()];
    for_each_tap(g, cache.h, cache.w, cache.h_out, cache.w_out, |o, c, t, p, i| {
        let k = (o * g.c_in + c) * kk + t;
        g_what[k] += g_acc[p] * f64::from(cache.signs[i]);
        g_xb[i] += g_acc[p] * cache.kernels[k];
    });
    let g_x = g_xb
        .iter()
        .zip(&cache.input)
        .map(|(&gx, &x)| if x.abs() < 1.0 { gx } else { 0.0 })
        .collect();
    let g_w = if cache.grouped {
        ste_weight_grad(&g_what, &layer.weights)
    } else {
        g_what.clone()
    };
    Ok(BinConvGrads {
        g_x,
        g_what,
        g_w,
        g_scale,
        g_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{select_random, Codebook, Codeword};
    use crate::engine::{precompute_lut, reconstruct_output, SignMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(geom: ConvGeometry, affine: bool, rng: &mut impl Rng) -> BinConvLayer {
        let weights = (0..geom.c_out * geom.c_in * geom.kernel_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let affine = affine.then(|| ChannelAffine {
            scale: (0..geom.c_out).map(|_| rng.random_range(0.2..1.5)).collect(),
            bias: (0..geom.c_out).map(|_| rng.random_range(-0.5..0.5)).collect(),
        });
        BinConvLayer::new(geom, weights, affine).unwrap()
    }

    fn random_input(len: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn full_codebook_with_sign_weights_is_plain_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let geom = ConvGeometry::new(3, 2, 3, 1, 1).unwrap();
        let mut layer = random_layer(geom, false, &mut rng);
        layer.weights.iter_mut().for_each(|v| *v = if *v >= 0.0 { 1.0 } else { -1.0 });
        let full = SubCodebook::full(3).unwrap();
        layer.regroup(&full).unwrap();
        let x = random_input(2 * 5 * 5, &mut rng);
        let (grouped, _) = binconv_forward(&x, 5, 5, &layer, Some(&full)).unwrap();
        let (real, _) = binconv_forward(&x, 5, 5, &layer, None).unwrap();
        assert_eq!(grouped, real);
    }

    #[test]
    fn single_channel_hand_check() {
        let geom = ConvGeometry::new(1, 1, 3, 1, 0).unwrap();
        let u = Codeword::from_signs(&[1, -1, 1, -1, 1, -1, 1, -1, 1]).unwrap();
        let sub = SubCodebook::new(3, vec![u.bits(), 0]).unwrap();
        let mut layer = BinConvLayer::new(geom, u.to_f64(), None).unwrap();
        layer.regroup(&sub).unwrap();
        let x = [0.3, 0.2, -0.1, -2.0, 0.0, 1.0, 0.5, -0.5, 0.7];
        // signs: + + - - + + + - +  against + - + - + - + - +
        let (y, _) = binconv_forward(&x, 3, 3, &layer, Some(&sub)).unwrap();
        assert_eq!(y, vec![1.0 - 1.0 - 1.0 + 1.0 + 1.0 - 1.0 + 1.0 + 1.0 + 1.0]);
    }

    #[test]
    fn matches_engine_lut_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let book = Codebook::new(3).unwrap();
        for (stride, n) in [(1, 16), (2, 32), (1, 64)] {
            let geom = ConvGeometry::new(5, 4, 3, stride, 1).unwrap();
            let mut layer = random_layer(geom, false, &mut rng);
            let sub = select_random(stride as u64, n, &book).unwrap();
            layer.regroup(&sub).unwrap();
            let x = random_input(4 * 7 * 6, &mut rng);
            let (y, _) = binconv_forward(&x, 7, 6, &layer, Some(&sub)).unwrap();
            let t = precompute_lut(&SignMap::binarize(4, 7, 6, &x).unwrap(), &sub, stride, 1).unwrap();
            let lut = reconstruct_output(&t, &layer.assign.0, 5, None).unwrap();
            assert_eq!(y, lut.iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geom = ConvGeometry::new(2, 2, 3, 2, 1).unwrap();
        let layer = random_layer(geom, true, &mut rng);
        let x = random_input(2 * 6 * 6, &mut rng);
        let (y, cache) = binconv_forward(&x, 6, 6, &layer, None).unwrap();
        let g = binconv_backward(&vec![0.0; y.len()], &cache, &layer).unwrap();
        for v in [&g.g_x, &g.g_w, &g.g_what, &g.g_scale, &g.g_bias] {
            assert!(v.iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn saturated_kernel_gets_no_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = ConvGeometry::new(2, 1, 3, 1, 1).unwrap();
        let mut layer = random_layer(geom, false, &mut rng);
        for v in &mut layer.weights[..9] {
            *v = 1.5 * v.signum();
        }
        let sub = SubCodebook::full(3).unwrap();
        layer.regroup(&sub).unwrap();
        let x = random_input(16, &mut rng);
        let (y, cache) = binconv_forward(&x, 4, 4, &layer, Some(&sub)).unwrap();
        let g = binconv_backward(&vec![1.0; y.len()], &cache, &layer).unwrap();
        assert!(g.g_w[..9].iter().all(|&v| v == 0.0));
        assert!(g.g_what[..9].iter().any(|&v| v != 0.0));
        assert!(g.g_w[9..].iter().any(|&v| v != 0.0));
    }

    /// `Σ r·y` where activations pass through `clip(x, −1, 1)` instead of sign;
    /// its gradient is what the activation STE reports.
    fn surrogate_loss(x: &[f64], h: usize, w: usize, layer: &BinConvLayer, r: &[f64]) -> f64 {
        let g = &layer.geom;
        let (ho, wo) = g.output_dims(h, w).unwrap();
        let xc: Vec<f64> = x.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let mut acc = vec![0.0; g.c_out * ho * wo];
        for_each_tap(g, h, w, ho, wo, |o, c, t, p, i| {
            acc[p] += layer.weights[(o * g.c_in + c) * g.kernel_len() + t] * xc[i];
        });
        let hw = ho * wo;
        acc.iter()
            .enumerate()
            .map(|(p, &a)| {
                let y = match &layer.affine {
                    Some(af) => af.scale[p / hw] * a + af.bias[p / hw],
                    None => a,
                };
                r[p] * y
            })
            .sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn finite_differences_on_real_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = 1e-6;
        for stride in [1, 2] {
            let geom = ConvGeometry::new(3, 2, 3, stride, 1).unwrap();
            let layer = random_layer(geom, true, &mut rng);
            let x = random_input(2 * 5 * 5, &mut rng);
            let (y, cache) = binconv_forward(&x, 5, 5, &layer, None).unwrap();
            let r: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grads = binconv_backward(&r, &cache, &layer).unwrap();
            let loss = |l: &BinConvLayer| -> f64 {
                let (y, _) = binconv_forward(&x, 5, 5, l, None).unwrap();
                y.iter().zip(&r).map(|(a, b)| a * b).sum()
            };

            for i in 0..layer.weights.len() {
                let (mut p, mut m) = (layer.clone(), layer.clone());
                p.weights[i] += eps;
                m.weights[i] -= eps;
                assert!(rel_err((loss(&p) - loss(&m)) / (2.0 * eps), grads.g_w[i]) <= 1e-3);
            }
            for o in 0..3 {
                let (mut p, mut m) = (layer.clone(), layer.clone());
                p.affine.as_mut().unwrap().scale[o] += eps;
                m.affine.as_mut().unwrap().scale[o] -= eps;
                assert!(rel_err((loss(&p) - loss(&m)) / (2.0 * eps), grads.g_scale[o]) <= 1e-3);
                let (mut p, mut m) = (layer.clone(), layer.clone());
                p.affine.as_mut().unwrap().bias[o] += eps;
                m.affine.as_mut().unwrap().bias[o] -= eps;
                assert!(rel_err((loss(&p) - loss(&m)) / (2.0 * eps), grads.g_bias[o]) <= 1e-3);
            }
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += eps;
                xm[i] -= eps;
                let fd = (surrogate_loss(&xp, 5, 5, &layer, &r) - surrogate_loss(&xm, 5, 5, &layer, &r)) / (2.0 * eps);
                assert!(rel_err(fd, grads.g_x[i]) <= 1e-3, "x[{i}] = {}: {fd} vs {}", x[i], grads.g_x[i]);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let geom = ConvGeometry::new(2, 1, 3, 1, 1).unwrap();
        assert!(BinConvLayer::new(geom, vec![0.0; 17], None).is_err());
        let layer = BinConvLayer::new(geom, vec![0.1; 18], None).unwrap();
        assert!(binconv_forward(&[0.0; 15], 4, 4, &layer, None).is_err());
        let sub = SubCodebook::full(3).unwrap();
        // not grouped yet
        assert!(binconv_forward(&[0.0; 16], 4, 4, &layer, Some(&sub)).is_err());
    }
}
