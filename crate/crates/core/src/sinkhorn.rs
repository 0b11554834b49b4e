//! Gumbel-Sinkhorn relaxation of permutation matrices.
//!
//! The forward pass works entirely on log-matrices: starting from
//! `L₀ = (X + ε) / τ` it alternates row and column log-sum-exp
//! normalization `k` times and exponentiates once at the end. Every
//! normalized log-matrix is kept on a tape so the backward pass can replay
//! the chain exactly.

use ndarray::{Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Row/column sum tolerance expected of a converged `P_GS`.
pub const DOUBLY_STOCHASTIC_TOL: f64 = 1e-6;

/// Uniform samples are clamped into `[U_CLAMP, 1 - U_CLAMP]` before `-log(-log u)`.
pub const U_CLAMP: f64 = 1e-12;

/// Learnable square logits `X`.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationLogits {
    x: Array2<f64>,
}

impl PermutationLogits {
    pub fn new(x: Array2<f64>) -> Result<Self> {
        if x.nrows() != x.ncols() || x.nrows() == 0 {
            return invalid(format!("logits must be square and non-empty, got {:?}", x.dim()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return invalid("logits contain a non-finite entry");
        }
        Ok(PermutationLogits { x })
    }

    pub fn zeros(n: usize) -> Self {
        PermutationLogits {
            x: Array2::zeros((n, n)),
        }
    }

    /// I.i.d. `uniform(-half_width, half_width)` entries.
    pub fn random_uniform(n: usize, half_width: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, n), || rng.random_range(-half_width..half_width));
        PermutationLogits { x }
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.x
    }

    /// Mutable access for optimizers. Callers must keep entries finite.
    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.x
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    /// Number of row+column normalization rounds `k`.
    pub iterations: usize,
    /// Temperature `τ`.
    pub tau: f64,
    pub gumbel: bool,
    pub seed: u64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            iterations: 10,
            tau: 1e-2,
            gumbel: true,
            seed: 0,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return invalid("sinkhorn iterations must be >= 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return invalid(format!("temperature must be positive, got {}", self.tau));
        }
        Ok(())
    }
}

/// Recorded forward pass.
#[derive(Clone, Debug)]
pub struct SinkhornTape {
    tau: f64,
    /// Log-matrices after each normalization: row, column, row, column, ...
    logs: Vec<Array2<f64>>,
    p: Array2<f64>,
}

impl SinkhornTape {
    /// The relaxed permutation `P_GS`.
    pub fn p(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn log_p(&self) -> &Array2<f64> {
        self.logs.last().expect("tape has at least one round")
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn iterations(&self) -> usize {
        self.logs.len() / 2
    }

    /// `max(|row sum - 1|, |column sum - 1|)` of `P_GS`.
    pub fn max_marginal_error(&self) -> f64 {
        marginal_error(&self.p)
    }
}

pub fn marginal_error(p: &Array2<f64>) -> f64 {
    let rows = p.sum_axis(Axis(1));
    let cols = p.sum_axis(Axis(0));
    rows.iter()
        .chain(cols.iter())
        .fold(0.0f64, |m, s| m.max((s - 1.0).abs()))
}

/// Standard Gumbel samples `-log(-log u)`, deterministic in `seed`.
pub fn gumbel_noise(seed: u64, n: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, n), || {
        let u: f64 = rng.random::<f64>().clamp(U_CLAMP, 1.0 - U_CLAMP);
        -(-u.ln()).ln()
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn normalize_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|v| v - lse);
    }
}

fn normalize_cols(a: &mut Array2<f64>) {
    for mut col in a.columns_mut() {
        let lse = log_sum_exp(col.iter().copied());
        col.mapv_inplace(|v| v - lse);
    }
}

/// Computes `S^k((X + ε) / τ)` and records the chain.
pub fn sinkhorn_forward(x: &PermutationLogits, cfg: &SinkhornConfig) -> Result<SinkhornTape> {
    cfg.validate()?;
    if x.x.iter().any(|v| v.is_nan()) {
        return invalid("logits contain NaN");
    }
    let n = x.dim();
    let mut cur = if cfg.gumbel {
        let eps = gumbel_noise(cfg.seed, n);
        (&x.x + &eps) / cfg.tau
    } else {
        &x.x / cfg.tau
    };
    let mut logs = Vec::with_capacity(2 * cfg.iterations);
    for _ in 0..cfg.iterations {
        normalize_rows(&mut cur);
        logs.push(cur.clone());
        normalize_cols(&mut cur);
        logs.push(cur.clone());
    }
    let p = cur.mapv(f64::exp);
    Ok(SinkhornTape {
        tau: cfg.tau,
        logs,
        p,
    })
}

/// Gradient of `⟨g_p, P_GS⟩` with respect to `X`.
///
/// The noise `ε` is a constant, so it does not appear in the gradient.
pub fn sinkhorn_backward(tape: &SinkhornTape, g_p: &Array2<f64>) -> Array2<f64> {
    assert_eq!(g_p.dim(), tape.p.dim(), "cotangent shape mismatch");
    // d/dL of exp(L)
    let mut g = g_p * &tape.p;
    for (step, y) in tape.logs.iter().enumerate().rev() {
        // y = x - lse(x) along an axis; dx = dy - softmax(x) * sum(dy)
        if step % 2 == 1 {
            let sums = g.sum_axis(Axis(0));
            Zip::from(g.rows_mut()).and(y.rows()).for_each(|mut gr, yr| {
                Zip::from(&mut gr)
                    .and(&yr)
                    .and(&sums)
                    .for_each(|gv, &yv, &s| *gv -= yv.exp() * s);
            });
        } else {
            let sums = g.sum_axis(Axis(1));
            Zip::from(g.rows_mut())
                .and(y.rows())
                .and(&sums)
                .for_each(|mut gr, yr, &s| {
                    Zip::from(&mut gr).and(&yr).for_each(|gv, &yv| *gv -= yv.exp() * s);
                });
        }
    }
    g / tape.tau
}
