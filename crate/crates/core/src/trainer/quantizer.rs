use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{TrainConfig, LOGIT_SEED_SALT};
use crate::codebook::{kernel_size_for_len, nearest_codeword, Codebook, SubCodebook};
use crate::error::{invalid, Result, SparksError};
use crate::optim::Optimizer;
use crate::pste::{codeword_gradients, AssignmentMap, PermGapTrace, SelectionState, SelectionTrace};

/// A fixed set of real kernels and the total grouping error
/// `f(U) = Σ_c min_{u∈U} ‖u − w_c‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerProblem {
    kernel_size: usize,
    kernels: Vec<f64>,
}

impl QuantizerProblem {
    /// `kernels` holds `K²` values per kernel, row-major.
    pub fn new(kernel_size: usize, kernels: Vec<f64>) -> Result<Self> {
        let kk = kernel_size * kernel_size;
        if kernel_size_for_len(kk)? != kernel_size || !kernels.len().is_multiple_of(kk) || kernels.is_empty() {
            return invalid(format!("{} values do not form K={kernel_size} kernels", kernels.len()));
        }
        if kernels.iter().any(|v| !v.is_finite()) {
            return invalid("kernels contain a non-finite value");
        }
        Ok(QuantizerProblem { kernel_size, kernels })
    }

    /// `count` kernels with i.i.d. `uniform(-1, 1)` entries.
    pub fn random(kernel_size: usize, count: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = (0..count * kernel_size * kernel_size)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        QuantizerProblem::new(kernel_size, kernels)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn kernels(&self) -> &[f64] {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.kernels.len() / (self.kernel_size * self.kernel_size)
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// XNOR-style scale `‖W‖₁ / len`.
    pub fn mean_abs(&self) -> f64 {
        self.kernels.iter().map(|v| v.abs()).sum::<f64>() / self.kernels.len() as f64
    }

    pub fn objective(&self, sub: &SubCodebook) -> f64 {
        let kk = self.kernel_size * self.kernel_size;
        self.kernels
            .chunks_exact(kk)
            .map(|w| {
                let u = nearest_codeword(w, sub).1;
                w.iter()
                    .enumerate()
                    .map(|(i, &x)| (f64::from(u.sign_at(i)) - x).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Output of [`train_quantizer`].
#[derive(Clone, Debug)]
pub struct QuantizerRun {
    /// Noise-free selection after the last step.
    pub sub: SubCodebook,
    pub final_loss: f64,
    /// Loss of the (noisy) selection used at each step.
    pub losses: Vec<f64>,
    pub selection: SelectionTrace,
    pub gaps: PermGapTrace,
}

impl QuantizerRun {
    pub fn write_loss_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(out, "{i},{l}")?;
        }
        Ok(())
    }
}

/// Learns a sub-codebook minimizing the grouping error of `problem` with PSTE.
pub fn train_quantizer(problem: &QuantizerProblem, cfg: &TrainConfig, book: &Codebook) -> Result<QuantizerRun> {
    cfg.validate()?;
    if book.kernel_size() != problem.kernel_size {
        return invalid("codebook and kernels disagree on kernel size");
    }
    let kk = problem.kernel_size * problem.kernel_size;
    let mode = cfg.mode_for(problem.kernel_size);
    let mut state = SelectionState::with_random_logits(book, cfg.n, mode, cfg.sinkhorn(), cfg.seed ^ LOGIT_SEED_SALT)?;
    let dim = state.logits().dim();
    let mut opt = Optimizer::new(cfg.optimizer, dim * dim, cfg.weight_decay);

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut selection = SelectionTrace::default();
    let mut gaps = PermGapTrace::default();
    let mut g_what = vec![0.0; problem.kernels.len()];
    let alpha = if cfg.channel_scale.unwrap_or(false) { problem.mean_abs() } else { 1.0 };

    for step in 0..cfg.steps {
        let sub = state.forward_select(book)?.clone();
        let assign = AssignmentMap::group(&problem.kernels, &sub);
        let mut loss = 0.0;
        for ((w, g), &j) in problem
            .kernels
            .chunks_exact(kk)
            .zip(g_what.chunks_exact_mut(kk))
            .zip(&assign.0)
        {
            let u = sub.codeword(j as usize);
            for i in 0..kk {
                let d = alpha * f64::from(u.sign_at(i)) - w[i];
                loss += d * d;
                // through ŵ = α·u
                g[i] = 2.0 * alpha * d;
            }
        }
        if !loss.is_finite() {
            return Err(SparksError::Training {
                step,
                msg: format!("loss is {loss}"),
            });
        }
        losses.push(loss);
        gaps.record(step, &state)?;
        if step % cfg.log_interval == 0 {
            selection.record(step, &sub);
        }

        let g_u = codeword_gradients(&g_what, &assign, cfg.n);
        let g_x = state.backward(&g_u, book)?;
        if g_x.iter().any(|v| !v.is_finite()) {
            return Err(SparksError::Training {
                step,
                msg: "non-finite logits gradient".into(),
            });
        }
        let lr = cfg.lr_at(step, cfg.steps);
        let grads = g_x.as_slice().expect("standard layout");
        opt.step(state.logits_mut().values_mut().iter_mut(), grads, lr);
    }

    let sub = state.select_deterministic(book)?.clone();
    selection.record(cfg.steps, &sub);
    let final_loss = problem.objective(&sub);
    Ok(QuantizerRun {
        sub,
        final_loss,
        losses,
        selection,
        gaps,
    })
}
