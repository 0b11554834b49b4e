//! Permutation straight-through estimator.
//!
//! Forward: `P_GS = S^k((X + ε)/τ)`, `P_real = Hungarian(P_GS)`, and the
//! sub-codebook is the first columns of `B · P_real`. Backward: the codeword
//! gradient `g(U)` is lifted to `g(P_real) = Bᵀ g(U) Vᵀ`, copied unchanged
//! onto `P_GS`, and pushed through the recorded Sinkhorn chain.
//!
//! In [`SelectionMode::Symmetric`] the all-(−1) and all-(+1) codewords are
//! always kept and the permutation only ranks the `(N − 2) / 2`
//! representatives `1..N/2`; every selected representative brings its
//! sign-flipped mirror along.

use std::io::Write;

use ndarray::Array2;

use crate::assignment::{hungarian_max, Permutation};
use crate::codebook::{nearest_codeword, Codebook, SubCodebook};
use crate::error::{invalid, Result, SparksError};
use crate::sinkhorn::{sinkhorn_backward, sinkhorn_forward, PermutationLogits, SinkhornConfig, SinkhornTape};

/// Half width of the default uniform initialization of `X`.
pub const DEFAULT_LOGIT_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    Plain,
    Symmetric,
}

impl SelectionMode {
    /// Symmetric for 3×3 kernels, plain otherwise.
    pub fn default_for(kernel_size: usize) -> Self {
        if kernel_size == 3 {
            SelectionMode::Symmetric
        } else {
            SelectionMode::Plain
        }
    }

    /// Dimension `N'` of the permutation for a codebook of size `N`.
    pub fn permutation_dim(self, book: &Codebook) -> usize {
        match self {
            SelectionMode::Plain => book.len(),
            SelectionMode::Symmetric => (book.len() - 2) / 2,
        }
    }

    /// Number of permutation columns `n'` that pick codewords.
    pub fn selected_columns(self, n: usize) -> usize {
        match self {
            SelectionMode::Plain => n,
            SelectionMode::Symmetric => n.saturating_sub(2) / 2,
        }
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = SparksError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(SelectionMode::Plain),
            "symmetric" => Ok(SelectionMode::Symmetric),
            other => invalid(format!("unknown selection mode {other:?}")),
        }
    }
}

/// Local sub-codebook index for every kernel, in kernel order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AssignmentMap(pub Vec<u32>);

impl AssignmentMap {
    /// Groups flattened kernels (`K²` values each) to their nearest codeword.
    pub fn group(kernels: &[f64], sub: &SubCodebook) -> Self {
        let kk = sub.kernel_size() * sub.kernel_size();
        AssignmentMap(
            kernels
                .chunks_exact(kk)
                .map(|w| nearest_codeword(w, sub).0 as u32)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-kernel STE for weights: gradient passes where `w ∈ (−1, 1)`.
pub fn ste_weight_grad(g_what: &[f64], w: &[f64]) -> Vec<f64> {
    assert_eq!(g_what.len(), w.len(), "shape mismatch");
    g_what
        .iter()
        .zip(w)
        .map(|(&g, &x)| if x > -1.0 && x < 1.0 { g } else { 0.0 })
        .collect()
}

/// Sums the per-kernel gradients `g(ŵ_c)` into the columns of the codeword
/// they were grouped to. `g_what` holds `K²` values per kernel. Returns a
/// `K² × n` matrix.
pub fn codeword_gradients(g_what: &[f64], assign: &AssignmentMap, n: usize) -> Array2<f64> {
    assert!(!assign.is_empty() || g_what.is_empty());
    let kk = if assign.is_empty() { 1 } else { g_what.len() / assign.len() };
    assert_eq!(kk * assign.len(), g_what.len(), "gradient length mismatch");
    let mut g_u = Array2::zeros((kk, n));
    for (g, &j) in g_what.chunks_exact(kk).zip(&assign.0) {
        let mut col = g_u.column_mut(j as usize);
        for (dst, &v) in col.iter_mut().zip(g) {
            *dst += v;
        }
    }
    g_u
}

/// Gradients produced by one PSTE backward pass.
#[derive(Clone, Debug)]
pub struct PsteGradients {
    /// `g(P_real) = Bᵀ g(U) Vᵀ`.
    pub p_real: Array2<f64>,
    /// `g(P_GS)`, equal to `p_real`.
    pub p_gs: Array2<f64>,
    /// Gradient with respect to the logits `X`.
    pub logits: Array2<f64>,
}

/// Everything the selection needs between steps.
#[derive(Clone, Debug)]
pub struct SelectionState {
    logits: PermutationLogits,
    cfg: SinkhornConfig,
    n: usize,
    mode: SelectionMode,
    book: Codebook,
    pinned: Vec<u32>,
    current: SubCodebook,
    last_tape: Option<SinkhornTape>,
    last_perm: Option<Permutation>,
    forwards: u64,
}

impl SelectionState {
    pub fn new(
        book: &Codebook,
        n: usize,
        mode: SelectionMode,
        cfg: SinkhornConfig,
        logits: PermutationLogits,
    ) -> Result<Self> {
        cfg.validate()?;
        let dim = mode.permutation_dim(book);
        if logits.dim() != dim {
            return invalid(format!("logits are {0}x{0}, mode needs {dim}x{dim}", logits.dim()));
        }
        let slots = mode.selected_columns(n);
        if slots < 1 || slots > dim {
            return invalid(format!(
                "n={n} gives {slots} selectable columns in {mode:?} mode (need 1..={dim})"
            ));
        }
        if mode == SelectionMode::Symmetric && !n.is_multiple_of(2) {
            return invalid("symmetric mode needs an even n");
        }
        let pinned = match mode {
            SelectionMode::Plain => Vec::new(),
            SelectionMode::Symmetric => vec![0, (book.len() - 1) as u32],
        };
        let current = indices_for(book, mode, n, &Permutation::identity(dim))?;
        Ok(SelectionState {
            logits,
            cfg,
            n,
            mode,
            book: *book,
            pinned,
            current,
            last_tape: None,
            last_perm: None,
            forwards: 0,
        })
    }

    /// State with `X ~ uniform(-0.1, 0.1)` drawn from `seed`.
    pub fn with_random_logits(
        book: &Codebook,
        n: usize,
        mode: SelectionMode,
        cfg: SinkhornConfig,
        seed: u64,
    ) -> Result<Self> {
        let logits = PermutationLogits::random_uniform(mode.permutation_dim(book), DEFAULT_LOGIT_INIT, seed);
        SelectionState::new(book, n, mode, cfg, logits)
    }

    pub fn logits(&self) -> &PermutationLogits {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut PermutationLogits {
        &mut self.logits
    }

    pub fn config(&self) -> &SinkhornConfig {
        &self.cfg
    }

    pub fn mode(&self) -> SelectionMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pinned(&self) -> &[u32] {
        &self.pinned
    }

    pub fn current(&self) -> &SubCodebook {
        &self.current
    }

    pub fn last_tape(&self) -> Option<&SinkhornTape> {
        self.last_tape.as_ref()
    }

    pub fn last_perm(&self) -> Option<&Permutation> {
        self.last_perm.as_ref()
    }

    /// Training forward pass. With noise enabled, each call draws fresh
    /// Gumbel noise from a seed derived from the configured seed and the
    /// call count.
    pub fn forward_select(&mut self, book: &Codebook) -> Result<&SubCodebook> {
        let mut cfg = self.cfg;
        cfg.seed = cfg.seed.wrapping_add(self.forwards);
        self.forwards += 1;
        self.run_forward(book, cfg)
    }

    /// Noise-free forward pass, used for evaluation and export.
    pub fn select_deterministic(&mut self, book: &Codebook) -> Result<&SubCodebook> {
        let cfg = SinkhornConfig {
            gumbel: false,
            ..self.cfg
        };
        self.run_forward(book, cfg)
    }

    fn run_forward(&mut self, book: &Codebook, cfg: SinkhornConfig) -> Result<&SubCodebook> {
        if *book != self.book {
            return invalid("codebook does not match the selection state");
        }
        let tape = sinkhorn_forward(&self.logits, &cfg)?;
        let perm = hungarian_max(tape.p())?;
        self.current = indices_for(book, self.mode, self.n, &perm)?;
        self.last_tape = Some(tape);
        self.last_perm = Some(perm);
        Ok(&self.current)
    }

    /// `g(P_real) = Bᵀ g(U) Vᵀ` for a `K² × n` codeword gradient.
    pub fn permutation_grad(&self, g_u: &Array2<f64>, book: &Codebook) -> Result<Array2<f64>> {
        let kk = book.kernel_size() * book.kernel_size();
        if g_u.dim() != (kk, self.n) {
            return invalid(format!("g(U) is {:?}, expected ({kk}, {})", g_u.dim(), self.n));
        }
        let dim = self.mode.permutation_dim(book);
        let slots = self.mode.selected_columns(self.n);
        let mut g_p = Array2::zeros((dim, dim));
        for col in 0..slots {
            let g_col: Vec<f64> = match self.mode {
                SelectionMode::Plain => g_u.column(col).to_vec(),
                // mirror = −representative, so its gradient folds in negated
                SelectionMode::Symmetric => {
                    let rep = g_u.column(2 + 2 * col);
                    let mir = g_u.column(3 + 2 * col);
                    rep.iter().zip(mir.iter()).map(|(a, b)| a - b).collect()
                }
            };
            for row in 0..dim {
                g_p[[row, col]] = book.word(self.row_codeword(row)).dot(&g_col);
            }
        }
        Ok(g_p)
    }

    /// Global codeword index ranked by permutation row `row`.
    fn row_codeword(&self, row: usize) -> usize {
        match self.mode {
            SelectionMode::Plain => row,
            SelectionMode::Symmetric => row + 1,
        }
    }

    /// Full PSTE backward pass, returning every intermediate.
    pub fn backward_detailed(&self, g_u: &Array2<f64>, book: &Codebook) -> Result<PsteGradients> {
        let tape = self
            .last_tape
            .as_ref()
            .ok_or_else(|| SparksError::State("backward called before forward_select".into()))?;
        let p_real = self.permutation_grad(g_u, book)?;
        let p_gs = p_real.clone();
        let logits = sinkhorn_backward(tape, &p_gs);
        Ok(PsteGradients { p_real, p_gs, logits })
    }

    /// Gradient of the loss with respect to `X`.
    pub fn backward(&self, g_u: &Array2<f64>, book: &Codebook) -> Result<Array2<f64>> {
        Ok(self.backward_detailed(g_u, book)?.logits)
    }

    /// `‖P_real − P_GS‖_F` of the last forward pass.
    pub fn permutation_gap(&self) -> Result<f64> {
        match (&self.last_tape, &self.last_perm) {
            (Some(t), Some(p)) => Ok(permutation_gap(t.p(), p)),
            _ => Err(SparksError::State("no forward pass recorded".into())),
        }
    }
}

/// `‖P_real − P_GS‖_F`.
pub fn permutation_gap(p_gs: &Array2<f64>, perm: &Permutation) -> f64 {
    let mut acc = 0.0;
    for ((i, j), &v) in p_gs.indexed_iter() {
        let target = if perm.row_of(j) == i { 1.0 } else { 0.0 };
        acc += (target - v) * (target - v);
    }
    acc.sqrt()
}

fn indices_for(book: &Codebook, mode: SelectionMode, n: usize, perm: &Permutation) -> Result<SubCodebook> {
    let slots = mode.selected_columns(n);
    let indices = match mode {
        SelectionMode::Plain => (0..slots).map(|j| perm.row_of(j) as u32).collect(),
        SelectionMode::Symmetric => {
            let last = (book.len() - 1) as u32;
            let mut v = Vec::with_capacity(n);
            v.push(0);
            v.push(last);
            for j in 0..slots {
                let rep = (perm.row_of(j) + 1) as u32;
                v.push(rep);
                v.push(last - rep);
            }
            v
        }
    };
    SubCodebook::new(book.kernel_size(), indices)
}

/// One `(step, k, τ, gap)` row per recorded forward pass.
#[derive(Clone, Debug, Default)]
pub struct PermGapTrace {
    pub rows: Vec<(usize, usize, f64, f64)>,
}

impl PermGapTrace {
    pub fn record(&mut self, step: usize, state: &SelectionState) -> Result<()> {
        let gap = state.permutation_gap()?;
        let cfg = state.config();
        self.rows.push((step, cfg.iterations, cfg.tau, gap));
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,k,tau,gap")?;
        for (step, k, tau, gap) in &self.rows {
            writeln!(out, "{step},{k},{tau},{gap}")?;
        }
        Ok(())
    }
}

/// Selected codeword indices over training.
#[derive(Clone, Debug, Default)]
pub struct SelectionTrace {
    pub rows: Vec<(usize, Vec<u32>)>,
}

impl SelectionTrace {
    pub fn record(&mut self, step: usize, sub: &SubCodebook) {
        self.rows.push((step, sub.indices().to_vec()));
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.rows.first().map_or(0, |r| r.1.len());
        write!(out, "step")?;
        for i in 0..n {
            write!(out, ",selected_index_{i}")?;
        }
        writeln!(out)?;
        for (step, idx) in &self.rows {
            write!(out, "{step}")?;
            for i in idx {
                write!(out, ",{i}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}
