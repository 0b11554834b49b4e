//! Binary kernel codebooks.
//!
//! A codeword is a `K×K` kernel with entries in `{-1, +1}`, packed into the
//! low `K²` bits of a `u32`. Position `(r, c)` of the kernel lives at bit
//! `r * K + c`; a set bit means `+1`. The full codebook orders its `2^(K²)`
//! words so that word `i` has bit pattern `i`, which makes the sign-flipped
//! mirror of word `i` equal to word `N - 1 - i`.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result, SparksError};

pub const MIN_KERNEL_SIZE: usize = 2;
pub const MAX_KERNEL_SIZE: usize = 5;

fn check_kernel_size(k: usize) -> Result<()> {
    if !(MIN_KERNEL_SIZE..=MAX_KERNEL_SIZE).contains(&k) {
        return invalid(format!(
            "kernel size {k} outside [{MIN_KERNEL_SIZE}, {MAX_KERNEL_SIZE}]"
        ));
    }
    Ok(())
}

/// Kernel size whose flattened length is `len`, if it is a supported square.
pub fn kernel_size_for_len(len: usize) -> Result<usize> {
    (MIN_KERNEL_SIZE..=MAX_KERNEL_SIZE)
        .find(|k| k * k == len)
        .ok_or_else(|| SparksError::InvalidArgument(format!("{len} is not K*K for a supported K")))
}

/// One `K×K` binary kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Codeword {
    bits: u32,
    kernel_size: u8,
}

impl Codeword {
    pub fn new(bits: u32, kernel_size: usize) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        let cw = Codeword {
            bits,
            kernel_size: kernel_size as u8,
        };
        if bits & !cw.mask() != 0 {
            return invalid(format!(
                "bit pattern {bits:#x} has bits above position {}",
                cw.len()
            ));
        }
        Ok(cw)
    }

    /// Packs a `±1` vector (row-major) into a codeword.
    pub fn from_signs(signs: &[i8]) -> Result<Self> {
        let k = kernel_size_for_len(signs.len())?;
        let mut bits = 0u32;
        for (i, &s) in signs.iter().enumerate() {
            match s {
                1 => bits |= 1 << i,
                -1 => {}
                other => return invalid(format!("entry {i} is {other}, expected -1 or +1")),
            }
        }
        Codeword::new(bits, k)
    }

    #[inline]
    pub fn bits(&self) -> u32 {
        self.bits
    }

    #[inline]
    pub fn kernel_size(&self) -> usize {
        self.kernel_size as usize
    }

    /// Number of weights, `K²`.
    #[inline]
    pub fn len(&self) -> usize {
        let k = self.kernel_size();
        k * k
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn mask(&self) -> u32 {
        ((1u64 << self.len()) - 1) as u32
    }

    #[inline]
    pub fn sign_at(&self, i: usize) -> i8 {
        if self.bits >> i & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.len()).map(|i| self.sign_at(i)).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| f64::from(self.sign_at(i))).collect()
    }

    /// The element-wise negated codeword.
    #[inline]
    pub fn opposite(&self) -> Self {
        Codeword {
            bits: !self.bits & self.mask(),
            kernel_size: self.kernel_size,
        }
    }

    /// `⟨u, w⟩` for a real kernel `w` of matching length.
    #[inline]
    pub fn dot(&self, w: &[f64]) -> f64 {
        debug_assert_eq!(w.len(), self.len());
        let mut acc = 0.0;
        for (i, &x) in w.iter().enumerate() {
            if self.bits >> i & 1 == 1 {
                acc += x;
            } else {
                acc -= x;
            }
        }
        acc
    }
}

/// The full codebook `{-1, +1}^(K×K)`.
///
/// Words are generated on demand from their index rather than stored: word
/// `i` is the codeword whose bit pattern is `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Codebook {
    kernel_size: usize,
}

impl Codebook {
    pub fn new(kernel_size: usize) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        Ok(Codebook { kernel_size })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    /// `N = 2^(K²)`.
    pub fn len(&self) -> usize {
        1usize << (self.kernel_size * self.kernel_size)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word(&self, index: usize) -> Codeword {
        assert!(index < self.len(), "codeword index {index} out of range");
        Codeword {
            bits: index as u32,
            kernel_size: self.kernel_size as u8,
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = Codeword> + '_ {
        (0..self.len()).map(|i| self.word(i))
    }

    /// Index of the sign-flipped mirror of word `index`.
    #[inline]
    pub fn opposite_index(&self, index: usize) -> usize {
        self.len() - 1 - index
    }
}

/// Builds the full codebook for kernel size `k` (`2 ≤ k ≤ 5`).
pub fn build_full_codebook(k: usize) -> Result<Codebook> {
    Codebook::new(k)
}

/// An ordered selection of `n` distinct codewords, `n` a power of two.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubCodebook {
    kernel_size: usize,
    indices: Vec<u32>,
}

impl SubCodebook {
    pub fn new(kernel_size: usize, indices: Vec<u32>) -> Result<Self> {
        let book = Codebook::new(kernel_size)?;
        let n = indices.len();
        if n < 2 || !n.is_power_of_two() || n > book.len() {
            return invalid(format!(
                "sub-codebook size {n} must be a power of two in [2, {}]",
                book.len()
            ));
        }
        let mut seen = HashSet::with_capacity(n);
        for &i in &indices {
            if i as usize >= book.len() {
                return invalid(format!("codeword index {i} out of range for K={kernel_size}"));
            }
            if !seen.insert(i) {
                return invalid(format!("codeword index {i} selected twice"));
            }
        }
        Ok(SubCodebook {
            kernel_size,
            indices,
        })
    }

    /// Every codeword, in codebook order.
    pub fn full(kernel_size: usize) -> Result<Self> {
        let book = Codebook::new(kernel_size)?;
        SubCodebook::new(kernel_size, (0..book.len() as u32).collect())
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Bits needed per kernel index.
    pub fn index_bits(&self) -> u32 {
        self.indices.len().trailing_zeros()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn codeword(&self, local: usize) -> Codeword {
        Codeword {
            bits: self.indices[local],
            kernel_size: self.kernel_size as u8,
        }
    }

    pub fn codewords(&self) -> impl ExactSizeIterator<Item = Codeword> + '_ {
        (0..self.len()).map(|j| self.codeword(j))
    }

    /// Local position of global codeword `global`, if selected.
    pub fn position(&self, global: u32) -> Option<usize> {
        self.indices.iter().position(|&i| i == global)
    }

    pub fn contains(&self, global: u32) -> bool {
        self.indices.contains(&global)
    }
}

/// Sign binarization with `sign(0) = +1`.
///
/// Equivalent to the nearest codeword of the full codebook in `ℓ₂`.
pub fn sign_binarize(w: &[f64]) -> Result<Codeword> {
    let k = kernel_size_for_len(w.len())?;
    let mut bits = 0u32;
    for (i, &x) in w.iter().enumerate() {
        if x.is_nan() {
            return invalid(format!("kernel entry {i} is NaN"));
        }
        if x >= 0.0 {
            bits |= 1 << i;
        }
    }
    Codeword::new(bits, k)
}

/// Nearest member of `sub` to `w` in `ℓ₂`, computed as the largest dot
/// product. Ties go to the lowest local index.
pub fn nearest_codeword(w: &[f64], sub: &SubCodebook) -> (usize, Codeword) {
    debug_assert_eq!(w.len(), sub.kernel_size * sub.kernel_size);
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for (j, u) in sub.codewords().enumerate() {
        let d = u.dot(w);
        if d > best_dot {
            best_dot = d;
            best = j;
        }
    }
    (best, sub.codeword(best))
}

/// Per-codeword occurrence counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodewordHistogram {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl CodewordHistogram {
    pub fn zeros(book: &Codebook) -> Self {
        CodewordHistogram {
            counts: vec![0; book.len()],
            total: 0,
        }
    }

    pub fn add(&mut self, cw: Codeword) {
        self.counts[cw.bits() as usize] += 1;
        self.total += 1;
    }

    /// Writes `index,count` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "index,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{i},{c}")?;
        }
        Ok(())
    }
}

pub fn codeword_histogram(assignments: &[Codeword], book: &Codebook) -> Result<CodewordHistogram> {
    let mut hist = CodewordHistogram::zeros(book);
    for cw in assignments {
        if cw.kernel_size() != book.kernel_size() {
            return invalid(format!(
                "codeword of size {} in a K={} histogram",
                cw.kernel_size(),
                book.kernel_size()
            ));
        }
        hist.add(*cw);
    }
    Ok(hist)
}

fn book_for_histogram(hist: &CodewordHistogram) -> Result<Codebook> {
    let n = hist.counts.len();
    if !n.is_power_of_two() {
        return invalid(format!("histogram length {n} is not a codebook size"));
    }
    Codebook::new(kernel_size_for_len(n.trailing_zeros() as usize)?)
}

/// The `n` most frequent codewords, ties toward the lower index.
pub fn select_topn_frequent(hist: &CodewordHistogram, n: usize) -> Result<SubCodebook> {
    let book = book_for_histogram(hist)?;
    if n > book.len() {
        return invalid(format!("n={n} exceeds codebook size {}", book.len()));
    }
    let mut order: Vec<u32> = (0..book.len() as u32).collect();
    // stable sort keeps ascending index order among equal counts
    order.sort_by(|&a, &b| hist.counts[b as usize].cmp(&hist.counts[a as usize]));
    order.truncate(n);
    SubCodebook::new(book.kernel_size(), order)
}

/// `n` codewords drawn uniformly without replacement.
pub fn select_random(seed: u64, n: usize, book: &Codebook) -> Result<SubCodebook> {
    if n > book.len() {
        return invalid(format!("n={n} exceeds codebook size {}", book.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, book.len(), n)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    SubCodebook::new(book.kernel_size(), picked)
}

/// `n` evenly spaced indices `round(i·(N−1)/(n−1))`, endpoints included.
pub fn select_equal_interval(n: usize, book: &Codebook) -> Result<SubCodebook> {
    let big_n = book.len() as u64;
    if n < 2 || n as u64 > big_n {
        return invalid(format!("n={n} outside [2, {big_n}]"));
    }
    let span = (n - 1) as u64;
    let indices = (0..n as u64)
        .map(|i| ((2 * i * (big_n - 1) + span) / (2 * span)) as u32)
        .collect();
    SubCodebook::new(book.kernel_size(), indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_force_nearest(w: &[f64], words: impl Iterator<Item = Codeword>) -> Codeword {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for u in words {
            let d: f64 = u
                .to_f64()
                .iter()
                .zip(w)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = Some(u);
            }
        }
        best.unwrap()
    }

    #[test]
    fn full_codebook_sizes() {
        assert_eq!(build_full_codebook(3).unwrap().len(), 512);
        let b2 = build_full_codebook(2).unwrap();
        assert_eq!(b2.len(), 16);
        assert_eq!(b2.word(0).to_signs(), vec![-1; 4]);
        assert_eq!(b2.word(15).to_signs(), vec![1; 4]);
        assert!(build_full_codebook(1).is_err());
        assert!(build_full_codebook(6).is_err());
    }

    #[test]
    fn codebook_sign_symmetry_exhaustive() {
        let b = build_full_codebook(3).unwrap();
        for i in 0..b.len() {
            let a = b.word(i).to_signs();
            let m = b.word(b.opposite_index(i)).to_signs();
            assert!(a.iter().zip(&m).all(|(x, y)| *x == -*y));
            assert_eq!(b.word(i).opposite(), b.word(511 - i));
        }
    }

    #[test]
    fn codeword_rejects_high_bits() {
        assert!(Codeword::new(1 << 9, 3).is_err());
        assert!(Codeword::new(511, 3).is_ok());
    }

    #[test]
    fn sign_binarize_examples() {
        let cw = sign_binarize(&[0.5; 9]).unwrap();
        assert_eq!(cw.to_signs(), vec![1; 9]);

        let mut w = [-0.3; 9];
        w[4] = 0.0;
        let cw = sign_binarize(&w).unwrap();
        let mut expect = vec![-1i8; 9];
        expect[4] = 1;
        assert_eq!(cw.to_signs(), expect);

        let mut w = [0.1; 9];
        w[2] = f64::NAN;
        assert!(sign_binarize(&w).is_err());
        assert!(sign_binarize(&[0.1; 7]).is_err());
    }

    #[test]
    fn sign_binarize_matches_exhaustive_argmin() {
        let book = build_full_codebook(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2_000 {
            let w: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert_eq!(sign_binarize(&w).unwrap(), brute_force_nearest(&w, book.iter()));
        }
    }

    #[test]
    fn nearest_codeword_examples() {
        let sub = SubCodebook::new(3, vec![0, 511]).unwrap();
        let w = [0.2, -0.1, 0.3, 0.0, 0.1, 0.1, -0.2, 0.4, 0.0];
        assert_eq!(nearest_codeword(&w, &sub).1.to_signs(), vec![1; 9]);

        let sub = SubCodebook::new(3, vec![3, 77, 200, 411]).unwrap();
        let w = sub.codeword(2).to_f64();
        let (j, u) = nearest_codeword(&w, &sub);
        assert_eq!(j, 2);
        assert_eq!(u.to_f64(), w);
    }

    #[test]
    fn nearest_codeword_tie_goes_low() {
        let sub = SubCodebook::new(2, vec![9, 6]).unwrap();
        let (j, _) = nearest_codeword(&[0.0; 4], &sub);
        assert_eq!(j, 0);
    }

    #[test]
    fn nearest_codeword_matches_linear_scan() {
        let book = build_full_codebook(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sub = select_random(99, 32, &book).unwrap();
        for _ in 0..1_000 {
            let w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.5..1.5)).collect();
            let (j, u) = nearest_codeword(&w, &sub);
            assert_eq!(u, sub.codeword(j));
            assert_eq!(u, brute_force_nearest(&w, sub.codewords()));
        }
    }

    #[test]
    fn histogram_examples() {
        let book = build_full_codebook(3).unwrap();
        let h = codeword_histogram(&[], &book).unwrap();
        assert_eq!(h.total, 0);
        assert!(h.counts.iter().all(|&c| c == 0));

        let h = codeword_histogram(&[book.word(0), book.word(0), book.word(511)], &book).unwrap();
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[511], 1);
        assert_eq!(h.total, 3);
        assert_eq!(h.counts.iter().sum::<u64>(), h.total);

        let other = build_full_codebook(2).unwrap();
        assert!(codeword_histogram(&[other.word(1)], &book).is_err());
    }

    #[test]
    fn histogram_csv() {
        let book = build_full_codebook(2).unwrap();
        let h = codeword_histogram(&[book.word(3)], &book).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 17);
        assert_eq!(lines[0], "index,count");
        assert_eq!(lines[4], "3,1");
    }

    #[test]
    fn topn_examples() {
        let book = build_full_codebook(3).unwrap();
        let mut h = CodewordHistogram::zeros(&book);
        h.counts[5] = 10;
        h.counts[7] = 9;
        h.total = 19;
        assert_eq!(select_topn_frequent(&h, 2).unwrap().indices(), &[5, 7]);

        let b2 = build_full_codebook(2).unwrap();
        let mut h = CodewordHistogram::zeros(&b2);
        h.counts.iter_mut().for_each(|c| *c = 3);
        assert_eq!(select_topn_frequent(&h, 4).unwrap().indices(), &[0, 1, 2, 3]);
    }

    #[test]
    fn topn_matches_sort_oracle() {
        // Fixed power-law-like fixture.
        let book = build_full_codebook(3).unwrap();
        let mut h = CodewordHistogram::zeros(&book);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..book.len() {
            h.counts[i] = (1000.0 / (1.0 + rng.random_range(0.0..50.0f64))) as u64;
            h.total += h.counts[i];
        }
        for n in [2, 16, 64, 512] {
            let got = select_topn_frequent(&h, n).unwrap();
            let mut pairs: Vec<(u64, usize)> = h.counts.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let expect: Vec<u32> = pairs[..n].iter().map(|p| p.1 as u32).collect();
            assert_eq!(got.indices(), &expect[..]);
        }
    }

    #[test]
    fn random_selection() {
        let b2 = build_full_codebook(2).unwrap();
        let all = select_random(17, 16, &b2).unwrap();
        let mut s = all.indices().to_vec();
        s.sort();
        assert_eq!(s, (0..16).collect::<Vec<_>>());
        assert_eq!(select_random(1, 4, &b2).unwrap(), select_random(1, 4, &b2).unwrap());
        let four = select_random(1, 4, &b2).unwrap();
        let set: HashSet<_> = four.indices().iter().collect();
        assert_eq!(set.len(), 4);
        assert!(select_random(1, 32, &b2).is_err());
    }

    #[test]
    fn equal_interval_examples() {
        let b3 = build_full_codebook(3).unwrap();
        assert_eq!(select_equal_interval(2, &b3).unwrap().indices(), &[0, 511]);
        let b2 = build_full_codebook(2).unwrap();
        assert_eq!(select_equal_interval(4, &b2).unwrap().indices(), &[0, 5, 10, 15]);
        assert_eq!(
            select_equal_interval(16, &b2).unwrap().indices(),
            &(0..16).collect::<Vec<u32>>()[..]
        );
    }

    #[test]
    fn subcodebook_validation() {
        assert!(SubCodebook::new(2, vec![1, 1]).is_err());
        assert!(SubCodebook::new(2, vec![1, 2, 3]).is_err());
        assert!(SubCodebook::new(2, vec![1]).is_err());
        assert!(SubCodebook::new(2, vec![1, 16]).is_err());
        let s = SubCodebook::new(3, vec![4, 9, 100, 3]).unwrap();
        assert_eq!(s.index_bits(), 2);
        assert_eq!(s.position(100), Some(2));
    }

    proptest! {
        #[test]
        fn pack_roundtrip(bits in 0u32..512) {
            let cw = Codeword::new(bits, 3).unwrap();
            prop_assert_eq!(Codeword::from_signs(&cw.to_signs()).unwrap(), cw);
        }

        #[test]
        fn distance_dot_duality(w in proptest::collection::vec(-3.0f64..3.0, 9), bits in 0u32..512) {
            let u = Codeword::new(bits, 3).unwrap();
            let dist2: f64 = u.to_f64().iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum();
            let norm2: f64 = w.iter().map(|x| x * x).sum();
            prop_assert!((dist2 - (9.0 - 2.0 * u.dot(&w) + norm2)).abs() < 1e-9);
        }

        #[test]
        fn selections_are_distinct(seed in 0u64..1000, log_n in 1u32..5) {
            let b2 = build_full_codebook(2).unwrap();
            let n = 1usize << log_n;
            for sub in [select_random(seed, n, &b2).unwrap(), select_equal_interval(n, &b2).unwrap()] {
                let set: HashSet<_> = sub.indices().iter().collect();
                prop_assert_eq!(set.len(), n);
            }
        }
    }
}
