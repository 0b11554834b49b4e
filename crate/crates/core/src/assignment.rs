//! Linear assignment in reward form.
//!
//! [`hungarian_max`] negates the reward and runs the shortest augmenting
//! path variant of the Hungarian method (rows are inserted one at a time in
//! index order, columns are scanned in index order, the first column with
//! the strictly smallest reduced cost wins). That fixed scan order makes the
//! result deterministic, including on ties.

use ndarray::Array2;

use crate::error::{invalid, Result};

/// Largest size accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX: usize = 9;

/// A permutation stored column-wise: `map[j]` is the row assigned to column `j`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &r in &map {
            if r >= map.len() || seen[r] {
                return invalid(format!("{map:?} is not a bijection"));
            }
            seen[r] = true;
        }
        Ok(Permutation { map })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            map: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Row assigned to column `col`.
    pub fn row_of(&self, col: usize) -> usize {
        self.map[col]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    /// Dense 0/1 matrix with `P[map[j], j] = 1`.
    pub fn to_matrix(&self) -> Array2<f64> {
        let n = self.len();
        let mut p = Array2::zeros((n, n));
        for (j, &r) in self.map.iter().enumerate() {
            p[[r, j]] = 1.0;
        }
        p
    }

    /// `Σ_j reward[map[j], j]`, summed in column order.
    pub fn objective(&self, reward: &Array2<f64>) -> f64 {
        self.map.iter().enumerate().map(|(j, &r)| reward[[r, j]]).sum()
    }

    fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.map.len()];
        self.map
            .iter()
            .all(|&r| r < seen.len() && !std::mem::replace(&mut seen[r], true))
    }
}

fn check_reward(reward: &Array2<f64>) -> Result<usize> {
    if reward.nrows() != reward.ncols() {
        return invalid(format!("reward matrix must be square, got {:?}", reward.dim()));
    }
    if reward.iter().any(|v| !v.is_finite()) {
        return invalid("reward matrix has a non-finite entry");
    }
    Ok(reward.nrows())
}

/// Permutation maximizing `Σ_j reward[map[j], j]`, `O(N³)`.
pub fn hungarian_max(reward: &Array2<f64>) -> Result<Permutation> {
    let n = check_reward(reward)?;
    if n == 0 {
        return Ok(Permutation { map: Vec::new() });
    }
    let cost = |i: usize, j: usize| -reward[[i, j]];

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let perm = Permutation {
        map: owner[1..].iter().map(|&r| r - 1).collect(),
    };
    debug_assert!(perm.is_bijection(), "hungarian produced {:?}", perm.map);
    Ok(perm)
}

/// Exhaustive maximum over all `N!` permutations, ties toward the
/// lexicographically smallest map. Test oracle; `N ≤ 9`.
pub fn brute_force_assignment(reward: &Array2<f64>) -> Result<Permutation> {
    let n = check_reward(reward)?;
    if n > BRUTE_FORCE_MAX {
        return invalid(format!("brute force limited to N <= {BRUTE_FORCE_MAX}, got {n}"));
    }
    let mut map: Vec<usize> = (0..n).collect();
    let mut best = map.clone();
    let mut best_val = f64::NEG_INFINITY;
    loop {
        let val: f64 = map.iter().enumerate().map(|(j, &r)| reward[[r, j]]).sum();
        if val > best_val {
            best_val = val;
            best.clone_from(&map);
        }
        if !next_permutation(&mut map) {
            break;
        }
    }
    Ok(Permutation { map: best })
}

/// Advances to the next lexicographic permutation; false after the last one.
fn next_permutation(a: &mut [usize]) -> bool {
    if a.len() < 2 {
        return false;
    }
    let mut i = a.len() - 1;
    while i > 0 && a[i - 1] >= a[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = a.len() - 1;
    while a[j] <= a[i - 1] {
        j -= 1;
    }
    a.swap(i - 1, j);
    a[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_reward(n: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, n), || rng.random_range(0.0..1.0))
    }

    #[test]
    fn identity_reward() {
        for n in 1..6 {
            assert_eq!(hungarian_max(&Array2::eye(n)).unwrap(), Permutation::identity(n));
        }
    }

    #[test]
    fn two_by_two() {
        let r = array![[0.9, 0.1], [0.2, 0.8]];
        assert_eq!(hungarian_max(&r).unwrap().as_slice(), &[0, 1]);
        let r = array![[0.1, 0.9], [0.8, 0.2]];
        assert_eq!(hungarian_max(&r).unwrap().as_slice(), &[1, 0]);
    }

    #[test]
    fn rejects_nan_and_non_square() {
        let mut r = Array2::eye(3);
        r[[0, 2]] = f64::NAN;
        assert!(hungarian_max(&r).is_err());
        assert!(hungarian_max(&Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn brute_force_examples() {
        assert_eq!(brute_force_assignment(&Array2::eye(1)).unwrap().as_slice(), &[0]);
        assert_eq!(brute_force_assignment(&Array2::eye(3)).unwrap().as_slice(), &[0, 1, 2]);
        assert!(brute_force_assignment(&Array2::eye(10)).is_err());
        // all-equal rewards: lexicographically smallest map
        assert_eq!(brute_force_assignment(&Array2::ones((3, 3))).unwrap().as_slice(), &[0, 1, 2]);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in 2..=7 {
            for _ in 0..100 {
                let r = random_reward(n, &mut rng);
                let h = hungarian_max(&r).unwrap();
                let b = brute_force_assignment(&r).unwrap();
                assert!((h.objective(&r) - b.objective(&r)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn hungarian_handles_negative_and_large_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let r = random_reward(6, &mut rng).mapv(|v| (v - 0.5) * 1e6);
            let h = hungarian_max(&r).unwrap();
            let b = brute_force_assignment(&r).unwrap();
            assert!((h.objective(&r) - b.objective(&r)).abs() <= 1e-6);
        }
    }

    #[test]
    fn hungarian_on_512() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_reward(512, &mut rng);
        let p = hungarian_max(&r).unwrap();
        assert!(Permutation::new(p.as_slice().to_vec()).is_ok());
        // optimum is at least the identity and any row-greedy choice
        assert!(p.objective(&r) >= Permutation::identity(512).objective(&r));
    }

    #[test]
    fn matrix_form() {
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        let m = p.to_matrix();
        assert_eq!(m[[2, 0]], 1.0);
        assert_eq!(m.sum(), 3.0);
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn affine_rescaling_keeps_optimum(seed in 0u64..500, c in 0.1f64..10.0, d in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_reward(6, &mut rng);
            let scaled = r.mapv(|v| c * v + d);
            let best = hungarian_max(&r).unwrap().objective(&r);
            let other = hungarian_max(&scaled).unwrap().objective(&r);
            prop_assert!((best - other).abs() <= 1e-9);
        }
    }
}
