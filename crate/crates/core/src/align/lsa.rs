//! Exact linear sum assignment by shortest augmenting paths (Hungarian
//! method with potentials), run on the negated similarity matrix.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Square similarity matrix for one index group.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    values: Array2<f64>,
}

impl GramMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::shape(
                format!("square matrix, got {}x{}", values.nrows(), values.ncols()),
                format!("{:?}", values.dim()),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("Gram matrix has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    /// `sum_i G[i, pi(i)]`, accumulated in row order.
    pub fn objective(&self, pi: &[usize]) -> f64 {
        pi.iter().enumerate().map(|(i, &j)| self.values[[i, j]]).sum()
    }

    pub fn trace(&self) -> f64 {
        self.values.diag().sum()
    }
}

/// Returns `pi` maximizing `sum_i G[i, pi(i)]` and that objective.
///
/// Rows are inserted in index order and columns scanned in index order with
/// strict comparisons, so among equal-cost choices the lowest index wins and
/// the output is a deterministic function of the input.
pub fn solve_lsa(g: &GramMatrix) -> (Vec<usize>, f64) {
    let n = g.size();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let cost = |i: usize, j: usize| -g.values[[i - 1, j - 1]];
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0, as in the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
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
    let mut pi = vec![0; n];
    for j in 1..=n {
        pi[owner[j] - 1] = j - 1;
    }
    let obj = g.objective(&pi);
    (pi, obj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(g: &GramMatrix) -> f64 {
        fn rec(g: &GramMatrix, row: usize, used: &mut Vec<bool>, pi: &mut Vec<usize>, best: &mut f64) {
            let n = g.size();
            if row == n {
                *best = best.max(g.objective(pi));
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    pi.push(j);
                    rec(g, row + 1, used, pi, best);
                    pi.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = f64::NEG_INFINITY;
        rec(g, 0, &mut vec![false; g.size()], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn identity_matrix() {
        let g = GramMatrix::new(Array2::eye(3)).unwrap();
        assert_eq!(solve_lsa(&g), (vec![0, 1, 2], 3.0));
    }

    #[test]
    fn two_by_two() {
        let g = GramMatrix::new(array![[2.0, 1.0], [1.0, 2.0]]).unwrap();
        assert_eq!(solve_lsa(&g), (vec![0, 1], 4.0));
        let g = GramMatrix::new(array![[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert_eq!(solve_lsa(&g), (vec![1, 0], 4.0));
    }

    #[test]
    fn ties_are_deterministic() {
        let g = GramMatrix::new(Array2::ones((4, 4))).unwrap();
        let (pi, obj) = solve_lsa(&g);
        assert_eq!(obj, 4.0);
        assert_eq!(solve_lsa(&g).0, pi);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(GramMatrix::new(Array2::zeros((2, 3))).is_err());
        assert!(GramMatrix::new(array![[f64::NAN]]).is_err());
        assert_eq!(solve_lsa(&GramMatrix::new(Array2::zeros((0, 0))).unwrap()), (vec![], 0.0));
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(1..=6);
            let g = GramMatrix::new(Array2::from_shape_fn((n, n), |_| rng.random_range(-5.0..5.0))).unwrap();
            let (pi, obj) = solve_lsa(&g);
            let mut seen = pi.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert_eq!(obj, brute_force(&g));
        }
    }

    #[test]
    fn integer_matrices_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let n = rng.random_range(2..=6);
            let g = GramMatrix::new(Array2::from_shape_fn((n, n), |_| rng.random_range(0..4) as f64)).unwrap();
            assert_eq!(solve_lsa(&g).1, brute_force(&g));
        }
    }
}
