//! Exact dense linear assignment.
//!
//! [`solve_min`] runs the O(n³) shortest-augmenting-path Hungarian method and
//! then walks the graph of tight edges (zero reduced cost under the final
//! dual potentials) to pick the lexicographically smallest optimal
//! permutation. Every optimal assignment is tight under any optimal dual, so
//! the walk only chooses among optima; it makes results independent of the
//! order in which the Hungarian phase happened to break ties.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Square, finite cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    n: usize,
    cost: Tensor<T>,
}

impl<T: Scalar> CostMatrix<T> {
    pub fn new(cost: Tensor<T>) -> Result<Self> {
        match cost.shape() {
            [r, c] if r == c => {
                cost.ensure_finite("cost matrix")?;
                Ok(Self { n: *r, cost })
            }
            s => Err(Error::Shape(format!("cost matrix must be square, got {s:?}"))),
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        if rows.is_empty() {
            return Self::new(Tensor::zeros(&[0, 0]));
        }
        Self::new(Tensor::matrix(rows)?)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.cost.at(r, c)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.cost
    }

    /// Σ_j cost[j, perm[j]], summed in row order.
    pub fn total(&self, perm: &[usize]) -> T {
        perm.iter()
            .enumerate()
            .fold(T::zero(), |acc, (r, &c)| acc + self.at(r, c))
    }

    fn negated(&self) -> Self {
        Self {
            n: self.n,
            cost: Tensor::from_fn(self.cost.shape(), |i| -self.cost.data()[i]),
        }
    }
}

/// `perm[row] = column`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<T> {
    pub perm: Vec<usize>,
    pub total_cost: T,
}

pub fn solve_min<T: Scalar>(c: &CostMatrix<T>) -> Assignment<T> {
    let perm = lexicographic_optimum(c);
    Assignment {
        total_cost: c.total(&perm),
        perm,
    }
}

/// Maximizing assignment; the permutation is exactly `solve_min(-c).perm`.
pub fn solve_max<T: Scalar>(c: &CostMatrix<T>) -> Assignment<T> {
    let perm = lexicographic_optimum(&c.negated());
    Assignment {
        total_cost: c.total(&perm),
        perm,
    }
}

/// `true` when `perm` is a bijection on `0..n`.
pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
}

pub fn check_permutation(perm: &[usize], n: usize, what: &str) -> Result<()> {
    if perm.len() != n || !is_permutation(perm) {
        return Err(Error::InvalidPermutation(format!(
            "{what}: {perm:?} is not a permutation of 0..{n}"
        )));
    }
    Ok(())
}

struct Hungarian<T> {
    /// Row potentials.
    u: Vec<T>,
    /// Column potentials.
    v: Vec<T>,
    row_to_col: Vec<usize>,
}

/// Shortest augmenting path Hungarian method (1-based internal indexing with
/// a virtual column 0), minimizing.
fn hungarian<T: Scalar>(c: &CostMatrix<T>) -> Hungarian<T> {
    let n = c.n();
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    // col_owner[j] = row assigned to column j (1-based, 0 = free)
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c.at(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[col_owner[j]] = u[col_owner[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            row_to_col[col_owner[j] - 1] = j - 1;
        }
    }
    Hungarian {
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
        row_to_col,
    }
}

fn lexicographic_optimum<T: Scalar>(c: &CostMatrix<T>) -> Vec<usize> {
    let n = c.n();
    if n == 0 {
        return Vec::new();
    }
    let h = hungarian(c);
    let scale = c
        .tensor()
        .data()
        .iter()
        .fold(T::one(), |m, &x| m.max(x.abs()));
    let tol = scale * T::of_usize(n) * T::lit(1e3) * T::epsilon();

    let mut row_to_col = h.row_to_col;
    let mut col_to_row = vec![0usize; n];
    for (r, &col) in row_to_col.iter().enumerate() {
        col_to_row[col] = r;
    }
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|r| {
            (0..n)
                .filter(|&col| {
                    col == row_to_col[r] || (c.at(r, col) - h.u[r] - h.v[col]).abs() <= tol
                })
                .collect()
        })
        .collect();

    for i in 0..n {
        let target = row_to_col[i];
        for &j in &tight[i] {
            if j >= target {
                break;
            }
            let owner = col_to_row[j];
            if owner < i {
                continue;
            }
            if let Some(path) = alternating_path(&tight, &row_to_col, &col_to_row, owner, target, i)
            {
                // path: rows r_0 = owner, ..., each taking a new column; the
                // last one takes `target`.
                for (r, col) in path {
                    row_to_col[r] = col;
                    col_to_row[col] = r;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
    }
    row_to_col
}

/// BFS over tight edges for a reassignment that moves `start` off its column
/// and ends with some row taking `target`, using only rows `> fixed`.
/// Returns (row, new column) pairs.
fn alternating_path(
    tight: &[Vec<usize>],
    row_to_col: &[usize],
    col_to_row: &[usize],
    start: usize,
    target: usize,
    fixed: usize,
) -> Option<Vec<(usize, usize)>> {
    let n = row_to_col.len();
    // parent_col[col] = (row that reaches col)
    let mut reached_by = vec![usize::MAX; n];
    let mut seen_row = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    seen_row[start] = true;
    queue.push_back(start);
    while let Some(r) = queue.pop_front() {
        for &col in &tight[r] {
            if col == row_to_col[r] || reached_by[col] != usize::MAX {
                continue;
            }
            let owner = col_to_row[col];
            if col != target && (owner <= fixed || seen_row[owner]) {
                continue;
            }
            reached_by[col] = r;
            if col == target {
                let mut path = Vec::new();
                let mut cur = col;
                loop {
                    let row = reached_by[cur];
                    path.push((row, cur));
                    if row == start {
                        return Some(path);
                    }
                    cur = row_to_col[row];
                }
            }
            seen_row[owner] = true;
            queue.push_back(owner);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[f64]]) -> CostMatrix<f64> {
        CostMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn small_min_cases() {
        let a = solve_min(&cm(&[&[1.0, 2.0], &[2.0, 1.0]]));
        assert_eq!(a.perm, vec![0, 1]);
        assert_eq!(a.total_cost, 2.0);
        let b = solve_min(&cm(&[&[0.0, 1.0], &[1.0, 0.0]]));
        assert_eq!(b.perm, vec![0, 1]);
        assert_eq!(b.total_cost, 0.0);
    }

    #[test]
    fn small_max_cases() {
        let a = solve_max(&cm(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(a.perm, vec![0, 1]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn constant_matrix_gives_identity() {
        for n in 1..8 {
            let c = CostMatrix::new(Tensor::from_fn(&[n, n], |_| 3.5f64)).unwrap();
            assert_eq!(solve_max(&c).perm, (0..n).collect::<Vec<_>>());
            assert_eq!(solve_min(&c).perm, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let c = cm(&[&[5.0, 0.0, 0.0], &[0.0, 5.0, 5.0], &[5.0, 5.0, 0.0]]);
        let best = solve_min(&c);
        assert_eq!(best.total_cost, 0.0);
        assert_eq!(best.perm, vec![1, 0, 2]);
        // Optima [1,0,2] and [2,0,1] both cost 0.
        let c2 = cm(&[&[5.0, 0.0, 0.0], &[0.0, 5.0, 5.0], &[5.0, 0.0, 0.0]]);
        assert_eq!(solve_min(&c2).perm, vec![1, 0, 2]);
    }

    #[test]
    fn empty_and_singleton() {
        let e = CostMatrix::<f64>::from_rows(&[]).unwrap();
        assert!(solve_min(&e).perm.is_empty());
        assert_eq!(solve_min(&cm(&[&[4.0]])).perm, vec![0]);
    }

    #[test]
    fn rejects_non_square_and_non_finite() {
        assert!(CostMatrix::new(Tensor::<f64>::zeros(&[2, 3])).is_err());
        assert!(CostMatrix::<f64>::from_rows(&[vec![1.0, f64::INFINITY], vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn permutation_validation() {
        assert!(is_permutation(&[2, 0, 1]));
        assert!(!is_permutation(&[0, 0]));
        assert!(!is_permutation(&[0, 2]));
        assert!(check_permutation(&[1, 0], 3, "x").is_err());
    }

    #[test]
    fn works_in_f32() {
        let c = CostMatrix::<f32>::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]])
            .unwrap();
        assert_eq!(solve_min(&c).total_cost, 5.0);
    }
}
