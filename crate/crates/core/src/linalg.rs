//! Sparse matrices and a seeded subspace-iteration eigensolver for the
//! embedding providers.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::rng;

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from per-row `(col, value)` lists; columns are sorted and
    /// duplicates summed.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        let nrows = rows.len();
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                debug_assert!(c < cols);
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows: nrows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    /// `self * x` for dense `x` (cols × p).
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.cols);
        let p = x.ncols();
        let mut out = DMatrix::zeros(self.rows, p);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                for j in 0..p {
                    out[(r, j)] += v * x[(c, j)];
                }
            }
        }
        out
    }

    /// `selfᵀ * x` for dense `x` (rows × p).
    pub fn tmul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.rows);
        let p = x.ncols();
        let mut out = DMatrix::zeros(self.cols, p);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                for j in 0..p {
                    out[(c, j)] += v * x[(r, j)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }
}

/// Leading eigenpairs of a symmetric operator.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    /// Sorted by decreasing magnitude.
    pub values: Vec<f64>,
    /// n × d, orthonormal columns.
    pub vectors: DMatrix<f64>,
}

const OVERSAMPLE: usize = 10;
const MAX_ITERS: usize = 500;
const RESIDUAL_TOL: f64 = 1e-11;

/// Top-`d` eigenpairs (by |λ|) of the symmetric n×n operator `apply`, via
/// block subspace iteration with Rayleigh–Ritz extraction. The starting
/// block is drawn from `seed`, so results are reproducible bit for bit.
pub fn top_eigenpairs<F>(n: usize, d: usize, seed: u64, apply: F) -> EigenPairs
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    assert!(d >= 1 && d <= n, "need 1 <= d <= n");
    let p = (d + OVERSAMPLE).min(n);
    let mut g = rng::rng_for(seed, "subspace", &[n as u64, d as u64]);
    let omega = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut g));
    let mut q = orthonormalize(&apply(&omega));

    let mut ritz = rayleigh_ritz(&q, &apply);
    for _ in 0..MAX_ITERS {
        if p == n || converged(&ritz, d, &apply) {
            break;
        }
        q = orthonormalize(&apply(&q));
        ritz = rayleigh_ritz(&q, &apply);
    }
    let (values, vectors) = ritz;
    let mut vectors = vectors.columns(0, d).into_owned();
    // sign convention: the largest-magnitude entry of each vector is positive
    for mut col in vectors.column_iter_mut() {
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, &v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }
    EigenPairs {
        values: values[..d].to_vec(),
        vectors,
    }
}

fn orthonormalize(y: &DMatrix<f64>) -> DMatrix<f64> {
    y.clone().qr().q()
}

fn rayleigh_ritz<F>(q: &DMatrix<f64>, apply: &F) -> (Vec<f64>, DMatrix<f64>)
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let aq = apply(q);
    let t = q.transpose() * &aq;
    let t = (&t + t.transpose()) * 0.5;
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut v = DMatrix::zeros(q.nrows(), order.len());
    for (j, &i) in order.iter().enumerate() {
        v.set_column(j, &(q * eig.eigenvectors.column(i)));
    }
    (values, v)
}

fn converged<F>(ritz: &(Vec<f64>, DMatrix<f64>), d: usize, apply: &F) -> bool
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let (values, vectors) = ritz;
    let lead = vectors.columns(0, d).into_owned();
    let av = apply(&lead);
    let scale = values[0].abs().max(f64::MIN_POSITIVE);
    (0..d).all(|j| {
        let r = av.column(j) - lead.column(j) * values[j];
        r.norm() <= RESIDUAL_TOL * scale
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_products_match_dense() {
        let a = CsrMatrix::from_rows(
            3,
            vec![vec![(2, 1.0), (0, 2.0), (2, 0.5)], vec![], vec![(1, -3.0)]],
        );
        let dense = a.to_dense();
        assert_eq!(dense[(0, 2)], 1.5);
        let x = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        assert_eq!(a.mul_dense(&x), &dense * &x);
        assert_eq!(a.tmul_dense(&x), dense.transpose() * &x);
    }

    #[test]
    fn subspace_iteration_matches_dense_eigen() {
        let n = 40;
        let m = DMatrix::from_fn(n, n, |i, j| {
            let (a, b) = (i.min(j) as f64, i.max(j) as f64);
            ((a + 1.0) * 0.37 + b * 0.11).sin()
        });
        let pairs = top_eigenpairs(n, 6, 1, |x| &m * x);
        let dense = SymmetricEigen::new(m.clone());
        let mut expect: Vec<f64> = dense.eigenvalues.iter().copied().collect();
        expect.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
        for j in 0..6 {
            assert!((pairs.values[j] - expect[j]).abs() < 1e-9 * expect[0].abs());
            let v = pairs.vectors.column(j);
            let r = &m * v - v * pairs.values[j];
            assert!(r.norm() < 1e-8);
        }
    }
}
