//! Frozen per-item embedding matrices: one behavior space built from
//! co-occurrence statistics, one semantic space built from item text, or
//! any matrix loaded from disk.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, EagerError, Result};
use crate::linalg::{top_eigenpairs, CsrMatrix, EigenPairs};
use crate::rng;

const NOISE_SCALE: f64 = 1e-3;
const HASH_BUCKETS: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    dim: usize,
    values: Vec<f32>,
    pub source_tag: String,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, dim: usize, values: Vec<f32>, source_tag: impl Into<String>) -> Result<Self> {
        if values.len() != n * dim {
            return Err(EagerError::Shape(format!(
                "{} values for a {n}x{dim} embedding matrix",
                values.len()
            )));
        }
        let m = Self {
            n,
            dim,
            values,
            source_tag: source_tag.into(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(EagerError::Shape("embedding dimension is zero".into()));
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(EagerError::NonFinite(format!(
                "embedding row {} column {}",
                pos / self.dim,
                pos % self.dim
            )));
        }
        for i in 0..self.n {
            if self.row(i).iter().all(|&v| v == 0.0) {
                return Err(EagerError::InvalidArgument(format!("embedding row {i} is all zero")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// L2-normalize every row in place.
    pub fn normalize_rows(&mut self) {
        for i in 0..self.n {
            let row = &mut self.values[i * self.dim..(i + 1) * self.dim];
            let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
    }

    /// Binary if the extension is `.bin`, text otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| EagerError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| EagerError::io(path, e);
        writeln!(w, "{} {}", self.n, self.dim).map_err(io)?;
        if is_binary(path) {
            for v in &self.values {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        } else {
            for i in 0..self.n {
                let line: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(" ")).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

pub fn load_embeddings(path: &Path, expected_n: usize) -> Result<EmbeddingMatrix> {
    let file = std::fs::File::open(path).map_err(|e| EagerError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| EagerError::io(path, e))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| EagerError::parse(path, 1, "header must be `N d`"))?;
    let [n, d] = dims[..] else {
        return Err(EagerError::parse(path, 1, "header must be `N d`"));
    };
    if n != expected_n {
        return Err(EagerError::Shape(format!(
            "{} declares {n} rows but the dataset has {expected_n} items",
            path.display()
        )));
    }
    let mut values = Vec::with_capacity(n * d);
    if is_binary(path) {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| EagerError::io(path, e))?;
        if bytes.len() != n * d * 4 {
            return Err(EagerError::Shape(format!(
                "{}: expected {} payload bytes, found {}",
                path.display(),
                n * d * 4,
                bytes.len()
            )));
        }
        values.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
    } else {
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| EagerError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let before = values.len();
            for tok in line.split_whitespace() {
                let v: f32 = tok
                    .parse()
                    .map_err(|_| EagerError::parse(path, i + 2, format!("bad number `{tok}`")))?;
                values.push(v);
            }
            if values.len() - before != d {
                return Err(EagerError::parse(path, i + 2, format!("expected {d} values")));
            }
        }
        if values.len() != n * d {
            return Err(EagerError::Shape(format!(
                "{}: expected {n} rows, found {}",
                path.display(),
                values.len() / d.max(1)
            )));
        }
    }
    EmbeddingMatrix::new(n, d, values, "file")
}

/// Symmetric positive-PMI matrix over items co-occurring within `window`
/// positions. Marginals use add-one smoothing:
/// `ppmi(i,j) = max(0, ln(c_ij * T / ((c_i + 1)(c_j + 1))))`.
pub fn ppmi_matrix(sequences: &[Vec<usize>], n: usize, window: usize) -> Result<CsrMatrix> {
    if window == 0 {
        return Err(invalid!("co-occurrence window must be >= 1"));
    }
    let mut counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for seq in sequences {
        for (i, &a) in seq.iter().enumerate() {
            if a >= n {
                return Err(invalid!("item {a} out of range for {n} items"));
            }
            for &b in seq.iter().skip(i + 1).take(window) {
                if a != b {
                    *counts.entry((a, b)).or_default() += 1.0;
                    *counts.entry((b, a)).or_default() += 1.0;
                }
            }
        }
    }
    let mut marginal = vec![0.0; n];
    let mut total = 0.0;
    for (&(a, _), &c) in &counts {
        marginal[a] += c;
        total += c;
    }
    let mut rows = vec![Vec::new(); n];
    for (&(a, b), &c) in &counts {
        let pmi = (c * total / ((marginal[a] + 1.0) * (marginal[b] + 1.0))).ln();
        if pmi > 0.0 {
            rows[a].push((b, pmi));
        }
    }
    Ok(CsrMatrix::from_rows(n, rows))
}

/// Rank-`d` factorization of the positive part of the PPMI spectrum:
/// row `i` is `ppmi_i · U diag(1/sqrt λ)` over the `d` largest positive
/// eigenvalues, so embedding inner products approximate PPMI. Components
/// with non-positive eigenvalues are left at zero.
pub fn cooccurrence_behavior_embeddings(
    sequences: &[Vec<usize>],
    n: usize,
    d: usize,
    window: usize,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    if d == 0 || d > n {
        return Err(invalid!("embedding dim {d} must be in 1..={n}"));
    }
    let m = ppmi_matrix(sequences, n, window)?;
    let eig = positive_eigenpairs(&m, d, seed);
    let scale: Vec<f64> = eig
        .values
        .iter()
        .map(|&l| if l > 1e-12 { 1.0 / l.sqrt() } else { 0.0 })
        .collect();
    let basis = DMatrix::from_fn(n, d, |i, j| eig.vectors[(i, j)] * scale[j]);
    let emb = m.mul_dense(&basis);
    finish(emb, "cooc-svd", seed, |i| m.row_nnz(i) == 0)
}

/// Algebraically largest `d` eigenpairs of a symmetric sparse matrix. The
/// operator is shifted by a Gershgorin bound so the whole spectrum is
/// non-negative, which makes "largest magnitude" equal "largest value".
pub fn positive_eigenpairs(m: &CsrMatrix, d: usize, seed: u64) -> EigenPairs {
    let shift = (0..m.rows)
        .map(|r| m.row(r).map(|(_, v)| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut eig = top_eigenpairs(m.rows, d, seed, |x| m.mul_dense(x) + x * shift);
    eig.values.iter_mut().for_each(|v| *v -= shift);
    eig
}

/// Exposed for diagnostics and tests.
pub fn ppmi_eigenpairs(m: &CsrMatrix, d: usize, seed: u64) -> EigenPairs {
    top_eigenpairs(m.rows, d, seed, |x| m.mul_dense(x))
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// TF-IDF rows over a hashed token vocabulary, L2-normalized. Columns are
/// the used hash buckets in ascending bucket order.
pub fn tfidf_matrix(texts: &[String]) -> CsrMatrix {
    let docs: Vec<BTreeMap<u64, f64>> = texts
        .iter()
        .map(|t| {
            let mut tf = BTreeMap::new();
            for tok in tokenize(t) {
                *tf.entry(rng::fnv1a(tok.as_bytes()) % HASH_BUCKETS).or_insert(0.0) += 1.0;
            }
            tf
        })
        .collect();
    let mut df: BTreeMap<u64, f64> = BTreeMap::new();
    for doc in &docs {
        for &b in doc.keys() {
            *df.entry(b).or_default() += 1.0;
        }
    }
    let col: HashMap<u64, usize> = df.keys().enumerate().map(|(i, &b)| (b, i)).collect();
    let n_docs = texts.len() as f64;
    let rows = docs
        .iter()
        .map(|doc| {
            let len: f64 = doc.values().sum();
            let mut row: Vec<(usize, f64)> = doc
                .iter()
                .map(|(b, &c)| {
                    let idf = ((1.0 + n_docs) / (1.0 + df[b])).ln() + 1.0;
                    (col[b], c / len * idf)
                })
                .collect();
            let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
            for e in row.iter_mut() {
                e.1 /= norm;
            }
            row
        })
        .collect();
    CsrMatrix::from_rows(df.len(), rows)
}

/// Rank-`d` truncated SVD of the TF-IDF matrix; rows are `U Σ`, computed as
/// `A V` so each row depends only on its own text.
pub fn text_semantic_embeddings(texts: &[String], d: usize, seed: u64) -> Result<EmbeddingMatrix> {
    let n = texts.len();
    if d == 0 || d > n {
        return Err(invalid!("embedding dim {d} must be in 1..={n}"));
    }
    let a = tfidf_matrix(texts);
    if a.values.is_empty() {
        return Err(EagerError::EmptyDataset("every item text is empty".into()));
    }
    let eig = top_eigenpairs(n, d, seed, |x| a.mul_dense(&a.tmul_dense(x)));
    let inv_sigma: Vec<f64> = eig
        .values
        .iter()
        .map(|&l| if l > 1e-12 { 1.0 / l.sqrt() } else { 0.0 })
        .collect();
    let mut v = a.tmul_dense(&eig.vectors);
    for (j, mut c) in v.column_iter_mut().enumerate() {
        c *= inv_sigma[j];
    }
    let emb = a.mul_dense(&v);
    finish(emb, "text-svd", seed, |i| a.row_nnz(i) == 0)
}

fn finish(
    emb: DMatrix<f64>,
    tag: &str,
    seed: u64,
    isolated: impl Fn(usize) -> bool,
) -> Result<EmbeddingMatrix> {
    let (n, d) = emb.shape();
    let mut values = Vec::with_capacity(n * d);
    for i in 0..n {
        let row: Vec<f32> = (0..d).map(|j| emb[(i, j)] as f32).collect();
        if isolated(i) || row.iter().all(|&v| v == 0.0) {
            log::warn!("{tag}: item {i} has no signal; using deterministic noise");
            let mut g = rng::rng_for(seed, "noise-row", &[i as u64]);
            values.extend((0..d).map(|_| {
                let z: f64 = StandardNormal.sample(&mut g);
                (z * NOISE_SCALE) as f32
            }));
        } else {
            values.extend(row);
        }
    }
    EmbeddingMatrix::new(n, d, values, tag)
}
