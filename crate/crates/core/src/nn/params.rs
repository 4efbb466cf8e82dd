//! Named parameter storage, gradient buffers, and the checkpoint format:
//! a text manifest (`name rows,cols dtype offset` per line) next to a
//! contiguous little-endian `f64` blob.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::mat::Mat;
use crate::error::{EagerError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Mat::from_vec(rows, cols, vec![v; rows * cols]))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Write `<stem>.manifest` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let manifest_path = stem.with_extension("manifest");
        let blob_path = stem.with_extension("bin");
        let mut manifest = String::new();
        let mut offset = 0usize;
        for (name, v) in self.names.iter().zip(&self.values) {
            manifest.push_str(&format!("{name} {},{} f64 {offset}\n", v.rows, v.cols));
            offset += v.len() * 8;
        }
        std::fs::write(&manifest_path, manifest).map_err(|e| EagerError::io(&manifest_path, e))?;
        let file = std::fs::File::create(&blob_path).map_err(|e| EagerError::io(&blob_path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for v in &self.values {
            for x in &v.data {
                w.write_all(&x.to_le_bytes()).map_err(|e| EagerError::io(&blob_path, e))?;
            }
        }
        w.flush().map_err(|e| EagerError::io(&blob_path, e))
    }

    /// Overwrite values from a checkpoint. Every tensor in `self` must be
    /// present with the same shape; errors name the offending tensor.
    pub fn load_into(&mut self, stem: &Path) -> Result<()> {
        let manifest_path = stem.with_extension("manifest");
        let blob_path = stem.with_extension("bin");
        let manifest = std::fs::read_to_string(&manifest_path).map_err(|e| EagerError::io(&manifest_path, e))?;
        let mut blob = Vec::new();
        std::fs::File::open(&blob_path)
            .and_then(|mut f| f.read_to_end(&mut blob))
            .map_err(|e| EagerError::io(&blob_path, e))?;

        let mut entries: HashMap<&str, (usize, usize, usize)> = HashMap::new();
        for (i, line) in manifest.lines().enumerate() {
            let bad = |m: &str| EagerError::parse(&manifest_path, i + 1, m);
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad("expected `name rows,cols dtype offset`"));
            }
            if f[2] != "f64" {
                return Err(bad("only f64 tensors are supported"));
            }
            let (r, c) = f[1].split_once(',').ok_or_else(|| bad("bad shape"))?;
            let rows: usize = r.parse().map_err(|_| bad("bad rows"))?;
            let cols: usize = c.parse().map_err(|_| bad("bad cols"))?;
            let off: usize = f[3].parse().map_err(|_| bad("bad offset"))?;
            entries.insert(f[0], (rows, cols, off));
        }
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            let &(rows, cols, off) = entries
                .get(name.as_str())
                .ok_or_else(|| EagerError::Checkpoint(format!("tensor `{name}` missing from checkpoint")))?;
            if (rows, cols) != v.shape() {
                return Err(EagerError::Checkpoint(format!(
                    "tensor `{name}` has shape {rows}x{cols} in checkpoint but {}x{} in config",
                    v.rows, v.cols
                )));
            }
            let end = off + rows * cols * 8;
            if end > blob.len() {
                return Err(EagerError::Checkpoint(format!("tensor `{name}` runs past end of blob")));
            }
            for (x, chunk) in v.data.iter_mut().zip(blob[off..end].chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if entries.len() != self.names.len() {
            let extra: Vec<&str> = entries.keys().copied().filter(|k| self.get(k).is_none()).collect();
            return Err(EagerError::Checkpoint(format!("unexpected tensors in checkpoint: {extra:?}")));
        }
        Ok(())
    }
}

/// Dense gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Mat>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params.values.iter().map(|v| Mat::zeros(v.rows, v.cols)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn add(&mut self, id: ParamId, g: &Mat) {
        self.grads[id.0].add_assign(g);
    }

    pub fn scatter_rows(&mut self, id: ParamId, rows: &[usize], g: &Mat) {
        let target = &mut self.grads[id.0];
        for (r, &dst) in rows.iter().enumerate() {
            for (a, b) in target.row_mut(dst).iter_mut().zip(g.row(r)) {
                *a += b;
            }
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn is_zero(&self, id: ParamId) -> bool {
        self.grads[id.0].data.iter().all(|&v| v == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Mat::is_finite)
    }
}
