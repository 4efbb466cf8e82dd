//! Item identifiers from balanced hierarchical k-means.
//!
//! Every internal node splits its items into `min(branch_k, size)` children
//! whose sizes differ by at most one; a node with at most `branch_k` items
//! splits straight into singletons. All codes have the same length
//! `l = max(1, ceil(log_branch_k N))`; items that become singletons early are
//! padded with digit 0.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::embed::EmbeddingMatrix;
use crate::error::{invalid, EagerError, Result};
use crate::rng;

const LLOYD_ITERS: usize = 30;
const REFINE_ROUNDS: usize = 3;
/// Subtrees smaller than this are built on the calling thread.
const PAR_THRESHOLD: usize = 512;

pub type Digit = u32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemCode(pub Vec<Digit>);

impl ItemCode {
    pub fn digits(&self) -> &[Digit] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ItemCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TrieNode {
    /// Sorted by digit.
    children: Vec<(Digit, usize)>,
    item: Option<usize>,
}

/// Centroid of one child cluster, kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCentroid {
    pub prefix: Vec<Digit>,
    pub centroid: Vec<f64>,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeTree {
    branch_k: usize,
    depth: usize,
    stream_tag: String,
    seed: u64,
    codes: Vec<Digit>,
    trie: Vec<TrieNode>,
    pub centroids: Vec<NodeCentroid>,
}

/// Smallest `l >= 1` with `branch_k^l >= n`.
pub fn code_depth(n: usize, branch_k: usize) -> usize {
    let mut l = 1;
    let mut cap = branch_k;
    while cap < n {
        cap = cap.saturating_mul(branch_k);
        l += 1;
    }
    l
}

pub fn build_code_tree(embeddings: &EmbeddingMatrix, branch_k: usize, seed: u64) -> Result<CodeTree> {
    if branch_k < 2 {
        return Err(invalid!("branch_k must be >= 2, got {branch_k}"));
    }
    let n = embeddings.len();
    if n == 0 {
        return Err(invalid!("cannot build a code tree over zero items"));
    }
    if embeddings.values().iter().any(|v| !v.is_finite()) {
        return Err(EagerError::NonFinite("embedding matrix".into()));
    }
    let points: Vec<Vec<f64>> = (0..n).map(|i| embeddings.row_f64(i)).collect();
    let depth = code_depth(n, branch_k);
    let builder = Builder {
        points: &points,
        branch_k,
        depth,
    };
    let members: Vec<usize> = (0..n).collect();
    let out = builder.split(&members, Vec::new(), seed);

    let mut codes = vec![0; n * depth];
    for (item, code) in out.codes {
        codes[item * depth..(item + 1) * depth].copy_from_slice(&code);
    }
    let mut tree = CodeTree::from_codes(branch_k, depth, codes, String::new(), seed)?;
    tree.centroids = out.centroids;
    Ok(tree)
}

#[derive(Default)]
struct SubtreeOut {
    codes: Vec<(usize, Vec<Digit>)>,
    centroids: Vec<NodeCentroid>,
}

struct Builder<'a> {
    points: &'a [Vec<f64>],
    branch_k: usize,
    depth: usize,
}

impl Builder<'_> {
    fn split(&self, members: &[usize], prefix: Vec<Digit>, seed: u64) -> SubtreeOut {
        if members.len() == 1 {
            let mut code = prefix;
            code.resize(self.depth, 0);
            return SubtreeOut {
                codes: vec![(members[0], code)],
                centroids: Vec::new(),
            };
        }
        debug_assert!(prefix.len() < self.depth);

        let mut children: Vec<Vec<usize>> = if members.len() <= self.branch_k {
            members.iter().map(|&m| vec![m]).collect()
        } else {
            balanced_kmeans(self.points, members, self.branch_k, seed)
        };
        let mut keyed: Vec<(Vec<f64>, usize, Vec<usize>)> = children
            .drain(..)
            .map(|c| {
                let centroid = mean_of(self.points, &c);
                let lowest = *c.iter().min().unwrap();
                (centroid, lowest, c)
            })
            .collect();
        keyed.sort_by(|a, b| lex_cmp(&a.0, &b.0).then(a.1.cmp(&b.1)));

        let build_child = |(digit, (centroid, _, child)): (usize, &(Vec<f64>, usize, Vec<usize>))| {
            let mut p = prefix.clone();
            p.push(digit as Digit);
            let mut sub = self.split(child, p.clone(), rng::derive(seed, digit as u64));
            sub.centroids.insert(
                0,
                NodeCentroid {
                    prefix: p,
                    centroid: centroid.clone(),
                    size: child.len(),
                },
            );
            sub
        };
        let subs: Vec<SubtreeOut> = if members.len() >= PAR_THRESHOLD {
            keyed.par_iter().enumerate().map(build_child).collect()
        } else {
            keyed.iter().enumerate().map(build_child).collect()
        };
        let mut out = SubtreeOut::default();
        for s in subs {
            out.codes.extend(s.codes);
            out.centroids.extend(s.centroids);
        }
        out
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let d = points[members[0]].len();
    let mut c = vec![0.0; d];
    for &m in members {
        for (acc, v) in c.iter_mut().zip(&points[m]) {
            *acc += v;
        }
    }
    let inv = 1.0 / members.len() as f64;
    c.iter_mut().for_each(|v| *v *= inv);
    c
}

fn nearest(p: &[f64], centroids: &[Vec<f64>], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for (c, cent) in centroids.iter().enumerate() {
        if !allowed(c) {
            continue;
        }
        let d = sq_dist(p, cent);
        if d < best.1 || best.0 == usize::MAX {
            best = (c, d);
        }
    }
    best.0
}

/// k-means++ seeding, Lloyd iterations, then capacity-constrained greedy
/// rebalancing so that cluster sizes differ by at most one. Returns `k`
/// non-empty clusters.
pub fn balanced_kmeans(points: &[Vec<f64>], members: &[usize], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let n = members.len();
    assert!(k >= 1 && k <= n);
    let mut g = rng::rng_for(seed, "kmeans", &[n as u64, k as u64]);

    // k-means++
    let mut chosen = vec![false; n];
    let first = g.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[members[first]].clone()];
    let mut d2: Vec<f64> = members.iter().map(|&m| sq_dist(&points[m], &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = g.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && !chosen[i] {
                    if r < w {
                        pick = Some(i);
                        break;
                    }
                    r -= w;
                }
            }
            pick.unwrap_or_else(|| (0..n).rev().find(|&i| !chosen[i] && d2[i] > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[g.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[members[pick]].clone());
        let c = centroids.last().unwrap();
        for (i, &m) in members.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(&points[m], c));
        }
    }

    // Lloyd
    let mut assign: Vec<usize> = members.iter().map(|&m| nearest(&points[m], &centroids, |_| true)).collect();
    for _ in 0..LLOYD_ITERS {
        update_centroids(points, members, &assign, &mut centroids);
        let next: Vec<usize> = members.iter().map(|&m| nearest(&points[m], &centroids, |_| true)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }

    // rebalance, then a few balanced refinement rounds
    rebalance(points, members, &mut assign, &centroids, k);
    for _ in 0..REFINE_ROUNDS {
        update_centroids(points, members, &assign, &mut centroids);
        let mut next: Vec<usize> = members.iter().map(|&m| nearest(&points[m], &centroids, |_| true)).collect();
        rebalance(points, members, &mut next, &centroids, k);
        if next == assign {
            break;
        }
        assign = next;
    }

    let mut clusters = vec![Vec::new(); k];
    for (i, &c) in assign.iter().enumerate() {
        clusters[c].push(members[i]);
    }
    clusters
}

fn update_centroids(points: &[Vec<f64>], members: &[usize], assign: &[usize], centroids: &mut [Vec<f64>]) {
    let d = centroids[0].len();
    let mut sums = vec![vec![0.0; d]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(&points[members[i]]) {
            *s += v;
        }
    }
    for c in 0..centroids.len() {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            centroids[c] = sums[c].iter().map(|s| s * inv).collect();
        }
    }
}

/// Move the farthest members of over-full clusters to the nearest cluster
/// with room until every size is `floor(n/k)` or `ceil(n/k)`.
fn rebalance(points: &[Vec<f64>], members: &[usize], assign: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    let n = members.len();
    let mut sizes = vec![0usize; k];
    for &c in assign.iter() {
        sizes[c] += 1;
    }
    let (base, extra) = (n / k, n % k);
    let mut by_size: Vec<usize> = (0..k).collect();
    by_size.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut cap = vec![base; k];
    for &c in by_size.iter().take(extra) {
        cap[c] += 1;
    }
    for c in 0..k {
        while sizes[c] > cap[c] {
            let far = (0..n)
                .filter(|&i| assign[i] == c)
                .max_by(|&a, &b| {
                    sq_dist(&points[members[a]], &centroids[c])
                        .total_cmp(&sq_dist(&points[members[b]], &centroids[c]))
                        .then(b.cmp(&a))
                })
                .unwrap();
            let to = nearest(&points[members[far]], centroids, |t| sizes[t] < cap[t]);
            assign[far] = to;
            sizes[c] -= 1;
            sizes[to] += 1;
        }
    }
}

impl CodeTree {
    /// Assemble from a flat `N × depth` digit array, building the trie and
    /// checking that codes are unique and in range.
    pub fn from_codes(branch_k: usize, depth: usize, codes: Vec<Digit>, stream_tag: String, seed: u64) -> Result<Self> {
        if depth == 0 || codes.len() % depth != 0 {
            return Err(EagerError::Shape(format!("{} digits with depth {depth}", codes.len())));
        }
        let n = codes.len() / depth;
        let mut trie = vec![TrieNode {
            children: Vec::new(),
            item: None,
        }];
        for item in 0..n {
            let code = &codes[item * depth..(item + 1) * depth];
            let mut node = 0;
            for &d in code {
                if d as usize >= branch_k {
                    return Err(invalid!("item {item}: digit {d} >= branch_k {branch_k}"));
                }
                node = match trie[node].children.binary_search_by_key(&d, |&(dd, _)| dd) {
                    Ok(pos) => trie[node].children[pos].1,
                    Err(pos) => {
                        trie.push(TrieNode {
                            children: Vec::new(),
                            item: None,
                        });
                        let id = trie.len() - 1;
                        trie[node].children.insert(pos, (d, id));
                        id
                    }
                };
            }
            if let Some(prev) = trie[node].item {
                return Err(invalid!("items {prev} and {item} share a code"));
            }
            trie[node].item = Some(item);
        }
        Ok(Self {
            branch_k,
            depth,
            stream_tag,
            seed,
            codes,
            trie,
            centroids: Vec::new(),
        })
    }

    pub fn with_stream_tag(mut self, tag: impl Into<String>) -> Self {
        self.stream_tag = tag.into();
        self
    }

    pub fn num_items(&self) -> usize {
        self.codes.len() / self.depth
    }

    pub fn branch_k(&self) -> usize {
        self.branch_k
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn stream_tag(&self) -> &str {
        &self.stream_tag
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn digits(&self, item: usize) -> &[Digit] {
        &self.codes[item * self.depth..(item + 1) * self.depth]
    }

    pub fn item_to_code(&self, item: usize) -> Result<ItemCode> {
        if item >= self.num_items() {
            return Err(invalid!("item {item} out of range for {} items", self.num_items()));
        }
        Ok(ItemCode(self.digits(item).to_vec()))
    }

    pub fn code_to_item(&self, code: &[Digit]) -> Result<Option<usize>> {
        if code.len() != self.depth {
            return Err(invalid!("code length {} != depth {}", code.len(), self.depth));
        }
        Ok(self.walk(code).and_then(|n| self.trie[n].item))
    }

    fn walk(&self, prefix: &[Digit]) -> Option<usize> {
        let mut node = 0;
        for &d in prefix {
            let kids = &self.trie[node].children;
            node = kids[kids.binary_search_by_key(&d, |&(dd, _)| dd).ok()?].1;
        }
        Some(node)
    }

    /// Digits that extend `prefix` toward at least one item, ascending.
    pub fn valid_next_digits(&self, prefix: &[Digit]) -> Vec<Digit> {
        if prefix.len() >= self.depth {
            return Vec::new();
        }
        match self.walk(prefix) {
            Some(n) => self.trie[n].children.iter().map(|&(d, _)| d).collect(),
            None => Vec::new(),
        }
    }

    fn leaf_count(&self, node: usize) -> usize {
        let t = &self.trie[node];
        t.item.map_or(0, |_| 1) + t.children.iter().map(|&(_, c)| self.leaf_count(c)).sum::<usize>()
    }

    /// Bijection, uniform depth, capacity, and per-node balance.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.num_items();
        if self.depth != code_depth(n, self.branch_k) {
            return Err(invalid!("depth {} but expected {}", self.depth, code_depth(n, self.branch_k)));
        }
        for item in 0..n {
            if self.code_to_item(self.digits(item))? != Some(item) {
                return Err(invalid!("item {item} does not resolve through the trie"));
            }
        }
        for (id, node) in self.trie.iter().enumerate() {
            if node.children.len() > self.branch_k {
                return Err(invalid!("trie node {id} has {} children", node.children.len()));
            }
            let sizes: Vec<usize> = node.children.iter().map(|&(_, c)| self.leaf_count(c)).collect();
            if let (Some(lo), Some(hi)) = (sizes.iter().min(), sizes.iter().max()) {
                if hi - lo > 1 {
                    return Err(invalid!("trie node {id} is unbalanced: sizes {lo}..{hi}"));
                }
            }
        }
        Ok(())
    }

    /// Max minus min child size at every internal node with ≥ 2 children.
    pub fn max_imbalance(&self) -> usize {
        self.trie
            .iter()
            .filter(|t| t.children.len() >= 2)
            .map(|t| {
                let sizes: Vec<usize> = t.children.iter().map(|&(_, c)| self.leaf_count(c)).collect();
                sizes.iter().max().unwrap() - sizes.iter().min().unwrap()
            })
            .max()
            .unwrap_or(0)
    }

    /// Header `N branch_k l stream_tag seed`, then `item d1 … dl` per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| EagerError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| EagerError::io(path, e);
        let tag = if self.stream_tag.is_empty() { "-" } else { &self.stream_tag };
        writeln!(w, "{} {} {} {} {}", self.num_items(), self.branch_k, self.depth, tag, self.seed).map_err(io)?;
        for item in 0..self.num_items() {
            write!(w, "{item}").map_err(io)?;
            for d in self.digits(item) {
                write!(w, " {d}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EagerError::io(path, e))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
        let bad_header = || EagerError::parse(path, 1, "header must be `N branch_k l stream_tag seed`");
        if header.len() != 5 {
            return Err(bad_header());
        }
        let n: usize = header[0].parse().map_err(|_| bad_header())?;
        let branch_k: usize = header[1].parse().map_err(|_| bad_header())?;
        let depth: usize = header[2].parse().map_err(|_| bad_header())?;
        let tag = if header[3] == "-" { String::new() } else { header[3].to_string() };
        let seed: u64 = header[4].parse().map_err(|_| bad_header())?;
        let mut codes = vec![0; n * depth];
        let mut seen = vec![false; n];
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| EagerError::parse(path, i + 2, m);
            let nums: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("non-integer field"))?;
            if nums.len() != depth + 1 {
                return Err(bad("wrong number of digits"));
            }
            let item = nums[0];
            if item >= n || seen[item] {
                return Err(bad("item index out of range or repeated"));
            }
            seen[item] = true;
            for (j, &d) in nums[1..].iter().enumerate() {
                codes[item * depth + j] = d as Digit;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(EagerError::parse(path, 0, format!("no code for item {missing}")));
        }
        CodeTree::from_codes(branch_k, depth, codes, tag, seed)
    }
}
