//! Trie-constrained beam search per stream and confidence-based fusion of
//! the streams' candidates into one ranked list.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::codes::{CodeTree, Digit, ItemCode};
use crate::error::{invalid, Result};
use crate::model::{EagerModel, Encoded, Memory};
use crate::nn::Tape;

/// Default beam width.
pub const DEFAULT_BEAM: usize = 100;

/// A partial code with its cumulative natural-log probability.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub digits: Vec<Digit>,
    pub logprob: f64,
}

/// Source of next-digit log-probabilities for one stream.
pub trait DigitScorer {
    /// Full-alphabet log-probabilities for each prefix. All prefixes share
    /// one length.
    fn log_probs(&mut self, prefixes: &[Vec<Digit>]) -> Result<Vec<Vec<f64>>>;
}

/// Higher log-probability first, then lexicographically smaller digits.
fn beam_order(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.logprob.total_cmp(&a.logprob).then_with(|| a.digits.cmp(&b.digits))
}

/// Level-synchronous beam search over the tree's trie. Returns up to `k`
/// complete codes, best first.
pub fn beam_search(scorer: &mut dyn DigitScorer, tree: &CodeTree, beam: usize, k: usize) -> Result<Vec<(ItemCode, f64)>> {
    if k == 0 {
        return Err(invalid!("top-k must be at least 1"));
    }
    if beam < k {
        return Err(invalid!("beam size {beam} is smaller than k = {k}"));
    }
    let mut beams = vec![BeamHypothesis {
        digits: Vec::new(),
        logprob: 0.0,
    }];
    for level in 0..tree.depth() {
        let prefixes: Vec<Vec<Digit>> = beams.iter().map(|b| b.digits.clone()).collect();
        let lps = scorer.log_probs(&prefixes)?;
        if lps.len() != beams.len() {
            return Err(invalid!("scorer returned {} rows for {} prefixes", lps.len(), beams.len()));
        }
        let mut next = Vec::new();
        for (hyp, lp) in beams.iter().zip(&lps) {
            if lp.len() != tree.branch_k() {
                return Err(invalid!("level {level}: {} log-probs for branch_k {}", lp.len(), tree.branch_k()));
            }
            for d in tree.valid_next_digits(&hyp.digits) {
                let mut digits = hyp.digits.clone();
                digits.push(d);
                next.push(BeamHypothesis {
                    digits,
                    logprob: hyp.logprob + lp[d as usize],
                });
            }
        }
        next.sort_by(beam_order);
        next.truncate(beam);
        beams = next;
    }
    beams.truncate(k);
    Ok(beams.into_iter().map(|b| (ItemCode(b.digits), b.logprob)).collect())
}

/// Length-normalized negative log-likelihood; lower is more confident.
pub fn confidence_score(logprob: f64, len: usize) -> f64 {
    debug_assert!(len >= 1);
    -logprob / len as f64
}

/// Items ranked by ascending confidence score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    entries: Vec<(usize, f64)>,
    k: usize,
}

impl RankedList {
    /// Build from already ranked entries, checking uniqueness, order, and size.
    pub fn new(entries: Vec<(usize, f64)>, k: usize) -> Result<Self> {
        if entries.len() > k {
            return Err(invalid!("{} entries exceed k = {k}", entries.len()));
        }
        if entries.windows(2).any(|w| w[0].1 > w[1].1) {
            return Err(invalid!("scores must be non-decreasing"));
        }
        let mut seen: Vec<usize> = entries.iter().map(|e| e.0).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid!("duplicate item in ranked list"));
        }
        Ok(Self { entries, k })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    /// 1-based rank of `item`, if present.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.0 == item).map(|p| p + 1)
    }

    /// `user item:score ...` with six-decimal scores.
    pub fn to_line(&self, user: &str, item_id: impl Fn(usize) -> String) -> String {
        let mut line = user.to_string();
        for &(item, score) in &self.entries {
            line.push_str(&format!(" {}:{score:.6}", item_id(item)));
        }
        line
    }
}

/// Merge per-stream `(item, score)` lists: keep each item's minimum score,
/// sort ascending with ties broken by stream order then item index, and
/// truncate to `k`.
pub fn fuse_rankings(per_stream: &[Vec<(usize, f64)>], k: usize) -> RankedList {
    let mut best: HashMap<usize, (f64, usize)> = HashMap::new();
    for (s, list) in per_stream.iter().enumerate() {
        for &(item, score) in list {
            best.entry(item)
                .and_modify(|cur| {
                    if score < cur.0 {
                        *cur = (score, s);
                    }
                })
                .or_insert((score, s));
        }
    }
    let mut all: Vec<(usize, f64, usize)> = best.into_iter().map(|(i, (sc, s))| (i, sc, s)).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.cmp(&b.2)).then(a.0.cmp(&b.0)));
    all.truncate(k);
    RankedList {
        entries: all.into_iter().map(|(i, sc, _)| (i, sc)).collect(),
        k,
    }
}

/// A history encoded once, shared by every stream's search.
pub struct InferenceSession<'m> {
    model: &'m EagerModel,
    tape: Tape<'m>,
    enc: Encoded,
}

impl<'m> InferenceSession<'m> {
    pub fn new(model: &'m EagerModel, history: &[usize]) -> Result<Self> {
        if history.is_empty() {
            return Err(invalid!("history is empty"));
        }
        let mut tape = Tape::new(model.params());
        let enc = model.encode(&mut tape, &[history])?;
        Ok(Self { model, tape, enc })
    }

    pub fn stream(&mut self, stream: usize) -> StreamView<'_, 'm> {
        let memory = self.model.memory(&mut self.tape, stream, &self.enc);
        StreamView {
            model: self.model,
            tape: &mut self.tape,
            stream,
            memory,
        }
    }
}

/// One stream decoder bound to an encoded history.
pub struct StreamView<'s, 'm> {
    model: &'m EagerModel,
    tape: &'s mut Tape<'m>,
    stream: usize,
    memory: Memory,
}

impl DigitScorer for StreamView<'_, '_> {
    fn log_probs(&mut self, prefixes: &[Vec<Digit>]) -> Result<Vec<Vec<f64>>> {
        self.model.step_log_probs(self.tape, self.stream, &self.memory, prefixes)
    }
}

/// Check that the trees match the model's streams and catalog.
pub fn check_trees(model: &EagerModel, trees: &[&CodeTree]) -> Result<()> {
    if trees.len() != model.num_streams() {
        return Err(invalid!("{} code trees for {} streams", trees.len(), model.num_streams()));
    }
    for (s, tree) in trees.iter().enumerate() {
        let spec = model.stream(s);
        if tree.branch_k() != spec.branch_k || tree.depth() != spec.depth {
            return Err(invalid!(
                "stream `{}` expects branch_k {} depth {}, tree has {} and {}",
                spec.name,
                spec.branch_k,
                spec.depth,
                tree.branch_k(),
                tree.depth()
            ));
        }
        if tree.num_items() != model.config().num_items {
            return Err(invalid!("stream `{}` tree covers {} items, model has {}", spec.name, tree.num_items(), model.config().num_items));
        }
    }
    Ok(())
}

/// Top-`k` items for one history. `k` is clamped to the catalog size.
pub fn recommend_topk(model: &EagerModel, trees: &[&CodeTree], history: &[usize], k: usize, beam: usize) -> Result<RankedList> {
    check_trees(model, trees)?;
    let k = k.min(model.config().num_items);
    let mut session = InferenceSession::new(model, history)?;
    let mut per_stream = Vec::with_capacity(trees.len());
    for (s, tree) in trees.iter().enumerate() {
        let mut view = session.stream(s);
        let found = beam_search(&mut view, tree, beam, k)?;
        let mut list = Vec::with_capacity(found.len());
        for (code, lp) in found {
            let item = tree
                .code_to_item(code.digits())?
                .ok_or_else(|| invalid!("beam produced unknown code {code}"))?;
            list.push((item, confidence_score(lp, tree.depth())));
        }
        per_stream.push(list);
    }
    Ok(fuse_rankings(&per_stream, k))
}
