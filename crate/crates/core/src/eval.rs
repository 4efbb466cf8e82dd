//! Leave-one-out evaluation with Recall@K and NDCG@K over the full catalog.

use std::fmt::Write as _;
use std::path::Path;

use crate::codes::CodeTree;
use crate::corpus::{truncate_history, Split};
use crate::error::{invalid, Result};
use crate::infer::{check_trees, recommend_topk, RankedList};
use crate::kv::KvFile;
use crate::model::EagerModel;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

/// Evaluation history length.
pub const EVAL_HISTORY: usize = 20;

/// Anything that ranks the catalog for a history.
pub trait Recommender {
    fn recommend(&self, history: &[usize], k: usize) -> Result<RankedList>;
}

/// The trained network with its code trees.
pub struct EagerRecommender<'a> {
    model: &'a EagerModel,
    trees: Vec<&'a CodeTree>,
    beam: usize,
}

impl<'a> EagerRecommender<'a> {
    pub fn new(model: &'a EagerModel, trees: Vec<&'a CodeTree>, beam: usize) -> Result<Self> {
        check_trees(model, &trees)?;
        Ok(Self { model, trees, beam })
    }
}

impl Recommender for EagerRecommender<'_> {
    fn recommend(&self, history: &[usize], k: usize) -> Result<RankedList> {
        recommend_topk(self.model, &self.trees, history, k, self.beam.max(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetField {
    Valid,
    Test,
}

pub fn recall_at_k(ranked: &RankedList, target: usize, k: usize) -> f64 {
    match ranked.rank_of(target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at_k(ranked: &RankedList, target: usize, k: usize) -> f64 {
    match ranked.rank_of(target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub num_eval_users: usize,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    /// Monotone in K, NDCG bounded by recall, everything in [0, 1].
    pub fn check(&self) -> Result<()> {
        for i in 0..self.ks.len() {
            let (r, n) = (self.recall[i], self.ndcg[i]);
            if !(0.0..=1.0).contains(&r) || !(0.0..=1.0).contains(&n) || n > r + 1e-12 {
                return Err(invalid!("inconsistent metrics at K={}: recall {r}, ndcg {n}", self.ks[i]));
            }
            if i > 0 && (r + 1e-12 < self.recall[i - 1] || n + 1e-12 < self.ndcg[i - 1]) {
                return Err(invalid!("metrics decrease from K={} to K={}", self.ks[i - 1], self.ks[i]));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        for (i, k) in self.ks.iter().enumerate() {
            kv.set(&format!("recall@{k}"), format!("{:.6}", self.recall[i]));
            kv.set(&format!("ndcg@{k}"), format!("{:.6}", self.ndcg[i]));
        }
        kv.set("num_eval_users", self.num_eval_users);
        kv
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<8}{:>10}{:>10}\n", "K", "Recall", "NDCG");
        for (i, k) in self.ks.iter().enumerate() {
            let _ = writeln!(s, "{:<8}{:>10.4}{:>10.4}", k, self.recall[i], self.ndcg[i]);
        }
        let _ = writeln!(s, "users: {}", self.num_eval_users);
        s
    }
}

/// Score every evaluable user. The test history includes the validation
/// item; both are capped at the last `max_history` items.
pub fn evaluate_leave_one_out(
    rec: &dyn Recommender,
    split: &Split,
    ks: &[usize],
    field: TargetField,
    max_history: usize,
) -> Result<MetricsReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(invalid!("cutoffs must be positive and non-empty"));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let kmax = *ks.last().expect("non-empty");
    let mut recall = vec![0.0; ks.len()];
    let mut ndcg = vec![0.0; ks.len()];
    let mut history = Vec::new();
    for u in &split.users {
        history.clear();
        history.extend_from_slice(&u.train);
        let target = match field {
            TargetField::Valid => u.valid,
            TargetField::Test => {
                history.push(u.valid);
                u.test
            }
        };
        let ranked = rec.recommend(truncate_history(&history, max_history), kmax)?;
        for (i, &k) in ks.iter().enumerate() {
            recall[i] += recall_at_k(&ranked, target, k);
            ndcg[i] += ndcg_at_k(&ranked, target, k);
        }
    }
    let n = split.users.len();
    if n == 0 {
        return Err(invalid!("no users to evaluate"));
    }
    let report = MetricsReport {
        ks,
        recall: recall.into_iter().map(|v| v / n as f64).collect(),
        ndcg: ndcg.into_iter().map(|v| v / n as f64).collect(),
        num_eval_users: n,
    };
    report.check()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::UserSplit;
    use crate::rng::rng_for;
    use rand::seq::SliceRandom;

    fn list(items: &[usize]) -> RankedList {
        RankedList::new(items.iter().enumerate().map(|(r, &i)| (i, r as f64)).collect(), items.len()).unwrap()
    }

    /// DCG over a binary relevance vector divided by the ideal DCG.
    fn general_ndcg(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
        let dcg: f64 = ranked
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, i)| relevant.contains(i))
            .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
            .sum();
        let ideal: f64 = (0..relevant.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
        dcg / ideal
    }

    #[test]
    fn metric_examples() {
        let r = list(&[4, 7, 9, 1]);
        assert_eq!(recall_at_k(&r, 4, 5), 1.0);
        assert_eq!(ndcg_at_k(&r, 4, 5), 1.0);
        assert_eq!(ndcg_at_k(&r, 9, 5), 0.5);
        assert_eq!(ndcg_at_k(&r, 9, 5), general_ndcg(&[4, 7, 9, 1], &[9], 5));
        assert_eq!(recall_at_k(&r, 3, 5), 0.0);
        assert_eq!(ndcg_at_k(&r, 3, 5), 0.0);
        assert_eq!(recall_at_k(&r, 1, 3), 0.0);
    }

    struct Fixed(Vec<Vec<usize>>);

    impl Recommender for Fixed {
        fn recommend(&self, history: &[usize], k: usize) -> Result<RankedList> {
            let mut l = self.0[history[0]].clone();
            l.truncate(k);
            Ok(list(&l))
        }
    }

    fn user(id: usize, train: Vec<usize>, valid: usize, test: usize) -> UserSplit {
        UserSplit { user: id, train, valid, test }
    }

    #[test]
    fn hand_computed_three_users() {
        // first training item selects the fixed ranking
        let rec = Fixed(vec![vec![5, 6, 7], vec![8, 6, 5, 9, 3, 2], vec![1, 2]]);
        let split = Split {
            users: vec![user(0, vec![0], 5, 7), user(1, vec![1], 9, 2), user(2, vec![2], 4, 4)],
            excluded: vec![],
        };
        let v = evaluate_leave_one_out(&rec, &split, &[1, 5], TargetField::Valid, 20).unwrap();
        assert_eq!(v.recall, vec![1.0 / 3.0, 2.0 / 3.0]);
        let n5 = (1.0 + 1.0 / 5f64.log2()) / 3.0;
        assert!((v.ndcg[1] - n5).abs() < 1e-15);
        let t = evaluate_leave_one_out(&rec, &split, &[5, 1], TargetField::Test, 20).unwrap();
        assert_eq!(t.ks, vec![1, 5]);
        assert_eq!(t.recall, vec![0.0, 1.0 / 3.0]);
        assert!((t.ndcg[1] - 0.5 / 3.0).abs() < 1e-15);
    }

    struct Oracle<'a>(&'a Split, TargetField);

    impl Recommender for Oracle<'_> {
        fn recommend(&self, history: &[usize], _k: usize) -> Result<RankedList> {
            let u = &self.0.users[history[0]];
            Ok(list(&[match self.1 {
                TargetField::Valid => u.valid,
                TargetField::Test => u.test,
            }]))
        }
    }

    #[test]
    fn oracle_scores_one() {
        let split = Split {
            users: (0..10).map(|u| user(u, vec![u], u + 10, u + 20)).collect(),
            excluded: vec![],
        };
        for f in [TargetField::Valid, TargetField::Test] {
            let r = evaluate_leave_one_out(&Oracle(&split, f), &split, &DEFAULT_KS, f, 20).unwrap();
            assert!(r.recall.iter().chain(&r.ndcg).all(|&v| v == 1.0));
        }
    }

    #[test]
    fn history_is_capped_and_includes_valid_for_test() {
        struct Spy(std::cell::RefCell<Vec<Vec<usize>>>);
        impl Recommender for Spy {
            fn recommend(&self, history: &[usize], _k: usize) -> Result<RankedList> {
                self.0.borrow_mut().push(history.to_vec());
                Ok(list(&[]))
            }
        }
        let split = Split {
            users: vec![user(0, (0..30).collect(), 30, 31)],
            excluded: vec![],
        };
        let spy = Spy(Default::default());
        evaluate_leave_one_out(&spy, &split, &[5], TargetField::Valid, 20).unwrap();
        evaluate_leave_one_out(&spy, &split, &[5], TargetField::Test, 20).unwrap();
        let seen = spy.0.into_inner();
        assert_eq!(seen[0], (10..30).collect::<Vec<_>>());
        assert_eq!(seen[1], (11..31).collect::<Vec<_>>());
    }

    struct RandomScores(std::cell::RefCell<crate::rng::Rng>, usize);

    impl Recommender for RandomScores {
        fn recommend(&self, _h: &[usize], k: usize) -> Result<RankedList> {
            let mut items: Vec<usize> = (0..self.1).collect();
            items.shuffle(&mut *self.0.borrow_mut());
            items.truncate(k);
            Ok(list(&items))
        }
    }

    #[test]
    fn random_model_recall_matches_expectation() {
        let split = Split {
            users: (0..10_000).map(|u| user(u, vec![u % 100], (u * 7) % 100, (u * 13) % 100)).collect(),
            excluded: vec![],
        };
        let rec = RandomScores(std::cell::RefCell::new(rng_for(1, "random-rec", &[])), 100);
        let r = evaluate_leave_one_out(&rec, &split, &DEFAULT_KS, TargetField::Test, 20).unwrap();
        assert!((r.recall_at(5).unwrap() - 0.05).abs() < 0.01, "{}", r.table());
    }

    #[test]
    fn report_output() {
        let r = MetricsReport {
            ks: vec![5, 10],
            recall: vec![0.25, 0.5],
            ndcg: vec![0.125, 0.2],
            num_eval_users: 4,
        };
        assert_eq!(
            r.to_kv().to_string(),
            "recall@5=0.250000\nndcg@5=0.125000\nrecall@10=0.500000\nndcg@10=0.200000\nnum_eval_users=4\n"
        );
        assert!(r.table().contains("10"));
        let bad = MetricsReport { ndcg: vec![0.3, 0.2], ..r };
        assert!(bad.check().is_err());
    }
}
