//! Fixtures shared by the benchmarks.

use eager_core::embed::EmbeddingMatrix;
use eager_core::model::{EagerModel, Instance, ModelConfig, StreamSpec};
use eager_core::rng::rng_for;
use eager_core::selfcheck::{jitter, random_code_tree};
use eager_core::CodeTree;
use rand::Rng as _;

pub struct Fixture {
    pub model: EagerModel,
    pub trees: Vec<CodeTree>,
    pub targets: Vec<EmbeddingMatrix>,
    pub batch: Vec<Instance>,
}

/// A two-stream model over `n` items with `k^2 >= n` codes per stream and
/// a batch of `batch` random instances with history length 20.
pub fn fixture(n: usize, k: usize, hidden: usize, batch: usize) -> Fixture {
    let mut rng = rng_for(1, "bench", &[]);
    let spec = |name: &str| StreamSpec {
        name: name.into(),
        branch_k: k,
        depth: 2,
        distill_dim: 32,
    };
    let mut c = ModelConfig::new(n, vec![spec("behavior"), spec("semantic")]);
    c.hidden = hidden;
    c.dropout = 0.0;
    c.num_negatives = k - 1;
    let mut model = EagerModel::new(c).expect("valid config");
    jitter(&mut model, 0.05, &mut rng);
    let trees: Vec<CodeTree> = (0..2)
        .map(|_| random_code_tree(n, k, 2, &mut rng).expect("code space large enough"))
        .collect();
    let targets = (0..2)
        .map(|_| {
            let v = (0..n * 32).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            EmbeddingMatrix::new(n, 32, v, "bench").expect("sized")
        })
        .collect();
    let batch = (0..batch)
        .map(|_| {
            let target = rng.random_range(0..n);
            Instance {
                history: (0..20).map(|_| rng.random_range(0..n)).collect(),
                target,
                codes: trees.iter().map(|t| t.digits(target).to_vec()).collect(),
                transfer: None,
            }
        })
        .collect();
    Fixture { model, trees, targets, batch }
}
