//! Synthetic corpora and pipeline helpers shared by the integration tests.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eager_core::pipeline::PipelineConfig;
use eager_core::rng::rng_for;
use rand::Rng as _;

/// Users walk the catalog in order: item `i` is always followed by `i + 1`
/// (mod `n`). Sequence lengths are uniform in `min_len..=max_len`.
pub fn wraparound_log(n: usize, users: usize, min_len: usize, max_len: usize, seed: u64) -> String {
    let mut rng = rng_for(seed, "wraparound", &[]);
    let mut out = String::new();
    for u in 0..users {
        let start = rng.random_range(0..n);
        let len = rng.random_range(min_len..=max_len);
        for j in 0..len {
            let _ = writeln!(out, "u{u},i{},{}", (start + j) % n, j);
        }
    }
    out
}

/// Two latent item clusters; each user draws every item from one cluster.
/// With probability `follow` the next item is the in-cluster successor of the
/// previous one, otherwise uniform within the cluster. Item texts name the
/// cluster, a segment of ten consecutive items, and one of seven kinds.
pub fn clustered_log(n: usize, users: usize, len: usize, follow: f64, seed: u64) -> (String, String) {
    let mut rng = rng_for(seed, "clustered", &[]);
    let half = n / 2;
    let mut log = String::new();
    for u in 0..users {
        let c = u % 2;
        let mut cur = rng.random_range(0..half);
        for j in 0..len {
            if j > 0 {
                cur = if rng.random_bool(follow) { (cur + 1) % half } else { rng.random_range(0..half) };
            }
            let _ = writeln!(log, "u{u},i{},{j}", c * half + cur);
        }
    }
    let mut texts = String::new();
    for i in 0..n {
        let c = if i < half { "red" } else { "blue" };
        let _ = writeln!(texts, "i{i}\t{c} {c}shade seg{} kind{}", (i % half) / 10, i % 7);
    }
    (log, texts)
}

/// Write `files` into `dir` and a config with `body`, returning the config.
pub fn write_run(dir: &Path, files: &[(&str, &str)], body: &str) -> PathBuf {
    for (name, text) in files {
        std::fs::write(dir.join(name), text).unwrap();
    }
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, body).unwrap();
    cfg
}

pub fn load(cfg: &Path, overrides: &[(&str, &str)]) -> PipelineConfig {
    let o: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    PipelineConfig::load(cfg, &o).unwrap()
}
