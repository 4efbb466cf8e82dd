//! End-to-end commands over an artifact directory: prepare the corpus, build
//! embeddings and codes, train, evaluate, and batch-recommend.
//!
//! One flat `key = value` file configures every step. Relative paths in the
//! file resolve against the file's directory; overrides apply on top and
//! unknown keys are rejected.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::codes::{build_code_tree, CodeTree};
use crate::corpus::{
    k_core_filter, leave_one_out_split, load_interactions, make_training_examples, Dataset, InteractionFormat, Split,
};
use crate::embed::{cooccurrence_behavior_embeddings, load_embeddings, text_semantic_embeddings, EmbeddingMatrix};
use crate::error::{invalid, EagerError, Result};
use crate::eval::{evaluate_leave_one_out, EagerRecommender, MetricsReport, TargetField, EVAL_HISTORY};
use crate::infer::recommend_topk;
use crate::kv::{parse_bool, parse_list, KvFile};
use crate::model::{EagerModel, ModelConfig, TaskFlags};
use crate::rng::component_seed;
use crate::train::{train, TrainConfig, TrainData, TrainReport};

const MODEL_KEYS: &[&str] = &[
    "hidden",
    "enc_layers",
    "dec_layers",
    "transfer_layers",
    "heads",
    "ffn_mult",
    "dropout",
    "max_history",
    "summary_position",
    "metric",
    "infonce_temperature",
    "lambda1",
    "lambda2",
    "mask_ratio",
    "replace_ratio",
    "num_negatives",
    "direction",
];

const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "epochs",
    "lr",
    "warmup_steps",
    "eval_every",
    "patience",
    "max_steps",
    "eval_users",
    "eval_beam",
    "tsg_only",
    "enable_gct",
    "enable_stt",
];

const GLOBAL_KEYS: &[&str] = &[
    "interactions",
    "delimiter",
    "user_col",
    "item_col",
    "time_col",
    "kcore",
    "item_text",
    "out_dir",
    "seed",
    "streams",
    "embed_dim",
    "cooc_window",
    "normalize_embeddings",
    "branch_k",
    "beam",
    "topk",
    "ks",
];

const STREAM_FIELDS: &[&str] = &["provider", "path", "branch_k", "embed_dim"];

const PATH_KEYS: &[&str] = &["interactions", "item_text", "out_dir"];

/// Where a stream's frozen embedding comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provider {
    Cooccurrence,
    Text,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSetup {
    pub name: String,
    pub provider: Provider,
    pub branch_k: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub interactions: Option<PathBuf>,
    pub format: InteractionFormat,
    pub kcore: usize,
    pub item_text: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub cooc_window: usize,
    /// L2-normalize built embeddings before they are stored.
    pub normalize_embeddings: bool,
    pub streams: Vec<StreamSetup>,
    pub train: TrainConfig,
    pub beam: usize,
    pub topk: usize,
    pub ks: Vec<usize>,
    /// Model hyperparameters as given, applied once the catalog is known.
    model_kv: KvFile,
}

fn is_known(key: &str) -> bool {
    if GLOBAL_KEYS.contains(&key) || MODEL_KEYS.contains(&key) || TRAIN_KEYS.contains(&key) {
        return true;
    }
    match key.strip_prefix("stream.").and_then(|r| r.rsplit_once('.')) {
        Some((name, field)) => !name.is_empty() && STREAM_FIELDS.contains(&field),
        None => false,
    }
}

fn resolve(base: &Path, v: &str) -> String {
    let p = Path::new(v);
    if p.is_absolute() {
        v.to_string()
    } else {
        base.join(p).to_string_lossy().into_owned()
    }
}

impl PipelineConfig {
    /// Read a config file, resolve its relative paths, then apply overrides.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let mut kv = KvFile::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut resolved = KvFile::new();
        for (k, v) in kv.entries() {
            let is_path = PATH_KEYS.contains(&k.as_str()) || (k.starts_with("stream.") && k.ends_with(".path"));
            resolved.set(k, if is_path { resolve(base, v) } else { v.clone() });
        }
        kv = resolved;
        for (k, v) in overrides {
            kv.set(k, v);
        }
        Self::from_kv(&kv)
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        if let Some(bad) = kv.keys().find(|k| !is_known(k)) {
            return Err(EagerError::Config(format!("unknown config key `{bad}`")));
        }
        let bool_key = |k: &str| kv.get(k).map(|v| parse_bool(k, v)).transpose();
        let delimiter = match kv.get("delimiter") {
            None => ',',
            Some("tab") | Some("\\t") => '\t',
            Some(v) if v.chars().count() == 1 => v.chars().next().expect("one char"),
            Some(v) => return Err(EagerError::Config(format!("delimiter must be one character or `tab`, got `{v}`"))),
        };
        let seed: u64 = kv.parsed_or("seed", 0)?;
        let embed_dim: usize = kv.parsed_or("embed_dim", 128)?;
        let branch_k: usize = kv.parsed_or("branch_k", 256)?;
        let names = kv.get("streams").map_or_else(|| vec!["behavior".into(), "semantic".into()], parse_list);
        if names.is_empty() {
            return Err(EagerError::Config("`streams` lists no stream".into()));
        }
        let mut streams = Vec::new();
        for name in names {
            let field = |f: &str| format!("stream.{name}.{f}");
            let provider = match (kv.get(&field("provider")), kv.get(&field("path"))) {
                (Some("file"), Some(p)) | (None, Some(p)) => Provider::File(PathBuf::from(p)),
                (Some("file"), None) => return Err(EagerError::Config(format!("`{}` is required for a file provider", field("path")))),
                (Some("cooc"), _) => Provider::Cooccurrence,
                (Some("text"), _) => Provider::Text,
                (Some(other), _) => return Err(EagerError::Config(format!("unknown provider `{other}` for stream `{name}`"))),
                (None, None) => match name.as_str() {
                    "behavior" => Provider::Cooccurrence,
                    "semantic" => Provider::Text,
                    _ => return Err(EagerError::Config(format!("stream `{name}` needs `{}`", field("provider")))),
                },
            };
            streams.push(StreamSetup {
                branch_k: kv.parsed_or(&field("branch_k"), branch_k)?,
                embed_dim: kv.parsed_or(&field("embed_dim"), embed_dim)?,
                provider,
                name,
            });
        }
        let d = TrainConfig::default();
        let tsg_only = bool_key("tsg_only")?.unwrap_or(false);
        let flags = if tsg_only {
            TaskFlags::TSG_ONLY
        } else {
            TaskFlags {
                enable_gct: bool_key("enable_gct")?.unwrap_or(true),
                enable_stt: bool_key("enable_stt")?.unwrap_or(true) && streams.len() > 1,
            }
        };
        let train = TrainConfig {
            batch_size: kv.parsed_or("batch_size", d.batch_size)?,
            epochs: kv.parsed_or("epochs", d.epochs)?,
            lr: kv.parsed_or("lr", d.lr)?,
            warmup_steps: kv.parsed_or("warmup_steps", d.warmup_steps)?,
            seed: component_seed(seed, "train", &[]),
            eval_every: kv.parsed_or("eval_every", d.eval_every)?,
            patience: kv.parsed_or("patience", d.patience)?,
            max_steps: kv.parsed("max_steps")?,
            eval_users: kv.parsed("eval_users")?,
            eval_beam: kv.parsed_or("eval_beam", d.eval_beam)?,
            flags,
        };
        let ks: Vec<usize> = match kv.get("ks") {
            None => vec![5, 10, 20],
            Some(v) => parse_list(v)
                .iter()
                .map(|s| s.parse().map_err(|_| EagerError::Config(format!("bad cutoff `{s}` in `ks`"))))
                .collect::<Result<_>>()?,
        };
        let mut model_kv = KvFile::new();
        for &k in MODEL_KEYS {
            if let Some(v) = kv.get(k) {
                model_kv.set(k, v);
            }
        }
        let fmt_default = InteractionFormat::default();
        let cfg = Self {
            interactions: kv.get("interactions").map(PathBuf::from),
            format: InteractionFormat {
                delimiter,
                user_col: kv.parsed_or("user_col", fmt_default.user_col)?,
                item_col: kv.parsed_or("item_col", fmt_default.item_col)?,
                time_col: kv.parsed_or("time_col", fmt_default.time_col)?,
            },
            kcore: kv.parsed_or("kcore", 5)?,
            item_text: kv.get("item_text").map(PathBuf::from),
            out_dir: PathBuf::from(kv.get("out_dir").unwrap_or("eager-out")),
            seed,
            cooc_window: kv.parsed_or("cooc_window", 3)?,
            normalize_embeddings: kv.parsed_or("normalize_embeddings", false)?,
            streams,
            train,
            beam: kv.parsed_or("beam", crate::infer::DEFAULT_BEAM)?,
            topk: kv.parsed_or("topk", 20)?,
            ks,
            model_kv,
        };
        if cfg.ks.is_empty() || cfg.ks.contains(&0) || cfg.topk == 0 {
            return Err(EagerError::Config("`ks` and `topk` must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn stream(&self, name: &str) -> Result<&StreamSetup> {
        self.streams
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| EagerError::Config(format!("no stream named `{name}`")))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }

    pub fn split_path(&self) -> PathBuf {
        self.out_dir.join("split.tsv")
    }

    pub fn embedding_path(&self, stream: &str) -> PathBuf {
        self.out_dir.join(format!("emb_{stream}.bin"))
    }

    pub fn codes_path(&self, stream: &str) -> PathBuf {
        self.out_dir.join(format!("codes_{stream}.txt"))
    }

    pub fn model_dir(&self) -> PathBuf {
        self.out_dir.join("model")
    }

    pub fn metrics_path(&self, field: TargetField) -> PathBuf {
        self.out_dir.join(match field {
            TargetField::Valid => "metrics_valid.txt",
            TargetField::Test => "metrics_test.txt",
        })
    }

    /// Model configuration for a catalog of `num_items` and the given trees
    /// and embeddings (one per stream, in stream order).
    pub fn model_config(&self, num_items: usize, trees: &[&CodeTree], dims: &[usize]) -> Result<ModelConfig> {
        let mut kv = self.model_kv.clone();
        kv.set("num_items", num_items);
        kv.set("seed", component_seed(self.seed, "model", &[]));
        let names: Vec<&str> = self.streams.iter().map(|s| s.name.as_str()).collect();
        kv.set("streams", format!("[{}]", names.join(",")));
        for (i, s) in self.streams.iter().enumerate() {
            kv.set(&format!("stream.{}.branch_k", s.name), trees[i].branch_k());
            kv.set(&format!("stream.{}.depth", s.name), trees[i].depth());
            kv.set(&format!("stream.{}.distill_dim", s.name), dims[i]);
        }
        if kv.get("num_negatives").is_none() {
            let probe = ModelConfig::from_kv(&{
                let mut p = kv.clone();
                p.set("num_negatives", 1);
                p
            })?;
            if let Some((_, guided)) = probe.transfer_pair() {
                let k = probe.streams[guided].branch_k;
                kv.set("num_negatives", 32.min(k - 1));
            }
        }
        ModelConfig::from_kv(&kv)
    }
}

/// Exclusive hold on an output directory for the life of a command.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| EagerError::io(dir, e))?;
        let path = dir.join(".eager.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(EagerError::Config(format!(
                "{} is locked by another command (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(EagerError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(EagerError::Config(format!("{what} not found: {}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareSummary {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub excluded_users: usize,
}

/// Filter the raw log and write the dataset and its split.
pub fn prepare(cfg: &PipelineConfig) -> Result<PrepareSummary> {
    let raw = cfg
        .interactions
        .as_ref()
        .ok_or_else(|| EagerError::Config("`interactions` is not set".into()))?;
    require(raw, "interaction file")?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let rows = load_interactions(raw, &cfg.format)?;
    let ds = k_core_filter(&rows, cfg.kcore)?;
    let split = leave_one_out_split(&ds);
    ds.save(&cfg.dataset_dir())?;
    split.save(&cfg.split_path())?;
    Ok(PrepareSummary {
        num_users: ds.num_users(),
        num_items: ds.num_items(),
        num_interactions: ds.num_interactions(),
        excluded_users: split.excluded.len(),
    })
}

fn load_prepared(cfg: &PipelineConfig) -> Result<(Dataset, Split)> {
    require(&cfg.dataset_dir().join("dataset.manifest"), "prepared dataset (run `prepare`)")?;
    let ds = Dataset::load(&cfg.dataset_dir())?;
    let split = Split::load(&cfg.split_path(), &ds)?;
    Ok((ds, split))
}

/// `item_id<TAB>text` lines; items without a line get empty text.
fn load_item_texts(path: &Path, ds: &Dataset) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| EagerError::io(path, e))?;
    let mut out = vec![String::new(); ds.num_items()];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| EagerError::parse(path, i + 1, "expected `item_id<TAB>text`"))?;
        if let Some(idx) = ds.item_index(id.trim()) {
            out[idx] = body.to_string();
        }
    }
    Ok(out)
}

fn build_embedding(cfg: &PipelineConfig, s: &StreamSetup, ds: &Dataset, split: &Split) -> Result<EmbeddingMatrix> {
    let seed = component_seed(cfg.seed, "embed", &[crate::rng::fnv1a(s.name.as_bytes())]);
    let n = ds.num_items();
    let mut e = match &s.provider {
        Provider::File(p) => {
            require(p, "embedding file")?;
            load_embeddings(p, n)
        }
        Provider::Cooccurrence => {
            cooccurrence_behavior_embeddings(&split.training_sequences(ds), n, s.embed_dim.min(n), cfg.cooc_window, seed)
        }
        Provider::Text => {
            let path = cfg
                .item_text
                .as_ref()
                .ok_or_else(|| EagerError::Config(format!("stream `{}` uses text embeddings but `item_text` is not set", s.name)))?;
            require(path, "item text file")?;
            text_semantic_embeddings(&load_item_texts(path, ds)?, s.embed_dim.min(n), seed)
        }
    }?;
    if cfg.normalize_embeddings {
        e.normalize_rows();
    }
    Ok(e)
}

/// Build (or load) and store the embeddings of the named streams, or all.
pub fn embed(cfg: &PipelineConfig, only: Option<&str>) -> Result<Vec<(String, usize, usize)>> {
    let (ds, split) = load_prepared(cfg)?;
    if let Some(o) = only {
        cfg.stream(o)?;
    }
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let mut out = Vec::new();
    for s in &cfg.streams {
        if only.is_some_and(|o| o != s.name) {
            continue;
        }
        let e = build_embedding(cfg, s, &ds, &split)?;
        e.save(&cfg.embedding_path(&s.name))?;
        out.push((s.name.clone(), e.len(), e.dim()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodesSummary {
    pub stream: String,
    pub branch_k: usize,
    pub depth: usize,
    pub max_imbalance: usize,
}

fn stored_embedding(cfg: &PipelineConfig, s: &StreamSetup, ds: &Dataset, split: &Split) -> Result<EmbeddingMatrix> {
    let path = cfg.embedding_path(&s.name);
    if path.exists() {
        load_embeddings(&path, ds.num_items())
    } else {
        let e = build_embedding(cfg, s, ds, split)?;
        e.save(&path)?;
        Ok(e)
    }
}

/// Build code trees for the named streams (or all), building any missing
/// embeddings first.
pub fn codes(cfg: &PipelineConfig, only: Option<&str>) -> Result<Vec<CodesSummary>> {
    let (ds, split) = load_prepared(cfg)?;
    if let Some(o) = only {
        cfg.stream(o)?;
    }
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let mut out = Vec::new();
    for s in &cfg.streams {
        if only.is_some_and(|o| o != s.name) {
            continue;
        }
        let e = stored_embedding(cfg, s, &ds, &split)?;
        let seed = component_seed(cfg.seed, "codes", &[crate::rng::fnv1a(s.name.as_bytes())]);
        let tree = build_code_tree(&e, s.branch_k, seed)?.with_stream_tag(s.name.clone());
        tree.check_invariants()?;
        tree.save(&cfg.codes_path(&s.name))?;
        out.push(CodesSummary {
            stream: s.name.clone(),
            branch_k: tree.branch_k(),
            depth: tree.depth(),
            max_imbalance: tree.max_imbalance(),
        });
    }
    Ok(out)
}

/// Reload the stored code trees and re-check their invariants.
pub fn validate_codes(cfg: &PipelineConfig) -> Result<Vec<CodesSummary>> {
    let (ds, _) = load_prepared(cfg)?;
    cfg.streams
        .iter()
        .map(|s| {
            let tree = load_tree(cfg, &s.name, ds.num_items())?;
            tree.check_invariants()?;
            Ok(CodesSummary {
                stream: s.name.clone(),
                branch_k: tree.branch_k(),
                depth: tree.depth(),
                max_imbalance: tree.max_imbalance(),
            })
        })
        .collect()
}

fn load_tree(cfg: &PipelineConfig, stream: &str, n: usize) -> Result<CodeTree> {
    let path = cfg.codes_path(stream);
    require(&path, &format!("codes for stream `{stream}` (run `codes`)"))?;
    let tree = CodeTree::load(&path)?;
    if tree.num_items() != n {
        return Err(EagerError::Shape(format!("{} covers {} items, dataset has {n}", path.display(), tree.num_items())));
    }
    Ok(tree)
}

/// Everything a trained model is evaluated against.
pub struct Artifacts {
    pub dataset: Dataset,
    pub split: Split,
    pub trees: Vec<CodeTree>,
    pub embeddings: Vec<EmbeddingMatrix>,
}

impl Artifacts {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let (dataset, split) = load_prepared(cfg)?;
        let n = dataset.num_items();
        let trees = cfg.streams.iter().map(|s| load_tree(cfg, &s.name, n)).collect::<Result<Vec<_>>>()?;
        let embeddings = cfg
            .streams
            .iter()
            .map(|s| {
                let p = cfg.embedding_path(&s.name);
                require(&p, &format!("embedding for stream `{}` (run `embed`)", s.name))?;
                load_embeddings(&p, n)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dataset,
            split,
            trees,
            embeddings,
        })
    }

    pub fn tree_refs(&self) -> Vec<&CodeTree> {
        self.trees.iter().collect()
    }

    pub fn model_config(&self, cfg: &PipelineConfig) -> Result<ModelConfig> {
        let dims: Vec<usize> = self.embeddings.iter().map(EmbeddingMatrix::dim).collect();
        cfg.model_config(self.dataset.num_items(), &self.tree_refs(), &dims)
    }
}

/// Train from scratch and write the best checkpoint and the progress log.
pub fn train_model(cfg: &PipelineConfig) -> Result<TrainReport> {
    let art = Artifacts::load(cfg)?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let mcfg = art.model_config(cfg)?;
    let mut model = EagerModel::new(mcfg.clone())?;
    let examples = make_training_examples(&art.split, mcfg.max_history);
    let data = TrainData {
        examples: &examples,
        trees: art.tree_refs(),
        targets: art.embeddings.iter().collect(),
        valid: Some(&art.split),
    };
    let report = train(&mut model, &data, &cfg.train)?;
    model.save(&cfg.model_dir())?;
    let mut log = report.log_lines().join("\n");
    log.push('\n');
    let path = cfg.out_dir.join("train_log.tsv");
    std::fs::write(&path, log).map_err(|e| EagerError::io(&path, e))?;
    Ok(report)
}

/// Load the checkpoint, checking every tensor against the configured shapes.
pub fn load_model(cfg: &PipelineConfig, art: &Artifacts) -> Result<EagerModel> {
    let dir = cfg.model_dir();
    require(&dir.join("model.bin"), "checkpoint (run `train`)")?;
    EagerModel::load_with_config(&dir, art.model_config(cfg)?)
}

/// Evaluate on validation and test targets and write both metric files.
pub fn evaluate(cfg: &PipelineConfig) -> Result<(MetricsReport, MetricsReport)> {
    let art = Artifacts::load(cfg)?;
    let model = load_model(cfg, &art)?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let kmax = cfg.ks.iter().copied().max().unwrap_or(1);
    let rec = EagerRecommender::new(&model, art.tree_refs(), cfg.beam.max(kmax))?;
    let mut out = Vec::new();
    for field in [TargetField::Valid, TargetField::Test] {
        let r = evaluate_leave_one_out(&rec, &art.split, &cfg.ks, field, EVAL_HISTORY)?;
        r.write(&cfg.metrics_path(field))?;
        out.push(r);
    }
    let test = out.pop().expect("two reports");
    let valid = out.pop().expect("two reports");
    Ok((valid, test))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecommendSummary {
    pub written: usize,
    /// `(line number, message)` for lines that were skipped.
    pub errors: Vec<(usize, String)>,
}

/// Read `user_id item_id …` lines, write one ranked line per user. Bad lines
/// are reported and skipped.
pub fn recommend(cfg: &PipelineConfig, histories: &Path, out: &Path, k: usize, beam: usize) -> Result<RecommendSummary> {
    if k == 0 {
        return Err(invalid!("k must be at least 1"));
    }
    if beam < k {
        return Err(invalid!("beam size {beam} is smaller than k = {k}"));
    }
    require(histories, "history file")?;
    let art = Artifacts::load(cfg)?;
    let model = load_model(cfg, &art)?;
    let trees = art.tree_refs();
    let text = std::fs::read_to_string(histories).map_err(|e| EagerError::io(histories, e))?;
    let ids = &art.dataset.item_ids;
    let mut lines = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(user) = parts.next() else { continue };
        let items: std::result::Result<Vec<usize>, String> = parts
            .map(|id| art.dataset.item_index(id).ok_or_else(|| format!("unknown item id `{id}`")))
            .collect();
        let result = items.and_then(|h| {
            if h.is_empty() {
                return Err("empty history".to_string());
            }
            let h = crate::corpus::truncate_history(&h, EVAL_HISTORY);
            recommend_topk(&model, &trees, h, k, beam).map_err(|e| e.to_string())
        });
        match result {
            Ok(r) => lines.push(r.to_line(user, |it| ids[it].clone())),
            Err(msg) => {
                log::warn!("{}:{}: {msg}", histories.display(), i + 1);
                errors.push((i + 1, msg));
            }
        }
    }
    let mut body = lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    std::fs::write(out, body).map_err(|e| EagerError::io(out, e))?;
    Ok(RecommendSummary {
        written: lines.len(),
        errors,
    })
}

/// Item ids of the catalog, for cross-checking output files.
pub fn vocab(cfg: &PipelineConfig) -> Result<HashMap<String, usize>> {
    let (ds, _) = load_prepared(cfg)?;
    Ok(ds.item_ids.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(text: &str) -> KvFile {
        KvFile::parse(text, Path::new("test")).unwrap()
    }

    #[test]
    fn defaults_and_overrides() {
        let c = PipelineConfig::from_kv(&kv("seed = 3\n")).unwrap();
        assert_eq!(c.streams.len(), 2);
        assert_eq!(c.streams[0].provider, Provider::Cooccurrence);
        assert_eq!(c.streams[1].provider, Provider::Text);
        assert_eq!(c.streams[0].branch_k, 256);
        assert_eq!(c.ks, vec![5, 10, 20]);
        assert_eq!(c.beam, 100);
        assert_eq!(c.train.flags, TaskFlags::FULL);
        assert!(!c.normalize_embeddings);

        let c = PipelineConfig::from_kv(&kv("streams=[semantic]\nbranch_k=16\nstream.semantic.branch_k=8\ntsg_only=true\n")).unwrap();
        assert_eq!(c.streams.len(), 1);
        assert_eq!(c.streams[0].branch_k, 8);
        assert_eq!(c.train.flags, TaskFlags::TSG_ONLY);
        assert!(PipelineConfig::from_kv(&kv("normalize_embeddings = true\n")).unwrap().normalize_embeddings);

        let c = PipelineConfig::from_kv(&kv("streams=[semantic]\n")).unwrap();
        assert!(!c.train.flags.enable_stt);
    }

    #[test]
    fn rejects_unknown_and_bad_keys() {
        assert!(PipelineConfig::from_kv(&kv("hiden = 3\n")).is_err());
        assert!(PipelineConfig::from_kv(&kv("stream.behavior.colour = red\n")).is_err());
        assert!(PipelineConfig::from_kv(&kv("streams=[visual]\n")).is_err());
        assert!(PipelineConfig::from_kv(&kv("delimiter = ab\n")).is_err());
        let c = PipelineConfig::from_kv(&kv("delimiter = tab\ntime_col = 3\n")).unwrap();
        assert_eq!((c.format.delimiter, c.format.user_col, c.format.time_col), ('\t', 0, 3));
        assert!(PipelineConfig::from_kv(&kv("ks = 5,x\n")).is_err());
        let c = PipelineConfig::from_kv(&kv("streams=[behavior, visual]\nstream.visual.path = v.bin\n")).unwrap();
        assert_eq!(c.streams[1].provider, Provider::File("v.bin".into()));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "interactions = data/log.csv\nout_dir = out\n").unwrap();
        let c = PipelineConfig::load(&path, &[("out_dir".into(), "/tmp/elsewhere".into())]).unwrap();
        assert_eq!(c.interactions.unwrap(), dir.path().join("data/log.csv"));
        assert_eq!(c.out_dir, PathBuf::from("/tmp/elsewhere"));
        assert!(PipelineConfig::load(&path, &[("bogus".into(), "1".into())]).is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn model_config_picks_negatives_for_small_alphabets() {
        let c = PipelineConfig::from_kv(&kv("hidden = 16\nheads = 2\n")).unwrap();
        let codes = |k: usize| {
            let n = 20;
            let digits = (0..n).flat_map(|i| [(i / k) as u32, (i % k) as u32]).collect();
            CodeTree::from_codes(k, 2, digits, String::new(), 0).unwrap()
        };
        let (a, b) = (codes(8), codes(5));
        let m = c.model_config(20, &[&a, &b], &[4, 6]).unwrap();
        assert_eq!(m.num_negatives, 7);
        assert_eq!(m.streams[1].distill_dim, 6);
        assert_eq!(m.hidden, 16);
    }
}
