use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{EagerError, Result};
use crate::kv::{parse_list, KvFile};

/// Where the summary token sits in a stream decoder's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryPosition {
    /// `[SUM, SOS, y1 .. y(l-1)]`; the summary sees no code digits.
    Head,
    /// `[SOS, y1 .. yl]`; the summary is the mean of the code-position states.
    Mean,
    /// `[SOS, y1 .. yl, SUM]`; the summary attends over the whole code.
    Tail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveMetric {
    SmoothL1,
    Cosine,
    InfoNce,
}

/// Which stream's summary guides the transfer module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceDirection {
    SemanticToBehavior,
    BehaviorToSemantic,
}

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $s),+ })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($ty::$variant),)+
                    _ => Err(format!("expected one of: {}", [$($s),+].join(", "))),
                }
            }
        }
    };
}

string_enum!(SummaryPosition { Head => "head", Mean => "mean", Tail => "tail" });
string_enum!(ContrastiveMetric { SmoothL1 => "smooth_l1", Cosine => "cosine", InfoNce => "infonce" });
string_enum!(GuidanceDirection {
    SemanticToBehavior => "semantic_to_behavior",
    BehaviorToSemantic => "behavior_to_semantic",
});

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec {
    pub name: String,
    pub branch_k: usize,
    /// Code length l.
    pub depth: usize,
    /// Width of the frozen embedding the summary is distilled toward.
    pub distill_dim: usize,
}

impl StreamSpec {
    /// Decoder vocabulary: one token per (level, digit) plus SOS and SUM.
    pub fn vocab(&self) -> usize {
        self.depth * self.branch_k + 2
    }

    pub fn token(&self, level: usize, digit: u32) -> usize {
        level * self.branch_k + digit as usize
    }

    pub fn sos(&self) -> usize {
        self.depth * self.branch_k
    }

    pub fn sum(&self) -> usize {
        self.depth * self.branch_k + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_items: usize,
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub transfer_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub max_history: usize,
    pub summary_position: SummaryPosition,
    pub metric: ContrastiveMetric,
    pub infonce_temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mask_ratio: f64,
    pub replace_ratio: f64,
    pub num_negatives: usize,
    pub direction: GuidanceDirection,
    pub streams: Vec<StreamSpec>,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults for everything except the catalog and the stream list.
    pub fn new(num_items: usize, streams: Vec<StreamSpec>) -> Self {
        Self {
            num_items,
            hidden: 128,
            enc_layers: 1,
            dec_layers: 4,
            transfer_layers: 1,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            max_history: 20,
            summary_position: SummaryPosition::Tail,
            metric: ContrastiveMetric::SmoothL1,
            infonce_temperature: 0.07,
            lambda1: 1.0,
            lambda2: 1.0,
            mask_ratio: 0.5,
            replace_ratio: 0.5,
            num_negatives: 32,
            direction: GuidanceDirection::SemanticToBehavior,
            streams,
            seed: 0,
        }
    }

    pub fn stream_index(&self, name: &str) -> Option<usize> {
        self.streams.iter().position(|s| s.name == name)
    }

    /// `(guide, guided)` stream indices for the transfer module, or `None`
    /// with fewer than two streams. Named `semantic`/`behavior` streams are
    /// used when present; otherwise stream 1 guides stream 0 by default.
    pub fn transfer_pair(&self) -> Option<(usize, usize)> {
        if self.streams.len() < 2 {
            return None;
        }
        let sem = self.stream_index("semantic");
        let beh = self.stream_index("behavior");
        let (a, b) = match (sem, beh) {
            (Some(s), Some(b)) => (s, b),
            _ => (1, 0),
        };
        Some(match self.direction {
            GuidanceDirection::SemanticToBehavior => (a, b),
            GuidanceDirection::BehaviorToSemantic => (b, a),
        })
    }

    /// Number of positions masked or replaced in a code of length `l`.
    pub fn corrupt_count(ratio: f64, l: usize) -> usize {
        ((ratio * l as f64).ceil() as usize).clamp(1, l)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EagerError::Config(m));
        if self.num_items == 0 {
            return bad("num_items must be positive".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.dec_layers == 0 || self.max_history == 0 || self.ffn_mult == 0 {
            return bad("dec_layers, ffn_mult and max_history must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        for (name, r) in [("mask_ratio", self.mask_ratio), ("replace_ratio", self.replace_ratio)] {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("{name} {r} must be in (0, 1]"));
            }
        }
        if self.streams.is_empty() {
            return bad("at least one stream is required".into());
        }
        for (i, s) in self.streams.iter().enumerate() {
            if self.streams[..i].iter().any(|o| o.name == s.name) {
                return bad(format!("duplicate stream name `{}`", s.name));
            }
            if s.branch_k < 2 || s.depth == 0 || s.distill_dim == 0 {
                return bad(format!("stream `{}` needs branch_k >= 2, depth >= 1, distill_dim >= 1", s.name));
            }
        }
        if let Some((_, guided)) = self.transfer_pair() {
            let k = self.streams[guided].branch_k;
            if self.num_negatives == 0 || self.num_negatives >= k {
                return bad(format!(
                    "num_negatives {} must be in 1..{k} (level alphabet of stream `{}`)",
                    self.num_negatives, self.streams[guided].name
                ));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("num_items", self.num_items);
        kv.set("hidden", self.hidden);
        kv.set("enc_layers", self.enc_layers);
        kv.set("dec_layers", self.dec_layers);
        kv.set("transfer_layers", self.transfer_layers);
        kv.set("heads", self.heads);
        kv.set("ffn_mult", self.ffn_mult);
        kv.set("dropout", self.dropout);
        kv.set("max_history", self.max_history);
        kv.set("summary_position", self.summary_position);
        kv.set("metric", self.metric);
        kv.set("infonce_temperature", self.infonce_temperature);
        kv.set("lambda1", self.lambda1);
        kv.set("lambda2", self.lambda2);
        kv.set("mask_ratio", self.mask_ratio);
        kv.set("replace_ratio", self.replace_ratio);
        kv.set("num_negatives", self.num_negatives);
        kv.set("direction", self.direction);
        kv.set("seed", self.seed);
        let names: Vec<&str> = self.streams.iter().map(|s| s.name.as_str()).collect();
        kv.set("streams", format!("[{}]", names.join(",")));
        for s in &self.streams {
            kv.set(&format!("stream.{}.branch_k", s.name), s.branch_k);
            kv.set(&format!("stream.{}.depth", s.name), s.depth);
            kv.set(&format!("stream.{}.distill_dim", s.name), s.distill_dim);
        }
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let need = |k: &str| -> Result<&str> {
            kv.get(k).ok_or_else(|| EagerError::Config(format!("model config is missing `{k}`")))
        };
        let num_items = kv.parsed::<usize>("num_items")?.ok_or_else(|| EagerError::Config("missing `num_items`".into()))?;
        let mut streams = Vec::new();
        for name in parse_list(need("streams")?) {
            let get = |field: &str| -> Result<usize> {
                let key = format!("stream.{name}.{field}");
                kv.parsed::<usize>(&key)?.ok_or_else(|| EagerError::Config(format!("model config is missing `{key}`")))
            };
            streams.push(StreamSpec {
                branch_k: get("branch_k")?,
                depth: get("depth")?,
                distill_dim: get("distill_dim")?,
                name,
            });
        }
        let d = ModelConfig::new(num_items, streams);
        let cfg = ModelConfig {
            hidden: kv.parsed_or("hidden", d.hidden)?,
            enc_layers: kv.parsed_or("enc_layers", d.enc_layers)?,
            dec_layers: kv.parsed_or("dec_layers", d.dec_layers)?,
            transfer_layers: kv.parsed_or("transfer_layers", d.transfer_layers)?,
            heads: kv.parsed_or("heads", d.heads)?,
            ffn_mult: kv.parsed_or("ffn_mult", d.ffn_mult)?,
            dropout: kv.parsed_or("dropout", d.dropout)?,
            max_history: kv.parsed_or("max_history", d.max_history)?,
            summary_position: kv.parsed_or("summary_position", d.summary_position)?,
            metric: kv.parsed_or("metric", d.metric)?,
            infonce_temperature: kv.parsed_or("infonce_temperature", d.infonce_temperature)?,
            lambda1: kv.parsed_or("lambda1", d.lambda1)?,
            lambda2: kv.parsed_or("lambda2", d.lambda2)?,
            mask_ratio: kv.parsed_or("mask_ratio", d.mask_ratio)?,
            replace_ratio: kv.parsed_or("replace_ratio", d.replace_ratio)?,
            num_negatives: kv.parsed_or("num_negatives", d.num_negatives)?,
            direction: kv.parsed_or("direction", d.direction)?,
            seed: kv.parsed_or("seed", d.seed)?,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }
}
