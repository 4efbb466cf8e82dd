//! Multi-task training loop: seeded shuffling, per-step corruption sampling,
//! warmup Adam, periodic validation, and best-checkpoint retention.

use rand::seq::index::sample;
use rand::seq::{IndexedRandom, SliceRandom};

use crate::codes::{CodeTree, Digit};
use crate::corpus::{Split, TrainingExample};
use crate::embed::EmbeddingMatrix;
use crate::error::{invalid, EagerError, Result};
use crate::eval::{evaluate_leave_one_out, EagerRecommender, TargetField, EVAL_HISTORY};
use crate::infer::{check_trees, DEFAULT_BEAM};
use crate::model::{EagerModel, Instance, LossBreakdown, ModelConfig, TaskFlags, TransferSample};
use crate::nn::{AdamState, Gradients, ParamStore, Tape};
use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Validate every this many steps; 0 validates at the end of each epoch.
    pub eval_every: usize,
    /// Stop after this many validations without a better NDCG@10.
    pub patience: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Validate on at most this many users (the first ones in split order).
    pub eval_users: Option<usize>,
    pub eval_beam: usize,
    pub flags: TaskFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 200,
            lr: 0.001,
            warmup_steps: 1000,
            seed: 0,
            eval_every: 0,
            patience: 20,
            max_steps: None,
            eval_users: None,
            eval_beam: DEFAULT_BEAM,
            flags: TaskFlags::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(EagerError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(EagerError::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.flags.enable_stt && model.streams.len() < 2 {
            return Err(EagerError::Config("the transfer task needs at least two streams".into()));
        }
        if self.eval_beam < 10 {
            return Err(EagerError::Config(format!("eval_beam {} is below the NDCG@10 cutoff", self.eval_beam)));
        }
        Ok(())
    }
}

/// Validation metrics at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub recall10: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// One entry per optimizer step.
    pub history: Vec<LossBreakdown>,
    pub evals: Vec<EvalPoint>,
    /// Step whose parameters were kept, if any validation ran.
    pub best_step: Option<usize>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.history.len()
    }

    /// Tab-separated log, one line per validation.
    pub fn log_lines(&self) -> Vec<String> {
        let mut out = vec!["step\tgen\tcon\trecon\trecog\ttotal\tR@10\tN@10".to_string()];
        for e in &self.evals {
            let l = &self.history[e.step - 1];
            out.push(format_log_line(e, l));
        }
        out
    }
}

fn format_log_line(e: &EvalPoint, l: &LossBreakdown) -> String {
    format!(
        "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
        e.step, l.gen, l.con, l.recon, l.recog, l.total, e.recall10, e.ndcg10
    )
}

/// Everything the loop reads besides the model.
pub struct TrainData<'a> {
    pub examples: &'a [TrainingExample],
    /// One tree per stream, in model stream order.
    pub trees: Vec<&'a CodeTree>,
    /// Frozen distillation targets per stream; may be empty without GCT.
    pub targets: Vec<&'a EmbeddingMatrix>,
    /// Validation users; `None` skips validation.
    pub valid: Option<&'a Split>,
}

/// Distinct mask and replace positions, `ceil(ratio·l)` of each, drawn
/// independently.
pub fn sample_corruptions(rng: &mut Rng, l: usize, mask_ratio: f64, replace_ratio: f64) -> (Vec<usize>, Vec<usize>) {
    let mut draw = |ratio: f64| {
        let mut v = sample(rng, l, ModelConfig::corrupt_count(ratio, l)).into_vec();
        v.sort_unstable();
        v
    };
    let mask = draw(mask_ratio);
    let replace = draw(replace_ratio);
    (mask, replace)
}

/// A different digit for each replaced position (ascending), uniform over
/// the digits that keep the corrupted prefix valid in the trie. Falls back
/// to the whole level alphabet when no such digit exists.
fn replacement_digits(rng: &mut Rng, tree: &CodeTree, code: &[Digit], positions: &[usize]) -> Vec<(usize, Digit)> {
    let mut corrupted = code.to_vec();
    positions
        .iter()
        .map(|&p| {
            let mut valid = tree.valid_next_digits(&corrupted[..p]);
            valid.retain(|&d| d != code[p]);
            let d = match valid.choose(rng) {
                Some(&d) => d,
                None => negative_digits(rng, tree.branch_k(), code[p], 1)[0],
            };
            corrupted[p] = d;
            (p, d)
        })
        .collect()
}

/// `j` distinct digits other than `truth` from `0..k`.
fn negative_digits(rng: &mut Rng, k: usize, truth: Digit, j: usize) -> Vec<Digit> {
    sample(rng, k - 1, j)
        .into_iter()
        .map(|r| {
            let r = r as Digit;
            if r >= truth {
                r + 1
            } else {
                r
            }
        })
        .collect()
}

/// Attach codes and, when the transfer task is on, a fresh corruption sample.
pub fn build_instances(model: &EagerModel, trees: &[&CodeTree], examples: &[&TrainingExample], flags: TaskFlags, rng: &mut Rng) -> Vec<Instance> {
    let cfg = model.config();
    let pair = model.transfer_pair().filter(|_| flags.enable_stt);
    examples
        .iter()
        .map(|ex| {
            let codes: Vec<Vec<Digit>> = trees.iter().map(|t| t.digits(ex.target).to_vec()).collect();
            let transfer = pair.map(|(_, guided)| {
                let tree = trees[guided];
                let code = &codes[guided];
                let (mask, replace) = sample_corruptions(rng, code.len(), cfg.mask_ratio, cfg.replace_ratio);
                let negatives = mask
                    .iter()
                    .map(|&p| negative_digits(rng, tree.branch_k(), code[p], cfg.num_negatives))
                    .collect();
                let replace = replacement_digits(rng, tree, code, &replace);
                TransferSample { mask, negatives, replace }
            });
            Instance {
                history: ex.history.clone(),
                target: ex.target,
                codes,
                transfer,
            }
        })
        .collect()
}

fn check_data(model: &EagerModel, data: &TrainData, config: &TrainConfig) -> Result<()> {
    config.validate(model.config())?;
    check_trees(model, &data.trees)?;
    if data.examples.is_empty() {
        return Err(EagerError::EmptyDataset("no training examples".into()));
    }
    let n = model.config().num_items;
    if config.flags.enable_gct {
        if data.targets.len() != model.num_streams() {
            return Err(invalid!("{} distillation targets for {} streams", data.targets.len(), model.num_streams()));
        }
        for (s, t) in data.targets.iter().enumerate() {
            let spec = model.stream(s);
            if t.len() != n || t.dim() != spec.distill_dim {
                return Err(invalid!(
                    "stream `{}` target is {}x{}, expected {n}x{}",
                    spec.name,
                    t.len(),
                    t.dim(),
                    spec.distill_dim
                ));
            }
        }
    }
    Ok(())
}

fn validate_now(model: &EagerModel, data: &TrainData, config: &TrainConfig, step: usize) -> Result<Option<EvalPoint>> {
    let Some(split) = data.valid else {
        return Ok(None);
    };
    let subset;
    let split = match config.eval_users {
        Some(m) if m < split.users.len() => {
            subset = Split {
                users: split.users[..m].to_vec(),
                excluded: Vec::new(),
            };
            &subset
        }
        _ => split,
    };
    let rec = EagerRecommender::new(model, data.trees.clone(), config.eval_beam)?;
    let r = evaluate_leave_one_out(&rec, split, &[10], TargetField::Valid, EVAL_HISTORY)?;
    Ok(Some(EvalPoint {
        step,
        recall10: r.recall[0],
        ndcg10: r.ndcg[0],
    }))
}

/// Train in place. On return the model holds the parameters with the best
/// validation NDCG@10, or the final ones when validation never ran.
pub fn train(model: &mut EagerModel, data: &TrainData, config: &TrainConfig) -> Result<TrainReport> {
    check_data(model, data, config)?;
    let mut adam = AdamState::new(model.params(), config.lr, config.warmup_steps as u64);
    let dropout = model.config().dropout;
    let mut report = TrainReport {
        history: Vec::new(),
        evals: Vec::new(),
        best_step: None,
        stopped_early: false,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let mut step = 0;

    'epochs: for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(config.seed, "shuffle", &[epoch as u64]));
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let last_batch = batches.len() - 1;
        for (bi, chunk) in batches.into_iter().enumerate() {
            if step >= max_steps {
                break 'epochs;
            }
            step += 1;
            let examples: Vec<&TrainingExample> = chunk.iter().map(|&i| &data.examples[i]).collect();
            let mut crng = rng_for(config.seed, "corrupt", &[step as u64]);
            let batch = build_instances(model, &data.trees, &examples, config.flags, &mut crng);

            let mut grads = Gradients::zeros_like(model.params());
            let breakdown = {
                let mut t = Tape::with_dropout(model.params(), dropout, rng_for(config.seed, "dropout", &[step as u64]));
                let (loss, br) = model.total_loss(&mut t, &batch, &data.targets, config.flags).map_err(|e| match e {
                    EagerError::NonFinite(d) => EagerError::Diverged { step, detail: d },
                    other => other,
                })?;
                t.backward(loss, 1.0, &mut grads);
                br
            };
            adam.step(model.params_mut(), &grads).map_err(|e| EagerError::Diverged {
                step,
                detail: e.to_string(),
            })?;
            report.history.push(breakdown);

            let due = if config.eval_every == 0 {
                bi == last_batch
            } else {
                step % config.eval_every == 0
            };
            if due || step == max_steps {
                if let Some(point) = validate_now(model, data, config, step)? {
                    log::info!("{}", format_log_line(&point, &breakdown));
                    report.evals.push(point);
                    if best.as_ref().is_none_or(|(b, _)| point.ndcg10 > *b) {
                        best = Some((point.ndcg10, model.params().clone()));
                        report.best_step = Some(step);
                        since_best = 0;
                    } else {
                        since_best += 1;
                        if since_best >= config.patience {
                            report.stopped_early = true;
                            break 'epochs;
                        }
                    }
                }
            }
        }
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok(report)
}
