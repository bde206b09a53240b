//! Continual-pretraining loop: schedule, methods, and plan application.

mod optim;
mod stream;

pub use optim::{adamw_step, load_optimizer_state, save_optimizer_state, AdamState};
pub use stream::mixreview_stream;

use std::collections::HashSet;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::stage_rng;
use crate::error::{Result, TglError};
use crate::model::{LayerGroupId, Model, Tracking};
use crate::tensor::{Element, GradMap, NodeId, Tensor};
use crate::tgl::{TglMode, UpdatePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Lora,
    MixReview,
    RecAdam,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Vanilla,
        Method::Lora,
        Method::MixReview,
        Method::RecAdam,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Lora => "lora",
            Method::MixReview => "mixreview",
            Method::RecAdam => "recadam",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = TglError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Method::Vanilla),
            "lora" => Ok(Method::Lora),
            "mixreview" => Ok(Method::MixReview),
            "recadam" => Ok(Method::RecAdam),
            other => Err(TglError::input(format!(
                "unknown method '{other}' (expected vanilla|lora|mixreview|recadam)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of total steps spent ramping 0 -> base_lr.
    pub warmup_fraction: f64,
    /// Step budget for the schedule; 0 derives it from epochs and data.
    pub total_steps: usize,
    /// Sequences per optimizer step (gradient accumulation included).
    pub batch_size: usize,
    /// Sequences per accumulation slice.
    pub micro_batch: usize,
    pub seed: u64,
    pub method: Method,
    pub tgl_mode: TglMode,
    /// Replay documents per edit document (MixReview).
    pub replay_ratio: f64,
    /// Quadratic-penalty weight (RecAdam).
    pub recadam_lambda: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub pretrain_epochs: usize,
    pub continual_epochs: usize,
    /// When set, Embedding/FinalNorm/LmHead do not train in continual
    /// phases; they sit outside the profiled layer set either way.
    #[serde(default)]
    pub freeze_shared_groups: bool,
}

impl TrainConfig {
    /// Desk-scale defaults. The corpus is tiny compared to the regime the
    /// schedule constants come from, so epochs are raised and the peak rate
    /// is higher; both remain plain config knobs.
    pub fn desk_default(seed: u64) -> Self {
        TrainConfig {
            base_lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.1,
            total_steps: 0,
            batch_size: 64,
            micro_batch: 8,
            seed,
            method: Method::Vanilla,
            tgl_mode: TglMode::None,
            replay_ratio: 2.0,
            recadam_lambda: 1e-3,
            lora_rank: 4,
            lora_alpha: 8.0,
            pretrain_epochs: 40,
            continual_epochs: 8,
            freeze_shared_groups: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(TglError::config("base_lr must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TglError::config(
                "warmup_fraction must be in [0, 1)".to_string(),
            ));
        }
        if self.replay_ratio < 0.0 {
            return Err(TglError::config("replay_ratio must be >= 0".to_string()));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(TglError::config("batch sizes must be positive".to_string()));
        }
        if self.micro_batch > self.batch_size {
            return Err(TglError::config(
                "micro_batch cannot exceed batch_size".to_string(),
            ));
        }
        Ok(())
    }
}

/// Piecewise-linear schedule: 0 -> base_lr over the warmup steps, then
/// base_lr -> 0 over the remainder.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    lr_schedule(step, cfg.total_steps, cfg.warmup_fraction, cfg.base_lr)
}

pub fn lr_schedule(step: usize, total_steps: usize, warmup_fraction: f64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let step = step.min(total_steps);
    let warmup = (warmup_fraction * total_steps as f64).round() as usize;
    if warmup > 0 && step <= warmup {
        base_lr * step as f64 / warmup as f64
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

/// One row of the per-step metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetric {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub wall_ms: u64,
}

pub fn write_metrics(metrics: &[StepMetric], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "step,lr,train_loss,wall_ms")?;
    for m in metrics {
        writeln!(w, "{},{:e},{:e},{}", m.step, m.lr, m.train_loss, m.wall_ms)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PhaseResult {
    pub metrics: Vec<StepMetric>,
    pub holdout_loss_before: Option<f64>,
    pub holdout_loss_after: Option<f64>,
    pub steps_run: usize,
}

/// Extend a loss tape with the RecAdam quadratic penalty
/// `lambda * sum((theta - theta0)^2)` over the trainable parameters on the
/// tape. With `lambda == 0` the tape is left untouched, which keeps the
/// method bitwise identical to vanilla.
pub fn recadam_total_loss<T: Element>(
    tape: &mut crate::model::Tape<T>,
    base_loss: NodeId,
    anchor: &std::collections::BTreeMap<crate::tensor::ParamId, Tensor<T>>,
    trainable: &HashSet<crate::tensor::ParamId>,
    lambda: f64,
) -> Result<NodeId> {
    if lambda == 0.0 {
        return Ok(base_loss);
    }
    let param_nodes: Vec<(crate::tensor::ParamId, NodeId)> = tape
        .param_nodes
        .iter()
        .filter(|(id, _)| trainable.contains(id))
        .map(|(id, node)| (*id, *node))
        .collect();
    let g = &mut tape.graph;
    let mut acc: Option<NodeId> = None;
    for (id, node) in param_nodes {
        let theta0 = anchor.get(&id).ok_or_else(|| {
            TglError::config(format!(
                "recadam anchor missing for parameter {}; capture it at phase start",
                id.0
            ))
        })?;
        let anchor_leaf = g.leaf(theta0.clone());
        let diff = g.sub(node, anchor_leaf)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    match acc {
        Some(a) => {
            let penalty = g.scale(a, lambda)?;
            g.add(base_loss, penalty)
        }
        None => Ok(base_loss),
    }
}

/// Run one training phase over tokenized sequences.
///
/// Sequence order is reshuffled every epoch from `cfg.seed`; gradients are
/// accumulated as mean-of-losses across each optimizer step's sequences;
/// frozen groups are untouched bit for bit. A non-finite loss aborts with an
/// error so callers keep their last good checkpoint.
pub fn run_phase<T: Element>(
    model: &mut Model<T>,
    sequences: &[Vec<usize>],
    holdout: Option<&[Vec<usize>]>,
    cfg: &TrainConfig,
    plan: &UpdatePlan,
    epochs: usize,
) -> Result<PhaseResult> {
    cfg.validate()?;
    plan.validate_against(model)?;
    if sequences.is_empty() {
        return Err(TglError::Train("no training sequences".to_string()));
    }
    if epochs == 0 {
        return Err(TglError::Train("epochs must be >= 1".to_string()));
    }

    let mean_loss = |m: &Model<T>, seqs: &[Vec<usize>]| -> Result<f64> {
        let mut total = 0.0;
        for s in seqs {
            total += m.lm_loss_value(s)?;
        }
        Ok(total / seqs.len() as f64)
    };
    let holdout_loss_before = match holdout {
        Some(h) if !h.is_empty() => Some(mean_loss(model, h)?),
        _ => None,
    };

    let steps_per_epoch = sequences.len().div_ceil(cfg.batch_size);
    let total_steps = if cfg.total_steps > 0 {
        cfg.total_steps
    } else {
        epochs * steps_per_epoch
    };
    let schedule_cfg = TrainConfig {
        total_steps,
        ..cfg.clone()
    };

    let frozen_groups: HashSet<LayerGroupId> = {
        let mut set: HashSet<LayerGroupId> = plan.frozen.iter().copied().collect();
        if cfg.freeze_shared_groups {
            set.insert(LayerGroupId::embedding());
            set.insert(LayerGroupId::final_norm());
            set.insert(LayerGroupId::lm_head());
        }
        set
    };
    let trainable_ids: HashSet<crate::tensor::ParamId> = model
        .store()
        .iter()
        .filter(|(_, p)| p.trainable && !frozen_groups.contains(&p.group))
        .map(|(id, _)| id)
        .collect();

    let mut state = AdamState::new();
    let use_recadam = cfg.method == Method::RecAdam && cfg.recadam_lambda != 0.0;
    if use_recadam {
        state.capture_anchor(model.store());
    }

    let mut rng = stage_rng(cfg.seed, "phase_order");
    let mut metrics = Vec::new();
    let mut step = 0usize;
    let phase_start = std::time::Instant::now();

    'epochs: for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut rng);

        for chunk in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break 'epochs;
            }
            let mut acc: GradMap<T> = GradMap::new();
            let mut loss_sum = 0.0f64;
            for micro in chunk.chunks(cfg.micro_batch) {
                for &seq_idx in micro {
                    let seq = &sequences[seq_idx];
                    let (mut tape, base_loss) = model.lm_loss_tape(
                        seq,
                        Tracking::Trainable,
                        Some(&frozen_groups),
                    )?;
                    let loss = if use_recadam {
                        let anchor = state.anchor.as_ref().expect("anchor captured");
                        recadam_total_loss(
                            &mut tape,
                            base_loss,
                            anchor,
                            &trainable_ids,
                            cfg.recadam_lambda,
                        )?
                    } else {
                        base_loss
                    };
                    let loss_value = tape.graph.value(loss).scalar_value().to_f64();
                    if !loss_value.is_finite() {
                        return Err(TglError::Train(format!(
                            "non-finite loss {loss_value} at step {step}; aborting phase"
                        )));
                    }
                    loss_sum += loss_value;
                    let grads = tape.graph.backward(loss)?;
                    acc.add_scaled(&grads, T::ONE);
                }
            }
            let n = chunk.len() as f64;
            acc.scale(T::from_f64(1.0 / n));
            let lr = lr_at(step, &schedule_cfg);
            adamw_step(model.store_mut(), &acc, &mut state, cfg, plan, lr)?;
            step += 1;
            metrics.push(StepMetric {
                step,
                lr,
                train_loss: loss_sum / n,
                wall_ms: phase_start.elapsed().as_millis() as u64,
            });
        }
    }

    let holdout_loss_after = match holdout {
        Some(h) if !h.is_empty() => Some(mean_loss(model, h)?),
        _ => None,
    };
    Ok(PhaseResult {
        metrics,
        holdout_loss_before,
        holdout_loss_after,
        steps_run: step,
    })
}
