//! Supervised training loop for the enhancement models: shuffled
//! fixed-length segments, AdamW with the warmup-cosine schedule, per-epoch
//! train/validation NLL logging, best-validation checkpointing, and
//! bit-exact resume from f64 training state.

use crate::dataset::Utterance;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::models::{training_loss_tape, Model, Prepared, Variant};
use crate::optim::{clip_global_norm, lr_schedule, AdamW};
use crate::params::{load_checkpoint, save_checkpoint, DType};
use crate::autodiff::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Maximum learning rate is base_lr · (batch_size / 256).
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            epochs: 30,
            warmup_epochs: 3,
            base_lr: 0.1,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            grad_clip: 1.0,
            seed: 3,
        }
    }

    pub fn max_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: &'static str,
    pub nll: f64,
    pub mse_or_ce: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub initial_train_nll: f64,
    pub initial_train_data_term: f64,
    pub best_epoch: usize,
    pub best_valid_nll: f64,
    pub steps: usize,
}

impl TrainLog {
    /// CSV with columns: epoch, split, nll, mse_or_ce, lr, wall_seconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,nll,mse_or_ce,lr,wall_seconds\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{:.9},{:.9},{:.9e},{:.3}\n",
                row.epoch, row.split, row.nll, row.mse_or_ce, row.lr, row.wall_seconds
            ));
        }
        out
    }

    pub fn final_train_data_term(&self) -> f64 {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == "train")
            .map(|r| r.mse_or_ce)
            .unwrap_or(f64::NAN)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

fn mean_loss(model: &Model, prepared: &[Prepared]) -> Result<(f64, f64)> {
    let mut data = 0.0;
    let mut constant = 0.0;
    for p in prepared {
        let mut tape = Tape::new();
        let (loss, c) = training_loss_tape(&mut tape, model, p)?;
        data += tape.value(loss).at(0, 0);
        constant = c;
    }
    let n = prepared.len().max(1) as f64;
    Ok((data / n + constant, data / n))
}

/// Train a model. When `run_dir` is given, the best-validation checkpoint
/// ("best.lse"), the f64 resume state ("state.lse") and the CSV log are
/// written there; `resume` restarts from a state file at the epoch boundary
/// it recorded, reproducing the uninterrupted run bit-exactly.
/// `interrupt_after` stops the run after that many epochs with the state
/// file on disk, emulating an interruption.
pub fn train(
    mut model: Model,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    resume: Option<&Path>,
    interrupt_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prepared_train: Vec<Prepared> = train_set
        .iter()
        .map(|u| Prepared::from_utterance(&model.codec, u))
        .collect::<Result<_>>()?;
    let prepared_valid: Vec<Prepared> = valid_set
        .iter()
        .map(|u| Prepared::from_utterance(&model.codec, u))
        .collect::<Result<_>>()?;

    let steps_per_epoch = prepared_train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let staged = model.config.staged_ft && model.config.variant == Variant::CNarFt;

    let mut opt = AdamW::new(&model.params, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut start_epoch = 0usize;
    let mut step = 0usize;
    let mut best_valid = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<Vec<(String, Mat)>> = None;

    let (initial_nll, initial_data) = mean_loss(&model, &prepared_train)?;
    log.initial_train_nll = initial_nll;
    log.initial_train_data_term = initial_data;

    if let Some(state_path) = resume {
        let (state_json, tensors) = load_checkpoint(state_path)?;
        let state: ResumeState = serde_json::from_str(&state_json)
            .map_err(|e| Error::MalformedCheckpoint(format!("resume state parse: {e}")))?;
        let params: Vec<(String, Mat)> = tensors
            .iter()
            .filter_map(|(n, m)| n.strip_prefix("param.").map(|s| (s.to_string(), m.clone())))
            .collect();
        model.params.load_values(&params)?;
        opt.load_state(&tensors, state.opt_steps)?;
        start_epoch = state.epoch;
        step = state.step;
        best_valid = state.best_valid_nll;
        best_epoch = state.best_epoch;
        if state.has_best {
            best_params = Some(
                tensors
                    .iter()
                    .filter_map(|(n, m)| {
                        n.strip_prefix("best.").map(|s| (s.to_string(), m.clone()))
                    })
                    .collect(),
            );
        }
    }

    let started = Instant::now();
    for epoch in start_epoch..cfg.epochs {
        if staged {
            let unfreeze_at = total_steps / 2;
            model
                .params
                .set_trainable_prefix("ft_enc.", step >= unfreeze_at);
        }
        let mut order: Vec<usize> = (0..prepared_train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);

        let mut epoch_data = 0.0;
        let mut constant = 0.0;
        let mut lr = 0.0;
        for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut acc = None;
            for &idx in chunk {
                let (loss, c) = training_loss_tape(&mut tape, &model, &prepared_train[idx])?;
                constant = c;
                acc = Some(match acc {
                    None => loss,
                    Some(a) => tape.add(a, loss),
                });
            }
            let loss = tape.scale(acc.unwrap(), 1.0 / chunk.len() as f64);
            let loss_val = tape.value(loss).at(0, 0);
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    context: format!("epoch {epoch} batch {batch_id}"),
                });
            }
            epoch_data += loss_val * chunk.len() as f64;
            let mut grads = tape.backward(loss, &model.params)?;
            clip_global_norm(&mut grads, cfg.grad_clip);
            lr = lr_schedule(step, total_steps, warmup_steps, cfg.max_lr())?;
            opt.step(&mut model.params, &grads, lr);
            step += 1;
        }
        let train_data = epoch_data / prepared_train.len() as f64;
        let (valid_nll, valid_data) = mean_loss(&model, &prepared_valid)?;
        let wall = started.elapsed().as_secs_f64();
        log.rows.push(EpochRow {
            epoch,
            split: "train",
            nll: train_data + constant,
            mse_or_ce: train_data,
            lr,
            wall_seconds: wall,
        });
        log.rows.push(EpochRow {
            epoch,
            split: "valid",
            nll: valid_nll,
            mse_or_ce: valid_data,
            lr,
            wall_seconds: wall,
        });

        if valid_nll < best_valid {
            best_valid = valid_nll;
            best_epoch = epoch;
            best_params = Some(model.params.tensors());
            if let Some(dir) = run_dir {
                model.save(dir.join("best.lse"))?;
            }
        }
        if let Some(dir) = run_dir {
            save_state(
                dir.join("state.lse"),
                &model,
                &opt,
                epoch + 1,
                step,
                best_valid,
                best_epoch,
                best_params.as_deref(),
            )?;
        }
        if interrupt_after == Some(epoch + 1) {
            break;
        }
    }
    log.steps = step;
    log.best_epoch = best_epoch;
    log.best_valid_nll = best_valid;
    if let Some(dir) = run_dir {
        std::fs::write(dir.join("train_log.csv"), log.to_csv())
            .map_err(|e| Error::io(format!("write {}/train_log.csv", dir.display()), e))?;
    }
    // Hand back the best-validation parameters.
    if let Some(best) = best_params {
        model.params.load_values(&best)?;
    }
    Ok(TrainOutcome { model, log })
}

#[derive(Debug, Serialize, Deserialize)]
struct ResumeState {
    epoch: usize,
    step: usize,
    opt_steps: u64,
    best_valid_nll: f64,
    best_epoch: usize,
    has_best: bool,
}

#[allow(clippy::too_many_arguments)]
fn save_state(
    path: impl AsRef<Path>,
    model: &Model,
    opt: &AdamW,
    epoch: usize,
    step: usize,
    best_valid_nll: f64,
    best_epoch: usize,
    best_params: Option<&[(String, Mat)]>,
) -> Result<()> {
    let state = ResumeState {
        epoch,
        step,
        opt_steps: opt.step_count(),
        best_valid_nll,
        best_epoch,
        has_best: best_params.is_some(),
    };
    let json = serde_json::to_string(&state)
        .map_err(|e| Error::Config(format!("resume state serialization: {e}")))?;
    let mut tensors: Vec<(String, Mat)> = model
        .params
        .tensors()
        .into_iter()
        .map(|(n, m)| (format!("param.{n}"), m))
        .collect();
    tensors.extend(opt.state_tensors());
    if let Some(best) = best_params {
        tensors.extend(best.iter().map(|(n, m)| (format!("best.{n}"), m.clone())));
    }
    save_checkpoint(path, &json, &tensors, DType::F64)
}
