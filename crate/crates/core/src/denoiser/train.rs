//! Simplified NELBO and the supervised fine-tuning loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserParams, Gradient};
use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::schedule::NoiseSchedule;
use crate::state::{forward_mask, SequenceState};
use crate::vocab::{TokenId, VocabSpec};

/// Which part of the EOS-filled window the loss attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EosMode {
    /// Stop at the EOS right after the answer; used before preference
    /// training.
    #[default]
    UpToAnswerEos,
    /// Train on the whole EOS-filled window.
    FullFill,
}

/// One masked training window: the clean window, its masked version and the
/// time it was masked at.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub x0: SequenceState,
    pub xt: SequenceState,
    pub t: f64,
}

impl TrainItem {
    fn targets(&self) -> Vec<(usize, TokenId)> {
        self.xt
            .masked_positions()
            .into_iter()
            .filter_map(|i| self.x0.slot(i).token().map(|y| (i, y)))
            .collect()
    }
}

/// `w_t * sum over masked positions of -log x_theta[i, x0_i]`.
pub fn nelbo_loss(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x0: &SequenceState,
    t: f64,
    xt: &SequenceState,
) -> Result<f64> {
    let masked = xt.masked_positions();
    if masked.is_empty() {
        return Ok(0.0);
    }
    let w = schedule.nelbo_weight(t)?;
    let grid = denoiser.predict(xt)?;
    let mut ce = 0.0;
    for i in masked {
        let y = x0
            .slot(i)
            .token()
            .ok_or_else(|| Error::state("clean window has a masked slot"))?;
        ce -= grid.get(i, y as usize).ln();
    }
    Ok(w * ce)
}

fn item_loss_and_grad(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    item: &TrainItem,
    grad: Option<(&mut Gradient, f64)>,
) -> Result<f64> {
    let targets = item.targets();
    if targets.is_empty() {
        return Ok(0.0);
    }
    let w = schedule.nelbo_weight(item.t)?;
    let positions: Vec<usize> = targets.iter().map(|&(i, _)| i).collect();
    let grid = params.predict_rows(&item.xt, &positions)?;
    let loss = -w * targets.iter().map(|&(i, y)| grid.get(i, y as usize).ln()).sum::<f64>();
    if let Some((g, scale)) = grad {
        params.accumulate_logprob_grad(&item.xt, &grid, &targets, -w * scale, g);
    }
    Ok(loss)
}

/// Gradient of the mean NELBO over `batch`.
pub fn grad_nelbo(params: &DenoiserParams, schedule: &NoiseSchedule, batch: &[TrainItem]) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::zeros(params.v());
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for item in batch {
        loss += item_loss_and_grad(params, schedule, item, Some((&mut grad, scale)))?;
    }
    Ok((loss * scale, grad))
}

fn mean_loss(params: &DenoiserParams, schedule: &NoiseSchedule, items: &[TrainItem]) -> Result<f64> {
    let mut total = 0.0;
    for item in items {
        total += item_loss_and_grad(params, schedule, item, None)?;
    }
    Ok(total / items.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Size of the time grid `t in {1/S, ..., 1}` sampled uniformly.
    pub time_steps: usize,
    pub window: usize,
    pub eos_mode: EosMode,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_size: usize,
    /// Fraction of the corpus held out for evaluation.
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            // the per-item weight dt/t is about 1/time_steps of the full
            // NELBO estimate, hence the large step size
            lr: 100.0,
            batch_size: 16,
            time_steps: 128,
            window: 192,
            eos_mode: EosMode::UpToAnswerEos,
            seed: 0,
            eval_every: 200,
            eval_size: 128,
            holdout: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.time_steps == 0 || self.window == 0 || self.eval_every == 0 {
            return Err(Error::config(
                "batch_size, time_steps, window and eval_every must be positive",
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::config("holdout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn first_heldout(&self) -> Option<f64> {
        self.history.first().map(|r| r.heldout_loss)
    }

    pub fn last_heldout(&self) -> Option<f64> {
        self.history.last().map(|r| r.heldout_loss)
    }
}

/// Builds the clean training window of an example.
pub fn training_window(ex: &Example, vocab: &VocabSpec, cfg: &TrainConfig) -> Result<SequenceState> {
    let full = ex.window(vocab, Some(cfg.window))?;
    Ok(match cfg.eos_mode {
        EosMode::FullFill => full,
        EosMode::UpToAnswerEos => full.truncated(ex.len() + 1),
    })
}

fn sample_item<R: Rng + ?Sized>(
    ex: &Example,
    vocab: &VocabSpec,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<TrainItem> {
    let x0 = training_window(ex, vocab, cfg)?;
    let k = rng.gen_range(1..=cfg.time_steps);
    let t = k as f64 / cfg.time_steps as f64;
    let xt = forward_mask(&x0, schedule, t, rng)?;
    Ok(TrainItem { x0, xt, t })
}

/// Plain SGD on the simplified NELBO. The tail `holdout` fraction of the
/// corpus is held out; its loss is evaluated at every checkpoint on masks
/// drawn from a fixed evaluation seed.
pub fn train_sft(
    params: &DenoiserParams,
    vocab: &VocabSpec,
    corpus: &[Example],
    cfg: &TrainConfig,
) -> Result<(DenoiserParams, TrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::config("empty training corpus"));
    }
    if params.v() != vocab.support_size() {
        return Err(Error::config(format!(
            "denoiser support {} does not match vocabulary support {}",
            params.v(),
            vocab.support_size()
        )));
    }
    let schedule = NoiseSchedule::linear(cfg.time_steps)?;
    let n_hold = ((corpus.len() as f64 * cfg.holdout) as usize).min(corpus.len() - 1);
    let (train, held) = if n_hold == 0 {
        (corpus, corpus)
    } else {
        corpus.split_at(corpus.len() - n_hold)
    };

    let mut eval_rng = rng_from_seed(derive_seed(cfg.seed, u64::MAX));
    let eval: Vec<TrainItem> = (0..cfg.eval_size.max(1))
        .map(|j| sample_item(&held[j % held.len()], vocab, cfg, &schedule, &mut eval_rng))
        .collect::<Result<_>>()?;

    let mut params = params.clone();
    let mut rng = rng_from_seed(cfg.seed);
    let mut report = TrainReport::default();
    let initial = mean_loss(&params, &schedule, &eval)?;
    report.history.push(TrainRecord {
        step: 0,
        train_loss: f64::NAN,
        heldout_loss: initial,
    });
    let mut running = 0.0;
    let mut since = 0usize;
    let mut blown = 0usize;
    for step in 1..=cfg.steps {
        let batch: Vec<TrainItem> = (0..cfg.batch_size)
            .map(|_| {
                let ex = &train[rng.gen_range(0..train.len())];
                sample_item(ex, vocab, cfg, &schedule, &mut rng)
            })
            .collect::<Result<_>>()?;
        let (loss, grad) = grad_nelbo(&params, &schedule, &batch)?;
        params.apply(&grad, cfg.lr);
        running += loss;
        since += 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let heldout = mean_loss(&params, &schedule, &eval)?;
            report.history.push(TrainRecord {
                step,
                train_loss: running / since as f64,
                heldout_loss: heldout,
            });
            running = 0.0;
            since = 0;
            if !heldout.is_finite() || heldout > 10.0 * initial {
                blown += 1;
                if blown >= 3 || !heldout.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        loss: heldout,
                        initial,
                    });
                }
            } else {
                blown = 0;
            }
        }
    }
    Ok((params, report))
}
