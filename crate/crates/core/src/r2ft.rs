//! Preference fine-tuning against rule-generated repetition negatives.
//!
//! A negative continuation is built by cutting a clean window at a random
//! point `c` and repeating its last `g` tokens for `z` slots. The objective
//! pushes the length-normalized log-probability of the clean continuation
//! above that of the repetition, gated by a sigmoid so negatives the model
//! already finds unlikely contribute nothing.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, PriorTable};
use crate::decoding::{decode, BaseSampler, DecodePolicy, Prompts};
use crate::denoiser::{Denoiser, DenoiserParams, Gradient};
use crate::error::{Error, Result};
use crate::metrics::{mean_log_prior, response_tokens};
use crate::rng::{derive_seed, rng_from_seed};
use crate::state::SequenceState;
use crate::vocab::{TokenId, VocabSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Longest repetition unit.
    pub g_max: usize,
    pub z_min: usize,
    pub z_max: usize,
    /// Replace one slot of the repeated span with EOS.
    pub eos_insert: bool,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            g_max: 8,
            z_min: 4,
            z_max: 64,
            eos_insert: false,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g_max == 0 || self.z_min == 0 || self.z_min > self.z_max {
            return Err(Error::config(format!(
                "corruption needs 1 <= g_max and 1 <= z_min <= z_max, got g_max={} z={}..{}",
                self.g_max, self.z_min, self.z_max
            )));
        }
        Ok(())
    }
}

/// A corrupted window and the draws that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    /// Length `L`: `x0[0..c]`, then `z` repeated tokens, then PAD.
    pub tokens: Vec<TokenId>,
    pub c: usize,
    pub g: usize,
    pub z: usize,
    /// Window position that was overwritten with EOS, if any.
    pub eos_at: Option<usize>,
}

impl Corruption {
    /// The repeated span `tokens[c..c+z]`.
    pub fn span(&self) -> &[TokenId] {
        &self.tokens[self.c..self.c + self.z]
    }
}

/// Deterministic core of the corruption: prefix, cyclic repetition of the
/// last `g` prefix tokens to length `z`, PAD to `len`.
pub fn corrupt_with(
    x0: &[TokenId],
    len: usize,
    c: usize,
    g: usize,
    z: usize,
    eos_at: Option<(usize, TokenId)>,
    pad: TokenId,
) -> Result<Corruption> {
    if g == 0 || g > c || c > x0.len() || c + z > len {
        return Err(Error::domain(format!(
            "corruption c={c} g={g} z={z} does not fit a prefix of {} in a window of {len}",
            x0.len()
        )));
    }
    let mut tokens = Vec::with_capacity(len);
    tokens.extend_from_slice(&x0[..c]);
    let unit = &x0[c - g..c];
    tokens.extend(unit.iter().cycle().take(z));
    tokens.resize(len, pad);
    let mut at = None;
    if let Some((off, eos)) = eos_at {
        if off >= z {
            return Err(Error::domain("EOS offset outside the repeated span"));
        }
        tokens[c + off] = eos;
        at = Some(c + off);
    }
    Ok(Corruption {
        tokens,
        c,
        g,
        z,
        eos_at: at,
    })
}

/// Draws `c`, `g` (redrawn while it would reach before the window start),
/// `z` and, with `eos_insert`, the EOS offset, in that order.
pub fn corrupt<R: Rng + ?Sized>(
    example: &Example,
    vocab: &VocabSpec,
    len: usize,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<Corruption> {
    cfg.validate()?;
    let (lq, la) = (example.prompt.len(), example.response.len());
    if lq == 0 {
        return Err(Error::domain("corruption needs a nonempty prompt"));
    }
    if cfg.z_max + lq + la > len {
        return Err(Error::config(format!(
            "z_max {} + example length {} exceeds the window {len}",
            cfg.z_max,
            lq + la
        )));
    }
    let mut x0 = example.prompt.clone();
    x0.extend_from_slice(&example.response);
    let c = rng.gen_range(lq..=lq + la);
    let mut g = rng.gen_range(1..=cfg.g_max);
    while g > c {
        g = rng.gen_range(1..=cfg.g_max);
    }
    let z = rng.gen_range(cfg.z_min..=cfg.z_max);
    let eos = cfg.eos_insert.then(|| (rng.gen_range(0..z), vocab.eos()));
    corrupt_with(&x0, len, c, g, z, eos, vocab.pad())
}

/// A shared context with the clean and the corrupted continuation.
///
/// The context holds `x0[0..c]` as given tokens and masks every slot after
/// it; both continuations start at `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub context: SequenceState,
    pub y_w: Vec<(usize, TokenId)>,
    pub y_l: Vec<(usize, TokenId)>,
}

impl PreferencePair {
    pub fn new(prefix: &[TokenId], y_w: &[TokenId], y_l: &[TokenId]) -> Result<Self> {
        if prefix.is_empty() || y_w.is_empty() || y_l.is_empty() {
            return Err(Error::domain(
                "a preference pair needs a prefix and two nonempty continuations",
            ));
        }
        if y_w == y_l {
            return Err(Error::domain("chosen and rejected continuations are identical"));
        }
        let c = prefix.len();
        let len = c + y_w.len().max(y_l.len());
        let context = SequenceState::with_prompts(prefix, &[], len)?;
        let at = |ys: &[TokenId]| ys.iter().enumerate().map(|(k, &t)| (c + k, t)).collect();
        Ok(Self {
            context,
            y_w: at(y_w),
            y_l: at(y_l),
        })
    }

    pub fn n_w(&self) -> usize {
        self.y_w.len()
    }

    pub fn n_l(&self) -> usize {
        self.y_l.len()
    }

    fn positions(&self) -> Vec<usize> {
        let n = self.n_w().max(self.n_l());
        let c = self.context.len() - n;
        (c..c + n).collect()
    }
}

/// Builds a pair from an example: the chosen continuation runs from the cut
/// to the EOS after the answer, the rejected one is the corrupted span.
/// Returns `None` when the two coincide.
pub fn build_pair<R: Rng + ?Sized>(
    example: &Example,
    vocab: &VocabSpec,
    len: usize,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<Option<PreferencePair>> {
    let cor = corrupt(example, vocab, len, cfg, rng)?;
    let mut clean = example.prompt.clone();
    clean.extend_from_slice(&example.response);
    clean.push(vocab.eos());
    let y_w = &clean[cor.c..];
    if y_w == cor.span() {
        return Ok(None);
    }
    PreferencePair::new(&cor.tokens[..cor.c], y_w, cor.span()).map(Some)
}

/// A summed log-probability; `flagged` marks a target outside the support,
/// in which case `logp` is `-inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqLogProb {
    pub logp: f64,
    pub flagged: bool,
}

fn check_targets(x: &SequenceState, y: &[(usize, TokenId)]) -> Result<()> {
    for &(i, _) in y {
        if i >= x.len() || !x.is_masked(i) {
            return Err(Error::state(format!(
                "target position {i} is not masked in the context"
            )));
        }
    }
    Ok(())
}

fn sum_logs(grid: &crate::state::ProbGrid, y: &[(usize, TokenId)]) -> SeqLogProb {
    let mut logp = 0.0;
    for &(i, t) in y {
        if t as usize >= grid.cols() {
            return SeqLogProb {
                logp: f64::NEG_INFINITY,
                flagged: true,
            };
        }
        logp += grid.get(i, t as usize).ln();
    }
    SeqLogProb { logp, flagged: false }
}

/// `sum log x_theta(x)[i, y_i]` from a single denoiser call.
pub fn seq_logprob(denoiser: &dyn Denoiser, x: &SequenceState, y: &[(usize, TokenId)]) -> Result<SeqLogProb> {
    check_targets(x, y)?;
    let positions: Vec<usize> = y.iter().map(|&(i, _)| i).collect();
    let grid = denoiser.predict_positions(x, &positions)?;
    Ok(sum_logs(&grid, y))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(x)`, stable on both tails.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn margin(logp_w: f64, n_w: usize, logp_l: f64, n_l: usize, beta: f64) -> f64 {
    beta * (logp_w / n_w as f64 - logp_l / n_l as f64)
}

/// The gate `sigmoid(beta * (logp_l/|y_l| - logp_w/|y_w|))`.
pub fn penalty_s(logp_w: f64, n_w: usize, logp_l: f64, n_l: usize, beta: f64) -> f64 {
    if logp_l == f64::NEG_INFINITY {
        return 0.0;
    }
    sigmoid(-margin(logp_w, n_w, logp_l, n_l, beta))
}

/// Objective value from the two summed log-probabilities.
pub fn r2ft_objective(logp_w: f64, n_w: usize, logp_l: f64, n_l: usize, gamma: f64, beta: f64) -> f64 {
    let nll = -gamma * logp_w / n_w as f64;
    if logp_l == f64::NEG_INFINITY {
        return nll;
    }
    nll + neg_log_sigmoid(margin(logp_w, n_w, logp_l, n_l, beta))
}

fn check_coeffs(gamma: f64, beta: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite() && beta > 0.0 && beta.is_finite()) {
        return Err(Error::config(format!(
            "need gamma >= 0 and beta > 0, got {gamma}, {beta}"
        )));
    }
    Ok(())
}

/// Both log-probabilities from one pass over the shared context.
fn pair_logprobs(
    params: &DenoiserParams,
    pair: &PreferencePair,
) -> Result<(crate::state::ProbGrid, SeqLogProb, SeqLogProb)> {
    check_targets(&pair.context, &pair.y_w)?;
    check_targets(&pair.context, &pair.y_l)?;
    let grid = params.predict_rows(&pair.context, &pair.positions())?;
    let lw = sum_logs(&grid, &pair.y_w);
    let ll = sum_logs(&grid, &pair.y_l);
    if lw.flagged {
        return Err(Error::state("chosen continuation has a token outside the support"));
    }
    Ok((grid, lw, ll))
}

pub fn r2ft_loss(params: &DenoiserParams, pair: &PreferencePair, gamma: f64, beta: f64) -> Result<f64> {
    check_coeffs(gamma, beta)?;
    let (_, lw, ll) = pair_logprobs(params, pair)?;
    Ok(r2ft_objective(lw.logp, pair.n_w(), ll.logp, pair.n_l(), gamma, beta))
}

/// Loss and gradient. The reject term is differentiated at the logits:
/// position `i` gets `-s * beta * ([i in y_w](e_w - p)/|y_w| - [i in y_l](e_l - p)/|y_l|)`,
/// which is then pushed through the linear model once per position.
pub fn grad_r2ft(params: &DenoiserParams, pair: &PreferencePair, gamma: f64, beta: f64) -> Result<(f64, Gradient)> {
    check_coeffs(gamma, beta)?;
    let (grid, lw, ll) = pair_logprobs(params, pair)?;
    let (n_w, n_l) = (pair.n_w() as f64, pair.n_l() as f64);
    let loss = r2ft_objective(lw.logp, pair.n_w(), ll.logp, pair.n_l(), gamma, beta);
    let s = penalty_s(lw.logp, pair.n_w(), ll.logp, pair.n_l(), beta);

    // d loss / d logp_w and d loss / d logp_l
    let cw = -gamma / n_w - beta * s / n_w;
    let cl = if s > 0.0 { beta * s / n_l } else { 0.0 };

    let v = params.v();
    let mut grad = Gradient::zeros(v);
    let mut resid = vec![0.0; v];
    let (c, n) = (pair.positions()[0], pair.n_w().max(pair.n_l()));
    for k in 0..n {
        let i = c + k;
        let p = grid.row(i);
        let mut coef = 0.0;
        resid.iter_mut().for_each(|r| *r = 0.0);
        if let Some(&(_, y)) = pair.y_w.get(k) {
            coef += cw;
            resid[y as usize] += cw;
        }
        if let Some(&(_, y)) = pair.y_l.get(k) {
            if cl != 0.0 {
                coef += cl;
                resid[y as usize] += cl;
            }
        }
        if coef == 0.0 && resid.iter().all(|&r| r == 0.0) {
            continue;
        }
        for (r, &pj) in resid.iter_mut().zip(p) {
            *r -= coef * pj;
        }
        for (g, r) in grad.bias.iter_mut().zip(&resid) {
            *g += r;
        }
        for (t, w) in params.neighbours(&pair.context, i) {
            let row = &mut grad.assoc[t as usize * v..(t as usize + 1) * v];
            for (g, r) in row.iter_mut().zip(&resid) {
                *g += w * r;
            }
        }
    }
    Ok((loss, grad))
}

/// The reject-term gradient assembled from the two sequence gradients:
/// `-beta * s * (grad logp_w / |y_w| - grad logp_l / |y_l|)`.
pub fn reject_grad_display(params: &DenoiserParams, pair: &PreferencePair, beta: f64) -> Result<Gradient> {
    check_coeffs(0.0, beta)?;
    let (grid, lw, ll) = pair_logprobs(params, pair)?;
    let s = penalty_s(lw.logp, pair.n_w(), ll.logp, pair.n_l(), beta);
    let mut gw = Gradient::zeros(params.v());
    params.accumulate_logprob_grad(&pair.context, &grid, &pair.y_w, 1.0, &mut gw);
    let mut out = Gradient::zeros(params.v());
    if s == 0.0 {
        return Ok(out);
    }
    let mut gl = Gradient::zeros(params.v());
    params.accumulate_logprob_grad(&pair.context, &grid, &pair.y_l, 1.0, &mut gl);
    out.add_scaled(&gw, -beta * s / pair.n_w() as f64);
    out.add_scaled(&gl, beta * s / pair.n_l() as f64);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2ftConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub beta: f64,
    pub corruption: CorruptionConfig,
    /// Window length `L` used for corruption.
    pub window: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Validation pairs per checkpoint.
    pub eval_size: usize,
    pub holdout: f64,
    /// Top-k samples per checkpoint for the mean log prior.
    pub samples: usize,
    pub sample_len: usize,
    pub sample_steps: usize,
    pub sample_k: usize,
}

impl Default for R2ftConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 10.0,
            batch_size: 16,
            gamma: 0.1,
            beta: 1.0,
            corruption: CorruptionConfig::default(),
            window: 192,
            seed: 0,
            eval_every: 50,
            eval_size: 128,
            holdout: 0.05,
            samples: 32,
            sample_len: 64,
            sample_steps: 32,
            sample_k: 5,
        }
    }
}

impl R2ftConfig {
    pub fn validate(&self) -> Result<()> {
        check_coeffs(self.gamma, self.beta)?;
        self.corruption.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 || self.window == 0 {
            return Err(Error::config("batch_size, eval_every and window must be positive"));
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
        if self.samples > 0 && (self.sample_steps == 0 || self.sample_len == 0 || self.sample_k == 0) {
            return Err(Error::config(
                "sampling needs positive sample_len, sample_steps and sample_k",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct R2ftRecord {
    pub step: usize,
    /// Mean objective over the validation pairs.
    pub loss: f64,
    /// Mean `-logp_w / |y_w|`.
    pub loss_w: f64,
    /// Mean `-logp_l / |y_l|`.
    pub loss_l: f64,
    /// Mean log prior of top-k samples; NaN when sampling is off.
    pub mean_log_prior: f64,
}

pub fn write_history<W: Write>(history: &[R2ftRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "loss", "loss_w", "loss_l", "mean_log_prior"])
        .map_err(csv_err)?;
    for r in history {
        out.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.loss_w.to_string(),
            r.loss_l.to_string(),
            r.mean_log_prior.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn draw_pair<R: Rng + ?Sized>(
    pool: &[Example],
    vocab: &VocabSpec,
    cfg: &R2ftConfig,
    rng: &mut R,
) -> Result<PreferencePair> {
    for _ in 0..64 {
        let ex = &pool[rng.gen_range(0..pool.len())];
        if let Some(p) = build_pair(ex, vocab, cfg.window, &cfg.corruption, rng)? {
            return Ok(p);
        }
    }
    Err(Error::domain("could not draw a pair whose continuations differ"))
}

fn evaluate(
    params: &DenoiserParams,
    pairs: &[PreferencePair],
    prompts: &[Vec<TokenId>],
    prior: &PriorTable,
    vocab: &VocabSpec,
    cfg: &R2ftConfig,
    step: usize,
) -> Result<R2ftRecord> {
    let (mut loss, mut lw_sum, mut ll_sum, mut n_l) = (0.0, 0.0, 0.0, 0usize);
    for p in pairs {
        let (_, lw, ll) = pair_logprobs(params, p)?;
        loss += r2ft_objective(lw.logp, p.n_w(), ll.logp, p.n_l(), cfg.gamma, cfg.beta);
        lw_sum += -lw.logp / p.n_w() as f64;
        if !ll.flagged {
            ll_sum += -ll.logp / p.n_l() as f64;
            n_l += 1;
        }
    }
    let n = pairs.len().max(1) as f64;

    let policy = DecodePolicy::categorical().with_base(BaseSampler::TopKGlob { k: cfg.sample_k });
    let mut lp_sum = 0.0;
    let mut lp_n = 0usize;
    for (j, prompt) in prompts.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(cfg.seed ^ 0x5a3f, j as u64));
        let len = prompt.len() + cfg.sample_len;
        let (state, _) = decode(params, &Prompts::left(prompt), &policy, len, cfg.sample_steps, &mut rng)?;
        let generated = response_tokens(&state, vocab.eos());
        if let Ok(v) = mean_log_prior(&generated, prior, vocab) {
            lp_sum += v;
            lp_n += 1;
        }
    }
    Ok(R2ftRecord {
        step,
        loss: loss / n,
        loss_w: lw_sum / n,
        loss_l: if n_l > 0 { ll_sum / n_l as f64 } else { f64::NAN },
        mean_log_prior: if lp_n > 0 { lp_sum / lp_n as f64 } else { f64::NAN },
    })
}

/// SGD on the preference objective with pairs drawn on the fly. Validation
/// pairs and sample prompts come from the corpus tail and stay fixed across
/// checkpoints. Zero steps returns the input and an empty history.
pub fn train_r2ft(
    params: &DenoiserParams,
    vocab: &VocabSpec,
    corpus: &[Example],
    prior: &PriorTable,
    cfg: &R2ftConfig,
) -> Result<(DenoiserParams, Vec<R2ftRecord>)> {
    cfg.validate()?;
    if params.v() != vocab.support_size() {
        return Err(Error::config(format!(
            "denoiser support {} does not match vocabulary support {}",
            params.v(),
            vocab.support_size()
        )));
    }
    if cfg.steps == 0 {
        return Ok((params.clone(), Vec::new()));
    }
    if corpus.is_empty() {
        return Err(Error::config("empty training corpus"));
    }
    let n_hold = ((corpus.len() as f64 * cfg.holdout) as usize).min(corpus.len() - 1);
    let (train, held) = if n_hold == 0 {
        (corpus, corpus)
    } else {
        corpus.split_at(corpus.len() - n_hold)
    };

    let mut eval_rng = rng_from_seed(derive_seed(cfg.seed, u64::MAX));
    let val: Vec<PreferencePair> = (0..cfg.eval_size.max(1))
        .map(|_| draw_pair(held, vocab, cfg, &mut eval_rng))
        .collect::<Result<_>>()?;
    let prompts: Vec<Vec<TokenId>> = (0..cfg.samples).map(|j| held[j % held.len()].prompt.clone()).collect();

    let mut params = params.clone();
    let mut history = vec![evaluate(&params, &val, &prompts, prior, vocab, cfg, 0)?];
    let initial = history[0].loss;
    let mut bad = 0;
    let mut rng = rng_from_seed(cfg.seed);
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 1..=cfg.steps {
        let mut grad = Gradient::zeros(params.v());
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let pair = draw_pair(train, vocab, cfg, &mut rng)?;
            let (l, g) = grad_r2ft(&params, &pair, cfg.gamma, cfg.beta)?;
            loss += l;
            grad.add_scaled(&g, scale);
        }
        if !(loss.is_finite()) {
            return Err(Error::Diverged { step, loss, initial });
        }
        params.apply(&grad, cfg.lr);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let rec = evaluate(&params, &val, &prompts, prior, vocab, cfg, step)?;
            if !rec.loss.is_finite() || rec.loss > 10.0 * initial {
                bad += 1;
                if bad >= 3 || !rec.loss.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        loss: rec.loss,
                        initial,
                    });
                }
            } else {
                bad = 0;
            }
            history.push(rec);
        }
    }
    Ok((params, history))
}
