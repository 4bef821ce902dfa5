//! Subcommand implementations.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use mdlab::corpus::{
    designed_model, generate_corpus_capped, load_corpus, ppl_stats, save_corpus, CorpusModel, DesignSpec, Example,
    PriorTable,
};
use mdlab::decoding::{decode, BaseSampler, ConvConfig, DecodePolicy, Prompts, TraceLog};
use mdlab::denoiser::{
    load_params, save_params, train_sft, Denoiser, DenoiserParams, EosMode, OracleDenoiser, TrainConfig, DEFAULT_RADIUS,
};
use mdlab::hazard::{hazard_grid, write_grid_csv, HazardFamily};
use mdlab::metrics::{
    candidate_zone, inlier_rate, mean_log_prior, response_tokens, speed_report, validate_trace, PplEntry,
};
use mdlab::r2ft::{train_r2ft, write_history, CorruptionConfig, R2ftConfig};
use mdlab::rng::{derive_seed, rng_from_seed};
use mdlab::state::SequenceState;
use mdlab::vocab::TokenId;
use mdlab::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::{Manifest, MANIFEST_FILE};
use crate::svg::{line_chart, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenCorpus,
    Train,
    R2ft,
    Decode,
    Sweep,
    Metrics,
    Hazard,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Train => "train",
            Command::R2ft => "r2ft",
            Command::Decode => "decode",
            Command::Sweep => "sweep",
            Command::Metrics => "metrics",
            Command::Hazard => "hazard",
        }
    }
}

pub fn execute(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    let _ = fs::remove_file(out.join("error.json"));
    let inputs = match cmd {
        Command::GenCorpus => cmd_gen_corpus(cfg, out)?,
        Command::Train => cmd_train(cfg, out)?,
        Command::R2ft => cmd_r2ft(cfg, out)?,
        Command::Decode => cmd_decode(cfg, out)?,
        Command::Sweep => cmd_sweep(cfg, out)?,
        Command::Metrics => cmd_metrics(cfg, out)?,
        Command::Hazard => cmd_hazard(cfg, out)?,
    };
    cfg.check_unused()?;
    let mut m = Manifest::new(cmd.name(), cfg.resolved());
    for p in &inputs {
        m.add_input(p)?;
    }
    m.collect_outputs(out)?;
    m.write(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn required_path(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    let p = cfg.get_str(key, "");
    if p.is_empty() {
        return Err(Error::config(format!("missing required key {key}")));
    }
    let p = PathBuf::from(p);
    if !p.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{key}: {} does not exist", p.display()),
        )));
    }
    Ok(p)
}

fn optional_path(cfg: &RunConfig, key: &str) -> Result<Option<PathBuf>> {
    match cfg.get_str(key, "none").as_str() {
        "" | "none" => Ok(None),
        _ => required_path(cfg, key).map(Some),
    }
}

fn load_corpus_checked(path: &Path, support: usize) -> Result<Vec<Example>> {
    let (header, corpus) = load_corpus(path)?;
    if header.vocab.support_size() != support {
        return Err(Error::config(format!(
            "corpus support {} does not match expected {support}",
            header.vocab.support_size()
        )));
    }
    Ok(corpus)
}

// ---------------------------------------------------------------- gen-corpus

fn cmd_gen_corpus(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let preset = cfg.get_str("preset", "instruct");
    let base = match preset.as_str() {
        "instruct" => DesignSpec::instruct(),
        "continuous" => DesignSpec::continuous(),
        other => return Err(Error::config(format!("unknown preset {other:?}"))),
    };
    let spec = DesignSpec {
        function_words: cfg.get("function_words", base.function_words)?,
        topics: cfg.get("topics", base.topics)?,
        keywords_per_topic: cfg.get("keywords_per_topic", base.keywords_per_topic)?,
        meaning_per_topic: cfg.get("meaning_per_topic", base.meaning_per_topic)?,
        templates_per_topic: cfg.get("templates_per_topic", base.templates_per_topic)?,
        eos_rate: cfg.get("eos_rate", base.eos_rate)?,
        noise: cfg.get("noise", base.noise)?,
        max_response_len: cfg.get("max_response_len", base.max_response_len)?,
        seed: cfg.get("model_seed", base.seed)?,
        ..base
    };
    let n: usize = cfg.get("n", 20_000)?;
    let seed: u64 = cfg.get("seed", 0)?;
    let cap: usize = cfg.get("cap", 512)?;
    if n == 0 || cap == 0 {
        return Err(Error::config("n and cap must be positive"));
    }
    let model = designed_model(&spec)?;
    let corpus = generate_corpus_capped(&model, n, seed, cap.min(model.max_response_len));
    let prior = PriorTable::compute(&corpus, model.support_size())?;
    save_corpus(&out.join("corpus.jsonl"), &model.vocab, seed, &corpus)?;
    model.save(&out.join("model.json"))?;
    prior.save(&out.join("prior.json"))?;

    let (mu, sigma) = ppl_stats(&model, &corpus)?;
    let lens: Vec<f64> = corpus.iter().map(|e| e.response.len() as f64).collect();
    let mean_len = lens.iter().sum::<f64>() / lens.len() as f64;
    let max_len = corpus.iter().map(|e| e.response.len()).max().unwrap_or(0);
    write_rows(
        &out.join("stats.csv"),
        &[
            "examples",
            "content_size",
            "mean_response_len",
            "max_response_len",
            "ppl_mean",
            "ppl_std",
        ],
        &[vec![
            n.to_string(),
            model.vocab.content_size().to_string(),
            mean_len.to_string(),
            max_len.to_string(),
            mu.to_string(),
            sigma.to_string(),
        ]],
    )?;
    Ok(Vec::new())
}

// --------------------------------------------------------------------- train

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let corpus_path = required_path(cfg, "corpus")?;
    let init = optional_path(cfg, "init")?;
    let (header, corpus) = load_corpus(&corpus_path)?;
    let d = TrainConfig::default();
    let eos_mode = match cfg.get_str("eos_mode", "up_to_answer_eos").as_str() {
        "up_to_answer_eos" => EosMode::UpToAnswerEos,
        "full_fill" => EosMode::FullFill,
        other => return Err(Error::config(format!("unknown eos_mode {other:?}"))),
    };
    let tc = TrainConfig {
        steps: cfg.get("steps", d.steps)?,
        lr: cfg.get("lr", d.lr)?,
        batch_size: cfg.get("batch_size", d.batch_size)?,
        time_steps: cfg.get("time_steps", d.time_steps)?,
        window: cfg.get("window", d.window)?,
        eos_mode,
        seed: cfg.get("seed", d.seed)?,
        eval_every: cfg.get("eval_every", d.eval_every)?,
        eval_size: cfg.get("eval_size", d.eval_size)?,
        holdout: cfg.get("holdout", d.holdout)?,
    };
    let radius: usize = cfg.get("radius", DEFAULT_RADIUS)?;
    let v = header.vocab.support_size();
    let p0 = match &init {
        Some(p) => {
            let params = load_params(p)?;
            if params.v() != v {
                return Err(Error::config(format!(
                    "denoiser support {} does not match corpus support {v}",
                    params.v()
                )));
            }
            params
        }
        None => DenoiserParams::zeros(v, radius)?,
    };
    let (params, report) = train_sft(&p0, &header.vocab, &corpus, &tc)?;
    save_params(&out.join("params.json"), &params)?;
    let rows: Vec<Vec<String>> = report
        .history
        .iter()
        .map(|r| vec![r.step.to_string(), r.train_loss.to_string(), r.heldout_loss.to_string()])
        .collect();
    write_rows(&out.join("history.csv"), &["step", "train_loss", "heldout_loss"], &rows)?;
    Ok([Some(corpus_path), init].into_iter().flatten().collect())
}

// ---------------------------------------------------------------------- r2ft

fn cmd_r2ft(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let corpus_path = required_path(cfg, "corpus")?;
    let params_path = required_path(cfg, "params")?;
    let prior_path = optional_path(cfg, "prior")?;
    let (header, corpus) = load_corpus(&corpus_path)?;
    let params = load_params(&params_path)?;
    let prior = match &prior_path {
        Some(p) => PriorTable::load(p)?,
        None => PriorTable::compute(&corpus, header.vocab.support_size())?,
    };
    let d = R2ftConfig::default();
    let dc = CorruptionConfig::default();
    let rc = R2ftConfig {
        steps: cfg.get("steps", d.steps)?,
        lr: cfg.get("lr", d.lr)?,
        batch_size: cfg.get("batch_size", d.batch_size)?,
        gamma: cfg.get("gamma", d.gamma)?,
        beta: cfg.get("beta", d.beta)?,
        corruption: CorruptionConfig {
            g_max: cfg.get("g_max", dc.g_max)?,
            z_min: cfg.get("z_min", dc.z_min)?,
            z_max: cfg.get("z_max", dc.z_max)?,
            eos_insert: cfg.get_bool("eos_insert", dc.eos_insert)?,
        },
        window: cfg.get("window", d.window)?,
        seed: cfg.get("seed", d.seed)?,
        eval_every: cfg.get("eval_every", d.eval_every)?,
        eval_size: cfg.get("eval_size", d.eval_size)?,
        holdout: cfg.get("holdout", d.holdout)?,
        samples: cfg.get("samples", d.samples)?,
        sample_len: cfg.get("sample_len", d.sample_len)?,
        sample_steps: cfg.get("sample_steps", d.sample_steps)?,
        sample_k: cfg.get("sample_k", d.sample_k)?,
    };
    let (tuned, history) = train_r2ft(&params, &header.vocab, &corpus, &prior, &rc)?;
    save_params(&out.join("params.json"), &tuned)?;
    write_history(&history, BufWriter::new(File::create(out.join("history.csv"))?))?;
    Ok([Some(corpus_path), Some(params_path), prior_path]
        .into_iter()
        .flatten()
        .collect())
}

// -------------------------------------------------------------------- decode

/// Everything needed to decode and score: the corpus model supplies prompts
/// and the oracle scorer; the denoiser is either the oracle or trained
/// parameters.
pub struct DecodeSetup {
    pub model: CorpusModel,
    pub denoiser: Box<dyn Denoiser>,
    pub policy: DecodePolicy,
    pub len: usize,
    pub steps: usize,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
}

impl DecodeSetup {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let model_path = required_path(cfg, "model")?;
        let model = CorpusModel::load(&model_path)?;
        let mut inputs = vec![model_path];
        let denoiser: Box<dyn Denoiser> = match cfg.get_str("denoiser", "oracle").as_str() {
            "oracle" => Box::new(OracleDenoiser::new(model.clone())),
            "params" => {
                let p = required_path(cfg, "params")?;
                let params = load_params(&p)?;
                inputs.push(p);
                if params.v() != model.support_size() {
                    return Err(Error::config(format!(
                        "denoiser support {} does not match vocabulary support {}",
                        params.v(),
                        model.support_size()
                    )));
                }
                Box::new(params)
            }
            other => return Err(Error::config(format!("unknown denoiser {other:?}"))),
        };
        let k: usize = cfg.get("k", 5)?;
        let base = match cfg.get_str("sampler", "categorical").as_str() {
            "categorical" => BaseSampler::Categorical,
            "topk" => BaseSampler::TopKGlob { k },
            "llada" => BaseSampler::Llada,
            other => return Err(Error::config(format!("unknown sampler {other:?}"))),
        };
        let mut policy = DecodePolicy::categorical()
            .with_base(base)
            .with_eos_fill(cfg.get_bool("eos_fill", false)?)
            .with_cache(cfg.get_bool("cache", false)?);
        policy.semi_ar = cfg.get_opt("blocks")?;
        let conv_scale: f64 = cfg.get("conv_scale", 1.0)?;
        policy.conv = cfg.get_opt::<usize>("kernel")?.map(|kernel| ConvConfig {
            scale: conv_scale,
            ..ConvConfig::new(kernel)
        });
        policy.rep_penalty = cfg.get_opt("rep_penalty")?;
        let setup = Self {
            model,
            denoiser,
            policy,
            len: cfg.get("L", 1024)?,
            steps: cfg.get("S", 128)?,
            seed: cfg.get("seed", 0)?,
            inputs,
        };
        setup.check()?;
        Ok(setup)
    }

    fn check(&self) -> Result<()> {
        self.policy
            .validate(self.len, self.steps, self.denoiser.support_size())?;
        let longest = self.model.templates.iter().map(|t| t.tokens.len()).max().unwrap_or(0);
        if longest >= self.len {
            return Err(Error::config(format!(
                "L = {} leaves no room after prompts of length {longest}",
                self.len
            )));
        }
        Ok(())
    }

    pub fn eos(&self) -> TokenId {
        self.model.vocab.eos()
    }

    /// Decodes one run. The run seed feeds the prompt draw and the sampler.
    pub fn run(&self, run_seed: u64) -> Result<RunOutput> {
        self.run_with(&self.policy, self.steps, run_seed)
    }

    /// Like [`DecodeSetup::run`] with another policy and step count.
    pub fn run_with(&self, policy: &DecodePolicy, steps: usize, run_seed: u64) -> Result<RunOutput> {
        let mut rng = rng_from_seed(run_seed);
        let prompt = self.model.sample_prompt(&mut rng);
        let (_, trace) = decode(
            self.denoiser.as_ref(),
            &Prompts::left(&prompt),
            policy,
            self.len,
            steps,
            &mut rng,
        )?;
        Ok(RunOutput {
            prompt,
            trace,
            len: self.len,
            steps,
        })
    }
}

pub struct RunOutput {
    pub prompt: Vec<TokenId>,
    pub trace: TraceLog,
    pub len: usize,
    pub steps: usize,
}

/// Per-run record stored next to each trace.
#[derive(Debug, Serialize, Deserialize)]
pub struct Sample {
    pub seed: u64,
    pub len: usize,
    pub steps: usize,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl RunOutput {
    fn write(&self, dir: &Path, seed: u64, eos: TokenId) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.trace
            .write_csv(BufWriter::new(File::create(dir.join("trace.csv"))?))?;
        let sample = Sample {
            seed,
            len: self.len,
            steps: self.steps,
            prompt: self.prompt.clone(),
            response: response_tokens(&self.trace.final_state, eos),
        };
        let mut text = serde_json::to_string(&sample)?;
        text.push('\n');
        fs::write(dir.join("sample.json"), text)?;
        Ok(())
    }
}

fn run_dir(out: &Path, idx: usize) -> PathBuf {
    out.join(format!("run_{idx:03}"))
}

fn cmd_decode(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let setup = DecodeSetup::from_config(cfg)?;
    let runs: usize = cfg.get("runs", 1)?;
    if runs == 0 {
        return Err(Error::config("runs must be positive"));
    }
    let rows = (0..runs)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(setup.seed, i as u64);
            let r = setup.run(seed)?;
            r.write(&run_dir(out, i), seed, setup.eos())?;
            Ok(vec![
                i.to_string(),
                seed.to_string(),
                r.prompt.len().to_string(),
                response_tokens(&r.trace.final_state, setup.eos()).len().to_string(),
                r.trace.denoiser_calls().to_string(),
                r.trace.unfinished().to_string(),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    write_rows(
        &out.join("runs.csv"),
        &[
            "run",
            "seed",
            "prompt_len",
            "response_len",
            "denoiser_calls",
            "unfinished",
        ],
        &rows,
    )?;
    Ok(setup.inputs)
}

// ------------------------------------------------------------------- scoring

/// Corpus statistics and prior used to score decoded runs.
struct Scorer {
    stats: Option<(f64, f64)>,
    prior: Option<PriorTable>,
    l_star_norm: Option<f64>,
    inputs: Vec<PathBuf>,
}

impl Scorer {
    fn from_config(cfg: &RunConfig, model: &CorpusModel) -> Result<Self> {
        let mut inputs = Vec::new();
        let corpus_path = optional_path(cfg, "corpus")?;
        let prior_path = optional_path(cfg, "prior")?;
        let corpus = match &corpus_path {
            Some(p) => {
                inputs.push(p.clone());
                Some(load_corpus_checked(p, model.support_size())?)
            }
            None => None,
        };
        let stats = corpus.as_deref().map(|c| ppl_stats(model, c)).transpose()?;
        let prior = match (&prior_path, &corpus) {
            (Some(p), _) => {
                inputs.push(p.clone());
                Some(PriorTable::load(p)?)
            }
            (None, Some(c)) => Some(PriorTable::compute(c, model.support_size())?),
            (None, None) => None,
        };
        Ok(Self {
            stats,
            prior,
            l_star_norm: cfg.get_opt("l_star_norm")?,
            inputs,
        })
    }

    fn score(&self, model: &CorpusModel, prompt: &[TokenId], trace: &TraceLog, steps: usize) -> Result<Score> {
        let eos = model.vocab.eos();
        let response = response_tokens(&trace.final_state, eos);
        let zero_len = response.is_empty();
        let ppl = if zero_len {
            f64::NAN
        } else {
            model.oracle_logprob(&response, prompt)?.ppl()
        };
        let speed = speed_report(trace, steps, 0.0, eos)?;
        let norm = self.l_star_norm.unwrap_or(speed.l_star as f64);
        let inlier = self
            .stats
            .map(|(mu, sigma)| inlier_rate(&[PplEntry { ppl, zero_len }], mu, sigma))
            .transpose()?;
        let log_prior = match &self.prior {
            Some(p) if !zero_len => mean_log_prior(&response, p, &model.vocab)?,
            _ => f64::NAN,
        };
        Ok(Score {
            ppl,
            zero_len,
            inlier,
            mean_log_prior: log_prior,
            l_star: speed.l_star,
            s_star: speed.s_star,
            r_star: speed.r_star,
            tokens_per_step: norm / speed.s_star as f64,
        })
    }
}

struct Score {
    ppl: f64,
    zero_len: bool,
    inlier: Option<f64>,
    mean_log_prior: f64,
    l_star: usize,
    s_star: usize,
    r_star: f64,
    tokens_per_step: f64,
}

const SCORE_HEADER: [&str; 8] = [
    "ppl",
    "zero_len",
    "inlier",
    "mean_log_prior",
    "l_star",
    "s_star",
    "r_star",
    "tokens_per_step",
];

impl Score {
    fn fields(&self) -> Vec<String> {
        vec![
            self.ppl.to_string(),
            self.zero_len.to_string(),
            self.inlier.map_or_else(|| "NaN".into(), |x| x.to_string()),
            self.mean_log_prior.to_string(),
            self.l_star.to_string(),
            self.s_star.to_string(),
            self.r_star.to_string(),
            self.tokens_per_step.to_string(),
        ]
    }
}

fn mean_finite(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

// --------------------------------------------------------------------- sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    BlockSize,
    KernelSize,
    Steps,
}

fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let setup = DecodeSetup::from_config(cfg)?;
    let scorer = Scorer::from_config(cfg, &setup.model)?;
    let axis_name = cfg.get_str("axis", "block_size");
    let axis = match axis_name.as_str() {
        "block_size" => Axis::BlockSize,
        "kernel_size" => Axis::KernelSize,
        "steps" => Axis::Steps,
        other => return Err(Error::config(format!("unknown sweep axis {other:?}"))),
    };
    let values: Vec<usize> = cfg.get_list("values", &[])?;
    let seeds: usize = cfg.get("seeds", 1)?;
    if values.is_empty() || seeds == 0 {
        return Err(Error::config("sweep needs nonempty values and seeds >= 1"));
    }
    match axis {
        Axis::BlockSize if setup.policy.conv.is_some() => {
            return Err(Error::config("block_size sweep is incompatible with a conv kernel"))
        }
        Axis::KernelSize if setup.policy.semi_ar.is_some() => {
            return Err(Error::config("kernel_size sweep is incompatible with semi-AR blocks"))
        }
        _ => {}
    }
    let variants = values
        .iter()
        .map(|&v| {
            let mut policy = setup.policy.clone();
            let mut steps = setup.steps;
            match axis {
                Axis::BlockSize => {
                    if v == 0 || setup.len % v != 0 {
                        return Err(Error::config(format!("block size {v} must divide L = {}", setup.len)));
                    }
                    policy.semi_ar = Some(setup.len / v);
                }
                Axis::KernelSize => {
                    policy.conv = Some(ConvConfig {
                        kernel: v,
                        ..setup.policy.conv.unwrap_or(ConvConfig::new(v))
                    })
                }
                Axis::Steps => steps = v,
            }
            policy.validate(setup.len, steps, setup.denoiser.support_size())?;
            Ok((v, policy, steps))
        })
        .collect::<Result<Vec<_>>>()?;

    let tasks: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|a| (0..seeds).map(move |s| (a, s)))
        .collect();
    let results = tasks
        .par_iter()
        .map(|&(a, s)| {
            let (v, policy, steps) = &variants[a];
            let seed = derive_seed(setup.seed, s as u64);
            let r = setup.run_with(policy, *steps, seed)?;
            let dir = out.join("runs").join(format!("{axis_name}_{v}_seed{s:03}"));
            r.write(&dir, seed, setup.eos())?;
            let score = scorer.score(&setup.model, &r.prompt, &r.trace, *steps)?;
            Ok((a, s, seed, score))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut header = vec![axis_name.as_str(), "seed_index", "seed"];
    header.extend(SCORE_HEADER);
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|(a, s, seed, score)| {
            let mut row = vec![variants[*a].0.to_string(), s.to_string(), seed.to_string()];
            row.extend(score.fields());
            row
        })
        .collect();
    write_rows(&out.join("sweep.csv"), &header, &rows)?;

    let mut summary = Vec::new();
    let mut curve = Vec::new();
    for (a, (v, _, _)) in variants.iter().enumerate() {
        let group: Vec<&Score> = results.iter().filter(|r| r.0 == a).map(|r| &r.3).collect();
        let mean_ppl = mean_finite(group.iter().map(|s| s.ppl));
        let inlier = match scorer.stats {
            Some((mu, sigma)) => {
                let entries: Vec<PplEntry> = group
                    .iter()
                    .map(|s| PplEntry {
                        ppl: s.ppl,
                        zero_len: s.zero_len,
                    })
                    .collect();
                inlier_rate(&entries, mu, sigma)?
            }
            None => f64::NAN,
        };
        summary.push(vec![
            v.to_string(),
            group.len().to_string(),
            mean_ppl.to_string(),
            inlier.to_string(),
            mean_finite(group.iter().map(|s| s.mean_log_prior)).to_string(),
            mean_finite(group.iter().map(|s| s.tokens_per_step)).to_string(),
        ]);
        curve.push((*v as f64, mean_ppl));
    }
    write_rows(
        &out.join("summary.csv"),
        &[
            axis_name.as_str(),
            "runs",
            "mean_ppl",
            "inlier_rate",
            "mean_log_prior",
            "tokens_per_step",
        ],
        &summary,
    )?;
    let chart = line_chart(
        &format!("oracle PPL over {axis_name}"),
        &axis_name,
        "mean PPL",
        &[Series {
            name: "mean PPL".into(),
            points: curve,
        }],
    );
    fs::write(out.join("sweep.svg"), chart)?;
    let mut inputs = setup.inputs;
    inputs.extend(scorer.inputs);
    Ok(inputs)
}

// ------------------------------------------------------------------- metrics

fn cmd_metrics(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let dir = required_path(cfg, "decode_dir")?;
    let decode_manifest = dir.join(MANIFEST_FILE);
    let decode_cfg = RunConfig::load(&decode_manifest, "decode")?;
    let setup = DecodeSetup::from_config(&decode_cfg)?;
    let runs: usize = decode_cfg.get("runs", 1)?;
    let scorer = Scorer::from_config(cfg, &setup.model)?;
    let zone = cfg.get_bool("zone", false)?;
    let zone_window: usize = cfg.get("zone_window", 64)?;
    let zone_k: usize = cfg.get("zone_k", 5)?;

    let mut inputs = vec![decode_manifest];
    let loaded = (0..runs)
        .map(|i| {
            let rd = run_dir(&dir, i);
            let sample: Sample = serde_json::from_str(&fs::read_to_string(rd.join("sample.json"))?)?;
            let initial = SequenceState::with_prompts(&sample.prompt, &[], sample.len)?;
            let trace = TraceLog::read_csv(File::open(rd.join("trace.csv"))?, &initial)?;
            inputs.push(rd.join("sample.json"));
            inputs.push(rd.join("trace.csv"));
            Ok((sample, initial, trace))
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = loaded
        .par_iter()
        .enumerate()
        .map(|(i, (sample, initial, trace))| {
            let violations = validate_trace(&setup.policy, trace, initial, sample.steps, setup.eos());
            let score = scorer.score(&setup.model, &sample.prompt, trace, sample.steps)?;
            let mut row = vec![i.to_string(), sample.seed.to_string()];
            row.extend(score.fields());
            row.push(violations.len().to_string());
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut header = vec!["run", "seed"];
    header.extend(SCORE_HEADER);
    header.push("violations");
    write_rows(&out.join("metrics.csv"), &header, &rows)?;

    if zone {
        let prior = scorer
            .prior
            .as_ref()
            .ok_or_else(|| Error::config("zone = true needs a prior or corpus"))?;
        let prompt = &loaded
            .first()
            .ok_or_else(|| Error::config("decode directory has no runs"))?
            .0
            .prompt;
        let report = candidate_zone(setup.denoiser.as_ref(), prompt, zone_window, prior, zone_k)?;
        report.write_csv(BufWriter::new(File::create(out.join("zone.csv"))?))?;
        let pts = |f: fn(&mdlab::metrics::ZoneRecord) -> f64| -> Vec<(f64, f64)> {
            report.records.iter().map(|r| (r.distance as f64, f(r))).collect()
        };
        let chart = line_chart(
            "candidate zone",
            "distance from prompt",
            "probability mass",
            &[
                Series {
                    name: "high prior".into(),
                    points: pts(|r| r.high_prior_mass),
                },
                Series {
                    name: "repetition".into(),
                    points: pts(|r| r.repetition_mass),
                },
            ],
        );
        fs::write(out.join("zone.svg"), chart)?;
    }
    inputs.extend(setup.inputs);
    inputs.extend(scorer.inputs);
    Ok(inputs)
}

// -------------------------------------------------------------------- hazard

fn cmd_hazard(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ls: Vec<usize> = cfg.get_list("L", &[64, 128, 256, 512, 1024])?;
    let ss: Vec<usize> = cfg.get_list("S", &[16, 32, 64, 128])?;
    let bs: Vec<usize> = cfg.get_list("b", &[1, 2, 4, 8])?;
    let c: f64 = cfg.get("c", 0.5)?;
    let cap: f64 = cfg.get("cap", 0.99)?;
    let names: Vec<String> = cfg.get_list("families", &["zero".to_string(), "ratio".to_string()])?;
    let families = names
        .iter()
        .map(|n| match n.as_str() {
            "zero" => Ok(HazardFamily::Zero),
            "ratio" => HazardFamily::ratio(c, cap),
            other => Err(Error::config(format!("unknown hazard family {other:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = hazard_grid(&ls, &ss, &bs, &families)?;
    if rows.is_empty() {
        return Err(Error::config("hazard grid has no admissible (L, S, b) combination"));
    }
    write_grid_csv(&rows, BufWriter::new(File::create(out.join("hazard.csv"))?))?;
    Ok(Vec::new())
}
