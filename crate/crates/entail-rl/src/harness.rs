//! Experiment harness: TOML configuration, experiment presets, checkpoint
//! and CSV artifact formats, the command pipelines behind the CLI
//! subcommands, and the sweep driver.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::mdp::{MdpLimits, TokenId, TokenSeq, Vocabulary};
use crate::metrics::{evaluate, ExampleScores, MetricsReport};
use crate::policy::{DecodeConfig, Net, NetShape, PolicyParams};
use crate::rewards::{OracleJudge, RewardConfig};
use crate::synthtask::{
    ctrl_annotate, filter_entailed, generate_corpus, write_corpus_split, write_vocab_manifest,
    Corpus, CorpusConfig,
};
use crate::trainer::{mle_pretrain, rl_finetune, EvalSpec, LogRow, MleConfig, TrainConfig};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration file.
// ---------------------------------------------------------------------------

/// Policy/value network hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub window: usize,
    pub hidden: usize,
    /// Append the mean document embedding to the window features.
    pub ctx_bag: bool,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: 32,
            window: 4,
            hidden: 64,
            ctx_bag: true,
            init_scale: 0.08,
            seed: 0,
        }
    }
}

/// Episode limits.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitsConfig {
    pub horizon: usize,
    pub context_max: usize,
}

impl Default for LimitsConfig {
    fn default() -> Self {
        LimitsConfig {
            horizon: 32,
            context_max: 64,
        }
    }
}

impl LimitsConfig {
    pub fn to_limits(self) -> Result<MdpLimits> {
        MdpLimits::new(self.horizon, self.context_max)
    }
}

/// Decoding section of the config file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    /// "beam" or "sample".
    pub mode: String,
    pub temperature: f64,
    pub beam_width: usize,
    pub brevity_penalty: f64,
    pub seed: u64,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            mode: "beam".to_string(),
            temperature: 1.0,
            beam_width: 4,
            brevity_penalty: 0.6,
            seed: 0,
        }
    }
}

impl DecodeSection {
    pub fn to_decode(&self) -> Result<DecodeConfig> {
        match self.mode.as_str() {
            "beam" => DecodeConfig::beam(self.beam_width, self.brevity_penalty),
            "sample" => DecodeConfig::sample(self.temperature, self.seed),
            other => Err(Error::Config(format!(
                "decode.mode must be \"beam\" or \"sample\", got \"{other}\""
            ))),
        }
    }
}

/// Sweep axes. The desk-scale default trims the full grid.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub alphas: Vec<f64>,
    pub temperatures: Vec<f64>,
    pub hidden_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            alphas: vec![0.1, 0.2, 0.4, 0.8],
            temperatures: vec![0.3, 1.0],
            hidden_sizes: vec![64],
            seeds: vec![0],
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty()
            || self.temperatures.is_empty()
            || self.hidden_sizes.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::Config("sweep axes must be non-empty".to_string()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.alphas.len() * self.temperatures.len() * self.hidden_sizes.len() * self.seeds.len()
    }
}

/// Full experiment configuration (one TOML file).
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FullConfig {
    pub corpus: CorpusConfig,
    pub policy: PolicyConfig,
    pub limits: LimitsConfig,
    pub mle: MleConfig,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub sweep: SweepSpec,
}

impl FullConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.reward.validate()?;
        self.train.validate()?;
        self.sweep.validate()?;
        self.limits.to_limits()?;
        self.decode.to_decode()?;
        if self.policy.window == 0 || self.policy.embed_dim == 0 || self.policy.hidden == 0 {
            return Err(Error::Config(
                "policy.window, policy.embed_dim, policy.hidden must be >= 1".to_string(),
            ));
        }
        Ok(())
    }

    /// Override every training-relevant seed (CLI --seed).
    pub fn override_seed(&mut self, seed: u64) {
        self.policy.seed = seed;
        self.mle.seed = seed;
        self.train.seed = seed;
    }
}

/// Parse and validate a config file.
pub fn load_config(path: &Path) -> Result<FullConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: FullConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Hash of the effective configuration (after preset/seed overrides); stamped
/// into every output file header. The worker count is an execution-resource
/// knob, not an experiment parameter: results are bit-identical across
/// `--jobs`, so it is normalized out of the hash.
pub fn config_hash(cfg: &FullConfig, preset: Option<ExperimentPreset>) -> String {
    let mut cfg = cfg.clone();
    cfg.train.jobs = 1;
    let mut h = Sha256::new();
    h.update(format!("{cfg:?}|preset={preset:?}").as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

// ---------------------------------------------------------------------------
// Presets.
// ---------------------------------------------------------------------------

/// The five experiment arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentPreset {
    Sl,
    Filtered,
    Ctrl,
    RlefL,
    RlefH,
}

impl FromStr for ExperimentPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SL" => Ok(ExperimentPreset::Sl),
            "Filtered" => Ok(ExperimentPreset::Filtered),
            "CTRL" => Ok(ExperimentPreset::Ctrl),
            "RLEF_L" => Ok(ExperimentPreset::RlefL),
            "RLEF_H" => Ok(ExperimentPreset::RlefH),
            other => Err(Error::Config(format!(
                "unknown preset \"{other}\" (expected SL, Filtered, CTRL, RLEF_L, RLEF_H)"
            ))),
        }
    }
}

impl ExperimentPreset {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentPreset::Sl => "SL",
            ExperimentPreset::Filtered => "Filtered",
            ExperimentPreset::Ctrl => "CTRL",
            ExperimentPreset::RlefL => "RLEF_L",
            ExperimentPreset::RlefH => "RLEF_H",
        }
    }

    /// File-name stem for artifacts.
    pub fn stem(self) -> &'static str {
        match self {
            ExperimentPreset::Sl => "sl",
            ExperimentPreset::Filtered => "filtered",
            ExperimentPreset::Ctrl => "ctrl",
            ExperimentPreset::RlefL => "rlef_l",
            ExperimentPreset::RlefH => "rlef_h",
        }
    }

    /// Apply the preset's pinned hyperparameters. The supervised arms decode
    /// with beam width 4 and brevity penalty 0.6; the RLEF arms pin the
    /// reward mix and temperature and decode by temperature sampling.
    pub fn apply(self, cfg: &mut FullConfig) {
        match self {
            ExperimentPreset::Sl | ExperimentPreset::Filtered | ExperimentPreset::Ctrl => {
                cfg.decode = DecodeSection {
                    mode: "beam".to_string(),
                    beam_width: 4,
                    brevity_penalty: 0.6,
                    ..cfg.decode.clone()
                };
            }
            ExperimentPreset::RlefL => {
                cfg.reward.alpha = 0.1;
                cfg.train.temperature = 1.0;
                cfg.decode = DecodeSection {
                    mode: "sample".to_string(),
                    temperature: 1.0,
                    ..cfg.decode.clone()
                };
            }
            ExperimentPreset::RlefH => {
                cfg.reward.alpha = 0.2;
                cfg.train.temperature = 0.3;
                cfg.decode = DecodeSection {
                    mode: "sample".to_string(),
                    temperature: 0.3,
                    ..cfg.decode.clone()
                };
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &str = "# entail-rl checkpoint v1";

/// Write a network checkpoint (textual, round-trip exact via shortest
/// float formatting).
pub fn save_checkpoint(path: &Path, net: &Net, kind: &str, hash: &str) -> Result<()> {
    let s = &net.shape;
    let mut out = String::new();
    let _ = writeln!(out, "{CKPT_MAGIC}");
    let _ = writeln!(out, "# config_hash={hash}");
    let _ = writeln!(out, "kind={kind}");
    let _ = writeln!(out, "vocab={}", s.vocab);
    let _ = writeln!(out, "embed_dim={}", s.embed_dim);
    let _ = writeln!(out, "window={}", s.window);
    let _ = writeln!(out, "hidden={}", s.hidden);
    let _ = writeln!(out, "out={}", s.out);
    let _ = writeln!(out, "ctx_bag={}", s.ctx_bag);
    match s.boundary {
        Some(b) => {
            let _ = writeln!(out, "boundary={b}");
        }
        None => {
            let _ = writeln!(out, "boundary=none");
        }
    }
    let _ = writeln!(out, "n_params={}", net.theta.len());
    for v in &net.theta {
        let _ = writeln!(out, "{v}");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a checkpoint, verifying magic, kind, and parameter count.
pub fn load_checkpoint(path: &Path, expect_kind: &str) -> Result<Net> {
    let text = fs::read_to_string(path)?;
    let bad = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(CKPT_MAGIC) {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let mut fields: HashMap<&str, &str> = HashMap::new();
    let mut theta = Vec::new();
    for line in lines {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k, v);
        } else {
            theta.push(
                line.parse::<f64>()
                    .map_err(|_| bad(&format!("bad parameter line \"{line}\"")))?,
            );
        }
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing field {k}")));
    if get("kind")? != expect_kind {
        return Err(bad(&format!(
            "checkpoint kind \"{}\" but expected \"{expect_kind}\"",
            get("kind")?
        )));
    }
    let parse_usize =
        |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(&format!("bad field {k}"))) };
    let boundary = match get("boundary")? {
        "none" => None,
        v => Some(
            v.parse::<TokenId>()
                .map_err(|_| bad("bad field boundary"))?,
        ),
    };
    let shape = NetShape {
        vocab: parse_usize("vocab")? as u32,
        embed_dim: parse_usize("embed_dim")?,
        window: parse_usize("window")?,
        hidden: parse_usize("hidden")?,
        out: parse_usize("out")?,
        ctx_bag: get("ctx_bag")? == "true",
        boundary,
    };
    if theta.len() != parse_usize("n_params")? || theta.len() != shape.n_params() {
        return Err(bad("parameter count does not match shape"));
    }
    Ok(Net { shape, theta })
}

pub fn save_policy(path: &Path, params: &PolicyParams, hash: &str) -> Result<()> {
    save_checkpoint(path, &params.net, "policy", hash)
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    Ok(PolicyParams {
        net: load_checkpoint(path, "policy")?,
    })
}

// ---------------------------------------------------------------------------
// CSV artifacts.
// ---------------------------------------------------------------------------

fn csv_header(kind: &str, hash: &str) -> String {
    format!("# entail-rl {kind} v1\n# config_hash={hash}\n")
}

pub fn write_log_csv(path: &Path, rows: &[LogRow], hash: &str) -> Result<()> {
    let mut out = csv_header("training-log", hash);
    out.push_str(
        "step,mean_reward,mean_nli_logprob,mean_kl,entailment_rate,rouge1,rouge2,rougeL,\
         coverage,density,mean_length,value_loss\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.mean_reward,
            r.mean_nli_logprob,
            r.mean_kl,
            r.entailment_rate,
            r.rouge1,
            r.rouge2,
            r.rouge_l,
            r.coverage,
            r.density,
            r.mean_length,
            r.value_loss
        );
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_report_csv(path: &Path, report: &MetricsReport, hash: &str) -> Result<()> {
    let mut out = csv_header("report", hash);
    out.push_str(
        "entailment_rate,rouge1,rouge2,rougeL,coverage,density,mean_length,n_examples\n",
    );
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        report.entailment_rate,
        report.rouge1,
        report.rouge2,
        report.rouge_l,
        report.coverage,
        report.density,
        report.mean_length,
        report.n_examples
    );
    fs::write(path, out)?;
    Ok(())
}

pub fn write_examples_csv(path: &Path, rows: &[ExampleScores], hash: &str) -> Result<()> {
    let mut out = csv_header("per-example scores", hash);
    out.push_str("index,prob_entailed,rouge1,rouge2,rougeL,coverage,density,length,summary\n");
    for (i, r) in rows.iter().enumerate() {
        let summary = r
            .summary
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{summary}",
            r.prob_entailed, r.rouge1, r.rouge2, r.rouge_l, r.coverage, r.density, r.length
        );
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Pipelines.
// ---------------------------------------------------------------------------

/// Shared per-run state: resolved config, vocabulary, corpus, limits.
pub struct Pipeline {
    pub cfg: FullConfig,
    pub hash: String,
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub limits: MdpLimits,
}

impl Pipeline {
    /// Build the run state; the preset (if any) is applied to the config
    /// before hashing.
    pub fn new(mut cfg: FullConfig, preset: Option<ExperimentPreset>) -> Result<Self> {
        if let Some(p) = preset {
            p.apply(&mut cfg);
        }
        cfg.validate()?;
        let hash = config_hash(&cfg, preset);
        let vocab = cfg.corpus.vocabulary()?;
        let corpus = generate_corpus(&cfg.corpus, &vocab)?;
        let limits = cfg.limits.to_limits()?;
        Ok(Pipeline {
            cfg,
            hash,
            vocab,
            corpus,
            limits,
        })
    }

    pub fn judge(&self) -> OracleJudge {
        OracleJudge::new(self.cfg.reward, self.vocab.clone())
    }

    fn init_policy(&self, hidden: usize, seed: u64) -> PolicyParams {
        PolicyParams::init(
            self.vocab.size(),
            self.cfg.policy.embed_dim,
            self.cfg.policy.window,
            hidden,
            self.cfg.policy.ctx_bag,
            self.vocab.boundary_id(),
            self.cfg.policy.init_scale,
            seed,
        )
    }

    /// Supervised pretraining for one arm. Returns the trained policy and
    /// the number of training examples actually used (smaller for Filtered).
    pub fn train_anchor(&self, preset: ExperimentPreset) -> Result<(PolicyParams, usize)> {
        let judge = self.judge();
        let threshold = self.cfg.reward.entail_threshold;
        let train: Vec<_> = match preset {
            ExperimentPreset::Filtered => {
                filter_entailed(&self.corpus.train, &judge, threshold)?
            }
            ExperimentPreset::Ctrl => {
                ctrl_annotate(&self.corpus.train, &judge, threshold, &self.vocab)?
            }
            _ => self.corpus.train.clone(),
        };
        let val: Vec<_> = match preset {
            ExperimentPreset::Ctrl => {
                ctrl_annotate(&self.corpus.val, &judge, threshold, &self.vocab)?
            }
            _ => self.corpus.val.clone(),
        };
        let n_train = train.len();
        let init = self.init_policy(self.cfg.policy.hidden, self.cfg.policy.seed);
        let trained = mle_pretrain(init, &train, &val, &self.vocab, &self.limits, &self.cfg.mle)?;
        Ok((trained, n_train))
    }

    /// RL fine-tuning from an anchor; evaluates on the validation split at
    /// each logging interval with the configured decoder.
    pub fn train_rl(&self, anchor: &PolicyParams) -> Result<crate::trainer::RlOutcome> {
        let judge = self.judge();
        let contexts: Vec<TokenSeq> = self
            .corpus
            .train
            .iter()
            .map(|e| e.document.clone())
            .collect();
        let eval = EvalSpec {
            dataset: &self.corpus.val,
            decode: self.cfg.decode.to_decode()?,
            control: None,
        };
        rl_finetune(
            anchor,
            &contexts,
            &judge,
            &self.cfg.reward,
            &self.cfg.train,
            &self.limits,
            &self.vocab,
            Some(eval),
        )
    }

    /// Test-set evaluation. `control` is the CTRL inference token, if any.
    pub fn eval_test(
        &self,
        params: &PolicyParams,
        control: Option<TokenId>,
    ) -> Result<(MetricsReport, Vec<ExampleScores>)> {
        evaluate(
            params,
            &self.corpus.test,
            &self.judge(),
            &self.cfg.decode.to_decode()?,
            &self.limits,
            &self.vocab,
            &self.cfg.reward,
            control,
        )
    }

    /// Mean reference length (EOS excluded) of a split.
    pub fn mean_ref_length(&self, split: &[crate::synthtask::Example]) -> f64 {
        let eos = self.vocab.eos_id();
        split
            .iter()
            .map(|e| e.reference.without_eos(eos).len() as f64)
            .sum::<f64>()
            / split.len() as f64
    }
}

/// `gen-data`: write corpus splits and the vocabulary manifest.
pub fn cmd_gen_data(cfg: &FullConfig, out: &Path) -> Result<()> {
    let p = Pipeline::new(cfg.clone(), None)?;
    fs::create_dir_all(out)?;
    write_corpus_split(&out.join("train.tsv"), &p.corpus.train, &p.hash)?;
    write_corpus_split(&out.join("val.tsv"), &p.corpus.val, &p.hash)?;
    write_corpus_split(&out.join("test.tsv"), &p.corpus.test, &p.hash)?;
    write_vocab_manifest(&out.join("vocab.txt"), &p.vocab, &p.hash)?;
    Ok(())
}

/// `pretrain`: supervised training for SL/Filtered/CTRL (the RLEF presets
/// pretrain their SL anchor). Writes `<stem>.ckpt` and a small run log.
pub fn cmd_pretrain(cfg: &FullConfig, preset: ExperimentPreset, out: &Path) -> Result<PathBuf> {
    let arm = match preset {
        ExperimentPreset::RlefL | ExperimentPreset::RlefH => ExperimentPreset::Sl,
        p => p,
    };
    let p = Pipeline::new(cfg.clone(), Some(arm))?;
    fs::create_dir_all(out)?;
    let (params, n_train) = p.train_anchor(arm)?;
    let ckpt = out.join(format!("{}.ckpt", arm.stem()));
    save_policy(&ckpt, &params, &p.hash)?;
    let log = format!(
        "# entail-rl pretrain v1\n# config_hash={}\npreset={}\ntrain_examples={}\n",
        p.hash,
        arm.name(),
        n_train
    );
    fs::write(out.join(format!("{}_pretrain.log", arm.stem())), log)?;
    Ok(ckpt)
}

/// `rl-train`: fine-tune from an anchor checkpoint; writes the fine-tuned
/// checkpoint and the training-log CSV.
pub fn cmd_rl_train(
    cfg: &FullConfig,
    preset: ExperimentPreset,
    anchor_path: &Path,
    out: &Path,
) -> Result<PathBuf> {
    let p = Pipeline::new(cfg.clone(), Some(preset))?;
    fs::create_dir_all(out)?;
    let anchor = load_policy(anchor_path)?;
    let outcome = p.train_rl(&anchor)?;
    let ckpt = out.join(format!("{}.ckpt", preset.stem()));
    save_policy(&ckpt, &outcome.policy, &p.hash)?;
    write_log_csv(
        &out.join(format!("{}_training_log.csv", preset.stem())),
        &outcome.log,
        &p.hash,
    )?;
    Ok(ckpt)
}

/// `eval`: score a checkpoint on the test split; writes the report CSV and
/// the per-example dump.
pub fn cmd_eval(
    cfg: &FullConfig,
    preset: Option<ExperimentPreset>,
    ckpt: &Path,
    out: &Path,
) -> Result<MetricsReport> {
    let p = Pipeline::new(cfg.clone(), preset)?;
    fs::create_dir_all(out)?;
    let params = load_policy(ckpt)?;
    let control = match preset {
        Some(ExperimentPreset::Ctrl) => p.vocab.ctrl_entailed_id(),
        _ => None,
    };
    let (report, rows) = p.eval_test(&params, control)?;
    let stem = preset.map_or("eval", ExperimentPreset::stem);
    write_report_csv(&out.join(format!("{stem}_report.csv")), &report, &p.hash)?;
    write_examples_csv(&out.join(format!("{stem}_examples.csv")), &rows, &p.hash)?;
    Ok(report)
}

/// One sweep cell's coordinates and result.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub alpha: f64,
    pub temperature: f64,
    pub hidden: usize,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Run one sweep cell from a pre-trained anchor.
fn run_cell(
    base: &FullConfig,
    anchor: &PolicyParams,
    alpha: f64,
    temperature: f64,
    hidden: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let mut cfg = base.clone();
    cfg.reward.alpha = alpha;
    cfg.train.temperature = temperature;
    cfg.policy.hidden = hidden;
    cfg.override_seed(seed);
    // RL policies are evaluated by temperature sampling at the cell's rollout
    // temperature, matching the RLEF presets.
    cfg.decode = DecodeSection {
        mode: "sample".to_string(),
        temperature,
        ..cfg.decode.clone()
    };
    let p = Pipeline::new(cfg, None)?;
    let outcome = p.train_rl(anchor)?;
    let (report, _) = p.eval_test(&outcome.policy, None)?;
    Ok(report)
}

/// Train the SL anchor for a given (hidden size, seed) sweep coordinate.
pub fn sweep_anchor(base: &FullConfig, hidden: usize, seed: u64) -> Result<PolicyParams> {
    let mut cfg = base.clone();
    cfg.policy.hidden = hidden;
    cfg.override_seed(seed);
    let p = Pipeline::new(cfg, Some(ExperimentPreset::Sl))?;
    Ok(p.train_anchor(ExperimentPreset::Sl)?.0)
}

/// `sweep`: run the (alpha x temperature x hidden x seed) grid, writing a
/// long-format CSV, a per-cell-mean trade-off CSV, and a gnuplot script.
/// Returns (rows, number of failed cells); failures are reported on stderr
/// and do not stop the sweep.
pub fn cmd_sweep(cfg: &FullConfig, jobs: usize, out: &Path) -> Result<(Vec<SweepRow>, usize)> {
    cfg.validate()?;
    let hash = config_hash(cfg, None);
    fs::create_dir_all(out)?;
    let spec = &cfg.sweep;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    // Anchors are shared across (alpha, temperature) cells.
    let anchor_keys: Vec<(usize, u64)> = spec
        .hidden_sizes
        .iter()
        .flat_map(|&h| spec.seeds.iter().map(move |&s| (h, s)))
        .collect();
    let anchors: HashMap<(usize, u64), Result<PolicyParams>> = pool.install(|| {
        anchor_keys
            .par_iter()
            .map(|&(h, s)| ((h, s), sweep_anchor(cfg, h, s)))
            .collect()
    });

    let mut cells = Vec::with_capacity(spec.n_cells());
    for &a in &spec.alphas {
        for &t in &spec.temperatures {
            for &h in &spec.hidden_sizes {
                for &s in &spec.seeds {
                    cells.push((a, t, h, s));
                }
            }
        }
    }
    let results: Vec<((f64, f64, usize, u64), Result<MetricsReport>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(a, t, h, s)| {
                let r = match &anchors[&(h, s)] {
                    Ok(anchor) => run_cell(cfg, anchor, a, t, h, s),
                    Err(e) => Err(Error::Config(format!("anchor (h={h}, seed={s}): {e}"))),
                };
                ((a, t, h, s), r)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut n_failed = 0usize;
    for ((a, t, h, s), r) in results {
        match r {
            Ok(report) => rows.push(SweepRow {
                alpha: a,
                temperature: t,
                hidden: h,
                seed: s,
                report,
            }),
            Err(e) => {
                n_failed += 1;
                eprintln!("sweep cell (alpha={a}, T={t}, h={h}, seed={s}) failed: {e}");
            }
        }
    }
    write_sweep_csv(&out.join("sweep.csv"), &rows, &hash)?;
    write_tradeoff_csv(&out.join("tradeoff.csv"), &rows, &hash)?;
    fs::write(out.join("tradeoff.gp"), TRADEOFF_GNUPLOT)?;
    Ok((rows, n_failed))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow], hash: &str) -> Result<()> {
    let mut out = csv_header("sweep", hash);
    out.push_str(
        "alpha,temperature,hidden,seed,entailment_rate,rouge1,rouge2,rougeL,coverage,density,\
         mean_length\n",
    );
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.alpha,
            r.temperature,
            r.hidden,
            r.seed,
            m.entailment_rate,
            m.rouge1,
            m.rouge2,
            m.rouge_l,
            m.coverage,
            m.density,
            m.mean_length
        );
    }
    fs::write(path, out)?;
    Ok(())
}

/// Seed-averaged trade-off table (scatter source for entailment vs ROUGE-1,
/// length, coverage).
pub fn write_tradeoff_csv(path: &Path, rows: &[SweepRow], hash: &str) -> Result<()> {
    let mut groups: Vec<((u64, u64, usize), (usize, f64, f64, f64, f64))> = Vec::new();
    for r in rows {
        let key = (r.alpha.to_bits(), r.temperature.to_bits(), r.hidden);
        let entry = match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v,
            None => {
                groups.push((key, (0, 0.0, 0.0, 0.0, 0.0)));
                &mut groups.last_mut().expect("just pushed").1
            }
        };
        entry.0 += 1;
        entry.1 += r.report.entailment_rate;
        entry.2 += r.report.rouge1;
        entry.3 += r.report.coverage;
        entry.4 += r.report.mean_length;
    }
    let mut out = csv_header("trade-off", hash);
    out.push_str("alpha,temperature,hidden,entailment_rate,rouge1,coverage,mean_length\n");
    for ((a, t, h), (n, e, r1, c, l)) in groups {
        let n = n as f64;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            f64::from_bits(a),
            f64::from_bits(t),
            h,
            e / n,
            r1 / n,
            c / n,
            l / n
        );
    }
    fs::write(path, out)?;
    Ok(())
}

const TRADEOFF_GNUPLOT: &str = "\
# Scatter plots of the sweep trade-offs; run: gnuplot tradeoff.gp
set datafile separator ','
set datafile commentschars '#'
set terminal pngcairo size 900,700
set key outside
set output 'entailment_vs_rouge1.png'
set xlabel 'entailment rate'
set ylabel 'ROUGE-1'
plot 'tradeoff.csv' using 4:5 with points pt 7 notitle
set output 'entailment_vs_length.png'
set ylabel 'mean summary length'
plot 'tradeoff.csv' using 4:7 with points pt 7 notitle
set output 'entailment_vs_coverage.png'
set ylabel 'document coverage'
plot 'tradeoff.csv' using 4:6 with points pt 7 notitle
";

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite"));
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
