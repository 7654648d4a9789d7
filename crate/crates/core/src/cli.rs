//! Command-line front end: configuration resolution, run directories and
//! one handler per subcommand.

use std::collections::HashSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{concordance, divergence_matrix, model_vs_data_divergence, overlap_fraction, write_concordance_csv, write_overlap_trials};
use crate::classify::{extract_features, kfold_cv, load_labels, read_features_csv, write_features_csv, ClassifierConfig, FeatureVector};
use crate::io_util::{write_atomic, write_csv};
use crate::lm::{load_samples, log_probs, sample, train_with, write_samples, SampleHeader, TrainRunConfig};
use crate::model::{checkpoint_id, init, load_checkpoint, save_checkpoint, ModelConfig, TransformerParams};
use crate::rl::{CriticParams, MockBehavior, MockServer, MotifReward, Peptide, PpoConfig, PpoTrainer, RemoteScorer, RewardScorer};
use crate::seqcore::{load_repertoire, load_repertoire_with_limit, Repertoire, TcrSequence};
use crate::{Error, Result};

/// Prefix for configuration overrides from the environment, e.g.
/// `TCRGPT_TRAIN__EPOCHS=5` sets `train.epochs`.
pub const ENV_PREFIX: &str = "TCRGPT_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            n: 1000,
            temperature: 1.0,
            max_len: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Minimum observation count for the concordance correlation.
    pub min_count: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { min_count: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub folds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { folds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub peptide: String,
    pub motif_k: usize,
    /// Remote scorer base URL; ignored with `--motif`.
    pub endpoint: String,
    pub timeout_secs: f64,
    pub retries: u32,
    pub backoff_secs: f64,
    /// `actor` copies the actor trunk into the critic; `fresh` initializes it.
    pub critic_init: String,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            peptide: String::new(),
            motif_k: 3,
            endpoint: String::new(),
            timeout_secs: 30.0,
            retries: 3,
            backoff_secs: 0.5,
            critic_init: "actor".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlapConfig {
    /// Generated sequences per trial; 0 uses the whole file as one trial.
    pub trial_size: usize,
    /// Drop unterminated samples before counting.
    pub terminated_only: bool,
}

impl Default for OverlapConfig {
    fn default() -> Self {
        OverlapConfig {
            trial_size: 0,
            terminated_only: true,
        }
    }
}

/// Every tunable of every command. Written back as `config.resolved`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainRunConfig,
    pub sample: SampleConfig,
    pub compare: CompareConfig,
    pub classifier: ClassifierConfig,
    pub cv: CvConfig,
    pub ppo: PpoConfig,
    pub rl: RlConfig,
    pub overlap: OverlapConfig,
}

const SEED_KEYS: [&str; 4] = ["train.seed", "sample.seed", "classifier.seed", "ppo.seed"];

fn config_err(key: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Reports the first key of `over` that has no counterpart in `base`.
fn check_known(base: &toml::Table, over: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get(k), v) {
            (None, _) => return Err(config_err(key, "unknown key")),
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => check_known(b, o, &key)?,
            (Some(toml::Value::Table(_)), _) => return Err(config_err(key, "expected a table")),
            _ => {}
        }
    }
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut cur = table;
    for p in parts {
        cur = match cur.get_mut(p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(config_err(key, "unknown key")),
        };
    }
    let value = match (cur.get(last), value) {
        (None, _) => return Err(config_err(key, "unknown key")),
        (Some(toml::Value::Table(_)), _) => return Err(config_err(key, "is a section")),
        // keep float keys floating when given an integer
        (Some(toml::Value::Float(_)), toml::Value::Integer(n)) => toml::Value::Float(n as f64),
        (Some(_), v) => v,
    };
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Sources merged in order: defaults, config file, environment, `--set`,
/// then `--seed`.
#[derive(Debug, Clone, Default)]
pub struct ConfigSources {
    pub file: Option<PathBuf>,
    pub env: Vec<(String, String)>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
}

impl ConfigSources {
    pub fn resolve(&self) -> Result<RunConfig> {
        let defaults = toml::Table::try_from(RunConfig::default()).map_err(|e| config_err("<defaults>", e.to_string()))?;
        let mut table = defaults.clone();
        if let Some(path) = &self.file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Table = toml::from_str(&text).map_err(|e| config_err(path.display().to_string(), e.to_string().replace('\n', " ")))?;
            check_known(&defaults, &file, "")?;
            merge(&mut table, file);
        }
        let mut env: Vec<&(String, String)> = self.env.iter().collect();
        env.sort();
        for (k, v) in env {
            let Some(rest) = k.strip_prefix(ENV_PREFIX) else { continue };
            if !rest.contains("__") {
                continue;
            }
            let key = rest.to_lowercase().replace("__", ".");
            set_key(&mut table, &key, parse_value(v))?;
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| config_err(s.clone(), "expected key=value"))?;
            set_key(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        if let Some(seed) = self.seed {
            for k in SEED_KEYS {
                set_key(&mut table, k, toml::Value::Integer(seed as i64))?;
            }
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| config_err("config", e.to_string().replace('\n', " ")))?;
        cfg.model.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "tcrgpt", version, about = "Generative language model for TCR CDR3 sequences")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "TCRGPT_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run directory for all outputs.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Seed applied to every seeded stage.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a repertoire file.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Log probability of each sequence in a file.
    Logprob {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequences: PathBuf,
    },
    /// Draw sequences from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Inferred versus observed probabilities on a test repertoire.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Pairwise divergences between checkpoints.
    Divmatrix {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long = "eval", required = true)]
        evals: Vec<PathBuf>,
        #[arg(long = "label")]
        labels: Vec<String>,
    },
    /// Flattened hidden features for each sequence.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequences: PathBuf,
    },
    /// Cross-validated classification of labeled sequences.
    Classify {
        #[command(flatten)]
        common: Common,
        /// `sequence<TAB>0|1` file.
        #[arg(long)]
        labels: PathBuf,
        /// Precomputed feature CSV.
        #[arg(long, conflicts_with = "checkpoint")]
        features: Option<PathBuf>,
        /// Extract features with this checkpoint. Without this or
        /// `--features`, a model is first trained on the positives.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint toward a peptide-binding reward.
    RlFinetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        peptide: Option<String>,
        /// Use the built-in motif reward instead of a remote scorer.
        #[arg(long)]
        motif: bool,
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Share of generated sequences found in a known set, per trial.
    Overlap {
        #[command(flatten)]
        common: Common,
        /// Sample file or repertoire file.
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        known: PathBuf,
    },
    /// Serve the reward protocol locally.
    MockScorer {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// constant:<v>, motif[:k], wrong-length, out-of-range, status:<code>,
        /// delay:<ms>:<behavior>
        #[arg(long, default_value = "motif:3")]
        behavior: String,
    },
}

/// An open run directory.
struct Run {
    dir: PathBuf,
    started: u64,
    command: String,
    threads: usize,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Run {
    fn open(common: &Common, command: &str, threads: usize) -> Result<(Run, RunConfig)> {
        let cfg = ConfigSources {
            file: common.config.clone(),
            env: std::env::vars().collect(),
            sets: common.sets.clone(),
            seed: common.seed,
        }
        .resolve()?;
        let run = Run {
            dir: common.out.clone(),
            started: unix_now(),
            command: command.to_string(),
            threads,
        };
        let text = toml::to_string(&cfg).map_err(|e| config_err("config", e.to_string()))?;
        write_atomic(&run.dir.join("config.resolved"), text.as_bytes())?;
        Ok((run, cfg))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn metric(&self, name: &str) -> PathBuf {
        self.dir.join("metrics").join(name)
    }

    fn finish(self) -> Result<()> {
        let meta = format!(
            "command = {}\nversion = {}\nthreads = {}\nstarted = {}\nfinished = {}\n",
            self.command,
            env!("CARGO_PKG_VERSION"),
            self.threads,
            self.started,
            unix_now()
        );
        write_atomic(&self.dir.join("meta.txt"), meta.as_bytes())
    }
}

fn read_sequences(path: &Path) -> Result<Vec<TcrSequence>> {
    Ok(load_repertoire(path)?.entries().iter().map(|e| e.0.clone()).collect())
}

/// Repertoire from a sample file (`!`-marked lines optional) or a plain
/// repertoire file.
fn read_generated(path: &Path, terminated_only: bool) -> Result<Vec<TcrSequence>> {
    let samples = load_samples(path)?;
    Ok(samples
        .into_iter()
        .filter(|s| s.terminated || !terminated_only)
        .map(|s| s.sequence)
        .collect())
}

fn train_cmd(run: &Run, cfg: &RunConfig, corpus: &Path, init_from: Option<&Path>) -> Result<()> {
    let corpus = load_repertoire_with_limit(corpus, cfg.model.max_residues())?;
    let start = match init_from {
        Some(p) => load_checkpoint(p)?,
        None => init(cfg.model, cfg.train.seed)?,
    };
    let train_cfg = TrainRunConfig {
        max_len: cfg.train.max_len.min(start.config.max_len),
        ..cfg.train
    };
    let (params, trace) = train_with(&corpus, &train_cfg, start, |_, _| {})?;
    write_csv(
        &run.metric("loss.csv"),
        &["step", "nll_per_token"],
        trace.points.iter().map(|(s, l)| [s.to_string(), l.to_string()]),
    )?;
    save_checkpoint(&params, run.path("checkpoint.tcrg"))?;
    println!(
        "trained {} steps, final nll/token {:.4}, checkpoint {}",
        trace.points.last().map_or(0, |p| p.0 + 1),
        trace.last().unwrap_or(f64::NAN),
        checkpoint_id(&params)
    );
    Ok(())
}

fn logprob_cmd(run: &Run, checkpoint: &Path, sequences: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let seqs = read_sequences(sequences)?;
    let lps = log_probs(&params, &seqs)?;
    write_csv(
        &run.metric("logprob.csv"),
        &["sequence", "log_prob", "log10_prob", "nll_per_token"],
        seqs.iter().zip(&lps).map(|(s, lp)| {
            [
                s.to_string(),
                lp.to_string(),
                (lp / std::f64::consts::LN_10).to_string(),
                (-lp / (s.len() + 1) as f64).to_string(),
            ]
        }),
    )?;
    let tokens: usize = seqs.iter().map(|s| s.len() + 1).sum();
    println!("mean nll/token {:.4} over {} sequences", -lps.iter().sum::<f64>() / tokens as f64, seqs.len());
    Ok(())
}

fn sample_cmd(run: &Run, cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let sc = &cfg.sample;
    let max_len = sc.max_len.min(params.config.max_len);
    let samples = sample(&params, sc.n, max_len, sc.seed, sc.temperature)?;
    let header = SampleHeader {
        seed: sc.seed,
        temperature: sc.temperature,
        checkpoint: checkpoint_id(&params),
    };
    let mut buf = Vec::new();
    write_samples(&mut buf, &header, &samples).map_err(|e| Error::io(run.path("samples.txt"), e))?;
    write_atomic(&run.path("samples.txt"), &buf)?;
    let unterminated = samples.iter().filter(|s| !s.terminated).count();
    println!("{} samples, {} unterminated", samples.len(), unterminated);
    Ok(())
}

fn compare_cmd(run: &Run, cfg: &RunConfig, checkpoint: &Path, test: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let test = load_repertoire(test)?;
    let c = concordance(&params, &test, cfg.compare.min_count)?;
    let d = model_vs_data_divergence(&params, &test)?;
    write_concordance_csv(&run.metric("concordance.csv"), &c)?;
    write_csv(
        &run.metric("compare.csv"),
        &["pearson_log10", "d_js"],
        [[c.pearson_log10.to_string(), d.to_string()]],
    )?;
    println!("pearson_log10 {:.4} d_js {:.4}", c.pearson_log10, d);
    Ok(())
}

fn divmatrix_cmd(run: &Run, checkpoints: &[PathBuf], evals: &[PathBuf], labels: &[String]) -> Result<()> {
    if checkpoints.len() != evals.len() {
        return Err(config_err("eval", format!("{} checkpoints but {} eval sets", checkpoints.len(), evals.len())));
    }
    let labels: Vec<String> = if labels.is_empty() {
        evals
            .iter()
            .map(|p| p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()))
            .collect()
    } else if labels.len() == checkpoints.len() {
        labels.to_vec()
    } else {
        return Err(config_err("label", "one label per checkpoint"));
    };
    let params: Vec<TransformerParams> = checkpoints.iter().map(load_checkpoint).collect::<Result<_>>()?;
    let sets: Vec<Repertoire> = evals.iter().map(load_repertoire).collect::<Result<_>>()?;
    let m = divergence_matrix(&labels, &params, &sets)?;
    m.write_csv(&run.metric("divergence.csv"))?;
    println!("{n}x{n} divergence matrix written", n = m.n());
    Ok(())
}

fn features_cmd(run: &Run, checkpoint: &Path, sequences: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let seqs = read_sequences(sequences)?;
    let f = extract_features(&params, &seqs)?;
    write_features_csv(&run.metric("features.csv"), &f)?;
    println!("{} feature vectors of width {}", f.len(), f.first().map_or(0, |v| v.values.len()));
    Ok(())
}

fn classify_cmd(run: &Run, cfg: &RunConfig, labels: &Path, features: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let labeled = load_labels(labels)?;
    let seqs: Vec<TcrSequence> = labeled.iter().map(|l| l.0.clone()).collect();
    let ys: Vec<bool> = labeled.iter().map(|l| l.1).collect();
    let feats: Vec<FeatureVector> = match (features, checkpoint) {
        (Some(f), _) => {
            let all = read_features_csv(f)?;
            let by_id: std::collections::HashMap<&str, &FeatureVector> = all.iter().map(|v| (v.id.as_str(), v)).collect();
            seqs.iter()
                .map(|s| {
                    by_id
                        .get(s.as_str())
                        .map(|v| (*v).clone())
                        .ok_or_else(|| config_err("features", format!("no features for {s}")))
                })
                .collect::<Result<_>>()?
        }
        (None, Some(c)) => extract_features(&load_checkpoint(c)?, &seqs)?,
        (None, None) => {
            let positives = Repertoire::from_sequences("positives", labeled.iter().filter(|l| l.1).map(|l| l.0.clone()));
            let train_cfg = TrainRunConfig {
                max_len: cfg.train.max_len.min(cfg.model.max_len),
                ..cfg.train
            };
            let (params, _) = train_with(&positives, &train_cfg, init(cfg.model, cfg.train.seed)?, |_, _| {})?;
            save_checkpoint(&params, run.path("checkpoint.tcrg"))?;
            extract_features(&params, &seqs)?
        }
    };
    let report = kfold_cv(&feats, &ys, cfg.cv.folds, &ClassifierConfig { ..cfg.classifier })?;
    let mut rows: Vec<[String; 2]> = report
        .fold_aucs
        .iter()
        .enumerate()
        .map(|(i, a)| [i.to_string(), a.to_string()])
        .collect();
    rows.push(["mean".into(), report.mean_auc.to_string()]);
    rows.push(["std".into(), report.std_auc.to_string()]);
    write_csv(&run.metric("cv.csv"), &["fold", "auc"], rows)?;
    println!("auc {:.4} ± {:.4}", report.mean_auc, report.std_auc);
    Ok(())
}

fn rl_cmd(run: &Run, cfg: &RunConfig, checkpoint: &Path, motif: bool) -> Result<()> {
    let actor = load_checkpoint(checkpoint)?;
    if cfg.rl.peptide.is_empty() {
        return Err(config_err("rl.peptide", "a peptide is required"));
    }
    let peptide = Peptide::new(cfg.rl.peptide.as_str())?;
    let scorer: Box<dyn RewardScorer> = if motif {
        Box::new(MotifReward::from_peptide(&peptide, cfg.rl.motif_k)?)
    } else {
        if cfg.rl.endpoint.is_empty() {
            return Err(config_err("rl.endpoint", "pass --endpoint or --motif"));
        }
        let secs = |v: f64, key: &str| {
            Duration::try_from_secs_f64(v).map_err(|_| config_err(key, "must be a non-negative duration"))
        };
        Box::new(RemoteScorer {
            endpoint: cfg.rl.endpoint.clone(),
            timeout: secs(cfg.rl.timeout_secs, "rl.timeout_secs")?,
            retries: cfg.rl.retries,
            backoff_base: secs(cfg.rl.backoff_secs, "rl.backoff_secs")?,
        })
    };
    let critic = match cfg.rl.critic_init.as_str() {
        "actor" => CriticParams::from_actor(&actor, cfg.ppo.seed),
        "fresh" => CriticParams::fresh(actor.config, cfg.ppo.seed)?,
        other => return Err(config_err("rl.critic_init", format!("{other:?} is not actor or fresh"))),
    };
    let ppo = PpoConfig {
        max_len: cfg.ppo.max_len.min(actor.config.max_len),
        ..cfg.ppo
    };
    let mut trainer = PpoTrainer::new(actor, critic, ppo)?;
    let trace = trainer.run(scorer.as_ref(), &peptide, |_| {})?;
    trace.write_csv(&run.metric("rl_trace.csv"))?;
    save_checkpoint(&trainer.actor, run.path("checkpoint.tcrg"))?;
    if let (Some(first), Some(last)) = (trace.records.first(), trace.records.last()) {
        println!("binding {:.3} -> {:.3} over {} iterations", first.binding_pct, last.binding_pct, trace.records.len());
    }
    Ok(())
}

fn overlap_cmd(run: &Run, cfg: &RunConfig, generated: &Path, known: &Path) -> Result<()> {
    let gen = read_generated(generated, cfg.overlap.terminated_only)?;
    let known: HashSet<TcrSequence> = read_sequences(known)?.into_iter().collect();
    if gen.is_empty() {
        return Err(Error::EmptyGenerated);
    }
    let size = if cfg.overlap.trial_size == 0 { gen.len() } else { cfg.overlap.trial_size };
    let props: Vec<f64> = gen
        .chunks(size)
        .filter(|c| c.len() == size)
        .map(|c| overlap_fraction(c, &known))
        .collect::<Result<_>>()?;
    if props.is_empty() {
        return Err(config_err("overlap.trial_size", format!("larger than the {} generated sequences", gen.len())));
    }
    write_overlap_trials(&run.metric("overlap.csv"), &props)?;
    let mean = props.iter().sum::<f64>() / props.len() as f64;
    println!("{} trials, mean overlap {:.4}", props.len(), mean);
    Ok(())
}

fn apply_flag<T: ToString>(sets: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        sets.push(format!("{key}={}", toml_literal(&v.to_string())));
    }
}

fn toml_literal(s: &str) -> String {
    if s.parse::<f64>().is_ok() {
        s.to_string()
    } else {
        format!("{s:?}")
    }
}

/// Runs a parsed command line.
pub fn execute(cli: Cli) -> Result<()> {
    let threads = cli.threads.unwrap_or_else(rayon::current_num_threads);
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match cli.command {
        Command::MockScorer { addr, behavior } => {
            let server = MockServer::start(&addr, MockBehavior::parse(&behavior)?)?;
            println!("listening on {}", server.endpoint());
            server.join();
            Ok(())
        }
        Command::Train { common, corpus, init } => {
            let (run, cfg) = Run::open(&common, "train", threads)?;
            train_cmd(&run, &cfg, &corpus, init.as_deref())?;
            run.finish()
        }
        Command::Logprob { common, checkpoint, sequences } => {
            let (run, _) = Run::open(&common, "logprob", threads)?;
            logprob_cmd(&run, &checkpoint, &sequences)?;
            run.finish()
        }
        Command::Sample { mut common, checkpoint, n, temperature } => {
            apply_flag(&mut common.sets, "sample.n", n);
            apply_flag(&mut common.sets, "sample.temperature", temperature);
            let (run, cfg) = Run::open(&common, "sample", threads)?;
            sample_cmd(&run, &cfg, &checkpoint)?;
            run.finish()
        }
        Command::Compare { common, checkpoint, test } => {
            let (run, cfg) = Run::open(&common, "compare", threads)?;
            compare_cmd(&run, &cfg, &checkpoint, &test)?;
            run.finish()
        }
        Command::Divmatrix { common, checkpoints, evals, labels } => {
            let (run, _) = Run::open(&common, "divmatrix", threads)?;
            divmatrix_cmd(&run, &checkpoints, &evals, &labels)?;
            run.finish()
        }
        Command::Features { common, checkpoint, sequences } => {
            let (run, _) = Run::open(&common, "features", threads)?;
            features_cmd(&run, &checkpoint, &sequences)?;
            run.finish()
        }
        Command::Classify { common, labels, features, checkpoint } => {
            let (run, cfg) = Run::open(&common, "classify", threads)?;
            classify_cmd(&run, &cfg, &labels, features.as_deref(), checkpoint.as_deref())?;
            run.finish()
        }
        Command::RlFinetune { mut common, checkpoint, peptide, motif, endpoint } => {
            apply_flag(&mut common.sets, "rl.peptide", peptide);
            apply_flag(&mut common.sets, "rl.endpoint", endpoint);
            let (run, cfg) = Run::open(&common, "rl-finetune", threads)?;
            rl_cmd(&run, &cfg, &checkpoint, motif)?;
            run.finish()
        }
        Command::Overlap { common, generated, known } => {
            let (run, cfg) = Run::open(&common, "overlap", threads)?;
            overlap_cmd(&run, &cfg, &generated, &known)?;
            run.finish()
        }
    }
}

/// Parses `args` and runs; returns the process exit code. Failures print a
/// single line `error: <Category>: <message>` on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    return 0;
                }
                kind => {
                    let category = if kind == ErrorKind::InvalidSubcommand { "UnknownCommand" } else { "ConfigError" };
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                    eprintln!("error: {category}: {first}");
                    return 2;
                }
            }
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.to_string().replace('\n', " "));
            1
        }
    }
}
