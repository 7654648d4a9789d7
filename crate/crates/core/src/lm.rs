//! Language-model training, exact sequence likelihoods and sampling.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{validate_row, TransformerParams};
use crate::numerics::{adam_step, clip_grad_norm, log_sum_exp, AdamConfig, AdamState, Tape};
use crate::seqcore::{residue_id, Repertoire, TcrSequence, TokenId, EOS, FIRST_RESIDUE, SOS, VOCAB_SIZE};
use crate::{Error, Result};

/// Largest enumeration accepted by [`enumerate_probabilities`].
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Token budget per row, SOS and EOS included.
    pub max_len: usize,
    pub clip_norm: f64,
    /// Record the step loss every this many steps.
    pub report_every: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            batch_size: 32,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 0,
            max_len: 32,
            clip_norm: 1.0,
            report_every: 1,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.max_len < 3 {
            return bad("max_len", "must leave room for SOS, EOS and a residue");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be positive");
        }
        if self.report_every == 0 {
            return bad("report_every", "must be positive");
        }
        Ok(())
    }
}

/// Mean NLL per token (nats) at each reported step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub points: Vec<(usize, f64)>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    /// Mean loss over the first and last `frac` of reported points.
    pub fn head_tail_means(&self, frac: f64) -> Option<(f64, f64)> {
        let n = self.points.len();
        if n == 0 {
            return None;
        }
        let k = ((n as f64 * frac).ceil() as usize).clamp(1, n);
        let mean = |s: &[(usize, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
        Some((mean(&self.points[..k]), mean(&self.points[n - k..])))
    }
}

/// Teacher-forcing input and target rows for one sequence.
fn teacher_rows(seq: &TcrSequence) -> (Vec<TokenId>, Vec<TokenId>) {
    let ids = seq.residue_ids();
    let mut input = Vec::with_capacity(ids.len() + 1);
    input.push(SOS);
    input.extend_from_slice(&ids);
    let mut target = ids;
    target.push(EOS);
    (input, target)
}

/// Summed NLL over one sequence and, optionally, its parameter gradients.
fn sequence_nll(params: &TransformerParams, seq: &TcrSequence, grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let (input, target) = teacher_rows(seq);
    validate_row(&input, params.config.max_len)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, grads);
    let z = bound.trunk(&mut tape, &input)?;
    let logits = bound.project(&mut tape, z)?;
    let mask = vec![true; target.len()];
    let loss = tape.cross_entropy(logits, &target, &mask)?;
    let value = tape.scalar(loss);
    if !grads {
        return Ok((value, Vec::new()));
    }
    let leaves = bound.leaves();
    let mut g = tape.backward(loss)?;
    let out = leaves
        .iter()
        .zip(params.tensor_sizes())
        .map(|(&v, n)| g.take_or_zeros(v, n))
        .collect();
    Ok((value, out))
}

/// Mean per-token NLL and its gradient over a batch, reduced in batch order.
pub fn nll_gradients(params: &TransformerParams, batch: &[&TcrSequence]) -> Result<(f64, Vec<Vec<f64>>)> {
    let parts: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_iter()
        .map(|s| sequence_nll(params, s, true))
        .collect::<Result<_>>()?;
    let tokens: usize = batch.iter().map(|s| s.len() + 1).sum();
    let mut total = 0.0;
    let mut grads: Vec<Vec<f64>> = params.tensor_sizes().into_iter().map(|n| vec![0.0; n]).collect();
    for (loss, g) in parts {
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / tokens as f64;
    grads.iter_mut().flatten().for_each(|v| *v *= inv);
    Ok((total * inv, grads))
}

/// Fits `init` to the corpus by Adam on the per-token negative log likelihood.
///
/// Each step draws `batch_size` sequences with probability proportional to
/// their counts; one epoch is `ceil(total_mass / batch_size)` steps.
pub fn train(
    corpus: &Repertoire,
    config: &TrainRunConfig,
    init: TransformerParams,
) -> Result<(TransformerParams, LossTrace)> {
    train_with(corpus, config, init, |_, _| {})
}

/// [`train`] with a per-step callback receiving (step, loss).
pub fn train_with(
    corpus: &Repertoire,
    config: &TrainRunConfig,
    init: TransformerParams,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(TransformerParams, LossTrace)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let max_len = config.max_len.min(init.config.max_len);
    for (seq, _) in corpus.entries() {
        if seq.len() + 2 > max_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max_len,
            });
        }
    }
    let mass = corpus.total_mass();
    if config.batch_size as u64 > mass {
        return Err(Error::Config {
            key: "batch_size".into(),
            reason: format!("{} exceeds corpus size {mass}", config.batch_size),
        });
    }
    let mut params = init;
    let mut trace = LossTrace::default();
    if config.epochs == 0 {
        return Ok((params, trace));
    }

    let weights = WeightedIndex::new(corpus.entries().iter().map(|e| e.1))
        .map_err(|e| Error::Config {
            key: "corpus".into(),
            reason: e.to_string(),
        })?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = mass.div_ceil(config.batch_size as u64) as usize;
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut state = AdamState::new(params.tensor_sizes());
    let mut step = 0;
    for _ in 0..config.epochs {
        for _ in 0..steps_per_epoch {
            let batch: Vec<&TcrSequence> = (0..config.batch_size)
                .map(|_| &corpus.entries()[weights.sample(&mut rng)].0)
                .collect();
            let (loss, mut grads) = nll_gradients(&params, &batch)?;
            clip_grad_norm(&mut grads, config.clip_norm);
            {
                let mut bufs: Vec<&mut [f64]> = params.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
                adam_step(&mut bufs, &grads, &mut state, &adam)?;
            }
            if !params.all_finite() {
                return Err(Error::NonFiniteValue { op: "train" });
            }
            if step % config.report_every == 0 {
                trace.points.push((step, loss));
            }
            on_step(step, loss);
            step += 1;
        }
    }
    Ok((params, trace))
}

/// `log p(seq)` in nats, EOS factor included.
pub fn log_prob(params: &TransformerParams, seq: &TcrSequence) -> Result<f64> {
    if seq.len() + 2 > params.config.max_len {
        return Err(Error::TooLong {
            len: seq.len() + 2,
            max: params.config.max_len,
        });
    }
    Ok(-sequence_nll(params, seq, false)?.0)
}

/// [`log_prob`] over many sequences in parallel.
pub fn log_probs(params: &TransformerParams, seqs: &[TcrSequence]) -> Result<Vec<f64>> {
    seqs.par_iter().map(|s| log_prob(params, s)).collect()
}

/// Mean per-token NLL of a repertoire, weighted by counts.
pub fn corpus_nll_per_token(params: &TransformerParams, corpus: &Repertoire) -> Result<f64> {
    let seqs: Vec<TcrSequence> = corpus.entries().iter().map(|e| e.0.clone()).collect();
    let lps = log_probs(params, &seqs)?;
    let (mut nll, mut tokens) = (0.0, 0.0);
    for ((seq, count), lp) in corpus.entries().iter().zip(lps) {
        nll -= *count as f64 * lp;
        tokens += (*count as f64) * (seq.len() + 1) as f64;
    }
    if tokens == 0.0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(nll / tokens)
}

/// Next-token log probabilities after `prefix` (which starts with SOS), over
/// the full 23-column vocabulary. Masked columns hold `-inf`.
pub fn next_log_probs(params: &TransformerParams, prefix: &[TokenId], temperature: f64) -> Result<Vec<f64>> {
    validate_row(prefix, params.config.max_len)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let z = bound.trunk(&mut tape, prefix)?;
    let last = tape.slice_rows(z, prefix.len() - 1, prefix.len())?;
    let logits = bound.project(&mut tape, last)?;
    let mut row: Vec<f64> = tape.value(logits).iter().map(|v| v / temperature).collect();
    let lse = log_sum_exp(&row);
    row.iter_mut().for_each(|v| *v -= lse);
    Ok(row)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub sequence: TcrSequence,
    /// False when generation hit the length budget before EOS.
    pub terminated: bool,
}

/// Draws `n` sequences autoregressively from SOS.
///
/// Generation stops on EOS or after `max_len - 2` residues. Sample `i` uses
/// its own RNG stream, so results do not depend on thread count. Next-token
/// distributions are cached by prefix, which leaves the output unchanged.
pub fn sample(params: &TransformerParams, n: usize, max_len: usize, seed: u64, temperature: f64) -> Result<Vec<Sample>> {
    Sampler::new(params, max_len, temperature)?.draw(n, seed)
}

/// Prefix-caching sampler; reuse it across calls to keep the cache warm.
pub struct Sampler<'a> {
    params: &'a TransformerParams,
    max_residues: usize,
    temperature: f64,
    cache: HashMap<Vec<TokenId>, Vec<f64>>,
}

const CACHE_CAP: usize = 1 << 20;

impl<'a> Sampler<'a> {
    pub fn new(params: &'a TransformerParams, max_len: usize, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config {
                key: "temperature".into(),
                reason: format!("must be positive, got {temperature}"),
            });
        }
        if max_len < 2 || max_len > params.config.max_len {
            return Err(Error::Config {
                key: "max_len".into(),
                reason: format!("must be in 2..={}", params.config.max_len),
            });
        }
        Ok(Sampler {
            params,
            max_residues: max_len - 2,
            temperature,
            cache: HashMap::new(),
        })
    }

    /// Cumulative next-token distribution for each prefix, computing misses
    /// in parallel.
    fn fill(&mut self, prefixes: &[&Vec<TokenId>]) -> Result<()> {
        let mut missing: Vec<Vec<TokenId>> = prefixes
            .iter()
            .filter(|p| !self.cache.contains_key(p.as_slice()))
            .map(|p| (*p).clone())
            .collect();
        missing.sort_unstable();
        missing.dedup();
        if self.cache.len() + missing.len() > CACHE_CAP {
            self.cache.clear();
            return self.fill(prefixes);
        }
        let (params, temperature) = (self.params, self.temperature);
        let rows: Vec<Vec<f64>> = missing
            .par_iter()
            .map(|p| {
                let lp = next_log_probs(params, p, temperature)?;
                let mut acc = 0.0;
                Ok(lp
                    .iter()
                    .map(|v| {
                        acc += v.exp();
                        acc
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        self.cache.extend(missing.into_iter().zip(rows));
        Ok(())
    }

    pub fn draw(&mut self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        let mut rngs: Vec<ChaCha8Rng> = (0..n)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        let mut rows: Vec<Vec<TokenId>> = vec![vec![SOS]; n];
        let mut done = vec![false; n];
        let mut terminated = vec![false; n];
        for depth in 0..=self.max_residues {
            let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }
            if depth == self.max_residues {
                active.iter().for_each(|&i| done[i] = true);
                break;
            }
            let prefixes: Vec<&Vec<TokenId>> = active.iter().map(|&i| &rows[i]).collect();
            self.fill(&prefixes)?;
            for &i in &active {
                let cdf = &self.cache[&rows[i]];
                let u = rngs[i].random::<f64>() * cdf[VOCAB_SIZE - 1];
                let tok = cdf.iter().position(|&c| u < c).unwrap_or(VOCAB_SIZE - 1) as TokenId;
                if tok == EOS {
                    done[i] = true;
                    terminated[i] = true;
                } else {
                    rows[i].push(tok);
                }
            }
        }
        Ok(rows
            .into_iter()
            .zip(terminated)
            .map(|(row, terminated)| Sample {
                sequence: TcrSequence::from_residue_ids(&row[1..]),
                terminated,
            })
            .collect())
    }
}

/// Repertoire of the terminated samples only.
pub fn terminated_repertoire(source: impl Into<String>, samples: &[Sample]) -> Repertoire {
    Repertoire::from_sequences(
        source,
        samples.iter().filter(|s| s.terminated).map(|s| s.sequence.clone()),
    )
}

/// Fraction of samples that did not reach EOS.
pub fn non_termination_rate(samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| !s.terminated).count() as f64 / samples.len() as f64
}

/// Provenance recorded at the top of a sample file.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleHeader {
    pub seed: u64,
    pub temperature: f64,
    pub checkpoint: String,
}

/// One sequence per line; unterminated samples carry a leading `!`.
pub fn write_samples(mut out: impl Write, header: &SampleHeader, samples: &[Sample]) -> std::io::Result<()> {
    writeln!(
        out,
        "# seed={} temperature={} checkpoint={}",
        header.seed, header.temperature, header.checkpoint
    )?;
    for s in samples {
        let mark = if s.terminated { "" } else { "!" };
        writeln!(out, "{mark}{}", s.sequence)?;
    }
    Ok(())
}

pub fn read_samples(input: impl BufRead) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<samples>", e))?;
        let line = line.trim_end_matches('\r');
        if line.starts_with('#') {
            continue;
        }
        let (body, terminated) = match line.strip_prefix('!') {
            Some(rest) => (rest, false),
            None => (line, true),
        };
        let sequence = TcrSequence::new(body).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(Sample { sequence, terminated });
    }
    Ok(out)
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples(std::io::BufReader::new(f))
}

/// Exact probabilities over a restricted alphabet up to a residue budget.
#[derive(Debug, Clone)]
pub struct Enumeration {
    /// Every sequence over the alphabet with at most `max_residues` residues,
    /// shortest first, with its log probability.
    pub log_probs: Vec<(TcrSequence, f64)>,
    /// Mass of all outcomes not listed: a residue outside the alphabet, or
    /// more than `max_residues` residues.
    pub truncation_mass: f64,
}

impl Enumeration {
    pub fn probability(&self, seq: &str) -> Option<f64> {
        self.log_probs
            .iter()
            .find(|(s, _)| s.as_str() == seq)
            .map(|(_, lp)| lp.exp())
    }

    pub fn to_map(&self) -> HashMap<TcrSequence, f64> {
        self.log_probs.iter().map(|(s, lp)| (s.clone(), lp.exp())).collect()
    }

    /// Listed mass plus truncation mass; 1 up to rounding.
    pub fn total(&self) -> f64 {
        self.log_probs.iter().map(|(_, lp)| lp.exp()).sum::<f64>() + self.truncation_mass
    }
}

/// Enumerates `p(x)` for all sequences over `alphabet` of up to
/// `max_residues` residues.
pub fn enumerate_probabilities(params: &TransformerParams, alphabet: &[char], max_residues: usize) -> Result<Enumeration> {
    let mut ids: Vec<TokenId> = Vec::with_capacity(alphabet.len());
    for (position, &ch) in alphabet.iter().enumerate() {
        let id = residue_id(ch).ok_or(Error::InvalidResidue { ch, position })?;
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let k = ids.len() as u128;
    let mut count: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..=max_residues {
        count = count.saturating_add(level);
        level = level.saturating_mul(k);
        if count > ENUMERATION_LIMIT {
            return Err(Error::EnumerationTooLarge {
                count,
                limit: ENUMERATION_LIMIT,
            });
        }
    }
    if max_residues + 2 > params.config.max_len {
        return Err(Error::TooLong {
            len: max_residues + 2,
            max: params.config.max_len,
        });
    }

    let mut out = Vec::with_capacity(count as usize);
    let mut truncation = 0.0;
    let mut frontier: Vec<(Vec<TokenId>, f64)> = vec![(vec![SOS], 0.0)];
    for depth in 0..=max_residues {
        let dists: Vec<Vec<f64>> = frontier
            .par_iter()
            .map(|(p, _)| next_log_probs(params, p, 1.0))
            .collect::<Result<_>>()?;
        let mut next = Vec::with_capacity(frontier.len() * ids.len());
        for ((prefix, lp), dist) in frontier.into_iter().zip(dists) {
            let lp_eos = lp + dist[EOS as usize];
            out.push((TcrSequence::from_residue_ids(&prefix[1..]), lp_eos));
            let stay: f64 = if depth < max_residues {
                dist[EOS as usize].exp() + ids.iter().map(|&t| dist[t as usize].exp()).sum::<f64>()
            } else {
                dist[EOS as usize].exp()
            };
            truncation += lp.exp() * (1.0 - stay).max(0.0);
            if depth < max_residues {
                for &t in &ids {
                    let mut p = prefix.clone();
                    p.push(t);
                    next.push((p, lp + dist[t as usize]));
                }
            }
        }
        frontier = next;
    }
    Ok(Enumeration {
        log_probs: out,
        truncation_mass: truncation,
    })
}

/// Number of support symbols (residues plus EOS).
pub const SUPPORT_SIZE: usize = VOCAB_SIZE - FIRST_RESIDUE as usize + 1;
