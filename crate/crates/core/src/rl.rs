//! Peptide-targeted fine-tuning of the language model by sequence-level PPO,
//! with pluggable reward scorers.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ResponseFault;
use crate::io_util::write_csv;
use crate::lm::{log_probs, non_termination_rate, Sampler};
use crate::model::{init, ModelConfig, TransformerParams};
use crate::numerics::{adam_step, clip_grad_norm, AdamConfig, AdamState, Tape, Tensor};
use crate::seqcore::{residue_id, TcrSequence, TokenId, EOS, SOS};
use crate::{Error, Result};

/// Largest batch sent to a remote scorer in one request.
pub const MAX_REMOTE_BATCH: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Peptide(String);

impl Peptide {
    pub fn new(residues: impl Into<String>) -> Result<Self> {
        let s = residues.into();
        if let Some((position, ch)) = s.chars().enumerate().find(|(_, c)| residue_id(*c).is_none()) {
            return Err(Error::InvalidResidue { ch, position });
        }
        Ok(Peptide(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::fmt::Display for Peptide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Scores TCRs against a peptide: one value in `[0, 1]` per input.
pub trait RewardScorer {
    fn score(&self, peptide: &Peptide, tcrs: &[TcrSequence]) -> Result<Vec<f64>>;
}

impl<T: RewardScorer + ?Sized> RewardScorer for &T {
    fn score(&self, peptide: &Peptide, tcrs: &[TcrSequence]) -> Result<Vec<f64>> {
        (**self).score(peptide, tcrs)
    }
}

fn check_scores(scores: &[f64], expected: usize) -> Result<()> {
    if scores.len() != expected {
        return Err(Error::BadResponse {
            fault: ResponseFault::Shape,
            detail: format!("expected {expected} scores, got {}", scores.len()),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::BadResponse {
            fault: ResponseFault::Range,
            detail: format!("score {bad} outside [0, 1]"),
        });
    }
    Ok(())
}

/// Scorer call with length and range validation.
pub fn score_checked(scorer: &dyn RewardScorer, peptide: &Peptide, tcrs: &[TcrSequence]) -> Result<Vec<f64>> {
    let scores = scorer.score(peptide, tcrs)?;
    check_scores(&scores, tcrs.len())?;
    Ok(scores)
}

/// Synthetic binding model: the reward is the best fractional match of a
/// motif taken from the middle of the peptide.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotifReward {
    pub motif: String,
}

impl MotifReward {
    /// The middle `k` residues of `peptide`, starting at `(len - k) / 2`.
    pub fn from_peptide(peptide: &Peptide, k: usize) -> Result<Self> {
        if k == 0 || k > peptide.len() {
            return Err(Error::Config {
                key: "motif_k".into(),
                reason: format!("k={k} must be in 1..={}", peptide.len()),
            });
        }
        let start = (peptide.len() - k) / 2;
        Ok(MotifReward {
            motif: peptide.as_str()[start..start + k].to_string(),
        })
    }

    pub fn with_motif(motif: impl Into<String>) -> Result<Self> {
        let motif = motif.into();
        Peptide::new(motif.as_str())?;
        if motif.is_empty() {
            return Err(Error::Config {
                key: "motif".into(),
                reason: "empty motif".into(),
            });
        }
        Ok(MotifReward { motif })
    }
}

/// Max over length-k windows of the fraction of positions matching.
pub fn motif_score(m: &MotifReward, tcr: &TcrSequence) -> f64 {
    let motif = m.motif.as_bytes();
    let s = tcr.as_str().as_bytes();
    let k = motif.len();
    if k == 0 || s.len() < k {
        return 0.0;
    }
    let best = s
        .windows(k)
        .map(|w| w.iter().zip(motif).filter(|(a, b)| a == b).count())
        .max()
        .unwrap_or(0);
    best as f64 / k as f64
}

impl RewardScorer for MotifReward {
    fn score(&self, _peptide: &Peptide, tcrs: &[TcrSequence]) -> Result<Vec<f64>> {
        Ok(tcrs.iter().map(|t| motif_score(self, t)).collect())
    }
}

/// Returns the same value for every TCR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantReward(pub f64);

impl RewardScorer for ConstantReward {
    fn score(&self, _peptide: &Peptide, tcrs: &[TcrSequence]) -> Result<Vec<f64>> {
        Ok(vec![self.0; tcrs.len()])
    }
}

/// Wraps a scorer and counts calls.
pub struct CountingScorer<S> {
    pub inner: S,
    calls: AtomicUsize,
}

impl<S> CountingScorer<S> {
    pub fn new(inner: S) -> Self {
        CountingScorer {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<S: RewardScorer> RewardScorer for CountingScorer<S> {
    fn score(&self, peptide: &Peptide, tcrs: &[TcrSequence]) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(peptide, tcrs)
    }
}

#[derive(Serialize, Deserialize)]
struct ScoreRequest {
    peptide: String,
    tcrs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// HTTP client for an external binding predictor.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    /// Base URL, e.g. `http://127.0.0.1:8080`; requests go to `/score`.
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff_base: Duration,
}

impl RemoteScorer {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteScorer {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff_base: Duration::from_millis(500),
        }
    }

    fn url(&self) -> String {
        format!("{}/score", self.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, agent: &ureq::Agent, body: &str) -> Result<Vec<f64>> {
        let resp = agent
            .post(&self.url())
            .header("Content-Type", "application/json")
            .send(body);
        let mut resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Error::Timeout),
            Err(e @ (ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound)) => {
                return Err(Error::Unreachable(e.to_string()))
            }
            Err(e) => {
                return Err(Error::BadResponse {
                    fault: ResponseFault::Body,
                    detail: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => Error::Timeout,
            e => Error::BadResponse {
                fault: ResponseFault::Body,
                detail: e.to_string(),
            },
        })?;
        if status != 200 {
            return Err(Error::BadResponse {
                fault: ResponseFault::Status,
                detail: format!("HTTP {status}"),
            });
        }
        let parsed: ScoreResponse = serde_json::from_str(&text).map_err(|e| Error::BadResponse {
            fault: ResponseFault::Body,
            detail: e.to_string(),
        })?;
        Ok(parsed.scores)
    }
}

fn transient(e: &Error) -> bool {
    match e {
        Error::Unreachable(_) | Error::Timeout => true,
        Error::BadResponse {
            fault: ResponseFault::Status,
            detail,
        } => detail.starts_with("HTTP 5"),
        _ => false,
    }
}

/// Posts one batch, retrying connection failures, timeouts and 5xx
/// responses with exponential backoff.
pub fn remote_score(scorer: &RemoteScorer, peptide: &Peptide, tcrs: &[TcrSequence]) -> Result<Vec<f64>> {
    if tcrs.len() > MAX_REMOTE_BATCH {
        return Err(Error::Config {
            key: "batch_size".into(),
            reason: format!("{} exceeds remote limit {MAX_REMOTE_BATCH}", tcrs.len()),
        });
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(scorer.timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let body = serde_json::to_string(&ScoreRequest {
        peptide: peptide.to_string(),
        tcrs: tcrs.iter().map(|t| t.to_string()).collect(),
    })
    .expect("request serializes");
    let mut attempt = 0;
    loop {
        match scorer.attempt(&agent, &body) {
            Ok(scores) => {
                check_scores(&scores, tcrs.len())?;
                return Ok(scores);
            }
            Err(e) if transient(&e) && attempt < scorer.retries => {
                std::thread::sleep(scorer.backoff_base * 2u32.pow(attempt));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

impl RewardScorer for RemoteScorer {
    fn score(&self, peptide: &Peptide, tcrs: &[TcrSequence]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(tcrs.len());
        for chunk in tcrs.chunks(MAX_REMOTE_BATCH) {
            out.extend(remote_score(self, peptide, chunk)?);
        }
        Ok(out)
    }
}

/// What the bundled mock scorer does with each request.
#[derive(Debug, Clone, PartialEq)]
pub enum MockBehavior {
    Constant(f64),
    /// Motif reward with the middle `k` residues of the request's peptide.
    Motif(usize),
    /// Returns one score too few.
    WrongLength,
    /// Returns 1.3 for every TCR.
    OutOfRange,
    /// Replies with this status and an empty JSON object.
    Status(u16),
    /// Sleeps before answering like the inner behavior.
    Delay(Duration, Box<MockBehavior>),
}

impl MockBehavior {
    fn respond(&self, req: &ScoreRequest) -> (u16, String) {
        let n = req.tcrs.len();
        let body = |scores: Vec<f64>| serde_json::to_string(&ScoreResponse { scores }).expect("serializes");
        match self {
            MockBehavior::Constant(c) => (200, body(vec![*c; n])),
            MockBehavior::WrongLength => (200, body(vec![0.5; n.saturating_sub(1)])),
            MockBehavior::OutOfRange => (200, body(vec![1.3; n])),
            MockBehavior::Status(code) => (*code, "{}".into()),
            MockBehavior::Delay(d, inner) => {
                std::thread::sleep(*d);
                inner.respond(req)
            }
            MockBehavior::Motif(k) => {
                let scored = Peptide::new(req.peptide.as_str())
                    .and_then(|p| MotifReward::from_peptide(&p, *k))
                    .and_then(|m| {
                        req.tcrs
                            .iter()
                            .map(|t| Ok(motif_score(&m, &TcrSequence::new(t.as_str())?)))
                            .collect::<Result<Vec<f64>>>()
                    });
                match scored {
                    Ok(s) => (200, body(s)),
                    Err(e) => (400, format!("{{\"error\":{:?}}}", e.to_string())),
                }
            }
        }
    }

    /// Parses `constant:0.7`, `motif:3`, `wrong-length`, `out-of-range`,
    /// `status:503` or `delay:<ms>:<inner>`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config {
            key: "behavior".into(),
            reason: format!("unrecognized mock behavior {s:?}"),
        };
        let (head, rest) = s.split_once(':').unwrap_or((s, ""));
        Ok(match head {
            "constant" => MockBehavior::Constant(rest.parse().map_err(|_| bad())?),
            "motif" => MockBehavior::Motif(if rest.is_empty() { 3 } else { rest.parse().map_err(|_| bad())? }),
            "wrong-length" => MockBehavior::WrongLength,
            "out-of-range" => MockBehavior::OutOfRange,
            "status" => MockBehavior::Status(rest.parse().map_err(|_| bad())?),
            "delay" => {
                let (ms, inner) = rest.split_once(':').ok_or_else(bad)?;
                let ms: u64 = ms.parse().map_err(|_| bad())?;
                MockBehavior::Delay(Duration::from_millis(ms), Box::new(MockBehavior::parse(inner)?))
            }
            _ => return Err(bad()),
        })
    }
}

fn write_response(stream: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

fn handle_connection(mut stream: TcpStream, behavior: &MockBehavior) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut head = Vec::new();
    while !head.ends_with(b"\r\n\r\n") {
        if reader.read_until(b'\n', &mut head)? == 0 {
            return Ok(());
        }
    }
    let mut headers = [httparse::EMPTY_HEADER; 32];
    let mut req = httparse::Request::new(&mut headers);
    if !matches!(req.parse(&head), Ok(httparse::Status::Complete(_))) {
        return write_response(&mut stream, 400, "{}");
    }
    let len = req
        .headers
        .iter()
        .find(|h| h.name.eq_ignore_ascii_case("content-length"))
        .and_then(|h| std::str::from_utf8(h.value).ok()?.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if req.method != Some("POST") || req.path != Some("/score") {
        return write_response(&mut stream, 404, "{}");
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body)?;
    match serde_json::from_slice::<ScoreRequest>(&body) {
        Ok(r) => {
            let (status, text) = behavior.respond(&r);
            write_response(&mut stream, status, &text)
        }
        Err(e) => write_response(&mut stream, 400, &format!("{{\"error\":{:?}}}", e.to_string())),
    }
}

/// Reward server speaking the scoring protocol, for tests and local runs.
pub struct MockServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves on a
    /// background thread until dropped.
    pub fn start(addr: &str, behavior: MockBehavior) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::io(addr, e))?;
        let local = listener.local_addr().map_err(|e| Error::io(addr, e))?;
        listener.set_nonblocking(true).map_err(|e| Error::io(addr, e))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            let behavior = Arc::new(behavior);
            while !flag.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let b = behavior.clone();
                        std::thread::spawn(move || {
                            let _ = handle_connection(stream, &b);
                        });
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(MockServer {
            addr: local,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server thread exits (it only does on error).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// `min(ratio·A, g(ε, A))` with `g = (1+ε)A` for `A ≥ 0` and `(1−ε)A`
/// otherwise.
pub fn clipped_objective(ratio: f64, advantage: f64, eps: f64) -> Result<f64> {
    if !(ratio > 0.0) {
        return Err(Error::NonPositiveRatio(ratio));
    }
    Ok((ratio * advantage).min(clip_envelope(advantage, eps)))
}

fn clip_envelope(advantage: f64, eps: f64) -> f64 {
    if advantage >= 0.0 {
        (1.0 + eps) * advantage
    } else {
        (1.0 - eps) * advantage
    }
}

/// Reward minus critic value, elementwise.
pub fn advantage(rewards: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::LengthMismatch {
            left: rewards.len(),
            right: values.len(),
        });
    }
    Ok(rewards.iter().zip(values).map(|(r, v)| r - v).collect())
}

/// Share of scores strictly above `threshold`.
pub fn binding_percentage(scores: &[f64], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    Ok(scores.iter().filter(|&&s| s > threshold).count() as f64 / scores.len() as f64)
}

/// Value network: a transformer trunk like the actor's plus a linear head
/// read at the EOS position.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub trunk: TransformerParams,
    /// `d_model × 1`.
    pub head_w: Tensor,
    /// `[1]`.
    pub head_b: Tensor,
}

impl CriticParams {
    /// Trunk copied from the actor, head drawn from N(0, 0.02²).
    pub fn from_actor(actor: &TransformerParams, seed: u64) -> Self {
        let d = actor.config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 0.02).expect("positive std");
        CriticParams {
            trunk: actor.clone(),
            head_w: Tensor::from_fn(&[d, 1], |_| n.sample(&mut rng)).with_grad(),
            head_b: Tensor::zeros(&[1]).with_grad(),
        }
    }

    /// Freshly initialized trunk.
    pub fn fresh(config: ModelConfig, seed: u64) -> Result<Self> {
        let trunk = init(config, seed)?;
        Ok(CriticParams::from_actor(&trunk, seed.wrapping_add(1)))
    }

    /// Outputs exactly `c` for every sequence (zero head weights).
    pub fn constant(trunk: TransformerParams, c: f64) -> Self {
        let d = trunk.config.d_model;
        CriticParams {
            trunk,
            head_w: Tensor::zeros(&[d, 1]).with_grad(),
            head_b: Tensor::full(&[1], c).with_grad(),
        }
    }

    fn tensor_sizes(&self) -> Vec<usize> {
        let mut s = self.trunk.tensor_sizes();
        s.extend([self.head_w.numel(), self.head_b.numel()]);
        s
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.trunk.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
        out.push(self.head_w.data_mut());
        out.push(self.head_b.data_mut());
        out
    }

    pub fn flat_values(&self) -> Vec<Vec<f64>> {
        let mut v = self.trunk.flat_values();
        v.push(self.head_w.data().to_vec());
        v.push(self.head_b.data().to_vec());
        v
    }

    pub fn with_flat_values(&self, values: &[Vec<f64>]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::shape("with_flat_values", &[self.tensor_sizes().len()], &[n]));
        }
        let mut out = CriticParams {
            trunk: self.trunk.with_flat_values(&values[..n - 2])?,
            ..self.clone()
        };
        for (t, v) in [&mut out.head_w, &mut out.head_b].into_iter().zip(&values[n - 2..]) {
            if t.numel() != v.len() {
                return Err(Error::shape("with_flat_values", t.shape(), &[v.len()]));
            }
            t.data_mut().copy_from_slice(v);
        }
        Ok(out)
    }

    /// Squared error `(V(x) - target)²` for one sequence, optionally with
    /// gradients in [`CriticParams::flat_values`] order.
    fn squared_error(&self, seq: &TcrSequence, target: f64, grads: bool) -> Result<(f64, f64, Vec<Vec<f64>>)> {
        let tokens = eos_row(seq);
        let mut tape = Tape::new();
        let bound = self.trunk.bind(&mut tape, grads);
        let (w, b) = if grads {
            (tape.leaf(&self.head_w), tape.leaf(&self.head_b))
        } else {
            (tape.leaf_frozen(&self.head_w), tape.leaf_frozen(&self.head_b))
        };
        let z = bound.trunk(&mut tape, &tokens)?;
        let last = tape.slice_rows(z, tokens.len() - 1, tokens.len())?;
        let v = tape.matmul(last, w)?;
        let v = tape.add_bias(v, b)?;
        let value = tape.scalar(v);
        let diff = tape.add_scalar(v, -target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.sum(sq)?;
        let err = tape.scalar(loss);
        if !grads {
            return Ok((value, err, Vec::new()));
        }
        let mut leaves = bound.leaves();
        leaves.extend([w, b]);
        let mut g = tape.backward(loss)?;
        let out = leaves
            .iter()
            .zip(self.tensor_sizes())
            .map(|(&v, n)| g.take_or_zeros(v, n))
            .collect();
        Ok((value, err, out))
    }

    pub fn values(&self, seqs: &[TcrSequence]) -> Result<Vec<f64>> {
        seqs.par_iter()
            .map(|s| self.squared_error(s, 0.0, false).map(|r| r.0))
            .collect()
    }
}

fn eos_row(seq: &TcrSequence) -> Vec<TokenId> {
    let mut row = vec![SOS];
    row.extend(seq.residue_ids());
    row.push(EOS);
    row
}

/// Sums per-sequence gradient lists in index order.
fn reduce_grads(parts: Vec<Vec<Vec<f64>>>, sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    for g in parts {
        for (a, gi) in acc.iter_mut().zip(g) {
            a.iter_mut().zip(gi).for_each(|(x, y)| *x += y);
        }
    }
    acc
}

/// Mean squared error of the critic and its gradients.
pub fn critic_loss_and_gradients(
    critic: &CriticParams,
    seqs: &[TcrSequence],
    targets: &[f64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if seqs.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: seqs.len(),
            right: targets.len(),
        });
    }
    let parts: Vec<(f64, f64, Vec<Vec<f64>>)> = seqs
        .par_iter()
        .zip(targets)
        .map(|(s, &t)| critic.squared_error(s, t, true))
        .collect::<Result<_>>()?;
    let inv = 1.0 / seqs.len() as f64;
    let loss = parts.iter().map(|p| p.1).sum::<f64>() * inv;
    let mut g = reduce_grads(parts.into_iter().map(|p| p.2).collect(), &critic.tensor_sizes());
    g.iter_mut().flatten().for_each(|v| *v *= inv);
    Ok((loss, g))
}

pub fn critic_loss(critic: &CriticParams, seqs: &[TcrSequence], targets: &[f64]) -> Result<f64> {
    let errs: Vec<f64> = seqs
        .par_iter()
        .zip(targets)
        .map(|(s, &t)| critic.squared_error(s, t, false).map(|r| r.1))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / seqs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    /// Sequences collected and scored per iteration.
    pub batch_size: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub actor_lr: f64,
    /// Kept well below `actor_lr`: the critic sees the whole sequence, so a
    /// fast critic learns the reward itself and the advantage goes to noise.
    pub critic_lr: f64,
    pub entropy_coef: f64,
    /// Weight of the `log p_θ(x) − log p_ref(x)` penalty; 0 disables it.
    pub kl_coef: f64,
    pub normalize_advantages: bool,
    pub iterations: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Fresh samples scored per iteration for the binding percentage, drawn
    /// with the same seed every iteration; 0 reuses the training batch.
    pub eval_samples: usize,
    /// Token budget for sampling, SOS and EOS included.
    pub max_len: usize,
    pub clip_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            batch_size: 256,
            epochs: 4,
            minibatch_size: 64,
            actor_lr: 1e-5,
            critic_lr: 1e-6,
            entropy_coef: 0.01,
            kl_coef: 0.0,
            normalize_advantages: true,
            iterations: 200,
            seed: 0,
            threshold: 0.5,
            eval_samples: 1000,
            max_len: 32,
            clip_norm: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps", "must be in (0, 1)");
        }
        if self.batch_size == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return bad("batch_size", "sizes and epochs must be positive");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("actor_lr", "learning rates must be positive");
        }
        if !(self.entropy_coef >= 0.0 && self.kl_coef >= 0.0) {
            return bad("entropy_coef", "coefficients must be non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be positive");
        }
        Ok(())
    }
}

/// Statistics of one PPO iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RlRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    /// Binding percentage of the actor at the start of the iteration.
    pub binding_pct: f64,
    /// Mean raw advantage before normalization.
    pub mean_advantage: f64,
    pub clip_fraction: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Share of first-round samples that reached EOS.
    pub termination_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RlTrace {
    pub records: Vec<RlRecord>,
}

impl RlTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &[
                "iteration",
                "mean_reward",
                "binding_pct",
                "clip_fraction",
                "actor_loss",
                "critic_loss",
                "mean_advantage",
                "termination_rate",
            ],
            self.records.iter().map(|r| {
                [
                    r.iteration.to_string(),
                    r.mean_reward.to_string(),
                    r.binding_pct.to_string(),
                    r.clip_fraction.to_string(),
                    r.actor_loss.to_string(),
                    r.critic_loss.to_string(),
                    r.mean_advantage.to_string(),
                    r.termination_rate.to_string(),
                ]
            }),
        )
    }
}

fn iteration_seed(seed: u64, iteration: usize, salt: u64) -> u64 {
    let mut z = seed ^ salt ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `n` terminated samples, topping up unterminated draws. Returns the
/// sequences and the first-round termination rate.
pub fn sample_terminated(actor: &TransformerParams, n: usize, max_len: usize, seed: u64) -> Result<(Vec<TcrSequence>, f64)> {
    let mut sampler = Sampler::new(actor, max_len, 1.0)?;
    let first = sampler.draw(n, seed)?;
    let rate = 1.0 - non_termination_rate(&first);
    if rate < 0.1 {
        return Err(Error::NonTermination { rate: 1.0 - rate });
    }
    let mut out: Vec<TcrSequence> = first.into_iter().filter(|s| s.terminated).map(|s| s.sequence).collect();
    let mut round = 1;
    while out.len() < n {
        let more = sampler.draw(n - out.len(), iteration_seed(seed, round, 0x7e5a))?;
        out.extend(more.into_iter().filter(|s| s.terminated).map(|s| s.sequence));
        round += 1;
    }
    Ok((out, rate))
}

/// Actor loss terms for one sequence: `-(clipped + β·H − κ·kl) / m`.
struct ActorTerm {
    loss: f64,
    clipped: bool,
    grads: Vec<Vec<f64>>,
}

fn actor_term(
    actor: &TransformerParams,
    seq: &TcrSequence,
    old_logp: f64,
    adv: f64,
    ref_logp: Option<f64>,
    cfg: &PpoConfig,
    m: usize,
) -> Result<ActorTerm> {
    let mut input = vec![SOS];
    input.extend(seq.residue_ids());
    let mut target = seq.residue_ids();
    target.push(EOS);
    let mut tape = Tape::new();
    let bound = actor.bind(&mut tape, true);
    let z = bound.trunk(&mut tape, &input)?;
    let logits = bound.project(&mut tape, z)?;
    let nll = tape.cross_entropy(logits, &target, &vec![true; target.len()])?;
    // log ratio = logp - old = -nll - old
    let log_ratio = tape.scale(nll, -1.0)?;
    let log_ratio = tape.add_scalar(log_ratio, -old_logp)?;
    let ratio = tape.exp(log_ratio)?;
    let ratio_value = tape.scalar(ratio);
    let surrogate = tape.scale(ratio, adv)?;
    let envelope = clip_envelope(adv, cfg.clip_eps);
    let clipped = ratio_value * adv > envelope;
    let mut objective = tape.min_scalar(surrogate, envelope)?;
    if cfg.entropy_coef > 0.0 {
        let support = tape.slice_cols(logits, 2, crate::seqcore::VOCAB_SIZE)?;
        let p = tape.row_softmax(support)?;
        let lp = tape.row_log_softmax(support)?;
        let plp = tape.mul(p, lp)?;
        let s = tape.sum(plp)?;
        let entropy = tape.scale(s, -1.0 / target.len() as f64)?;
        let bonus = tape.scale(entropy, cfg.entropy_coef)?;
        objective = tape.add(objective, bonus)?;
    }
    if let (Some(r), true) = (ref_logp, cfg.kl_coef > 0.0) {
        // penalty κ (logp - ref) = κ (-nll - ref)
        let kl = tape.scale(nll, -1.0)?;
        let kl = tape.add_scalar(kl, -r)?;
        let pen = tape.scale(kl, -cfg.kl_coef)?;
        objective = tape.add(objective, pen)?;
    }
    let loss = tape.scale(objective, -1.0 / m as f64)?;
    let value = tape.scalar(loss);
    let leaves = bound.leaves();
    let mut g = tape.backward(loss)?;
    let grads = leaves
        .iter()
        .zip(actor.tensor_sizes())
        .map(|(&v, n)| g.take_or_zeros(v, n))
        .collect();
    Ok(ActorTerm {
        loss: value,
        clipped,
        grads,
    })
}

fn normalize(adv: &mut [f64]) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
}

/// Actor, critic and their optimizer state across iterations.
pub struct PpoTrainer {
    pub actor: TransformerParams,
    pub critic: CriticParams,
    pub config: PpoConfig,
    reference: Option<TransformerParams>,
    actor_opt: AdamState,
    critic_opt: AdamState,
    iteration: usize,
}

impl PpoTrainer {
    pub fn new(actor: TransformerParams, critic: CriticParams, config: PpoConfig) -> Result<Self> {
        config.validate()?;
        if actor.config != critic.trunk.config {
            return Err(Error::InvalidConfig("actor and critic configs differ".into()));
        }
        if config.max_len > actor.config.max_len {
            return Err(Error::Config {
                key: "max_len".into(),
                reason: format!("exceeds model max_len {}", actor.config.max_len),
            });
        }
        let reference = (config.kl_coef > 0.0).then(|| actor.clone());
        Ok(PpoTrainer {
            actor_opt: AdamState::new(actor.tensor_sizes()),
            critic_opt: AdamState::new(critic.tensor_sizes()),
            actor,
            critic,
            config,
            reference,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Binding percentage of `eval_samples` fresh terminated samples.
    pub fn evaluate(&self, scorer: &dyn RewardScorer, peptide: &Peptide, n: usize, seed: u64) -> Result<f64> {
        let (seqs, _) = sample_terminated(&self.actor, n, self.config.max_len, seed)?;
        binding_percentage(&score_checked(scorer, peptide, &seqs)?, self.config.threshold)
    }

    /// One collect-score-update round. On error the parameters are left as
    /// they were.
    pub fn step(&mut self, scorer: &dyn RewardScorer, peptide: &Peptide) -> Result<RlRecord> {
        let cfg = self.config;
        let it = self.iteration;
        let seed = iteration_seed(cfg.seed, it, 0);

        let (seqs, termination_rate) = sample_terminated(&self.actor, cfg.batch_size, cfg.max_len, seed)?;
        let rewards = score_checked(scorer, peptide, &seqs)?;
        let binding_pct = if cfg.eval_samples > 0 {
            // one evaluation seed per run: common random numbers across iterations
            self.evaluate(scorer, peptide, cfg.eval_samples, iteration_seed(cfg.seed, 0, 0xe7a1))?
        } else {
            binding_percentage(&rewards, cfg.threshold)?
        };

        let old_logp = log_probs(&self.actor, &seqs)?;
        let ref_logp = match &self.reference {
            Some(r) => Some(log_probs(r, &seqs)?),
            None => None,
        };
        let values = self.critic.values(&seqs)?;
        let raw_adv = advantage(&rewards, &values)?;
        let mut adv = raw_adv.clone();
        if cfg.normalize_advantages {
            normalize(&mut adv);
        }

        let mut actor = self.actor.clone();
        let mut critic = self.critic.clone();
        let mut actor_opt = self.actor_opt.clone();
        let mut critic_opt = self.critic_opt.clone();
        let actor_adam = AdamConfig::with_lr(cfg.actor_lr);
        let critic_adam = AdamConfig::with_lr(cfg.critic_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(cfg.seed, it, 0x5417));
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let (mut clipped, mut terms) = (0usize, 0usize);
        let (mut actor_loss, mut critic_loss, mut batches) = (0.0, 0.0, 0usize);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.minibatch_size) {
                let m = chunk.len();
                let parts: Vec<ActorTerm> = chunk
                    .par_iter()
                    .map(|&i| {
                        actor_term(
                            &actor,
                            &seqs[i],
                            old_logp[i],
                            adv[i],
                            ref_logp.as_ref().map(|r| r[i]),
                            &cfg,
                            m,
                        )
                    })
                    .collect::<Result<_>>()?;
                clipped += parts.iter().filter(|p| p.clipped).count();
                terms += m;
                actor_loss += parts.iter().map(|p| p.loss).sum::<f64>();
                let mut g = reduce_grads(parts.into_iter().map(|p| p.grads).collect(), &actor.tensor_sizes());
                clip_grad_norm(&mut g, cfg.clip_norm);
                let mut bufs: Vec<&mut [f64]> = actor.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
                adam_step(&mut bufs, &g, &mut actor_opt, &actor_adam)?;

                let batch: Vec<TcrSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
                let targets: Vec<f64> = chunk.iter().map(|&i| rewards[i]).collect();
                let (cl, mut cg) = critic_loss_and_gradients(&critic, &batch, &targets)?;
                critic_loss += cl;
                clip_grad_norm(&mut cg, cfg.clip_norm);
                adam_step(&mut critic.buffers_mut(), &cg, &mut critic_opt, &critic_adam)?;
                batches += 1;
            }
        }
        if !actor.all_finite() || !critic.trunk.all_finite() {
            return Err(Error::NonFiniteValue { op: "ppo update" });
        }
        self.actor = actor;
        self.critic = critic;
        self.actor_opt = actor_opt;
        self.critic_opt = critic_opt;
        self.iteration += 1;
        let n = seqs.len() as f64;
        Ok(RlRecord {
            iteration: it,
            mean_reward: rewards.iter().sum::<f64>() / n,
            binding_pct,
            mean_advantage: raw_adv.iter().sum::<f64>() / n,
            clip_fraction: clipped as f64 / terms as f64,
            actor_loss: actor_loss / batches as f64,
            critic_loss: critic_loss / batches as f64,
            termination_rate,
        })
    }

    /// Runs `config.iterations` steps, calling `on_record` after each.
    pub fn run(
        &mut self,
        scorer: &dyn RewardScorer,
        peptide: &Peptide,
        mut on_record: impl FnMut(&RlRecord),
    ) -> Result<RlTrace> {
        let mut trace = RlTrace::default();
        for _ in 0..self.config.iterations {
            let r = self.step(scorer, peptide)?;
            on_record(&r);
            trace.records.push(r);
        }
        Ok(trace)
    }
}

/// A single PPO iteration from fresh optimizer state.
pub fn ppo_iteration(
    actor: &TransformerParams,
    critic: &CriticParams,
    scorer: &dyn RewardScorer,
    peptide: &Peptide,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<(TransformerParams, CriticParams, RlRecord)> {
    let mut t = PpoTrainer::new(actor.clone(), critic.clone(), PpoConfig { seed, ..*cfg })?;
    let rec = t.step(scorer, peptide)?;
    Ok((t.actor, t.critic, rec))
}

/// Regresses the critic alone onto the scorer's rewards for `steps`
/// minibatches of fresh actor samples. Returns the loss per step.
pub fn fit_critic(
    critic: &mut CriticParams,
    actor: &TransformerParams,
    scorer: &dyn RewardScorer,
    peptide: &Peptide,
    cfg: &PpoConfig,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut opt = AdamState::new(critic.tensor_sizes());
    let adam = AdamConfig::with_lr(cfg.critic_lr);
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let (seqs, _) = sample_terminated(actor, cfg.minibatch_size, cfg.max_len, iteration_seed(cfg.seed, s, 0xc71c))?;
        let targets = score_checked(scorer, peptide, &seqs)?;
        let (l, mut g) = critic_loss_and_gradients(critic, &seqs, &targets)?;
        clip_grad_norm(&mut g, cfg.clip_norm);
        adam_step(&mut critic.buffers_mut(), &g, &mut opt, &adam)?;
        losses.push(l);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::param_grad_check;
    use rand::Rng;

    fn seq(s: &str) -> TcrSequence {
        TcrSequence::new(s).unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_len: 10,
            vocab: 23,
        }
    }

    fn small_ppo() -> PpoConfig {
        PpoConfig {
            batch_size: 32,
            minibatch_size: 16,
            epochs: 2,
            eval_samples: 0,
            max_len: 10,
            iterations: 3,
            ..Default::default()
        }
    }

    #[test]
    fn motif_examples() {
        let m = MotifReward::with_motif("SSR").unwrap();
        assert_eq!(motif_score(&m, &seq("CASSRF")), 1.0);
        assert!((motif_score(&m, &seq("CASTRF")) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(motif_score(&m, &seq("CA")), 0.0);
        let p = Peptide::new("GILGFVFTL").unwrap();
        assert_eq!(MotifReward::from_peptide(&p, 3).unwrap().motif, "GFV");
        assert_eq!(MotifReward::from_peptide(&Peptide::new("AGGGA").unwrap(), 3).unwrap().motif, "GGG");
        assert!(MotifReward::from_peptide(&p, 10).is_err());
        assert!(Peptide::new("GILX").is_err());
    }

    #[test]
    fn clipped_objective_examples() {
        assert_eq!(clipped_objective(1.5, 1.0, 0.2).unwrap(), 1.2);
        assert_eq!(clipped_objective(0.5, -1.0, 0.2).unwrap(), -0.8);
        for r in [0.1, 1.0, 3.0] {
            assert_eq!(clipped_objective(r, 0.0, 0.2).unwrap(), 0.0);
        }
        assert!(matches!(clipped_objective(0.0, 1.0, 0.2), Err(Error::NonPositiveRatio(_))));
    }

    #[test]
    fn clipped_slope_by_finite_differences() {
        let h = 1e-6;
        for &(r, a) in &[(0.5, 1.0), (1.1, 1.0), (1.5, 1.0), (0.5, -1.0), (0.9, -2.0), (1.5, -1.0)] {
            let slope = (clipped_objective(r + h, a, 0.2).unwrap() - clipped_objective(r - h, a, 0.2).unwrap()) / (2.0 * h);
            let inside = r * a < clip_envelope(a, 0.2);
            let want = if inside { a } else { 0.0 };
            assert!((slope - want).abs() < 1e-6, "r={r} a={a} slope={slope}");
        }
    }

    #[test]
    fn objective_upper_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let r = rng.random_range(0.01..3.0);
            let a = rng.random_range(-2.0..2.0);
            let o = clipped_objective(r, a, 0.2).unwrap();
            assert!(o <= r * a && o <= clip_envelope(a, 0.2));
        }
    }

    #[test]
    fn advantage_and_binding_examples() {
        let a = advantage(&[1.0, 0.5, 0.0], &[0.3, 0.5, 0.8]).unwrap();
        assert!((a[0] - 0.7).abs() < 1e-15 && a[1] == 0.0 && (a[2] + 0.8).abs() < 1e-15);
        assert!(advantage(&[1.0], &[]).is_err());
        assert!((binding_percentage(&[0.6, 0.4, 0.9], 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(binding_percentage(&[0.5; 4], 0.5).unwrap(), 0.0);
        assert_eq!(binding_percentage(&[1.0; 4], 0.5).unwrap(), 1.0);
        assert!(matches!(binding_percentage(&[], 0.5), Err(Error::EmptyScores)));
    }

    #[test]
    fn critic_gradient_check() {
        let mut critic = CriticParams::fresh(tiny(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (i, t) in critic.trunk.tensors_mut().into_iter().enumerate() {
            let spread = if i < 2 { 1.0 } else { 0.2 };
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-spread..spread));
        }
        critic.head_w.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        let seqs = [seq("CAS"), seq("WYF")];
        let targets = [0.3, 0.9];
        let (_, analytic) = critic_loss_and_gradients(&critic, &seqs, &targets).unwrap();
        let rep = param_grad_check(&critic.flat_values(), &analytic, 1e-3, 1e-4, |v| {
            critic_loss(&critic.with_flat_values(v)?, &seqs, &targets)
        })
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn zero_advantage_leaves_actor_unchanged() {
        let actor = init(tiny(), 1).unwrap();
        let critic = CriticParams::constant(actor.clone(), 0.7);
        let cfg = PpoConfig { entropy_coef: 0.0, ..small_ppo() };
        let p = Peptide::new("AGGGA").unwrap();
        let (a2, _, rec) = ppo_iteration(&actor, &critic, &ConstantReward(0.7), &p, &cfg, 5).unwrap();
        assert_eq!(rec.mean_advantage, 0.0);
        for (x, y) in actor.flat_values().iter().flatten().zip(a2.flat_values().iter().flatten()) {
            assert!((x - y).abs() <= 1e-12);
        }
        let with_entropy = PpoConfig { entropy_coef: 0.01, ..small_ppo() };
        let (a3, _, _) = ppo_iteration(&actor, &critic, &ConstantReward(0.7), &p, &with_entropy, 5).unwrap();
        assert_ne!(actor, a3);
    }

    #[test]
    fn scorer_called_once_per_iteration() {
        let actor = init(tiny(), 1).unwrap();
        let critic = CriticParams::from_actor(&actor, 0);
        let scorer = CountingScorer::new(MotifReward::with_motif("GG").unwrap());
        let p = Peptide::new("AGGGA").unwrap();
        let mut t = PpoTrainer::new(actor, critic, small_ppo()).unwrap();
        t.run(&scorer, &p, |_| {}).unwrap();
        assert_eq!(scorer.calls(), 3);
    }

    #[test]
    fn runs_are_deterministic() {
        let actor = init(tiny(), 1).unwrap();
        let p = Peptide::new("AGGGA").unwrap();
        let run = || {
            let critic = CriticParams::from_actor(&actor, 0);
            let cfg = PpoConfig { eval_samples: 50, ..small_ppo() };
            let mut t = PpoTrainer::new(actor.clone(), critic, cfg).unwrap();
            let trace = t.run(&MotifReward::with_motif("GGG").unwrap(), &p, |_| {}).unwrap();
            (trace, t.actor)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        for r in &a.records {
            assert!(r.clip_fraction.is_finite() && r.actor_loss.is_finite() && r.critic_loss.is_finite());
        }
    }

    struct Failing;
    impl RewardScorer for Failing {
        fn score(&self, _: &Peptide, _: &[TcrSequence]) -> Result<Vec<f64>> {
            Err(Error::Unreachable("down".into()))
        }
    }

    #[test]
    fn scorer_failure_leaves_params_untouched() {
        let actor = init(tiny(), 1).unwrap();
        let critic = CriticParams::from_actor(&actor, 0);
        let mut t = PpoTrainer::new(actor.clone(), critic.clone(), small_ppo()).unwrap();
        let p = Peptide::new("AGGGA").unwrap();
        assert!(matches!(t.step(&Failing, &p), Err(Error::Unreachable(_))));
        assert_eq!(t.actor, actor);
        assert_eq!(t.critic, critic);
        assert_eq!(t.iteration(), 0);
        let bad = MotifReward::with_motif("G").unwrap();
        struct Scaled(MotifReward);
        impl RewardScorer for Scaled {
            fn score(&self, p: &Peptide, t: &[TcrSequence]) -> Result<Vec<f64>> {
                Ok(self.0.score(p, t)?.into_iter().map(|v| v * 2.0).collect())
            }
        }
        let r = t.step(&Scaled(bad), &p);
        assert!(matches!(r, Err(Error::BadResponse { fault: ResponseFault::Range, .. })));
    }

    #[test]
    fn critic_regresses_to_constant() {
        let actor = init(tiny(), 1).unwrap();
        let mut critic = CriticParams::fresh(tiny(), 3).unwrap();
        let p = Peptide::new("AGGGA").unwrap();
        let cfg = PpoConfig { critic_lr: 3e-3, minibatch_size: 64, ..small_ppo() };
        let losses = fit_critic(&mut critic, &actor, &ConstantReward(0.8), &p, &cfg, 200).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let (s, _) = sample_terminated(&actor, 100, 10, 99).unwrap();
        let v = critic.values(&s).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 0.8).abs() < 0.05, "{mean}");
    }

    #[test]
    fn mock_server_paths() {
        let p = Peptide::new("AGGGA").unwrap();
        let tcrs = vec![seq("CASS"), seq("CGGGF")];
        let fast = |b: MockBehavior| {
            let server = MockServer::start("127.0.0.1:0", b).unwrap();
            let mut c = RemoteScorer::new(server.endpoint());
            c.backoff_base = Duration::from_millis(1);
            c.timeout = Duration::from_millis(300);
            (server, c)
        };
        let (_s, c) = fast(MockBehavior::Constant(0.7));
        assert_eq!(c.score(&p, &tcrs).unwrap(), vec![0.7, 0.7]);
        let (_s, c) = fast(MockBehavior::Motif(3));
        assert_eq!(c.score(&p, &tcrs).unwrap(), vec![0.0, 1.0]);
        let (_s, c) = fast(MockBehavior::WrongLength);
        assert!(matches!(c.score(&p, &tcrs), Err(Error::BadResponse { fault: ResponseFault::Shape, .. })));
        let (_s, c) = fast(MockBehavior::OutOfRange);
        assert!(matches!(c.score(&p, &tcrs), Err(Error::BadResponse { fault: ResponseFault::Range, .. })));
        let (_s, c) = fast(MockBehavior::Status(400));
        assert!(matches!(c.score(&p, &tcrs), Err(Error::BadResponse { fault: ResponseFault::Status, .. })));
        let (_s, mut c) = fast(MockBehavior::Delay(Duration::from_millis(800), Box::new(MockBehavior::Constant(0.1))));
        c.retries = 1;
        assert!(matches!(c.score(&p, &tcrs), Err(Error::Timeout)));
    }

    #[test]
    fn unreachable_endpoint() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut c = RemoteScorer::new(format!("http://127.0.0.1:{port}"));
        c.backoff_base = Duration::from_millis(1);
        let r = c.score(&Peptide::new("AGGGA").unwrap(), &[seq("CASS")]);
        assert!(matches!(r, Err(Error::Unreachable(_))), "{r:?}");
    }

    #[test]
    fn behavior_parsing() {
        assert_eq!(MockBehavior::parse("constant:0.7").unwrap(), MockBehavior::Constant(0.7));
        assert_eq!(MockBehavior::parse("motif").unwrap(), MockBehavior::Motif(3));
        assert_eq!(
            MockBehavior::parse("delay:50:status:503").unwrap(),
            MockBehavior::Delay(Duration::from_millis(50), Box::new(MockBehavior::Status(503)))
        );
        assert!(MockBehavior::parse("bogus").is_err());
    }
}
