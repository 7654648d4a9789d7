//! Sequence classification on language-model features: a three-layer
//! perceptron, rank AUC and stratified cross-validation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io_util::write_csv;
use crate::model::{row_features, TransformerParams};
use crate::numerics::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::seqcore::{encode, TcrSequence, PAD};
use crate::{Error, Result};

/// Flattened `max_len × d_model` features of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub id: String,
    pub values: Vec<f64>,
}

/// Features for each sequence. The token row `SOS residues EOS` is padded
/// with PAD to the model's `max_len`, so every vector has the same width.
pub fn extract_features(params: &TransformerParams, seqs: &[TcrSequence]) -> Result<Vec<FeatureVector>> {
    let max_len = params.config.max_len;
    seqs.par_iter()
        .map(|s| {
            let mut row = encode(s.as_str())?;
            if row.len() > max_len {
                return Err(Error::TooLong {
                    len: row.len(),
                    max: max_len,
                });
            }
            row.resize(max_len, PAD);
            Ok(FeatureVector {
                id: s.to_string(),
                values: row_features(params, &row)?,
            })
        })
        .collect()
}

pub fn write_features_csv(path: &Path, features: &[FeatureVector]) -> Result<()> {
    let q = features.first().map_or(0, |f| f.values.len());
    let names: Vec<String> = std::iter::once("sequence".to_string())
        .chain((0..q).map(|i| format!("f{i}")))
        .collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    write_csv(
        path,
        &header,
        features.iter().map(|f| {
            std::iter::once(f.id.clone())
                .chain(f.values.iter().map(|v| v.to_string()))
                .collect::<Vec<_>>()
        }),
    )
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureVector>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            reason: e.to_string(),
        })?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let values = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    reason: format!("{v:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(FeatureVector { id, values });
    }
    Ok(out)
}

/// Parses `sequence<TAB>0|1` lines; `#` comments and blank lines skipped.
pub fn parse_labels(text: &str) -> Result<Vec<(TcrSequence, bool)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Parse { line: i + 1, reason };
        let (seq, label) = line
            .split_once('\t')
            .ok_or_else(|| err("expected sequence<TAB>label".into()))?;
        let label = match label {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("label {other:?} is not 0 or 1"))),
        };
        out.push((TcrSequence::new(seq).map_err(|e| err(e.to_string()))?, label));
    }
    Ok(out)
}

pub fn load_labels(path: &Path) -> Result<Vec<(TcrSequence, bool)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden1: 256,
            hidden2: 64,
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl ClassifierParams {
    /// He-normal weights, zero biases.
    pub fn init(q: usize, hidden1: usize, hidden2: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |fan_in: usize, fan_out: usize| {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(&[fan_in, fan_out], |_| d.sample(&mut rng)).with_grad()
        };
        let w1 = he(q, hidden1);
        let w2 = he(hidden1, hidden2);
        let w3 = he(hidden2, 2);
        ClassifierParams {
            w1,
            b1: Tensor::zeros(&[hidden1]).with_grad(),
            w2,
            b2: Tensor::zeros(&[hidden2]).with_grad(),
            w3,
            b3: Tensor::zeros(&[2]).with_grad(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn flat_values(&self) -> Vec<Vec<f64>> {
        self.tensors().iter().map(|t| t.data().to_vec()).collect()
    }

    pub fn with_flat_values(&self, values: &[Vec<f64>]) -> Result<Self> {
        let mut out = self.clone();
        if values.len() != 6 {
            return Err(Error::shape("with_flat_values", &[6], &[values.len()]));
        }
        for (t, v) in out.tensors_mut().into_iter().zip(values) {
            if t.numel() != v.len() {
                return Err(Error::shape("with_flat_values", t.shape(), &[v.len()]));
            }
            t.data_mut().copy_from_slice(v);
        }
        Ok(out)
    }

    /// Two-class logits, `B × 2`.
    fn logits<'a>(&'a self, tape: &mut Tape<'a>, x: Var, track: bool) -> Result<(Var, [Var; 6])> {
        let mut leaf = |t: &'a Tensor| if track { tape.leaf(t) } else { tape.leaf_frozen(t) };
        let leaves = [
            leaf(&self.w1),
            leaf(&self.b1),
            leaf(&self.w2),
            leaf(&self.b2),
            leaf(&self.w3),
            leaf(&self.b3),
        ];
        let [w1, b1, w2, b2, w3, b3] = leaves;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, w2)?;
        let h = tape.add_bias(h, b2)?;
        let h = tape.relu(h)?;
        let out = tape.matmul(h, w3)?;
        Ok((tape.add_bias(out, b3)?, leaves))
    }
}

fn stack(features: &[&FeatureVector], q: usize) -> Result<Vec<f64>> {
    let mut data = Vec::with_capacity(features.len() * q);
    for f in features {
        if f.values.len() != q {
            return Err(Error::shape("classifier input", &[q], &[f.values.len()]));
        }
        data.extend_from_slice(&f.values);
    }
    Ok(data)
}

/// Mean two-class cross-entropy of a batch and its parameter gradients.
pub fn loss_and_gradients(
    cls: &ClassifierParams,
    features: &[&FeatureVector],
    labels: &[bool],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let q = cls.input_width();
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.len(), q, stack(features, q)?)?;
    let (logits, leaves) = cls.logits(&mut tape, x, true)?;
    let targets: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let ce = tape.cross_entropy(logits, &targets, &vec![true; labels.len()])?;
    let loss = tape.scale(ce, 1.0 / labels.len() as f64)?;
    let value = tape.scalar(loss);
    let mut g = tape.backward(loss)?;
    let grads = leaves
        .iter()
        .zip(cls.tensors())
        .map(|(&v, t)| g.take_or_zeros(v, t.numel()))
        .collect();
    Ok((value, grads))
}

/// Mean cross-entropy without gradients.
pub fn loss(cls: &ClassifierParams, features: &[&FeatureVector], labels: &[bool]) -> Result<f64> {
    let probs = predict_refs(cls, features)?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| -(if l { *p } else { 1.0 - p }).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

fn check_labels(labels: &[bool], min: usize) -> Result<()> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos < min || labels.len() - pos < min {
        return Err(Error::DegenerateLabels);
    }
    Ok(())
}

pub fn train_classifier(features: &[FeatureVector], labels: &[bool], config: &ClassifierConfig) -> Result<ClassifierParams> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    check_labels(labels, 2)?;
    if config.batch_size == 0 {
        return Err(Error::Config {
            key: "batch_size".into(),
            reason: "must be positive".into(),
        });
    }
    let q = features[0].values.len();
    let mut cls = ClassifierParams::init(q, config.hidden1, config.hidden2, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc1a5);
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut state = AdamState::new(cls.tensors().iter().map(|t| t.numel()));
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&FeatureVector> = chunk.iter().map(|&i| &features[i]).collect();
            let ys: Vec<bool> = chunk.iter().map(|&i| labels[i]).collect();
            let (_, grads) = loss_and_gradients(&cls, &batch, &ys)?;
            let mut bufs: Vec<&mut [f64]> = cls.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
            adam_step(&mut bufs, &grads, &mut state, &adam)?;
        }
    }
    Ok(cls)
}

fn predict_refs(cls: &ClassifierParams, features: &[&FeatureVector]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let q = cls.input_width();
    let mut tape = Tape::new();
    let x = tape.constant(features.len(), q, stack(features, q)?)?;
    let (logits, _) = cls.logits(&mut tape, x, false)?;
    Ok(tape
        .value(logits)
        .chunks_exact(2)
        .map(|l| 1.0 / (1.0 + (l[0] - l[1]).exp()))
        .collect())
}

/// Class-1 probability per row; class 0 is the complement.
pub fn predict(cls: &ClassifierParams, features: &[FeatureVector]) -> Result<Vec<f64>> {
    let refs: Vec<&FeatureVector> = features.iter().collect();
    refs.chunks(512)
        .map(|c| predict_refs(cls, c))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.concat())
}

/// Rank (Mann-Whitney) AUC; tied scores share their average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Stratified partition of indices into `k` folds; each class is shuffled
/// and dealt round-robin, so per-class fold sizes differ by at most one.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config {
            key: "k".into(),
            reason: "need at least 2 folds".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    for class in [false, true] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::TooFewPerClass {
                class: class as u8,
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng);
        for (i, m) in members.into_iter().enumerate() {
            folds[i % k].push(m);
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub mean_auc: f64,
    /// Population standard deviation over folds.
    pub std_auc: f64,
    pub fold_aucs: Vec<f64>,
    pub folds: Vec<Vec<usize>>,
}

/// Stratified `k`-fold cross-validated AUC. Fold `i` trains with seed
/// `config.seed + i`.
pub fn kfold_cv(features: &[FeatureVector], labels: &[bool], k: usize, config: &ClassifierConfig) -> Result<CvReport> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    let folds = stratified_folds(labels, k, config.seed)?;
    let fold_aucs: Vec<f64> = (0..k)
        .into_par_iter()
        .map(|i| {
            let held: &[usize] = &folds[i];
            let train_idx: Vec<usize> = (0..k).filter(|&j| j != i).flat_map(|j| folds[j].iter().copied()).collect();
            let xs: Vec<FeatureVector> = train_idx.iter().map(|&t| features[t].clone()).collect();
            let ys: Vec<bool> = train_idx.iter().map(|&t| labels[t]).collect();
            let cfg = ClassifierConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..*config
            };
            let cls = train_classifier(&xs, &ys, &cfg)?;
            let test: Vec<FeatureVector> = held.iter().map(|&t| features[t].clone()).collect();
            let scores = predict(&cls, &test)?;
            let yt: Vec<bool> = held.iter().map(|&t| labels[t]).collect();
            auc(&scores, &yt)
        })
        .collect::<Result<_>>()?;
    let mean = fold_aucs.iter().sum::<f64>() / k as f64;
    let var = fold_aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / k as f64;
    Ok(CvReport {
        mean_auc: mean,
        std_auc: var.sqrt(),
        fold_aucs,
        folds,
    })
}
