//! Repertoire statistics: empirical distributions, concordance, divergences
//! and overlap with known sequences.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use crate::io_util::{write_atomic, write_csv};
use crate::lm::log_probs;
use crate::model::TransformerParams;
use crate::numerics::log_sum_exp;
use crate::seqcore::{Repertoire, TcrSequence};
use crate::{Error, Result};

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    pub support: Vec<TcrSequence>,
    pub probs: Vec<f64>,
    pub total: u64,
}

impl EmpiricalDistribution {
    pub fn prob(&self, seq: &TcrSequence) -> f64 {
        self.support
            .iter()
            .position(|s| s == seq)
            .map_or(0.0, |i| self.probs[i])
    }
}

pub fn empirical_distribution(rep: &Repertoire) -> Result<EmpiricalDistribution> {
    let total = rep.total_mass();
    if rep.is_empty() || total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let (support, probs) = rep
        .entries()
        .iter()
        .map(|(s, c)| (s.clone(), *c as f64 / total as f64))
        .unzip();
    Ok(EmpiricalDistribution { support, probs, total })
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn check_distribution(p: &[f64]) -> Result<()> {
    for (index, &value) in p.iter().enumerate() {
        if !(value >= 0.0) {
            return Err(Error::NegativeEntry { index, value });
        }
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized(s));
    }
    Ok(())
}

/// `x * log2(x / m)`, zero when `x` is zero.
fn kl_term(x: f64, m: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / m).log2()
    }
}

/// Jensen-Shannon divergence in bits against the midpoint mixture.
///
/// Each index contributes `(term(p) + term(q)) / 2`, so swapping the
/// arguments gives a bit-identical result.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a == b {
            continue;
        }
        let m = 0.5 * (a + b);
        d += 0.5 * (kl_term(a, m) + kl_term(b, m));
    }
    Ok(d.clamp(0.0, 1.0))
}

/// [`js_divergence`] between two distributions keyed by sequence, over the
/// sorted union of their supports.
pub fn js_divergence_keyed(p: &HashMap<TcrSequence, f64>, q: &HashMap<TcrSequence, f64>) -> Result<f64> {
    let keys: BTreeSet<&TcrSequence> = p.keys().chain(q.keys()).collect();
    let pv: Vec<f64> = keys.iter().map(|k| p.get(*k).copied().unwrap_or(0.0)).collect();
    let qv: Vec<f64> = keys.iter().map(|k| q.get(*k).copied().unwrap_or(0.0)).collect();
    js_divergence(&pv, &qv)
}

/// Normalizes log weights into probabilities.
pub fn renormalize(log_weights: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_weights);
    log_weights.iter().map(|v| (v - lse).exp()).collect()
}

/// Model probabilities renormalized over the test support versus the
/// empirical test distribution.
pub fn model_vs_data_divergence(params: &TransformerParams, test: &Repertoire) -> Result<f64> {
    let data = empirical_distribution(test)?;
    let model = renormalize(&log_probs(params, &data.support)?);
    js_divergence(&model, &data.probs)
}

/// One point of the inferred-versus-observed scatter.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcordanceRow {
    pub sequence: TcrSequence,
    pub count: u64,
    pub p_data: f64,
    /// Unnormalized model probability, EOS included.
    pub p_infer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concordance {
    pub rows: Vec<ConcordanceRow>,
    /// Pearson r of log10 probabilities over rows with count at least
    /// `min_count`.
    pub pearson_log10: f64,
}

pub fn concordance(params: &TransformerParams, test: &Repertoire, min_count: u64) -> Result<Concordance> {
    let data = empirical_distribution(test)?;
    let lps = log_probs(params, &data.support)?;
    let rows: Vec<ConcordanceRow> = test
        .entries()
        .iter()
        .zip(&data.probs)
        .zip(&lps)
        .map(|(((s, c), &pd), &lp)| ConcordanceRow {
            sequence: s.clone(),
            count: *c,
            p_data: pd,
            p_infer: lp.exp(),
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .zip(&lps)
        .filter(|(r, _)| r.count >= min_count)
        .map(|(r, lp)| (r.p_data.log10(), lp / std::f64::consts::LN_10))
        .unzip();
    Ok(Concordance {
        pearson_log10: pearson(&xs, &ys)?,
        rows,
    })
}

pub fn write_concordance_csv(path: &Path, c: &Concordance) -> Result<()> {
    write_csv(
        path,
        &["sequence", "count", "p_data", "p_infer"],
        c.rows.iter().map(|r| {
            [
                r.sequence.to_string(),
                r.count.to_string(),
                format!("{:e}", r.p_data),
                format!("{:e}", r.p_infer),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceMatrix {
    pub labels: Vec<String>,
    /// Row-major `n × n`.
    pub values: Vec<f64>,
}

impl DivergenceMatrix {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec![""];
        header.extend(self.labels.iter().map(String::as_str));
        let n = self.n();
        write_csv(
            path,
            &header,
            (0..n).map(|i| {
                std::iter::once(self.labels[i].clone())
                    .chain((0..n).map(move |j| format!("{:.6}", self.values[i * n + j])))
                    .collect::<Vec<_>>()
            }),
        )
    }
}

/// Pairwise divergence between models, each pair compared on the union of
/// its two evaluation sets with both models renormalized over that union.
pub fn divergence_matrix(
    labels: &[String],
    checkpoints: &[TransformerParams],
    eval_sets: &[Repertoire],
) -> Result<DivergenceMatrix> {
    let n = checkpoints.len();
    if eval_sets.len() != n || labels.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: eval_sets.len().min(labels.len()),
        });
    }
    let all: Vec<TcrSequence> = eval_sets
        .iter()
        .flat_map(|r| r.entries().iter().map(|e| e.0.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<&TcrSequence, usize> = all.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let scores: Vec<Vec<f64>> = checkpoints
        .iter()
        .map(|p| log_probs(p, &all))
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let support: BTreeSet<usize> = eval_sets[i]
                .entries()
                .iter()
                .chain(eval_sets[j].entries())
                .map(|e| index[&e.0])
                .collect();
            let pick = |m: usize| -> Vec<f64> { support.iter().map(|&k| scores[m][k]).collect() };
            let d = js_divergence(&renormalize(&pick(i)), &renormalize(&pick(j)))?;
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(DivergenceMatrix {
        labels: labels.to_vec(),
        values,
    })
}

/// Share of generated sequences (duplicates counted) found in `known`.
pub fn overlap_fraction(generated: &[TcrSequence], known: &HashSet<TcrSequence>) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::EmptyGenerated);
    }
    if known.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hits = generated.iter().filter(|g| known.contains(*g)).count();
    Ok(hits as f64 / generated.len() as f64)
}

/// One proportion per line.
pub fn write_overlap_trials(path: &Path, proportions: &[f64]) -> Result<()> {
    let text: String = proportions.iter().map(|p| format!("{p}\n")).collect();
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{train, TrainRunConfig};
    use crate::model::{init, ModelConfig};
    use proptest::prelude::*;

    fn seq(s: &str) -> TcrSequence {
        TcrSequence::new(s).unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_len: 10,
            vocab: 23,
        }
    }

    #[test]
    fn empirical_examples() {
        let r = Repertoire::from_counts("r", [(seq("CAS"), 2), (seq("CSF"), 1)]).unwrap();
        let d = empirical_distribution(&r).unwrap();
        assert!((d.prob(&seq("CAS")) - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.prob(&seq("CSF")) - 1.0 / 3.0).abs() < 1e-15);
        let one = Repertoire::from_sequences("r", [seq("CAS")]);
        assert_eq!(empirical_distribution(&one).unwrap().probs, vec![1.0]);
        let ten = Repertoire::from_sequences("r", (0..10).map(|i| seq(&"A".repeat(i + 1))));
        assert!(empirical_distribution(&ten).unwrap().probs.iter().all(|&p| (p - 0.1).abs() < 1e-15));
        assert!(matches!(empirical_distribution(&Repertoire::new("e")), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let want = 0.5 * (4.0f64 / 3.0).log2() + 0.5 * (0.5 * (2.0f64 / 3.0).log2() + 0.5);
        let got = js_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.3113).abs() < 1e-4);
        assert!(matches!(js_divergence(&[0.5, 0.6], &[0.5, 0.5]), Err(Error::NotNormalized(_))));
        assert!(matches!(
            js_divergence(&[1.5, -0.5], &[0.5, 0.5]),
            Err(Error::NegativeEntry { index: 1, .. })
        ));
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn js_symmetric_and_bounded((p, q) in (1usize..12).prop_flat_map(|n| (dist(n), dist(n)))) {
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn pearson_affine_invariant(
            xs in prop::collection::vec(-10.0f64..10.0, 3..20),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + i as f64).collect();
            if let Ok(r) = pearson(&xs, &ys) {
                let xt: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
                prop_assert!((pearson(&xt, &ys).unwrap() - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn model_vs_data_examples() {
        let p = TransformerParams::uniform(tiny()).unwrap();
        let test = Repertoire::from_counts("t", [(seq("CAS"), 99), (seq("CSF"), 1)]).unwrap();
        let d = model_vs_data_divergence(&p, &test).unwrap();
        let want = js_divergence(&[0.5, 0.5], &[0.99, 0.01]).unwrap();
        assert!((d - want).abs() < 1e-12);
        let single = Repertoire::from_sequences("t", [seq("CAS")]);
        assert!(model_vs_data_divergence(&p, &single).unwrap().abs() < 1e-12);
    }

    #[test]
    fn memorized_distribution_is_close() {
        let test = Repertoire::from_counts("t", [(seq("CAS"), 5), (seq("CWF"), 3), (seq("GY"), 2)]).unwrap();
        let cfg = TrainRunConfig { batch_size: 10, epochs: 150, learning_rate: 3e-3, max_len: 10, ..Default::default() };
        let (p, _) = train(&test, &cfg, init(tiny(), 1).unwrap()).unwrap();
        let d = model_vs_data_divergence(&p, &test).unwrap();
        assert!(d < 0.01, "{d}");
    }

    #[test]
    fn matrix_is_symmetric_with_zero_diagonal() {
        let a = init(tiny(), 1).unwrap();
        let b = init(tiny(), 2).unwrap();
        let sets = vec![
            Repertoire::from_sequences("a", [seq("CAS"), seq("CSF")]),
            Repertoire::from_sequences("b", [seq("CAS"), seq("WW")]),
            Repertoire::from_sequences("c", [seq("GGG")]),
        ];
        let labels = vec!["a".into(), "b".into(), "c".into()];
        let m = divergence_matrix(&labels, &[a.clone(), b, a], &sets).unwrap();
        for i in 0..3 {
            assert_eq!(m.get(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(m.get(i, j).to_bits(), m.get(j, i).to_bits());
                assert!((0.0..=1.0).contains(&m.get(i, j)));
            }
        }
        assert_eq!(m.get(0, 2), 0.0);
        assert!(m.get(0, 1) > 0.0);
    }

    #[test]
    fn overlap_examples() {
        let g = [seq("CAS"), seq("CSF"), seq("GY")];
        let known: HashSet<_> = [seq("CSF")].into();
        assert!((overlap_fraction(&g, &known).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let all: HashSet<_> = g.iter().cloned().collect();
        assert_eq!(overlap_fraction(&g, &all).unwrap(), 1.0);
        let none: HashSet<_> = [seq("W")].into();
        assert_eq!(overlap_fraction(&g, &none).unwrap(), 0.0);
        assert!(matches!(overlap_fraction(&[], &known), Err(Error::EmptyGenerated)));
        let dup = [seq("CSF"), seq("CSF"), seq("A")];
        assert!((overlap_fraction(&dup, &known).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn csv_exports() {
        let dir = tempfile::tempdir().unwrap();
        let m = DivergenceMatrix { labels: vec!["x".into(), "y".into()], values: vec![0.0, 0.5, 0.5, 0.0] };
        let path = dir.path().join("m.csv");
        m.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, ",x,y\nx,0.000000,0.500000\ny,0.500000,0.000000\n");
        let path = dir.path().join("o.txt");
        write_overlap_trials(&path, &[0.25, 0.5]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "0.25\n0.5\n");
    }
}
