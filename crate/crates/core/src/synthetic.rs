//! Synthetic repertoires with known ground truth, for calibration runs and
//! tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::seqcore::{Repertoire, TcrSequence, AMINO_ACIDS};
use crate::{Error, Result};

/// First-order Markov source over a small alphabet with a uniform length
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    pub alphabet: Vec<char>,
    pub initial: Vec<f64>,
    /// Row-major `k × k`, row = current residue.
    pub transition: Vec<f64>,
    pub min_len: usize,
    pub max_len: usize,
}

impl MarkovSource {
    /// Four residues on a cycle A→C→G→S→A: forward 0.9, skip one 0.04,
    /// back 0.04, stay 0.02. Lengths uniform on 4..=8.
    pub fn cyclic4() -> Self {
        let k = 4;
        let mut transition = vec![0.0; k * k];
        for i in 0..k {
            transition[i * k + (i + 1) % k] = 0.9;
            transition[i * k + (i + 2) % k] = 0.04;
            transition[i * k + (i + k - 1) % k] = 0.04;
            transition[i * k + i] = 0.02;
        }
        MarkovSource {
            alphabet: vec!['A', 'C', 'G', 'S'],
            initial: vec![0.4, 0.3, 0.1, 0.2],
            transition,
            min_len: 4,
            max_len: 8,
        }
    }

    fn pick(weights: &[f64], rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.len() - 1
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TcrSequence {
        let k = self.alphabet.len();
        let len = rng.random_range(self.min_len..=self.max_len);
        let mut s = String::with_capacity(len);
        let mut cur = Self::pick(&self.initial, rng);
        s.push(self.alphabet[cur]);
        for _ in 1..len {
            cur = Self::pick(&self.transition[cur * k..(cur + 1) * k], rng);
            s.push(self.alphabet[cur]);
        }
        TcrSequence::new(s).expect("alphabet residues are valid")
    }

    pub fn repertoire(&self, source: &str, n: usize, seed: u64) -> Repertoire {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Repertoire::from_sequences(source, (0..n).map(|_| self.sample(&mut rng)))
    }

    /// Exact probability of `seq`, zero outside the support.
    pub fn probability(&self, seq: &TcrSequence) -> f64 {
        let k = self.alphabet.len();
        let len = seq.len();
        if len < self.min_len || len > self.max_len {
            return 0.0;
        }
        let idx: Option<Vec<usize>> = seq
            .as_str()
            .chars()
            .map(|c| self.alphabet.iter().position(|&a| a == c))
            .collect();
        let Some(idx) = idx else { return 0.0 };
        let mut p = self.initial[idx[0]] / (self.max_len - self.min_len + 1) as f64;
        for w in idx.windows(2) {
            p *= self.transition[w[0] * k + w[1]];
        }
        p
    }

    /// Every sequence in the support with its probability.
    pub fn support(&self) -> Vec<(TcrSequence, f64)> {
        let k = self.alphabet.len();
        let mut out = Vec::new();
        for len in self.min_len..=self.max_len {
            let total = k.pow(len as u32);
            for mut code in 0..total {
                let mut s = String::with_capacity(len);
                for _ in 0..len {
                    s.push(self.alphabet[code % k]);
                    code /= k;
                }
                let seq = TcrSequence::new(s).expect("alphabet residues are valid");
                let p = self.probability(&seq);
                if p > 0.0 {
                    out.push((seq, p));
                }
            }
        }
        out
    }
}

/// Balanced, length-matched binary task: each positive has `motif` planted
/// at a uniform position in a uniform random sequence; its paired negative
/// has the same length and does not contain the motif.
pub fn motif_task(pairs: usize, motif: &str, min_len: usize, max_len: usize, seed: u64) -> Result<Vec<(TcrSequence, bool)>> {
    let motif: Vec<char> = motif.chars().collect();
    if motif.is_empty() || min_len < motif.len() || max_len < min_len {
        return Err(Error::Config {
            key: "motif_task".into(),
            reason: "lengths must fit the motif".into(),
        });
    }
    let needle: String = motif.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random = |rng: &mut ChaCha8Rng, len: usize| -> Vec<char> {
        (0..len).map(|_| AMINO_ACIDS[rng.random_range(0..AMINO_ACIDS.len())]).collect()
    };
    let mut out = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let len = rng.random_range(min_len..=max_len);
        let mut pos = random(&mut rng, len);
        let at = rng.random_range(0..=len - motif.len());
        pos[at..at + motif.len()].copy_from_slice(&motif);
        let neg = loop {
            let n: String = random(&mut rng, len).into_iter().collect();
            if !n.contains(&needle) {
                break n;
            }
        };
        out.push((TcrSequence::new(pos.into_iter().collect::<String>())?, true));
        out.push((TcrSequence::new(neg)?, false));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclic_chain_is_normalized() {
        let m = MarkovSource::cyclic4();
        for row in m.transition.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let total: f64 = m.support().iter().map(|x| x.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let s = TcrSequence::new("ACGS").unwrap();
        assert!((m.probability(&s) - 0.4 * 0.9 * 0.9 * 0.9 / 5.0).abs() < 1e-15);
        assert_eq!(m.probability(&TcrSequence::new("ACW").unwrap()), 0.0);
    }

    #[test]
    fn samples_follow_the_chain() {
        let m = MarkovSource::cyclic4();
        let r = m.repertoire("m", 20_000, 1);
        let first_a = r
            .entries()
            .iter()
            .filter(|(s, _)| s.as_str().starts_with('A'))
            .map(|e| e.1)
            .sum::<u64>() as f64
            / 20_000.0;
        assert!((first_a - 0.4).abs() < 0.02);
        assert!(r.entries().iter().all(|(s, _)| (4..=8).contains(&s.len())));
    }

    #[test]
    fn motif_task_is_balanced_and_length_matched() {
        let t = motif_task(50, "SSR", 10, 16, 3).unwrap();
        for pair in t.chunks(2) {
            assert!(pair[0].1 && !pair[1].1);
            assert_eq!(pair[0].0.len(), pair[1].0.len());
            assert!(pair[0].0.as_str().contains("SSR"));
            assert!(!pair[1].0.as_str().contains("SSR"));
        }
        assert_eq!(t, motif_task(50, "SSR", 10, 16, 3).unwrap());
    }
}
