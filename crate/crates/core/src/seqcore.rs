//! Amino-acid vocabulary, tokenization, and repertoire files.
//!
//! Token layout: `0 = PAD`, `1 = SOS`, `2 = EOS`, then the twenty canonical
//! amino acids in alphabetical one-letter order at `3..=22`.
//!
//! Repertoire files are UTF-8 text with one sequence per line, optionally
//! followed by a single TAB and a positive integer count. Blank lines and
//! lines starting with `#` are skipped; LF and CRLF endings are accepted.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const SOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const VOCAB_SIZE: usize = 23;
pub const FIRST_RESIDUE: TokenId = 3;

/// The twenty canonical amino acids, alphabetical by one-letter code.
pub const AMINO_ACIDS: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V', 'W',
    'Y',
];

/// Default cap on residues per ingested sequence.
pub const DEFAULT_MAX_RESIDUES: usize = 30;

/// The fixed 23-symbol token table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn len(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Printable symbol for a token id.
    pub fn symbol(&self, id: TokenId) -> Option<&'static str> {
        const SYMBOLS: [&str; VOCAB_SIZE] = [
            "<PAD>", "<SOS>", "<EOS>", "A", "C", "D", "E", "F", "G", "H", "I", "K", "L", "M", "N",
            "P", "Q", "R", "S", "T", "V", "W", "Y",
        ];
        SYMBOLS.get(id as usize).copied()
    }

    pub fn residue_id(&self, ch: char) -> Option<TokenId> {
        residue_id(ch)
    }

    pub fn residue(&self, id: TokenId) -> Option<char> {
        residue(id)
    }

    pub fn symbols(&self) -> impl Iterator<Item = &'static str> + '_ {
        (0..VOCAB_SIZE as TokenId).map(|id| self.symbol(id).unwrap())
    }
}

#[inline]
pub fn residue_id(ch: char) -> Option<TokenId> {
    AMINO_ACIDS
        .binary_search(&ch)
        .ok()
        .map(|i| i as TokenId + FIRST_RESIDUE)
}

#[inline]
pub fn residue(id: TokenId) -> Option<char> {
    if (FIRST_RESIDUE..VOCAB_SIZE as TokenId).contains(&id) {
        Some(AMINO_ACIDS[(id - FIRST_RESIDUE) as usize])
    } else {
        None
    }
}

/// A CDR3 amino-acid string over the canonical alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TcrSequence(String);

impl TcrSequence {
    pub fn new(residues: impl Into<String>) -> Result<Self> {
        let residues = residues.into();
        if let Some((position, ch)) = residues.chars().enumerate().find(|(_, c)| residue_id(*c).is_none()) {
            return Err(Error::InvalidResidue { ch, position });
        }
        Ok(TcrSequence(residues))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Residue count (all residues are ASCII).
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Residue token ids without SOS/EOS framing.
    pub fn residue_ids(&self) -> Vec<TokenId> {
        self.0.chars().map(|c| residue_id(c).unwrap()).collect()
    }

    pub(crate) fn from_residue_ids(ids: &[TokenId]) -> Self {
        TcrSequence(ids.iter().map(|&id| residue(id).unwrap()).collect())
    }
}

impl fmt::Display for TcrSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for TcrSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TcrSequence::new(s)
    }
}

/// `[SOS] + residues + [EOS]`.
pub fn encode(seq: &str) -> Result<Vec<TokenId>> {
    let mut ids = Vec::with_capacity(seq.len() + 2);
    ids.push(SOS);
    for (position, ch) in seq.chars().enumerate() {
        ids.push(residue_id(ch).ok_or(Error::InvalidResidue { ch, position })?);
    }
    ids.push(EOS);
    Ok(ids)
}

pub fn decode(ids: &[TokenId]) -> Result<TcrSequence> {
    if ids.len() < 2 || ids[0] != SOS || ids[ids.len() - 1] != EOS {
        return Err(Error::MalformedEncoding(
            "expected SOS first and EOS last".into(),
        ));
    }
    let interior = &ids[1..ids.len() - 1];
    if let Some((i, &id)) = interior.iter().enumerate().find(|(_, &id)| residue(id).is_none()) {
        return Err(Error::MalformedEncoding(format!(
            "token {id} at position {} is not a residue",
            i + 1
        )));
    }
    Ok(TcrSequence::from_residue_ids(interior))
}

/// Distinct sequences with multiplicities, in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Repertoire {
    entries: Vec<(TcrSequence, u64)>,
    pub source: String,
}

impl Repertoire {
    pub fn new(source: impl Into<String>) -> Self {
        Repertoire {
            entries: Vec::new(),
            source: source.into(),
        }
    }

    /// Aggregates duplicates by summing counts.
    pub fn from_counts<I>(source: impl Into<String>, items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (TcrSequence, u64)>,
    {
        let mut rep = Repertoire::new(source);
        let mut index = HashMap::new();
        for (seq, count) in items {
            if count == 0 {
                return Err(Error::Parse {
                    line: 0,
                    reason: format!("nonpositive count for {seq}"),
                });
            }
            rep.add(&mut index, seq, count);
        }
        Ok(rep)
    }

    pub fn from_sequences<I>(source: impl Into<String>, seqs: I) -> Self
    where
        I: IntoIterator<Item = TcrSequence>,
    {
        Self::from_counts(source, seqs.into_iter().map(|s| (s, 1))).expect("unit counts")
    }

    fn add(&mut self, index: &mut HashMap<TcrSequence, usize>, seq: TcrSequence, count: u64) {
        match index.get(&seq) {
            Some(&i) => self.entries[i].1 += count,
            None => {
                index.insert(seq.clone(), self.entries.len());
                self.entries.push((seq, count));
            }
        }
    }

    pub fn entries(&self) -> &[(TcrSequence, u64)] {
        &self.entries
    }

    pub fn distinct(&self) -> usize {
        self.entries.len()
    }

    pub fn total_mass(&self) -> u64 {
        self.entries.iter().map(|(_, c)| c).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, seq: &TcrSequence) -> u64 {
        self.entries
            .iter()
            .find(|(s, _)| s == seq)
            .map_or(0, |(_, c)| *c)
    }

    pub fn max_residues(&self) -> usize {
        self.entries.iter().map(|(s, _)| s.len()).max().unwrap_or(0)
    }

    pub fn parse(source: impl Into<String>, text: &str, max_residues: usize) -> Result<Self> {
        let mut rep = Repertoire::new(source);
        let mut index = HashMap::new();
        for (i, raw) in text.split('\n').enumerate() {
            let line_no = i + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| Error::Parse {
                line: line_no,
                reason,
            };
            let mut fields = line.split('\t');
            let seq_field = fields.next().unwrap_or("");
            let count = match fields.next() {
                None => 1,
                Some(c) => {
                    let n: i64 = c
                        .parse()
                        .map_err(|_| err(format!("malformed count {c:?}")))?;
                    if n <= 0 {
                        return Err(err("nonpositive count".into()));
                    }
                    n as u64
                }
            };
            if fields.next().is_some() {
                return Err(err("expected at most two TAB-separated columns".into()));
            }
            let seq = TcrSequence::new(seq_field).map_err(|e| err(e.to_string()))?;
            if seq.is_empty() {
                return Err(err("empty sequence".into()));
            }
            if seq.len() > max_residues {
                return Err(err(format!(
                    "sequence of {} residues exceeds limit {max_residues}",
                    seq.len()
                )));
            }
            rep.add(&mut index, seq, count);
        }
        Ok(rep)
    }

    /// Writes the `sequence<TAB>count` form.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        for (seq, count) in &self.entries {
            writeln!(out, "{seq}\t{count}")?;
        }
        Ok(())
    }
}

pub fn load_repertoire(path: impl AsRef<Path>) -> Result<Repertoire> {
    load_repertoire_with_limit(path, DEFAULT_MAX_RESIDUES)
}

pub fn load_repertoire_with_limit(path: impl AsRef<Path>, max_residues: usize) -> Result<Repertoire> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Repertoire::parse(label, &text, max_residues)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode("CAT").unwrap(), vec![1, 4, 3, 19, 2]);
        assert_eq!(encode("").unwrap(), vec![1, 2]);
        match encode("CAB") {
            Err(Error::InvalidResidue { ch: 'B', position: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(encode("cat").is_err());
        assert!(encode("CXZ").is_err());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&[1, 4, 3, 19, 2]).unwrap().as_str(), "CAT");
        assert_eq!(decode(&[1, 2]).unwrap().as_str(), "");
        assert!(matches!(decode(&[1, 4, 0, 2]), Err(Error::MalformedEncoding(_))));
        assert!(matches!(decode(&[4, 2]), Err(Error::MalformedEncoding(_))));
        assert!(matches!(decode(&[1, 4]), Err(Error::MalformedEncoding(_))));
        assert!(matches!(decode(&[1, 23, 2]), Err(Error::MalformedEncoding(_))));
    }

    #[test]
    fn vocabulary_is_a_sorted_bijection() {
        let v = Vocabulary;
        assert_eq!(v.len(), 23);
        let syms: Vec<_> = v.symbols().collect();
        let mut dedup = syms.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 23);
        assert!(syms[3..].windows(2).all(|w| w[0] < w[1]));
        for (i, &aa) in AMINO_ACIDS.iter().enumerate() {
            assert_eq!(v.residue_id(aa), Some(i as TokenId + 3));
            assert_eq!(v.residue(i as TokenId + 3), Some(aa));
        }
        assert_eq!(v.residue(PAD), None);
    }

    #[test]
    fn parse_aggregates_duplicates() {
        let rep = Repertoire::parse("t", "CASSF\nCASSF\nCASGY", 30).unwrap();
        assert_eq!(rep.distinct(), 2);
        assert_eq!(rep.count(&"CASSF".parse().unwrap()), 2);
        assert_eq!(rep.count(&"CASGY".parse().unwrap()), 1);
    }

    #[test]
    fn parse_tsv_with_comment_and_crlf() {
        let rep = Repertoire::parse("t", "CASSF\t10\r\n# comment\r\n\r\nCASGY\t5\r\n", 30).unwrap();
        assert_eq!(rep.count(&"CASSF".parse().unwrap()), 10);
        assert_eq!(rep.count(&"CASGY".parse().unwrap()), 5);
        assert_eq!(rep.total_mass(), 15);
    }

    #[test]
    fn parse_errors() {
        match Repertoire::parse("t", "CASSF\t-1", 30) {
            Err(Error::Parse { line: 1, reason }) => assert!(reason.contains("nonpositive")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            Repertoire::parse("t", "CASSF\nCAXSF", 30),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            Repertoire::parse("t", "CASSF\tabc", 30),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Repertoire::parse("t", "CASSF\t1\textra", 30),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            Repertoire::parse("t", "CASSFCASSF", 5),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn load_missing_file_is_io_error() {
        assert!(matches!(
            load_repertoire("/definitely/not/here.tsv"),
            Err(Error::Io { .. })
        ));
    }

    fn residues() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(AMINO_ACIDS.to_vec()), 1..=30)
            .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn encode_decode_round_trip(s in residues()) {
            let ids = encode(&s).unwrap();
            prop_assert_eq!(ids.len(), s.len() + 2);
            prop_assert!(!ids.contains(&PAD));
            let back = decode(&ids).unwrap();
            prop_assert_eq!(back.as_str(), s.as_str());
        }
    }

    proptest! {
        #[test]
        fn total_mass_ignores_layout(
            items in prop::collection::vec((residues(), 1u64..50), 1..40),
            split in any::<bool>(),
        ) {
            let expected: u64 = items.iter().map(|(_, c)| c).sum();
            let mut text = String::new();
            for (s, c) in &items {
                if split && *c < 5 {
                    for _ in 0..*c {
                        text.push_str(s);
                        text.push('\n');
                    }
                } else {
                    text.push_str(&format!("{s}\t{c}\n"));
                }
            }
            let rep = Repertoire::parse("p", &text, 30).unwrap();
            prop_assert_eq!(rep.total_mass(), expected);
            let mut seen = std::collections::HashSet::new();
            prop_assert!(rep.entries().iter().all(|(s, _)| seen.insert(s.clone())));
        }
    }
}
