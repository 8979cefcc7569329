//! Byte-pair-encoding word pieces.
//!
//! Text is split into chunks that each start with the word marker `▁`
//! (every space becomes a marker and one marker is prepended), so pieces
//! never span a word boundary and word counts survive a round trip. Ids 0 and
//! 1 are reserved for the start and end of sequence; the transducer's blank
//! takes the id one past the last piece.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WORD_MARK: char = '▁';
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
const RESERVED: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
    bos_id: usize,
    eos_id: usize,
    blank_id: usize,
    word_marker: char,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    longest: usize,
}

impl Vocab {
    fn from_parts(pieces: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let index = pieces.iter().enumerate().skip(RESERVED).map(|(i, p)| (p.clone(), i)).collect();
        let longest = pieces.iter().skip(RESERVED).map(|p| p.chars().count()).max().unwrap_or(1);
        let blank_id = pieces.len();
        Vocab { pieces, merges, bos_id: BOS_ID, eos_id: EOS_ID, blank_id, word_marker: WORD_MARK, index, longest }
    }

    /// Number of token ids the LM head predicts over (pieces plus the two
    /// reserved sequence symbols).
    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    /// Transducer output dimension: every id plus blank.
    pub fn output_dim(&self) -> usize {
        self.pieces.len() + 1
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn bos_id(&self) -> usize {
        self.bos_id
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id == self.bos_id || id == self.eos_id || id == self.blank_id
    }

    /// Ids that [`Vocab::encode`] can produce.
    pub fn piece_ids(&self) -> std::ops::Range<usize> {
        RESERVED..self.pieces.len()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let marked = mark(text)?;
        let mut out = Vec::with_capacity(marked.len());
        for chunk in chunks(&marked) {
            let chars: Vec<char> = chunk.chars().collect();
            let mut i = 0;
            while i < chars.len() {
                let max = self.longest.min(chars.len() - i);
                let mut hit = None;
                for len in (1..=max).rev() {
                    let s: String = chars[i..i + len].iter().collect();
                    if let Some(&id) = self.index.get(&s) {
                        hit = Some((id, len));
                        break;
                    }
                }
                let (id, len) = hit.ok_or(Error::UnknownChar(chars[i]))?;
                out.push(id);
                i += len;
            }
        }
        Ok(out)
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        let mut s = String::new();
        for &t in tokens {
            if t < RESERVED || t >= self.pieces.len() {
                return Err(Error::BadToken(t));
            }
            s.push_str(&self.pieces[t]);
        }
        let text: String = s.chars().map(|c| if c == WORD_MARK { ' ' } else { c }).collect();
        Ok(text.strip_prefix(' ').map(str::to_string).unwrap_or(text))
    }

    /// Number of whitespace-separated words the tokens decode to.
    pub fn word_count(&self, tokens: &[usize]) -> Result<usize> {
        Ok(self.decode(tokens)?.split_whitespace().count())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Vocab = serde_json::from_str(s)?;
        if v.pieces.get(BOS_ID).map(String::as_str) != Some(BOS)
            || v.pieces.get(EOS_ID).map(String::as_str) != Some(EOS)
            || v.blank_id != v.pieces.len()
        {
            return Err(Error::Format("vocabulary reserved ids are inconsistent".into()));
        }
        Ok(Vocab::from_parts(v.pieces, v.merges))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_json(&s)
    }
}

fn mark(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len() + 3);
    out.push(WORD_MARK);
    for c in text.chars() {
        match c {
            WORD_MARK => return Err(Error::UnknownChar(c)),
            ' ' => out.push(WORD_MARK),
            c => out.push(c),
        }
    }
    Ok(out)
}

/// Splits marked text before every marker.
fn chunks(marked: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in marked.char_indices() {
        if c == WORD_MARK && i > start {
            out.push(&marked[start..i]);
            start = i;
        }
    }
    if start < marked.len() {
        out.push(&marked[start..]);
    }
    out
}

/// Learns `target_size` word pieces (the character inventory plus merges)
/// by greedy most-frequent-pair merging. Ties go to the lexicographically
/// smallest pair.
pub fn train_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Empty("vocabulary corpus"));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    let mut chars = BTreeSet::new();
    chars.insert(WORD_MARK);
    for line in corpus {
        let line = line.as_ref();
        if line.is_empty() {
            continue;
        }
        let marked = mark(line)?;
        for chunk in chunks(&marked) {
            chars.extend(chunk.chars());
            *freq.entry(chunk.to_string()).or_default() += 1;
        }
    }
    if target_size < chars.len() {
        return Err(Error::VocabTooSmall { target: target_size, chars: chars.len() });
    }

    let mut words: Vec<(Vec<String>, usize)> =
        freq.into_iter().map(|(w, n)| (w.chars().map(String::from).collect(), n)).collect();
    words.sort();

    let mut pieces: Vec<String> = vec![BOS.into(), EOS.into()];
    pieces.extend(chars.iter().map(|c| c.to_string()));
    let mut known: BTreeSet<String> = pieces[RESERVED..].iter().cloned().collect();
    let mut merges = Vec::new();

    while known.len() < target_size {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, n) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += n;
            }
        }
        let Some(((a, b), _)) = counts.into_iter().max_by(|(p, x), (q, y)| x.cmp(y).then_with(|| q.cmp(p))) else {
            break;
        };
        let (a, b) = (a.to_string(), b.to_string());
        let joined = format!("{a}{b}");
        for (syms, _) in &mut words {
            let mut i = 0;
            let mut out = Vec::with_capacity(syms.len());
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(joined.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        if known.insert(joined.clone()) {
            pieces.push(joined);
        }
        merges.push((a, b));
    }
    Ok(Vocab::from_parts(pieces, merges))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus() -> Vec<&'static str> {
        vec!["flight to boston", "show me the flight", "a flight from denver to boston", "book it"]
    }

    #[test]
    fn most_frequent_pair_merges_first() {
        // Chunks "▁aaab" and "▁aab": (a,a) occurs 2 + 1 = 3 times.
        let v = train_vocab(&["aaab", "aab"], 4).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "a".to_string())]);
        assert!(v.pieces().contains(&"aa".to_string()));
    }

    #[test]
    fn inventory_size_means_no_merges() {
        let v = train_vocab(&["abc cab"], 4).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.size(), 2 + 4);
        assert!(matches!(train_vocab(&["abc"], 3), Err(Error::VocabTooSmall { target: 3, chars: 4 })));
    }

    #[test]
    fn reserved_ids_never_learned_or_encoded() {
        let v = train_vocab(&corpus(), 30).unwrap();
        assert_eq!(v.piece(BOS_ID), Some(BOS));
        assert_eq!(v.piece(EOS_ID), Some(EOS));
        assert_eq!(v.blank_id(), v.size());
        assert_eq!(v.output_dim(), v.size() + 1);
        for line in corpus() {
            for id in v.encode(line).unwrap() {
                assert!(!v.is_reserved(id));
            }
        }
        assert!(v.pieces()[RESERVED..].iter().all(|p| p != BOS && p != EOS));
    }

    #[test]
    fn round_trip_and_edge_cases() {
        let v = train_vocab(&corpus(), 40).unwrap();
        let ids = v.encode("flight to boston").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "flight to boston");
        assert!(v.encode("").unwrap().is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(ids.len() <= "flight to boston".chars().count());
        assert!(matches!(v.encode("flight to zurich"), Err(Error::UnknownChar('z'))));
        assert!(matches!(v.decode(&[BOS_ID]), Err(Error::BadToken(0))));
        assert!(matches!(v.decode(&[v.blank_id()]), Err(Error::BadToken(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_vocab(&corpus(), 35).unwrap().to_json().unwrap();
        let b = train_vocab(&corpus(), 35).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let v = Vocab::from_json(&a).unwrap();
        assert_eq!(v.encode("show me").unwrap(), train_vocab(&corpus(), 35).unwrap().encode("show me").unwrap());
    }

    #[test]
    fn word_count_follows_whitespace() {
        let v = train_vocab(&corpus(), 40).unwrap();
        let ids = v.encode("book the flight").unwrap();
        assert_eq!(v.word_count(&ids).unwrap(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn decode_inverts_encode(s in "[a-z ]{0,24}") {
            let v = train_vocab(&["the quick brown fox jumps over the lazy dog"], 45).unwrap();
            let ids = v.encode(&s).unwrap();
            prop_assert!(ids.len() <= s.chars().count().max(1) + 1);
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
        }
    }
}
