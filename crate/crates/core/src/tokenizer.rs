//! Subword vocabulary construction, fixed-length encoding and masked-LM
//! corruption.
//!
//! Text is lowercased and split into pieces: runs of alphanumeric characters
//! or single punctuation characters. A piece that follows whitespace carries a
//! leading `▁` marker, so decoding can restore word boundaries. The
//! vocabulary is grown by repeatedly merging the most frequent adjacent symbol
//! pair inside pieces; encoding is greedy longest-match.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIALS: usize = 5;

/// Word-boundary marker prefixed to pieces that follow whitespace.
pub const BOUNDARY: char = '▁';

pub const DEFAULT_MAX_LEN: usize = 256;
pub const DEFAULT_VOCAB_SIZE: usize = 4000;

pub const MASK_SELECT_PROB: f64 = 0.15;
pub const MASK_REPLACE_PROB: f64 = 0.8;
pub const MASK_RANDOM_PROB: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index_of: HashMap<String, u32>,
    max_token_chars: usize,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds from an ordered token list whose first five entries are the
    /// special tokens in canonical order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let specials = [PAD, UNK, CLS, SEP, MASK];
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != specials {
            return Err(Error::InvalidArgument(
                "vocabulary must start with [PAD],[UNK],[CLS],[SEP],[MASK]".into(),
            ));
        }
        let mut index_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(Error::InvalidArgument(format!(
                    "invalid token at line {}",
                    i + 1
                )));
            }
            if index_of.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token `{t}`")));
            }
        }
        let max_token_chars = tokens[NUM_SPECIALS..]
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Vocabulary {
            tokens,
            index_of,
            max_token_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Greedy frequency-based subword vocabulary of at most `target_size`
    /// tokens (specials included).
    pub fn build<S: AsRef<str>>(texts: &[S], target_size: usize) -> Result<Self> {
        let mut word_freq: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for piece in pre_tokenize(text.as_ref()) {
                *word_freq.entry(piece).or_insert(0) += 1;
            }
        }
        if word_freq.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }

        let mut alphabet: Vec<char> = word_freq
            .keys()
            .flat_map(|w| w.chars())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        alphabet.sort_unstable();
        if target_size <= alphabet.len() + NUM_SPECIALS {
            return Err(Error::InvalidArgument(format!(
                "target size {target_size} must exceed {} characters plus {NUM_SPECIALS} specials",
                alphabet.len()
            )));
        }

        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut symbol_of: HashMap<String, u32> = HashMap::new();
        let mut symbols: Vec<String> = Vec::new();
        for c in &alphabet {
            let s = c.to_string();
            symbol_of.insert(s.clone(), symbols.len() as u32);
            symbols.push(s.clone());
            tokens.push(s);
        }

        // Words in a stable order so pair bookkeeping is reproducible.
        let mut words: Vec<(String, u64)> = word_freq.into_iter().collect();
        words.sort_unstable();
        let mut segs: Vec<Vec<u32>> = words
            .iter()
            .map(|(w, _)| w.chars().map(|c| symbol_of[&c.to_string()]).collect())
            .collect();
        let freqs: Vec<i64> = words.iter().map(|(_, f)| *f as i64).collect();

        let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (wi, seg) in segs.iter().enumerate() {
            for w in seg.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) += freqs[wi];
                pair_words.entry((w[0], w[1])).or_default().insert(wi);
            }
        }

        while tokens.len() < target_size {
            let best = pair_counts
                .iter()
                .filter(|(_, c)| **c > 0)
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        // Ties go to the lexicographically smallest pair.
                        let ka = (&symbols[pa.0 as usize], &symbols[pa.1 as usize]);
                        let kb = (&symbols[pb.0 as usize], &symbols[pb.1 as usize]);
                        kb.cmp(&ka)
                    })
                })
                .map(|(p, _)| *p);
            let Some(pair) = best else { break };

            let merged = format!("{}{}", symbols[pair.0 as usize], symbols[pair.1 as usize]);
            let new_sym = match symbol_of.get(&merged) {
                Some(s) => *s,
                None => {
                    let s = symbols.len() as u32;
                    symbol_of.insert(merged.clone(), s);
                    symbols.push(merged.clone());
                    tokens.push(merged);
                    s
                }
            };

            let mut affected: Vec<usize> = pair_words
                .remove(&pair)
                .unwrap_or_default()
                .into_iter()
                .collect();
            affected.sort_unstable();
            for wi in affected {
                let seg = &mut segs[wi];
                for w in seg.windows(2) {
                    let p = (w[0], w[1]);
                    if let Some(c) = pair_counts.get_mut(&p) {
                        *c -= freqs[wi];
                    }
                    if let Some(set) = pair_words.get_mut(&p) {
                        set.remove(&wi);
                    }
                }
                let mut out = Vec::with_capacity(seg.len());
                let mut i = 0;
                while i < seg.len() {
                    if i + 1 < seg.len() && (seg[i], seg[i + 1]) == pair {
                        out.push(new_sym);
                        i += 2;
                    } else {
                        out.push(seg[i]);
                        i += 1;
                    }
                }
                *seg = out;
                for w in seg.windows(2) {
                    let p = (w[0], w[1]);
                    *pair_counts.entry(p).or_insert(0) += freqs[wi];
                    pair_words.entry(p).or_default().insert(wi);
                }
            }
            pair_counts.remove(&pair);
        }
        Vocabulary::from_tokens(tokens)
    }

    /// One token per line; line number (from zero) is the id.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let tokens = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Vocabulary::from_tokens(tokens)
    }

    /// Subword ids for `text` without control tokens.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in pre_tokenize(text) {
            let chars: Vec<char> = piece.chars().collect();
            let mut start = 0;
            while start < chars.len() {
                let mut found = None;
                let longest = self.max_token_chars.min(chars.len() - start);
                for len in (1..=longest).rev() {
                    let cand: String = chars[start..start + len].iter().collect();
                    if let Some(id) = self.id(&cand) {
                        if !Self::is_special(id) {
                            found = Some((id, len));
                            break;
                        }
                    }
                }
                match found {
                    Some((id, len)) => {
                        ids.push(id);
                        start += len;
                    }
                    None => {
                        ids.push(UNK_ID);
                        start += 1;
                    }
                }
            }
        }
        ids
    }

    /// `[CLS] content [SEP] [PAD]…` of exactly `max_len` ids; content beyond
    /// `max_len - 2` subwords is dropped from the tail.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "sequence length must fit [CLS] and [SEP]");
        let mut content = self.tokenize(text);
        content.truncate(max_len - 2);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend_from_slice(&content);
        ids.push(SEP_ID);
        let used = ids.len();
        ids.resize(max_len, PAD_ID);
        let mut attention_mask = vec![1u8; used];
        attention_mask.resize(max_len, 0);
        TokenSequence {
            ids,
            attention_mask,
        }
    }

    /// Inverse of tokenisation up to lowercasing and whitespace collapsing.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                UNK_ID => out.push('\u{FFFD}'),
                id if Self::is_special(id) => {}
                id => out.push_str(self.token(id).unwrap_or("")),
            }
        }
        out.replace(BOUNDARY, " ")
    }
}

/// Lowercased pieces with boundary markers.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut pieces = Vec::new();
    let mut current = String::new();
    let mut after_space = false;
    let flush = |current: &mut String, pieces: &mut Vec<String>| {
        if !current.is_empty() {
            pieces.push(std::mem::take(current));
        }
    };
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut current, &mut pieces);
            after_space = true;
            continue;
        }
        let lower: Vec<char> = ch.to_lowercase().collect();
        if ch.is_alphanumeric() {
            if current.is_empty() && after_space && !pieces.is_empty() {
                current.push(BOUNDARY);
            }
            current.extend(lower);
        } else {
            flush(&mut current, &mut pieces);
            let mut p = String::new();
            if after_space && !pieces.is_empty() {
                p.push(BOUNDARY);
            }
            p.extend(lower);
            pieces.push(p);
        }
        after_space = false;
    }
    flush(&mut current, &mut pieces);
    pieces
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of non-pad positions (`[CLS]` and `[SEP]` included).
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().filter(|m| **m == 1).count()
    }

    /// Positions strictly between `[CLS]` and `[SEP]`.
    pub fn content_positions(&self) -> std::ops::Range<usize> {
        1..self.active_len().saturating_sub(1).max(1)
    }

    pub fn content_len(&self) -> usize {
        self.content_positions().len()
    }

    pub fn valid(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|m| *m == 1).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub corrupted: TokenSequence,
    /// Original token id at every selected position.
    pub targets: BTreeMap<usize, u32>,
}

/// What happened to a selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Masked-LM corruption: each content position is selected with probability
/// 0.15; a selected position becomes `[MASK]` with probability 0.8, a random
/// non-special token with 0.1, or stays unchanged with 0.1. If nothing is
/// selected one uniformly chosen content position is forced.
pub fn mask<R: Rng + ?Sized>(
    seq: &TokenSequence,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedSequence {
    mask_with_actions(seq, vocab_size, rng).0
}

/// [`mask`] that also reports the action applied at each selected position.
pub fn mask_with_actions<R: Rng + ?Sized>(
    seq: &TokenSequence,
    vocab_size: usize,
    rng: &mut R,
) -> (MaskedSequence, BTreeMap<usize, MaskAction>) {
    assert!(
        vocab_size > NUM_SPECIALS,
        "vocabulary has no ordinary tokens"
    );
    let content = seq.content_positions();
    let mut corrupted = seq.clone();
    let mut targets = BTreeMap::new();
    let mut actions = BTreeMap::new();
    if content.is_empty() {
        return (MaskedSequence { corrupted, targets }, actions);
    }
    let mut selected: Vec<usize> = content
        .clone()
        .filter(|_| rng.random::<f64>() < MASK_SELECT_PROB)
        .collect();
    if selected.is_empty() {
        selected.push(rng.random_range(content.clone()));
    }
    for pos in selected {
        targets.insert(pos, seq.ids[pos]);
        let roll = rng.random::<f64>();
        let action = if roll < MASK_REPLACE_PROB {
            corrupted.ids[pos] = MASK_ID;
            MaskAction::Mask
        } else if roll < MASK_REPLACE_PROB + MASK_RANDOM_PROB {
            corrupted.ids[pos] = rng.random_range(NUM_SPECIALS as u32..vocab_size as u32);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        actions.insert(pos, action);
    }
    (MaskedSequence { corrupted, targets }, actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_corpus_merges_most_frequent_pair() {
        // a a a b: pairs (a,a)x2, (a,b)x1 -> merge "aa".
        let v = Vocabulary::build(&["aaab"], 8).unwrap();
        assert_eq!(
            v.tokens(),
            &["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "b", "aa"]
        );
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(Vocabulary::build::<&str>(&[], 100).is_err());
        assert!(Vocabulary::build(&["   "], 100).is_err());
        assert!(Vocabulary::build(&["ab"], 7).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let texts = [
            "buffer overflow in the parser",
            "sql injection in login form",
            "overflow of buffer",
        ];
        let a = Vocabulary::build(&texts, 60).unwrap();
        let b = Vocabulary::build(&texts, 60).unwrap();
        assert_eq!(a.tokens(), b.tokens());
    }

    #[test]
    fn pre_tokenize_marks_boundaries() {
        assert_eq!(
            pre_tokenize("Buffer overflow, in  X.509"),
            vec!["buffer", "▁overflow", ",", "▁in", "▁x", ".", "509"]
        );
    }

    #[test]
    fn encode_layout() {
        let v = Vocabulary::build(&["abc def"], 20).unwrap();
        let s = v.encode("", 6);
        assert_eq!(s.ids, vec![CLS_ID, SEP_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(s.attention_mask, vec![1, 1, 0, 0, 0, 0]);

        let n = v.tokenize("abc def").len();
        let exact = v.encode("abc def", n + 2);
        assert!(exact.attention_mask.iter().all(|m| *m == 1));
        assert_eq!(*exact.ids.last().unwrap(), SEP_ID);

        let doubled = v.encode("abc def abc def", n + 2);
        assert_eq!(doubled.ids, exact.ids);
    }

    #[test]
    fn unseen_characters_become_unk() {
        let v = Vocabulary::build(&["abc"], 10).unwrap();
        assert_eq!(v.tokenize("az"), vec![v.id("a").unwrap(), UNK_ID]);
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::build(&["heap overflow", "stack overflow"], 30).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(Vocabulary::read(buf.as_slice()).unwrap(), v);
        assert!(Vocabulary::read("a\nb\n".as_bytes()).is_err());
    }

    #[test]
    fn masking_preserves_layout_and_excludes_controls() {
        let v = Vocabulary::build(&["one two three four five six seven"], 40).unwrap();
        let s = v.encode("one two three four five six seven", 32);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let m = mask(&s, v.len(), &mut rng);
            assert_eq!(m.corrupted.ids.len(), s.ids.len());
            assert_eq!(m.corrupted.attention_mask, s.attention_mask);
            assert!(!m.targets.is_empty());
            let content = s.content_positions();
            assert!(m.targets.keys().all(|p| content.contains(p)));
            for (i, (a, b)) in s.ids.iter().zip(&m.corrupted.ids).enumerate() {
                if a != b {
                    assert!(m.targets.contains_key(&i));
                }
            }
        }
    }

    #[test]
    fn masking_is_seed_deterministic() {
        let v = Vocabulary::build(&["alpha beta gamma delta"], 30).unwrap();
        let s = v.encode("alpha beta gamma delta", 16);
        let a = mask(&s, v.len(), &mut ChaCha8Rng::seed_from_u64(3));
        let b = mask(&s, v.len(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }
}
