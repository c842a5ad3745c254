//! Reversible byte-level BPE.
//!
//! Ids `0..3` are the specials, `3..259` the raw bytes, and every merge adds
//! one id after that. Text is pre-split into whitespace runs, word runs and
//! single punctuation characters; merges never cross those chunks.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const N_SPECIAL: usize = 3;
const BYTE_OFFSET: usize = N_SPECIAL;
const FIRST_MERGE: usize = BYTE_OFFSET + 256;

/// Words that must encode to exactly one token each.
pub const LABEL_WORDS: [&str; 2] = ["yes", "no"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(usize, usize)>,
    ranks: HashMap<(usize, usize), usize>,
    pieces: Vec<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    format: String,
    vocab_size: usize,
    merges: Vec<(usize, usize)>,
}

const FILE_FORMAT: &str = "byte-bpe-v1";

fn char_class(c: char) -> u8 {
    if c.is_whitespace() {
        0
    } else if c.is_alphanumeric() || c == '_' {
        1
    } else {
        2
    }
}

/// Splits `text` into merge-isolated chunks.
pub fn pre_split(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev: Option<u8> = None;
    for (i, c) in text.char_indices() {
        let class = char_class(c);
        if let Some(p) = prev {
            if p != class || class == 2 {
                out.push(&text[start..i]);
                start = i;
            }
        }
        prev = Some(class);
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn apply_merge(seq: &mut Vec<usize>, pair: (usize, usize), id: usize) {
    let mut i = 0;
    let mut w = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            seq[w] = id;
            i += 2;
        } else {
            seq[w] = seq[i];
            i += 1;
        }
        w += 1;
    }
    seq.truncate(w);
}

impl Tokenizer {
    /// Byte-only tokenizer plus the label-word merges.
    pub fn bytes_only() -> Self {
        Self::from_merges(Self::label_merges()).expect("label merges are valid")
    }

    fn label_merges() -> Vec<(usize, usize)> {
        let mut merges = Vec::new();
        let mut next = FIRST_MERGE;
        for word in LABEL_WORDS {
            let mut ids = word.bytes().map(|b| b as usize + BYTE_OFFSET);
            let mut acc = ids.next().expect("non-empty label word");
            for id in ids {
                merges.push((acc, id));
                acc = next;
                next += 1;
            }
        }
        merges
    }

    /// Learns merges on `corpus` until the vocabulary holds `vocab_size` ids
    /// or no pair occurs twice.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        let mut merges = Self::label_merges();
        let min = FIRST_MERGE + merges.len();
        if vocab_size < min {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is below the {min} ids needed for specials, bytes and label words"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in corpus {
            for chunk in pre_split(text.as_ref()) {
                *counts.entry(chunk).or_default() += 1;
            }
        }
        let mut chunks: Vec<(&str, usize)> = counts.into_iter().collect();
        chunks.sort_unstable();
        let mut words: Vec<(Vec<usize>, usize)> = chunks
            .into_iter()
            .map(|(c, n)| (c.bytes().map(|b| b as usize + BYTE_OFFSET).collect(), n))
            .collect();
        for (i, &pair) in merges.iter().enumerate() {
            for (w, _) in &mut words {
                apply_merge(w, pair, FIRST_MERGE + i);
            }
        }
        while FIRST_MERGE + merges.len() < vocab_size {
            let mut pairs: HashMap<(usize, usize), usize> = HashMap::new();
            for (w, n) in &words {
                for p in w.windows(2) {
                    *pairs.entry((p[0], p[1])).or_default() += n;
                }
            }
            // Highest count, then smallest pair, for a seed-free deterministic order.
            let best = pairs
                .into_iter()
                .filter(|&(_, n)| n >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
            let Some((pair, _)) = best else { break };
            let id = FIRST_MERGE + merges.len();
            merges.push(pair);
            for (w, _) in &mut words {
                apply_merge(w, pair, id);
            }
        }
        Self::from_merges(merges)
    }

    fn from_merges(merges: Vec<(usize, usize)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = vec![Vec::new(); N_SPECIAL];
        pieces.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, &(a, b)) in merges.iter().enumerate() {
            let id = FIRST_MERGE + i;
            if a < N_SPECIAL || b < N_SPECIAL || a >= id || b >= id {
                return Err(Error::Format(format!("merge {i} refers to invalid ids ({a}, {b})")));
            }
            if ranks.insert((a, b), i).is_some() {
                return Err(Error::Format(format!("duplicate merge ({a}, {b})")));
            }
            let mut p = pieces[a].clone();
            p.extend_from_slice(&pieces[b]);
            pieces.push(p);
        }
        let tok = Tokenizer { merges, ranks, pieces };
        for word in LABEL_WORDS {
            if tok.encode(word).len() != 1 {
                return Err(Error::Config(format!("label word {word:?} is not a single token")));
            }
        }
        Ok(tok)
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_MERGE + self.merges.len()
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<usize>) {
        let mut seq: Vec<usize> = chunk.iter().map(|&b| b as usize + BYTE_OFFSET).collect();
        while seq.len() > 1 {
            let best = seq
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).copied())
                .min();
            let Some(rank) = best else { break };
            apply_merge(&mut seq, self.merges[rank], FIRST_MERGE + rank);
        }
        out.extend(seq);
    }

    /// Never emits a special id.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::with_capacity(text.len() / 2);
        for chunk in pre_split(text) {
            self.encode_chunk(chunk.as_bytes(), &mut out);
        }
        out
    }

    /// Byte-string variant; invalid UTF-8 is split into single bytes.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<usize> {
        let mut out = Vec::new();
        for chunk in bytes.utf8_chunks() {
            out.extend(self.encode(chunk.valid()));
            out.extend(chunk.invalid().iter().map(|&b| b as usize + BYTE_OFFSET));
        }
        out
    }

    /// Concatenated bytes of every non-special id.
    pub fn decode_bytes(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            match self.pieces.get(id) {
                Some(p) => out.extend_from_slice(p),
                None => {
                    return Err(Error::Format(format!(
                        "token id {id} outside vocabulary of {}",
                        self.vocab_size()
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Invalid UTF-8 (possible in generated text) is replaced, not rejected.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Id of a word that encodes to a single token.
    pub fn single_token(&self, word: &str) -> Result<usize> {
        match self.encode(word).as_slice() {
            [id] => Ok(*id),
            _ => Err(Error::Config(format!("{word:?} is not a single token"))),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TokenizerFile {
            format: FILE_FORMAT.into(),
            vocab_size: self.vocab_size(),
            merges: self.merges.clone(),
        })
        .expect("tokenizer serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: TokenizerFile =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("tokenizer file: {e}")))?;
        if f.format != FILE_FORMAT {
            return Err(Error::Format(format!("unknown tokenizer format {:?}", f.format)));
        }
        let tok = Self::from_merges(f.merges)?;
        if tok.vocab_size() != f.vocab_size {
            return Err(Error::Format(format!(
                "tokenizer declares {} ids but defines {}",
                f.vocab_size,
                tok.vocab_size()
            )));
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trained() -> Tokenizer {
        let corpus = [
            "fn main() {\n    println!(\"hello\");\n}",
            "def add(a, b):\n    return a + b",
            "please add a null check here",
            "yes no yes no",
        ];
        Tokenizer::train(&corpus, 320).unwrap()
    }

    #[test]
    fn pre_split_keeps_every_byte() {
        let s = "a  b\t\tfoo_bar(x)==1 ü";
        assert_eq!(pre_split(s).concat(), s);
        assert_eq!(pre_split(s)[1], "  ");
        assert!(pre_split("").is_empty());
    }

    #[test]
    fn labels_are_single_tokens_and_specials_never_appear() {
        let t = trained();
        assert_ne!(t.single_token("yes").unwrap(), t.single_token("no").unwrap());
        let ids = t.encode("yes, no\n\0\u{1}\u{2}");
        assert!(ids.iter().all(|&i| i >= N_SPECIAL));
    }

    #[test]
    fn training_compresses_and_is_deterministic() {
        let t = trained();
        assert!(t.vocab_size() > FIRST_MERGE + 3);
        assert_eq!(t, trained());
        let s = "    return a + b";
        assert!(t.encode(s).len() < s.len());
    }

    #[test]
    fn small_vocab_is_a_config_error() {
        assert!(matches!(Tokenizer::train(&["x"], 258), Err(Error::Config(_))));
        assert!(matches!(Tokenizer::train(&["x"], 3), Err(Error::Config(_))));
    }

    #[test]
    fn decode_skips_specials_and_rejects_unknown_ids() {
        let t = trained();
        let mut ids = vec![BOS];
        ids.extend(t.encode("ok"));
        ids.push(EOS);
        assert_eq!(t.decode(&ids).unwrap(), "ok");
        assert!(matches!(t.decode(&[t.vocab_size()]), Err(Error::Format(_))));
    }

    #[test]
    fn json_round_trip() {
        let t = trained();
        assert_eq!(Tokenizer::from_json(&t.to_json()).unwrap(), t);
        assert!(Tokenizer::from_json("{").is_err());
    }

    #[test]
    fn consecutive_spaces_survive() {
        let t = trained();
        let s = "a    b  \n\n  c";
        assert_eq!(t.decode(&t.encode(s)).unwrap(), s);
        assert_eq!(t.decode(&t.encode("")).unwrap(), "");
    }

    proptest! {
        #[test]
        fn round_trip_any_string(s in any::<String>()) {
            let t = trained();
            prop_assert_eq!(t.decode(&t.encode(&s)).unwrap(), s);
        }

        #[test]
        fn round_trip_any_bytes(b in prop::collection::vec(any::<u8>(), 0..64)) {
            let t = trained();
            prop_assert_eq!(t.decode_bytes(&t.encode_bytes(&b)).unwrap(), b);
        }
    }
}
