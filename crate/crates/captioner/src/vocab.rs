//! Word-level tokenizer and vocabulary for the synthetic caption language.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const NUM_SPECIALS: usize = 4;

/// Immutable token↔id map. Non-special tokens occupy dense ids `4..V`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

/// Whitespace word splitter. Also used by the metrics module so training,
/// rewards and evaluation agree on tokenization.
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

impl Vocabulary {
    /// Build from a caption corpus. Tokens are ranked by (frequency desc,
    /// lexicographic) before id assignment, so the result is independent of
    /// corpus order.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for caption in corpus {
            for w in words(caption.as_ref()) {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(ranked.into_iter().map(|(w, _)| w.to_string()))
    }

    fn from_tokens(tokens: impl Iterator<Item = String>) -> Result<Self> {
        let mut id_to_token: Vec<String> =
            ["<pad>", "<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let mut token_to_id = HashMap::new();
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate token {tok:?} in vocabulary")));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Index(format!("token id {id} out of range for vocab of {}", self.len())))
    }

    /// BOS-prefixed, EOS-suffixed encoding; unknown words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        for w in words(text) {
            ids.push(self.token_to_id.get(w).copied().unwrap_or(UNK));
        }
        ids.push(EOS);
        ids
    }

    /// Strips PAD/BOS, stops at the first EOS, joins words with single spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out: Vec<&str> = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => out.push(self.token(id)?),
            }
        }
        Ok(out.join(" "))
    }

    /// One non-special token per line; line number == id − 4.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.id_to_token[NUM_SPECIALS..].join("\n");
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(|l| l.to_string()))
    }

    /// Token list without specials, in id order (for checkpoint embedding).
    pub fn plain_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    pub fn from_plain_tokens(tokens: &[String]) -> Result<Self> {
        Self::from_tokens(tokens.iter().cloned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_counts_by_hand() {
        let v = Vocabulary::build(&["a red ball", "a blue ball"]).unwrap();
        assert_eq!(v.len(), 4 + 4);
        // frequency 2: a, ball (lexicographic); frequency 1: blue, red
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("ball"), Some(5));
        assert_eq!(v.id("blue"), Some(6));
        assert_eq!(v.id("red"), Some(7));
    }

    #[test]
    fn build_is_order_independent() {
        let a = Vocabulary::build(&["a red ball", "a blue ball"]).unwrap();
        let b = Vocabulary::build(&["a blue ball", "a red ball"]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_empty_corpus_errors() {
        assert!(Vocabulary::build(&[] as &[&str]).is_err());
    }

    #[test]
    fn single_word_corpus() {
        let v = Vocabulary::build(&["x"]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode("x"), vec![BOS, 4, EOS]);
    }

    #[test]
    fn encode_empty_and_unknown() {
        let v = Vocabulary::build(&["a red ball"]).unwrap();
        assert_eq!(v.encode(""), vec![BOS, EOS]);
        assert_eq!(v.encode("zebra"), vec![BOS, UNK, EOS]);
        let ids = v.encode("a ball");
        assert_eq!(ids, vec![BOS, v.id("a").unwrap(), v.id("ball").unwrap(), EOS]);
    }

    #[test]
    fn decode_round_trip_and_eos_stop() {
        let v = Vocabulary::build(&["a red ball"]).unwrap();
        assert_eq!(v.decode(&v.encode("a red ball")).unwrap(), "a red ball");
        assert_eq!(v.decode(&v.encode("")).unwrap(), "");
        let a = v.id("a").unwrap();
        assert_eq!(v.decode(&[BOS, a, EOS, a, a]).unwrap(), "a");
    }

    #[test]
    fn decode_out_of_range_errors() {
        let v = Vocabulary::build(&["a"]).unwrap();
        assert!(matches!(v.decode(&[BOS, 99, EOS]), Err(Error::Index(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let v = Vocabulary::build(&["a red ball", "a blue ball"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }
}
