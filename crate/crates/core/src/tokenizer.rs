//! Vocabulary-driven WordPiece subtokenizer.
//!
//! Words arrive pre-split, so only the per-word part of BERT's pipeline is
//! needed: optional lowercasing, splitting punctuation into separate pieces,
//! then greedy longest-match-first WordPiece.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

const MAX_CHARS_PER_PIECE: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct WordPieceTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    lowercase: bool,
}

impl WordPieceTokenizer {
    pub fn from_tokens(vocab: Vec<String>, lowercase: bool) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            index.entry(tok.clone()).or_insert(i as u32);
        }
        for special in [UNK, CLS, SEP] {
            if !index.contains_key(special) {
                return Err(Error::Config(format!("vocabulary lacks {special}")));
            }
        }
        Ok(WordPieceTokenizer {
            vocab,
            index,
            lowercase,
        })
    }

    /// One token per line, as in BERT's `vocab.txt`.
    pub fn from_vocab_file(path: impl AsRef<Path>, lowercase: bool) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let vocab = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        Self::from_tokens(vocab, lowercase)
    }

    pub fn save_vocab(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.vocab.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Builds a lowercase vocabulary holding every piece of `words` plus all of
    /// their characters in both initial and `##` continuation form, so any word
    /// over the same alphabet tokenizes without `[UNK]`.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut pieces = BTreeSet::new();
        let mut chars = BTreeSet::new();
        for w in words {
            for piece in split_punctuation(&w.to_lowercase()) {
                for c in piece.chars() {
                    chars.insert(c);
                }
                pieces.insert(piece);
            }
        }
        let mut vocab: Vec<String> = [PAD, UNK, CLS, SEP, MASK]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut seen: BTreeSet<String> = vocab.iter().cloned().collect();
        let mut push = |tok: String, vocab: &mut Vec<String>| {
            if seen.insert(tok.clone()) {
                vocab.push(tok);
            }
        };
        for c in &chars {
            push(c.to_string(), &mut vocab);
            push(format!("##{c}"), &mut vocab);
        }
        for p in pieces {
            push(p, &mut vocab);
        }
        Self::from_tokens(vocab, true).expect("specials present")
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    pub fn cls_id(&self) -> u32 {
        self.index[CLS]
    }

    pub fn sep_id(&self) -> u32 {
        self.index[SEP]
    }

    pub fn unk_id(&self) -> u32 {
        self.index[UNK]
    }

    /// Subtoken strings of one word. Empty for words with no visible characters.
    pub fn tokenize_word(&self, word: &str) -> Vec<String> {
        let word = if self.lowercase {
            word.to_lowercase()
        } else {
            word.to_string()
        };
        let mut out = Vec::new();
        for piece in split_punctuation(&word) {
            self.wordpiece(&piece, &mut out);
        }
        out
    }

    pub fn tokenize_word_ids(&self, word: &str) -> Vec<u32> {
        self.tokenize_word(word)
            .iter()
            .map(|t| self.id(t).unwrap_or_else(|| self.unk_id()))
            .collect()
    }

    fn wordpiece(&self, piece: &str, out: &mut Vec<String>) {
        let chars: Vec<char> = piece.chars().collect();
        if chars.len() > MAX_CHARS_PER_PIECE {
            out.push(UNK.to_string());
            return;
        }
        let mut sub = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut cand: String = chars[start..end].iter().collect();
                if start > 0 {
                    cand.insert_str(0, "##");
                }
                if self.index.contains_key(&cand) {
                    found = Some(cand);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(tok) => {
                    sub.push(tok);
                    start = end;
                }
                None => {
                    out.push(UNK.to_string());
                    return;
                }
            }
        }
        out.extend(sub);
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Splits on whitespace and isolates every punctuation character.
fn split_punctuation(word: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in word.chars() {
        if c.is_whitespace() || c.is_control() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if is_punctuation(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(vocab: &[&str]) -> WordPieceTokenizer {
        let mut v: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        v.extend(vocab.iter().map(|s| s.to_string()));
        WordPieceTokenizer::from_tokens(v, true).unwrap()
    }

    #[test]
    fn greedy_longest_match() {
        let t = tok(&["un", "##aff", "##able", "unaff"]);
        assert_eq!(t.tokenize_word("Unaffable"), ["unaff", "##able"]);
        let t = tok(&["un", "##aff", "##able"]);
        assert_eq!(t.tokenize_word("unaffable"), ["un", "##aff", "##able"]);
        assert_eq!(t.tokenize_word("xyz"), [UNK]);
    }

    #[test]
    fn punctuation_is_split() {
        let t = tok(&["astronomical", "_", "object", ","]);
        assert_eq!(
            t.tokenize_word("astronomical_object"),
            ["astronomical", "_", "object"]
        );
        assert_eq!(t.tokenize_word(","), [","]);
        assert!(t.tokenize_word("").is_empty());
    }

    #[test]
    fn built_vocab_covers_its_alphabet() {
        let t = WordPieceTokenizer::build(["steve", "jobs"]);
        assert_eq!(t.tokenize_word("Steve"), ["steve"]);
        assert_eq!(t.tokenize_word("best"), ["b", "##e", "##s", "##t"]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let t = WordPieceTokenizer::build(["alpha", "beta"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        t.save_vocab(&p).unwrap();
        let back = WordPieceTokenizer::from_vocab_file(&p, true).unwrap();
        assert_eq!(back, t);
    }
}
