//! Prompted input construction: `[prompt words, label words, sentence]`.
//!
//! The template `"Find some entities, such as {types}: "` renders as
//! `Find some entities , such as none person company :` followed by the
//! sentence. Prompt words before the placeholder form the prefix, the colon
//! after it forms the suffix; both count toward `l`. Label words sit between
//! them, one per class, so `m` always equals the size of the type set.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::episode::EntityTypeSet;
use crate::error::{Error, Result};
use crate::tokenizer::{WordPieceTokenizer, UNK};

pub const TYPES_PLACEHOLDER: &str = "{types}";
pub const DEFAULT_TEMPLATE: &str = "Find some entities, such as {types}: ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            text: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = Error;

    fn try_from(text: String) -> Result<Self> {
        PromptTemplate::new(text)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.text
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.matches(TYPES_PLACEHOLDER).count() != 1 {
            return Err(Error::Config(format!(
                "prompt template must contain {TYPES_PLACEHOLDER} exactly once: {text:?}"
            )));
        }
        Ok(PromptTemplate { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Text after the type placeholder (`": "` for the default template).
    pub fn separator(&self) -> &str {
        self.text
            .split_once(TYPES_PLACEHOLDER)
            .map(|(_, s)| s)
            .unwrap_or("")
    }

    /// The prompt as a string with the comma-joined type list filled in.
    pub fn render(&self, types: &EntityTypeSet) -> String {
        let list = types
            .names()
            .iter()
            .map(|t| label_word(t).unwrap_or_else(|_| t.clone()))
            .collect::<Vec<_>>()
            .join(", ");
        self.text.replacen(TYPES_PLACEHOLDER, &list, 1)
    }

    /// Prompt words outside the label list, prefix then suffix.
    pub fn prompt_words(&self) -> Vec<String> {
        let mut w = self.prefix_words();
        w.extend(self.suffix_words());
        w
    }

    fn prefix_words(&self) -> Vec<String> {
        let (before, _) = self
            .text
            .split_once(TYPES_PLACEHOLDER)
            .unwrap_or((&self.text, ""));
        split_words(before)
    }

    fn suffix_words(&self) -> Vec<String> {
        split_words(self.separator())
    }
}

/// Whitespace split with every punctuation character as its own word.
fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() {
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
    }
    out
}

/// Normalizes a class name into a single label word: inner whitespace becomes
/// `_`, surrounding punctuation is stripped.
pub fn label_word(type_name: &str) -> Result<String> {
    let joined = type_name.split_whitespace().collect::<Vec<_>>().join("_");
    let trimmed = joined.trim_matches(|c: char| c.is_ascii_punctuation() && c != '_');
    if trimmed.is_empty() {
        return Err(Error::Prompt(format!(
            "type name {type_name:?} has no label word"
        )));
    }
    Ok(trimmed.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptedInput {
    /// Prompt prefix, label words, prompt suffix, sentence words.
    pub words: Vec<String>,
    pub prefix_len: usize,
    pub m: usize,
    pub suffix_len: usize,
    pub n: usize,
    pub subtokens: Vec<String>,
    pub token_ids: Vec<u32>,
    /// Subtoken range of each word, indexed like `words`.
    pub alignment: Vec<Range<usize>>,
}

impl PromptedInput {
    /// Number of prompt words that are not label words.
    pub fn l(&self) -> usize {
        self.prefix_len + self.suffix_len
    }

    /// Word index of the first label word.
    pub fn label_offset(&self) -> usize {
        self.prefix_len
    }

    /// Word index of the first sentence word.
    pub fn sentence_offset(&self) -> usize {
        self.prefix_len + self.m + self.suffix_len
    }

    /// Word indices of the prompt words (prefix then suffix).
    pub fn prompt_word_indices(&self) -> Vec<usize> {
        (0..self.prefix_len)
            .chain(self.prefix_len + self.m..self.sentence_offset())
            .collect()
    }

    pub fn sentence_words(&self) -> &[String] {
        &self.words[self.sentence_offset()..]
    }

    pub fn label_words(&self) -> &[String] {
        &self.words[self.label_offset()..self.label_offset() + self.m]
    }
}

pub fn build_prompted_input(
    sentence: &[String],
    type_set: &EntityTypeSet,
    template: &PromptTemplate,
    tokenizer: &WordPieceTokenizer,
) -> Result<PromptedInput> {
    if sentence.is_empty() {
        return Err(Error::Prompt("empty sentence".into()));
    }
    let prefix = template.prefix_words();
    let suffix = template.suffix_words();
    let labels = type_set
        .names()
        .iter()
        .map(|t| label_word(t))
        .collect::<Result<Vec<_>>>()?;

    let mut words = Vec::with_capacity(prefix.len() + labels.len() + suffix.len() + sentence.len());
    words.extend(prefix.iter().cloned());
    words.extend(labels.iter().cloned());
    words.extend(suffix.iter().cloned());
    words.extend(sentence.iter().cloned());

    let label_range = prefix.len()..prefix.len() + labels.len();
    let mut subtokens = Vec::new();
    let mut token_ids = Vec::new();
    let mut alignment = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        let mut pieces = tokenizer.tokenize_word(w);
        if pieces.is_empty() {
            if label_range.contains(&i) {
                return Err(Error::Prompt(format!(
                    "type name {w:?} produces no subtokens"
                )));
            }
            pieces.push(UNK.to_string());
        }
        let start = subtokens.len();
        for p in pieces {
            token_ids.push(tokenizer.id(&p).unwrap_or_else(|| tokenizer.unk_id()));
            subtokens.push(p);
        }
        alignment.push(start..subtokens.len());
    }

    Ok(PromptedInput {
        words,
        prefix_len: prefix.len(),
        m: labels.len(),
        suffix_len: suffix.len(),
        n: sentence.len(),
        subtokens,
        token_ids,
        alignment,
    })
}

/// Subtoken ranges of the label words, in type-set order.
pub fn label_word_indices(pi: &PromptedInput) -> Vec<Range<usize>> {
    pi.alignment[pi.label_offset()..pi.label_offset() + pi.m].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn tokenizer() -> WordPieceTokenizer {
        WordPieceTokenizer::build(
            "find some entities , such as none person company : steve jobs founded apple in 1976 . a t1 astronomical _ object"
                .split_whitespace(),
        )
    }

    #[test]
    fn worked_example() {
        let types = EntityTypeSet::new(["person", "company"]).unwrap();
        let pi = build_prompted_input(
            &words("Steve Jobs founded Apple in 1976 ."),
            &types,
            &PromptTemplate::default(),
            &tokenizer(),
        )
        .unwrap();
        assert_eq!(
            pi.words.join(" "),
            "Find some entities , such as none person company : Steve Jobs founded Apple in 1976 ."
        );
        assert_eq!(pi.m, 3);
        assert_eq!(pi.n, 7);
        assert_eq!(pi.l(), 7);
        assert_eq!(pi.l() + pi.m + pi.n, pi.words.len());
        assert_eq!(pi.label_words(), ["none", "person", "company"]);
        let ranges = label_word_indices(&pi);
        assert_eq!(ranges.len(), 3);
        assert_eq!(pi.subtokens[ranges[1].clone()], ["person"]);
    }

    #[test]
    fn render_ends_with_separator() {
        let t = PromptTemplate::default();
        let types = EntityTypeSet::new(["person", "company"]).unwrap();
        let r = t.render(&types);
        assert_eq!(r, "Find some entities, such as none, person, company: ");
        assert!(r.ends_with(t.separator()));
    }

    #[test]
    fn minimal_input() {
        let types = EntityTypeSet::new(["t1"]).unwrap();
        let pi = build_prompted_input(
            &words("a"),
            &types,
            &PromptTemplate::default(),
            &tokenizer(),
        )
        .unwrap();
        assert_eq!((pi.m, pi.n), (2, 1));
        assert_eq!(pi.l(), 7);
    }

    #[test]
    fn multi_word_type_is_one_label_word() {
        let types = EntityTypeSet::new(["astronomical object"]).unwrap();
        let tok = tokenizer();
        let pi =
            build_prompted_input(&words("a"), &types, &PromptTemplate::default(), &tok).unwrap();
        assert_eq!(pi.label_words(), ["none", "astronomical_object"]);
        let ranges = label_word_indices(&pi);
        assert_eq!(
            ranges[1].len(),
            tok.tokenize_word("astronomical_object").len()
        );
        assert_eq!(ranges[1].len(), 3);
    }

    #[test]
    fn empty_type_name_is_rejected() {
        let types = EntityTypeSet::new(["!!"]).unwrap();
        let err = build_prompted_input(
            &words("a"),
            &types,
            &PromptTemplate::default(),
            &tokenizer(),
        );
        assert!(matches!(err, Err(Error::Prompt(_))));
    }

    #[test]
    fn alignment_covers_subtokens_in_order() {
        let types = EntityTypeSet::new(["person", "company"]).unwrap();
        let pi = build_prompted_input(
            &words("Steve Jobs founded Apple-Computer in 1976 ."),
            &types,
            &PromptTemplate::default(),
            &tokenizer(),
        )
        .unwrap();
        let mut next = 0;
        let mut rebuilt = Vec::new();
        for r in &pi.alignment {
            assert_eq!(r.start, next);
            assert!(!r.is_empty());
            next = r.end;
            rebuilt.extend_from_slice(&pi.subtokens[r.clone()]);
        }
        assert_eq!(next, pi.subtokens.len());
        assert_eq!(rebuilt, pi.subtokens);
    }

    #[test]
    fn template_change_only_touches_prompt_words() {
        let types = EntityTypeSet::new(["person", "company"]).unwrap();
        let sentence = words("Steve Jobs founded Apple");
        let tok = tokenizer();
        let a = build_prompted_input(&sentence, &types, &PromptTemplate::default(), &tok).unwrap();
        let b = build_prompted_input(
            &sentence,
            &types,
            &PromptTemplate::new("entities: {types} .").unwrap(),
            &tok,
        )
        .unwrap();
        assert_eq!(a.label_words(), b.label_words());
        assert_eq!(a.sentence_words(), b.sentence_words());
    }
}
