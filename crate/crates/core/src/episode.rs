//! Tagged sentences, entity type sets, span conversion and N-way K-shot
//! episode sampling.
//!
//! Word indices are 0-based and spans are inclusive on both ends: `(start, end)`
//! with `start <= end < sentence.len()`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tag for words outside any entity.
pub const OUTSIDE: &str = "O";
/// Name of the non-entity class at index 0 of every type set.
pub const NONE: &str = "none";

/// Sampling gives up after this many rejected attempts.
pub const MAX_SAMPLING_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub id: String,
    pub words: Vec<String>,
    /// Bare entity type names or [`OUTSIDE`]; same length as `words`.
    pub tags: Vec<String>,
}

impl TaggedSentence {
    pub fn new(id: impl Into<String>, words: Vec<String>, tags: Vec<String>) -> Result<Self> {
        let id = id.into();
        if words.len() != tags.len() {
            return Err(Error::Contract(format!(
                "sentence {id}: {} words but {} tags",
                words.len(),
                tags.len()
            )));
        }
        Ok(TaggedSentence { id, words, tags })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn spans(&self) -> Vec<SpanAnnotation> {
        tags_to_spans(self)
    }
}

/// Unlabeled inclusive word span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl SpanAnnotation {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        SpanAnnotation {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

/// Ordered class inventory of an episode, `none` first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct EntityTypeSet {
    types: Vec<String>,
}

impl EntityTypeSet {
    /// Builds `{none, t_1, ..}` from the entity types (without `none`).
    pub fn new<I, S>(entity_types: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut types = vec![NONE.to_string()];
        types.extend(entity_types.into_iter().map(Into::into));
        Self::from_full(types)
    }

    /// Accepts a list that must already start with `none`.
    pub fn from_full(types: Vec<String>) -> Result<Self> {
        if types.first().map(String::as_str) != Some(NONE) {
            return Err(Error::Contract(format!(
                "type set must start with \"{NONE}\": {types:?}"
            )));
        }
        if types.len() < 2 {
            return Err(Error::Contract(
                "type set needs at least one entity type".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for t in &types {
            if !seen.insert(t.as_str()) {
                return Err(Error::Contract(format!("duplicate type {t:?} in type set")));
            }
        }
        Ok(EntityTypeSet { types })
    }

    /// `m`, including `none`.
    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[String] {
        &self.types
    }

    pub fn entity_types(&self) -> &[String] {
        &self.types[1..]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t == name)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.types[idx]
    }
}

impl TryFrom<Vec<String>> for EntityTypeSet {
    type Error = Error;

    fn try_from(types: Vec<String>) -> Result<Self> {
        if types.first().map(String::as_str) == Some(NONE) {
            Self::from_full(types)
        } else {
            Self::new(types)
        }
    }
}

impl From<EntityTypeSet> for Vec<String> {
    fn from(t: EntityTypeSet) -> Self {
        t.types
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<TaggedSentence>,
    pub query: Vec<TaggedSentence>,
    pub type_set: EntityTypeSet,
    pub n_way: usize,
    pub k_shot: usize,
}

/// Sentences plus their type inventory. Episode-format inputs also carry the
/// episodes they were read from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<TaggedSentence>,
    /// Entity types in order of first appearance.
    pub types: Vec<String>,
    pub episodes: Vec<Episode>,
}

impl Corpus {
    pub fn from_sentences(sentences: Vec<TaggedSentence>) -> Self {
        let types = inventory(&sentences);
        Corpus {
            sentences,
            types,
            episodes: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty() && self.episodes.is_empty()
    }
}

fn inventory<'a>(sentences: impl IntoIterator<Item = &'a TaggedSentence>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut types = Vec::new();
    for s in sentences {
        for t in &s.tags {
            if t != OUTSIDE && seen.insert(t.clone()) {
                types.push(t.clone());
            }
        }
    }
    types
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// `word<TAB>tag` per line, blank line between sentences.
    #[default]
    ColumnBio,
    /// One episode per line as JSON.
    EpisodeJson,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "column-bio" => Ok(CorpusFormat::ColumnBio),
            "episode-json" => Ok(CorpusFormat::EpisodeJson),
            other => Err(Error::Config(format!(
                "unknown corpus format {other:?} (expected column-bio or episode-json)"
            ))),
        }
    }
}

/// Strips `B-`/`I-`/`E-`/`S-`/`L-`/`U-` prefixes. `O` stays `O`.
pub fn bare_tag(tag: &str) -> &str {
    match tag.split_once('-') {
        Some((prefix, rest))
            if matches!(prefix, "B" | "I" | "E" | "S" | "L" | "U") && !rest.is_empty() =>
        {
            rest
        }
        _ => tag,
    }
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus> {
    let path = path.as_ref();
    match format {
        CorpusFormat::ColumnBio => read_column_file(path),
        CorpusFormat::EpisodeJson => {
            let episodes = read_episodes(path)?;
            let sentences: Vec<TaggedSentence> = episodes
                .iter()
                .flat_map(|e| e.support.iter().chain(&e.query).cloned())
                .collect();
            let mut corpus = Corpus::from_sentences(sentences);
            corpus.episodes = episodes;
            Ok(corpus)
        }
    }
}

fn read_column_file(path: &Path) -> Result<Corpus> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut sentences = Vec::new();
    let mut words = Vec::new();
    let mut tags = Vec::new();
    let mut first_line = 0;
    let mut flush = |words: &mut Vec<String>, tags: &mut Vec<String>, first_line: usize| {
        if !words.is_empty() {
            sentences.push(TaggedSentence {
                id: format!("L{first_line}"),
                words: std::mem::take(words),
                tags: std::mem::take(tags),
            });
        }
    };
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut words, &mut tags, first_line);
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else {
            line.split_whitespace().collect()
        };
        if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected \"word<TAB>tag\", found {} field(s)", fields.len()),
            ));
        }
        if words.is_empty() {
            first_line = line_no;
        }
        words.push(fields[0].to_string());
        tags.push(bare_tag(fields[1]).to_string());
    }
    flush(&mut words, &mut tags, first_line);
    Ok(Corpus::from_sentences(sentences))
}

pub fn write_column_file(path: impl AsRef<Path>, sentences: &[TaggedSentence]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        for (w, t) in s.words.iter().zip(&s.tags) {
            writeln!(out, "{w}\t{t}")?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SetRecord {
    word: Vec<Vec<String>>,
    label: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    support: SetRecord,
    query: SetRecord,
    types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k_shot: Option<usize>,
}

fn set_to_record(sentences: &[TaggedSentence]) -> SetRecord {
    SetRecord {
        word: sentences.iter().map(|s| s.words.clone()).collect(),
        label: sentences.iter().map(|s| s.tags.clone()).collect(),
    }
}

fn record_to_set(
    rec: SetRecord,
    prefix: &str,
    path: &Path,
    line: usize,
) -> Result<Vec<TaggedSentence>> {
    if rec.word.len() != rec.label.len() {
        return Err(Error::parse(
            path,
            line,
            "word and label lists differ in length",
        ));
    }
    rec.word
        .into_iter()
        .zip(rec.label)
        .enumerate()
        .map(|(i, (words, labels))| {
            if words.len() != labels.len() {
                return Err(Error::parse(
                    path,
                    line,
                    format!(
                        "{prefix} sentence {i}: {} words but {} labels",
                        words.len(),
                        labels.len()
                    ),
                ));
            }
            let tags = labels.iter().map(|l| bare_tag(l).to_string()).collect();
            Ok(TaggedSentence {
                id: format!("{prefix}:{i}"),
                words,
                tags,
            })
        })
        .collect()
}

/// Reads JSON-lines episodes. Sentence ids are `e{line}:{support|query}:{i}`.
pub fn read_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut episodes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        let support = record_to_set(rec.support, &format!("e{line_no}:support"), path, line_no)?;
        let query = record_to_set(rec.query, &format!("e{line_no}:query"), path, line_no)?;
        let type_set = EntityTypeSet::try_from(rec.types)
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        let n_way = type_set.len() - 1;
        let k_shot = rec
            .k_shot
            .unwrap_or_else(|| infer_k_shot(&support, &type_set));
        episodes.push(Episode {
            support,
            query,
            type_set,
            n_way,
            k_shot,
        });
    }
    Ok(episodes)
}

/// Smallest per-class support count, at least 1.
fn infer_k_shot(support: &[TaggedSentence], types: &EntityTypeSet) -> usize {
    let counts = mention_counts(support);
    types
        .entity_types()
        .iter()
        .map(|t| counts.get(t.as_str()).copied().unwrap_or(0))
        .min()
        .unwrap_or(1)
        .max(1)
}

pub fn episode_to_json(ep: &Episode) -> Result<String> {
    let rec = EpisodeRecord {
        support: set_to_record(&ep.support),
        query: set_to_record(&ep.query),
        types: ep.type_set.entity_types().to_vec(),
        k_shot: Some(ep.k_shot),
    };
    Ok(serde_json::to_string(&rec)?)
}

pub fn write_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for ep in episodes {
        writeln!(out, "{}", episode_to_json(ep)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Maximal runs of an identical non-`O` tag, sorted by `(start, end)`.
pub fn tags_to_spans(sent: &TaggedSentence) -> Vec<SpanAnnotation> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < sent.tags.len() {
        let tag = &sent.tags[i];
        if tag == OUTSIDE {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < sent.tags.len() && &sent.tags[i + 1] == tag {
            i += 1;
        }
        spans.push(SpanAnnotation::new(start, i, tag.clone()));
        i += 1;
    }
    spans
}

/// Inverse of [`tags_to_spans`] for non-overlapping spans.
pub fn spans_to_tags(len: usize, spans: &[SpanAnnotation]) -> Vec<String> {
    let mut tags = vec![OUTSIDE.to_string(); len];
    for s in spans {
        for t in &mut tags[s.start..=s.end] {
            *t = s.label.clone();
        }
    }
    tags
}

/// Mention counts per type over a set of sentences.
pub fn mention_counts(sentences: &[TaggedSentence]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for span in tags_to_spans(s) {
            *counts.entry(span.label).or_insert(0) += 1;
        }
    }
    counts
}

/// Copy of `sent` with every type outside `keep` relabeled to `O`.
pub fn restrict_tags(sent: &TaggedSentence, keep: &EntityTypeSet) -> TaggedSentence {
    let tags = sent
        .tags
        .iter()
        .map(|t| {
            if t != OUTSIDE && keep.index_of(t).is_none_or(|i| i == 0) {
                OUTSIDE.to_string()
            } else {
                t.clone()
            }
        })
        .collect();
    TaggedSentence {
        id: sent.id.clone(),
        words: sent.words.clone(),
        tags,
    }
}

/// Samples an N-way K-shot episode with the greedy K..2K procedure.
///
/// Classes are drawn among those with at least `2 * k_shot` mentions. The
/// support set is filled by repeatedly taking the sentence that contributes
/// the most mentions to still under-filled classes without pushing any class
/// past `2 * k_shot`; the query set is filled the same way from the remaining
/// sentences. Mentions of unselected types are relabeled `O`.
pub fn sample_episode(
    corpus: &Corpus,
    n_way: usize,
    k_shot: usize,
    rng_seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Config("n_way and k_shot must be at least 1".into()));
    }
    let per_sentence: Vec<BTreeMap<String, usize>> = corpus
        .sentences
        .iter()
        .map(|s| mention_counts(std::slice::from_ref(s)))
        .collect();
    let mut totals: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &corpus.types {
        totals.insert(t.as_str(), 0);
    }
    for counts in &per_sentence {
        for (t, c) in counts {
            *totals.entry(t.as_str()).or_insert(0) += c;
        }
    }
    let eligible: Vec<&str> = corpus
        .types
        .iter()
        .map(String::as_str)
        .filter(|t| totals[t] >= 2 * k_shot)
        .collect();
    if eligible.len() < n_way {
        let deficient = corpus
            .types
            .iter()
            .filter(|t| totals[t.as_str()] < 2 * k_shot)
            .cloned()
            .collect();
        return Err(Error::Infeasible {
            attempts: 0,
            classes: deficient,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut last_unfilled: Vec<String> = Vec::new();
    for _ in 0..MAX_SAMPLING_ATTEMPTS {
        let mut classes: Vec<&str> = eligible.clone();
        classes.shuffle(&mut rng);
        classes.truncate(n_way);

        let mut order: Vec<usize> = (0..corpus.sentences.len())
            .filter(|&i| classes.iter().any(|c| per_sentence[i].contains_key(*c)))
            .collect();
        order.shuffle(&mut rng);

        let support = match greedy_fill(&order, &per_sentence, &classes, k_shot, &BTreeSet::new()) {
            Ok(s) => s,
            Err(unfilled) => {
                last_unfilled = unfilled;
                continue;
            }
        };
        let taken: BTreeSet<usize> = support.iter().copied().collect();
        let query = match greedy_fill(&order, &per_sentence, &classes, k_shot, &taken) {
            Ok(q) => q,
            Err(unfilled) => {
                last_unfilled = unfilled;
                continue;
            }
        };

        let type_set = EntityTypeSet::new(classes.iter().map(|c| c.to_string()))?;
        let take = |idx: &[usize]| -> Vec<TaggedSentence> {
            idx.iter()
                .map(|&i| restrict_tags(&corpus.sentences[i], &type_set))
                .collect()
        };
        return Ok(Episode {
            support: take(&support),
            query: take(&query),
            type_set,
            n_way,
            k_shot,
        });
    }
    Err(Error::Infeasible {
        attempts: MAX_SAMPLING_ATTEMPTS,
        classes: last_unfilled,
    })
}

/// Greedy K..2K fill. On failure returns the classes still below K.
fn greedy_fill(
    order: &[usize],
    per_sentence: &[BTreeMap<String, usize>],
    classes: &[&str],
    k_shot: usize,
    excluded: &BTreeSet<usize>,
) -> std::result::Result<Vec<usize>, Vec<String>> {
    let mut counts: HashMap<&str, usize> = classes.iter().map(|c| (*c, 0)).collect();
    let mut chosen: Vec<usize> = Vec::new();
    let mut used: BTreeSet<usize> = BTreeSet::new();
    loop {
        let unfilled: Vec<&str> = classes
            .iter()
            .copied()
            .filter(|c| counts[c] < k_shot)
            .collect();
        if unfilled.is_empty() {
            return Ok(chosen);
        }
        let mut best: Option<(usize, usize)> = None;
        for &i in order {
            if excluded.contains(&i) || used.contains(&i) {
                continue;
            }
            let sc = &per_sentence[i];
            let overflow = classes
                .iter()
                .any(|c| counts[c] + sc.get(*c).copied().unwrap_or(0) > 2 * k_shot);
            if overflow {
                continue;
            }
            let gain: usize = unfilled
                .iter()
                .map(|c| sc.get(*c).copied().unwrap_or(0).min(k_shot - counts[c]))
                .sum();
            if gain > 0 && best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let Some((i, _)) = best else {
            return Err(unfilled.iter().map(|c| c.to_string()).collect());
        };
        for c in classes {
            *counts.get_mut(c).unwrap() += per_sentence[i].get(*c).copied().unwrap_or(0);
        }
        used.insert(i);
        chosen.push(i);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassCount {
    pub class: String,
    pub support: usize,
    pub query: usize,
    /// Support count within `[K, 2K]`.
    pub in_band: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub classes: Vec<ClassCount>,
    pub disjoint: bool,
    pub n_way_matches: bool,
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks the K..2K band on support, support/query disjointness (by sentence
/// id) and that the type set has `n_way` entity types. Never fails.
pub fn validate_episode(ep: &Episode) -> ValidationReport {
    let support = mention_counts(&ep.support);
    let query = mention_counts(&ep.query);
    let mut failures = Vec::new();
    let classes: Vec<ClassCount> = ep
        .type_set
        .entity_types()
        .iter()
        .map(|t| {
            let s = support.get(t).copied().unwrap_or(0);
            let q = query.get(t).copied().unwrap_or(0);
            let in_band = s >= ep.k_shot && s <= 2 * ep.k_shot;
            if !in_band {
                failures.push(format!(
                    "class {t}: {s} support mentions outside [{}, {}]",
                    ep.k_shot,
                    2 * ep.k_shot
                ));
            }
            ClassCount {
                class: t.clone(),
                support: s,
                query: q,
                in_band,
            }
        })
        .collect();
    for t in support.keys().chain(query.keys()) {
        if ep.type_set.index_of(t).is_none_or(|i| i == 0) {
            failures.push(format!("tag {t} is not in the episode type set"));
        }
    }
    let support_ids: BTreeSet<&str> = ep.support.iter().map(|s| s.id.as_str()).collect();
    let shared: Vec<&str> = ep
        .query
        .iter()
        .map(|s| s.id.as_str())
        .filter(|id| support_ids.contains(id))
        .collect();
    let disjoint = shared.is_empty();
    if !disjoint {
        failures.push(format!("sentences shared by support and query: {shared:?}"));
    }
    let n_way_matches = ep.type_set.len() - 1 == ep.n_way;
    if !n_way_matches {
        failures.push(format!(
            "type set has {} entity types, n_way is {}",
            ep.type_set.len() - 1,
            ep.n_way
        ));
    }
    ValidationReport {
        classes,
        disjoint,
        n_way_matches,
        failures,
    }
}
