//! Template-and-lexicon corpus generator for desk-scale runs.
//!
//! Entity surface forms come from per-type lexicons and are slotted into
//! type-agnostic templates, so a mention's type is only recoverable from the
//! surface form (and, for novel types, from the support set).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::episode::{Corpus, TaggedSentence, OUTSIDE};
use crate::error::{Error, Result};

/// Entity types with their surface forms.
pub const LEXICON: &[(&str, &[&str])] = &[
    (
        "person",
        &[
            "alice",
            "bob",
            "carol smith",
            "dmitri",
            "eve",
            "frank jones",
            "grace",
            "hiro",
        ],
    ),
    (
        "city",
        &[
            "paris",
            "rome",
            "new york",
            "tokyo",
            "lagos",
            "lima",
            "oslo",
            "san diego",
        ],
    ),
    (
        "company",
        &[
            "acme",
            "globex",
            "initech",
            "umbrella corp",
            "hooli",
            "vandelay",
            "soylent",
            "wonka works",
        ],
    ),
    (
        "animal",
        &[
            "zebra",
            "otter",
            "red fox",
            "falcon",
            "lynx",
            "walrus",
            "gecko",
            "snow leopard",
        ],
    ),
    (
        "food",
        &[
            "pasta",
            "sushi",
            "apple pie",
            "tacos",
            "curry",
            "ramen",
            "bagel",
            "fried rice",
        ],
    ),
    (
        "planet",
        &[
            "mars", "venus", "jupiter", "saturn", "neptune", "mercury", "uranus", "pluto",
        ],
    ),
    (
        "sport",
        &[
            "tennis",
            "rugby",
            "water polo",
            "chess",
            "hockey",
            "cricket",
            "golf",
            "table tennis",
        ],
    ),
    (
        "instrument",
        &[
            "violin",
            "cello",
            "grand piano",
            "flute",
            "banjo",
            "oboe",
            "harp",
            "bass guitar",
        ],
    ),
];

/// `#` marks an entity slot. Templates share a small vocabulary so that the
/// context words are frequent and the slot fillers are the rare words.
const TEMPLATES: &[&str] = &[
    "we talked about # today .",
    "they talked about # and # today .",
    "the report mentions # .",
    "the report mentions # and # .",
    "# was in the report .",
    "we heard that # was in the report today .",
    "they heard about # .",
    "the report was about # and # .",
];

/// Surface forms of a lexicon type.
pub fn surface_forms(type_name: &str) -> Option<&'static [&'static str]> {
    LEXICON
        .iter()
        .find(|(t, _)| *t == type_name)
        .map(|(_, f)| *f)
}

/// Every word the generator can emit.
pub fn vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&str> = TEMPLATES
        .iter()
        .flat_map(|t| t.split_whitespace())
        .filter(|w| *w != "#")
        .collect();
    for (t, forms) in LEXICON {
        words.push(t);
        words.extend(forms.iter().flat_map(|f| f.split_whitespace()));
    }
    words
}

/// `count` sentences whose mentions are drawn from `types`. Sentence ids are
/// `{prefix}{i}`. The first slot of sentence `i` cycles through the types and
/// then through each type's surface forms, so `count >= 8 * types.len()`
/// covers the whole lexicon of every type.
pub fn generate(
    types: &[&str],
    count: usize,
    seed: u64,
    prefix: &str,
) -> Result<Vec<TaggedSentence>> {
    let lex: Vec<(&str, &[&str])> = types
        .iter()
        .map(|t| {
            surface_forms(t)
                .map(|f| (*t, f))
                .ok_or_else(|| Error::Config(format!("no synthetic lexicon for type {t:?}")))
        })
        .collect::<Result<_>>()?;
    if lex.is_empty() {
        return Err(Error::Config(
            "synthetic corpus needs at least one type".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let template = TEMPLATES.choose(&mut rng).expect("templates");
        let mut words = Vec::new();
        let mut tags = Vec::new();
        let mut slot = 0;
        for tok in template.split_whitespace() {
            if tok == "#" {
                let form = if slot == 0 {
                    let (t, forms) = lex[i % lex.len()];
                    (t, forms[(i / lex.len()) % forms.len()])
                } else {
                    let (t, forms) = lex[rng.gen_range(0..lex.len())];
                    (t, *forms.choose(&mut rng).expect("forms"))
                };
                slot += 1;
                let (t, form) = form;
                for w in form.split_whitespace() {
                    words.push(w.to_string());
                    tags.push(t.to_string());
                }
            } else {
                words.push(tok.to_string());
                tags.push(OUTSIDE.to_string());
            }
        }
        out.push(TaggedSentence::new(format!("{prefix}{i}"), words, tags)?);
    }
    Ok(out)
}

pub fn corpus(types: &[&str], count: usize, seed: u64, prefix: &str) -> Result<Corpus> {
    Ok(Corpus::from_sentences(generate(
        types, count, seed, prefix,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{mention_counts, sample_episode, validate_episode};

    #[test]
    fn deterministic_and_balanced() {
        let a = generate(&["person", "city"], 40, 3, "t").unwrap();
        assert_eq!(a, generate(&["person", "city"], 40, 3, "t").unwrap());
        let counts = mention_counts(&a);
        assert!(counts["person"] >= 20 && counts["city"] >= 20);
    }

    #[test]
    fn sampled_episodes_validate() {
        let c = corpus(&["person", "city", "food"], 40, 1, "t").unwrap();
        for seed in 0..5 {
            let ep = sample_episode(&c, 2, 2, seed).unwrap();
            assert!(validate_episode(&ep).passed());
        }
    }

    #[test]
    fn first_slots_cover_the_lexicon() {
        let s = generate(&["person", "city"], 16, 9, "c").unwrap();
        let words: std::collections::HashSet<&str> = s
            .iter()
            .flat_map(|s| s.words.iter().map(String::as_str))
            .collect();
        for t in ["person", "city"] {
            for form in surface_forms(t).unwrap() {
                assert!(form.split_whitespace().all(|w| words.contains(w)), "{form}");
            }
        }
    }

    #[test]
    fn unknown_type_is_rejected() {
        assert!(matches!(
            generate(&["galaxy"], 3, 1, "x"),
            Err(Error::Config(_))
        ));
    }
}
