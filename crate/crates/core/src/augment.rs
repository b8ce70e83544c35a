//! Rule-based text annotation: gazetteer and pattern NER over plain
//! transcripts, used to manufacture extra tagged training data and as the
//! text-NER stage of the pipeline baseline.

use crate::alphabet::{encode, is_marker_char, Category, Entity, TaggedTranscript};
use crate::corpus::{ManifestRecord, Source};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("input contains marker character {0:?}; already annotated?")]
    MarkerInInput(char),
    #[error("record {0} is already augmented")]
    AlreadyAugmented(String),
    #[error("rule set: {0}")]
    BadRules(String),
    #[error(transparent)]
    Codec(#[from] crate::alphabet::CodecError),
}

/// Gazetteers plus numeric/temporal patterns, deserializable from JSON.
///
/// The amount pattern matches one or more number words followed by a unit
/// word; the time pattern matches any single word from `time_words`.
/// Overlaps are resolved by longest match, then earliest start, then the
/// `priority` order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSet {
    pub gazetteers: BTreeMap<Category, Vec<String>>,
    #[serde(default)]
    pub number_words: Vec<String>,
    #[serde(default)]
    pub amount_units: Vec<String>,
    #[serde(default)]
    pub time_words: Vec<String>,
    #[serde(default = "default_priority")]
    pub priority: Vec<Category>,
}

fn default_priority() -> Vec<Category> {
    Category::ALL.to_vec()
}

impl Default for RuleSet {
    fn default() -> Self {
        let gazetteers: BTreeMap<Category, Vec<String>> = [
            (
                Category::Pers,
                vec!["marie", "jean", "paul", "anna", "luc", "sophie", "hugo", "claire"],
            ),
            (
                Category::Func,
                vec!["ministre", "maire", "docteur", "juge", "avocat", "prefet"],
            ),
            (
                Category::Org,
                vec!["sncf", "airbus", "renault", "unesco", "senat", "mairie"],
            ),
            (
                Category::Loc,
                vec!["paris", "lyon", "nice", "brest", "rouen", "toulon", "nancy", "dijon"],
            ),
            (Category::Prod, vec!["tgv", "ariane", "clio", "rafale"]),
            (Category::Event, vec!["cannes", "mondial", "marathon"]),
        ]
        .into_iter()
        .map(|(c, v)| (c, v.into_iter().map(str::to_string).collect()))
        .collect();
        RuleSet {
            gazetteers,
            number_words: ["dix", "vingt", "cent", "mille", "trois", "sept", "soixante"]
                .map(str::to_string)
                .to_vec(),
            amount_units: ["euros", "ans"].map(str::to_string).to_vec(),
            time_words: ["hier", "demain", "lundi", "mardi", "jeudi", "samedi", "janvier", "juin"]
                .map(str::to_string)
                .to_vec(),
            priority: default_priority(),
        }
    }
}

impl RuleSet {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let check = |phrase: &str| -> Result<(), AugmentError> {
            if phrase.trim().is_empty() {
                return Err(AugmentError::BadRules("empty phrase".into()));
            }
            if phrase.chars().any(|c| c.is_uppercase()) {
                return Err(AugmentError::BadRules(format!(
                    "phrase {phrase:?} is not lowercase"
                )));
            }
            Ok(())
        };
        for phrase in self.gazetteers.values().flatten() {
            check(phrase)?;
        }
        for w in self
            .number_words
            .iter()
            .chain(&self.amount_units)
            .chain(&self.time_words)
        {
            check(w)?;
            if w.split_whitespace().count() != 1 {
                return Err(AugmentError::BadRules(format!(
                    "pattern word {w:?} must be a single word"
                )));
            }
        }
        Ok(())
    }

    fn priority_index(&self, cat: Category) -> usize {
        self.priority
            .iter()
            .position(|&c| c == cat)
            .unwrap_or(self.priority.len() + cat as usize)
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    start: usize,
    len: usize,
    category: Category,
}

/// Left-to-right longest-match annotation of a plain transcript.
pub fn annotate(plain: &str, rules: &RuleSet) -> Result<TaggedTranscript, AugmentError> {
    if let Some(c) = plain.chars().find(|&c| is_marker_char(c)) {
        return Err(AugmentError::MarkerInInput(c));
    }
    rules.validate()?;
    let words: Vec<String> = plain.split_whitespace().map(str::to_lowercase).collect();
    let mut candidates: Vec<Candidate> = Vec::new();

    for (&category, phrases) in &rules.gazetteers {
        for phrase in phrases {
            let pw: Vec<&str> = phrase.split_whitespace().collect();
            if pw.is_empty() || pw.len() > words.len() {
                continue;
            }
            for start in 0..=words.len() - pw.len() {
                if words[start..start + pw.len()].iter().map(String::as_str).eq(pw.iter().copied())
                {
                    candidates.push(Candidate {
                        start,
                        len: pw.len(),
                        category,
                    });
                }
            }
        }
    }
    // Amount: maximal run of number words capped by a unit word.
    for start in 0..words.len() {
        if !rules.number_words.contains(&words[start]) {
            continue;
        }
        let mut j = start;
        while j < words.len() && rules.number_words.contains(&words[j]) {
            j += 1;
        }
        if j < words.len() && rules.amount_units.contains(&words[j]) {
            candidates.push(Candidate {
                start,
                len: j - start + 1,
                category: Category::Amount,
            });
        }
    }
    // Time: single weekday/month-style words.
    for (i, w) in words.iter().enumerate() {
        if rules.time_words.contains(w) {
            candidates.push(Candidate {
                start: i,
                len: 1,
                category: Category::Time,
            });
        }
    }

    candidates.sort_by(|a, b| {
        b.len
            .cmp(&a.len)
            .then(a.start.cmp(&b.start))
            .then(rules.priority_index(a.category).cmp(&rules.priority_index(b.category)))
    });
    let mut taken = vec![false; words.len()];
    let mut accepted: Vec<Candidate> = Vec::new();
    for c in candidates {
        if taken[c.start..c.start + c.len].iter().any(|&t| t) {
            continue;
        }
        taken[c.start..c.start + c.len].iter_mut().for_each(|t| *t = true);
        accepted.push(c);
    }
    accepted.sort_by_key(|c| c.start);
    let entities: Vec<Entity> = accepted
        .into_iter()
        .map(|c| Entity::from_span(c.category, &words, c.start, c.start + c.len))
        .collect();
    Ok(encode(&words, &entities)?)
}

/// Re-emits every record with its plain transcript annotated; feature
/// paths are untouched (annotation does not change the audio side).
pub fn augment_corpus(
    records: &[ManifestRecord],
    rules: &RuleSet,
) -> Result<Vec<ManifestRecord>, AugmentError> {
    records
        .iter()
        .map(|r| {
            if r.source == Source::Augmented {
                return Err(AugmentError::AlreadyAugmented(r.id.clone()));
            }
            let tagged = annotate(&r.plain, rules)?.canonical();
            Ok(ManifestRecord {
                id: format!("aug-{}", r.id),
                features: r.features.clone(),
                plain: r.plain.clone(),
                tagged,
                split: r.split,
                source: Source::Augmented,
            })
        })
        .collect()
}
