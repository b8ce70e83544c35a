//! Synthetic corpus generation and the dataset file formats.
//!
//! Stands in for real speech corpora at desk scale: every character of the
//! base alphabet gets a fixed random prototype vector, an utterance is the
//! concatenation of its characters' prototypes (each held for a random
//! number of frames, plus Gaussian noise), and marker characters get no
//! acoustic realization at all: the net has to infer them from context.
//!
//! On disk a corpus is a JSONL manifest plus one little-endian `f32` binary
//! file per utterance (`EMFT` magic, version, T, F header).

use crate::alphabet::{self, encode, Category, Entity};
use crate::scalar::Scalar;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("feature sequence must have at least one frame")]
    Empty,
    #[error("feature value at ({0}, {1}) is not finite")]
    NonFinite(usize, usize),
    #[error("category {0} has positive weight but an empty gazetteer")]
    EmptyGazetteer(Category),
    #[error("corpus spec: {0}")]
    BadSpec(String),
    #[error("character {0:?} has no acoustic realization")]
    NotAcoustic(char),
    #[error("tempo range must be positive, got ({0}, {1})")]
    BadTempoRange(f64, f64),
    #[error("feature file {path}: bad magic")]
    BadMagic { path: PathBuf },
    #[error("feature file {path}: unsupported version {version}")]
    BadVersion { path: PathBuf, version: u32 },
    #[error("feature file {path}: header says {expected} floats, payload has {got}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("manifest line {line}: {msg}")]
    BadManifest { line: usize, msg: String },
    #[error("utterance {id}: {source}")]
    Utterance {
        id: String,
        #[source]
        source: Box<CorpusError>,
    },
    #[error(transparent)]
    Codec(#[from] alphabet::CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A T×F matrix of real-valued frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<F: Scalar> {
    frames: Array2<F>,
}

impl<F: Scalar> FeatureSequence<F> {
    pub fn new(frames: Array2<F>) -> Result<Self, CorpusError> {
        if frames.nrows() == 0 {
            return Err(CorpusError::Empty);
        }
        for ((t, d), v) in frames.indexed_iter() {
            if !v.is_finite() {
                return Err(CorpusError::NonFinite(t, d));
            }
        }
        Ok(FeatureSequence { frames })
    }

    pub fn frames(&self) -> &Array2<F> {
        &self.frames
    }

    /// Number of frames T.
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Feature dimension F.
    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Casts every entry to another scalar type.
    pub fn convert<G: Scalar>(&self) -> FeatureSequence<G> {
        FeatureSequence {
            frames: self.frames.mapv(|v| G::from_f64_c(v.to_f64_c())),
        }
    }
}

/// Which data split an utterance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Where a manifest record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Gold,
    Augmented,
}

/// Number of utterances per split.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

/// Template token: `"w"` draws a filler word, `"ent"` draws a weighted
/// category and a gazetteer phrase, `"ent:pers"` pins the category, and
/// anything else is a literal word.
pub type Template = Vec<String>;

/// Everything the generator needs, deserializable from a JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub templates: Vec<Template>,
    pub gazetteers: BTreeMap<Category, Vec<String>>,
    pub category_weights: BTreeMap<Category, f64>,
    pub vocabulary: Vec<String>,
    pub counts: SplitCounts,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub duration_range: (usize, usize),
    pub seed: u64,
}

impl Default for CorpusSpec {
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
            (
                Category::Amount,
                vec![
                    "dix euros",
                    "vingt euros",
                    "cent euros",
                    "trois ans",
                    "sept ans",
                    "dix sept ans",
                    "soixante dix sept ans",
                ],
            ),
            (
                Category::Time,
                vec!["hier", "demain", "lundi", "mardi", "jeudi", "samedi", "janvier", "juin"],
            ),
            (Category::Event, vec!["cannes", "mondial", "marathon"]),
        ]
        .into_iter()
        .map(|(c, v)| (c, v.into_iter().map(str::to_string).collect()))
        .collect();
        // Default weights follow the category distribution of a large
        // broadcast-news NER corpus (train-split counts).
        let category_weights: BTreeMap<Category, f64> = [
            (Category::Pers, 22115.0),
            (Category::Func, 6628.0),
            (Category::Org, 15804.0),
            (Category::Loc, 18159.0),
            (Category::Prod, 2317.0),
            (Category::Time, 12020.0),
            (Category::Amount, 5959.0),
            (Category::Event, 321.0),
        ]
        .into_iter()
        .collect();
        let vocabulary = [
            "le", "la", "un", "une", "de", "du", "il", "elle", "on", "est", "va", "vient",
            "parle", "dit", "voit", "visite", "pour", "avec", "dans", "et", "puis", "ici",
            "alors", "bien",
        ]
        .into_iter()
        .map(str::to_string)
        .collect();
        let t = |s: &str| -> Template { s.split_whitespace().map(str::to_string).collect() };
        let templates = vec![
            t("w ent w w"),
            t("w w ent w ent"),
            t("ent w w"),
            t("w ent"),
            t("w w w ent w"),
            t("w ent w ent w w"),
            t("w w ent w w ent w"),
            t("w ent ent w"),
            t("w w w"),
        ];
        CorpusSpec {
            templates,
            gazetteers,
            category_weights,
            vocabulary,
            counts: SplitCounts {
                train: 2000,
                dev: 200,
                test: 200,
            },
            feature_dim: 16,
            noise_sigma: 0.3,
            duration_range: (2, 5),
            seed: 17,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.templates.is_empty() {
            return Err(CorpusError::BadSpec("templates must be non-empty".into()));
        }
        if self.vocabulary.is_empty() {
            return Err(CorpusError::BadSpec("vocabulary must be non-empty".into()));
        }
        if self.feature_dim == 0 {
            return Err(CorpusError::BadSpec("feature_dim must be positive".into()));
        }
        if self.duration_range.0 == 0 || self.duration_range.0 > self.duration_range.1 {
            return Err(CorpusError::BadSpec(format!(
                "duration_range {:?} must be 1 <= lo <= hi",
                self.duration_range
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(CorpusError::BadSpec("noise_sigma must be >= 0".into()));
        }
        for (cat, w) in &self.category_weights {
            if *w < 0.0 {
                return Err(CorpusError::BadSpec(format!("weight of {cat} is negative")));
            }
            if *w > 0.0 && self.gazetteers.get(cat).is_none_or(Vec::is_empty) {
                return Err(CorpusError::EmptyGazetteer(*cat));
            }
        }
        if self.category_weights.values().all(|w| *w == 0.0)
            && self.templates.iter().flatten().any(|t| t == "ent")
        {
            return Err(CorpusError::BadSpec(
                "templates use 'ent' slots but every category weight is zero".into(),
            ));
        }
        let no_marker = |word: &str| {
            word.chars()
                .all(|c| !alphabet::is_marker_char(c) && c != alphabet::STAR && c != ' ')
        };
        for w in &self.vocabulary {
            if !no_marker(w) {
                return Err(CorpusError::BadSpec(format!("vocabulary word {w:?}")));
            }
        }
        for phrase in self.gazetteers.values().flatten() {
            if phrase.is_empty() || !phrase.split_whitespace().all(no_marker) {
                return Err(CorpusError::BadSpec(format!("gazetteer phrase {phrase:?}")));
            }
        }
        Ok(())
    }

    /// Characters the corpus can produce, sorted: the base alphabet.
    pub fn base_chars(&self) -> Vec<char> {
        let mut set: std::collections::BTreeSet<char> = [' '].into();
        let mut add = |s: &str| set.extend(s.chars().filter(|&c| c != ' '));
        for w in &self.vocabulary {
            add(w);
        }
        for phrase in self.gazetteers.values().flatten() {
            add(phrase);
        }
        for tok in self.templates.iter().flatten() {
            if tok != "w" && tok != "ent" && !tok.starts_with("ent:") {
                add(tok);
            }
        }
        set.into_iter().collect()
    }
}

/// A generated utterance, features still in memory.
#[derive(Debug, Clone)]
pub struct GeneratedUtterance {
    pub id: String,
    pub split: Split,
    pub plain: String,
    pub tagged: String,
    pub entities: Vec<Entity>,
    pub features: FeatureSequence<f32>,
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub features: String,
    pub plain: String,
    pub tagged: String,
    pub split: Split,
    #[serde(default)]
    pub source: Source,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-purpose seed derivation from the master seed.
pub fn derive_seed(master: u64, salt: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(salt ^ splitmix64(index)))
}

const SALT_PROTOTYPE: u64 = 1;
const SALT_UTTERANCE: u64 = 2;

/// The fixed prototype vector of a base character, a pure function of the
/// master seed and the character.
pub fn prototype<F: Scalar>(c: char, spec: &CorpusSpec) -> Vec<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, SALT_PROTOTYPE, c as u64));
    (0..spec.feature_dim)
        .map(|_| F::from_f64_c(rng.random_range(-1.0..1.0)))
        .collect()
}

/// Renders a character sequence as frames: each character becomes `d`
/// copies of its prototype plus Gaussian noise, `d` uniform in the
/// configured duration range. Markers and the star have no acoustic
/// realization and are rejected.
pub fn synthesize_features<F: Scalar>(
    chars: &str,
    spec: &CorpusSpec,
    seed: u64,
) -> Result<FeatureSequence<F>, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma >= 0");
    let (dlo, dhi) = spec.duration_range;
    let mut rows: Vec<F> = Vec::new();
    let mut t = 0usize;
    for c in chars.chars() {
        if alphabet::is_marker_char(c) || c == alphabet::STAR {
            return Err(CorpusError::NotAcoustic(c));
        }
        let proto = prototype::<F>(c, spec);
        let d = if dlo == dhi {
            dlo
        } else {
            rng.random_range(dlo..=dhi)
        };
        for _ in 0..d {
            for p in &proto {
                let n = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                rows.push(*p + F::from_f64_c(n));
            }
            t += 1;
        }
    }
    if t == 0 {
        return Err(CorpusError::Empty);
    }
    let frames = Array2::from_shape_vec((t, spec.feature_dim), rows).expect("row-major layout");
    FeatureSequence::new(frames)
}

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [String]) -> &'a str {
    &items[rng.random_range(0..items.len())]
}

fn pick_category<R: Rng>(rng: &mut R, weights: &BTreeMap<Category, f64>) -> Category {
    let total: f64 = weights.values().sum();
    let mut draw = rng.random_range(0.0..total);
    for (cat, w) in weights {
        if *w <= 0.0 {
            continue;
        }
        if draw < *w {
            return *cat;
        }
        draw -= w;
    }
    *weights
        .iter()
        .rev()
        .find(|(_, w)| **w > 0.0)
        .expect("validated: at least one positive weight")
        .0
}

fn generate_one(spec: &CorpusSpec, split: Split, ordinal: usize, index: u64) -> GeneratedUtterance {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, SALT_UTTERANCE, index));
    let template = &spec.templates[rng.random_range(0..spec.templates.len())];
    let mut words: Vec<String> = Vec::new();
    let mut entities: Vec<Entity> = Vec::new();
    for tok in template {
        if tok == "w" {
            words.push(pick(&mut rng, &spec.vocabulary).to_string());
        } else if tok == "ent" || tok.starts_with("ent:") {
            let cat = match tok.strip_prefix("ent:") {
                Some(name) => name.parse().expect("validated category name"),
                None => pick_category(&mut rng, &spec.category_weights),
            };
            let phrase = pick(&mut rng, &spec.gazetteers[&cat]);
            let start = words.len();
            words.extend(phrase.split_whitespace().map(str::to_string));
            entities.push(Entity::from_span(cat, &words, start, words.len()));
        } else {
            words.push(tok.clone());
        }
    }
    let plain = words.join(" ");
    let tagged = encode(&words, &entities)
        .expect("generator spans are ordered and in bounds")
        .canonical();
    let features = synthesize_features::<f32>(&plain, spec, derive_seed(spec.seed, 3, index))
        .expect("plain text contains only base characters");
    GeneratedUtterance {
        id: format!("{}-{:06}", split.as_str(), ordinal),
        split,
        plain,
        tagged,
        entities,
        features,
    }
}

/// Generates the full corpus described by `spec`. Deterministic given the
/// spec (including its seed); utterances are independent, so generation is
/// parallel over utterances.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<GeneratedUtterance>, CorpusError> {
    spec.validate()?;
    let mut jobs: Vec<(Split, usize, u64)> = Vec::new();
    let mut index = 0u64;
    for split in Split::ALL {
        for ordinal in 0..spec.counts.get(split) {
            jobs.push((split, ordinal, index));
            index += 1;
        }
    }
    Ok(jobs
        .into_par_iter()
        .map(|(split, ordinal, index)| generate_one(spec, split, ordinal, index))
        .collect())
}

/// Additive gain and linear-interpolation tempo resampling over the frame
/// axis. Identity parameters (`gain 0`, `tempo 1`) return the input
/// unchanged.
pub fn perturb<F: Scalar>(
    f: &FeatureSequence<F>,
    gain_range: (f64, f64),
    tempo_range: (f64, f64),
    seed: u64,
) -> Result<FeatureSequence<F>, CorpusError> {
    if tempo_range.0 <= 0.0 || tempo_range.1 < tempo_range.0 {
        return Err(CorpusError::BadTempoRange(tempo_range.0, tempo_range.1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    };
    let gain = F::from_f64_c(uniform(&mut rng, gain_range));
    let tempo = uniform(&mut rng, tempo_range);
    let t_in = f.len();
    let t_out = ((t_in as f64 / tempo).round() as usize).max(1);
    let frames = if tempo == 1.0 && t_out == t_in {
        f.frames().clone()
    } else {
        let src = f.frames();
        Array2::from_shape_fn((t_out, f.dim()), |(j, d)| {
            let pos = if t_out > 1 {
                j as f64 * (t_in - 1) as f64 / (t_out - 1) as f64
            } else {
                0.0
            };
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = F::from_f64_c(pos - lo as f64);
            src[(lo, d)] * (F::one() - frac) + src[(hi.min(t_in - 1), d)] * frac
        })
    };
    let frames = if gain == F::zero() {
        frames
    } else {
        frames + gain
    };
    FeatureSequence::new(frames)
}

const FEATURE_MAGIC: &[u8; 4] = b"EMFT";
const FEATURE_VERSION: u32 = 1;

/// Writes features as `EMFT`, version, T, F, then T·F little-endian f32s.
pub fn write_features(path: &Path, f: &FeatureSequence<f32>) -> Result<(), CorpusError> {
    let mut out = Vec::with_capacity(16 + 4 * f.len() * f.dim());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.len() as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for v in f.frames().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureSequence<f32>, CorpusError> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header).map_err(|_| CorpusError::BadMagic {
        path: path.to_path_buf(),
    })?;
    if &header[0..4] != FEATURE_MAGIC {
        return Err(CorpusError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(CorpusError::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let t = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    let expected = t * f;
    if payload.len() != expected * 4 {
        return Err(CorpusError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            got: payload.len() / 4,
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let frames = Array2::from_shape_vec((t, f), values).expect("checked length");
    FeatureSequence::new(frames)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CorpusError::BadManifest {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Writes a generated corpus under `dir`: `manifest.jsonl` plus one feature
/// file per utterance in `features/`.
pub fn write_corpus(dir: &Path, utts: &[GeneratedUtterance]) -> Result<Vec<ManifestRecord>, CorpusError> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir)?;
    let mut records = Vec::with_capacity(utts.len());
    for u in utts {
        let rel = format!("features/{}.feat", u.id);
        write_features(&dir.join(&rel), &u.features)?;
        records.push(ManifestRecord {
            id: u.id.clone(),
            features: rel,
            plain: u.plain.clone(),
            tagged: u.tagged.clone(),
            split: u.split,
            source: Source::Gold,
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

/// Reads the feature file referenced by a manifest record, wrapping any
/// failure with the utterance id.
pub fn load_record_features(
    manifest_dir: &Path,
    record: &ManifestRecord,
) -> Result<FeatureSequence<f32>, CorpusError> {
    read_features(&manifest_dir.join(&record.features)).map_err(|e| CorpusError::Utterance {
        id: record.id.clone(),
        source: Box::new(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::ParsePolicy;

    fn tiny_spec() -> CorpusSpec {
        CorpusSpec {
            counts: SplitCounts {
                train: 30,
                dev: 5,
                test: 5,
            },
            feature_dim: 4,
            noise_sigma: 0.1,
            duration_range: (1, 2),
            seed: 7,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a.len(), 40);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.tagged, y.tagged);
            assert_eq!(x.features, y.features);
        }
    }

    #[test]
    fn generated_tagged_strings_parse_strictly() {
        let spec = tiny_spec();
        for u in generate_corpus(&spec).unwrap() {
            let (words, entities) = alphabet::parse(&u.tagged, ParsePolicy::Strict).unwrap();
            assert_eq!(words.join(" "), u.plain);
            assert_eq!(entities, u.entities, "utterance {}", u.id);
        }
    }

    #[test]
    fn degenerate_weights_yield_one_category() {
        let mut spec = tiny_spec();
        for (cat, w) in spec.category_weights.iter_mut() {
            *w = if *cat == Category::Pers { 1.0 } else { 0.0 };
        }
        for u in generate_corpus(&spec).unwrap() {
            for e in &u.entities {
                assert_eq!(e.category, Category::Pers);
            }
        }
    }

    #[test]
    fn default_weights_hit_expected_ratio() {
        let mut spec = CorpusSpec {
            counts: SplitCounts {
                train: 10000,
                dev: 0,
                test: 0,
            },
            feature_dim: 2,
            noise_sigma: 0.0,
            duration_range: (1, 1),
            seed: 11,
            ..CorpusSpec::default()
        };
        spec.templates.retain(|t| t.iter().any(|tok| tok == "ent"));
        let utts = generate_corpus(&spec).unwrap();
        let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
        let mut total = 0usize;
        for u in &utts {
            for e in &u.entities {
                *counts.entry(e.category).or_default() += 1;
                total += 1;
            }
        }
        // Every weighted category lands within +-20% of its requested
        // share, checked where the expected count is large enough for that
        // bound to be meaningful; the rare tail gets a looser sanity bound.
        let weight_sum: f64 = spec.category_weights.values().sum();
        for (cat, w) in &spec.category_weights {
            let expected = w / weight_sum;
            let got = *counts.get(cat).unwrap_or(&0) as f64 / total as f64;
            let slack = if expected * total as f64 >= 100.0 { 0.2 } else { 0.5 };
            assert!(
                (got - expected).abs() / expected < slack,
                "{cat}: share {got:.4} vs requested {expected:.4}"
            );
        }
        let ratio = counts[&Category::Pers] as f64 / counts[&Category::Func] as f64;
        let expected = 22115.0 / 6628.0;
        assert!(
            (ratio - expected).abs() / expected < 0.2,
            "pers/func ratio {ratio} vs {expected}"
        );
    }

    #[test]
    fn empty_gazetteer_for_weighted_category_is_rejected() {
        let mut spec = tiny_spec();
        spec.gazetteers.get_mut(&Category::Loc).unwrap().clear();
        assert!(matches!(
            generate_corpus(&spec),
            Err(CorpusError::EmptyGazetteer(Category::Loc))
        ));
    }

    #[test]
    fn synthesis_noiseless_fixed_duration() {
        let spec = CorpusSpec {
            noise_sigma: 0.0,
            duration_range: (2, 2),
            feature_dim: 3,
            ..CorpusSpec::default()
        };
        let f = synthesize_features::<f64>("ab", &spec, 99).unwrap();
        assert_eq!(f.len(), 4);
        let pa = prototype::<f64>('a', &spec);
        let pb = prototype::<f64>('b', &spec);
        for d in 0..3 {
            assert_eq!(f.frames()[(0, d)], pa[d]);
            assert_eq!(f.frames()[(1, d)], pa[d]);
            assert_eq!(f.frames()[(2, d)], pb[d]);
            assert_eq!(f.frames()[(3, d)], pb[d]);
        }
    }

    #[test]
    fn synthesis_rejects_markers() {
        let spec = CorpusSpec::default();
        assert!(matches!(
            synthesize_features::<f32>("a[", &spec, 0),
            Err(CorpusError::NotAcoustic('['))
        ));
        assert!(matches!(
            synthesize_features::<f32>("a*", &spec, 0),
            Err(CorpusError::NotAcoustic('*'))
        ));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = CorpusSpec::default();
        let a = synthesize_features::<f32>("chat", &spec, 5).unwrap();
        let b = synthesize_features::<f32>("chat", &spec, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturb_identity_params() {
        let spec = CorpusSpec::default();
        let f = synthesize_features::<f64>("chat", &spec, 5).unwrap();
        let p = perturb(&f, (0.0, 0.0), (1.0, 1.0), 123).unwrap();
        assert_eq!(f, p);
    }

    #[test]
    fn perturb_tempo_halves_length() {
        let frames = Array2::from_shape_fn((10, 2), |(t, d)| (t * 2 + d) as f64);
        let f = FeatureSequence::new(frames).unwrap();
        let p = perturb(&f, (0.0, 0.0), (2.0, 2.0), 1).unwrap();
        assert_eq!(p.len(), 5);
    }

    #[test]
    fn perturb_gain_is_exactly_additive() {
        let spec = CorpusSpec::default();
        let f = synthesize_features::<f64>("chat", &spec, 5).unwrap();
        let p = perturb(&f, (0.25, 0.25), (1.0, 1.0), 1).unwrap();
        for (a, b) in f.frames().iter().zip(p.frames().iter()) {
            assert_eq!(a + 0.25, *b);
        }
    }

    #[test]
    fn perturb_rejects_bad_tempo() {
        let spec = CorpusSpec::default();
        let f = synthesize_features::<f64>("a", &spec, 5).unwrap();
        assert!(matches!(
            perturb(&f, (0.0, 0.0), (0.0, 1.0), 1),
            Err(CorpusError::BadTempoRange(..))
        ));
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        let spec = CorpusSpec::default();
        let f = synthesize_features::<f32>("chat", &spec, 5).unwrap();
        write_features(&path, &f).unwrap();
        assert_eq!(read_features(&path).unwrap(), f);
    }

    #[test]
    fn feature_file_header_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        // T=2, F=3, exactly 6 floats: accepted.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EMFT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for i in 0..6 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let f = read_features(&path).unwrap();
        assert_eq!((f.len(), f.dim()), (2, 3));
        // Truncated payload: rejected.
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(CorpusError::SizeMismatch { .. })
        ));
        // Wrong magic.
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(CorpusError::BadMagic { .. })
        ));
    }

    #[test]
    fn corpus_round_trip_and_truncation_names_utterance() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let utts = generate_corpus(&spec).unwrap();
        let records = write_corpus(dir.path(), &utts).unwrap();
        let back = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(records, back);
        for (r, u) in back.iter().zip(&utts) {
            assert_eq!(load_record_features(dir.path(), r).unwrap(), u.features);
        }
        // Truncate one feature file; the error must carry the utterance id.
        let victim = dir.path().join(&back[3].features);
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 2]).unwrap();
        let err = load_record_features(dir.path(), &back[3]).unwrap_err();
        assert!(err.to_string().contains(&back[3].id), "{err}");
    }

    #[test]
    fn manifests_are_byte_identical_across_runs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        write_corpus(dir_a.path(), &generate_corpus(&spec).unwrap()).unwrap();
        write_corpus(dir_b.path(), &generate_corpus(&spec).unwrap()).unwrap();
        let a = std::fs::read(dir_a.path().join("manifest.jsonl")).unwrap();
        let b = std::fs::read(dir_b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(a, b);
    }
}
