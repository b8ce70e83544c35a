//! Emission alphabet and the grammar of tagged transcripts.
//!
//! A tagged transcript is a whitespace-delimited token sequence in which
//! every entity is wrapped by a category-specific opening marker and the
//! shared closer `]`, both standing alone as tokens:
//!
//! ```text
//! le sculpteur [ césar ] est mort # hier ] à $ paris ]
//! ```
//!
//! Eight single characters open the eight categories and `]` closes all of
//! them; `)` opens `event` and never closes anything. The star `*` is an
//! ordinary word token used by [`star_transform`] to stand in for every
//! word run outside an entity.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Entity categories, in marker order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Pers,
    Func,
    Org,
    Loc,
    Prod,
    Amount,
    Time,
    Event,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Pers,
        Category::Func,
        Category::Org,
        Category::Loc,
        Category::Prod,
        Category::Amount,
        Category::Time,
        Category::Event,
    ];

    /// The single character that opens an entity of this category.
    pub fn open_marker(self) -> char {
        match self {
            Category::Pers => '[',
            Category::Func => '(',
            Category::Org => '{',
            Category::Loc => '$',
            Category::Prod => '&',
            Category::Amount => '%',
            Category::Time => '#',
            Category::Event => ')',
        }
    }

    pub fn from_open_marker(c: char) -> Option<Category> {
        Category::ALL.iter().copied().find(|k| k.open_marker() == c)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Pers => "pers",
            Category::Func => "func",
            Category::Org => "org",
            Category::Loc => "loc",
            Category::Prod => "prod",
            Category::Amount => "amount",
            Category::Time => "time",
            Category::Event => "event",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Category {
    type Err = AlphabetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AlphabetError::UnknownCategory(s.to_string()))
    }
}

/// The marker that closes every entity.
pub const CLOSE_MARKER: char = ']';
/// Stand-in token for out-of-entity word runs in starred mode.
pub const STAR: char = '*';

/// The nine marker characters in id order: eight openers then the closer.
pub fn marker_chars() -> [char; 9] {
    let mut out = [CLOSE_MARKER; 9];
    for (i, cat) in Category::ALL.iter().enumerate() {
        out[i] = cat.open_marker();
    }
    out
}

pub fn is_marker_char(c: char) -> bool {
    c == CLOSE_MARKER || Category::from_open_marker(c).is_some()
}

/// Checks that the open markers plus the closer form nine distinct
/// characters, i.e. the category↔marker map is a bijection.
pub fn assert_tag_map_bijection() {
    let chars = marker_chars();
    for (i, a) in chars.iter().enumerate() {
        for b in chars.iter().skip(i + 1) {
            assert_ne!(a, b, "marker characters must be pairwise distinct");
        }
    }
    for cat in Category::ALL {
        assert_eq!(
            Category::from_open_marker(cat.open_marker()),
            Some(cat),
            "marker round trip must recover the category"
        );
    }
    assert!(Category::from_open_marker(CLOSE_MARKER).is_none());
}

#[derive(Debug, Error)]
pub enum AlphabetError {
    #[error("duplicate character {0:?} in base set")]
    DuplicateChar(char),
    #[error("marker character {0:?} may not appear in the base set")]
    MarkerInBase(char),
    #[error("star character '*' may not appear in the base set")]
    StarInBase,
    #[error("base set must contain the space character")]
    MissingSpace,
    #[error("character {ch:?} at position {pos} is not in the alphabet")]
    CharNotInAlphabet { ch: char, pos: usize },
    #[error("id {0} is not a printable symbol")]
    InvalidId(usize),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("alphabet file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered symbol table shared by every module; index = emission id.
///
/// Id 0 is always the CTC blank, which has no character form. Base
/// characters follow in build order, then the star (if enabled), then the
/// nine markers (if enabled).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<Option<char>>,
    index: HashMap<char, usize>,
    base_len: usize,
    star_enabled: bool,
    tag_set_enabled: bool,
}

impl Alphabet {
    /// Builds the symbol table: blank, base characters (in the given
    /// order), optional star, optional markers.
    pub fn build(
        base_chars: &[char],
        star_enabled: bool,
        tag_set_enabled: bool,
    ) -> Result<Alphabet, AlphabetError> {
        assert_tag_map_bijection();
        let mut chars: Vec<Option<char>> = vec![None];
        let mut index = HashMap::new();
        let mut saw_space = false;
        for &c in base_chars {
            if is_marker_char(c) {
                return Err(AlphabetError::MarkerInBase(c));
            }
            if c == STAR {
                return Err(AlphabetError::StarInBase);
            }
            if index.insert(c, chars.len()).is_some() {
                return Err(AlphabetError::DuplicateChar(c));
            }
            saw_space |= c == ' ';
            chars.push(Some(c));
        }
        if !saw_space {
            return Err(AlphabetError::MissingSpace);
        }
        let base_len = base_chars.len();
        if star_enabled {
            index.insert(STAR, chars.len());
            chars.push(Some(STAR));
        }
        if tag_set_enabled {
            for m in marker_chars() {
                index.insert(m, chars.len());
                chars.push(Some(m));
            }
        }
        Ok(Alphabet {
            chars,
            index,
            base_len,
            star_enabled,
            tag_set_enabled,
        })
    }

    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn blank_id(&self) -> usize {
        0
    }

    pub fn space_id(&self) -> usize {
        self.index[&' ']
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Character form of an id; `None` for the blank.
    pub fn char_of(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied().flatten()
    }

    pub fn star_enabled(&self) -> bool {
        self.star_enabled
    }

    pub fn tag_set_enabled(&self) -> bool {
        self.tag_set_enabled
    }

    /// Base characters in id order (markers and star excluded).
    pub fn base_chars(&self) -> Vec<char> {
        self.chars[1..=self.base_len]
            .iter()
            .map(|c| c.expect("base symbols have char forms"))
            .collect()
    }

    /// Ids whose symbols are base characters (blank excluded).
    pub fn base_ids(&self) -> std::ops::Range<usize> {
        1..self.base_len + 1
    }

    pub fn is_base_id(&self, id: usize) -> bool {
        (1..=self.base_len).contains(&id)
    }

    pub fn is_marker_id(&self, id: usize) -> bool {
        self.char_of(id).is_some_and(is_marker_char)
    }

    /// True when `self` keeps every `other` symbol at the same id (the
    /// whole `other` table is a prefix), which is what output-layer
    /// extension relies on.
    pub fn extends(&self, other: &Alphabet) -> bool {
        other.chars.len() <= self.chars.len() && self.chars[..other.chars.len()] == other.chars[..]
    }

    /// Serializes as a versioned text file, one symbol per line. The line
    /// index after the header is the id; blank and space are escaped as
    /// `<blank>` and `<space>`.
    pub fn save(&self, path: &Path) -> Result<(), AlphabetError> {
        let mut out = String::from("entmark-alphabet-v1\n");
        for c in &self.chars {
            match c {
                None => out.push_str("<blank>\n"),
                Some(' ') => out.push_str("<space>\n"),
                Some(c) => {
                    out.push(*c);
                    out.push('\n');
                }
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Alphabet, AlphabetError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some("entmark-alphabet-v1") => {}
            other => {
                return Err(AlphabetError::BadFile(format!(
                    "expected header 'entmark-alphabet-v1', got {other:?} in {}",
                    path.display()
                )))
            }
        }
        let mut symbols = Vec::new();
        for (i, line) in lines.enumerate() {
            let sym = match line {
                "<blank>" => {
                    if i != 0 {
                        return Err(AlphabetError::BadFile(format!(
                            "blank must be id 0, found at id {i}"
                        )));
                    }
                    continue;
                }
                "<space>" => ' ',
                s => {
                    let mut it = s.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => c,
                        _ => {
                            return Err(AlphabetError::BadFile(format!(
                                "line {} is not a single symbol: {s:?}",
                                i + 2
                            )))
                        }
                    }
                }
            };
            symbols.push(sym);
        }
        let star_enabled = symbols.contains(&STAR);
        let tag_set_enabled = symbols.iter().any(|&c| is_marker_char(c));
        let base: Vec<char> = symbols
            .iter()
            .copied()
            .filter(|&c| c != STAR && !is_marker_char(c))
            .collect();
        let rebuilt = Alphabet::build(&base, star_enabled, tag_set_enabled)?;
        // The build order is canonical; reject files that deviate from it.
        let original: Vec<Option<char>> =
            std::iter::once(None).chain(symbols.into_iter().map(Some)).collect();
        if rebuilt.chars != original {
            return Err(AlphabetError::BadFile(
                "symbol order is not the canonical blank/base/star/markers layout".into(),
            ));
        }
        Ok(rebuilt)
    }
}

/// Converts a canonical string to emission ids. Never emits the blank id.
pub fn to_ids(s: &str, a: &Alphabet) -> Result<Vec<usize>, AlphabetError> {
    s.chars()
        .enumerate()
        .map(|(pos, ch)| {
            a.id_of(ch)
                .ok_or(AlphabetError::CharNotInAlphabet { ch, pos })
        })
        .collect()
}

/// Inverse of [`to_ids`]; rejects the blank id and out-of-range ids.
pub fn from_ids(ids: &[usize], a: &Alphabet) -> Result<String, AlphabetError> {
    ids.iter()
        .map(|&id| a.char_of(id).ok_or(AlphabetError::InvalidId(id)))
        .collect()
}

/// One entity occurrence: category, normalized value, and the word span
/// `[start, end)` into the plain transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub category: Category,
    pub value: String,
    pub start: usize,
    pub end: usize,
}

impl Entity {
    /// Builds an entity over `words[start..end]`, deriving the normalized
    /// value (lowercase, single-space separated).
    pub fn from_span(category: Category, words: &[String], start: usize, end: usize) -> Entity {
        let value = normalize_value(&words[start..end]);
        Entity {
            category,
            value,
            start,
            end,
        }
    }
}

pub fn normalize_value(words: &[String]) -> String {
    words
        .iter()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// One whitespace-delimited token of a tagged transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Word(String),
    Open(Category),
    Close,
}

impl Token {
    fn render(&self) -> String {
        match self {
            Token::Word(w) => w.clone(),
            Token::Open(c) => c.open_marker().to_string(),
            Token::Close => CLOSE_MARKER.to_string(),
        }
    }
}

/// A transcript with balanced inline entity markers.
///
/// Instances only come out of [`encode`] or [`TaggedTranscript::parse`], so
/// the marker grammar (open, at least one word, close, no nesting) holds by
/// construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedTranscript {
    tokens: Vec<Token>,
}

/// How [`TaggedTranscript::parse`] treats malformed marker sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParsePolicy {
    /// Reject anything that is not a canonical tagged transcript.
    Strict,
    /// Repair: an unmatched open marker closes at utterance end, a stray
    /// closer is dropped, an open marker inside an open entity closes the
    /// previous entity first, and an entity without words is dropped.
    Repair,
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("entity span {start}..{end} is out of bounds for {len} words")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("entity span {start}..{end} is empty")]
    EmptySpan { start: usize, end: usize },
    #[error("entity spans overlap or are out of order near word {at}")]
    OverlappingSpans { at: usize },
    #[error("marker {ch:?} is embedded in token {token:?} (token {at})")]
    EmbeddedMarker { ch: char, token: String, at: usize },
    #[error("closer ']' without an open entity (token {at})")]
    StrayCloser { at: usize },
    #[error("open marker {ch:?} while an entity is already open (token {at})")]
    NestedOpen { ch: char, at: usize },
    #[error("entity opened by {ch:?} is never closed")]
    UnclosedEntity { ch: char },
    #[error("entity opened by {ch:?} contains no words (token {at})")]
    EmptyEntity { ch: char, at: usize },
}

/// Inserts entity markers into a plain word sequence.
///
/// Spans must be in left-to-right order, non-overlapping and within bounds.
pub fn encode(words: &[String], entities: &[Entity]) -> Result<TaggedTranscript, CodecError> {
    let mut prev_end = 0usize;
    for e in entities {
        if e.start >= e.end {
            return Err(CodecError::EmptySpan {
                start: e.start,
                end: e.end,
            });
        }
        if e.end > words.len() {
            return Err(CodecError::SpanOutOfBounds {
                start: e.start,
                end: e.end,
                len: words.len(),
            });
        }
        if e.start < prev_end {
            return Err(CodecError::OverlappingSpans { at: e.start });
        }
        prev_end = e.end;
    }
    let mut tokens = Vec::with_capacity(words.len() + 2 * entities.len());
    let mut ent = entities.iter().peekable();
    let mut open_until: Option<usize> = None;
    for (i, w) in words.iter().enumerate() {
        if let Some(e) = ent.peek() {
            if e.start == i {
                tokens.push(Token::Open(e.category));
                open_until = Some(e.end);
                ent.next();
            }
        }
        tokens.push(Token::Word(w.clone()));
        if open_until == Some(i + 1) {
            tokens.push(Token::Close);
            open_until = None;
        }
    }
    Ok(TaggedTranscript { tokens })
}

impl TaggedTranscript {
    /// Parses a tagged string under the given policy.
    pub fn parse(s: &str, policy: ParsePolicy) -> Result<TaggedTranscript, CodecError> {
        let raw = lex(s, policy)?;
        let mut tokens: Vec<Token> = Vec::with_capacity(raw.len());
        // Index in `tokens` of the pending open marker, if any.
        let mut open_at: Option<usize> = None;
        let strict = policy == ParsePolicy::Strict;
        for (at, tok) in raw.into_iter().enumerate() {
            match tok {
                Token::Word(w) => tokens.push(Token::Word(w)),
                Token::Open(cat) => {
                    if let Some(o) = open_at {
                        if strict {
                            return Err(CodecError::NestedOpen {
                                ch: cat.open_marker(),
                                at,
                            });
                        }
                        // Close the previous entity right before this one,
                        // or drop it if it never got a word.
                        if o + 1 < tokens.len() {
                            tokens.push(Token::Close);
                        } else {
                            tokens.remove(o);
                        }
                    }
                    open_at = Some(tokens.len());
                    tokens.push(Token::Open(cat));
                }
                Token::Close => match open_at.take() {
                    Some(o) => {
                        if o + 1 < tokens.len() {
                            tokens.push(Token::Close);
                        } else if strict {
                            let ch = match tokens[o] {
                                Token::Open(c) => c.open_marker(),
                                _ => unreachable!(),
                            };
                            return Err(CodecError::EmptyEntity { ch, at });
                        } else {
                            tokens.remove(o);
                        }
                    }
                    None => {
                        if strict {
                            return Err(CodecError::StrayCloser { at });
                        }
                    }
                },
            }
        }
        if let Some(o) = open_at {
            let ch = match tokens[o] {
                Token::Open(c) => c.open_marker(),
                _ => unreachable!(),
            };
            if strict {
                return Err(CodecError::UnclosedEntity { ch });
            }
            if o + 1 < tokens.len() {
                tokens.push(Token::Close);
            } else {
                tokens.remove(o);
            }
        }
        Ok(TaggedTranscript { tokens })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Canonical string form: tokens joined by single spaces.
    pub fn canonical(&self) -> String {
        self.tokens
            .iter()
            .map(Token::render)
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Splits into the plain word list and the entity list.
    pub fn decompose(&self) -> (Vec<String>, Vec<Entity>) {
        let mut words = Vec::new();
        let mut entities = Vec::new();
        let mut open: Option<(Category, usize)> = None;
        for tok in &self.tokens {
            match tok {
                Token::Word(w) => words.push(w.clone()),
                Token::Open(cat) => open = Some((*cat, words.len())),
                Token::Close => {
                    let (cat, start) = open.take().expect("balanced by construction");
                    entities.push(Entity::from_span(cat, &words, start, words.len()));
                }
            }
        }
        (words, entities)
    }

    /// Plain words only (entity-internal and outside alike).
    pub fn words(&self) -> Vec<String> {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                Token::Word(w) => Some(w.clone()),
                _ => None,
            })
            .collect()
    }
}

/// Parses a tagged string into its plain words and entities.
pub fn parse(
    s: &str,
    policy: ParsePolicy,
) -> Result<(Vec<String>, Vec<Entity>), CodecError> {
    Ok(TaggedTranscript::parse(s, policy)?.decompose())
}

/// Replaces every maximal run of out-of-entity word tokens with a single
/// `*` token. Entity contents and markers are untouched; idempotent.
pub fn star_transform(tagged: &TaggedTranscript) -> TaggedTranscript {
    let mut tokens = Vec::with_capacity(tagged.tokens.len());
    let mut inside = false;
    let mut in_outside_run = false;
    for tok in &tagged.tokens {
        match tok {
            Token::Word(w) => {
                if inside {
                    tokens.push(Token::Word(w.clone()));
                } else if !in_outside_run {
                    tokens.push(Token::Word(STAR.to_string()));
                    in_outside_run = true;
                }
            }
            Token::Open(c) => {
                inside = true;
                in_outside_run = false;
                tokens.push(Token::Open(*c));
            }
            Token::Close => {
                inside = false;
                tokens.push(Token::Close);
            }
        }
    }
    TaggedTranscript { tokens }
}

/// Lexes a string into raw tokens. Marker characters embedded inside a
/// longer token are split out in repair mode and rejected in strict mode,
/// so arbitrary decoder output always lexes under repair.
fn lex(s: &str, policy: ParsePolicy) -> Result<Vec<Token>, CodecError> {
    let mut out = Vec::new();
    for (at, piece) in s.split_whitespace().enumerate() {
        let mut word = String::new();
        let multi = piece.chars().count() > 1;
        for ch in piece.chars() {
            if is_marker_char(ch) {
                if multi && policy == ParsePolicy::Strict {
                    return Err(CodecError::EmbeddedMarker {
                        ch,
                        token: piece.to_string(),
                        at,
                    });
                }
                if !word.is_empty() {
                    out.push(Token::Word(std::mem::take(&mut word)));
                }
                out.push(match Category::from_open_marker(ch) {
                    Some(cat) => Token::Open(cat),
                    None => Token::Close,
                });
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(Token::Word(word));
        }
    }
    Ok(out)
}

/// Tokenizes a string the way the language model and the decoder see it:
/// whitespace-separated, with marker characters always standing alone.
pub fn lm_tokens(s: &str) -> Vec<String> {
    lex(s, ParsePolicy::Repair)
        .expect("repair lexing never fails")
        .into_iter()
        .map(|t| t.render())
        .collect()
}

/// Number of word tokens (marker tokens excluded; the star counts).
pub fn word_count(s: &str) -> usize {
    lm_tokens(s)
        .iter()
        .filter(|t| !(t.chars().count() == 1 && is_marker_char(t.chars().next().unwrap())))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn tag_map_is_a_bijection() {
        assert_tag_map_bijection();
        assert_eq!(
            marker_chars(),
            ['[', '(', '{', '$', '&', '%', '#', ')', ']']
        );
    }

    #[test]
    fn build_sizes() {
        let a = Alphabet::build(&[' ', 'a', 'b'], false, false).unwrap();
        assert_eq!(a.size(), 4);
        assert_eq!(a.blank_id(), 0);
        let a = Alphabet::build(&[' ', 'a'], false, true).unwrap();
        assert_eq!(a.size(), 12);
        let a = Alphabet::build(&[' ', 'a'], true, true).unwrap();
        assert_eq!(a.size(), 13);
        assert_eq!(a.char_of(3), Some(STAR));
    }

    #[test]
    fn build_rejects_bad_bases() {
        assert!(matches!(
            Alphabet::build(&[' ', '['], false, false),
            Err(AlphabetError::MarkerInBase('['))
        ));
        assert!(matches!(
            Alphabet::build(&[' ', 'a', 'a'], false, false),
            Err(AlphabetError::DuplicateChar('a'))
        ));
        assert!(matches!(
            Alphabet::build(&['a', 'b'], false, false),
            Err(AlphabetError::MissingSpace)
        ));
        assert!(matches!(
            Alphabet::build(&[' ', '*'], true, false),
            Err(AlphabetError::StarInBase)
        ));
    }

    #[test]
    fn ids_round_trip() {
        let a = Alphabet::build(&[' ', 'a', 'b'], false, false).unwrap();
        assert_eq!(to_ids("a b", &a).unwrap(), vec![2, 1, 3]);
        assert_eq!(from_ids(&[2, 1, 3], &a).unwrap(), "a b");
        assert!(matches!(
            to_ids("é", &a),
            Err(AlphabetError::CharNotInAlphabet { ch: 'é', pos: 0 })
        ));
        assert!(from_ids(&[0], &a).is_err());
        assert!(from_ids(&[17], &a).is_err());
    }

    #[test]
    fn alphabet_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alphabet.txt");
        let a = Alphabet::build(&[' ', 'a', 'é'], true, true).unwrap();
        a.save(&path).unwrap();
        let b = Alphabet::load(&path).unwrap();
        assert_eq!(a, b);
        std::fs::write(&path, "bogus\n<blank>\n").unwrap();
        assert!(matches!(
            Alphabet::load(&path),
            Err(AlphabetError::BadFile(_))
        ));
    }

    #[test]
    fn encode_basic() {
        let w = words("césar est né");
        let e = vec![Entity::from_span(Category::Pers, &w, 0, 1)];
        let t = encode(&w, &e).unwrap();
        assert_eq!(t.canonical(), "[ césar ] est né");
    }

    #[test]
    fn encode_rejects_bad_spans() {
        let w = words("a b");
        let overlap = vec![
            Entity::from_span(Category::Loc, &w, 0, 2),
            Entity {
                category: Category::Pers,
                value: "b".into(),
                start: 1,
                end: 2,
            },
        ];
        assert!(matches!(
            encode(&w, &overlap),
            Err(CodecError::OverlappingSpans { .. })
        ));
        let oob = vec![Entity {
            category: Category::Loc,
            value: "x".into(),
            start: 1,
            end: 3,
        }];
        assert!(matches!(
            encode(&w, &oob),
            Err(CodecError::SpanOutOfBounds { .. })
        ));
    }

    #[test]
    fn parse_inverts_encode() {
        let (w, e) = parse("[ césar ] est né", ParsePolicy::Strict).unwrap();
        assert_eq!(w, words("césar est né"));
        assert_eq!(
            e,
            vec![Entity {
                category: Category::Pers,
                value: "césar".into(),
                start: 0,
                end: 1
            }]
        );
    }

    #[test]
    fn repair_closes_at_end() {
        let (w, e) = parse("$ paris est", ParsePolicy::Repair).unwrap();
        assert_eq!(w, words("paris est"));
        assert_eq!(
            e,
            vec![Entity {
                category: Category::Loc,
                value: "paris est".into(),
                start: 0,
                end: 2
            }]
        );
    }

    #[test]
    fn repair_drops_stray_closer() {
        let (w, e) = parse("a ] b", ParsePolicy::Repair).unwrap();
        assert_eq!(w, words("a b"));
        assert!(e.is_empty());
    }

    #[test]
    fn repair_closes_before_new_open() {
        let (w, e) = parse("[ a $ b ]", ParsePolicy::Repair).unwrap();
        assert_eq!(w, words("a b"));
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].category, Category::Pers);
        assert_eq!(e[0].value, "a");
        assert_eq!(e[1].category, Category::Loc);
        assert_eq!(e[1].value, "b");
    }

    #[test]
    fn repair_drops_empty_entities() {
        let (w, e) = parse("[ ] a { ", ParsePolicy::Repair).unwrap();
        assert_eq!(w, words("a"));
        assert!(e.is_empty());
    }

    #[test]
    fn repair_splits_embedded_markers() {
        let (w, e) = parse("ab[cd", ParsePolicy::Repair).unwrap();
        assert_eq!(w, words("ab cd"));
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].value, "cd");
    }

    #[test]
    fn strict_rejects_malformed() {
        assert!(matches!(
            parse("a ] b", ParsePolicy::Strict),
            Err(CodecError::StrayCloser { .. })
        ));
        assert!(matches!(
            parse("[ a $ b ]", ParsePolicy::Strict),
            Err(CodecError::NestedOpen { .. })
        ));
        assert!(matches!(
            parse("$ paris", ParsePolicy::Strict),
            Err(CodecError::UnclosedEntity { .. })
        ));
        assert!(matches!(
            parse("ab[cd", ParsePolicy::Strict),
            Err(CodecError::EmbeddedMarker { .. })
        ));
        assert!(matches!(
            parse("[ ]", ParsePolicy::Strict),
            Err(CodecError::EmptyEntity { .. })
        ));
    }

    /// The unstarred carrier sentence for the starred-mode golden string.
    pub(crate) fn figure_sentence() -> TaggedTranscript {
        let w = words("le sculpteur césar est mort hier à paris à l'âge de soixante dix sept ans");
        let e = vec![
            Entity::from_span(Category::Pers, &w, 2, 3),
            Entity::from_span(Category::Time, &w, 5, 6),
            Entity::from_span(Category::Loc, &w, 7, 8),
            Entity::from_span(Category::Amount, &w, 11, 15),
        ];
        encode(&w, &e).unwrap()
    }

    #[test]
    fn star_transform_golden() {
        let starred = star_transform(&figure_sentence());
        assert_eq!(
            starred.canonical(),
            "* [ césar ] * # hier ] * $ paris ] * % soixante dix sept ans ]"
        );
    }

    #[test]
    fn star_transform_no_entities() {
        let t = TaggedTranscript::parse("le chat dort", ParsePolicy::Strict).unwrap();
        assert_eq!(star_transform(&t).canonical(), "*");
    }

    #[test]
    fn star_transform_idempotent_and_entity_preserving() {
        let t = figure_sentence();
        let s1 = star_transform(&t);
        let s2 = star_transform(&s1);
        assert_eq!(s1, s2);
        let ents = |x: &TaggedTranscript| {
            x.decompose()
                .1
                .into_iter()
                .map(|e| (e.category, e.value))
                .collect::<Vec<_>>()
        };
        assert_eq!(ents(&t), ents(&s1));
    }

    #[test]
    fn word_count_excludes_markers() {
        assert_eq!(word_count("[ césar ]"), 1);
        assert_eq!(word_count("* [ césar ] * # hier ]"), 4);
        assert_eq!(word_count(""), 0);
    }
}
