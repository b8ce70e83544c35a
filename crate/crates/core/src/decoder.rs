//! CTC prefix beam search with shallow language-model fusion.
//!
//! Hypotheses are scored with
//!
//! ```text
//! Q(y) = log p_ctc(y | x) + alpha · log p_lm(tokens(y)) + beta · wc(y)
//! ```
//!
//! where `wc(y)` counts word tokens (marker tokens excluded, the star
//! included). The LM term and the word bonus are applied whenever a word
//! token completes: at a space, at a marker boundary, and at the end of the
//! utterance; marker tokens receive LM mass but no word bonus. The search
//! keeps separate blank/non-blank log masses per prefix, so the final
//! per-prefix mass equals the exact CTC marginal of that label sequence.
//!
//! Everything here is deterministic: beams live in ordered maps, pruning
//! sorts by score with a lexicographic tie-break on the prefix.

use crate::alphabet::{from_ids, is_marker_char, lm_tokens, to_ids, word_count, Alphabet, AlphabetError};
use crate::ctc::{ctc_loss, collapse, CtcError, LogitLattice, BLANK};
use crate::lm::{self, NgramLm, BOS, EOS};
use crate::scalar::{log_add, Scalar};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("lattice width {lattice} does not match alphabet size {alphabet}")]
    DimensionMismatch { lattice: usize, alphabet: usize },
    #[error("search space {0} exceeds the enumeration budget {1}")]
    SearchSpaceTooLarge(f64, f64),
    #[error("decoder config: {0}")]
    BadConfig(String),
    #[error("n-best file line {line}: {msg}")]
    BadNBestFile { line: usize, msg: String },
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Alphabet(#[from] AlphabetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fusion weights and search budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Language-model weight.
    pub alpha: f64,
    /// Word-count bonus weight.
    pub beta: f64,
    pub beam_width: usize,
    #[serde(default = "default_n_best")]
    pub n_best: usize,
    /// Per-frame log-probability floor: symbols scoring below it are not
    /// expanded at that frame.
    #[serde(default)]
    pub prune_threshold: Option<f64>,
}

fn default_n_best() -> usize {
    1
}

impl Default for DecoderConfig {
    fn default() -> Self {
        // Defaults tuned on the synthetic dev split by grid search.
        DecoderConfig {
            alpha: 0.8,
            beta: 1.0,
            beam_width: 64,
            n_best: 1,
            prune_threshold: None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_width == 0 {
            return Err(DecodeError::BadConfig("beam_width must be >= 1".into()));
        }
        if self.n_best == 0 || self.n_best > self.beam_width {
            return Err(DecodeError::BadConfig(
                "n_best must satisfy 1 <= n_best <= beam_width".into(),
            ));
        }
        Ok(())
    }
}

/// One decoded candidate with its score breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tagged: String,
    pub q: f64,
    pub ctc_logp: f64,
    pub lm_logp: f64,
    pub wc: usize,
}

/// All n-best candidates for one utterance, one JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NBestRecord {
    pub id: String,
    pub nbest: Vec<Hypothesis>,
}

/// LM-fusion state of a prefix. It is a pure function of the prefix
/// string, which is what makes merging path masses per prefix sound.
#[derive(Debug, Clone, PartialEq)]
struct Fusion {
    lm_logp: f64,
    wc: usize,
    hist: Vec<String>,
    pending: String,
}

impl Fusion {
    fn start() -> Fusion {
        Fusion {
            lm_logp: 0.0,
            wc: 0,
            hist: vec![BOS.to_string()],
            pending: String::new(),
        }
    }

    fn complete_word(&mut self, lm: &NgramLm) {
        let w = std::mem::take(&mut self.pending);
        let mapped = lm.map_token(&w).to_string();
        self.lm_logp += lm.token_logprob(&self.hist, &mapped);
        self.push_hist(mapped, lm);
        self.wc += 1;
    }

    fn push_hist(&mut self, token: String, lm: &NgramLm) {
        self.hist.push(token);
        if self.hist.len() > lm.order() {
            self.hist.remove(0);
        }
    }

    /// Advances the state by one emitted character.
    fn advance(&mut self, c: char, lm: &NgramLm) {
        if c == ' ' {
            if !self.pending.is_empty() {
                self.complete_word(lm);
            }
        } else if is_marker_char(c) {
            if !self.pending.is_empty() {
                self.complete_word(lm);
            }
            let mapped = lm.map_token(&c.to_string()).to_string();
            self.lm_logp += lm.token_logprob(&self.hist, &mapped);
            self.push_hist(mapped, lm);
        } else {
            self.pending.push(c);
        }
    }

    /// Final LM mass and word count, with the pending word and the
    /// sentence-end term folded in.
    fn finish(&self, lm: &NgramLm) -> (f64, usize) {
        let mut f = self.clone();
        if !f.pending.is_empty() {
            f.complete_word(lm);
        }
        let lm_total = f.lm_logp + lm.token_logprob(&f.hist, EOS);
        (lm_total, f.wc)
    }
}

#[derive(Debug, Clone)]
struct Beam {
    log_p_blank: f64,
    log_p_rest: f64,
    fusion: Fusion,
}

impl Beam {
    fn total(&self) -> f64 {
        log_add(self.log_p_blank, self.log_p_rest)
    }

    /// Partial fused score used for pruning (pending word unscored).
    fn prune_key(&self, cfg: &DecoderConfig) -> f64 {
        self.total() + cfg.alpha * self.fusion.lm_logp + cfg.beta * self.fusion.wc as f64
    }
}

/// Prefix beam search over the lattice, returning the `n_best` candidates
/// sorted by Q (ties broken lexicographically on the string).
pub fn beam_search<F: Scalar>(
    lattice: &LogitLattice<F>,
    lm: &NgramLm,
    alphabet: &Alphabet,
    cfg: &DecoderConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    if lattice.width() != alphabet.size() {
        return Err(DecodeError::DimensionMismatch {
            lattice: lattice.width(),
            alphabet: alphabet.size(),
        });
    }
    let lp: Array2<f64> = lattice.log_probs().mapv(|v| v.to_f64_c());
    let width = alphabet.size();

    let mut beams: BTreeMap<Vec<usize>, Beam> = BTreeMap::new();
    beams.insert(
        Vec::new(),
        Beam {
            log_p_blank: 0.0,
            log_p_rest: f64::NEG_INFINITY,
            fusion: Fusion::start(),
        },
    );

    for t in 0..lattice.frames() {
        let mut next: BTreeMap<Vec<usize>, Beam> = BTreeMap::new();
        for (prefix, beam) in &beams {
            for k in 0..width {
                let p = lp[(t, k)];
                if let Some(floor) = cfg.prune_threshold {
                    if p < floor {
                        continue;
                    }
                }
                if k == BLANK {
                    let add = log_add(beam.log_p_blank + p, beam.log_p_rest + p);
                    let entry = next.entry(prefix.clone()).or_insert_with(|| Beam {
                        log_p_blank: f64::NEG_INFINITY,
                        log_p_rest: f64::NEG_INFINITY,
                        fusion: beam.fusion.clone(),
                    });
                    entry.log_p_blank = log_add(entry.log_p_blank, add);
                    continue;
                }
                let repeat = prefix.last() == Some(&k);
                if repeat {
                    // Same symbol again without an intervening blank merges
                    // into the existing emission.
                    let entry = next.entry(prefix.clone()).or_insert_with(|| Beam {
                        log_p_blank: f64::NEG_INFINITY,
                        log_p_rest: f64::NEG_INFINITY,
                        fusion: beam.fusion.clone(),
                    });
                    entry.log_p_rest = log_add(entry.log_p_rest, beam.log_p_rest + p);
                }
                // A fresh emission extends the prefix. After a repeat it is
                // only reachable from the blank-ending mass.
                let src = if repeat {
                    beam.log_p_blank
                } else {
                    beam.total()
                };
                if src == f64::NEG_INFINITY {
                    continue;
                }
                let mut ext = prefix.clone();
                ext.push(k);
                let entry = next.entry(ext).or_insert_with(|| {
                    let mut fusion = beam.fusion.clone();
                    fusion.advance(
                        alphabet.char_of(k).expect("non-blank id has a char"),
                        lm,
                    );
                    Beam {
                        log_p_blank: f64::NEG_INFINITY,
                        log_p_rest: f64::NEG_INFINITY,
                        fusion,
                    }
                });
                entry.log_p_rest = log_add(entry.log_p_rest, src + p);
            }
        }
        // Prune to the beam width on the partial fused score.
        let mut ranked: Vec<(Vec<usize>, Beam)> = next.into_iter().collect();
        ranked.sort_by(|(pa, a), (pb, b)| {
            b.prune_key(cfg)
                .partial_cmp(&a.prune_key(cfg))
                .expect("scores are never NaN")
                .then_with(|| pa.cmp(pb))
        });
        ranked.truncate(cfg.beam_width);
        beams = ranked.into_iter().collect();
    }

    // Under pruning the per-prefix beam mass is only a lower bound on the
    // CTC marginal (mass routed through pruned parents is lost), so the
    // surviving candidates get their acoustic term rescored exactly.
    let mut out: Vec<Hypothesis> = beams
        .into_iter()
        .map(|(prefix, beam)| -> Result<Hypothesis, DecodeError> {
            let (lm_logp, wc) = beam.fusion.finish(lm);
            let ctc_logp = -ctc_loss(lattice, &prefix)?.loss_value().to_f64_c();
            let tagged = from_ids(&prefix, alphabet).expect("prefix ids are non-blank");
            Ok(Hypothesis {
                q: ctc_logp + cfg.alpha * lm_logp + cfg.beta * wc as f64,
                tagged,
                ctc_logp,
                lm_logp,
                wc,
            })
        })
        .collect::<Result<_, _>>()?;
    out.sort_by(|a, b| {
        b.q.partial_cmp(&a.q)
            .expect("scores are never NaN")
            .then_with(|| a.tagged.cmp(&b.tagged))
    });
    out.truncate(cfg.n_best);
    Ok(out)
}

/// Q-score breakdown of one transcription against a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct QBreakdown {
    pub q: f64,
    /// `-inf` when the transcription cannot be aligned to the lattice.
    pub ctc_logp: f64,
    pub lm_logp: f64,
    pub wc: usize,
}

/// Recomputes the three Q terms for a given tagged string, using the CTC
/// marginal for the acoustic term. Used for rescoring and as the test
/// anchor for the search's reported scores.
pub fn score_q<F: Scalar>(
    tagged: &str,
    lattice: &LogitLattice<F>,
    lm: &NgramLm,
    alphabet: &Alphabet,
    alpha: f64,
    beta: f64,
) -> Result<QBreakdown, DecodeError> {
    if lattice.width() != alphabet.size() {
        return Err(DecodeError::DimensionMismatch {
            lattice: lattice.width(),
            alphabet: alphabet.size(),
        });
    }
    let ids = to_ids(tagged, alphabet)?;
    let ctc_logp = -ctc_loss(lattice, &ids)?.loss_value().to_f64_c();
    let tokens = lm_tokens(tagged);
    let lm_logp = lm::score(lm, &tokens);
    let wc = word_count(tagged);
    Ok(QBreakdown {
        q: ctc_logp + alpha * lm_logp + beta * wc as f64,
        ctc_logp,
        lm_logp,
        wc,
    })
}

/// Test oracle: enumerates every path, aggregates exact collapse-class
/// probabilities, and returns the Q-argmax (lexicographic tie-break).
pub fn exhaustive_oracle<F: Scalar>(
    lattice: &LogitLattice<F>,
    lm: &NgramLm,
    alphabet: &Alphabet,
    alpha: f64,
    beta: f64,
) -> Result<Hypothesis, DecodeError> {
    if lattice.width() != alphabet.size() {
        return Err(DecodeError::DimensionMismatch {
            lattice: lattice.width(),
            alphabet: alphabet.size(),
        });
    }
    let t_len = lattice.frames();
    let width = alphabet.size();
    let space = (width as f64).powi(t_len as i32);
    if space > 1e6 {
        return Err(DecodeError::SearchSpaceTooLarge(space, 1e6));
    }
    let lp: Array2<f64> = lattice.log_probs().mapv(|v| v.to_f64_c());
    let mut classes: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut path = vec![0usize; t_len];
    loop {
        let logp: f64 = path.iter().enumerate().map(|(t, &k)| lp[(t, k)]).sum();
        let class = collapse(&path);
        classes
            .entry(class)
            .and_modify(|acc| *acc = log_add(*acc, logp))
            .or_insert(logp);
        let mut i = t_len;
        loop {
            if i == 0 {
                let mut best: Option<Hypothesis> = None;
                let mut ordered: Vec<(Vec<usize>, f64)> = classes.into_iter().collect();
                ordered.sort_by(|a, b| a.0.cmp(&b.0));
                for (class, ctc_logp) in ordered {
                    let tagged = from_ids(&class, alphabet)?;
                    let lm_logp = lm::score(lm, &lm_tokens(&tagged));
                    let wc = word_count(&tagged);
                    let q = ctc_logp + alpha * lm_logp + beta * wc as f64;
                    let better = match &best {
                        None => true,
                        Some(b) => q > b.q || (q == b.q && tagged < b.tagged),
                    };
                    if better {
                        best = Some(Hypothesis {
                            tagged,
                            q,
                            ctc_logp,
                            lm_logp,
                            wc,
                        });
                    }
                }
                return Ok(best.expect("at least the empty class exists"));
            }
            i -= 1;
            path[i] += 1;
            if path[i] < width {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Masks every non-base, non-blank symbol to an effectively impossible
/// logit, so decoding can only produce base characters.
pub fn mask_to_base<F: Scalar>(lattice: &LogitLattice<F>, alphabet: &Alphabet) -> LogitLattice<F> {
    let floor = F::from_f64_c(-1e30);
    let mut scores = lattice.scores().clone();
    for ((_, k), v) in scores.indexed_iter_mut() {
        if k != BLANK && !alphabet.is_base_id(k) {
            *v = floor;
        }
    }
    LogitLattice::new(scores).expect("masking keeps scores finite")
}

pub fn write_nbest(path: &Path, records: &[NBestRecord]) -> Result<(), DecodeError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_nbest(path: &Path) -> Result<Vec<NBestRecord>, DecodeError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DecodeError::BadNBestFile {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
