//! Word-token n-gram language model with Witten-Bell interpolation.
//!
//! Tokens are whatever [`crate::alphabet::lm_tokens`] produces, so marker
//! characters and the star are ordinary vocabulary items and the model can
//! license marker placement during fused decoding.
//!
//! Smoothing: the interpolated Witten-Bell estimate
//!
//! ```text
//! p_k(w | c) = (count(c, w) + T(c) · p_{k-1}(w | suffix(c))) / (N(c) + T(c))
//! ```
//!
//! where `N(c)` is the total count of context `c`, `T(c)` the number of
//! distinct continuations, and the order-0 base is uniform over the
//! predictable vocabulary (seen tokens, `</s>`, `<unk>`). The recursion is
//! stored in backoff form (interpolated probabilities per seen n-gram plus
//! per-context backoff weights `T/(N+T)`), which reproduces the
//! interpolated scores exactly and maps one-to-one onto the ARPA-style
//! text format used by [`save_lm`]/[`load_lm`]:
//!
//! ```text
//! \data\
//! ngram 1=<count>         (one line per order)
//! \1-grams:
//! <log10 p>\t<token>\t<log10 backoff>     (backoff column below top order)
//! ...
//! \end\
//! ```

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use thiserror::Error;

/// Sentence-begin token (context only, never predicted).
pub const BOS: &str = "<s>";
/// Sentence-end token.
pub const EOS: &str = "</s>";
/// Unknown-word token; every out-of-vocabulary token maps to it.
pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("n-gram order must be >= 1")]
    BadOrder,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("language model file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    /// Natural-log interpolated probability; `-inf` for the `<s>` sentinel.
    logp: f64,
    /// Natural-log backoff weight, present when the gram occurs as a context.
    bow: Option<f64>,
}

/// Immutable after training; scoring is lock-free and shareable.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramLm {
    order: usize,
    /// `levels[k-1]` holds the k-gram table.
    levels: Vec<HashMap<Vec<String>, Entry>>,
    /// Predictable vocabulary: seen tokens plus `</s>` and `<unk>`.
    vocab: BTreeSet<String>,
}

/// Whether an LM was trained on plain or tagged text; recorded by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmTextMode {
    Plain,
    Tagged,
}

/// Accumulates counts with single-`<s>` padding and derives the smoothed
/// tables. Deterministic: table iteration never feeds arithmetic.
pub fn train_ngram(texts: &[Vec<String>], order: usize) -> Result<NgramLm, LmError> {
    if order == 0 {
        return Err(LmError::BadOrder);
    }
    if texts.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    // counts[k-1]: context (k-1 tokens) -> continuation -> count
    let mut counts: Vec<HashMap<Vec<String>, BTreeMap<String, u64>>> =
        vec![HashMap::new(); order];
    for sentence in texts {
        let mut padded: Vec<String> = Vec::with_capacity(sentence.len() + 2);
        padded.push(BOS.to_string());
        padded.extend(sentence.iter().cloned());
        padded.push(EOS.to_string());
        for k in 1..=order {
            for window in padded.windows(k) {
                let (ctx, w) = window.split_at(k - 1);
                let w = &w[0];
                if k == 1 && w == BOS {
                    continue;
                }
                *counts[k - 1]
                    .entry(ctx.to_vec())
                    .or_default()
                    .entry(w.clone())
                    .or_insert(0) += 1;
            }
        }
    }

    let mut vocab: BTreeSet<String> = counts[0][&Vec::new()].keys().cloned().collect();
    vocab.insert(EOS.to_string());
    vocab.insert(UNK.to_string());

    // Interpolated probability straight from the recursion; used once at
    // build time to fill the tables.
    fn interp(
        counts: &[HashMap<Vec<String>, BTreeMap<String, u64>>],
        vocab_size: usize,
        k: usize,
        ctx: &[String],
        w: &str,
    ) -> f64 {
        if k == 0 {
            return 1.0 / vocab_size as f64;
        }
        let lower = || interp(counts, vocab_size, k - 1, &ctx[ctx.len().min(1)..], w);
        match counts[k - 1].get(ctx) {
            None => lower(),
            Some(m) => {
                let n: u64 = m.values().sum();
                let t = m.len() as u64;
                let c = m.get(w).copied().unwrap_or(0);
                (c as f64 + t as f64 * lower()) / ((n + t) as f64)
            }
        }
    }

    let mut levels: Vec<HashMap<Vec<String>, Entry>> = vec![HashMap::new(); order];
    for k in 1..=order {
        for (ctx, m) in &counts[k - 1] {
            for w in m.keys() {
                let mut gram = ctx.clone();
                gram.push(w.clone());
                let p = interp(&counts, vocab.len(), k, ctx, w);
                levels[k - 1].insert(
                    gram,
                    Entry {
                        logp: p.ln(),
                        bow: None,
                    },
                );
            }
        }
    }
    // Explicit unigram entries for <unk> (count 0 everywhere) and <s>
    // (never predicted; probability sentinel, backoff weight attached below).
    levels[0].entry(vec![UNK.to_string()]).or_insert_with(|| Entry {
        logp: interp(&counts, vocab.len(), 1, &[], UNK).ln(),
        bow: None,
    });
    levels[0].entry(vec![BOS.to_string()]).or_insert(Entry {
        logp: f64::NEG_INFINITY,
        bow: None,
    });
    // Backoff weights: every context of the (k+1)-gram table gets
    // T/(N+T) attached to its own k-gram entry.
    for k in 1..order {
        for (ctx, m) in &counts[k] {
            let n: u64 = m.values().sum();
            let t = m.len() as u64;
            let bow = (t as f64 / (n + t) as f64).ln();
            let entry = levels[k - 1].entry(ctx.clone()).or_insert(Entry {
                logp: f64::NEG_INFINITY,
                bow: None,
            });
            entry.bow = Some(bow);
        }
    }
    Ok(NgramLm {
        order,
        levels,
        vocab,
    })
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Predictable vocabulary (never contains `<s>`).
    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    /// Maps a raw token to its in-vocabulary form.
    pub fn map_token<'a>(&self, t: &'a str) -> &'a str {
        if t == BOS || t == EOS || !self.vocab.contains(t) {
            UNK
        } else {
            t
        }
    }

    /// `log p(w | context)` via the backoff chain. `context` may be any
    /// length; only its last `order - 1` tokens matter. `w` must already be
    /// in-vocabulary (see [`NgramLm::map_token`]).
    pub fn token_logprob(&self, context: &[String], w: &str) -> f64 {
        let start = context.len().saturating_sub(self.order - 1);
        self.chain(&context[start..], w)
    }

    fn chain(&self, ctx: &[String], w: &str) -> f64 {
        let level = ctx.len(); // query table index = ctx.len() (k-gram level k = len+1)
        let mut gram: Vec<String> = Vec::with_capacity(ctx.len() + 1);
        gram.extend(ctx.iter().cloned());
        gram.push(w.to_string());
        if let Some(e) = self.levels[level].get(&gram) {
            if e.logp > f64::NEG_INFINITY {
                return e.logp;
            }
        }
        if level == 0 {
            // Mapped tokens always have a unigram entry; this is the <unk>
            // fallback for robustness only.
            return self.levels[0]
                .get(&vec![UNK.to_string()])
                .map(|e| e.logp)
                .unwrap_or(f64::NEG_INFINITY);
        }
        let bow = self.levels[level - 1]
            .get(ctx)
            .and_then(|e| e.bow)
            .unwrap_or(0.0);
        bow + self.chain(&ctx[1..], w)
    }

    /// Every stored context (grams carrying a backoff weight), plus the
    /// empty context. Sorted; used by the normalization checks.
    pub fn contexts(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new()];
        for level in &self.levels {
            let mut ctxs: Vec<_> = level
                .iter()
                .filter(|(_, e)| e.bow.is_some())
                .map(|(g, _)| g.clone())
                .collect();
            ctxs.sort();
            out.extend(ctxs);
        }
        out
    }
}

/// Sentence log probability: boundary-padded sum of token log probs
/// including the `</s>` term. Unknown tokens map to `<unk>`. Always <= 0.
pub fn score(lm: &NgramLm, tokens: &[String]) -> f64 {
    let mut hist: Vec<String> = vec![BOS.to_string()];
    let mut total = 0.0;
    for t in tokens {
        let w = lm.map_token(t);
        total += lm.token_logprob(&hist, w);
        hist.push(w.to_string());
        if hist.len() > lm.order {
            hist.remove(0);
        }
    }
    total + lm.token_logprob(&hist, EOS)
}

fn to_log10(ln_p: f64) -> f64 {
    ln_p / std::f64::consts::LN_10
}

/// Serializes in the ARPA-style layout documented at module level.
pub fn save_lm(lm: &NgramLm, path: &Path) -> Result<(), LmError> {
    let mut out = String::from("\\data\\\n");
    for (k, level) in lm.levels.iter().enumerate() {
        out.push_str(&format!("ngram {}={}\n", k + 1, level.len()));
    }
    for (k, level) in lm.levels.iter().enumerate() {
        out.push_str(&format!("\n\\{}-grams:\n", k + 1));
        let mut grams: Vec<_> = level.keys().cloned().collect();
        grams.sort();
        for gram in grams {
            let e = &level[&gram];
            if e.logp == f64::NEG_INFINITY {
                out.push_str("-99");
            } else {
                out.push_str(&format!("{:.12}", to_log10(e.logp)));
            }
            out.push('\t');
            out.push_str(&gram.join(" "));
            if let Some(bow) = e.bow {
                out.push_str(&format!("\t{:.12}", to_log10(bow)));
            }
            out.push('\n');
        }
    }
    out.push_str("\n\\end\\\n");
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_lm(path: &Path) -> Result<NgramLm, LmError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().peekable();
    for line in lines.by_ref() {
        if line.trim() == "\\data\\" {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        return Err(LmError::BadFile(format!(
            "expected \\data\\ header, found {line:?}"
        )));
    }
    let mut declared: Vec<usize> = Vec::new();
    loop {
        let Some(line) = lines.peek() else {
            return Err(LmError::BadFile("missing n-gram sections".into()));
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('\\') {
            break;
        }
        let rest = line
            .strip_prefix("ngram ")
            .ok_or_else(|| LmError::BadFile(format!("bad count line {line:?}")))?;
        let (k, n) = rest
            .split_once('=')
            .ok_or_else(|| LmError::BadFile(format!("bad count line {line:?}")))?;
        let k: usize = k
            .trim()
            .parse()
            .map_err(|_| LmError::BadFile(format!("bad order in {line:?}")))?;
        if k != declared.len() + 1 {
            return Err(LmError::BadFile("orders must be 1..n in sequence".into()));
        }
        declared.push(
            n.trim()
                .parse()
                .map_err(|_| LmError::BadFile(format!("bad count in {line:?}")))?,
        );
        lines.next();
    }
    if declared.is_empty() {
        return Err(LmError::BadFile("no ngram counts declared".into()));
    }
    let order = declared.len();
    let mut levels: Vec<HashMap<Vec<String>, Entry>> = vec![HashMap::new(); order];
    let mut current: Option<usize> = None;
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "\\end\\" {
            current = None;
            break;
        }
        if let Some(rest) = line.strip_prefix('\\') {
            let k: usize = rest
                .strip_suffix("-grams:")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| LmError::BadFile(format!("bad section header {line:?}")))?;
            if k == 0 || k > order {
                return Err(LmError::BadFile(format!("section {k} out of range")));
            }
            current = Some(k);
            continue;
        }
        let k = current.ok_or_else(|| LmError::BadFile(format!("entry outside section: {line:?}")))?;
        let mut fields = line.split('\t');
        let logp10: f64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| LmError::BadFile(format!("bad probability in {line:?}")))?;
        let gram: Vec<String> = fields
            .next()
            .ok_or_else(|| LmError::BadFile(format!("missing gram in {line:?}")))?
            .split(' ')
            .map(str::to_string)
            .collect();
        if gram.len() != k {
            return Err(LmError::BadFile(format!(
                "{}-gram section holds {}-token gram {gram:?}",
                k,
                gram.len()
            )));
        }
        let bow = fields
            .next()
            .map(|s| {
                s.parse::<f64>()
                    .map(|b| b * std::f64::consts::LN_10)
                    .map_err(|_| LmError::BadFile(format!("bad backoff in {line:?}")))
            })
            .transpose()?;
        let logp = if logp10 <= -98.0 {
            f64::NEG_INFINITY
        } else {
            logp10 * std::f64::consts::LN_10
        };
        levels[k - 1].insert(gram, Entry { logp, bow });
    }
    if current.is_some() {
        return Err(LmError::BadFile("missing \\end\\ terminator".into()));
    }
    for (k, (level, n)) in levels.iter().zip(&declared).enumerate() {
        if level.len() != *n {
            return Err(LmError::BadFile(format!(
                "{}-gram section has {} entries, header declared {}",
                k + 1,
                level.len(),
                n
            )));
        }
    }
    let mut vocab: BTreeSet<String> = levels[0]
        .keys()
        .map(|g| g[0].clone())
        .filter(|t| t != BOS)
        .collect();
    vocab.insert(EOS.to_string());
    vocab.insert(UNK.to_string());
    Ok(NgramLm {
        order,
        levels,
        vocab,
    })
}
