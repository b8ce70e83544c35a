//! Entity-level scoring and transcript error rates.
//!
//! Hypothesis and reference entity sequences are aligned by minimum edit
//! distance (substitution costs 0 on a category match, 1 otherwise;
//! insertions and deletions cost 1). Ties are resolved by a lexicographic
//! objective (fewest edits, then most category matches, then most
//! category+value matches), which makes the hit counts deterministic and
//! symmetric in (ref, hyp). A category hit is an aligned pair with equal
//! categories; a cat+value hit additionally requires equal normalized
//! values. Metrics are micro-averaged over the corpus.

use crate::alphabet::{parse, Category, Entity, ParsePolicy};
use crate::corpus::ManifestRecord;
use crate::decoder::NBestRecord;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("entity list is not ordered and non-overlapping (entity {0})")]
    UnorderedEntities(usize),
    #[error("utterance ids do not match: {missing} missing from {side}")]
    IdMismatch { missing: String, side: &'static str },
    #[error("utterance {id}: {source}")]
    BadHypothesis {
        id: String,
        #[source]
        source: crate::alphabet::CodecError,
    },
}

/// Scoring mode selector for reports that focus on one mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "category")]
    Category,
    #[serde(rename = "catvalue")]
    CatValue,
}

/// Micro-averaged counts and derived rates for one scoring mode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub hits: usize,
    pub hyp_total: usize,
    pub ref_total: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl ModeMetrics {
    fn finalize(hits: usize, hyp_total: usize, ref_total: usize) -> ModeMetrics {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(hits, hyp_total);
        let recall = ratio(hits, ref_total);
        ModeMetrics {
            hits,
            hyp_total,
            ref_total,
            precision,
            recall,
            f_measure: f_measure(precision, recall),
        }
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Full scoring report over a corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub category: ModeMetrics,
    pub cat_value: ModeMetrics,
    /// (cat+value hits) / (category hits); 0 when there are no hits.
    pub value_accuracy: f64,
    pub per_category: BTreeMap<Category, ModeMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cer: Option<f64>,
}

impl EvalReport {
    /// Aligned text table (System / Corpus / Detection / P / R / F), one
    /// row per detection mode.
    pub fn table(&self, system: &str, corpus: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:<8} {:<10} {:>9} {:>7} {:>9}\n",
            "System", "Corpus", "Detection", "Precision", "Recall", "F-measure"
        ));
        for (name, m) in [("category", &self.category), ("cat+value", &self.cat_value)] {
            out.push_str(&format!(
                "{:<10} {:<8} {:<10} {:>9.2} {:>7.2} {:>9.2}\n",
                system, corpus, name, m.precision, m.recall, m.f_measure
            ));
        }
        if let (Some(w), Some(c)) = (self.wer, self.cer) {
            out.push_str(&format!("{:<10} {:<8} WER {:.4}  CER {:.4}\n", system, corpus, w, c));
        }
        out
    }
}

/// One step of an entity alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    /// Aligned pair with equal categories (ref index, hyp index).
    Match(usize, usize),
    /// Aligned pair with differing categories.
    Substitute(usize, usize),
    /// Reference entity left unmatched.
    Delete(usize),
    /// Hypothesis entity left unmatched.
    Insert(usize),
}

fn check_ordered(list: &[Entity]) -> Result<(), EvalError> {
    let mut prev_end = 0usize;
    for (i, e) in list.iter().enumerate() {
        if e.start >= e.end || e.start < prev_end {
            return Err(EvalError::UnorderedEntities(i));
        }
        prev_end = e.end;
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
struct Cell {
    cost: u32,
    cat_hits: u32,
    val_hits: u32,
}

impl Cell {
    fn better(self, other: Cell) -> bool {
        (self.cost, other.cat_hits, other.val_hits) < (other.cost, self.cat_hits, self.val_hits)
    }

    fn plus(self, d: Cell) -> Cell {
        Cell {
            cost: self.cost + d.cost,
            cat_hits: self.cat_hits + d.cat_hits,
            val_hits: self.val_hits + d.val_hits,
        }
    }
}

fn norm(v: &str) -> String {
    v.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Minimum-edit-distance alignment of two ordered entity sequences.
#[allow(clippy::needless_range_loop)]
pub fn align_entities(refs: &[Entity], hyps: &[Entity]) -> Result<Vec<AlignOp>, EvalError> {
    check_ordered(refs)?;
    check_ordered(hyps)?;
    let m = refs.len();
    let n = hyps.len();
    let mut dp = vec![
        vec![
            Cell {
                cost: 0,
                cat_hits: 0,
                val_hits: 0
            };
            n + 1
        ];
        m + 1
    ];
    for i in 1..=m {
        dp[i][0].cost = i as u32;
    }
    for j in 1..=n {
        dp[0][j].cost = j as u32;
    }
    let step = |i: usize, j: usize| -> Cell {
        let cat = refs[i].category == hyps[j].category;
        let val = cat && norm(&refs[i].value) == norm(&hyps[j].value);
        Cell {
            cost: u32::from(!cat),
            cat_hits: u32::from(cat),
            val_hits: u32::from(val),
        }
    };
    for i in 1..=m {
        for j in 1..=n {
            let mut best = dp[i - 1][j - 1].plus(step(i - 1, j - 1));
            let del = dp[i - 1][j].plus(Cell {
                cost: 1,
                cat_hits: 0,
                val_hits: 0,
            });
            if del.better(best) {
                best = del;
            }
            let ins = dp[i][j - 1].plus(Cell {
                cost: 1,
                cat_hits: 0,
                val_hits: 0,
            });
            if ins.better(best) {
                best = ins;
            }
            dp[i][j] = best;
        }
    }
    // Backtrace, preferring aligned pairs, then deletions, then insertions
    // among the optimal predecessors.
    let mut ops = Vec::with_capacity(m.max(n));
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let d = step(i - 1, j - 1);
            if dp[i - 1][j - 1].plus(d) == dp[i][j] {
                ops.push(if d.cat_hits == 1 {
                    AlignOp::Match(i - 1, j - 1)
                } else {
                    AlignOp::Substitute(i - 1, j - 1)
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0
            && dp[i - 1][j].plus(Cell {
                cost: 1,
                cat_hits: 0,
                val_hits: 0,
            }) == dp[i][j]
        {
            ops.push(AlignOp::Delete(i - 1));
            i -= 1;
            continue;
        }
        ops.push(AlignOp::Insert(j - 1));
        j -= 1;
    }
    ops.reverse();
    Ok(ops)
}

/// One utterance ready for scoring.
#[derive(Debug, Clone)]
pub struct EvalInput {
    pub id: String,
    pub ref_entities: Vec<Entity>,
    pub hyp_entities: Vec<Entity>,
    /// Plain transcripts; when present on every utterance, WER/CER are
    /// included in the report.
    pub ref_plain: Option<String>,
    pub hyp_plain: Option<String>,
}

/// Pairs a reference manifest with decoded n-best records by utterance id.
/// References parse strictly; hypotheses parse under the repair policy.
pub fn pair_manifest_nbest(
    refs: &[ManifestRecord],
    hyps: &[NBestRecord],
) -> Result<Vec<EvalInput>, EvalError> {
    let by_id: BTreeMap<&str, &NBestRecord> =
        hyps.iter().map(|h| (h.id.as_str(), h)).collect();
    for h in hyps {
        if !refs.iter().any(|r| r.id == h.id) {
            return Err(EvalError::IdMismatch {
                missing: h.id.clone(),
                side: "reference manifest",
            });
        }
    }
    refs.iter()
        .map(|r| {
            let h = by_id.get(r.id.as_str()).ok_or_else(|| EvalError::IdMismatch {
                missing: r.id.clone(),
                side: "hypothesis file",
            })?;
            let (_, ref_entities) =
                parse(&r.tagged, ParsePolicy::Strict).map_err(|e| EvalError::BadHypothesis {
                    id: r.id.clone(),
                    source: e,
                })?;
            let best = h.nbest.first().map(|b| b.tagged.as_str()).unwrap_or("");
            let (hyp_words, hyp_entities) =
                parse(best, ParsePolicy::Repair).map_err(|e| EvalError::BadHypothesis {
                    id: r.id.clone(),
                    source: e,
                })?;
            Ok(EvalInput {
                id: r.id.clone(),
                ref_entities,
                hyp_entities,
                ref_plain: Some(r.plain.clone()),
                hyp_plain: Some(hyp_words.join(" ")),
            })
        })
        .collect()
}

/// Micro-averaged corpus scoring over both modes at once.
pub fn score(inputs: &[EvalInput]) -> Result<EvalReport, EvalError> {
    let mut cat_hits = 0usize;
    let mut val_hits = 0usize;
    let mut hyp_total = 0usize;
    let mut ref_total = 0usize;
    let mut per_cat: BTreeMap<Category, (usize, usize, usize)> = BTreeMap::new();
    for input in inputs {
        hyp_total += input.hyp_entities.len();
        ref_total += input.ref_entities.len();
        for e in &input.ref_entities {
            per_cat.entry(e.category).or_default().2 += 1;
        }
        for e in &input.hyp_entities {
            per_cat.entry(e.category).or_default().1 += 1;
        }
        for op in align_entities(&input.ref_entities, &input.hyp_entities)? {
            if let AlignOp::Match(i, j) = op {
                let r = &input.ref_entities[i];
                cat_hits += 1;
                per_cat.entry(r.category).or_default().0 += 1;
                if norm(&r.value) == norm(&input.hyp_entities[j].value) {
                    val_hits += 1;
                }
            }
        }
    }
    let transcripts: Option<(Vec<&str>, Vec<&str>)> = inputs
        .iter()
        .map(|i| Some((i.ref_plain.as_deref()?, i.hyp_plain.as_deref()?)))
        .collect();
    let (wer_rate, cer_rate) = match &transcripts {
        Some(pairs) if !pairs.0.is_empty() => {
            let (r, h) = pairs;
            (Some(wer(r, h)), Some(cer(r, h)))
        }
        _ => (None, None),
    };
    Ok(EvalReport {
        utterances: inputs.len(),
        category: ModeMetrics::finalize(cat_hits, hyp_total, ref_total),
        cat_value: ModeMetrics::finalize(val_hits, hyp_total, ref_total),
        value_accuracy: if cat_hits == 0 {
            0.0
        } else {
            val_hits as f64 / cat_hits as f64
        },
        per_category: per_cat
            .into_iter()
            .map(|(c, (hits, hyp, refs))| (c, ModeMetrics::finalize(hits, hyp, refs)))
            .collect(),
        wer: wer_rate,
        cer: cer_rate,
    })
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

fn corpus_rate(edits: usize, n: usize) -> f64 {
    if n == 0 {
        if edits == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        edits as f64 / n as f64
    }
}

/// Corpus word error rate: summed edit distance over summed ref length.
pub fn wer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> f64 {
    let mut edits = 0usize;
    let mut n = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        let rw: Vec<&str> = r.as_ref().split_whitespace().collect();
        let hw: Vec<&str> = h.as_ref().split_whitespace().collect();
        edits += levenshtein(&rw, &hw);
        n += rw.len();
    }
    corpus_rate(edits, n)
}

/// Corpus character error rate.
pub fn cer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> f64 {
    let mut edits = 0usize;
    let mut n = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        let rc: Vec<char> = r.as_ref().chars().collect();
        let hc: Vec<char> = h.as_ref().chars().collect();
        edits += levenshtein(&rc, &hc);
        n += rc.len();
    }
    corpus_rate(edits, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(cat: Category, value: &str, start: usize) -> Entity {
        Entity {
            category: cat,
            value: value.into(),
            start,
            end: start + value.split_whitespace().count(),
        }
    }

    fn input(refs: Vec<Entity>, hyps: Vec<Entity>) -> EvalInput {
        EvalInput {
            id: "u".into(),
            ref_entities: refs,
            hyp_entities: hyps,
            ref_plain: None,
            hyp_plain: None,
        }
    }

    #[test]
    fn identical_lists_align_as_matches() {
        let refs = vec![ent(Category::Pers, "jean", 0), ent(Category::Loc, "paris", 2)];
        let ops = align_entities(&refs, &refs).unwrap();
        assert_eq!(ops, vec![AlignOp::Match(0, 0), AlignOp::Match(1, 1)]);
    }

    #[test]
    fn missing_hypothesis_is_a_deletion() {
        let refs = vec![ent(Category::Pers, "jean", 0)];
        let ops = align_entities(&refs, &[]).unwrap();
        assert_eq!(ops, vec![AlignOp::Delete(0)]);
    }

    #[test]
    fn alignment_prefers_the_cheap_deletion() {
        // ref=[pers, loc], hyp=[loc]: align loc-loc and delete pers (cost 1)
        // rather than two substitutions (cost 2).
        let refs = vec![ent(Category::Pers, "jean", 0), ent(Category::Loc, "paris", 2)];
        let hyps = vec![ent(Category::Loc, "paris", 0)];
        let ops = align_entities(&refs, &hyps).unwrap();
        assert_eq!(ops, vec![AlignOp::Delete(0), AlignOp::Match(1, 0)]);
    }

    #[test]
    fn unordered_input_is_rejected() {
        let bad = vec![ent(Category::Pers, "b", 3), ent(Category::Loc, "a", 0)];
        assert!(matches!(
            align_entities(&bad, &[]),
            Err(EvalError::UnorderedEntities(1))
        ));
    }

    #[test]
    fn perfect_hypothesis_scores_one() {
        let refs = vec![ent(Category::Pers, "jean", 0), ent(Category::Loc, "paris", 2)];
        let report = score(&[input(refs.clone(), refs)]).unwrap();
        assert_eq!(report.category.f_measure, 1.0);
        assert_eq!(report.cat_value.f_measure, 1.0);
        assert_eq!(report.value_accuracy, 1.0);
    }

    #[test]
    fn half_recall_hand_count() {
        let refs = vec![ent(Category::Pers, "jean", 0), ent(Category::Loc, "paris", 2)];
        let hyps = vec![ent(Category::Pers, "jean", 0)];
        let report = score(&[input(refs, hyps)]).unwrap();
        assert_eq!(report.category.precision, 1.0);
        assert_eq!(report.category.recall, 0.5);
        assert!((report.category.f_measure - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.cat_value, report.category);
        // Reported F is internally the harmonic mean of reported P and R.
        for m in [&report.category, &report.cat_value] {
            assert!((m.f_measure - f_measure(m.precision, m.recall)).abs() < 1e-12);
        }
    }

    #[test]
    fn paper_style_rounding() {
        assert!((f_measure(0.83, 0.52) - 0.64).abs() < 0.005);
        assert!((f_measure(0.82, 0.57) - 0.67).abs() < 0.005);
        assert!((f_measure(0.76, 0.63) - 0.69).abs() < 0.005);
    }

    #[test]
    fn swapping_ref_and_hyp_swaps_precision_and_recall() {
        let refs = vec![
            ent(Category::Pers, "jean", 0),
            ent(Category::Loc, "paris", 2),
            ent(Category::Time, "hier", 5),
        ];
        let hyps = vec![ent(Category::Loc, "paris", 0), ent(Category::Time, "demain", 3)];
        let fwd = score(&[input(refs.clone(), hyps.clone())]).unwrap();
        let rev = score(&[input(hyps, refs)]).unwrap();
        assert_eq!(fwd.category.precision, rev.category.recall);
        assert_eq!(fwd.category.recall, rev.category.precision);
        assert_eq!(fwd.category.f_measure, rev.category.f_measure);
        assert_eq!(fwd.cat_value.precision, rev.cat_value.recall);
    }

    #[test]
    fn value_hits_never_exceed_category_hits() {
        let refs = vec![ent(Category::Pers, "jean", 0), ent(Category::Pers, "anna", 2)];
        let hyps = vec![ent(Category::Pers, "jean", 0), ent(Category::Pers, "paul", 2)];
        let report = score(&[input(refs, hyps)]).unwrap();
        assert_eq!(report.category.hits, 2);
        assert_eq!(report.cat_value.hits, 1);
        assert!(report.cat_value.f_measure <= report.category.f_measure);
        assert_eq!(report.value_accuracy, 0.5);
    }

    #[test]
    fn alignment_maximizes_value_hits_among_optima() {
        // Two cost-optimal pairings exist; the scorer must take the one
        // that pairs equal values.
        let refs = vec![ent(Category::Pers, "anna", 0), ent(Category::Pers, "jean", 2)];
        let hyps = vec![ent(Category::Pers, "jean", 0)];
        let report = score(&[input(refs, hyps)]).unwrap();
        assert_eq!(report.cat_value.hits, 1);
    }

    #[test]
    fn wer_cer_examples() {
        assert_eq!(wer(&["a b c"], &["a b c"]), 0.0);
        assert!((wer(&["a b c"], &["a c"]) - 1.0 / 3.0).abs() < 1e-12);
        assert!((cer(&["abc"], &["axc"]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(cer(&["abc"], &["abc"]), 0.0);
    }

    #[test]
    fn report_serializes_and_renders() {
        let refs = vec![ent(Category::Pers, "jean", 0)];
        let report = score(&[input(refs.clone(), refs)]).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"category\""));
        let table = report.table("e2e", "test");
        assert!(table.contains("cat+value"));
    }
}
