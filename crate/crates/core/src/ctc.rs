//! Connectionist temporal classification: exact loss and gradient over a
//! logit lattice, a path-enumeration oracle for tests, and greedy decoding.
//!
//! All probability arithmetic stays in natural-log space; gradients are taken
//! with respect to the raw logits (the row softmax is fused into the loss).

use crate::scalar::{log_add, log_sum_exp, Scalar};
use ndarray::{Array2, Axis};
use thiserror::Error;

/// The reserved blank id. Alphabets pin it at 0 and the CTC code assumes it.
pub const BLANK: usize = 0;

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("lattice contains a non-finite score at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("lattice is empty")]
    EmptyLattice,
    #[error("target contains the blank id at position {0}")]
    BlankInTarget(usize),
    #[error("target id {id} at position {pos} exceeds lattice width {width}")]
    TargetIdOutOfRange { id: usize, pos: usize, width: usize },
    #[error("search space {0} exceeds the enumeration budget {1}")]
    SearchSpaceTooLarge(f64, f64),
}

/// Per-frame scores over the alphabet; the row softmax of `scores` is the
/// emission distribution at each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLattice<F: Scalar> {
    scores: Array2<F>,
}

impl<F: Scalar> LogitLattice<F> {
    pub fn new(scores: Array2<F>) -> Result<Self, CtcError> {
        if scores.nrows() == 0 || scores.ncols() == 0 {
            return Err(CtcError::EmptyLattice);
        }
        for ((t, k), v) in scores.indexed_iter() {
            if !v.is_finite() {
                return Err(CtcError::NonFinite(t, k));
            }
        }
        Ok(LogitLattice { scores })
    }

    /// Number of frames.
    pub fn frames(&self) -> usize {
        self.scores.nrows()
    }

    /// Alphabet size.
    pub fn width(&self) -> usize {
        self.scores.ncols()
    }

    pub fn scores(&self) -> &Array2<F> {
        &self.scores
    }

    /// Row-wise log softmax.
    pub fn log_probs(&self) -> Array2<F> {
        let mut out = self.scores.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let hi = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let log_z = row
                .iter()
                .map(|&x| (x - hi).exp())
                .fold(F::zero(), |a, v| a + v)
                .ln()
                + hi;
            row.mapv_inplace(|x| x - log_z);
        }
        out
    }

    /// Row-wise softmax.
    pub fn probs(&self) -> Array2<F> {
        let mut out = self.log_probs();
        out.mapv_inplace(F::exp);
        out
    }
}

/// Loss (negative log-likelihood) and its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct CtcResult<F: Scalar> {
    pub loss: F,
    pub grad: Array2<F>,
}

/// A feasible target yields a finite loss; a target that cannot be aligned
/// to the lattice has probability zero, reported as its own outcome so
/// batched training can skip it instead of crashing.
#[derive(Debug, Clone)]
pub enum CtcOutcome<F: Scalar> {
    Loss(CtcResult<F>),
    Infeasible,
}

impl<F: Scalar> CtcOutcome<F> {
    pub fn loss_value(&self) -> F {
        match self {
            CtcOutcome::Loss(r) => r.loss,
            CtcOutcome::Infeasible => F::infinity(),
        }
    }

    pub fn into_result(self) -> Option<CtcResult<F>> {
        match self {
            CtcOutcome::Loss(r) => Some(r),
            CtcOutcome::Infeasible => None,
        }
    }
}

fn validate_target<F: Scalar>(lattice: &LogitLattice<F>, target: &[usize]) -> Result<(), CtcError> {
    for (pos, &id) in target.iter().enumerate() {
        if id == BLANK {
            return Err(CtcError::BlankInTarget(pos));
        }
        if id >= lattice.width() {
            return Err(CtcError::TargetIdOutOfRange {
                id,
                pos,
                width: lattice.width(),
            });
        }
    }
    Ok(())
}

fn min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// Blank-interleaved target: `[blank, t1, blank, t2, ..., tL, blank]`.
fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &t in target {
        ext.push(t);
        ext.push(BLANK);
    }
    ext
}

/// Exact CTC loss and gradient via the forward-backward recursion over
/// the blank-interleaved target.
///
/// An empty target is allowed and scores the all-blank labelling, which the
/// decoder uses to rate the empty transcription.
pub fn ctc_loss<F: Scalar>(
    lattice: &LogitLattice<F>,
    target: &[usize],
) -> Result<CtcOutcome<F>, CtcError> {
    validate_target(lattice, target)?;
    let t_len = lattice.frames();
    if t_len < min_frames(target) {
        return Ok(CtcOutcome::Infeasible);
    }
    let lp = lattice.log_probs();
    let ext = extended(target);
    let s_len = ext.len();
    let ninf = F::neg_infinity();

    let mut alpha = Array2::from_elem((t_len, s_len), ninf);
    alpha[(0, 0)] = lp[(0, ext[0])];
    if s_len > 1 {
        alpha[(0, 1)] = lp[(0, ext[1])];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1, s)];
            if s >= 1 {
                acc = log_add(acc, alpha[(t - 1, s - 1)]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[(t - 1, s - 2)]);
            }
            alpha[(t, s)] = acc + lp[(t, ext[s])];
        }
    }
    let mut log_lik = alpha[(t_len - 1, s_len - 1)];
    if s_len > 1 {
        log_lik = log_add(log_lik, alpha[(t_len - 1, s_len - 2)]);
    }
    if log_lik == ninf {
        return Ok(CtcOutcome::Infeasible);
    }

    // beta excludes the emission at its own frame, so alpha + beta is the
    // total log mass of paths passing through (t, s).
    let mut beta = Array2::from_elem((t_len, s_len), ninf);
    beta[(t_len - 1, s_len - 1)] = F::zero();
    if s_len > 1 {
        beta[(t_len - 1, s_len - 2)] = F::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1, s)] + lp[(t + 1, ext[s])];
            if s + 1 < s_len {
                acc = log_add(acc, beta[(t + 1, s + 1)] + lp[(t + 1, ext[s + 1])]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = log_add(acc, beta[(t + 1, s + 2)] + lp[(t + 1, ext[s + 2])]);
            }
            beta[(t, s)] = acc;
        }
    }

    let mut grad = lp.mapv(F::exp);
    for t in 0..t_len {
        let mut per_symbol: Vec<(usize, F)> = Vec::with_capacity(s_len);
        for s in 0..s_len {
            let mass = alpha[(t, s)] + beta[(t, s)];
            if mass > ninf {
                per_symbol.push((ext[s], mass));
            }
        }
        // gamma_{t,k}: posterior probability of emitting symbol k at frame t.
        let mut by_k: std::collections::HashMap<usize, Vec<F>> = std::collections::HashMap::new();
        for (k, m) in per_symbol {
            by_k.entry(k).or_default().push(m);
        }
        for (k, masses) in by_k {
            let gamma = (log_sum_exp(&masses) - log_lik).exp();
            grad[(t, k)] -= gamma;
        }
    }

    Ok(CtcOutcome::Loss(CtcResult {
        loss: -log_lik,
        grad,
    }))
}

/// Test oracle: enumerates every path, sums the probability of those that
/// collapse to `target`, and returns the negative log of the sum
/// (`+inf` when no path matches).
pub fn ctc_loss_bruteforce<F: Scalar>(
    lattice: &LogitLattice<F>,
    target: &[usize],
) -> Result<F, CtcError> {
    validate_target(lattice, target)?;
    let t_len = lattice.frames();
    let width = lattice.width();
    let space = (width as f64).powi(t_len as i32);
    if space > 1e7 {
        return Err(CtcError::SearchSpaceTooLarge(space, 1e7));
    }
    let lp = lattice.log_probs();
    let mut path = vec![0usize; t_len];
    let mut acc = F::neg_infinity();
    loop {
        if collapse(&path) == target {
            let mut logp = F::zero();
            for (t, &k) in path.iter().enumerate() {
                logp += lp[(t, k)];
            }
            acc = log_add(acc, logp);
        }
        // Odometer increment over the |A|^T path space.
        let mut i = t_len;
        loop {
            if i == 0 {
                return Ok(-acc);
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

/// Merges adjacent repeats, then removes blanks. Idempotent on blank-free,
/// repeat-free sequences.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(path.len());
    let mut prev = None;
    for &id in path {
        if Some(id) != prev {
            if id != BLANK {
                out.push(id);
            }
            prev = Some(id);
        }
    }
    out
}

/// Best-path decoding: per-frame argmax (lowest id wins ties), collapsed.
pub fn greedy_decode<F: Scalar>(lattice: &LogitLattice<F>) -> Vec<usize> {
    let scores = lattice.scores();
    let path: Vec<usize> = scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random lattice with logits in [-3, 3).
    pub fn random_lattice(seed: u64, t_len: usize, width: usize) -> LogitLattice<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores =
            Array2::from_shape_fn((t_len, width), |_| rng.random_range(-3.0..3.0));
        LogitLattice::new(scores).unwrap()
    }

    /// Random blank-free target of the given length.
    pub fn random_target(seed: u64, len: usize, width: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        (0..len).map(|_| rng.random_range(1..width)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use ndarray::array;

    #[test]
    fn forced_single_path_has_zero_loss() {
        let lattice = LogitLattice::new(array![[-50.0f64, 50.0]]).unwrap();
        let out = ctc_loss(&lattice, &[1]).unwrap();
        assert!(out.loss_value().abs() < 1e-9);
    }

    #[test]
    fn two_frame_uniform_matches_hand_enumeration() {
        // Paths collapsing to "a": a·a, a·blank, blank·a, each 1/4.
        let lattice = LogitLattice::new(Array2::<f64>::zeros((2, 2))).unwrap();
        let out = ctc_loss(&lattice, &[1]).unwrap();
        assert!((out.loss_value() - -(0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn empty_target_scores_all_blank() {
        let lattice = LogitLattice::new(array![[0.3f64, -0.2], [0.1, 0.4]]).unwrap();
        let lp = lattice.log_probs();
        let out = ctc_loss(&lattice, &[]).unwrap();
        let expect = -(lp[(0, 0)] + lp[(1, 0)]);
        assert!((out.loss_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_not_an_error() {
        let lattice = LogitLattice::new(Array2::<f64>::zeros((2, 3))).unwrap();
        assert!(matches!(
            ctc_loss(&lattice, &[1, 1]).unwrap(),
            CtcOutcome::Infeasible
        ));
        assert!(ctc_loss_bruteforce(&lattice, &[1, 1])
            .unwrap()
            .is_infinite());
    }

    #[test]
    fn blank_in_target_rejected() {
        let lattice = LogitLattice::new(Array2::<f64>::zeros((2, 3))).unwrap();
        assert!(matches!(
            ctc_loss(&lattice, &[1, 0]),
            Err(CtcError::BlankInTarget(1))
        ));
        assert!(matches!(
            ctc_loss(&lattice, &[5]),
            Err(CtcError::TargetIdOutOfRange { .. })
        ));
    }

    #[test]
    fn matches_bruteforce_on_small_random_instances() {
        for case in 0..60u64 {
            let t_len = 1 + (case % 6) as usize;
            let width = 2 + (case % 3) as usize;
            let lattice = random_lattice(case, t_len, width);
            let target = random_target(case, 1 + (case as usize % t_len.min(3)), width);
            let fast = ctc_loss(&lattice, &target).unwrap().loss_value();
            let slow = ctc_loss_bruteforce(&lattice, &target).unwrap();
            if fast.is_infinite() || slow.is_infinite() {
                assert_eq!(fast.is_infinite(), slow.is_infinite(), "case {case}");
            } else {
                assert!((fast - slow).abs() < 1e-9, "case {case}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        for case in 0..10u64 {
            let lattice = random_lattice(500 + case, 6, 5);
            for row in lattice.probs().axis_iter(Axis(0)) {
                let s: f64 = row.sum();
                assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
            }
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero_and_loss_nonnegative() {
        for case in 0..20u64 {
            let lattice = random_lattice(1000 + case, 5, 4);
            let target = random_target(case, 2, 4);
            if let CtcOutcome::Loss(res) = ctc_loss(&lattice, &target).unwrap() {
                assert!(res.loss >= 0.0);
                for row in res.grad.axis_iter(Axis(0)) {
                    let s: f64 = row.sum();
                    assert!(s.abs() < 1e-8, "row sum {s}");
                }
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        for case in 0..10u64 {
            let t_len = 2 + (case % 4) as usize;
            let width = 2 + (case % 3) as usize;
            let lattice = random_lattice(2000 + case, t_len, width);
            let target = random_target(case, 1 + (case as usize % 2), width);
            let res = match ctc_loss(&lattice, &target).unwrap() {
                CtcOutcome::Loss(r) => r,
                CtcOutcome::Infeasible => continue,
            };
            let h = 1e-6;
            for t in 0..t_len {
                for k in 0..width {
                    let mut plus = lattice.scores().clone();
                    plus[(t, k)] += h;
                    let mut minus = lattice.scores().clone();
                    minus[(t, k)] -= h;
                    let lp = ctc_loss(&LogitLattice::new(plus).unwrap(), &target)
                        .unwrap()
                        .loss_value();
                    let lm = ctc_loss(&LogitLattice::new(minus).unwrap(), &target)
                        .unwrap()
                        .loss_value();
                    let fd = (lp - lm) / (2.0 * h);
                    let an = res.grad[(t, k)];
                    let err = (fd - an).abs() / an.abs().max(1.0);
                    assert!(err < 1e-5, "case {case} ({t},{k}): fd {fd} vs an {an}");
                }
            }
        }
    }

    #[test]
    fn collapse_rules() {
        assert_eq!(collapse(&[1, 1]), vec![1]);
        assert_eq!(collapse(&[0]), Vec::<usize>::new());
        assert_eq!(collapse(&[1, 0, 1]), vec![1, 1]);
        assert_eq!(collapse(&[1, 2, 2, 0, 2]), vec![1, 2, 2]);
    }

    #[test]
    fn greedy_decode_examples() {
        // argmax rows: a, a, blank, a  →  "aa"
        let l = LogitLattice::new(array![
            [0.0f64, 1.0],
            [0.0, 2.0],
            [3.0, 0.0],
            [0.0, 1.5]
        ])
        .unwrap();
        assert_eq!(greedy_decode(&l), vec![1, 1]);
        let all_blank = LogitLattice::new(array![[1.0f64, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(greedy_decode(&all_blank), Vec::<usize>::new());
        // a, b, b, blank, b → "abb"
        let l2 = LogitLattice::new(array![
            [0.0f64, 2.0, 1.0],
            [0.0, 1.0, 2.0],
            [0.0, 1.0, 2.0],
            [2.0, 0.0, 0.0],
            [0.0, 0.0, 2.0]
        ])
        .unwrap();
        assert_eq!(greedy_decode(&l2), vec![1, 2, 2]);
    }

    #[test]
    fn greedy_equals_collapsed_argmax_path() {
        for case in 0..20u64 {
            let lattice = random_lattice(3000 + case, 6, 4);
            let path: Vec<usize> = lattice
                .scores()
                .axis_iter(Axis(0))
                .map(|row| {
                    (0..row.len())
                        .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                        .unwrap()
                })
                .collect();
            assert_eq!(greedy_decode(&lattice), collapse(&path));
        }
    }
}
