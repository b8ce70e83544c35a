//! Mini-batch CTC training with momentum SGD, global-norm gradient
//! clipping, and per-epoch gain/tempo perturbation of the input features.
//!
//! Per-sample forward/backward passes run in parallel; gradients are
//! reduced in utterance order, so results do not depend on the worker
//! count. Every random draw derives from the training seed.

use super::{Net, NetError};
use crate::alphabet::{self, Alphabet, ParsePolicy};
use crate::corpus::{derive_seed, perturb, FeatureSequence};
use crate::ctc::{ctc_loss, greedy_decode, CtcOutcome};
use crate::eval::{self, EvalInput};
use crate::scalar::Scalar;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Which task the targets encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Plain transcription, base alphabet only.
    Asr,
    /// Tagged transcription over the extended alphabet.
    Ner,
}

/// One training or dev utterance, target text already chosen for the phase
/// (plain, tagged, or star-transformed tagged).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub features: FeatureSequence<f32>,
    pub target: String,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub phase: Phase,
    /// Seed for shuffling and perturbation; independent of the init seed.
    pub seed: u64,
    /// Worker cap; `None` uses the process-global pool.
    pub threads: Option<usize>,
    /// Skip the per-epoch dev evaluation when false.
    pub eval_dev: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            phase: Phase::Asr,
            seed: 1234,
            threads: None,
            eval_dev: true,
        }
    }
}

/// Per-epoch training log record, serialized as one JSONL line by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub skipped_infeasible: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_cer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_f_category: Option<f64>,
}

/// Loss and parameter gradients of one sample; `None` when infeasible.
type SampleGrad<F> = Option<(f64, Vec<Array2<F>>)>;

struct MomentumSgd<F: Scalar> {
    velocity: Vec<Array2<F>>,
    lr: f64,
    momentum: f64,
    clip: f64,
}

impl<F: Scalar> MomentumSgd<F> {
    fn new(shapes: &[(usize, usize)], lr: f64, momentum: f64, clip: f64) -> Self {
        MomentumSgd {
            velocity: shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect(),
            lr,
            momentum,
            clip,
        }
    }

    fn step(&mut self, params: Vec<&mut Array2<F>>, grads: &[Array2<F>]) {
        let norm: f64 = grads
            .iter()
            .map(|g| g.iter().map(|v| v.to_f64_c().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        let lr = F::from_f64_c(self.lr * scale);
        let mu = F::from_f64_c(self.momentum);
        for ((p, v), g) in params.into_iter().zip(&mut self.velocity).zip(grads) {
            v.zip_mut_with(g, |v, g| *v = *v * mu - *g * lr);
            p.zip_mut_with(v, |p, v| *p += *v);
        }
    }
}

/// Loads manifest records into training samples, choosing the target text
/// for the phase: the plain transcript for ASR, the tagged transcript
/// (star-transformed when `starred`) for NER.
pub fn build_samples(
    manifest_dir: &std::path::Path,
    records: &[crate::corpus::ManifestRecord],
    phase: Phase,
    starred: bool,
) -> Result<Vec<TrainSample>, NetError> {
    records
        .iter()
        .map(|r| {
            let features = crate::corpus::load_record_features(manifest_dir, r)?;
            let target = match phase {
                Phase::Asr => r.plain.clone(),
                Phase::Ner => {
                    if starred {
                        let t = crate::alphabet::TaggedTranscript::parse(
                            &r.tagged,
                            ParsePolicy::Strict,
                        )?;
                        crate::alphabet::star_transform(&t).canonical()
                    } else {
                        r.tagged.clone()
                    }
                }
            };
            Ok(TrainSample {
                id: r.id.clone(),
                features,
                target,
            })
        })
        .collect()
}

/// Mean and inverse standard deviation per feature dimension over a corpus.
pub fn feature_stats(samples: &[TrainSample]) -> (Vec<f64>, Vec<f64>) {
    let dim = samples.first().map_or(0, |s| s.features.dim());
    let mut sum = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    let mut n = 0usize;
    for s in samples {
        for row in s.features.frames().rows() {
            for (d, v) in row.iter().enumerate() {
                let v = *v as f64;
                sum[d] += v;
                sq[d] += v * v;
            }
            n += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
    let istd: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / n.max(1) as f64 - m * m).max(1e-8);
            1.0 / var.sqrt()
        })
        .collect();
    (mean, istd)
}

/// Greedy-decode a sample set and report CER/WER against the targets.
pub fn greedy_error_rates<F: Scalar>(
    net: &Net<F>,
    alphabet: &Alphabet,
    samples: &[TrainSample],
    mask_to_base: bool,
) -> Result<(f64, f64), NetError> {
    let decoded: Vec<(String, String)> = samples
        .par_iter()
        .map(|s| -> Result<(String, String), NetError> {
            let lattice = net.forward(&s.features.convert::<F>())?;
            let lattice = if mask_to_base {
                crate::decoder::mask_to_base(&lattice, alphabet)
            } else {
                lattice
            };
            let hyp = alphabet::from_ids(&greedy_decode(&lattice), alphabet)?;
            Ok((s.target.clone(), hyp))
        })
        .collect::<Result<_, _>>()?;
    let refs: Vec<&str> = decoded.iter().map(|(r, _)| r.as_str()).collect();
    let hyps: Vec<&str> = decoded.iter().map(|(_, h)| h.as_str()).collect();
    Ok((eval::cer(&refs, &hyps), eval::wer(&refs, &hyps)))
}

/// Greedy-decode a sample set of tagged targets and report the entity
/// category F-measure (hypotheses parsed under the repair policy).
pub fn greedy_category_f<F: Scalar>(
    net: &Net<F>,
    alphabet: &Alphabet,
    samples: &[TrainSample],
) -> Result<f64, NetError> {
    let inputs: Vec<EvalInput> = samples
        .par_iter()
        .map(|s| -> Result<EvalInput, NetError> {
            let lattice = net.forward(&s.features.convert::<F>())?;
            let hyp = alphabet::from_ids(&greedy_decode(&lattice), alphabet)?;
            let (_, ref_entities) = alphabet::parse(&s.target, ParsePolicy::Strict)?;
            let (_, hyp_entities) =
                alphabet::parse(&hyp, ParsePolicy::Repair).expect("repair never fails");
            Ok(EvalInput {
                id: s.id.clone(),
                ref_entities,
                hyp_entities,
                ref_plain: None,
                hyp_plain: None,
            })
        })
        .collect::<Result<_, _>>()?;
    let report = eval::score(&inputs).expect("parsed entities are ordered");
    Ok(report.category.f_measure)
}

fn run_epochs<F: Scalar>(
    net: &mut Net<F>,
    train_set: &[TrainSample],
    dev_set: &[TrainSample],
    alphabet: &Alphabet,
    opts: &TrainOptions,
) -> Result<Vec<EpochStats>, NetError> {
    let cfg = net.config().clone();
    if cfg.output_size != alphabet.size() {
        return Err(NetError::AlphabetMismatch {
            net: cfg.output_size,
            alphabet: alphabet.size(),
        });
    }
    // Targets are fixed per phase; encode them once.
    let targets: Vec<Vec<usize>> = train_set
        .iter()
        .map(|s| alphabet::to_ids(&s.target, alphabet))
        .collect::<Result<_, _>>()?;
    if net.feature_stats().0.iter().all(|m| *m == 0.0) {
        let (mean, istd) = feature_stats(train_set);
        net.set_feature_stats(mean, istd)?;
    }
    let shapes: Vec<(usize, usize)> = net
        .params()
        .iter()
        .map(|p| (p.nrows(), p.ncols()))
        .collect();
    let mut opt = MomentumSgd::<F>::new(&shapes, cfg.learning_rate, cfg.momentum, cfg.clip_norm);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 0x5FFE, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut loss_n = 0usize;
        let mut skipped = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            // Per-sample losses and gradients in parallel, reduced in
            // batch order below.
            let results: Vec<SampleGrad<F>> = batch
                .par_iter()
                .map(|&i| -> Result<SampleGrad<F>, NetError> {
                    let s = &train_set[i];
                    let pert_seed = derive_seed(opts.seed, 0x9E27, (epoch * train_set.len() + i) as u64);
                    let feats =
                        perturb(&s.features, cfg.gain_range, cfg.tempo_range, pert_seed)?
                            .convert::<F>();
                    let (trace, lattice) = net.forward_trace(&feats)?;
                    match ctc_loss(&lattice, &targets[i])? {
                        CtcOutcome::Infeasible => Ok(None),
                        CtcOutcome::Loss(res) => {
                            let loss = res.loss.to_f64_c();
                            if !loss.is_finite() {
                                return Err(NetError::NanLoss {
                                    id: s.id.clone(),
                                    epoch,
                                });
                            }
                            let grads = net.backward(&trace, &res.grad);
                            Ok(Some((loss, grads)))
                        }
                    }
                })
                .collect::<Result<_, _>>()?;
            let mut acc: Option<Vec<Array2<F>>> = None;
            let mut contributing = 0usize;
            for r in results {
                match r {
                    None => skipped += 1,
                    Some((loss, grads)) => {
                        loss_sum += loss;
                        loss_n += 1;
                        contributing += 1;
                        match &mut acc {
                            None => acc = Some(grads),
                            Some(acc) => {
                                for (a, g) in acc.iter_mut().zip(&grads) {
                                    *a = &*a + g;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(mut grads) = acc {
                let inv = F::from_f64_c(1.0 / contributing as f64);
                for g in &mut grads {
                    g.mapv_inplace(|v| v * inv);
                }
                opt.step(net.params_mut(), &grads);
            }
        }
        let mut record = EpochStats {
            epoch,
            train_loss: loss_sum / loss_n.max(1) as f64,
            skipped_infeasible: skipped,
            dev_cer: None,
            dev_wer: None,
            dev_f_category: None,
        };
        if skipped > 0 {
            log::warn!("epoch {epoch}: skipped {skipped} infeasible samples");
        }
        if opts.eval_dev && !dev_set.is_empty() {
            match opts.phase {
                Phase::Asr => {
                    let (cer, wer) = greedy_error_rates(net, alphabet, dev_set, false)?;
                    record.dev_cer = Some(cer);
                    record.dev_wer = Some(wer);
                }
                Phase::Ner => {
                    record.dev_f_category = Some(greedy_category_f(net, alphabet, dev_set)?);
                }
            }
        }
        log::info!(
            "epoch {epoch}: loss {:.4} cer {:?} f {:?}",
            record.train_loss,
            record.dev_cer,
            record.dev_f_category
        );
        stats.push(record);
    }
    Ok(stats)
}

/// Trains in place for `cfg.epochs` epochs and returns the per-epoch log.
pub fn train<F: Scalar>(
    net: &mut Net<F>,
    train_set: &[TrainSample],
    dev_set: &[TrainSample],
    alphabet: &Alphabet,
    opts: &TrainOptions,
) -> Result<Vec<EpochStats>, NetError> {
    match opts.threads {
        None => run_epochs(net, train_set, dev_set, alphabet, opts),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| NetError::BadConfig(format!("thread pool: {e}")))?;
            pool.install(|| run_epochs(net, train_set, dev_set, alphabet, opts))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec, SplitCounts};
    use crate::net::NetConfig;

    fn mini_corpus() -> (Vec<TrainSample>, Vec<TrainSample>, Alphabet, CorpusSpec) {
        let spec = CorpusSpec {
            counts: SplitCounts {
                train: 24,
                dev: 6,
                test: 0,
            },
            feature_dim: 6,
            noise_sigma: 0.1,
            duration_range: (2, 3),
            seed: 5,
            ..CorpusSpec::default()
        };
        let alphabet = Alphabet::build(&spec.base_chars(), false, false).unwrap();
        let utts = generate_corpus(&spec).unwrap();
        let to_sample = |u: &crate::corpus::GeneratedUtterance| TrainSample {
            id: u.id.clone(),
            features: u.features.clone(),
            target: u.plain.clone(),
        };
        let train: Vec<_> = utts
            .iter()
            .filter(|u| u.split == crate::corpus::Split::Train)
            .map(to_sample)
            .collect();
        let dev: Vec<_> = utts
            .iter()
            .filter(|u| u.split == crate::corpus::Split::Dev)
            .map(to_sample)
            .collect();
        (train, dev, alphabet, spec)
    }

    fn mini_cfg(alphabet: &Alphabet, spec: &CorpusSpec, epochs: usize) -> NetConfig {
        NetConfig {
            feature_dim: spec.feature_dim,
            conv_channels: 16,
            hidden: 16,
            rnn_layers: 1,
            output_size: alphabet.size(),
            epochs,
            batch_size: 8,
            learning_rate: 0.15,
            seed: 3,
            ..NetConfig::default()
        }
    }

    #[test]
    fn single_utterance_overfits() {
        let (train_set, _, alphabet, spec) = mini_corpus();
        let one = vec![train_set[0].clone()];
        let mut cfg = mini_cfg(&alphabet, &spec, 120);
        cfg.batch_size = 1;
        cfg.gain_range = (0.0, 0.0);
        cfg.tempo_range = (1.0, 1.0);
        let mut net = Net::<f64>::init(cfg).unwrap();
        let opts = TrainOptions {
            eval_dev: false,
            ..TrainOptions::default()
        };
        let stats = train(&mut net, &one, &[], &alphabet, &opts).unwrap();
        let last = stats.last().unwrap();
        assert!(
            last.train_loss < 0.01,
            "single-utterance loss {}",
            last.train_loss
        );
    }

    #[test]
    fn loss_mostly_decreases_over_first_epochs() {
        let (train_set, dev_set, alphabet, spec) = mini_corpus();
        let mut net = Net::<f64>::init(mini_cfg(&alphabet, &spec, 4)).unwrap();
        let stats = train(
            &mut net,
            &train_set,
            &dev_set,
            &alphabet,
            &TrainOptions::default(),
        )
        .unwrap();
        // At least 2 of the 3 epoch transitions must not increase the loss.
        let drops = stats
            .windows(2)
            .filter(|w| w[1].train_loss <= w[0].train_loss)
            .count();
        assert!(drops >= 2, "losses: {:?}", stats.iter().map(|s| s.train_loss).collect::<Vec<_>>());
        assert!(stats[0].dev_cer.is_some());
    }

    #[test]
    fn training_is_deterministic_and_thread_independent() {
        let (train_set, _, alphabet, spec) = mini_corpus();
        let run = |threads: Option<usize>| {
            let mut net = Net::<f64>::init(mini_cfg(&alphabet, &spec, 1)).unwrap();
            let opts = TrainOptions {
                threads,
                eval_dev: false,
                ..TrainOptions::default()
            };
            let stats = train(&mut net, &train_set, &[], &alphabet, &opts).unwrap();
            (stats[0].train_loss, net)
        };
        let (loss_a, net_a) = run(Some(1));
        let (loss_b, net_b) = run(Some(3));
        assert_eq!(loss_a, loss_b);
        assert_eq!(net_a, net_b);
    }

    #[test]
    fn alphabet_mismatch_is_rejected() {
        let (train_set, _, alphabet, spec) = mini_corpus();
        let mut cfg = mini_cfg(&alphabet, &spec, 1);
        cfg.output_size = alphabet.size() + 3;
        let mut net = Net::<f64>::init(cfg).unwrap();
        assert!(matches!(
            train(&mut net, &train_set, &[], &alphabet, &TrainOptions::default()),
            Err(NetError::AlphabetMismatch { .. })
        ));
    }
}
