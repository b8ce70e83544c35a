//! Trainable acoustic model: strided convolution front-end, stacked
//! bidirectional gated recurrent layers, and an affine output over the
//! emission alphabet. Trained with the CTC loss; see [`train`] for the
//! schedule and [`checkpoint`] for the on-disk format.

mod layers;
pub mod checkpoint;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{build_samples, train, EpochStats, Phase, TrainOptions, TrainSample};

use crate::alphabet::Alphabet;
use crate::corpus::{derive_seed, FeatureSequence};
use crate::ctc::LogitLattice;
use crate::scalar::Scalar;
use layers::{Affine, BiGru, Conv1d, Trace};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("net config: {0}")]
    BadConfig(String),
    #[error("input feature dim {got} does not match config {expected}")]
    FeatureDimMismatch { got: usize, expected: usize },
    #[error("net output size {net} does not match alphabet size {alphabet}")]
    AlphabetMismatch { net: usize, alphabet: usize },
    #[error("new alphabet does not extend the checkpoint alphabet")]
    NotAnExtension,
    #[error("loss became non-finite on utterance {id} (epoch {epoch})")]
    NanLoss { id: String, epoch: usize },
    #[error("checkpoint file {path}: {msg}")]
    BadCheckpoint { path: std::path::PathBuf, msg: String },
    #[error(transparent)]
    Codec(#[from] crate::alphabet::CodecError),
    #[error(transparent)]
    Ctc(#[from] crate::ctc::CtcError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Alphabet(#[from] crate::alphabet::AlphabetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture and optimization hyper-parameters. Fields omitted from a
/// JSON config take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub feature_dim: usize,
    /// Number of convolution layers (each strided).
    pub conv_layers: usize,
    pub conv_channels: usize,
    /// Odd kernel width over the time axis.
    pub conv_kernel: usize,
    pub conv_stride: usize,
    /// Number of bidirectional recurrent layers, >= 1.
    pub rnn_layers: usize,
    pub hidden: usize,
    /// Emission alphabet size (blank included).
    pub output_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gain_range: (f64, f64),
    pub tempo_range: (f64, f64),
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            feature_dim: 16,
            conv_layers: 1,
            conv_channels: 64,
            conv_kernel: 5,
            conv_stride: 2,
            rnn_layers: 2,
            hidden: 64,
            output_size: 0,
            seed: 1,
            learning_rate: 0.08,
            momentum: 0.9,
            clip_norm: 5.0,
            epochs: 8,
            batch_size: 16,
            gain_range: (-0.2, 0.2),
            tempo_range: (0.9, 1.1),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |msg: &str| Err(NetError::BadConfig(msg.into()));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.rnn_layers == 0 {
            return bad("rnn_layers must be >= 1");
        }
        if self.hidden == 0 {
            return bad("hidden must be positive");
        }
        if self.output_size < 2 {
            return bad("output_size must cover blank plus at least one symbol");
        }
        if self.conv_layers > 0 {
            if self.conv_kernel.is_multiple_of(2) {
                return bad("conv_kernel must be odd");
            }
            if self.conv_stride == 0 {
                return bad("conv_stride must be positive");
            }
            if self.conv_channels == 0 {
                return bad("conv_channels must be positive");
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if self.tempo_range.0 <= 0.0 || self.tempo_range.1 < self.tempo_range.0 {
            return bad("tempo_range must be positive and ordered");
        }
        Ok(())
    }
}

/// The acoustic model. Forward passes are pure; training mutates
/// parameters through [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct Net<F: Scalar> {
    cfg: NetConfig,
    convs: Vec<Conv1d<F>>,
    rnns: Vec<BiGru<F>>,
    out: Affine<F>,
    feat_mean: Array2<F>,
    feat_istd: Array2<F>,
}

impl<F: Scalar> Net<F> {
    /// Deterministic initialization from the config seed.
    pub fn init(cfg: NetConfig) -> Result<Net<F>, NetError> {
        cfg.validate()?;
        let tensor_seed = |tag: u64| derive_seed(cfg.seed, 0xA11C, tag);
        let mut convs = Vec::with_capacity(cfg.conv_layers);
        let mut width = cfg.feature_dim;
        for i in 0..cfg.conv_layers {
            convs.push(Conv1d::new(
                width,
                cfg.conv_channels,
                cfg.conv_kernel,
                cfg.conv_stride,
                tensor_seed(10 + i as u64),
            ));
            width = cfg.conv_channels;
        }
        let mut rnns = Vec::with_capacity(cfg.rnn_layers);
        for i in 0..cfg.rnn_layers {
            rnns.push(BiGru::new(width, cfg.hidden, tensor_seed(100 + i as u64)));
            width = 2 * cfg.hidden;
        }
        let out = Affine::new(width, cfg.output_size, tensor_seed(1000));
        Ok(Net {
            feat_mean: Array2::zeros((1, cfg.feature_dim)),
            feat_istd: Array2::from_elem((1, cfg.feature_dim), F::one()),
            cfg,
            convs,
            rnns,
            out,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Per-dimension standardization applied before the first layer;
    /// estimated once from the training corpus and kept across phases.
    pub fn set_feature_stats(&mut self, mean: Vec<f64>, istd: Vec<f64>) -> Result<(), NetError> {
        if mean.len() != self.cfg.feature_dim || istd.len() != self.cfg.feature_dim {
            return Err(NetError::FeatureDimMismatch {
                got: mean.len(),
                expected: self.cfg.feature_dim,
            });
        }
        self.feat_mean = Array2::from_shape_vec((1, mean.len()), mean)
            .expect("len checked")
            .mapv(F::from_f64_c);
        self.feat_istd = Array2::from_shape_vec((1, istd.len()), istd)
            .expect("len checked")
            .mapv(F::from_f64_c);
        Ok(())
    }

    pub fn feature_stats(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.feat_mean.iter().map(|v| v.to_f64_c()).collect(),
            self.feat_istd.iter().map(|v| v.to_f64_c()).collect(),
        )
    }

    /// Lattice length produced for an input of `t_in` frames.
    pub fn out_len(&self, t_in: usize) -> usize {
        self.convs.iter().fold(t_in, |t, c| c.out_len(t))
    }

    fn run(&self, features: &FeatureSequence<F>) -> Result<(Trace<F>, Array2<F>), NetError> {
        if features.dim() != self.cfg.feature_dim {
            return Err(NetError::FeatureDimMismatch {
                got: features.dim(),
                expected: self.cfg.feature_dim,
            });
        }
        let mut x = (features.frames() - &self.feat_mean) * &self.feat_istd;
        let mut conv_traces = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (tr, y) = conv.forward(&x);
            conv_traces.push(tr);
            x = y;
        }
        let mut rnn_traces = Vec::with_capacity(self.rnns.len());
        for rnn in &self.rnns {
            let (tr, y) = rnn.forward(&x);
            rnn_traces.push(tr);
            x = y;
        }
        let (affine_trace, logits) = self.out.forward(&x);
        Ok((
            Trace {
                convs: conv_traces,
                rnns: rnn_traces,
                affine: affine_trace,
            },
            logits,
        ))
    }

    /// Deterministic forward pass to per-frame logits.
    pub fn forward(&self, features: &FeatureSequence<F>) -> Result<LogitLattice<F>, NetError> {
        let (_, logits) = self.run(features)?;
        Ok(LogitLattice::new(logits)?)
    }

    /// Forward pass that keeps the activations needed by [`Net::backward`].
    pub(crate) fn forward_trace(
        &self,
        features: &FeatureSequence<F>,
    ) -> Result<(Trace<F>, LogitLattice<F>), NetError> {
        let (trace, logits) = self.run(features)?;
        Ok((trace, LogitLattice::new(logits)?))
    }

    /// Backpropagates a logit gradient; returns parameter gradients in
    /// `params()` order.
    pub(crate) fn backward(&self, trace: &Trace<F>, d_logits: &Array2<F>) -> Vec<Array2<F>> {
        let (mut dx, affine_grads) = self.out.backward(&trace.affine, d_logits);
        let mut rnn_grads: Vec<Vec<Array2<F>>> = Vec::with_capacity(self.rnns.len());
        for (rnn, tr) in self.rnns.iter().zip(&trace.rnns).rev() {
            let (dxi, g) = rnn.backward(tr, &dx);
            rnn_grads.push(g);
            dx = dxi;
        }
        rnn_grads.reverse();
        let mut conv_grads: Vec<Vec<Array2<F>>> = Vec::with_capacity(self.convs.len());
        for (conv, tr) in self.convs.iter().zip(&trace.convs).rev() {
            let (dxi, g) = conv.backward(tr, &dx);
            conv_grads.push(g);
            dx = dxi;
        }
        conv_grads.reverse();
        let mut grads = Vec::new();
        grads.extend(conv_grads.into_iter().flatten());
        grads.extend(rnn_grads.into_iter().flatten());
        grads.extend(affine_grads);
        grads
    }

    /// All parameter tensors in a stable order (biases as 1×n rows).
    pub fn params(&self) -> Vec<&Array2<F>> {
        let mut p = Vec::new();
        for c in &self.convs {
            p.extend(c.params());
        }
        for r in &self.rnns {
            p.extend(r.params());
        }
        p.extend(self.out.params());
        p
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        let mut p: Vec<&mut Array2<F>> = Vec::new();
        for c in &mut self.convs {
            p.extend(c.params_mut());
        }
        for r in &mut self.rnns {
            p.extend(r.params_mut());
        }
        p.extend(self.out.params_mut());
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Adopts optimizer and schedule settings (not architecture) from
    /// another config; used when a later phase retrains a loaded net.
    pub fn update_training_params(&mut self, src: &NetConfig) {
        self.cfg.learning_rate = src.learning_rate;
        self.cfg.momentum = src.momentum;
        self.cfg.clip_norm = src.clip_norm;
        self.cfg.epochs = src.epochs;
        self.cfg.batch_size = src.batch_size;
        self.cfg.gain_range = src.gain_range;
        self.cfg.tempo_range = src.tempo_range;
        self.cfg.seed = src.seed;
    }
}

/// Test oracle: maximum relative error between the analytic parameter
/// gradients and central finite differences of the CTC loss, over every
/// entry of every parameter tensor.
pub fn gradient_check<F: Scalar>(
    net: &Net<F>,
    features: &FeatureSequence<F>,
    target: &[usize],
    h: f64,
) -> Result<f64, NetError> {
    use crate::ctc::{ctc_loss, CtcOutcome};
    let (trace, lattice) = net.forward_trace(features)?;
    let res = match ctc_loss(&lattice, target)? {
        CtcOutcome::Loss(r) => r,
        CtcOutcome::Infeasible => {
            return Err(NetError::BadConfig(
                "gradient check needs a feasible target".into(),
            ))
        }
    };
    let grads = net.backward(&trace, &res.grad);
    let loss_of = |net: &Net<F>| -> Result<f64, NetError> {
        Ok(ctc_loss(&net.forward(features)?, target)?
            .loss_value()
            .to_f64_c())
    };
    let shapes: Vec<_> = net.params().iter().map(|p| p.raw_dim()).collect();
    let mut worst = 0.0f64;
    for (pi, shape) in shapes.iter().enumerate() {
        for r in 0..shape[0] {
            for c in 0..shape[1] {
                let nudge = |delta: f64| -> Net<F> {
                    let mut copy = net.clone();
                    let v = copy.params_mut()[pi][(r, c)];
                    copy.params_mut()[pi][(r, c)] = v + F::from_f64_c(delta);
                    copy
                };
                let fd = (loss_of(&nudge(h))? - loss_of(&nudge(-h))?) / (2.0 * h);
                let an = grads[pi][(r, c)].to_f64_c();
                worst = worst.max((fd - an).abs() / an.abs().max(1.0));
            }
        }
    }
    Ok(worst)
}

/// Rebuilds the output layer for an extended alphabet: everything below the
/// final affine map is copied unchanged, output columns for symbols already
/// present keep their weights, and only the new symbols' columns are
/// freshly initialized. Keeping the old columns preserves the base-symbol
/// decode exactly, which is what makes the transfer measurable.
pub fn extend_output_layer<F: Scalar>(
    net: &Net<F>,
    old_alphabet: &Alphabet,
    new_alphabet: &Alphabet,
) -> Result<Net<F>, NetError> {
    if net.cfg.output_size != old_alphabet.size() {
        return Err(NetError::AlphabetMismatch {
            net: net.cfg.output_size,
            alphabet: old_alphabet.size(),
        });
    }
    if !new_alphabet.extends(old_alphabet) {
        return Err(NetError::NotAnExtension);
    }
    let mut cfg = net.cfg.clone();
    cfg.output_size = new_alphabet.size();
    let rows = net.out.w.nrows();
    let mut w = layers::init_matrix::<F>(
        rows,
        cfg.output_size,
        derive_seed(cfg.seed, 0xE47E, new_alphabet.size() as u64),
    );
    let mut b = Array2::zeros((1, cfg.output_size));
    let old_cols = old_alphabet.size();
    w.slice_mut(ndarray::s![.., ..old_cols])
        .assign(&net.out.w);
    b.slice_mut(ndarray::s![.., ..old_cols])
        .assign(&net.out.b);
    Ok(Net {
        cfg,
        convs: net.convs.clone(),
        rnns: net.rnns.clone(),
        out: Affine { w, b },
        feat_mean: net.feat_mean.clone(),
        feat_istd: net.feat_istd.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_features, CorpusSpec};

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            feature_dim: 3,
            conv_layers: 1,
            conv_channels: 4,
            conv_kernel: 3,
            conv_stride: 2,
            rnn_layers: 2,
            hidden: 3,
            output_size: 5,
            seed: 42,
            ..NetConfig::default()
        }
    }

    fn random_features(t_len: usize, dim: usize, seed: u64) -> FeatureSequence<f64> {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence::new(Array2::from_shape_fn((t_len, dim), |_| {
            rng.random_range(-1.0..1.0)
        }))
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = Net::<f64>::init(tiny_cfg()).unwrap();
        let b = Net::<f64>::init(tiny_cfg()).unwrap();
        assert_eq!(a, b);
        let mut other = tiny_cfg();
        other.seed = 43;
        assert_ne!(a, Net::<f64>::init(other).unwrap());
    }

    #[test]
    fn lattice_length_follows_stride() {
        let net = Net::<f64>::init(tiny_cfg()).unwrap();
        let f = random_features(10, 3, 1);
        let lattice = net.forward(&f).unwrap();
        assert_eq!(lattice.frames(), 5);
        assert_eq!(lattice.width(), 5);
        assert_eq!(net.out_len(9), 5);
        // Stride 1 preserves length, so doubling input doubles output.
        let mut cfg = tiny_cfg();
        cfg.conv_stride = 1;
        let net1 = Net::<f64>::init(cfg).unwrap();
        assert_eq!(net1.forward(&f).unwrap().frames(), 10);
        assert_eq!(
            net1.forward(&random_features(20, 3, 2)).unwrap().frames(),
            20
        );
    }

    #[test]
    fn forward_is_reproducible_and_finite() {
        let net = Net::<f64>::init(tiny_cfg()).unwrap();
        let f = random_features(12, 3, 3);
        let a = net.forward(&f).unwrap();
        let b = net.forward(&f).unwrap();
        assert_eq!(a.scores(), b.scores());
    }

    #[test]
    fn feature_dim_mismatch_is_rejected() {
        let net = Net::<f64>::init(tiny_cfg()).unwrap();
        let f = random_features(4, 7, 1);
        assert!(matches!(
            net.forward(&f),
            Err(NetError::FeatureDimMismatch { got: 7, expected: 3 })
        ));
    }

    /// Central-difference check of every parameter of every layer type.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        let net = Net::<f64>::init(tiny_cfg()).unwrap();
        let f = random_features(6, 3, 9);
        let worst = gradient_check(&net, &f, &[1usize, 3], 1e-6).unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn extension_preserves_lower_layers_and_old_columns() {
        let spec = CorpusSpec::default();
        let old_a = Alphabet::build(&spec.base_chars(), false, false).unwrap();
        let new_a = Alphabet::build(&spec.base_chars(), true, true).unwrap();
        let mut cfg = tiny_cfg();
        cfg.feature_dim = spec.feature_dim;
        cfg.output_size = old_a.size();
        let net = Net::<f64>::init(cfg).unwrap();
        let extended = extend_output_layer(&net, &old_a, &new_a).unwrap();
        assert_eq!(extended.cfg.output_size, old_a.size() + 10);
        // Everything below the affine output is bitwise identical.
        assert_eq!(net.convs, extended.convs);
        assert_eq!(net.rnns, extended.rnns);
        assert_eq!(
            net.out.w,
            extended.out.w.slice(ndarray::s![.., ..old_a.size()]).to_owned()
        );
        // Forward stays finite at the new width.
        let f = synthesize_features::<f64>("le chat", &spec, 5).unwrap();
        let lattice = extended.forward(&f).unwrap();
        assert_eq!(lattice.width(), new_a.size());
    }

    #[test]
    fn extension_rejects_non_extensions() {
        let old_a = Alphabet::build(&[' ', 'a', 'b'], false, false).unwrap();
        let other = Alphabet::build(&[' ', 'a', 'c'], true, true).unwrap();
        let mut cfg = tiny_cfg();
        cfg.output_size = old_a.size();
        let net = Net::<f64>::init(cfg).unwrap();
        assert!(matches!(
            extend_output_layer(&net, &old_a, &other),
            Err(NetError::NotAnExtension)
        ));
    }
}
