//! End-to-end named entity extraction from feature sequences.
//!
//! A recurrent network trained with the CTC loss emits a character transcript
//! in which entity boundaries appear inline: eight category-opening marker
//! characters plus one shared closer are part of the emission alphabet, so
//! entities are read directly off the decoded string instead of being tagged
//! in a second pass. The crate bundles everything needed to train, decode and
//! score such a system at desk scale on synthetic data.
//!
//! # Module guide
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`alphabet`] | Emission alphabet, marker grammar, tagged-transcript codec |
//! | [`corpus`] | Synthetic corpus generation, feature files, manifests |
//! | [`ctc`] | CTC loss/gradient, brute-force oracle, greedy decoding |
//! | [`lm`] | Witten-Bell interpolated n-gram language model, ARPA-style I/O |
//! | [`decoder`] | Prefix beam search with shallow LM fusion and word bonus |
//! | [`net`] | Conv + bidirectional GRU acoustic model, training, checkpoints |
//! | [`augment`] | Rule-based text annotation for training-data augmentation |
//! | [`eval`] | Entity-level precision/recall/F-measure, WER/CER |
//!
//! Numeric code is generic over the scalar type (`f32` or `f64`) through the
//! [`Scalar`] trait; the aliases below pin the common instantiations.

pub mod alphabet;
pub mod augment;
pub mod corpus;
pub mod ctc;
pub mod decoder;
pub mod eval;
pub mod lm;
pub mod net;
pub mod scalar;

pub use scalar::Scalar;

/// Feature matrix in single precision, the on-disk representation.
pub type Features32 = corpus::FeatureSequence<f32>;
/// Feature matrix in double precision.
pub type Features64 = corpus::FeatureSequence<f64>;
/// Logit lattice in single precision, the training-time representation.
pub type Lattice32 = ctc::LogitLattice<f32>;
/// Logit lattice in double precision, used wherever tight tolerances apply.
pub type Lattice64 = ctc::LogitLattice<f64>;
/// Acoustic model in single precision, the CLI default.
pub type Net32 = net::Net<f32>;
/// Acoustic model in double precision.
pub type Net64 = net::Net<f64>;
