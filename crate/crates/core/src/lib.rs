//! Classifier-supervised compressive autoencoders for labeled image patches.
//!
//! The pipeline trains a convolutional autoencoder on reconstruction error,
//! trains a binary patch classifier on the original images, then fine-tunes
//! the autoencoder through the frozen classifier so the latent code keeps the
//! features the classifier relies on. The trained autoencoder splits into
//! standalone encoder/decoder artifacts exchanging `.hcl` latent files.

pub mod autoencoder;
pub mod classifier;
pub mod codec;
pub mod datasets;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod patch;
pub mod tensor;
pub mod train;

pub use autoencoder::{build_autoencoder, decode, encode, train_autoencoder, AeTrainOptions, CompressionConfig, LatentCode};
pub use classifier::{build_classifier, predict, train_classifier, ClassifierSpec, ClfTrainOptions, FineTuneSchedule, Stage};
pub use datasets::{generate_synthetic_dataset, load_dataset, split, LabeledDataset, LabeledSample};
pub use ensemble::{build_ensemble, ensemble_loss, train_ensemble, Ensemble, EnsembleTrainOptions, LossWeights};
pub use error::{Error, LatentFormatError, Result};
pub use metrics::{evaluate_triplet, EvalReport};
pub use params::{ModelParameters, Scope};
pub use patch::{Geometry, ImagePatch};
pub use train::TrainingHistory;
