//! Flow classification with a vision-transformer encoder.
//!
//! NetFlow records are min-max scaled, reshaped into single-channel images,
//! cut into patches and encoded by a small ViT. A DNN, LSTM or BLSTM head turns
//! the encoded patch sequence into class probabilities. A classical
//! autoencoder pipeline is provided as a baseline.

pub mod autoenc;
pub mod checkpoint;
pub mod error;
pub mod flowdata;
pub mod heads;
pub mod imagize;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod trainer;
pub mod vit;

pub use autoenc::{AEConfig, AEWeights};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use flowdata::{FlowDataset, Normalizer, RawTable, SplitPair, SynthSpec};
pub use heads::{HeadConfig, HeadKind, HeadWeights};
pub use imagize::{FlowImage, ImageSpec, PatchSequence};
pub use metrics::{ClassMetrics, ClassReport, ConfusionMatrix};
pub use numerics::{AdamConfig, Parameter, Params, Tensor};
pub use rng::Rng;
pub use trainer::{AeClassifier, Classifier, Model, ModelBundle, Pipeline, TrainConfig, VitClassifier};
pub use vit::{EncoderWeights, TokenBatch, ViTConfig};
