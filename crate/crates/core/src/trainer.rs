//! End-to-end training of the ViT pipeline and the autoencoder baseline.
//!
//! Every run draws from three child streams of `Rng::new(seed)`: weight
//! initialization, per-epoch shuffling and dropout masks. Mini-batches are
//! visited in shuffled order, the last partial batch included, and each batch
//! applies one Adam step to every trainable parameter.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autoenc::{self, AEConfig, AEWeights};
use crate::error::{Error, Result};
use crate::flowdata::{FlowDataset, Normalizer};
use crate::heads::{self, HeadConfig, HeadKind, HeadWeights};
use crate::imagize::ImageSpec;
use crate::metrics::{ClassReport, ConfusionMatrix};
use crate::numerics::ops::{cross_entropy_labels, softmax_cross_entropy_backward};
use crate::numerics::{AdamConfig, Parameter, Params, Tensor};
use crate::rng::Rng;
use crate::vit::{EncoderWeights, TokenBatch, ViTConfig};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_AE: u64 = 4;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            dropout_rate: 0.2,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be ≥ 1".into()));
        }
        self.adam().validate()?;
        crate::numerics::ops::check_dropout_rate(self.dropout_rate)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Vit,
    Ae,
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pipeline::Vit => "vit",
            Pipeline::Ae => "ae",
        })
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vit" => Ok(Pipeline::Vit),
            "ae" => Ok(Pipeline::Ae),
            other => Err(Error::Config(format!("unknown pipeline {other:?} (expected vit or ae)"))),
        }
    }
}

/// A differentiable features → class-probabilities model.
pub trait Classifier {
    type Cache;

    fn forward(&self, features: &Tensor, training: bool, rng: &mut Rng) -> Result<(Tensor, Self::Cache)>;

    /// Accumulates gradients from `dL/dlogits`.
    fn backward(&mut self, cache: &Self::Cache, g_logits: &Tensor) -> Result<()>;

    fn visit_trainable(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn num_classes(&self) -> usize;

    /// Inference-mode probabilities `[n×C]`, evaluated in fixed-size chunks.
    fn predict_proba(&self, features: &Tensor) -> Result<Tensor> {
        let n = features.rows();
        let mut out = Vec::with_capacity(n * self.num_classes());
        let mut rng = Rng::new(0);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (p, _) = self.forward(&features.select_rows(chunk), false, &mut rng)?;
            out.extend_from_slice(p.data());
        }
        Ok(Tensor::from_parts(vec![n, self.num_classes()], out))
    }

    fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let p = self.predict_proba(features)?;
        Ok((0..p.rows()).map(|i| heads::predict(p.row(i))).collect())
    }
}

/// Image → patches → ViT encoder → head.
#[derive(Debug, Clone, PartialEq)]
pub struct VitClassifier {
    pub image: ImageSpec,
    pub vit: ViTConfig,
    pub encoder: EncoderWeights,
    pub head_cfg: HeadConfig,
    pub head: HeadWeights,
}

impl VitClassifier {
    pub fn init(image: ImageSpec, vit: ViTConfig, head_cfg: HeadConfig, rng: &mut Rng) -> Result<Self> {
        vit.validate()?;
        head_cfg.validate()?;
        let encoder = EncoderWeights::init(&vit, &image, rng);
        let head = HeadWeights::init(&head_cfg, vit.embed_dim, rng);
        Ok(Self {
            image,
            vit,
            encoder,
            head_cfg,
            head,
        })
    }
}

pub struct VitCache {
    encode: crate::vit::EncodeCache,
    head: heads::HeadCache,
}

impl Classifier for VitClassifier {
    type Cache = VitCache;

    fn forward(&self, features: &Tensor, training: bool, rng: &mut Rng) -> Result<(Tensor, VitCache)> {
        let patches = self.image.patchify_batch(features)?;
        let (tokens, encode) = self.encoder.encode(&patches, &self.vit, training, rng)?;
        let (probs, head) = self.head.forward(&tokens, &self.head_cfg, training, rng)?;
        Ok((probs, VitCache { encode, head }))
    }

    fn backward(&mut self, cache: &VitCache, g_logits: &Tensor) -> Result<()> {
        let g_tokens = self.head.backward(&cache.head, g_logits)?;
        self.encoder.backward(&self.vit, &cache.encode, &g_tokens)?;
        Ok(())
    }

    fn visit_trainable(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }

    fn num_classes(&self) -> usize {
        self.head_cfg.num_classes
    }
}

/// How latent codes are presented to a head: the DNN sees one `latent`-wide
/// token, recurrent heads see `latent` steps of width 1.
pub fn latent_tokens(latent: Tensor, kind: HeadKind) -> Result<TokenBatch> {
    let (n, k) = latent.as_matrix("latent_tokens")?;
    if kind.is_recurrent() {
        TokenBatch::new(k, latent.reshape(&[n * k, 1])?)
    } else {
        TokenBatch::new(1, latent)
    }
}

fn latent_token_dim(cfg: &AEConfig, kind: HeadKind) -> usize {
    if kind.is_recurrent() {
        1
    } else {
        cfg.latent_dim
    }
}

/// Head trained on precomputed latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentHead {
    pub head_cfg: HeadConfig,
    pub head: HeadWeights,
}

impl Classifier for LatentHead {
    type Cache = heads::HeadCache;

    fn forward(&self, latent: &Tensor, training: bool, rng: &mut Rng) -> Result<(Tensor, heads::HeadCache)> {
        let tokens = latent_tokens(latent.clone(), self.head_cfg.kind)?;
        self.head.forward(&tokens, &self.head_cfg, training, rng)
    }

    fn backward(&mut self, cache: &heads::HeadCache, g_logits: &Tensor) -> Result<()> {
        self.head.backward(cache, g_logits)?;
        Ok(())
    }

    fn visit_trainable(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.head.visit_mut(f);
    }

    fn num_classes(&self) -> usize {
        self.head_cfg.num_classes
    }
}

/// Frozen autoencoder followed by a head on its latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct AeClassifier {
    pub ae_cfg: AEConfig,
    pub ae: AEWeights,
    pub head_cfg: HeadConfig,
    pub head: HeadWeights,
}

impl Classifier for AeClassifier {
    type Cache = heads::HeadCache;

    fn forward(&self, features: &Tensor, training: bool, rng: &mut Rng) -> Result<(Tensor, heads::HeadCache)> {
        let latent = self.ae.encode(features)?;
        let tokens = latent_tokens(latent, self.head_cfg.kind)?;
        self.head.forward(&tokens, &self.head_cfg, training, rng)
    }

    fn backward(&mut self, cache: &heads::HeadCache, g_logits: &Tensor) -> Result<()> {
        self.head.backward(cache, g_logits)?;
        Ok(())
    }

    fn visit_trainable(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.head.visit_mut(f);
    }

    fn num_classes(&self) -> usize {
        self.head_cfg.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Vit(VitClassifier),
    Ae(AeClassifier),
}

impl Model {
    pub fn pipeline(&self) -> Pipeline {
        match self {
            Model::Vit(_) => Pipeline::Vit,
            Model::Ae(_) => Pipeline::Ae,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Vit(m) => m.image.d,
            Model::Ae(m) => m.ae_cfg.input_dim,
        }
    }

    pub fn head_cfg(&self) -> &HeadConfig {
        match self {
            Model::Vit(m) => &m.head_cfg,
            Model::Ae(m) => &m.head_cfg,
        }
    }

    pub fn predict_proba(&self, features: &Tensor) -> Result<Tensor> {
        match self {
            Model::Vit(m) => m.predict_proba(features),
            Model::Ae(m) => m.predict_proba(features),
        }
    }

    /// Every parameter of the model, frozen autoencoder included.
    pub fn visit_all(&self, f: &mut dyn FnMut(&Parameter)) {
        match self {
            Model::Vit(m) => {
                m.encoder.visit(f);
                m.head.visit(f);
            }
            Model::Ae(m) => {
                m.ae.visit(f);
                m.head.visit(f);
            }
        }
    }

    pub fn visit_all_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match self {
            Model::Vit(m) => {
                m.encoder.visit_mut(f);
                m.head.visit_mut(f);
            }
            Model::Ae(m) => {
                m.ae.visit_mut(f);
                m.head.visit_mut(f);
            }
        }
    }
}

/// Everything inference needs: weights, geometry, classes and train-time scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: Model,
    pub class_names: Vec<String>,
    pub normalizer: Normalizer,
    pub feature_names: Vec<String>,
    pub label_column: String,
    pub drop_columns: Vec<String>,
}

impl ModelBundle {
    pub fn num_features(&self) -> usize {
        self.normalizer.dim()
    }

    /// Probabilities for raw (unscaled) feature rows.
    pub fn predict_proba_raw(&self, raw: &Tensor) -> Result<Tensor> {
        let x = self.normalizer.apply(raw)?;
        self.model.predict_proba(&x)
    }

    /// Scores a cleaned, unscaled dataset whose classes are a subset of the bundle's.
    pub fn evaluate_raw(&self, ds: &FlowDataset) -> Result<ClassReport> {
        if ds.num_features() != self.num_features() {
            return Err(Error::Schema(format!(
                "model expects d = {} features, dataset has d = {}",
                self.num_features(),
                ds.num_features()
            )));
        }
        let aligned = ds.align_classes(&self.class_names)?;
        let probs = self.predict_proba_raw(&aligned.features)?;
        let pred: Vec<usize> = (0..probs.rows()).map(|i| heads::predict(probs.row(i))).collect();
        let cm = ConfusionMatrix::new(&aligned.labels, &pred, &self.class_names)?;
        Ok(crate::metrics::report(&cm))
    }
}

/// Shuffled mini-batch epochs around `step`, which returns the mean loss of its batch.
fn run_epochs(
    n: usize,
    tc: &TrainConfig,
    root: &Rng,
    mut step: impl FnMut(&[usize], &mut Rng) -> Result<f64>,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::EmptyDataset("training set has no rows".into()));
    }
    let mut shuffle = root.split(STREAM_SHUFFLE);
    let mut drop_rng = root.split(STREAM_DROPOUT);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let loss = step(batch, &mut drop_rng).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} at epoch {}, batch {b}", epoch + 1)),
                e => e,
            })?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {}, batch {b}",
                    epoch + 1
                )));
            }
            total += loss * batch.len() as f64;
        }
        history.push(total / n as f64);
    }
    Ok(history)
}

fn adam_all<M: Classifier>(model: &mut M, adam: &AdamConfig) -> Result<()> {
    let mut err = None;
    model.visit_trainable(&mut |p| {
        if err.is_none() {
            if let Err(e) = p.adam_update(adam) {
                err = Some(e);
            }
        }
    });
    err.map_or(Ok(()), Err)
}

/// Trains `model` in place with categorical cross-entropy; returns per-epoch mean loss.
pub fn fit_classifier<M: Classifier>(model: &mut M, train: &FlowDataset, tc: &TrainConfig, root: &Rng) -> Result<Vec<f64>> {
    tc.validate()?;
    let adam = tc.adam();
    run_epochs(train.len(), tc, root, |batch, rng| {
        let x = train.features.select_rows(batch);
        let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
        model.visit_trainable(&mut |p| p.zero_grad());
        let (probs, cache) = model.forward(&x, true, rng)?;
        let loss = cross_entropy_labels(&probs, &labels);
        if !loss.is_finite() {
            return Ok(loss);
        }
        model.backward(&cache, &softmax_cross_entropy_backward(&probs, &labels))?;
        adam_all(model, &adam)?;
        Ok(loss)
    })
}

fn with_dropout(head: &HeadConfig, tc: &TrainConfig) -> HeadConfig {
    HeadConfig {
        dropout_rate: tc.dropout_rate,
        ..*head
    }
}

/// Joint encoder + head training on normalized features.
pub fn train_supervised(
    train: &FlowDataset,
    image: &ImageSpec,
    vit: &ViTConfig,
    head: &HeadConfig,
    tc: &TrainConfig,
) -> Result<(VitClassifier, Vec<f64>)> {
    if image.d != train.num_features() {
        return Err(Error::Geometry(format!(
            "image spec is planned for d = {}, dataset has d = {}",
            image.d,
            train.num_features()
        )));
    }
    let root = Rng::new(tc.seed);
    let mut model = VitClassifier::init(*image, *vit, with_dropout(head, tc), &mut root.split(STREAM_INIT))?;
    let history = fit_classifier(&mut model, train, tc, &root)?;
    Ok((model, history))
}

/// Unsupervised reconstruction training; returns per-epoch mean MSE.
pub fn train_autoencoder(train: &FlowDataset, cfg: &AEConfig, tc: &TrainConfig) -> Result<(AEWeights, Vec<f64>)> {
    tc.validate()?;
    cfg.validate()?;
    if cfg.input_dim != train.num_features() {
        return Err(Error::dim(format!(
            "autoencoder input {} vs dataset d = {}",
            cfg.input_dim,
            train.num_features()
        )));
    }
    let root = Rng::new(tc.seed).split(STREAM_AE);
    let mut ae = AEWeights::init(cfg, &mut root.split(STREAM_INIT));
    let adam = tc.adam();
    let history = run_epochs(train.len(), tc, &root, |batch, _| {
        let x = train.features.select_rows(batch);
        ae.zero_grad();
        let (_, recon, cache) = ae.forward(&x)?;
        let (loss, g) = autoenc::mse(&recon, &x);
        if !loss.is_finite() {
            return Ok(loss);
        }
        ae.backward(&cache, &g)?;
        let mut err = None;
        ae.visit_mut(&mut |p| {
            if err.is_none() {
                err = p.adam_update(&adam).err();
            }
        });
        err.map_or(Ok(loss), Err)
    })?;
    Ok((ae, history))
}

/// Reconstruction MSE of `ae` over a whole dataset.
pub fn reconstruction_mse(ae: &AEWeights, ds: &FlowDataset) -> Result<f64> {
    let (_, recon, _) = ae.forward(&ds.features)?;
    Ok(autoenc::mse(&recon, &ds.features).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeBaselineRun {
    pub model: AeClassifier,
    pub ae_history: Vec<f64>,
    pub head_history: Vec<f64>,
}

/// Autoencoder on the training features, then the head on their latent codes,
/// both with the same epochs, batch size, learning rate and seed.
pub fn train_ae_baseline(train: &FlowDataset, ae_cfg: &AEConfig, head: &HeadConfig, tc: &TrainConfig) -> Result<AeBaselineRun> {
    let (ae, ae_history) = train_autoencoder(train, ae_cfg, tc)?;
    let latent = autoenc::encode_dataset(train, &ae)?;
    let root = Rng::new(tc.seed);
    let head_cfg = with_dropout(head, tc);
    head_cfg.validate()?;
    let mut model = LatentHead {
        head_cfg,
        head: HeadWeights::init(&head_cfg, latent_token_dim(ae_cfg, head.kind), &mut root.split(STREAM_INIT)),
    };
    let head_history = fit_classifier(&mut model, &latent, tc, &root)?;
    Ok(AeBaselineRun {
        model: AeClassifier {
            ae_cfg: *ae_cfg,
            ae,
            head_cfg,
            head: model.head,
        },
        ae_history,
        head_history,
    })
}

pub fn evaluate<M: Classifier>(model: &M, ds: &FlowDataset) -> Result<ClassReport> {
    let pred = model.predict(&ds.features)?;
    let cm = ConfusionMatrix::new(&ds.labels, &pred, &ds.class_names)?;
    Ok(crate::metrics::report(&cm))
}
