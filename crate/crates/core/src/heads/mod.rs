//! Classifier heads stacked on a token sequence.
//!
//! All three share the same tail: `dropout → dense(hidden2) + ReLU → dropout
//! → dense(C) → softmax`. They differ in how the sequence is summarized:
//!
//! * `dnn`: mean over tokens, then `dense(hidden1) + ReLU`
//! * `lstm`: final hidden state of a left-to-right LSTM with `hidden1` units
//! * `blstm`: final states of a forward and a backward LSTM, concatenated

pub mod lstm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{self, dropout, dropout_backward};
use crate::numerics::{Linear, Parameter, Params, Tensor};
use crate::rng::Rng;
use crate::vit::TokenBatch;

pub use lstm::{Lstm, LstmCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Dnn,
    Lstm,
    Blstm,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Dnn, HeadKind::Lstm, HeadKind::Blstm];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Dnn => "dnn",
            HeadKind::Lstm => "lstm",
            HeadKind::Blstm => "blstm",
        }
    }

    pub fn is_recurrent(self) -> bool {
        !matches!(self, HeadKind::Dnn)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dnn" => Ok(HeadKind::Dnn),
            "lstm" => Ok(HeadKind::Lstm),
            "blstm" => Ok(HeadKind::Blstm),
            other => Err(Error::Config(format!(
                "unknown head kind {other:?} (expected dnn, lstm or blstm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub hidden1: usize,
    pub hidden2: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl HeadConfig {
    pub fn new(kind: HeadKind, num_classes: usize) -> Self {
        Self {
            kind,
            hidden1: 64,
            hidden2: 32,
            num_classes,
            dropout_rate: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "a classifier needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(Error::Config("head hidden sizes must be ≥ 1".into()));
        }
        ops::check_dropout_rate(self.dropout_rate)
    }

    fn summary_width(&self) -> usize {
        match self.kind {
            HeadKind::Blstm => 2 * self.hidden1,
            _ => self.hidden1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadBody {
    Dnn(Linear),
    Lstm(Lstm),
    Blstm { forward: Lstm, backward: Lstm },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub body: HeadBody,
    pub dense: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
enum BodyCache {
    Dnn { pooled: Tensor, hidden: Tensor },
    Lstm(LstmCache),
    Blstm(LstmCache, LstmCache),
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    seq_len: usize,
    body: BodyCache,
    drop_summary: Option<Vec<f64>>,
    summary: Tensor,
    hidden2: Tensor,
    drop_hidden2: Option<Vec<f64>>,
    hidden2_dropped: Tensor,
}

impl HeadWeights {
    pub fn init(cfg: &HeadConfig, token_dim: usize, rng: &mut Rng) -> Self {
        let body = match cfg.kind {
            HeadKind::Dnn => HeadBody::Dnn(Linear::glorot("head.dense1", token_dim, cfg.hidden1, rng)),
            HeadKind::Lstm => HeadBody::Lstm(Lstm::init("head.lstm", token_dim, cfg.hidden1, rng)),
            HeadKind::Blstm => HeadBody::Blstm {
                forward: Lstm::init("head.lstm_fwd", token_dim, cfg.hidden1, rng),
                backward: Lstm::init("head.lstm_bwd", token_dim, cfg.hidden1, rng),
            },
        };
        Self {
            body,
            dense: Linear::glorot("head.dense2", cfg.summary_width(), cfg.hidden2, rng),
            output: Linear::glorot("head.output", cfg.hidden2, cfg.num_classes, rng),
        }
    }

    /// Same layout as `init` with every weight and bias zero.
    pub fn zeros(cfg: &HeadConfig, token_dim: usize) -> Self {
        let body = match cfg.kind {
            HeadKind::Dnn => HeadBody::Dnn(Linear::zeros("head.dense1", token_dim, cfg.hidden1)),
            HeadKind::Lstm => HeadBody::Lstm(Lstm::zeros("head.lstm", token_dim, cfg.hidden1)),
            HeadKind::Blstm => HeadBody::Blstm {
                forward: Lstm::zeros("head.lstm_fwd", token_dim, cfg.hidden1),
                backward: Lstm::zeros("head.lstm_bwd", token_dim, cfg.hidden1),
            },
        };
        Self {
            body,
            dense: Linear::zeros("head.dense2", cfg.summary_width(), cfg.hidden2),
            output: Linear::zeros("head.output", cfg.hidden2, cfg.num_classes),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self.body {
            HeadBody::Dnn(_) => HeadKind::Dnn,
            HeadBody::Lstm(_) => HeadKind::Lstm,
            HeadBody::Blstm { .. } => HeadKind::Blstm,
        }
    }

    pub fn token_dim(&self) -> usize {
        match &self.body {
            HeadBody::Dnn(l) => l.fan_in(),
            HeadBody::Lstm(l) => l.input.fan_in(),
            HeadBody::Blstm { forward, .. } => forward.input.fan_in(),
        }
    }

    /// Class probabilities `[n×C]` for each sequence in `x`.
    pub fn forward(
        &self,
        x: &TokenBatch,
        cfg: &HeadConfig,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Tensor, HeadCache)> {
        if x.dim() != self.token_dim() {
            return Err(Error::dim(format!(
                "{} head expects {}-wide tokens, got {}",
                self.kind(),
                self.token_dim(),
                x.dim()
            )));
        }
        let (summary, body) = match &self.body {
            HeadBody::Dnn(dense1) => {
                let pooled = mean_pool(x);
                let mut hidden = dense1.forward(&pooled)?;
                ops::relu_in_place(&mut hidden);
                (hidden.clone(), BodyCache::Dnn { pooled, hidden })
            }
            HeadBody::Lstm(lstm) => {
                let (h, c) = lstm.forward(x, false)?;
                (h, BodyCache::Lstm(c))
            }
            HeadBody::Blstm { forward, backward } => {
                let (hf, cf) = forward.forward(x, false)?;
                let (hb, cb) = backward.forward(x, true)?;
                (concat_cols(&hf, &hb), BodyCache::Blstm(cf, cb))
            }
        };
        let (dropped, drop_summary) = dropout(&summary, cfg.dropout_rate, training, rng)?;
        let mut hidden2 = self.dense.forward(&dropped)?;
        ops::relu_in_place(&mut hidden2);
        let (hidden2_dropped, drop_hidden2) = dropout(&hidden2, cfg.dropout_rate, training, rng)?;
        let logits = self.output.forward(&hidden2_dropped)?;
        let probs = ops::softmax_rows(&logits);
        Ok((
            probs,
            HeadCache {
                seq_len: x.seq_len,
                body,
                drop_summary,
                summary: dropped,
                hidden2,
                drop_hidden2,
                hidden2_dropped,
            },
        ))
    }

    /// Backward pass from `dL/dlogits`; returns `dL/dtokens`.
    pub fn backward(&mut self, cache: &HeadCache, g_logits: &Tensor) -> Result<Tensor> {
        let mut g = self.output.backward(&cache.hidden2_dropped, g_logits)?;
        dropout_backward(cache.drop_hidden2.as_deref(), &mut g);
        ops::relu_backward_in_place(&cache.hidden2, &mut g);
        let mut g = self.dense.backward(&cache.summary, &g)?;
        dropout_backward(cache.drop_summary.as_deref(), &mut g);
        match (&mut self.body, &cache.body) {
            (HeadBody::Dnn(dense1), BodyCache::Dnn { pooled, hidden }) => {
                ops::relu_backward_in_place(hidden, &mut g);
                let gp = dense1.backward(pooled, &g)?;
                Ok(mean_pool_backward(&gp, cache.seq_len))
            }
            (HeadBody::Lstm(lstm), BodyCache::Lstm(c)) => lstm.backward(c, &g),
            (HeadBody::Blstm { forward, backward }, BodyCache::Blstm(cf, cb)) => {
                let h = forward.hidden();
                let (gf, gb) = split_cols(&g, h);
                let mut gx = forward.backward(cf, &gf)?;
                gx.add_assign(&backward.backward(cb, &gb)?)?;
                Ok(gx)
            }
            _ => Err(Error::dim("head cache does not match head kind")),
        }
    }
}

impl Params for HeadWeights {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        match &self.body {
            HeadBody::Dnn(l) => l.visit(f),
            HeadBody::Lstm(l) => l.visit(f),
            HeadBody::Blstm { forward, backward } => {
                forward.visit(f);
                backward.visit(f);
            }
        }
        self.dense.visit(f);
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match &mut self.body {
            HeadBody::Dnn(l) => l.visit_mut(f),
            HeadBody::Lstm(l) => l.visit_mut(f),
            HeadBody::Blstm { forward, backward } => {
                forward.visit_mut(f);
                backward.visit_mut(f);
            }
        }
        self.dense.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// Argmax; the lowest index wins ties.
pub fn predict(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn mean_pool(x: &TokenBatch) -> Tensor {
    let n = x.batch_size();
    let d = x.dim();
    let inv = 1.0 / x.seq_len as f64;
    let mut out = Tensor::zeros(&[n, d]);
    for b in 0..n {
        let dst = out.row_mut(b);
        for t in 0..x.seq_len {
            for (o, v) in dst.iter_mut().zip(x.tokens.row(b * x.seq_len + t)) {
                *o += v * inv;
            }
        }
    }
    out
}

fn mean_pool_backward(g: &Tensor, seq_len: usize) -> Tensor {
    let n = g.rows();
    let d = g.cols();
    let inv = 1.0 / seq_len as f64;
    let mut out = Tensor::zeros(&[n * seq_len, d]);
    for b in 0..n {
        for t in 0..seq_len {
            for (o, v) in out.row_mut(b * seq_len + t).iter_mut().zip(g.row(b)) {
                *o = v * inv;
            }
        }
    }
    out
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.rows();
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(a.row(i));
        out.extend_from_slice(b.row(i));
    }
    Tensor::from_parts(vec![n, a.cols() + b.cols()], out)
}

fn split_cols(g: &Tensor, left: usize) -> (Tensor, Tensor) {
    let n = g.rows();
    let right = g.cols() - left;
    let mut a = Vec::with_capacity(n * left);
    let mut b = Vec::with_capacity(n * right);
    for i in 0..n {
        let (l, r) = g.row(i).split_at(left);
        a.extend_from_slice(l);
        b.extend_from_slice(r);
    }
    (
        Tensor::from_parts(vec![n, left], a),
        Tensor::from_parts(vec![n, right], b),
    )
}
