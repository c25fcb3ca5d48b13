//! Classical autoencoder baseline: `d → hidden → latent → hidden → d`, ReLU on
//! the hidden layers, linear latent and output, mean-squared reconstruction loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowdata::FlowDataset;
use crate::numerics::ops;
use crate::numerics::{Linear, Parameter, Params, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AEConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
}

impl AEConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: 32,
            latent_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("ae.hidden and ae.latent must be ≥ 1".into()));
        }
        if self.latent_dim >= self.input_dim {
            return Err(Error::Config(format!(
                "latent dimension {} must be below the input dimension {}",
                self.latent_dim, self.input_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AEWeights {
    pub enc_hidden: Linear,
    pub enc_latent: Linear,
    pub dec_hidden: Linear,
    pub dec_output: Linear,
}

#[derive(Debug, Clone)]
pub struct AECache {
    input: Tensor,
    enc_h: Tensor,
    latent: Tensor,
    dec_h: Tensor,
}

impl AEWeights {
    pub fn init(cfg: &AEConfig, rng: &mut Rng) -> Self {
        Self {
            enc_hidden: Linear::glorot("ae.enc_hidden", cfg.input_dim, cfg.hidden, rng),
            enc_latent: Linear::glorot("ae.enc_latent", cfg.hidden, cfg.latent_dim, rng),
            dec_hidden: Linear::glorot("ae.dec_hidden", cfg.latent_dim, cfg.hidden, rng),
            dec_output: Linear::glorot("ae.dec_output", cfg.hidden, cfg.input_dim, rng),
        }
    }

    pub fn zeros(cfg: &AEConfig) -> Self {
        Self {
            enc_hidden: Linear::zeros("ae.enc_hidden", cfg.input_dim, cfg.hidden),
            enc_latent: Linear::zeros("ae.enc_latent", cfg.hidden, cfg.latent_dim),
            dec_hidden: Linear::zeros("ae.dec_hidden", cfg.latent_dim, cfg.hidden),
            dec_output: Linear::zeros("ae.dec_output", cfg.hidden, cfg.input_dim),
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = self.enc_hidden.forward(x)?;
        ops::relu_in_place(&mut h);
        self.enc_latent.forward(&h)
    }

    /// Returns `(latent [n×latent], reconstruction [n×d])`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor, AECache)> {
        self.check(x)?;
        let mut enc_h = self.enc_hidden.forward(x)?;
        ops::relu_in_place(&mut enc_h);
        let latent = self.enc_latent.forward(&enc_h)?;
        let mut dec_h = self.dec_hidden.forward(&latent)?;
        ops::relu_in_place(&mut dec_h);
        let recon = self.dec_output.forward(&dec_h)?;
        Ok((
            latent.clone(),
            recon,
            AECache {
                input: x.clone(),
                enc_h,
                latent,
                dec_h,
            },
        ))
    }

    /// Backward from `dL/dreconstruction`; returns `dL/dx`.
    pub fn backward(&mut self, cache: &AECache, g_recon: &Tensor) -> Result<Tensor> {
        let mut g = self.dec_output.backward(&cache.dec_h, g_recon)?;
        ops::relu_backward_in_place(&cache.dec_h, &mut g);
        let g = self.dec_hidden.backward(&cache.latent, &g)?;
        let mut g = self.enc_latent.backward(&cache.enc_h, &g)?;
        ops::relu_backward_in_place(&cache.enc_h, &mut g);
        self.enc_hidden.backward(&cache.input, &g)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.enc_hidden.fan_in() {
            return Err(Error::dim(format!(
                "autoencoder expects [n×{}] input, got {:?}",
                self.enc_hidden.fan_in(),
                x.shape()
            )));
        }
        Ok(())
    }
}

impl Params for AEWeights {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.enc_hidden.visit(f);
        self.enc_latent.visit(f);
        self.dec_hidden.visit(f);
        self.dec_output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.enc_hidden.visit_mut(f);
        self.enc_latent.visit_mut(f);
        self.dec_hidden.visit_mut(f);
        self.dec_output.visit_mut(f);
    }
}

/// Mean over all entries of `(recon − x)²`, and its gradient with respect to `recon`.
pub fn mse(recon: &Tensor, x: &Tensor) -> (f64, Tensor) {
    let n = x.len() as f64;
    let diff = recon.zip_map(x, |a, b| a - b).expect("shapes checked by forward");
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff.scale(2.0 / n))
}

/// Replaces every feature row by its latent code; labels and class names are kept.
pub fn encode_dataset(ds: &FlowDataset, w: &AEWeights) -> Result<FlowDataset> {
    let latent_dim = w.enc_latent.fan_out();
    let features = if ds.is_empty() {
        Tensor::zeros(&[0, latent_dim])
    } else {
        w.encode(&ds.features)?
    };
    Ok(FlowDataset {
        features,
        labels: ds.labels.clone(),
        class_names: ds.class_names.clone(),
        normalizer: None,
    })
}
