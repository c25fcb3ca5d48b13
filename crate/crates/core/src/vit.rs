//! Vision-transformer encoder over flow-image patches.
//!
//! Patches are linearly embedded, optionally offset by a learned positional
//! table, passed through `L` pre-norm blocks
//!
//! ```text
//! u   = x + Drop(MHA(LN₁(x)))
//! out = u + Drop(W₂·ReLU(W₁·LN₂(u)))
//! ```
//!
//! and closed with a final layer norm. The whole `patch_count × D` sequence is
//! returned; there is no class token.
//!
//! Batches are stored as a single `[(n·T)×D]` matrix with the `T` tokens of
//! each instance contiguous, so every linear map runs as one matrix product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagize::{ImageSpec, PatchSequence};
use crate::numerics::ops::{self, dropout, dropout_backward, LayerNormCache};
use crate::numerics::{LayerNorm, Linear, Parameter, Params, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_hidden: usize,
    pub dropout_rate: f64,
    pub use_positional: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 2,
            mlp_hidden: 128,
            dropout_rate: 0.0,
            use_positional: true,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "vit.heads ({}) must divide vit.embed_dim ({})",
                self.num_heads, self.embed_dim
            )));
        }
        if self.num_blocks == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("vit.blocks and vit.mlp_hidden must be ≥ 1".into()));
        }
        ops::check_dropout_rate(self.dropout_rate)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// One or more token sequences of equal length, stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub seq_len: usize,
    /// `[(n·seq_len)×dim]`
    pub tokens: Tensor,
}

impl TokenBatch {
    pub fn new(seq_len: usize, tokens: Tensor) -> Result<Self> {
        if seq_len == 0 || tokens.shape().len() != 2 || tokens.rows() % seq_len != 0 {
            return Err(Error::dim(format!(
                "token matrix {:?} is not a whole number of length-{seq_len} sequences",
                tokens.shape()
            )));
        }
        Ok(Self { seq_len, tokens })
    }

    pub fn batch_size(&self) -> usize {
        self.tokens.rows() / self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Tokens of instance `i` as a `[seq_len×dim]` tensor.
    pub fn sequence(&self, i: usize) -> Tensor {
        let d = self.dim();
        let span = self.seq_len * d;
        Tensor::from_parts(
            vec![self.seq_len, d],
            self.tokens.data()[i * span..(i + 1) * span].to_vec(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Softmax weights, laid out `[seq][head][query][key]`.
    pub weights: Vec<f64>,
    concat: Tensor,
}

impl Attention {
    pub fn init(name: &str, d: usize, rng: &mut Rng) -> Self {
        Self {
            query: Linear::glorot(&format!("{name}.query"), d, d, rng),
            key: Linear::glorot(&format!("{name}.key"), d, d, rng),
            value: Linear::glorot(&format!("{name}.value"), d, d, rng),
            output: Linear::glorot(&format!("{name}.output"), d, d, rng),
        }
    }

    fn zeros(name: &str, d: usize) -> Self {
        Self {
            query: Linear::zeros(&format!("{name}.query"), d, d),
            key: Linear::zeros(&format!("{name}.key"), d, d),
            value: Linear::zeros(&format!("{name}.value"), d, d),
            output: Linear::zeros(&format!("{name}.output"), d, d),
        }
    }

    /// Multi-head self-attention within each sequence of `x`.
    pub fn forward(&self, x: &TokenBatch, heads: usize) -> Result<(Tensor, AttentionCache)> {
        let d = x.dim();
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("{heads} heads do not divide width {d}")));
        }
        let q = self.query.forward(&x.tokens)?;
        let k = self.key.forward(&x.tokens)?;
        let v = self.value.forward(&x.tokens)?;
        let t = x.seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = x.batch_size();
        let mut weights = vec![0.0; n * heads * t * t];
        let mut concat = Tensor::zeros(&[n * t, d]);
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let cd = concat.data_mut();
        for s in 0..n {
            for h in 0..heads {
                let off = h * dh;
                let wbase = (s * heads + h) * t * t;
                for i in 0..t {
                    let qi = &qd[(s * t + i) * d + off..][..dh];
                    let row = &mut weights[wbase + i * t..wbase + (i + 1) * t];
                    for (j, w) in row.iter_mut().enumerate() {
                        let kj = &kd[(s * t + j) * d + off..][..dh];
                        *w = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    if row.iter().any(|w| !w.is_finite()) {
                        return Err(Error::Numeric("non-finite attention logits".into()));
                    }
                    ops::softmax_in_place(row);
                    let out = &mut cd[(s * t + i) * d + off..][..dh];
                    for (j, &w) in row.iter().enumerate() {
                        let vj = &vd[(s * t + j) * d + off..][..dh];
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += w * vv;
                        }
                    }
                }
            }
        }
        let out = self.output.forward(&concat)?;
        Ok((
            out,
            AttentionCache {
                q,
                k,
                v,
                weights,
                concat,
            },
        ))
    }

    pub fn backward(
        &mut self,
        x: &TokenBatch,
        heads: usize,
        cache: &AttentionCache,
        gy: &Tensor,
    ) -> Result<Tensor> {
        let d = x.dim();
        let t = x.seq_len;
        let n = x.batch_size();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let gc = self.output.backward(&cache.concat, gy)?;
        let mut gq = Tensor::zeros(&[n * t, d]);
        let mut gk = Tensor::zeros(&[n * t, d]);
        let mut gv = Tensor::zeros(&[n * t, d]);
        let (qd, kd, vd, gcd) = (cache.q.data(), cache.k.data(), cache.v.data(), gc.data());
        let mut ga = vec![0.0; t];
        for s in 0..n {
            for h in 0..heads {
                let off = h * dh;
                let wbase = (s * heads + h) * t * t;
                for i in 0..t {
                    let a = &cache.weights[wbase + i * t..wbase + (i + 1) * t];
                    let gci = &gcd[(s * t + i) * d + off..][..dh];
                    for j in 0..t {
                        let vj = &vd[(s * t + j) * d + off..][..dh];
                        ga[j] = gci.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let gvj = &mut gv.data_mut()[(s * t + j) * d + off..][..dh];
                        for (g, c) in gvj.iter_mut().zip(gci) {
                            *g += a[j] * c;
                        }
                    }
                    let dot: f64 = a.iter().zip(&ga).map(|(x, y)| x * y).sum();
                    let qi = &qd[(s * t + i) * d + off..][..dh];
                    for j in 0..t {
                        let gs = a[j] * (ga[j] - dot) * scale;
                        if gs == 0.0 {
                            continue;
                        }
                        let kj = &kd[(s * t + j) * d + off..][..dh];
                        let gqi = &mut gq.data_mut()[(s * t + i) * d + off..][..dh];
                        for (g, kk) in gqi.iter_mut().zip(kj) {
                            *g += gs * kk;
                        }
                        let gkj = &mut gk.data_mut()[(s * t + j) * d + off..][..dh];
                        for (g, qq) in gkj.iter_mut().zip(qi) {
                            *g += gs * qq;
                        }
                    }
                }
            }
        }
        let mut gx = self.query.backward(&x.tokens, &gq)?;
        gx.add_assign(&self.key.backward(&x.tokens, &gk)?)?;
        gx.add_assign(&self.value.backward(&x.tokens, &gv)?)?;
        Ok(gx)
    }
}

impl Params for Attention {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.output.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attention: Attention,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1_out: TokenBatch,
    ln1: LayerNormCache,
    pub attention: AttentionCache,
    drop1: Option<Vec<f64>>,
    ln2_out: Tensor,
    ln2: LayerNormCache,
    hidden: Tensor,
    drop2: Option<Vec<f64>>,
}

impl EncoderBlock {
    pub fn init(name: &str, cfg: &ViTConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            attention: Attention::init(&format!("{name}.attention"), d, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            mlp_in: Linear::glorot(&format!("{name}.mlp_in"), d, cfg.mlp_hidden, rng),
            mlp_out: Linear::glorot(&format!("{name}.mlp_out"), cfg.mlp_hidden, d, rng),
        }
    }

    /// A block whose attention and MLP branches are identically zero.
    pub fn zeros(name: &str, cfg: &ViTConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            attention: Attention::zeros(&format!("{name}.attention"), d),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            mlp_in: Linear::zeros(&format!("{name}.mlp_in"), d, cfg.mlp_hidden),
            mlp_out: Linear::zeros(&format!("{name}.mlp_out"), cfg.mlp_hidden, d),
        }
    }

    pub fn forward(
        &self,
        x: &TokenBatch,
        cfg: &ViTConfig,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(TokenBatch, BlockCache)> {
        let (n1, ln1) = self.ln1.forward(&x.tokens)?;
        let ln1_out = TokenBatch {
            seq_len: x.seq_len,
            tokens: n1,
        };
        let (att, attention) = self.attention.forward(&ln1_out, cfg.num_heads)?;
        let (att, drop1) = dropout(&att, cfg.dropout_rate, training, rng)?;
        let u = x.tokens.add(&att)?;

        let (ln2_out, ln2) = self.ln2.forward(&u)?;
        let mut hidden = self.mlp_in.forward(&ln2_out)?;
        ops::relu_in_place(&mut hidden);
        let m = self.mlp_out.forward(&hidden)?;
        let (m, drop2) = dropout(&m, cfg.dropout_rate, training, rng)?;
        let out = u.add(&m)?;
        Ok((
            TokenBatch {
                seq_len: x.seq_len,
                tokens: out,
            },
            BlockCache {
                ln1_out,
                ln1,
                attention,
                drop1,
                ln2_out,
                ln2,
                hidden,
                drop2,
            },
        ))
    }

    pub fn backward(&mut self, cfg: &ViTConfig, cache: &BlockCache, gy: &Tensor) -> Result<Tensor> {
        let mut gm = gy.clone();
        dropout_backward(cache.drop2.as_deref(), &mut gm);
        let mut gh = self.mlp_out.backward(&cache.hidden, &gm)?;
        ops::relu_backward_in_place(&cache.hidden, &mut gh);
        let gln2 = self.mlp_in.backward(&cache.ln2_out, &gh)?;
        let mut gu = gy.clone();
        gu.add_assign(&self.ln2.backward(&cache.ln2, &gln2))?;

        let mut ga = gu.clone();
        dropout_backward(cache.drop1.as_deref(), &mut ga);
        let gln1 = self
            .attention
            .backward(&cache.ln1_out, cfg.num_heads, &cache.attention, &ga)?;
        let mut gx = gu;
        gx.add_assign(&self.ln1.backward(&cache.ln1, &gln1))?;
        Ok(gx)
    }
}

impl Params for EncoderBlock {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.ln1.visit(f);
        self.attention.visit(f);
        self.ln2.visit(f);
        self.mlp_in.visit(f);
        self.mlp_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.ln1.visit_mut(f);
        self.attention.visit_mut(f);
        self.ln2.visit_mut(f);
        self.mlp_in.visit_mut(f);
        self.mlp_out.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub patch_embed: Linear,
    /// `[patch_count×D]`
    pub positional: Parameter,
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    patches: Tensor,
    pub blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
}

impl EncoderWeights {
    /// Glorot-uniform projections, zero biases, positional table from N(0, 0.02²).
    pub fn init(cfg: &ViTConfig, spec: &ImageSpec, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let patch_embed = Linear::glorot("encoder.patch_embed", spec.patch_len(), d, rng);
        let mut positional = Parameter::zeros("encoder.positional", &[spec.patch_count(), d]);
        for p in positional.value.data_mut() {
            *p = 0.02 * rng.normal();
        }
        let blocks = (0..cfg.num_blocks)
            .map(|i| EncoderBlock::init(&format!("encoder.blocks.{i}"), cfg, rng))
            .collect();
        Self {
            patch_embed,
            positional,
            blocks,
            final_ln: LayerNorm::new("encoder.final_ln", d),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.positional.value.rows()
    }

    fn check(&self, cfg: &ViTConfig, patches: &Tensor) -> Result<()> {
        if patches.cols() != self.patch_embed.fan_in() || patches.rows() % self.seq_len() != 0 {
            return Err(Error::dim(format!(
                "patch matrix {:?} does not fit an encoder for {} patches of length {}",
                patches.shape(),
                self.seq_len(),
                self.patch_embed.fan_in()
            )));
        }
        if self.patch_embed.fan_out() != cfg.embed_dim || self.blocks.len() != cfg.num_blocks {
            return Err(Error::dim("encoder weights do not match the ViT config"));
        }
        Ok(())
    }

    /// `token_i = patch_i·W + b (+ positional_i)`.
    pub fn embed_patches(&self, patches: &Tensor, cfg: &ViTConfig) -> Result<TokenBatch> {
        self.check(cfg, patches)?;
        let mut tokens = self.patch_embed.forward(patches)?;
        if cfg.use_positional {
            let pos = self.positional.value.data();
            for seq in tokens.data_mut().chunks_exact_mut(pos.len()) {
                for (t, p) in seq.iter_mut().zip(pos) {
                    *t += p;
                }
            }
        }
        TokenBatch::new(self.seq_len(), tokens)
    }

    /// Embedding, all blocks, final layer norm.
    pub fn encode(
        &self,
        patches: &Tensor,
        cfg: &ViTConfig,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(TokenBatch, EncodeCache)> {
        let mut x = self.embed_patches(patches, cfg)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, cfg, training, rng)?;
            caches.push(c);
            x = y;
        }
        let (out, final_ln) = self.final_ln.forward(&x.tokens)?;
        Ok((
            TokenBatch {
                seq_len: x.seq_len,
                tokens: out,
            },
            EncodeCache {
                patches: patches.clone(),
                blocks: caches,
                final_ln,
            },
        ))
    }

    pub fn encode_sequence(
        &self,
        ps: &PatchSequence,
        cfg: &ViTConfig,
        training: bool,
        rng: &mut Rng,
    ) -> Result<TokenBatch> {
        Ok(self.encode(&ps.patches, cfg, training, rng)?.0)
    }

    /// Accumulates all encoder gradients; returns `dL/dpatches`.
    pub fn backward(&mut self, cfg: &ViTConfig, cache: &EncodeCache, gy: &Tensor) -> Result<Tensor> {
        let mut g = self.final_ln.backward(&cache.final_ln, gy);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(cfg, bc, &g)?;
        }
        if cfg.use_positional {
            let span = self.positional.value.len();
            let mut gp = vec![0.0; span];
            for seq in g.data().chunks_exact(span) {
                for (a, b) in gp.iter_mut().zip(seq) {
                    *a += b;
                }
            }
            self.positional.accumulate(&gp);
        }
        self.patch_embed.backward(&cache.patches, &g)
    }
}

impl Params for EncoderWeights {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.patch_embed.visit(f);
        f(&self.positional);
        for b in &self.blocks {
            b.visit(f);
        }
        self.final_ln.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.patch_embed.visit_mut(f);
        f(&mut self.positional);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.final_ln.visit_mut(f);
    }
}
