//! Versioned JSON checkpoints.
//!
//! Every float is stored as a normalized hexadecimal literal such as
//! `0x1.8p+1`, so a save/load round trip reproduces each bit. Parameters are
//! matched by name against a skeleton rebuilt from the stored configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoenc::{AEConfig, AEWeights};
use crate::error::{Error, Result};
use crate::flowdata::Normalizer;
use crate::heads::{HeadConfig, HeadKind, HeadWeights};
use crate::imagize::ImageSpec;
use crate::numerics::Tensor;
use crate::rng::Rng;
use crate::trainer::{AeClassifier, Model, ModelBundle, Pipeline, TrainConfig, VitClassifier};
use crate::vit::{EncoderWeights, ViTConfig};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "flowvit-checkpoint";

/// A trained bundle plus the training run that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub train: TrainConfig,
    /// Per-epoch mean training loss of the classifier.
    pub history: Vec<f64>,
    /// Per-epoch reconstruction loss, autoencoder pipeline only.
    pub ae_history: Vec<f64>,
}

/// Formats `x` as a normalized C99 hexadecimal float.
pub fn hex_float(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    let digits = format!("{mant:013x}");
    let digits = digits.trim_end_matches('0');
    if digits.is_empty() {
        format!("{sign}0x{lead}p{e:+}")
    } else {
        format!("{sign}0x{lead}.{digits}p{e:+}")
    }
}

/// Parses the output of [`hex_float`].
pub fn parse_hex_float(s: &str) -> Option<f64> {
    match s {
        "nan" => return Some(f64::NAN),
        "inf" => return Some(f64::INFINITY),
        "-inf" => return Some(f64::NEG_INFINITY),
        _ => {}
    }
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x")?;
    let (mantissa, exp) = rest.split_once('p')?;
    let exp: i64 = exp.parse().ok()?;
    let (lead, frac) = match mantissa.split_once('.') {
        Some((l, f)) if !f.is_empty() => (l, f),
        Some(_) => return None,
        None => (mantissa, ""),
    };
    if frac.len() > 13 || !frac.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    let mant = if frac.is_empty() {
        0
    } else {
        u64::from_str_radix(frac, 16).ok()? << (4 * (13 - frac.len()))
    };
    let bits = match lead {
        "1" if (-1022..=1023).contains(&exp) => (((exp + 1023) as u64) << 52) | mant,
        "0" if mant == 0 && exp == 0 => 0,
        "0" if exp == -1022 => mant,
        _ => return None,
    };
    let sign = if neg { 1u64 << 63 } else { 0 };
    Some(f64::from_bits(sign | bits))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
struct Hex(String);

impl Hex {
    fn of(x: f64) -> Self {
        Hex(hex_float(x))
    }

    fn get(&self, what: &str) -> Result<f64> {
        parse_hex_float(&self.0).ok_or_else(|| Error::Parse {
            offset: 0,
            message: format!("{what}: invalid hex float {:?}", self.0),
        })
    }
}

fn hexes(xs: &[f64]) -> Vec<Hex> {
    xs.iter().map(|&x| Hex::of(x)).collect()
}

fn unhex(xs: &[Hex], what: &str) -> Result<Vec<f64>> {
    xs.iter().map(|h| h.get(what)).collect()
}

#[derive(Deserialize)]
struct Header {
    format: String,
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct VitDto {
    embed_dim: usize,
    num_heads: usize,
    num_blocks: usize,
    mlp_hidden: usize,
    dropout_rate: Hex,
    use_positional: bool,
}

#[derive(Serialize, Deserialize)]
struct HeadDto {
    kind: String,
    hidden1: usize,
    hidden2: usize,
    num_classes: usize,
    dropout_rate: Hex,
}

#[derive(Serialize, Deserialize)]
struct TrainDto {
    epochs: usize,
    batch_size: usize,
    learning_rate: Hex,
    dropout_rate: Hex,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorDto {
    shape: Vec<usize>,
    data: Vec<Hex>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    format_version: u32,
    pipeline: Pipeline,
    class_names: Vec<String>,
    feature_names: Vec<String>,
    label_column: String,
    drop_columns: Vec<String>,
    normalizer_min: Vec<Hex>,
    normalizer_max: Vec<Hex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<ImageSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vit: Option<VitDto>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ae: Option<AEConfig>,
    head: HeadDto,
    train: TrainDto,
    history: Vec<Hex>,
    ae_history: Vec<Hex>,
    parameters: BTreeMap<String, TensorDto>,
}

fn head_dto(h: &HeadConfig) -> HeadDto {
    HeadDto {
        kind: h.kind.as_str().into(),
        hidden1: h.hidden1,
        hidden2: h.hidden2,
        num_classes: h.num_classes,
        dropout_rate: Hex::of(h.dropout_rate),
    }
}

fn to_document(ck: &Checkpoint) -> Document {
    let b = &ck.bundle;
    let mut parameters = BTreeMap::new();
    b.model.visit_all(&mut |p| {
        parameters.insert(
            p.name.clone(),
            TensorDto {
                shape: p.value.shape().to_vec(),
                data: hexes(p.value.data()),
            },
        );
    });
    let (image, vit, ae) = match &b.model {
        Model::Vit(m) => (
            Some(m.image),
            Some(VitDto {
                embed_dim: m.vit.embed_dim,
                num_heads: m.vit.num_heads,
                num_blocks: m.vit.num_blocks,
                mlp_hidden: m.vit.mlp_hidden,
                dropout_rate: Hex::of(m.vit.dropout_rate),
                use_positional: m.vit.use_positional,
            }),
            None,
        ),
        Model::Ae(m) => (None, None, Some(m.ae_cfg)),
    };
    Document {
        format: FORMAT_NAME.into(),
        format_version: FORMAT_VERSION,
        pipeline: b.model.pipeline(),
        class_names: b.class_names.clone(),
        feature_names: b.feature_names.clone(),
        label_column: b.label_column.clone(),
        drop_columns: b.drop_columns.clone(),
        normalizer_min: hexes(&b.normalizer.min),
        normalizer_max: hexes(&b.normalizer.max),
        image,
        vit,
        ae,
        head: head_dto(b.model.head_cfg()),
        train: TrainDto {
            epochs: ck.train.epochs,
            batch_size: ck.train.batch_size,
            learning_rate: Hex::of(ck.train.learning_rate),
            dropout_rate: Hex::of(ck.train.dropout_rate),
            seed: ck.train.seed,
        },
        history: hexes(&ck.history),
        ae_history: hexes(&ck.ae_history),
        parameters,
    }
}

fn invalid(message: impl Into<String>) -> Error {
    Error::Parse {
        offset: 0,
        message: message.into(),
    }
}

fn from_document(doc: Document) -> Result<Checkpoint> {
    let kind: HeadKind = doc.head.kind.parse().map_err(|e: Error| invalid(e.to_string()))?;
    let head_cfg = HeadConfig {
        kind,
        hidden1: doc.head.hidden1,
        hidden2: doc.head.hidden2,
        num_classes: doc.head.num_classes,
        dropout_rate: doc.head.dropout_rate.get("head.dropout_rate")?,
    };
    head_cfg.validate().map_err(|e| invalid(e.to_string()))?;
    if head_cfg.num_classes != doc.class_names.len() {
        return Err(invalid(format!(
            "head has {} outputs but {} class names are stored",
            head_cfg.num_classes,
            doc.class_names.len()
        )));
    }
    // The skeleton only fixes names and shapes; every value is overwritten below.
    let mut rng = Rng::new(0);
    let mut model = match doc.pipeline {
        Pipeline::Vit => {
            let image = doc.image.ok_or_else(|| invalid("vit checkpoint without image spec"))?;
            let v = doc.vit.as_ref().ok_or_else(|| invalid("vit checkpoint without vit config"))?;
            let vit = ViTConfig {
                embed_dim: v.embed_dim,
                num_heads: v.num_heads,
                num_blocks: v.num_blocks,
                mlp_hidden: v.mlp_hidden,
                dropout_rate: v.dropout_rate.get("vit.dropout_rate")?,
                use_positional: v.use_positional,
            };
            vit.validate().map_err(|e| invalid(e.to_string()))?;
            let check = ImageSpec::plan(image.d, image.rows, image.cols, image.patch_rows, image.patch_cols)
                .map_err(|e| invalid(e.to_string()))?;
            if check != image {
                return Err(invalid("stored image spec is inconsistent"));
            }
            Model::Vit(VitClassifier {
                image,
                vit,
                encoder: EncoderWeights::init(&vit, &image, &mut rng),
                head_cfg,
                head: HeadWeights::zeros(&head_cfg, vit.embed_dim),
            })
        }
        Pipeline::Ae => {
            let ae_cfg = doc.ae.ok_or_else(|| invalid("ae checkpoint without ae config"))?;
            ae_cfg.validate().map_err(|e| invalid(e.to_string()))?;
            let token_dim = if kind.is_recurrent() { 1 } else { ae_cfg.latent_dim };
            Model::Ae(AeClassifier {
                ae_cfg,
                ae: AEWeights::zeros(&ae_cfg),
                head_cfg,
                head: HeadWeights::zeros(&head_cfg, token_dim),
            })
        }
    };

    let mut params = doc.parameters;
    let mut err = None;
    model.visit_all_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        let Some(t) = params.remove(&p.name) else {
            err = Some(invalid(format!("missing parameter {}", p.name)));
            return;
        };
        if t.shape != p.value.shape() {
            err = Some(invalid(format!(
                "parameter {} has shape {:?}, expected {:?}",
                p.name,
                t.shape,
                p.value.shape()
            )));
            return;
        }
        match unhex(&t.data, &p.name).and_then(|d| Tensor::new(t.shape.clone(), d)) {
            Ok(v) => *p = crate::numerics::Parameter::new(p.name.clone(), v),
            Err(e) => err = Some(invalid(format!("parameter {}: {e}", p.name))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = params.keys().next() {
        return Err(invalid(format!("unexpected parameter {name}")));
    }

    let normalizer = Normalizer {
        min: unhex(&doc.normalizer_min, "normalizer_min")?,
        max: unhex(&doc.normalizer_max, "normalizer_max")?,
    };
    if normalizer.min.len() != normalizer.max.len() || normalizer.dim() != model.input_dim() {
        return Err(invalid(format!(
            "normalizer width {} does not match model input {}",
            normalizer.dim(),
            model.input_dim()
        )));
    }
    if doc.feature_names.len() != normalizer.dim() {
        return Err(invalid("feature name count does not match model input"));
    }
    let train = TrainConfig {
        epochs: doc.train.epochs,
        batch_size: doc.train.batch_size,
        learning_rate: doc.train.learning_rate.get("train.learning_rate")?,
        dropout_rate: doc.train.dropout_rate.get("train.dropout_rate")?,
        seed: doc.train.seed,
    };
    Ok(Checkpoint {
        bundle: ModelBundle {
            model,
            class_names: doc.class_names,
            normalizer,
            feature_names: doc.feature_names,
            label_column: doc.label_column,
            drop_columns: doc.drop_columns,
        },
        train,
        history: unhex(&doc.history, "history")?,
        ae_history: unhex(&doc.ae_history, "ae_history")?,
    })
}

/// Byte offset of a 1-based line/column position reported by the JSON parser.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn json_error(text: &str, e: serde_json::Error) -> Error {
    Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&to_document(self)).expect("checkpoint documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header = serde_json::from_str(text).map_err(|e| json_error(text, e))?;
        if header.format != FORMAT_NAME {
            return Err(invalid(format!("not a checkpoint (format {:?})", header.format)));
        }
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let doc: Document = serde_json::from_str(text).map_err(|e| json_error(text, e))?;
        from_document(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
