//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! data.path = flows.csv
//! image.rows = 2
//! image.cols = 19
//! ```
//!
//! Every key is parsed and validated up front; unknown or repeated keys are
//! errors. Relative paths are resolved against the config file's directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flowvit::flowdata::DEFAULT_DROP_CLASSES;
use flowvit::{Error, HeadKind, Result, TrainConfig, ViTConfig};

pub const KEYS: &[&str] = &[
    "data.path",
    "data.test_path",
    "data.label_column",
    "data.drop_columns",
    "data.drop_classes",
    "data.test_fraction",
    "image.rows",
    "image.cols",
    "image.patch_rows",
    "image.patch_cols",
    "vit.embed_dim",
    "vit.heads",
    "vit.blocks",
    "vit.mlp_hidden",
    "vit.dropout",
    "vit.positional",
    "head.kind",
    "head.hidden1",
    "head.hidden2",
    "ae.hidden",
    "ae.latent",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.dropout",
    "train.seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub path: PathBuf,
    /// Separate test file; when absent the data is split stratified.
    pub test_path: Option<PathBuf>,
    pub label_column: String,
    pub drop_columns: Vec<String>,
    pub drop_classes: Vec<String>,
    pub test_fraction: f64,
}

/// Image geometry as configured; planned against `d` once the data is loaded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageConfig {
    pub rows: usize,
    pub cols: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub image: Option<ImageConfig>,
    pub vit: ViTConfig,
    pub head_kind: HeadKind,
    pub head_hidden1: usize,
    pub head_hidden2: usize,
    pub ae_hidden: usize,
    pub ae_latent: usize,
    pub train: TrainConfig,
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

struct Entries {
    map: HashMap<String, String>,
}

impl Entries {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key).map(|v| v.to_ascii_lowercase()) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "yes" | "1" | "on" => Ok(true),
                "false" | "no" | "0" | "off" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
            },
        }
    }

    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", i + 1)));
            }
            if map.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: key {key:?} given twice", i + 1)));
            }
        }
        let e = Entries { map };

        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let path = e
            .map
            .get("data.path")
            .ok_or_else(|| Error::Config("data.path is required".into()))?;
        let data = DataConfig {
            path: resolve(path),
            test_path: e.map.get("data.test_path").map(|p| resolve(p)),
            label_column: e.get("data.label_column", "label".to_string())?,
            drop_columns: e.map.get("data.drop_columns").map(|v| list(v)).unwrap_or_default(),
            drop_classes: e.map.get("data.drop_classes").map_or_else(
                || DEFAULT_DROP_CLASSES.iter().map(|s| s.to_string()).collect(),
                |v| list(v),
            ),
            test_fraction: e.get("data.test_fraction", 0.2)?,
        };
        if !(data.test_fraction > 0.0 && data.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.test_fraction must lie in (0, 1), got {}",
                data.test_fraction
            )));
        }

        let image_keys = ["image.rows", "image.cols", "image.patch_rows", "image.patch_cols"];
        let present = image_keys.iter().filter(|k| e.has(k)).count();
        let image = match present {
            0 => None,
            4 => Some(ImageConfig {
                rows: e.get("image.rows", 0)?,
                cols: e.get("image.cols", 0)?,
                patch_rows: e.get("image.patch_rows", 0)?,
                patch_cols: e.get("image.patch_cols", 0)?,
            }),
            _ => {
                return Err(Error::Config(
                    "image.rows, image.cols, image.patch_rows and image.patch_cols must be given together".into(),
                ))
            }
        };

        let dv = ViTConfig::default();
        let vit = ViTConfig {
            embed_dim: e.get("vit.embed_dim", dv.embed_dim)?,
            num_heads: e.get("vit.heads", dv.num_heads)?,
            num_blocks: e.get("vit.blocks", dv.num_blocks)?,
            mlp_hidden: e.get("vit.mlp_hidden", dv.mlp_hidden)?,
            dropout_rate: e.get("vit.dropout", dv.dropout_rate)?,
            use_positional: e.get_bool("vit.positional", dv.use_positional)?,
        };
        vit.validate()?;

        let dt = TrainConfig::default();
        let train = TrainConfig {
            epochs: e.get("train.epochs", dt.epochs)?,
            batch_size: e.get("train.batch_size", dt.batch_size)?,
            learning_rate: e.get("train.lr", dt.learning_rate)?,
            dropout_rate: e.get("train.dropout", dt.dropout_rate)?,
            seed: e.get("train.seed", dt.seed)?,
        };
        train.validate()?;

        let cfg = Self {
            data,
            image,
            vit,
            head_kind: e.get("head.kind", HeadKind::Dnn)?,
            head_hidden1: e.get("head.hidden1", 64)?,
            head_hidden2: e.get("head.hidden2", 32)?,
            ae_hidden: e.get("ae.hidden", 32)?,
            ae_latent: e.get("ae.latent", 8)?,
            train,
        };
        if cfg.head_hidden1 == 0 || cfg.head_hidden2 == 0 || cfg.ae_hidden == 0 || cfg.ae_latent == 0 {
            return Err(Error::Config("head and ae widths must be ≥ 1".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}
