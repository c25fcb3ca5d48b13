//! Subcommand implementations behind the `flowvit` binary.

pub mod config;

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use flowvit::autoenc::AEConfig;
use flowvit::checkpoint::Checkpoint;
use flowvit::flowdata::{self, FlowDataset, SynthSpec};
use flowvit::heads::{self, HeadConfig, HeadKind};
use flowvit::imagize::ImageSpec;
use flowvit::trainer::{self, Model, ModelBundle, Pipeline};
use flowvit::{ClassReport, Error, Result, Tensor};

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_GEOMETRY: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_SCHEMA: i32 = 5;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Geometry(_) => EXIT_GEOMETRY,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Schema(_) => EXIT_SCHEMA,
        _ => EXIT_IO,
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| io_err(path, e))
}

/// Parses `0.995:0.005` style class shares.
pub fn parse_shares(s: &str) -> Result<Vec<f64>> {
    s.split(':')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad share {p:?} in {s:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthArgs {
    pub classes: usize,
    pub features: usize,
    pub rows: usize,
    pub imbalance: Option<Vec<f64>>,
    pub margin: f64,
    pub seed: u64,
    pub label_column: String,
    pub out: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        class_names: flowdata::default_class_names(args.classes),
        features: args.features,
        rows: args.rows,
        shares: args.imbalance.clone().unwrap_or_default(),
        margin: args.margin,
        seed: args.seed,
    };
    let ds = flowdata::synth_generate(&spec)?;
    let file = create(&args.out)?;
    ds.write_csv(
        std::io::BufWriter::new(file),
        &flowdata::synth_feature_names(args.features),
        &args.label_column,
    )
}

/// Loads a CSV and applies the column and class drops.
fn load_clean(path: &Path, label_column: &str, drop_columns: &[String], drop_classes: &[String]) -> Result<(FlowDataset, Vec<String>)> {
    let raw = flowdata::load_csv(path, label_column)?;
    let names = flowdata::feature_columns(&raw, drop_columns);
    let ds = flowdata::clean(&raw, drop_columns)?.drop_classes(drop_classes);
    if ds.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no rows left after dropping classes", path.display())));
    }
    Ok((ds, names))
}

fn write_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn write_report(path: &Path, report: &ClassReport) -> Result<()> {
    fs::write(path, report.to_csv()).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub pipeline: Pipeline,
    /// Overrides `head.kind` from the config.
    pub head: Option<HeadKind>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    pub report: ClassReport,
}

/// clean → normalize → split → train → checkpoint, loss history and test report.
pub fn cmd_train(args: &TrainArgs, log: &mut dyn Write) -> Result<TrainOutcome> {
    let cfg = RunConfig::load(&args.config)?;
    let kind = args.head.unwrap_or(cfg.head_kind);
    let d_cfg = &cfg.data;
    let (ds, feature_names) = load_clean(&d_cfg.path, &d_cfg.label_column, &d_cfg.drop_columns, &d_cfg.drop_classes)?;
    let d = ds.num_features();

    let image = match (args.pipeline, cfg.image) {
        (Pipeline::Vit, Some(ic)) => Some(ImageSpec::plan(d, ic.rows, ic.cols, ic.patch_rows, ic.patch_cols)?),
        (Pipeline::Vit, None) => {
            return Err(Error::Geometry("the vit pipeline needs image.rows, image.cols, image.patch_rows and image.patch_cols".into()))
        }
        (Pipeline::Ae, _) => None,
    };

    let (train_raw, test_raw) = match &d_cfg.test_path {
        Some(p) => {
            let (test, _) = load_clean(p, &d_cfg.label_column, &d_cfg.drop_columns, &d_cfg.drop_classes)?;
            if test.num_features() != d {
                return Err(Error::Schema(format!("expected d = {d} features in {}, found d = {}", p.display(), test.num_features())));
            }
            let test = test.align_classes(&ds.class_names)?;
            (ds, test)
        }
        None => {
            let split = flowdata::stratified_split(&ds, d_cfg.test_fraction, cfg.train.seed)?;
            (split.train, split.test)
        }
    };
    let (train, rest, normalizer) = flowdata::normalize(&train_raw, &[&test_raw])?;
    let test = &rest[0];

    let head = HeadConfig {
        hidden1: cfg.head_hidden1,
        hidden2: cfg.head_hidden2,
        ..HeadConfig::new(kind, train.num_classes())
    };
    let (model, history, ae_history) = match image {
        Some(image) => {
            let (m, h) = trainer::train_supervised(&train, &image, &cfg.vit, &head, &cfg.train)?;
            let _ = writeln!(log, "image {}x{} patch {}x{} -> {} patches", image.rows, image.cols, image.patch_rows, image.patch_cols, image.patch_count());
            (Model::Vit(m), h, Vec::new())
        }
        None => {
            let ae_cfg = AEConfig {
                input_dim: d,
                hidden: cfg.ae_hidden,
                latent_dim: cfg.ae_latent,
            };
            let run = trainer::train_ae_baseline(&train, &ae_cfg, &head, &cfg.train)?;
            let _ = writeln!(log, "autoencoder {d} -> {} -> {}", ae_cfg.hidden, ae_cfg.latent_dim);
            (Model::Ae(run.model), run.head_history, run.ae_history)
        }
    };

    let bundle = ModelBundle {
        model,
        class_names: train.class_names.clone(),
        normalizer,
        feature_names,
        label_column: d_cfg.label_column.clone(),
        drop_columns: d_cfg.drop_columns.clone(),
    };
    let report = match &bundle.model {
        Model::Vit(m) => trainer::evaluate(m, test)?,
        Model::Ae(m) => trainer::evaluate(m, test)?,
    };
    let ck = Checkpoint {
        bundle,
        train: cfg.train,
        history,
        ae_history,
    };

    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let ck_path = args.out.join("checkpoint.json");
    ck.save(&ck_path)?;
    write_history(&args.out.join("history.csv"), &ck.history)?;
    if !ck.ae_history.is_empty() {
        write_history(&args.out.join("ae_history.csv"), &ck.ae_history)?;
    }
    write_report(&args.out.join("report.csv"), &report)?;

    let final_loss = *ck.history.last().expect("at least one epoch");
    let _ = writeln!(log, "{}", report.format_table(&format!("{} {}", args.pipeline, kind.as_str().to_uppercase())));
    let _ = writeln!(log, "final train loss {final_loss:.6}");
    Ok(TrainOutcome {
        checkpoint: ck_path,
        final_loss,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub drop_classes: Vec<String>,
    pub out: Option<PathBuf>,
}

pub fn cmd_evaluate(args: &EvaluateArgs, log: &mut dyn Write) -> Result<ClassReport> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let b = &ck.bundle;
    let raw = flowdata::load_csv(&args.data, &b.label_column)?;
    let drop: Vec<String> = b
        .drop_columns
        .iter()
        .filter(|c| raw.column_names.contains(c))
        .cloned()
        .collect();
    let found = flowdata::feature_columns(&raw, &drop).len();
    if found != b.num_features() {
        return Err(Error::Schema(format!(
            "expected d = {} features, found d = {found}",
            b.num_features()
        )));
    }
    let ds = flowdata::clean(&raw, &drop)?.drop_classes(&args.drop_classes);
    let report = b.evaluate_raw(&ds)?;
    let title = format!("{} {}", b.model.pipeline(), b.model.head_cfg().kind.as_str().to_uppercase());
    let _ = write!(log, "{}", report.format_table(&title));
    if let Some(p) = &args.out {
        write_report(p, &report)?;
    }
    Ok(report)
}

fn parse_row(line: &str, d: usize) -> std::result::Result<Vec<f64>, String> {
    let cells: Vec<&str> = line.split(',').collect();
    if cells.len() != d {
        return Err(format!("expected {d} cells, found {}", cells.len()));
    }
    cells
        .iter()
        .enumerate()
        .map(|(j, c)| match c.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("cell {} is not a finite number: {:?}", j + 1, c.trim())),
        })
        .collect()
}

/// Classifies rows one at a time in arrival order. Returns the number of
/// skipped lines; output is flushed after every prediction.
pub fn infer_stream(
    bundle: &ModelBundle,
    input: impl BufRead,
    mut output: impl Write,
    mut diag: impl Write,
    header: bool,
) -> Result<usize> {
    let d = bundle.num_features();
    let mut skipped = 0;
    let stdout = Path::new("<stdout>");
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| io_err(Path::new("<stdin>"), e))?;
        if header && i == 0 {
            continue;
        }
        let line = line.trim_end_matches('\r');
        let row = match parse_row(line, d) {
            Ok(r) => r,
            Err(msg) => {
                skipped += 1;
                let _ = writeln!(diag, "line {}: skipped: {msg}", i + 1);
                continue;
            }
        };
        let probs = bundle.predict_proba_raw(&Tensor::from_rows(&[row])?)?;
        let p = probs.row(0);
        let k = heads::predict(p);
        writeln!(output, "{}\t{:.6}", bundle.class_names[k], p[k])
            .and_then(|_| output.flush())
            .map_err(|e| io_err(stdout, e))?;
    }
    Ok(skipped)
}
