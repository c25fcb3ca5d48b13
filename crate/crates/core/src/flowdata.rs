//! Tabular flow datasets: CSV ingestion, cleaning, min-max scaling,
//! stratified splitting, class distributions and a synthetic generator.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;

/// Classes dropped by default because they are too small to learn from.
pub const DEFAULT_DROP_CLASSES: &[&str] = &["Theft"];

#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub label_column: String,
}

impl RawTable {
    pub fn new(column_names: Vec<String>, rows: Vec<Vec<String>>, label_column: &str) -> Result<Self> {
        if !column_names.iter().any(|c| c == label_column) {
            return Err(Error::Config(format!(
                "label column {label_column:?} not among the columns"
            )));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != column_names.len()) {
            return Err(Error::Validation(format!(
                "row {i} has {} cells, expected {}",
                rows[i].len(),
                column_names.len()
            )));
        }
        Ok(Self {
            column_names,
            rows,
            label_column: label_column.to_string(),
        })
    }
}

/// Per-feature min/max fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub const CLIP_LO: f64 = -0.5;
    pub const CLIP_HI: f64 = 1.5;

    pub fn fit(features: &Tensor) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyDataset("cannot fit a normalizer on zero rows".into()));
        }
        let d = features.cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for row in features.data().chunks_exact(d) {
            for j in 0..d {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// `(x − min)/(max − min)` clipped to `[−0.5, 1.5]`; constant features map to 0.
    pub fn apply_row(&self, row: &mut [f64]) {
        for (j, x) in row.iter_mut().enumerate() {
            let range = self.max[j] - self.min[j];
            *x = if range > 0.0 {
                ((*x - self.min[j]) / range).clamp(Self::CLIP_LO, Self::CLIP_HI)
            } else {
                0.0
            };
        }
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.dim() {
            return Err(Error::Schema(format!(
                "normalizer expects {} features, found {}",
                self.dim(),
                features.cols()
            )));
        }
        let mut out = features.clone();
        let d = self.dim();
        for row in out.data_mut().chunks_exact_mut(d) {
            self.apply_row(row);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowDataset {
    /// `[n×d]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub normalizer: Option<Normalizer>,
}

impl FlowDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for feature matrix {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            class_names,
            normalizer: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `idx`, in that order; class list unchanged.
    pub fn subset(&self, idx: &[usize]) -> FlowDataset {
        FlowDataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            normalizer: self.normalizer.clone(),
        }
    }

    /// Drops every row whose class is named in `names`, then removes those
    /// classes from the class list (order of the rest preserved).
    pub fn drop_classes(&self, names: &[impl AsRef<str>]) -> FlowDataset {
        let dropped: Vec<bool> = self
            .class_names
            .iter()
            .map(|c| names.iter().any(|n| n.as_ref() == c))
            .collect();
        if !dropped.iter().any(|&d| d) {
            return self.clone();
        }
        let mut remap = vec![usize::MAX; self.num_classes()];
        let mut class_names = Vec::new();
        for (i, name) in self.class_names.iter().enumerate() {
            if !dropped[i] {
                remap[i] = class_names.len();
                class_names.push(name.clone());
            }
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| !dropped[self.labels[i]]).collect();
        let mut out = self.subset(&keep);
        out.labels = keep.iter().map(|&i| remap[self.labels[i]]).collect();
        out.class_names = class_names;
        out
    }

    /// Re-indexes labels against `class_names`; any class not in that list is a schema error.
    pub fn align_classes(&self, class_names: &[String]) -> Result<FlowDataset> {
        let lookup: HashMap<&str, usize> = class_names
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let mut remap = Vec::with_capacity(self.num_classes());
        for name in &self.class_names {
            match lookup.get(name.as_str()) {
                Some(&i) => remap.push(i),
                None => {
                    return Err(Error::Schema(format!(
                        "class {name:?} is not one of the model's classes {class_names:?}"
                    )))
                }
            }
        }
        Ok(FlowDataset {
            features: self.features.clone(),
            labels: self.labels.iter().map(|&l| remap[l]).collect(),
            class_names: class_names.to_vec(),
            normalizer: self.normalizer.clone(),
        })
    }

    /// Back to string cells, with the label written as the class name in the last column.
    pub fn to_raw_table(&self, feature_names: &[String], label_column: &str) -> Result<RawTable> {
        if feature_names.len() != self.num_features() {
            return Err(Error::dim(format!(
                "{} feature names for {} features",
                feature_names.len(),
                self.num_features()
            )));
        }
        let mut columns = feature_names.to_vec();
        columns.push(label_column.to_string());
        let rows = (0..self.len())
            .map(|i| {
                let mut cells: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
                cells.push(self.class_names[self.labels[i]].clone());
                cells
            })
            .collect();
        RawTable::new(columns, rows, label_column)
    }

    pub fn write_csv(&self, out: impl Write, feature_names: &[String], label_column: &str) -> Result<()> {
        let table = self.to_raw_table(feature_names, label_column)?;
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
        w.write_record(&table.column_names).map_err(wrap)?;
        for row in &table.rows {
            w.write_record(row).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::Validation(format!("csv flush failed: {e}")))?;
        Ok(())
    }
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<RawTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, path, label_column)
}

/// Parses plain comma-separated text; quoted cells are rejected.
pub fn read_csv(input: impl std::io::Read, path: &Path, label_column: &str) -> Result<RawTable> {
    let ingest = |line: Option<u64>, message: String| Error::Ingestion {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| ingest(Some(1), e.to_string()))?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(ingest(Some(1), "missing header line".into()));
    }
    let column_names: Vec<String> = header.iter().map(str::to_string).collect();
    if !column_names.iter().any(|c| c == label_column) {
        return Err(ingest(
            Some(1),
            format!("label column {label_column:?} not found in header"),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line());
            ingest(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != column_names.len() {
            return Err(ingest(
                line,
                format!(
                    "expected {} cells, found {}",
                    column_names.len(),
                    record.len()
                ),
            ));
        }
        if record.iter().any(|c| c.contains('"')) {
            return Err(ingest(line, "quoted cells are not supported".into()));
        }
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(RawTable {
        column_names,
        rows,
        label_column: label_column.to_string(),
    })
}

/// Removes `drop_columns` and the label column from the features, discards
/// rows with an empty or non-numeric feature cell (or an empty label), and
/// indexes classes by first appearance.
pub fn clean(raw: &RawTable, drop_columns: &[impl AsRef<str>]) -> Result<FlowDataset> {
    for c in drop_columns {
        if !raw.column_names.iter().any(|n| n == c.as_ref()) {
            return Err(Error::Config(format!(
                "drop column {:?} is not in the table",
                c.as_ref()
            )));
        }
    }
    let label_idx = raw
        .column_names
        .iter()
        .position(|c| *c == raw.label_column)
        .ok_or_else(|| Error::Config(format!("label column {:?} missing", raw.label_column)))?;
    let keep: Vec<usize> = (0..raw.column_names.len())
        .filter(|&i| i != label_idx && !drop_columns.iter().any(|c| c.as_ref() == raw.column_names[i]))
        .collect();
    if keep.is_empty() {
        return Err(Error::Config("no feature columns remain after dropping".into()));
    }
    let mut data = Vec::with_capacity(raw.rows.len() * keep.len());
    let mut labels = Vec::with_capacity(raw.rows.len());
    let mut class_names: Vec<String> = Vec::new();
    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut parsed = Vec::with_capacity(keep.len());
    'rows: for row in &raw.rows {
        let label = row[label_idx].trim();
        if label.is_empty() {
            continue;
        }
        parsed.clear();
        for &j in &keep {
            match row[j].trim().parse::<f64>() {
                Ok(v) if v.is_finite() => parsed.push(v),
                _ => continue 'rows,
            }
        }
        let next = class_names.len();
        let idx = *class_index.entry(label.to_string()).or_insert_with(|| {
            class_names.push(label.to_string());
            next
        });
        data.extend_from_slice(&parsed);
        labels.push(idx);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset("every row was removed during cleaning".into()));
    }
    FlowDataset::new(
        Tensor::from_parts(vec![labels.len(), keep.len()], data),
        labels,
        class_names,
    )
}

/// Names of the feature columns `clean` keeps, in order.
pub fn feature_columns(raw: &RawTable, drop_columns: &[impl AsRef<str>]) -> Vec<String> {
    raw.column_names
        .iter()
        .filter(|c| **c != raw.label_column && !drop_columns.iter().any(|d| d.as_ref() == c.as_str()))
        .cloned()
        .collect()
}

/// Fits min/max on `train` and applies it to `train` and every dataset in `others`.
pub fn normalize(train: &FlowDataset, others: &[&FlowDataset]) -> Result<(FlowDataset, Vec<FlowDataset>, Normalizer)> {
    let stats = Normalizer::fit(&train.features)?;
    let apply = |ds: &FlowDataset| -> Result<FlowDataset> {
        Ok(FlowDataset {
            features: stats.apply(&ds.features)?,
            labels: ds.labels.clone(),
            class_names: ds.class_names.clone(),
            normalizer: Some(stats.clone()),
        })
    };
    let t = apply(train)?;
    let rest = others.iter().map(|ds| apply(ds)).collect::<Result<Vec<_>>>()?;
    Ok((t, rest, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: FlowDataset,
    pub test: FlowDataset,
    pub seed: u64,
    pub test_fraction: f64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Per class: shuffle that class's rows and send `round(fraction·count)` of them to test.
/// Both sides keep the original row order.
pub fn stratified_split(ds: &FlowDataset, test_fraction: f64, seed: u64) -> Result<SplitPair> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (c, rows) in by_class.iter().enumerate() {
        if rows.len() < 2 {
            return Err(Error::Stratification {
                class: ds.class_names[c].clone(),
                count: rows.len(),
            });
        }
    }
    let mut rng = Rng::new(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for mut rows in by_class {
        rng.shuffle(&mut rows);
        let n_test = (test_fraction * rows.len() as f64).round() as usize;
        test_idx.extend_from_slice(&rows[..n_test]);
        train_idx.extend_from_slice(&rows[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(SplitPair {
        train: ds.subset(&train_idx),
        test: ds.subset(&test_idx),
        seed,
        test_fraction,
        train_indices: train_idx,
        test_indices: test_idx,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassShare {
    pub class: String,
    pub count: usize,
    /// Percentage rounded to 3 decimals.
    pub percent: f64,
}

/// Counts in descending order (ties by class index), percentages to 3 decimals.
pub fn class_distribution(ds: &FlowDataset) -> Vec<ClassShare> {
    distribution_from_counts(&ds.class_names, &ds.class_counts())
}

pub fn distribution_from_counts(class_names: &[String], counts: &[usize]) -> Vec<ClassShare> {
    let total: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|c| ClassShare {
            class: class_names[c].clone(),
            count: counts[c],
            percent: if total == 0 {
                0.0
            } else {
                (100_000.0 * counts[c] as f64 / total as f64).round() / 1000.0
            },
        })
        .collect()
}

/// Parameters for [`synth_generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub class_names: Vec<String>,
    pub features: usize,
    pub rows: usize,
    /// Relative class shares; normalized internally. Empty means balanced.
    pub shares: Vec<f64>,
    /// Spread of class means per feature, in units of within-class standard deviation.
    pub margin: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn balanced(classes: usize, features: usize, rows_per_class: usize, margin: f64, seed: u64) -> Self {
        Self {
            class_names: default_class_names(classes),
            features,
            rows: classes * rows_per_class,
            shares: Vec::new(),
            margin,
            seed,
        }
    }

    /// Row counts per class: floors of `share·rows`, remainder to the largest fractional parts.
    pub fn class_counts(&self) -> Vec<usize> {
        let c = self.class_names.len();
        let shares = if self.shares.is_empty() {
            vec![1.0; c]
        } else {
            self.shares.clone()
        };
        let total: f64 = shares.iter().sum();
        let exact: Vec<f64> = shares.iter().map(|s| s / total * self.rows as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
        let mut remaining = self.rows - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - counts[a] as f64;
            let fb = exact[b] - counts[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if remaining == 0 {
                break;
            }
            counts[i] += 1;
            remaining -= 1;
        }
        counts
    }
}

/// `normal`, then common attack names, then `class<i>`.
pub fn default_class_names(classes: usize) -> Vec<String> {
    const NAMES: [&str; 8] = [
        "normal",
        "ddos",
        "dos",
        "reconnaissance",
        "http_flood",
        "tcp_flood",
        "udp_flood",
        "brute_force",
    ];
    (0..classes)
        .map(|i| NAMES.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string()))
        .collect()
}

pub fn synth_feature_names(features: usize) -> Vec<String> {
    (0..features).map(|j| format!("f{j:02}")).collect()
}

/// Gaussian class clusters. Class `c` has mean `margin·z_c` (`z_c` standard
/// normal per feature) and unit within-class noise; each feature is then
/// given its own positive scale and offset so raw columns look heterogeneous.
/// Rows are shuffled. Deterministic per seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<FlowDataset> {
    let c = spec.class_names.len();
    if spec.features < 2 || c < 2 {
        return Err(Error::Config("synthetic data needs ≥ 2 features and ≥ 2 classes".into()));
    }
    if !spec.shares.is_empty() && (spec.shares.len() != c || spec.shares.iter().any(|&s| s <= 0.0 || !s.is_finite())) {
        return Err(Error::Config("one positive share per class is required".into()));
    }
    let d = spec.features;
    let rng = Rng::new(spec.seed);
    let mut params = rng.split(1);
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| spec.margin * params.normal()).collect())
        .collect();
    let scales: Vec<f64> = (0..d).map(|_| params.uniform(0.0, 3.0).exp()).collect();
    let offsets: Vec<f64> = (0..d).map(|_| params.uniform(0.0, 100.0)).collect();

    let mut noise = rng.split(2);
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(spec.rows);
    for (class, &count) in spec.class_counts().iter().enumerate() {
        for _ in 0..count {
            let x = (0..d)
                .map(|j| offsets[j] + scales[j] * (means[class][j] + noise.normal()))
                .collect();
            rows.push((class, x));
        }
    }
    rng.split(3).shuffle(&mut rows);
    let labels = rows.iter().map(|(l, _)| *l).collect();
    let data = rows.into_iter().flat_map(|(_, x)| x).collect::<Vec<_>>();
    FlowDataset::new(
        Tensor::from_parts(vec![spec.rows, d], data),
        labels,
        spec.class_names.clone(),
    )
}
