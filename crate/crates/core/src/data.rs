//! Datasets: synthetic generation with known informative features, CSV
//! ingestion and the usual expression-matrix preprocessing.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{TaskKind, TaskLabels, TaskSpec};

/// Class-label sentinel for a missing label.
pub const MISSING_CLASS: i64 = -1;

/// RMS contribution of one informative signal to each class logit.
pub const SIGNAL_SCALE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Labels {
    /// Classes in `0..num_classes`, [`MISSING_CLASS`] when missing.
    Class {
        num_classes: usize,
        values: Vec<i64>,
    },
    /// NaN when missing.
    Regression { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelColumn {
    pub name: String,
    pub labels: Labels,
}

impl LabelColumn {
    pub fn len(&self) -> usize {
        match &self.labels {
            Labels::Class { values, .. } => values.len(),
            Labels::Regression { values } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The task this column supervises.
    pub fn task_spec(&self) -> TaskSpec {
        match &self.labels {
            Labels::Class { num_classes, .. } => {
                TaskSpec::classification(self.name.clone(), *num_classes)
            }
            Labels::Regression { .. } => TaskSpec::regression(self.name.clone()),
        }
    }

    /// Labels of `rows` in the form the loss functions take.
    pub fn gather(&self, rows: &[usize]) -> TaskLabels {
        match &self.labels {
            Labels::Class { values, .. } => TaskLabels::Class(
                rows.iter()
                    .map(|&r| usize::try_from(values[r]).ok())
                    .collect(),
            ),
            Labels::Regression { values } => {
                TaskLabels::Regression(rows.iter().map(|&r| values[r]).collect())
            }
        }
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match &self.labels {
            Labels::Class { values, .. } => values[row] < 0,
            Labels::Regression { values } => values[row].is_nan(),
        }
    }

    /// Number of distinct observed labels (classes) or observed values.
    pub fn cardinality(&self) -> usize {
        match &self.labels {
            Labels::Class { values, .. } => values
                .iter()
                .filter(|&&v| v >= 0)
                .collect::<BTreeSet<_>>()
                .len(),
            Labels::Regression { values } => values
                .iter()
                .filter(|v| !v.is_nan())
                .map(|v| v.to_bits())
                .collect::<BTreeSet<_>>()
                .len(),
        }
    }

    fn select(&self, rows: &[usize]) -> LabelColumn {
        let labels = match &self.labels {
            Labels::Class {
                num_classes,
                values,
            } => Labels::Class {
                num_classes: *num_classes,
                values: rows.iter().map(|&r| values[r]).collect(),
            },
            Labels::Regression { values } => Labels::Regression {
                values: rows.iter().map(|&r| values[r]).collect(),
            },
        };
        LabelColumn {
            name: self.name.clone(),
            labels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Expression matrix with labels. Immutable once built; transformations
/// return new datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x d`.
    pub x: Tensor,
    pub feature_names: Vec<String>,
    pub labels: Vec<LabelColumn>,
    /// Truly informative features, when known.
    pub ground_truth: Option<Vec<usize>>,
    pub split: Option<Vec<Split>>,
}

/// Shape summary reported after loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub d: usize,
    pub label_cardinalities: Vec<(String, usize)>,
}

impl Dataset {
    pub fn new(x: Tensor, feature_names: Vec<String>, labels: Vec<LabelColumn>) -> Result<Self> {
        let (n, d) = x
            .dims2()
            .ok_or_else(|| Error::contract("feature matrix must be 2-D"))?;
        if feature_names.len() != d {
            return Err(Error::contract(format!(
                "{} feature names for {d} columns",
                feature_names.len()
            )));
        }
        for col in &labels {
            if col.len() != n {
                return Err(Error::data(
                    None,
                    Some(&col.name),
                    format!("label column has {} rows, matrix has {n}", col.len()),
                ));
            }
            if let Labels::Class {
                num_classes,
                values,
            } = &col.labels
            {
                if let Some(row) = values
                    .iter()
                    .position(|&v| v < MISSING_CLASS || v >= *num_classes as i64)
                {
                    return Err(Error::data(
                        Some(row),
                        Some(&col.name),
                        format!("class {} out of range", values[row]),
                    ));
                }
            }
        }
        Ok(Dataset {
            x,
            feature_names,
            labels,
            ground_truth: None,
            split: None,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn label_column(&self, name: &str) -> Option<&LabelColumn> {
        self.labels.iter().find(|c| c.name == name)
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.labels.iter().map(LabelColumn::task_spec).collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            n: self.n_rows(),
            d: self.n_features(),
            label_cardinalities: self
                .labels
                .iter()
                .map(|c| (c.name.clone(), c.cardinality()))
                .collect(),
        }
    }

    fn rows_in(&self, which: Split) -> Vec<usize> {
        match &self.split {
            Some(s) => (0..s.len()).filter(|&i| s[i] == which).collect(),
            None => Vec::new(),
        }
    }

    /// Rows assigned to the training split (empty before [`split`]).
    pub fn train_rows(&self) -> Vec<usize> {
        self.rows_in(Split::Train)
    }

    pub fn test_rows(&self) -> Vec<usize> {
        self.rows_in(Split::Test)
    }

    /// The given rows as a new dataset (split assignment carried along).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            feature_names: self.feature_names.clone(),
            labels: self.labels.iter().map(|c| c.select(rows)).collect(),
            ground_truth: self.ground_truth.clone(),
            split: self
                .split
                .as_ref()
                .map(|s| rows.iter().map(|&r| s[r]).collect()),
        }
    }

    /// The given feature columns, in the given order.
    pub fn select_features(&self, cols: &[usize]) -> Result<Dataset> {
        let (n, d) = (self.n_rows(), self.n_features());
        if let Some(&bad) = cols.iter().find(|&&c| c >= d) {
            return Err(Error::contract(format!(
                "feature index {bad} out of range for {d} features"
            )));
        }
        let src = self.x.values();
        let mut values = Vec::with_capacity(n * cols.len());
        for r in 0..n {
            values.extend(cols.iter().map(|&c| src[r * d + c]));
        }
        let remap: HashMap<usize, usize> = cols
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new))
            .collect();
        Ok(Dataset {
            x: Tensor::matrix(n, cols.len(), values)?,
            feature_names: cols
                .iter()
                .map(|&c| self.feature_names[c].clone())
                .collect(),
            labels: self.labels.clone(),
            ground_truth: self.ground_truth.as_ref().map(|gt| {
                gt.iter()
                    .filter_map(|g| remap.get(g).copied())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            }),
            split: self.split.clone(),
        })
    }

    /// Writes a CSV with feature columns then label columns. Floats use the
    /// shortest representation that parses back to the same bits; missing
    /// labels are written as `NA`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.extend(self.labels.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        let d = self.n_features();
        for r in 0..self.n_rows() {
            let mut rec: Vec<String> = self.x.values()[r * d..(r + 1) * d]
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            for col in &self.labels {
                rec.push(match &col.labels {
                    Labels::Class { values, .. } if values[r] >= 0 => values[r].to_string(),
                    Labels::Regression { values } if !values[r].is_nan() => {
                        format!("{:?}", values[r])
                    }
                    _ => "NA".to_owned(),
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Label columns holding real-valued targets; the rest are classes.
    #[serde(default)]
    pub regression_columns: Vec<String>,
}

fn parse_class(cell: &str) -> i64 {
    let cell = cell.trim();
    if let Ok(v) = cell.parse::<i64>() {
        return if v >= 0 { v } else { MISSING_CLASS };
    }
    match cell.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < i64::MAX as f64 => v as i64,
        _ => MISSING_CLASS,
    }
}

fn parse_target(cell: &str) -> f64 {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => v,
        _ => f64::NAN,
    }
}

/// Reads a header-first CSV. Columns named in `label_columns` become label
/// columns (in that order); every other column must be numeric.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_columns: &[&str],
    options: &LoadOptions,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_owned())
        .collect();
    let mut label_pos = Vec::with_capacity(label_columns.len());
    for &name in label_columns {
        let pos = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(None, Some(name), "unknown label column"))?;
        label_pos.push(pos);
    }
    for name in &options.regression_columns {
        if !label_columns.contains(&name.as_str()) {
            return Err(Error::data(
                None,
                Some(name),
                "regression column is not a label column",
            ));
        }
    }
    let feature_pos: Vec<usize> = (0..header.len())
        .filter(|i| !label_pos.contains(i))
        .collect();

    let mut x = Vec::new();
    let mut raw_labels: Vec<Vec<String>> = vec![Vec::new(); label_pos.len()];
    let mut n = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != header.len() {
            return Err(Error::data(
                Some(row),
                None,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        for &c in &feature_pos {
            let cell = rec[c].trim();
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => x.push(v),
                _ => {
                    return Err(Error::data(
                        Some(row),
                        Some(&header[c]),
                        format!("non-numeric feature value {cell:?}"),
                    ))
                }
            }
        }
        for (dst, &c) in raw_labels.iter_mut().zip(&label_pos) {
            dst.push(rec[c].to_owned());
        }
        n += 1;
    }

    let labels = label_columns
        .iter()
        .zip(raw_labels)
        .map(|(&name, cells)| {
            let labels = if options.regression_columns.iter().any(|r| r == name) {
                Labels::Regression {
                    values: cells.iter().map(|c| parse_target(c)).collect(),
                }
            } else {
                let values: Vec<i64> = cells.iter().map(|c| parse_class(c)).collect();
                let num_classes = (values.iter().copied().max().unwrap_or(0) + 1).max(2) as usize;
                Labels::Class {
                    num_classes,
                    values,
                }
            };
            LabelColumn {
                name: name.to_owned(),
                labels,
            }
        })
        .collect();
    let names = feature_pos.iter().map(|&c| header[c].clone()).collect();
    Dataset::new(Tensor::matrix(n, feature_pos.len(), x)?, names, labels)
}

/// Keeps the `top_m` highest-variance features (sample variance, ties to the
/// lower index) in their original order.
pub fn hvg_filter(dataset: &Dataset, top_m: usize) -> Result<Dataset> {
    let (n, d) = (dataset.n_rows(), dataset.n_features());
    if top_m == 0 || top_m > d {
        return Err(Error::contract(format!(
            "top_m must be in 1..={d}, got {top_m}"
        )));
    }
    let var = column_variances(&dataset.x, n, d);
    let mut keep = crate::selection::top_k_indices(&var, top_m);
    keep.sort_unstable();
    dataset.select_features(&keep)
}

/// Sample variance (ddof = 1) of every column; zero when `n < 2`.
pub fn column_variances(x: &Tensor, n: usize, d: usize) -> Vec<f64> {
    let v = x.values();
    (0..d)
        .map(|c| {
            if n < 2 {
                return 0.0;
            }
            let mean = (0..n).map(|r| v[r * d + c]).sum::<f64>() / n as f64;
            (0..n).map(|r| (v[r * d + c] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .collect()
}

/// `1` where `x > threshold`, else `0`.
pub fn binarize(dataset: &Dataset, threshold: f64) -> Dataset {
    let mut out = dataset.clone();
    for v in out.x.values_mut() {
        *v = if *v > threshold { 1.0 } else { 0.0 };
    }
    out
}

/// Shuffled 80/20 train/test assignment, deterministic in `seed`.
pub fn split(dataset: &Dataset, seed: u64) -> Dataset {
    let n = dataset.n_rows();
    let n_train = (0.8 * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![Split::Test; n];
    for &i in &order[..n_train] {
        assignment[i] = Split::Train;
    }
    let mut out = dataset.clone();
    out.split = Some(assignment);
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    #[default]
    Linear,
    /// Signals are sign products of informative column pairs.
    XorPairs,
}

/// Recipe for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    /// Informative features per task.
    pub g: usize,
    pub tasks: Vec<TaskSpec>,
    /// Fraction of task 0's informative features reused by every other task.
    pub shared_fraction: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    /// Per task; missing entries count as 0.
    #[serde(default)]
    pub missing_rate: Vec<f64>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.g == 0 || self.g > self.d {
            return Err(Error::contract(format!(
                "need n > 0 and 0 < g <= d (n = {}, g = {}, d = {})",
                self.n, self.g, self.d
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::contract("synthetic spec needs at least one task"));
        }
        for t in &self.tasks {
            t.validate()?;
            if let TaskKind::Regression { output_dim } = t.kind {
                if output_dim != 1 {
                    return Err(Error::contract("synthetic regression tasks are scalar"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) || !(self.noise_sigma >= 0.0) {
            return Err(Error::contract(
                "shared_fraction must lie in [0, 1] and noise_sigma be >= 0",
            ));
        }
        if self.missing_rate.len() > self.tasks.len()
            || self.missing_rate.iter().any(|r| !(0.0..=1.0).contains(r))
        {
            return Err(Error::contract(
                "missing_rate needs one value in [0, 1] per task",
            ));
        }
        let fresh = self.g - self.shared_count();
        if self.tasks.len() > 1 && fresh > self.d - self.g {
            return Err(Error::contract(format!(
                "{fresh} task-specific features do not fit beside {} shared ones in d = {}",
                self.g, self.d
            )));
        }
        Ok(())
    }

    fn shared_count(&self) -> usize {
        (self.shared_fraction * self.g as f64).round() as usize
    }
}

/// Orthonormal basis (`C x (C-1)`) of the vectors in R^C summing to zero.
fn helmert(c: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(c, c - 1);
    for j in 1..c {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            u[(i, j - 1)] = 1.0 / norm;
        }
        u[(j, j - 1)] = -(j as f64) / norm;
    }
    u
}

/// `m x g` frame of unit columns with `V Vᵀ ∝ I` when `g >= m`, so that every
/// column carries the same weight and no direction is favoured.
fn tight_frame<R: Rng + ?Sized>(m: usize, g: usize, rng: &mut R) -> DMatrix<f64> {
    if m == 1 {
        return DMatrix::from_fn(1, g, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 });
    }
    let mut v = DMatrix::from_fn(m, g, |_, _| rng.sample::<f64, _>(StandardNormal));
    normalize_columns(&mut v);
    if g < m {
        return v;
    }
    for _ in 0..500 {
        let eig = (&v * v.transpose()).symmetric_eigen();
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(1e-12).sqrt()));
        let root = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
        v = root * v * (g as f64 / m as f64).sqrt();
        normalize_columns(&mut v);
    }
    v
}

fn normalize_columns(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
}

/// Signals the labels are built from: the informative columns themselves, or
/// sign products of consecutive pairs (a lone last column stays linear).
fn signals(row: &[f64], informative: &[usize], mode: Nonlinearity) -> Vec<f64> {
    match mode {
        Nonlinearity::Linear => informative.iter().map(|&j| row[j]).collect(),
        Nonlinearity::XorPairs => informative
            .chunks(2)
            .map(|p| match *p {
                [a, b] => (row[a] * row[b]).signum(),
                [a] => row[a],
                _ => unreachable!(),
            })
            .collect(),
    }
}

fn signal_count(g: usize, mode: Nonlinearity) -> usize {
    match mode {
        Nonlinearity::Linear => g,
        Nonlinearity::XorPairs => g.div_ceil(2),
    }
}

/// Draws a dataset whose labels depend only on known feature subsets.
///
/// Every task gets `g` informative features: task 0 a random subset, the
/// others `round(shared_fraction * g)` of task 0's plus fresh ones. Class
/// logits are `W h + noise_sigma * eps` with `h` the task's signals and `W`
/// built so that classes are balanced and all signals weigh the same.
/// Regression targets are `Σ ±h_j + noise_sigma * eps`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, d, g) = (spec.n, spec.d, spec.g);

    let informative = draw_informative(spec, &mut rng);

    let m = signal_count(g, spec.nonlinearity);
    let weights: Vec<DMatrix<f64>> = spec
        .tasks
        .iter()
        .map(|t| match t.kind {
            TaskKind::Classification { num_classes } => {
                let v = tight_frame(num_classes - 1, m, &mut rng);
                helmert(num_classes) * v * (SIGNAL_SCALE * (num_classes as f64 - 1.0).sqrt())
            }
            TaskKind::Regression { .. } => {
                DMatrix::from_fn(1, m, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            }
        })
        .collect();

    let x: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let mut columns: Vec<LabelColumn> = spec
        .tasks
        .iter()
        .map(|t| LabelColumn {
            name: t.name.clone(),
            labels: match t.kind {
                TaskKind::Classification { num_classes } => Labels::Class {
                    num_classes,
                    values: Vec::with_capacity(n),
                },
                TaskKind::Regression { .. } => Labels::Regression {
                    values: Vec::with_capacity(n),
                },
            },
        })
        .collect();
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        for (t, col) in columns.iter_mut().enumerate() {
            let h = nalgebra::DVector::from_vec(signals(row, &informative[t], spec.nonlinearity));
            let mut out = &weights[t] * h;
            for v in out.iter_mut() {
                *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            match &mut col.labels {
                Labels::Class { values, .. } => values.push(out.argmax().0 as i64),
                Labels::Regression { values } => values.push(out[0]),
            }
        }
    }
    for (t, col) in columns.iter_mut().enumerate() {
        let rate = spec.missing_rate.get(t).copied().unwrap_or(0.0);
        for r in 0..n {
            if rate > 0.0 && rng.gen::<f64>() < rate {
                match &mut col.labels {
                    Labels::Class { values, .. } => values[r] = MISSING_CLASS,
                    Labels::Regression { values } => values[r] = f64::NAN,
                }
            }
        }
    }

    let names = (0..d).map(|j| format!("f{j}")).collect();
    let mut ds = Dataset::new(Tensor::matrix(n, d, x)?, names, columns)?;
    let truth: BTreeSet<usize> = informative.into_iter().flatten().collect();
    ds.ground_truth = Some(truth.into_iter().collect());
    Ok(ds)
}

fn draw_informative<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Vec<Vec<usize>> {
    let mut all: Vec<usize> = (0..spec.d).collect();
    all.shuffle(rng);
    let (base, rest) = all.split_at(spec.g);
    let shared = spec.shared_count();
    let mut sets = vec![base.to_vec()];
    for _ in 1..spec.tasks.len() {
        let mut set: Vec<usize> = base.choose_multiple(rng, shared).copied().collect();
        set.extend(rest.choose_multiple(rng, spec.g - shared).copied());
        set.shuffle(rng);
        sets.push(set);
    }
    sets
}

/// Informative features of each task (sorted), as drawn by
/// [`generate_synthetic`] for the same spec.
pub fn task_informative_sets(spec: &SynthSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let mut sets = draw_informative(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed));
    for s in &mut sets {
        s.sort_unstable();
    }
    Ok(sets)
}
