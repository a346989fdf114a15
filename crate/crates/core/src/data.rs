//! Multi-view datasets: ingestion, synthesis, standardization and batching.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Deterministic RNG used everywhere in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a tag into an independent-looking child seed (splitmix64).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// V feature matrices over the same N instances, with sensitive group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub name: String,
    pub views: Vec<Array2<f64>>,
    pub labels: Option<Vec<usize>>,
    pub sensitive: Vec<usize>,
}

impl MultiViewDataset {
    pub fn new(
        name: impl Into<String>,
        views: Vec<Array2<f64>>,
        labels: Option<Vec<usize>>,
        sensitive: Vec<usize>,
    ) -> Result<Self> {
        let dataset = Self {
            name: name.into(),
            views,
            labels,
            sensitive,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .views
            .first()
            .ok_or_else(|| Error::Structural("dataset has no views".into()))?;
        let n = first.nrows();
        if n == 0 {
            return Err(Error::Structural("dataset has no rows".into()));
        }
        for (v, view) in self.views.iter().enumerate() {
            if view.nrows() != n {
                return Err(Error::Structural(format!(
                    "view {v} has {} rows, view 0 has {n}",
                    view.nrows()
                )));
            }
            if view.ncols() == 0 {
                return Err(Error::Structural(format!("view {v} has no columns")));
            }
            if let Some(pos) = view.iter().position(|x| !x.is_finite()) {
                return Err(Error::Structural(format!(
                    "view {v} has a non-finite value at row {}, column {}",
                    pos / view.ncols(),
                    pos % view.ncols()
                )));
            }
        }
        if self.sensitive.len() != n {
            return Err(Error::Structural(format!(
                "sensitive vector has {} entries for {n} rows",
                self.sensitive.len()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Structural(format!(
                    "label vector has {} entries for {n} rows",
                    labels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.views[0].nrows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.ncols()).collect()
    }

    /// Number of group ids, i.e. `max(sensitive) + 1`.
    pub fn n_groups(&self) -> usize {
        self.sensitive.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn distinct_groups(&self) -> usize {
        let mut seen = vec![false; self.n_groups()];
        for &g in &self.sensitive {
            seen[g] = true;
        }
        seen.into_iter().filter(|&s| s).count()
    }

    /// Fairness training needs at least two populated groups.
    pub fn require_fairness_groups(&self) -> Result<()> {
        if self.distinct_groups() < 2 {
            return Err(Error::Contract(
                "fairness training requires at least two distinct sensitive groups".into(),
            ));
        }
        Ok(())
    }

    /// Rows `indices` of every view, label and sensitive vector, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            views: self
                .views
                .iter()
                .map(|v| v.select(Axis(0), indices))
                .collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            sensitive: indices.iter().map(|&i| self.sensitive[i]).collect(),
        }
    }

    pub fn standardized(&self) -> Self {
        Self {
            views: self.views.iter().map(standardize).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SensitiveSource {
    #[default]
    File,
    Synthetic,
}

fn default_bernoulli_p() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

/// On-disk description of a dataset. Relative paths resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub name: String,
    pub view_paths: Vec<PathBuf>,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
    #[serde(default)]
    pub sensitive_path: Option<PathBuf>,
    #[serde(default)]
    pub sensitive_source: SensitiveSource,
    #[serde(default = "default_bernoulli_p")]
    pub bernoulli_p: f64,
    pub k: usize,
    #[serde(default)]
    pub subsample: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// z-score every view column after loading.
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.view_paths.is_empty() {
            return Err(Error::Config("manifest lists no view files".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.bernoulli_p > 0.0 && self.bernoulli_p < 1.0) {
            return Err(Error::Config(format!(
                "bernoulli_p must lie in (0, 1), got {}",
                self.bernoulli_p
            )));
        }
        if self.sensitive_source == SensitiveSource::File && self.sensitive_path.is_none() {
            return Err(Error::Config(
                "sensitive_source = \"file\" requires sensitive_path".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let manifest: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Reads a TOML manifest; relative paths resolve against its directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = Self::from_toml_str(&text)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf);
        Ok(manifest)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        }
    }
}

fn csv_reader(path: &Path, has_header: bool) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(file))
}

/// Reads a numeric CSV table. Rows must all have the same width.
pub fn read_matrix_csv(path: &Path, has_header: bool) -> Result<Array2<f64>> {
    let mut reader = csv_reader(path, has_header)?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    column: record.len().min(w) + 1,
                    message: format!("expected {w} fields, found {}", record.len()),
                })
            }
            _ => {}
        }
        for (c, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: line,
                column: c + 1,
                message: format!("not a number: {field:?}"),
            })?;
            values.push(value);
        }
        rows += 1;
    }
    let width = width.unwrap_or(0);
    Array2::from_shape_vec((rows, width), values)
        .map_err(|e| Error::Structural(format!("{}: {e}", path.display())))
}

/// Reads a single-column CSV of non-negative integer ids.
pub fn read_ids_csv(path: &Path, has_header: bool) -> Result<Vec<usize>> {
    let mut reader = csv_reader(path, has_header)?;
    let mut ids = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(ids.len() + 1, |p| p.line() as usize);
        if record.len() != 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: line,
                column: 2,
                message: format!("expected a single column, found {}", record.len()),
            });
        }
        let field = &record[0];
        let id: usize = field.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row: line,
            column: 1,
            message: format!("not a non-negative integer: {field:?}"),
        })?;
        ids.push(id);
    }
    Ok(ids)
}

pub fn write_matrix_csv(path: &Path, x: &Array2<f64>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in x.rows() {
        writer.write_record(row.iter().map(|v| format!("{v:.16e}")))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_ids_csv(path: &Path, ids: &[usize]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for id in ids {
        writer.write_record([id.to_string()])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes `view{v}.csv`, `labels.csv`, `sensitive.csv` and `manifest.toml` into `dir`.
///
/// Values are printed with 17 significant digits, so reloading with
/// `standardize = false` reproduces them bit-exactly.
pub fn write_dataset(dataset: &MultiViewDataset, dir: &Path, k: usize) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut view_paths = Vec::with_capacity(dataset.n_views());
    for (v, view) in dataset.views.iter().enumerate() {
        let file = PathBuf::from(format!("view{v}.csv"));
        write_matrix_csv(&dir.join(&file), view)?;
        view_paths.push(file);
    }
    let labels_path = match &dataset.labels {
        Some(labels) => {
            write_ids_csv(&dir.join("labels.csv"), labels)?;
            Some(PathBuf::from("labels.csv"))
        }
        None => None,
    };
    write_ids_csv(&dir.join("sensitive.csv"), &dataset.sensitive)?;
    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        view_paths,
        has_header: false,
        labels_path,
        sensitive_path: Some(PathBuf::from("sensitive.csv")),
        sensitive_source: SensitiveSource::File,
        bernoulli_p: 0.5,
        k,
        subsample: None,
        seed: 0,
        standardize: false,
        base_dir: Some(dir.to_path_buf()),
    };
    let path = dir.join("manifest.toml");
    fs::write(&path, manifest.to_toml_string()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<MultiViewDataset> {
    manifest.validate()?;
    let mut views = Vec::with_capacity(manifest.view_paths.len());
    for path in &manifest.view_paths {
        views.push(read_matrix_csv(&manifest.resolve(path), manifest.has_header)?);
    }
    let n = views[0].nrows();
    for (v, view) in views.iter().enumerate() {
        if view.nrows() != n {
            return Err(Error::Structural(format!(
                "view {v} ({}) has {} rows, view 0 has {n}",
                manifest.view_paths[v].display(),
                view.nrows()
            )));
        }
    }
    let labels = match &manifest.labels_path {
        Some(path) => Some(read_ids_csv(&manifest.resolve(path), manifest.has_header)?),
        None => None,
    };
    let sensitive = match manifest.sensitive_source {
        SensitiveSource::File => {
            let path = manifest
                .sensitive_path
                .as_ref()
                .ok_or_else(|| Error::Config("missing sensitive_path".into()))?;
            read_ids_csv(&manifest.resolve(path), manifest.has_header)?
        }
        SensitiveSource::Synthetic => {
            synthesize_sensitive(n, manifest.bernoulli_p, derive_seed(manifest.seed, 1))?
        }
    };
    let name = if manifest.name.is_empty() {
        "dataset".to_string()
    } else {
        manifest.name.clone()
    };
    let mut dataset = MultiViewDataset::new(name, views, labels, sensitive)?;
    if let Some(m) = manifest.subsample {
        dataset = subsample(&dataset, m, manifest.seed)?;
    }
    if manifest.standardize {
        dataset = dataset.standardized();
    }
    Ok(dataset)
}

/// Uniform sample of `m` rows without replacement; rows keep their original order.
pub fn subsample(dataset: &MultiViewDataset, m: usize, seed: u64) -> Result<MultiViewDataset> {
    let n = dataset.n_samples();
    if m == 0 || m > n {
        return Err(Error::Bounds(format!(
            "subsample size {m} must lie in 1..={n}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut rows = index::sample(&mut rng, n, m).into_vec();
    rows.sort_unstable();
    Ok(dataset.select_rows(&rows))
}

/// Per-column z-score with population standard deviation.
///
/// Columns whose standard deviation vanishes (relative to their magnitude)
/// map to zeros.
pub fn standardize(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows().max(1) as f64;
    let mut out = x.clone();
    for mut column in out.columns_mut() {
        let mean = column.sum() / n;
        let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 1e-12 * (1.0 + mean.abs()) {
            column.fill(0.0);
        } else {
            column.mapv_inplace(|v| (v - mean) / std);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTransform {
    Sigmoid,
    Relu,
}

impl ViewTransform {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            ViewTransform::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            ViewTransform::Relu => v.max(0.0),
        }
    }
}

/// One view per transform, each the elementwise transform of the standardized `x`.
pub fn synthesize_views(x: &Array2<f64>, transforms: &[ViewTransform]) -> Result<Vec<Array2<f64>>> {
    if transforms.is_empty() {
        return Err(Error::Contract("at least one view transform is required".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("input table has non-finite values".into()));
    }
    let z = standardize(x);
    Ok(transforms.iter().map(|&t| z.mapv(|v| t.apply(v))).collect())
}

/// Independent Bernoulli(p) group ids in {0, 1}.
pub fn synthesize_sensitive(n: usize, p: f64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Contract("need at least one instance".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Contract(format!("p must lie in (0, 1), got {p}")));
    }
    let mut rng = seeded_rng(seed);
    Ok((0..n).map(|_| usize::from(rng.random_bool(p))).collect())
}

/// A seeded permutation of `0..n` cut into consecutive batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub order: Vec<usize>,
}

impl BatchPlan {
    pub fn batches(&self) -> std::slice::Chunks<'_, usize> {
        self.order.chunks(self.batch_size)
    }

    pub fn n_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Bounds(format!(
            "batch size {batch_size} must lie in 1..={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    Ok(BatchPlan { batch_size, order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn standardize_examples() {
        let x = array![[0.0, 3.0], [2.0, 3.0]];
        let z = standardize(&x);
        assert_eq!(z, array![[-1.0, 0.0], [1.0, 0.0]]);
        let again = standardize(&z);
        for (a, b) in z.iter().zip(again.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_with_rounding_is_zeroed() {
        let x = Array2::from_elem((3, 1), 0.1);
        assert!(standardize(&x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesize_views_on_zeros() {
        let x = Array2::zeros((3, 2));
        let views = synthesize_views(&x, &[ViewTransform::Sigmoid, ViewTransform::Relu]).unwrap();
        assert_eq!(views.len(), 2);
        assert!(views[0].iter().all(|&v| v == 0.5));
        assert!(views[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_of_standardized_pair() {
        let x = array![[-1.0], [1.0]];
        let views = synthesize_views(&x, &[ViewTransform::Sigmoid]).unwrap();
        assert!((views[0][[0, 0]] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((views[0][[1, 0]] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn synthesize_views_rejects_empty_transform_list() {
        assert!(synthesize_views(&Array2::zeros((2, 2)), &[]).is_err());
    }

    #[test]
    fn sensitive_is_deterministic_and_degenerate_limit() {
        let a = synthesize_sensitive(50, 0.3, 9).unwrap();
        assert_eq!(a, synthesize_sensitive(50, 0.3, 9).unwrap());
        let ones = synthesize_sensitive(10, 0.999_999, 1).unwrap();
        assert!(ones.iter().filter(|&&g| g == 1).count() >= 9);
        assert!(synthesize_sensitive(10, 1.0, 1).is_err());
        assert!(synthesize_sensitive(0, 0.5, 1).is_err());
    }

    #[test]
    fn batches_chunk_arithmetic() {
        let plan = make_batches(5, 2, 3).unwrap();
        let sizes: Vec<usize> = plan.batches().map(<[usize]>::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(plan.n_batches(), 3);
        let single = make_batches(4, 4, 3).unwrap();
        assert_eq!(single.n_batches(), 1);
        let mut all = single.order.clone();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(make_batches(5, 2, 3).unwrap(), plan);
        assert!(make_batches(5, 0, 3).is_err());
        assert!(make_batches(5, 6, 3).is_err());
    }

    #[test]
    fn dataset_rejects_ragged_views() {
        let err = MultiViewDataset::new(
            "bad",
            vec![Array2::zeros((4, 2)), Array2::zeros((5, 2))],
            None,
            vec![0; 4],
        );
        assert!(matches!(err, Err(Error::Structural(_))));
    }

    #[test]
    fn derive_seed_spreads_tags() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 7), derive_seed(5, 7));
    }
}
