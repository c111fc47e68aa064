//! Synthetic federations: per-site train/validation partitions plus one
//! shared test set, with IID, quantity-skew and feature-skew layouts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::derive_rng;
use crate::training::{LabeledDataset, Labels, TrainError};

/// Upper bound on any single count in a layout.
pub const MAX_CASES: usize = 1_000_000;

const STREAM_TASK: u64 = 0x7a5c;
const STREAM_SITE: u64 = 0x517e;
const STREAM_SHIFT: u64 = 0x5417;
const STREAM_TEST: u64 = 0x7e57;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("layout field `{field}`: {message}")]
    Schema { field: &'static str, message: String },
    #[error("failed to parse {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("split needs at least 3 cases, got {0}")]
    TooFewCases(usize),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error(transparent)]
    Dataset(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn schema(field: &'static str, message: impl Into<String>) -> DataError {
    DataError::Schema { field, message: message.into() }
}

/// How site distributions differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Skew {
    Iid,
    /// Same distribution everywhere, per-site counts taken verbatim.
    Quantity,
    /// Per-site feature mean shift of the given magnitudes.
    Feature { shift: Vec<f64> },
}

/// The synthetic learning task sites draw samples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    /// Unit-variance Gaussian clusters, one per class, with cluster means
    /// drawn from `N(0, separation²)` per coordinate.
    Classification { class_count: usize, input_dim: usize, separation: f64 },
    /// `y = w·x + b + noise·ε` with standard normal features.
    Regression { input_dim: usize, noise: f64 },
}

impl Default for Task {
    fn default() -> Self {
        Task::Classification { class_count: 3, input_dim: 10, separation: 0.6 }
    }
}

impl Task {
    pub fn input_dim(&self) -> usize {
        match self {
            Task::Classification { input_dim, .. } | Task::Regression { input_dim, .. } => *input_dim,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Task::Classification { .. })
    }
}

fn default_skew() -> Skew {
    Skew::Iid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationLayout {
    pub site_count: usize,
    pub train_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
    pub test_count: usize,
    #[serde(default = "default_skew")]
    pub skew: Skew,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub task: Task,
}

fn even_split(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

impl FederationLayout {
    /// Totals divided evenly across sites; leftovers go to the lowest ids.
    pub fn iid(site_count: usize, train_total: usize, val_total: usize, test_count: usize, seed: u64) -> Self {
        Self {
            site_count,
            train_counts: even_split(train_total, site_count),
            val_counts: even_split(val_total, site_count),
            test_count,
            skew: Skew::Iid,
            seed,
            task: Task::default(),
        }
    }

    pub fn quantity(train_counts: Vec<usize>, val_counts: Vec<usize>, test_count: usize, seed: u64) -> Self {
        Self {
            site_count: train_counts.len(),
            train_counts,
            val_counts,
            test_count,
            skew: Skew::Quantity,
            seed,
            task: Task::default(),
        }
    }

    pub fn train_total(&self) -> usize {
        self.train_counts.iter().sum()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.site_count == 0 {
            return Err(schema("site_count", "must be positive"));
        }
        let n = self.site_count;
        for (field, counts) in [("train_counts", &self.train_counts), ("val_counts", &self.val_counts)] {
            if counts.len() != n {
                return Err(schema(
                    field,
                    format!("expected {n} entries (site_count), found {}", counts.len()),
                ));
            }
            if let Some(i) = counts.iter().position(|&c| c == 0) {
                return Err(schema(field, format!("entry {i} must be at least 1")));
            }
            if let Some(c) = counts.iter().find(|&&c| c > MAX_CASES) {
                return Err(schema(field, format!("count {c} exceeds the maximum {MAX_CASES}")));
            }
        }
        if self.test_count == 0 || self.test_count > MAX_CASES {
            return Err(schema("test_count", format!("must lie in [1, {MAX_CASES}]")));
        }
        if let Skew::Feature { shift } = &self.skew {
            if shift.len() != n {
                return Err(schema("skew.shift", format!("expected {n} entries, found {}", shift.len())));
            }
            if shift.iter().any(|s| !s.is_finite()) {
                return Err(schema("skew.shift", "entries must be finite"));
            }
        }
        match self.task {
            Task::Classification { class_count, input_dim, separation } => {
                if class_count < 2 {
                    return Err(schema("task.class_count", "must be at least 2"));
                }
                if input_dim == 0 {
                    return Err(schema("task.input_dim", "must be positive"));
                }
                if !(separation.is_finite() && separation >= 0.0) {
                    return Err(schema("task.separation", "must be finite and nonnegative"));
                }
            }
            Task::Regression { input_dim, noise } => {
                if input_dim == 0 {
                    return Err(schema("task.input_dim", "must be positive"));
                }
                if !(noise.is_finite() && noise >= 0.0) {
                    return Err(schema("task.noise", "must be finite and nonnegative"));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_layout(text: &str, origin: &Path) -> Result<FederationLayout, DataError> {
    let layout: FederationLayout = toml::from_str(text).map_err(|source| DataError::Parse {
        path: origin.to_path_buf(),
        source,
    })?;
    layout.validate()?;
    Ok(layout)
}

pub fn load_layout(path: &Path) -> Result<FederationLayout, DataError> {
    parse_layout(&fs::read_to_string(path)?, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SitePartition {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub sites: Vec<SitePartition>,
    /// One test set shared by every site.
    pub test: Arc<LabeledDataset>,
}

impl FederatedDataset {
    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    /// Union of all site training splits, in site order.
    pub fn pooled_train(&self) -> Result<LabeledDataset, TrainError> {
        let parts: Vec<_> = self.sites.iter().map(|s| &s.train).collect();
        LabeledDataset::concat(&parts)
    }

    pub fn pooled_validation(&self) -> Result<LabeledDataset, TrainError> {
        let parts: Vec<_> = self.sites.iter().map(|s| &s.validation).collect();
        LabeledDataset::concat(&parts)
    }
}

struct Sampler {
    task: Task,
    /// Cluster means (classification) or `[w.., b]` (regression).
    centers: Vec<Vec<f64>>,
}

impl Sampler {
    fn new(task: &Task, seed: u64) -> Self {
        let mut rng = derive_rng(seed, &[STREAM_TASK]);
        let centers = match *task {
            Task::Classification { class_count, input_dim, separation } => (0..class_count)
                .map(|_| normal_vec(&mut rng, input_dim).into_iter().map(|x| x * separation).collect())
                .collect(),
            Task::Regression { input_dim, .. } => vec![normal_vec(&mut rng, input_dim + 1)],
        };
        Self { task: task.clone(), centers }
    }

    fn draw<R: Rng>(&self, rng: &mut R, n: usize, shift: &[f64]) -> LabeledDataset {
        let d = self.task.input_dim();
        let mut features = Vec::with_capacity(n * d);
        let labels = match self.task {
            Task::Classification { class_count, .. } => {
                let mut labels = Vec::with_capacity(n);
                for _ in 0..n {
                    let c = rng.random_range(0..class_count);
                    for k in 0..d {
                        let e: f64 = StandardNormal.sample(rng);
                        features.push(self.centers[c][k] + e + shift[k]);
                    }
                    labels.push(c);
                }
                Labels::Classes(labels)
            }
            Task::Regression { noise, .. } => {
                let w = &self.centers[0];
                let mut targets = Vec::with_capacity(n);
                for _ in 0..n {
                    let mut y = w[d];
                    for k in 0..d {
                        let x: f64 = StandardNormal.sample(rng);
                        y += w[k] * x;
                        features.push(x + shift[k]);
                    }
                    let e: f64 = StandardNormal.sample(rng);
                    targets.push(y + noise * e);
                }
                Labels::Targets(targets)
            }
        };
        LabeledDataset::new(d, features, labels).expect("generated rows are consistent")
    }
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws every partition of a federation. Sites take consecutive slices of
/// one train stream and one validation stream, in site order, so two
/// layouts with the same seed and totals partition the same pooled sample.
pub fn generate_federation(layout: &FederationLayout) -> Result<FederatedDataset, DataError> {
    layout.validate()?;
    let sampler = Sampler::new(&layout.task, layout.seed);
    let d = layout.task.input_dim();
    let mut train_rng = derive_rng(layout.seed, &[STREAM_SITE, 0]);
    let mut val_rng = derive_rng(layout.seed, &[STREAM_SITE, 1]);
    let sites = (0..layout.site_count)
        .map(|i| {
            let shift = match &layout.skew {
                Skew::Feature { shift } if shift[i] != 0.0 => {
                    let mut rng = derive_rng(layout.seed, &[STREAM_SHIFT, i as u64]);
                    let dir = normal_vec(&mut rng, d);
                    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                    dir.into_iter().map(|x| shift[i] * x / norm).collect()
                }
                _ => vec![0.0; d],
            };
            SitePartition {
                train: sampler.draw(&mut train_rng, layout.train_counts[i], &shift),
                validation: sampler.draw(&mut val_rng, layout.val_counts[i], &shift),
            }
        })
        .collect();
    let mut test_rng = derive_rng(layout.seed, &[STREAM_TEST]);
    let test = sampler.draw(&mut test_rng, layout.test_count, &vec![0.0; d]);
    Ok(FederatedDataset { sites, test: Arc::new(test) })
}

/// Seeded shuffle, then contiguous train/validation/test split.
///
/// Validation and test get `round(fraction · n)` cases (at least one each);
/// train takes the remainder.
pub fn split_site_data(
    cases: &LabeledDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset), DataError> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(*f > 0.0)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions));
    }
    let n = cases.len();
    if n < 3 {
        return Err(DataError::TooFewCases(n));
    }
    let mut n_val = ((fv * n as f64).round() as usize).max(1);
    let mut n_test = ((fs * n as f64).round() as usize).max(1);
    while n_val + n_test > n - 1 {
        if n_test >= n_val {
            n_test -= 1;
        } else {
            n_val -= 1;
        }
    }
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, &[0x5b11]));
    Ok((
        cases.select(&order[..n_train]),
        cases.select(&order[n_train..n_train + n_val]),
        cases.select(&order[n_train + n_val..]),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    site_count: usize,
    input_dim: usize,
    classification: bool,
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Csv { path: path.to_path_buf(), message: e.to_string() }
}

/// Writes one dataset as CSV: header `f0..f{d-1},label`. Floats use the
/// shortest decimal that round-trips exactly.
pub fn write_dataset_csv(data: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = (0..data.dim()).map(|k| format!("f{k}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for j in 0..data.len() {
        let mut rec: Vec<String> = data.row(j).iter().map(|x| format!("{x:?}")).collect();
        rec.push(match data.labels() {
            Labels::Classes(v) => v[j].to_string(),
            Labels::Targets(v) => format!("{:?}", v[j]),
        });
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path, classification: bool) -> Result<LabeledDataset, DataError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let d = header.len().checked_sub(1).ok_or_else(|| csv_err(path, "empty header"))?;
    for (k, name) in header.iter().take(d).enumerate() {
        if name != format!("f{k}") {
            return Err(csv_err(path, format!("column {k} is `{name}`, expected `f{k}`")));
        }
    }
    if &header[d] != "label" {
        return Err(csv_err(path, "last column must be `label`"));
    }
    let mut features = Vec::new();
    let mut classes = Vec::new();
    let mut targets = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = line + 2;
        for k in 0..d {
            let x: f64 = rec[k]
                .parse()
                .map_err(|e| csv_err(path, format!("line {row}, column f{k}: {e}")))?;
            features.push(x);
        }
        if classification {
            classes.push(rec[d].parse::<usize>().map_err(|e| csv_err(path, format!("line {row}, label: {e}")))?);
        } else {
            targets.push(rec[d].parse::<f64>().map_err(|e| csv_err(path, format!("line {row}, label: {e}")))?);
        }
    }
    let labels = if classification { Labels::Classes(classes) } else { Labels::Targets(targets) };
    Ok(LabeledDataset::new(d, features, labels)?)
}

/// Writes `site{i}_train.csv`, `site{i}_val.csv`, `test.csv` and a small
/// `manifest.toml` into `dir`.
pub fn export_dataset(dataset: &FederatedDataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        site_count: dataset.site_count(),
        input_dim: dataset.test.dim(),
        classification: matches!(dataset.test.labels(), Labels::Classes(_)),
    };
    fs::write(
        dir.join("manifest.toml"),
        toml::to_string(&manifest).expect("manifest serializes"),
    )?;
    for (i, site) in dataset.sites.iter().enumerate() {
        write_dataset_csv(&site.train, &dir.join(format!("site{i}_train.csv")))?;
        write_dataset_csv(&site.validation, &dir.join(format!("site{i}_val.csv")))?;
    }
    write_dataset_csv(&dataset.test, &dir.join("test.csv"))
}

pub fn import_dataset(dir: &Path) -> Result<FederatedDataset, DataError> {
    let path = dir.join("manifest.toml");
    let manifest: Manifest = toml::from_str(&fs::read_to_string(&path)?)
        .map_err(|source| DataError::Parse { path: path.clone(), source })?;
    let c = manifest.classification;
    let sites = (0..manifest.site_count)
        .map(|i| {
            Ok(SitePartition {
                train: read_dataset_csv(&dir.join(format!("site{i}_train.csv")), c)?,
                validation: read_dataset_csv(&dir.join(format!("site{i}_val.csv")), c)?,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let test = read_dataset_csv(&dir.join("test.csv"), c)?;
    if test.dim() != manifest.input_dim {
        return Err(csv_err(&dir.join("test.csv"), "feature dim differs from manifest"));
    }
    Ok(FederatedDataset { sites, test: Arc::new(test) })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Illustrative 8-site quantity-skew counts. Only the 48 and 12 extremes
    /// are documented; the middle sites are interpolated.
    fn non_iid() -> FederationLayout {
        FederationLayout::quantity(
            vec![48, 36, 28, 24, 20, 16, 16, 12],
            vec![10, 7, 6, 5, 4, 3, 3, 2],
            100,
            3,
        )
    }

    #[test]
    fn iid_layout_divides_evenly() {
        let layout = FederationLayout::iid(8, 200, 40, 100, 1);
        assert_eq!(layout.train_counts, vec![25; 8]);
        assert_eq!(layout.val_counts, vec![5; 8]);
        let fed = generate_federation(&layout).unwrap();
        assert!(fed.sites.iter().all(|s| s.train.len() == 25 && s.validation.len() == 5));
        assert_eq!(fed.test.len(), 100);
    }

    #[test]
    fn quantity_layout_uses_counts_verbatim() {
        let layout = non_iid();
        let fed = generate_federation(&layout).unwrap();
        assert_eq!(fed.sites[0].train.len(), 48);
        assert_eq!(fed.sites[7].train.len(), 12);
        assert_eq!(fed.sites.iter().map(|s| s.train.len()).sum::<usize>(), 200);
        assert_eq!(fed.pooled_train().unwrap().len(), 200);
    }

    #[test]
    fn layouts_with_equal_totals_share_the_pooled_sample() {
        let iid = generate_federation(&FederationLayout::iid(8, 200, 40, 100, 3)).unwrap();
        let skewed = generate_federation(&non_iid()).unwrap();
        assert_eq!(iid.pooled_train().unwrap(), skewed.pooled_train().unwrap());
        assert_eq!(iid.pooled_validation().unwrap(), skewed.pooled_validation().unwrap());
        assert_eq!(iid.test, skewed.test);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_federation(&non_iid()).unwrap();
        let b = generate_federation(&non_iid()).unwrap();
        assert_eq!(a, b);
        let mut other = non_iid();
        other.seed = 4;
        assert_ne!(generate_federation(&other).unwrap(), a);
    }

    fn column_means(d: &LabeledDataset) -> Vec<f64> {
        let mut m = vec![0.0; d.dim()];
        for j in 0..d.len() {
            for (acc, x) in m.iter_mut().zip(d.row(j)) {
                *acc += x;
            }
        }
        m.iter().map(|x| x / d.len() as f64).collect()
    }

    #[test]
    fn zero_feature_shift_keeps_sites_identically_distributed() {
        let mut layout = FederationLayout::quantity(vec![1000, 1000], vec![1, 1], 1, 9);
        layout.skew = Skew::Feature { shift: vec![0.0, 0.0] };
        let fed = generate_federation(&layout).unwrap();
        let (a, b) = (&fed.sites[0].train, &fed.sites[1].train);
        let (ma, mb) = (column_means(a), column_means(b));
        for k in 0..a.dim() {
            let var = |d: &LabeledDataset, m: f64| {
                (0..d.len()).map(|j| (d.row(j)[k] - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64
            };
            let se = ((var(a, ma[k]) + var(b, mb[k])) / 1000.0).sqrt();
            assert!((ma[k] - mb[k]).abs() < 3.0 * se, "feature {k}");
        }
    }

    #[test]
    fn feature_shift_moves_site_means() {
        let mut layout = FederationLayout::quantity(vec![2000, 2000], vec![1, 1], 1, 9);
        layout.skew = Skew::Feature { shift: vec![0.0, 3.0] };
        let fed = generate_federation(&layout).unwrap();
        let (ma, mb) = (column_means(&fed.sites[0].train), column_means(&fed.sites[1].train));
        let dist = ma.iter().zip(&mb).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((dist - 3.0).abs() < 0.5, "shift distance {dist}");
    }

    #[test]
    fn layout_validation_names_the_field() {
        let mut layout = non_iid();
        layout.train_counts.pop();
        match layout.validate() {
            Err(DataError::Schema { field, .. }) => assert_eq!(field, "train_counts"),
            other => panic!("unexpected {other:?}"),
        }
        let mut layout = non_iid();
        layout.val_counts[2] = MAX_CASES + 1;
        assert!(matches!(layout.validate(), Err(DataError::Schema { field: "val_counts", .. })));
    }

    #[test]
    fn layout_file_parses_non_iid_extremes() {
        let text = r#"
site_count = 8
train_counts = [48, 36, 28, 24, 20, 16, 16, 12]
val_counts = [10, 7, 6, 5, 4, 3, 3, 2]
test_count = 100
seed = 11
[skew]
kind = "quantity"
"#;
        let layout = parse_layout(text, Path::new("inline")).unwrap();
        assert_eq!(layout.train_counts[0], 48);
        assert_eq!(layout.train_counts[7], 12);
        assert_eq!(layout.skew, Skew::Quantity);
        assert_eq!(layout.task, Task::default());

        let bad = text.replace("[48, 36, 28, 24, 20, 16, 16, 12]", "[48, 12]");
        let err = parse_layout(&bad, Path::new("inline")).unwrap_err().to_string();
        assert!(err.contains("train_counts"), "{err}");
        let typo = text.replace("test_count", "test_cnt");
        let err = parse_layout(&typo, Path::new("inline")).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }

    fn cases(n: usize) -> LabeledDataset {
        LabeledDataset::new(1, (0..n).map(|i| i as f64).collect(), Labels::Classes(vec![0; n])).unwrap()
    }

    #[test]
    fn split_counts() {
        let (a, b, c) = split_site_data(&cases(10), (0.7, 0.1, 0.2), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
        let (a, b, c) = split_site_data(&cases(3), (0.7, 0.1, 0.2), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1, 1, 1));
        assert!(matches!(split_site_data(&cases(2), (0.7, 0.1, 0.2), 1), Err(DataError::TooFewCases(2))));
        assert!(split_site_data(&cases(10), (0.7, 0.1, 0.1), 1).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        for n in 3..60 {
            let (a, b, c) = split_site_data(&cases(n), (0.7, 0.1, 0.2), n as u64).unwrap();
            let mut all: Vec<f64> = [a, b, c].iter().flat_map(|d| d.features().to_vec()).collect();
            all.sort_by(f64::total_cmp);
            assert_eq!(all, (0..n).map(|i| i as f64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let mut layout = non_iid();
        layout.skew = Skew::Feature { shift: vec![0.5; 8] };
        let fed = generate_federation(&layout).unwrap();
        export_dataset(&fed, dir.path()).unwrap();
        assert_eq!(import_dataset(dir.path()).unwrap(), fed);

        let mut reg = FederationLayout::iid(2, 10, 4, 5, 2);
        reg.task = Task::Regression { input_dim: 3, noise: 0.1 };
        let fed = generate_federation(&reg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&fed, dir.path()).unwrap();
        assert_eq!(import_dataset(dir.path()).unwrap(), fed);
    }
}
