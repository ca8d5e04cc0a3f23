//! Datasets: synthetic 1-D regression, Gaussian blobs, and IDX image files.
//!
//! A data spec string is `kind:key=value,key=value`, for example
//! `regression:n=4,grid=true,test=0` or `blobs:n=1250,classes=2,seed=3`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::net::{Shape, Tensor4, Value};
use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad data spec: {0}")]
    Spec(String),
    #[error("bad data file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification { classes: usize },
}

/// Samples are columns of `x` and `y`; for classification `y` is one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Value,
    pub y: Matrix,
    pub labels: Option<Vec<usize>>,
    pub task: Task,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.n_samples()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_shape(&self) -> Shape {
        self.x.sample_shape()
    }

    pub fn output_dim(&self) -> usize {
        self.y.nrows()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(idx),
            y: self.y.select_columns(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            task: self.task,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Target functions for the synthetic regression task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Target {
    /// `2 sin(x) + x`
    #[default]
    TwoSinPlusX,
    Sin,
    Linear,
}

impl Target {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "2sinx+x" | "two_sin_plus_x" => Some(Target::TwoSinPlusX),
            "sin" => Some(Target::Sin),
            "linear" | "x" => Some(Target::Linear),
            _ => None,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Target::TwoSinPlusX => 2.0 * x.sin() + x,
            Target::Sin => x.sin(),
            Target::Linear => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    /// `n` inputs in `[0, 2 pi)`, on the grid `2 pi i / n` or drawn uniformly.
    Regression { n: usize, grid: bool, target: Target, seed: u64, test: f64 },
    /// Isotropic Gaussian clusters with centers on a circle of radius `sep`
    /// in the first two coordinates.
    Blobs { n: usize, classes: usize, dim: usize, std: f64, sep: f64, seed: u64, test: f64 },
    Idx { images: PathBuf, labels: PathBuf, test_images: Option<PathBuf>, test_labels: Option<PathBuf>, spatial: bool },
}

fn kv(body: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for part in body.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| DataError::Spec(format!("expected key=value, got {part:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn take<T: std::str::FromStr>(m: &mut BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match m.remove(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| DataError::Spec(format!("cannot parse {key}={v}"))),
    }
}

impl DataSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, body) = s.split_once(':').unwrap_or((s, ""));
        let mut m = kv(body)?;
        let spec = match kind.trim() {
            "regression" => {
                let t: String = take(&mut m, "target", "2sinx+x".to_string())?;
                DataSpec::Regression {
                    n: take(&mut m, "n", 4)?,
                    grid: take(&mut m, "grid", true)?,
                    target: Target::parse(&t).ok_or_else(|| DataError::Spec(format!("unknown target {t}")))?,
                    seed: take(&mut m, "seed", 0)?,
                    test: take(&mut m, "test", 0.2)?,
                }
            }
            "blobs" => DataSpec::Blobs {
                n: take(&mut m, "n", 1250)?,
                classes: take(&mut m, "classes", 2)?,
                dim: take(&mut m, "dim", 2)?,
                std: take(&mut m, "std", 1.0)?,
                sep: take(&mut m, "sep", 3.0)?,
                seed: take(&mut m, "seed", 0)?,
                test: take(&mut m, "test", 0.2)?,
            },
            "idx" => {
                let images: String = take(&mut m, "images", String::new())?;
                let labels: String = take(&mut m, "labels", String::new())?;
                if images.is_empty() || labels.is_empty() {
                    return Err(DataError::Spec("idx needs images= and labels=".into()));
                }
                let ti: String = take(&mut m, "test_images", String::new())?;
                let tl: String = take(&mut m, "test_labels", String::new())?;
                DataSpec::Idx {
                    images: images.into(),
                    labels: labels.into(),
                    test_images: (!ti.is_empty()).then(|| ti.into()),
                    test_labels: (!tl.is_empty()).then(|| tl.into()),
                    spatial: take(&mut m, "spatial", false)?,
                }
            }
            other => return Err(DataError::Spec(format!("unknown dataset kind {other:?}"))),
        };
        if let Some(k) = m.keys().next() {
            return Err(DataError::Spec(format!("unknown key {k:?} for {}", kind.trim())));
        }
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let test = match self {
            DataSpec::Regression { n, test, .. } => {
                if *n == 0 {
                    return Err(DataError::Spec("regression needs n >= 1".into()));
                }
                *test
            }
            DataSpec::Blobs { n, classes, dim, std, .. } => {
                if *n == 0 || *classes < 2 || *dim < 2 || !(*std > 0.0) {
                    return Err(DataError::Spec("blobs need n >= 1, classes >= 2, dim >= 2, std > 0".into()));
                }
                0.2
            }
            DataSpec::Idx { .. } => 0.2,
        };
        if !(0.0..1.0).contains(&test) {
            return Err(DataError::Spec(format!("test fraction must lie in [0, 1), got {test}")));
        }
        Ok(())
    }
}

/// Seeded shuffle into `(1 - frac)` train and `frac` test.
pub fn split(data: &Dataset, frac: f64, seed: u64) -> Split {
    let n = data.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let n_test = (frac * n as f64).round() as usize;
    if n_test == 0 {
        return Split { train: data.clone(), test: data.select(&[]) };
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B17));
    let (te, tr) = idx.split_at(n_test);
    let (mut tr, mut te) = (tr.to_vec(), te.to_vec());
    tr.sort_unstable();
    te.sort_unstable();
    Split { train: data.select(&tr), test: data.select(&te) }
}

pub fn gen_synthetic_regression(n: usize, grid: bool, target: Target, seed: u64) -> Dataset {
    let xs: Vec<f64> = if grid {
        (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rand::Rng::random_range(&mut rng, 0.0..2.0 * PI)).collect()
    };
    Dataset {
        x: Value::Flat(Matrix::from_row_slice(1, n, &xs)),
        y: Matrix::from_iterator(1, n, xs.iter().map(|&x| target.eval(x))),
        labels: None,
        task: Task::Regression,
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut y = Matrix::zeros(classes, labels.len());
    for (i, &l) in labels.iter().enumerate() {
        y[(l, i)] = 1.0;
    }
    y
}

pub fn gen_blobs(n: usize, classes: usize, dim: usize, std: f64, sep: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let x = Matrix::from_fn(dim, n, |r, i| {
        let angle = 2.0 * PI * labels[i] as f64 / classes as f64;
        let center = match r {
            0 => sep * angle.cos(),
            1 => sep * angle.sin(),
            _ => 0.0,
        };
        let z: f64 = StandardNormal.sample(&mut rng);
        center + std * z
    });
    Dataset { x: Value::Flat(x), y: one_hot(&labels, classes), labels: Some(labels), task: Task::Classification { classes } }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format { path: path.to_path_buf(), reason: "truncated header".into() })
}

/// Parse an IDX image file (magic `0x00000803`): `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0000_0803 {
        return Err(DataError::Format { path: path.to_path_buf(), reason: format!("bad image magic {magic:#010x}") });
    }
    let (n, r, c) = (be_u32(bytes, 4, path)? as usize, be_u32(bytes, 8, path)? as usize, be_u32(bytes, 12, path)? as usize);
    let body = &bytes[16..];
    if body.len() != n * r * c {
        return Err(DataError::Format { path: path.to_path_buf(), reason: format!("expected {} pixel bytes, found {}", n * r * c, body.len()) });
    }
    Ok((n, r, c, body.to_vec()))
}

/// Parse an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0000_0801 {
        return Err(DataError::Format { path: path.to_path_buf(), reason: format!("bad label magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(DataError::Format { path: path.to_path_buf(), reason: format!("expected {n} labels, found {}", body.len()) });
    }
    Ok(body.to_vec())
}

/// Load an IDX image/label pair. Pixels are scaled to `[0, 1]`; `spatial`
/// keeps them as `1 x rows x cols` images instead of flat vectors.
pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>, spatial: bool) -> Result<Dataset> {
    let (n, r, c, px) = parse_idx_images(&read(images)?, images)?;
    let lab = parse_idx_labels(&read(labels)?, labels)?;
    if lab.len() != n {
        return Err(DataError::Format { path: labels.to_path_buf(), reason: format!("{} labels for {n} images", lab.len()) });
    }
    let labels: Vec<usize> = lab.iter().map(|&l| l as usize).collect();
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1)).max(2);
    let x = if spatial {
        Value::Spatial(Tensor4 { n, c: 1, h: r, w: c, data: px.iter().map(|&p| p as f64 / 255.0).collect() })
    } else {
        Value::Flat(Matrix::from_fn(r * c, n, |p, i| px[i * r * c + p] as f64 / 255.0))
    };
    Ok(Dataset { x, y: one_hot(&labels, k), labels: Some(labels), task: Task::Classification { classes: k } })
}

/// Materialize a spec; `seed` drives the train/test shuffle.
pub fn load(spec: &DataSpec, seed: u64) -> Result<Split> {
    match spec {
        DataSpec::Regression { n, grid, target, seed: s, test } => Ok(split(&gen_synthetic_regression(*n, *grid, *target, *s), *test, seed)),
        DataSpec::Blobs { n, classes, dim, std, sep, seed: s, test } => Ok(split(&gen_blobs(*n, *classes, *dim, *std, *sep, *s), *test, seed)),
        DataSpec::Idx { images, labels, test_images, test_labels, spatial } => {
            let train = load_idx(images, labels, None, *spatial)?;
            match (test_images, test_labels) {
                (Some(ti), Some(tl)) => {
                    let classes = match train.task {
                        Task::Classification { classes } => classes,
                        Task::Regression => unreachable!(),
                    };
                    let test = load_idx(ti, tl, Some(classes), *spatial)?;
                    Ok(Split { train, test })
                }
                _ => Ok(split(&train, 0.2, seed)),
            }
        }
    }
}
