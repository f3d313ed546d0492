//! Synthetic two-moons benchmark, CSV ingestion and z-scoring.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Informative features per moon coordinate.
pub const BLOCK_SIZE: usize = 5;
pub const MIN_SYNTHETIC_FEATURES: usize = 2 * BLOCK_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub rho: f64,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
    pub true_groups: Option<Vec<Vec<usize>>>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>) -> Self {
        let feature_names = (0..x.ncols()).map(|j| format!("f{j}")).collect();
        Self { x, labels: None, true_groups: None, feature_names }
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn linspace_pi(m: usize) -> impl Iterator<Item = f64> {
    (0..m).map(move |i| if m > 1 { PI * i as f64 / (m - 1) as f64 } else { 0.0 })
}

/// Interleaved half circles before standardization: the outer arc
/// `(cos t, sin t)` and the inner arc `(1 - cos t, 0.5 - sin t)`, shuffled,
/// plus isotropic Gaussian noise.
pub fn two_moons_raw<R: Rng + ?Sized>(n: usize, noise_std: f64, rng: &mut R) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if n < 4 {
        return Err(invalid(format!("two moons needs at least 4 samples, got {n}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(invalid("moons noise std must be finite and nonnegative"));
    }
    let n_out = n / 2;
    let n_in = n - n_out;
    let mut points: Vec<(f64, f64, usize)> = Vec::with_capacity(n);
    points.extend(linspace_pi(n_out).map(|t| (t.cos(), t.sin(), 0)));
    points.extend(linspace_pi(n_in).map(|t| (1.0 - t.cos(), 1.0 - t.sin() - 0.5, 1)));
    points.shuffle(rng);
    let mut x = DMatrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for (i, (a, b, l)) in points.into_iter().enumerate() {
        x[(i, 0)] = a + noise_std * gaussian(rng);
        x[(i, 1)] = b + noise_std * gaussian(rng);
        labels.push(l);
    }
    Ok((x, labels))
}

/// Two moons with each coordinate standardized.
pub fn two_moons<R: Rng + ?Sized>(n: usize, noise_std: f64, rng: &mut R) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let (x, labels) = two_moons_raw(n, noise_std, rng)?;
    Ok((zscore(&x).0, labels))
}

/// Five noisy copies of each moon coordinate, `sqrt(rho) x + sqrt(1 - rho) e`,
/// followed by `d - 10` standard normal features.
pub fn extend_moons<R: Rng + ?Sized>(base: &DMatrix<f64>, d: usize, rho: f64, rng: &mut R) -> Result<Dataset> {
    if base.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            context: "extend_moons",
            expected: "2 base coordinates".into(),
            got: format!("{}", base.ncols()),
        });
    }
    if d < MIN_SYNTHETIC_FEATURES {
        return Err(invalid(format!("synthetic data needs d >= {MIN_SYNTHETIC_FEATURES}, got {d}")));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(invalid(format!("rho must lie in (0, 1], got {rho}")));
    }
    let n = base.nrows();
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let mut x = DMatrix::zeros(n, d);
    for j in 0..d {
        let source = j / BLOCK_SIZE;
        for i in 0..n {
            let e = gaussian(rng);
            x[(i, j)] = if source < 2 { a * base[(i, source)] + b * e } else { e };
        }
    }
    let true_groups = vec![(0..BLOCK_SIZE).collect(), (BLOCK_SIZE..2 * BLOCK_SIZE).collect()];
    Ok(Dataset { true_groups: Some(true_groups), ..Dataset::new(x) })
}

/// The full synthetic benchmark; not z-scored.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (base, labels) = two_moons(spec.n, spec.noise_std, &mut rng)?;
    let mut ds = extend_moons(&base, spec.d, spec.rho, &mut rng)?;
    ds.labels = Some(labels);
    Ok(ds)
}

/// Column-wise standardization with population std. Constant columns become
/// zero; their indices are returned.
pub fn zscore(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let mut out = x.clone();
    let mut constant = Vec::new();
    let n = x.nrows() as f64;
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / n).sqrt();
        if sd > 1e-12 * mean.abs().max(1.0) {
            col /= sd;
        } else {
            col.fill(0.0);
            constant.push(j);
        }
    }
    if !constant.is_empty() {
        log::warn!("constant columns left at zero after z-scoring: {constant:?}");
    }
    (out, constant)
}

/// Pearson correlation between two columns.
pub fn column_correlation(x: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    let (u, v) = (x.column(a), x.column(b));
    let (mu, mv) = (u.mean(), v.mean());
    let uc = u.add_scalar(-mu);
    let vc = v.add_scalar(-mv);
    uc.dot(&vc) / (uc.norm() * vc.norm())
}

/// Numeric CSV with a header row. `label_column` names a column whose values
/// are label-encoded in order of first appearance.
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let label_idx = match label_column {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| invalid(format!("label column {name:?} not found in header")))?,
        ),
        None => None,
    };
    let feature_names: Vec<String> =
        header.iter().enumerate().filter(|(j, _)| Some(*j) != label_idx).map(|(_, h)| h.clone()).collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut codes: HashMap<String, usize> = HashMap::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(rows + 2, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::Parse {
                row: line,
                column: record.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            if Some(j) == label_idx {
                let next = codes.len();
                labels.push(*codes.entry(cell.to_string()).or_insert(next));
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                column: j + 1,
                message: format!("{cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row: line, column: j + 1, message: format!("{cell:?} is not finite") });
            }
            values.push(v);
        }
        rows += 1;
    }
    let x = DMatrix::from_row_slice(rows, feature_names.len(), &values);
    Ok(Dataset { x, labels: label_idx.map(|_| labels), true_groups: None, feature_names })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub labels: Option<Vec<usize>>,
    pub true_groups: Option<Vec<Vec<usize>>>,
}

/// Path of the JSON sidecar stored next to a dataset CSV.
pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("meta.json")
}

/// Writes the features as CSV and labels and groups into the sidecar.
pub fn write_dataset(ds: &Dataset, csv_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(&ds.feature_names)?;
    for row in ds.x.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    let side = Sidecar { labels: ds.labels.clone(), true_groups: ds.true_groups.clone() };
    let file = std::io::BufWriter::new(std::fs::File::create(sidecar_path(csv_path))?);
    serde_json::to_writer(file, &side)?;
    Ok(())
}

/// Loads a CSV and merges its sidecar when one exists.
pub fn read_dataset(csv_path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    let mut ds = load_csv(csv_path, label_column)?;
    let side_path = sidecar_path(csv_path);
    if side_path.exists() {
        let side: Sidecar = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(side_path)?))?;
        if let Some(l) = side.labels {
            if l.len() != ds.x.nrows() {
                return Err(Error::DimensionMismatch {
                    context: "sidecar labels",
                    expected: format!("{}", ds.x.nrows()),
                    got: format!("{}", l.len()),
                });
            }
            if ds.labels.is_none() {
                ds.labels = Some(l);
            }
        }
        if let Some(groups) = side.true_groups {
            if groups.iter().flatten().any(|&j| j >= ds.x.ncols()) {
                return Err(invalid("sidecar groups reference missing features"));
            }
            ds.true_groups = Some(groups);
        }
    }
    Ok(ds)
}
