//! Empirical measures as weighted particle clouds.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::mechanism::{Mechanism, MechanismError};
use crate::rng::{substream, DOMAIN_INIT};

/// Tolerance on `Σ w = 1` for a constructed cloud.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Weight drift above which a file-backed cloud triggers a warning on renormalisation.
const WEIGHT_DRIFT_WARN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("a particle cloud needs at least one particle")]
    Empty,
    #[error("points have {points} rows but weights have {weights} entries")]
    ShapeMismatch { points: usize, weights: usize },
    #[error("non-finite coordinate in row {row}")]
    NonFinite { row: usize },
    #[error("negative or non-finite weight in row {row}")]
    BadWeight { row: usize },
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A weighted point set `Σ_i w_i δ_{x_i}` with `Σ_i w_i = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    points: Array2<f64>,
    weights: Array1<f64>,
}

impl ParticleCloud {
    pub fn new(points: Array2<f64>, weights: Array1<f64>) -> Result<Self, MeasureError> {
        Self::check(&points, &weights)?;
        let sum = weights.sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(MeasureError::WeightSum(sum));
        }
        Ok(Self { points, weights })
    }

    /// Normalises `raw` to unit mass.
    pub fn from_unnormalized(points: Array2<f64>, raw: Array1<f64>) -> Result<Self, MeasureError> {
        Self::check(&points, &raw)?;
        let sum = raw.sum();
        if !(sum > 0.0) {
            return Err(MeasureError::WeightSum(sum));
        }
        let weights = raw / sum;
        Ok(Self { points, weights })
    }

    pub fn uniform(points: Array2<f64>) -> Result<Self, MeasureError> {
        let n = points.nrows();
        if n == 0 {
            return Err(MeasureError::Empty);
        }
        let weights = Array1::from_elem(n, 1.0 / n as f64);
        Self::check(&points, &weights)?;
        Ok(Self { points, weights })
    }

    fn check(points: &Array2<f64>, weights: &Array1<f64>) -> Result<(), MeasureError> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(MeasureError::Empty);
        }
        if points.nrows() != weights.len() {
            return Err(MeasureError::ShapeMismatch { points: points.nrows(), weights: weights.len() });
        }
        if let Some(row) = points.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(MeasureError::NonFinite { row });
        }
        if let Some(row) = weights.iter().position(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(MeasureError::BadWeight { row });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    /// Same weights, new positions. Positions must keep the shape and be finite.
    pub fn with_points(&self, points: Array2<f64>) -> Result<Self, MeasureError> {
        if points.dim() != self.points.dim() {
            return Err(MeasureError::ShapeMismatch { points: points.nrows(), weights: self.len() });
        }
        if let Some(row) = points.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(MeasureError::NonFinite { row });
        }
        Ok(Self { points, weights: self.weights.clone() })
    }

    /// `Φ#μ`: positions mapped through `m`, weights unchanged.
    pub fn pushforward(&self, m: &Mechanism) -> Result<Self, MeasureError> {
        let points = m.apply_rows(self.points.view())?;
        self.with_points(points)
    }

    pub fn center_of_mass(&self) -> Array1<f64> {
        self.weights.dot(&self.points)
    }

    /// `Σ w_i ‖x_i − COM‖²`, the trace of the weighted covariance.
    pub fn total_variance(&self) -> f64 {
        let com = self.center_of_mass();
        self.points
            .outer_iter()
            .zip(self.weights.iter())
            .map(|(x, w)| w * (&x - &com).mapv(|d| d * d).sum())
            .sum()
    }

    /// Reads a CSV cloud with header `x0,...,x{D-1}[,w]`. An explicit weight
    /// column is renormalised to unit mass.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, MeasureError> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut dim = 0;
        for (col, h) in headers.iter().enumerate() {
            if h == format!("x{col}") {
                dim += 1;
            } else {
                break;
            }
        }
        let has_weight = match headers.len() - dim {
            0 => false,
            1 if headers.get(dim) == Some("w") => true,
            _ => {
                return Err(MeasureError::Parse {
                    row: 0,
                    column: dim,
                    message: format!("expected header x0,...,x{{D-1}}[,w], got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
                })
            }
        };
        if dim == 0 {
            return Err(MeasureError::Parse { row: 0, column: 0, message: "no coordinate columns".into() });
        }
        let width = dim + usize::from(has_weight);
        let mut coords = Vec::new();
        let mut raw_weights = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let row = i + 1;
            let record = record?;
            if record.len() != width {
                return Err(MeasureError::Parse {
                    row,
                    column: record.len().min(width),
                    message: format!("expected {width} columns, found {}", record.len()),
                });
            }
            for (column, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|e| MeasureError::Parse {
                    row,
                    column,
                    message: format!("`{field}`: {e}"),
                })?;
                if column < dim {
                    coords.push(v);
                } else {
                    raw_weights.push(v);
                }
            }
        }
        let n = coords.len() / dim;
        if n == 0 {
            return Err(MeasureError::Empty);
        }
        let points = Array2::from_shape_vec((n, dim), coords).expect("row widths checked");
        if has_weight {
            let raw = Array1::from(raw_weights);
            let sum = raw.sum();
            if (sum - 1.0).abs() > WEIGHT_DRIFT_WARN {
                log::warn!("cloud weights sum to {sum}; renormalising");
            }
            Self::from_unnormalized(points, raw)
        } else {
            Self::uniform(points)
        }
    }

    /// Writes the cloud as CSV at 17 significant digits, with a weight column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MeasureError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|k| format!("x{k}")).collect();
        header.push("w".into());
        wtr.write_record(&header)?;
        for (x, w) in self.points.outer_iter().zip(self.weights.iter()) {
            let mut rec: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(format!("{w:.16e}"));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `n` i.i.d. draws from `N(mean, diag(cov_diag))` with uniform weights.
pub fn sample_gaussian(mean: &[f64], cov_diag: &[f64], n: usize, seed: u64) -> Result<ParticleCloud, MeasureError> {
    let mut rng = substream(seed, DOMAIN_INIT, 0, 0);
    sample_gaussian_with(&mut rng, mean, cov_diag, n)
}

pub fn sample_gaussian_with<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &[f64],
    cov_diag: &[f64],
    n: usize,
) -> Result<ParticleCloud, MeasureError> {
    if n == 0 || mean.is_empty() {
        return Err(MeasureError::Empty);
    }
    if mean.len() != cov_diag.len() {
        return Err(MeasureError::ShapeMismatch { points: mean.len(), weights: cov_diag.len() });
    }
    if let Some(k) = cov_diag.iter().position(|c| !(*c >= 0.0 && c.is_finite())) {
        return Err(MeasureError::Parse { row: 0, column: k, message: "covariance must be >= 0".into() });
    }
    let sd: Vec<f64> = cov_diag.iter().map(|c| c.sqrt()).collect();
    let d = mean.len();
    let mut points = Array2::zeros((n, d));
    for mut row in points.axis_iter_mut(Axis(0)) {
        for k in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            row[k] = mean[k] + sd[k] * z;
        }
    }
    ParticleCloud::uniform(points)
}

pub fn load_cloud(path: &Path) -> Result<ParticleCloud, MeasureError> {
    ParticleCloud::read_csv(std::fs::File::open(path)?)
}

pub fn store_cloud(cloud: &ParticleCloud, path: &Path) -> Result<(), MeasureError> {
    cloud.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn gaussian_com_within_clt_bound() {
        let c = sample_gaussian(&[8.0, 0.0], &[1.0, 1.0], 300, 7).unwrap();
        let com = c.center_of_mass();
        let bound = 3.0 / 300f64.sqrt();
        assert!((com[0] - 8.0).abs() < bound && com[1].abs() < bound, "{com}");
        assert!(c.weights().iter().all(|&w| w == 1.0 / 300.0));
    }

    #[test]
    fn degenerate_gaussian_is_a_point() {
        let c = sample_gaussian(&[1.5, -2.0], &[0.0, 0.0], 10, 1).unwrap();
        assert!(c.points().outer_iter().all(|r| r == array![1.5, -2.0]));
        assert!(c.total_variance() < 1e-24);
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_gaussian(&[0.0, 0.0], &[1.0, 1.0], 50, 99).unwrap();
        let b = sample_gaussian(&[0.0, 0.0], &[1.0, 1.0], 50, 99).unwrap();
        assert_eq!(a, b);
        assert!(matches!(sample_gaussian(&[0.0], &[1.0], 0, 1), Err(MeasureError::Empty)));
    }

    #[test]
    fn statistics() {
        let c = ParticleCloud::uniform(array![[0.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(c.center_of_mass(), array![1.0, 0.0]);
        let c = ParticleCloud::uniform(array![[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(c.total_variance(), 1.0);
        let single = ParticleCloud::uniform(array![[3.0, 4.0]]).unwrap();
        assert_eq!(single.center_of_mass(), array![3.0, 4.0]);
        let g = sample_gaussian(&[0.0, 0.0], &[1.0, 1.0], 2000, 5).unwrap();
        assert!((g.total_variance() - 2.0).abs() < 0.1);
    }

    #[test]
    fn pushforward_shift() {
        let c = ParticleCloud::uniform(array![[0.0, 0.0]]).unwrap();
        let p = c.pushforward(&Mechanism::shift(&[4.0, -4.0])).unwrap();
        assert_eq!(p.points().row(0), array![4.0, -4.0]);
        let g = sample_gaussian(&[0.0, 0.0], &[1.0, 1.0], 20, 2).unwrap();
        assert_eq!(g.pushforward(&Mechanism::identity(2)).unwrap(), g);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let c = sample_gaussian(&[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0], 40, 3).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = ParticleCloud::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn csv_missing_column_names_row() {
        let text = "x0,x1\n1.0,2.0\n3.0\n";
        match ParticleCloud::read_csv(text.as_bytes()) {
            Err(MeasureError::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        let text = "x0,x1\n1.0,abc\n";
        assert!(matches!(
            ParticleCloud::read_csv(text.as_bytes()),
            Err(MeasureError::Parse { row: 1, column: 1, .. })
        ));
    }

    #[test]
    fn csv_weights_are_renormalised() {
        let text = "x0,w\n0.0,2\n1.0,6\n";
        let c = ParticleCloud::read_csv(text.as_bytes()).unwrap();
        assert_eq!(c.weights(), array![0.25, 0.75]);
    }

    proptest! {
        #[test]
        fn shift_equivariance(seed in 0u64..1000, bx in -10.0f64..10.0, by in -10.0f64..10.0) {
            let c = sample_gaussian(&[0.0, 1.0], &[1.0, 0.5], 25, seed).unwrap();
            let m = Mechanism::shift(&[bx, by]);
            let p = c.pushforward(&m).unwrap();
            prop_assert_eq!(p.weights(), c.weights());
            let expected = c.center_of_mass() + array![bx, by];
            let com = p.center_of_mass();
            prop_assert!((com[0] - expected[0]).abs() < 1e-12 && (com[1] - expected[1]).abs() < 1e-12);
            prop_assert!((p.total_variance() - c.total_variance()).abs() < 1e-9 * (1.0 + c.total_variance()));
        }
    }
}
