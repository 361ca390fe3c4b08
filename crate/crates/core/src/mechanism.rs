//! Deterministic structural mechanisms attached to graph edges.
//!
//! Mechanisms are declared in configuration as a [`MechanismSpec`] and compiled
//! into a [`Mechanism`], which evaluates the map, its Jacobian, and the
//! vector-Jacobian and Jacobian-vector products analytically.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::spectral_norm_estimate;

/// Power iterations used to bound the residual branch of a smooth residual map.
const NORM_ITERS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid mechanism: {0}")]
    Invalid(String),
}

/// Declarative form of a mechanism, as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MechanismSpec {
    /// `x ↦ x + b`
    Shift { b: Vec<f64> },
    /// `x ↦ A x + b`, with `A` given row-major as `D_out` rows of length `D_in`.
    Affine { a: Vec<Vec<f64>>, b: Vec<f64> },
    /// `x ↦ x + W2 tanh(W1 x + b1)` with the residual branch capped to
    /// Lipschitz constant `scale < 1`.
    SmoothResidual {
        w1: Vec<Vec<f64>>,
        w2: Vec<Vec<f64>>,
        b1: Vec<f64>,
        scale: f64,
    },
    /// Applies `parts` left to right.
    Composite { parts: Vec<MechanismSpec> },
}

/// Residual block `x + W2 tanh(W1 x + b1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothResidual {
    w1: Array2<f64>,
    w2: Array2<f64>,
    b1: Array1<f64>,
    scale: f64,
}

impl SmoothResidual {
    /// Builds the block, rescaling `W2` whenever the estimated bound
    /// `‖W1‖·‖W2‖` exceeds `scale`.
    pub fn new(w1: Array2<f64>, w2: Array2<f64>, b1: Array1<f64>, scale: f64) -> Result<Self, MechanismError> {
        if !(0.0..1.0).contains(&scale) {
            return Err(MechanismError::Invalid(format!(
                "smooth residual scale must lie in [0, 1), got {scale}"
            )));
        }
        let (h, d) = w1.dim();
        if w2.dim() != (d, h) {
            return Err(MechanismError::Invalid(format!(
                "w2 must be {d}x{h} to match w1 ({h}x{d}), got {:?}",
                w2.dim()
            )));
        }
        if b1.len() != h {
            return Err(MechanismError::DimMismatch { expected: h, got: b1.len() });
        }
        if d == 0 {
            return Err(MechanismError::Invalid("smooth residual needs dim >= 1".into()));
        }
        let bound = spectral_norm_estimate(&w1, NORM_ITERS) * spectral_norm_estimate(&w2, NORM_ITERS);
        let w2 = if bound > scale { w2 * (scale / bound) } else { w2 };
        Ok(Self { w1, w2, b1, scale })
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn pre_activation(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w1.t());
        z += &self.b1;
        z
    }
}

/// A compiled, validated mechanism `Φ: R^{D_in} → R^{D_out}`.
#[derive(Debug, Clone, PartialEq)]
pub enum Mechanism {
    Shift(Array1<f64>),
    Affine { a: Array2<f64>, b: Array1<f64> },
    SmoothResidual(SmoothResidual),
    Composite(Vec<Mechanism>),
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>, MechanismError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(MechanismError::Invalid(format!("{what} must be a non-empty matrix")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(MechanismError::Invalid(format!("{what} has ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(MechanismError::Invalid(format!("{what} has non-finite entries")));
    }
    Ok(Array2::from_shape_vec((nrows, ncols), flat).expect("shape checked"))
}

fn finite_vector(v: &[f64], what: &str) -> Result<Array1<f64>, MechanismError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(MechanismError::Invalid(format!("{what} has non-finite entries")));
    }
    Ok(Array1::from(v.to_vec()))
}

impl TryFrom<&MechanismSpec> for Mechanism {
    type Error = MechanismError;

    fn try_from(spec: &MechanismSpec) -> Result<Self, Self::Error> {
        match spec {
            MechanismSpec::Shift { b } => {
                if b.is_empty() {
                    return Err(MechanismError::Invalid("shift vector is empty".into()));
                }
                Ok(Mechanism::Shift(finite_vector(b, "shift")?))
            }
            MechanismSpec::Affine { a, b } => {
                let a = matrix_from_rows(a, "affine matrix")?;
                if b.len() != a.nrows() {
                    return Err(MechanismError::DimMismatch { expected: a.nrows(), got: b.len() });
                }
                Ok(Mechanism::Affine { a, b: finite_vector(b, "affine offset")? })
            }
            MechanismSpec::SmoothResidual { w1, w2, b1, scale } => Ok(Mechanism::SmoothResidual(SmoothResidual::new(
                matrix_from_rows(w1, "w1")?,
                matrix_from_rows(w2, "w2")?,
                finite_vector(b1, "b1")?,
                *scale,
            )?)),
            MechanismSpec::Composite { parts } => {
                if parts.is_empty() {
                    return Err(MechanismError::Invalid("composite has no parts".into()));
                }
                let parts = parts.iter().map(Mechanism::try_from).collect::<Result<Vec<_>, _>>()?;
                for pair in parts.windows(2) {
                    if pair[0].output_dim() != pair[1].input_dim() {
                        return Err(MechanismError::DimMismatch {
                            expected: pair[0].output_dim(),
                            got: pair[1].input_dim(),
                        });
                    }
                }
                Ok(Mechanism::Composite(parts))
            }
        }
    }
}

impl TryFrom<MechanismSpec> for Mechanism {
    type Error = MechanismError;

    fn try_from(spec: MechanismSpec) -> Result<Self, Self::Error> {
        Mechanism::try_from(&spec)
    }
}

impl Mechanism {
    pub fn identity(dim: usize) -> Self {
        Mechanism::Shift(Array1::zeros(dim))
    }

    pub fn shift(b: &[f64]) -> Self {
        Mechanism::Shift(Array1::from(b.to_vec()))
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Mechanism::Shift(b) => b.len(),
            Mechanism::Affine { a, .. } => a.ncols(),
            Mechanism::SmoothResidual(r) => r.dim(),
            Mechanism::Composite(parts) => parts[0].input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Mechanism::Shift(b) => b.len(),
            Mechanism::Affine { a, .. } => a.nrows(),
            Mechanism::SmoothResidual(r) => r.dim(),
            Mechanism::Composite(parts) => parts[parts.len() - 1].output_dim(),
        }
    }

    fn check_rows(&self, x: ArrayView2<f64>, expected: usize) -> Result<(), MechanismError> {
        if x.ncols() != expected {
            return Err(MechanismError::DimMismatch { expected, got: x.ncols() });
        }
        Ok(())
    }

    /// `Φ(x)` for a single point.
    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, MechanismError> {
        let rows = self.apply_rows(x.insert_axis(Axis(0)))?;
        Ok(rows.row(0).to_owned())
    }

    /// `Φ` applied to every row of `x` (an `N × D_in` point matrix).
    pub fn apply_rows(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, MechanismError> {
        self.check_rows(x, self.input_dim())?;
        Ok(self.apply_unchecked(x))
    }

    fn apply_unchecked(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Mechanism::Shift(b) => &x + b,
            Mechanism::Affine { a, b } => x.dot(&a.t()) + b,
            Mechanism::SmoothResidual(r) => {
                let t = r.pre_activation(x).mapv(f64::tanh);
                &x + &t.dot(&r.w2.t())
            }
            Mechanism::Composite(parts) => {
                let mut cur = parts[0].apply_unchecked(x);
                for p in &parts[1..] {
                    cur = p.apply_unchecked(cur.view());
                }
                cur
            }
        }
    }

    /// `J_Φ(x)ᵀ w` for a single point.
    pub fn vjp(&self, x: ArrayView1<f64>, w: ArrayView1<f64>) -> Result<Array1<f64>, MechanismError> {
        let out = self.vjp_rows(x.insert_axis(Axis(0)), w.insert_axis(Axis(0)))?;
        Ok(out.row(0).to_owned())
    }

    /// Row-wise `J_Φ(x_k)ᵀ w_k`.
    pub fn vjp_rows(&self, x: ArrayView2<f64>, w: ArrayView2<f64>) -> Result<Array2<f64>, MechanismError> {
        self.check_rows(x, self.input_dim())?;
        self.check_rows(w, self.output_dim())?;
        if x.nrows() != w.nrows() {
            return Err(MechanismError::DimMismatch { expected: x.nrows(), got: w.nrows() });
        }
        Ok(self.vjp_unchecked(x, w))
    }

    fn vjp_unchecked(&self, x: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Mechanism::Shift(_) => w.to_owned(),
            Mechanism::Affine { a, .. } => w.dot(a),
            Mechanism::SmoothResidual(r) => {
                let z = r.pre_activation(x);
                let mut s = w.dot(&r.w2);
                Zip::from(&mut s).and(&z).for_each(|si, &zi| {
                    let t = zi.tanh();
                    *si *= 1.0 - t * t;
                });
                &w + &s.dot(&r.w1)
            }
            Mechanism::Composite(parts) => {
                let mut inputs = Vec::with_capacity(parts.len());
                let mut cur = x.to_owned();
                for p in parts {
                    let next = p.apply_unchecked(cur.view());
                    inputs.push(cur);
                    cur = next;
                }
                let mut cot = w.to_owned();
                for (p, input) in parts.iter().zip(&inputs).rev() {
                    cot = p.vjp_unchecked(input.view(), cot.view());
                }
                cot
            }
        }
    }

    /// Row-wise `J_Φ(x_k) v_k`.
    pub fn jvp_rows(&self, x: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<Array2<f64>, MechanismError> {
        self.check_rows(x, self.input_dim())?;
        self.check_rows(v, self.input_dim())?;
        if x.nrows() != v.nrows() {
            return Err(MechanismError::DimMismatch { expected: x.nrows(), got: v.nrows() });
        }
        Ok(self.jvp_unchecked(x, v))
    }

    fn jvp_unchecked(&self, x: ArrayView2<f64>, v: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Mechanism::Shift(_) => v.to_owned(),
            Mechanism::Affine { a, .. } => v.dot(&a.t()),
            Mechanism::SmoothResidual(r) => {
                let z = r.pre_activation(x);
                let mut s = v.dot(&r.w1.t());
                Zip::from(&mut s).and(&z).for_each(|si, &zi| {
                    let t = zi.tanh();
                    *si *= 1.0 - t * t;
                });
                &v + &s.dot(&r.w2.t())
            }
            Mechanism::Composite(parts) => {
                let mut cur = x.to_owned();
                let mut tangent = v.to_owned();
                for p in parts {
                    tangent = p.jvp_unchecked(cur.view(), tangent.view());
                    cur = p.apply_unchecked(cur.view());
                }
                tangent
            }
        }
    }

    /// Analytic Jacobian `J_Φ(x)` (`D_out × D_in`).
    pub fn jacobian(&self, x: ArrayView1<f64>) -> Result<Array2<f64>, MechanismError> {
        let d_in = self.input_dim();
        if x.len() != d_in {
            return Err(MechanismError::DimMismatch { expected: d_in, got: x.len() });
        }
        let xs = x.insert_axis(Axis(0)).broadcast((d_in, d_in)).expect("broadcast").to_owned();
        let jt = self.jvp_unchecked(xs.view(), Array2::eye(d_in).view());
        Ok(jt.reversed_axes())
    }

    /// Central-difference Jacobian estimate with step `h`; a test oracle.
    pub fn jacobian_fd(&self, x: ArrayView1<f64>, h: f64) -> Result<Array2<f64>, MechanismError> {
        let d_in = self.input_dim();
        if x.len() != d_in {
            return Err(MechanismError::DimMismatch { expected: d_in, got: x.len() });
        }
        if !(h > 0.0) {
            return Err(MechanismError::Invalid(format!("finite-difference step must be positive, got {h}")));
        }
        let mut jac = Array2::zeros((self.output_dim(), d_in));
        for k in 0..d_in {
            let mut plus = x.to_owned();
            let mut minus = x.to_owned();
            plus[k] += h;
            minus[k] -= h;
            let diff = (self.apply(plus.view())? - self.apply(minus.view())?) / (2.0 * h);
            jac.slice_mut(s![.., k]).assign(&diff);
        }
        Ok(jac)
    }
}
