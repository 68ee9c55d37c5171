//! Dense float64 tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] records every operation applied to the [`Var`] handles it hands
//! out. Calling [`Tape::backward`] on a scalar node walks the record in reverse
//! and accumulates gradients for every node that depends on a leaf created
//! with [`Tape::leaf`]. Tapes are cheap to build and are meant to be thrown
//! away after one forward/backward pass.
//!
//! ```
//! use warpada::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let y = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod tape;

pub use tape::{Gradients, OpKind, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    SizeMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },
    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },
    #[error("log of non-positive value {value}")]
    LogDomain { value: f64 },
    #[error("{op}: empty tensor")]
    Empty { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Row-major dense array of `f64`. Rank 0 (`shape == []`) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: element count must match the shape and every
    /// element must be finite.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let t = Self::from_parts(shape, data)?;
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(t)
    }

    /// Like [`Tensor::new`] but accepts non-finite values.
    pub fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::SizeMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from a row-major buffer. Panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix buffer length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::SizeMismatch {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Pins a closure to the higher-ranked signature expected by
/// [`finite_diff_check`], which closure inference cannot always find alone.
pub fn tape_fn<F>(f: F) -> F
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, TensorError>,
{
    f
}

/// Central-difference gradient check of a scalar function.
///
/// `f` receives a leaf variable holding `x` and must return a scalar node.
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let (analytic, numeric) = gradient_pair(&f, x, h)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Analytic (tape) and numeric (central difference) gradients of `f` at `x`.
pub fn gradient_pair<F>(f: &F, x: &Tensor, h: f64) -> Result<(Vec<f64>, Vec<f64>), TensorError>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, TensorError>,
{
    gradient_pair_on(Tape::new(), f, x, h)
}

/// As [`gradient_pair`], with the analytic pass run on `tape` (for example
/// one built by [`Tape::with_fault`]). Numeric passes always use clean tapes.
pub fn gradient_pair_on<F>(tape: Tape, f: &F, x: &Tensor, h: f64) -> Result<(Vec<f64>, Vec<f64>), TensorError>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let leaf = tape.leaf(x.clone());
    let out = f(leaf)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(leaf)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let v = f(tape.constant(t))?;
        v.item().ok_or_else(|| TensorError::NonScalarRoot(v.shape()))
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = eval(probe.clone())?;
        probe.data[i] = orig - h;
        let fm = eval(probe.clone())?;
        probe.data[i] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }
    Ok((analytic, numeric))
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-8)`: the worst coordinate error relative
/// to the gradient's overall scale. Unlike [`max_relative_error`] it is not
/// dominated by round-off on coordinates whose true value is zero.
pub fn scaled_max_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new([1], vec![f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
        let t = Tensor::new([2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rank(), 2);
        assert!(Tensor::scalar(1.0).is_scalar());
    }

    #[test]
    fn fd_check_of_sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -0.7, 0.1]);
        let err = finite_diff_check(|v| v.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn fd_check_of_square() {
        let x = Tensor::scalar(3.0);
        let (a, n) = gradient_pair(&|v: Var<'_>| v.mul(v), &x, 1e-5).unwrap();
        assert_eq!(a, vec![6.0]);
        assert!((n[0] - 6.0).abs() < 1e-9);
    }
}
