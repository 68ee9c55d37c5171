//! Warp paths from unconstrained parameters.
//!
//! `make_path` composes three maps, each enforcing one path condition:
//!
//! 1. [`h1_monotone`]: shift the parameters so the smallest is zero and take
//!    the running sum, giving a nondecreasing curve.
//! 2. [`h2_boundary`]: rescale that curve onto `[0, N−1]` and subtract the
//!    index, so the first and last displacement are zero.
//! 3. [`h3_clip`]: shrink the whole path uniformly until its largest
//!    displacement is at most `phi_max`.
//!
//! Since `h3` only ever scales by `s ≤ 1`, `i + s·δ_i = (1−s)·i + s·w_i` is a
//! blend of two nondecreasing sequences and stays monotone.

use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Below this range the cumulative curve is treated as a straight line.
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// Slack used when checking path conditions on floating-point output.
pub const PATH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WarpError {
    #[error("warp parameters need at least 2 entries, got {0}")]
    TooShort(usize),
    #[error("phi_max must be positive, got {0}")]
    NonPositivePhiMax(f64),
    #[error("phi_max {phi_max} leaves no headroom in a window of half-width {half_width} (limit {limit})")]
    PhiMaxTooLarge {
        phi_max: f64,
        half_width: usize,
        limit: f64,
    },
    #[error("warp parameters must be finite")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Free perturbation parameters, one per time index.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpParams {
    pub phi: Tensor,
}

impl WarpParams {
    pub fn new(phi: Vec<f64>) -> Result<Self, WarpError> {
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(WarpError::NonFinite);
        }
        Ok(Self {
            phi: Tensor::vector(phi),
        })
    }
}

/// Displacement of each index: warped position minus original position.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpPath {
    pub displacements: Vec<f64>,
}

/// A violated path condition, as reported by [`WarpPath::check`].
#[derive(Debug, Clone, PartialEq)]
pub enum PathViolation {
    NotMonotone { index: usize },
    Boundary { start: f64, end: f64 },
    TooFar { index: usize, value: f64 },
}

impl WarpPath {
    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.displacements.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Checks monotonicity of `i + δ_i`, zero boundary displacements and
    /// `‖δ‖∞ ≤ phi_max`, each within [`PATH_TOLERANCE`].
    pub fn check(&self, phi_max: f64) -> Result<(), PathViolation> {
        let d = &self.displacements;
        if let Some(index) = (1..d.len()).find(|&i| i as f64 + d[i] < (i - 1) as f64 + d[i - 1] - PATH_TOLERANCE) {
            return Err(PathViolation::NotMonotone { index });
        }
        if let (Some(&start), Some(&end)) = (d.first(), d.last()) {
            if start.abs() > PATH_TOLERANCE || end.abs() > PATH_TOLERANCE {
                return Err(PathViolation::Boundary { start, end });
            }
        }
        if let Some((index, &value)) = d
            .iter()
            .enumerate()
            .find(|(_, v)| v.abs() > phi_max + PATH_TOLERANCE)
        {
            return Err(PathViolation::TooFar { index, value });
        }
        Ok(())
    }

    /// Nearest whole-sample path. Rounding keeps all three conditions when
    /// `phi_max` is a whole number.
    pub fn rounded(&self) -> WarpPath {
        WarpPath {
            displacements: self.displacements.iter().map(|v| v.round()).collect(),
        }
    }
}

/// Running sum of `phi − min(phi)`.
pub fn h1_monotone(phi: Var<'_>) -> Result<Var<'_>, WarpError> {
    let n = phi.value().len();
    if n < 2 {
        return Err(WarpError::TooShort(n));
    }
    let increments = phi.sub(phi.min_reduce()?)?;
    Ok(increments.cumsum()?)
}

/// Maps a nondecreasing curve onto `[0, N−1]` and returns `warped_i − i`.
/// A flat curve yields the identity (all-zero) path.
pub fn h2_boundary(cum: Var<'_>) -> Result<Var<'_>, WarpError> {
    let tape = cum.tape();
    let n = cum.value().len();
    if n < 2 {
        return Err(WarpError::TooShort(n));
    }
    let lo = cum.min_reduce()?;
    let hi = cum.max_reduce()?;
    let range = hi.sub(lo)?;
    if range.item().unwrap_or(0.0) < DEGENERATE_RANGE {
        return Ok(tape.constant(Tensor::zeros([n])));
    }
    let index = tape.constant(Tensor::vector((0..n).map(|i| i as f64).collect()));
    let warped = cum.sub(lo)?.div(range)?.mul_scalar((n - 1) as f64)?;
    Ok(warped.sub(index)?)
}

/// Uniformly rescales `delta` by `min(phi_max / ‖delta‖∞, 1)`.
pub fn h3_clip(delta: Var<'_>, phi_max: f64) -> Result<Var<'_>, WarpError> {
    if phi_max <= 0.0 || phi_max.is_nan() {
        return Err(WarpError::NonPositivePhiMax(phi_max));
    }
    let peak = delta.abs()?.max_reduce()?;
    if peak.item().unwrap_or(0.0) <= phi_max {
        return Ok(delta);
    }
    let scale = delta.tape().scalar(phi_max).div(peak)?;
    Ok(delta.mul(scale)?)
}

/// Largest admissible `phi_max` for a window half-width.
pub fn phi_max_limit(half_width: usize) -> f64 {
    half_width as f64 - 1.0
}

/// `h3 ∘ h2 ∘ h1` on the tape. `phi_max` must leave one sample of headroom
/// inside the window (`phi_max ≤ M − 1`).
pub fn make_path_var(phi: Var<'_>, phi_max: f64, half_width: usize) -> Result<Var<'_>, WarpError> {
    let limit = phi_max_limit(half_width);
    if phi_max > limit {
        return Err(WarpError::PhiMaxTooLarge {
            phi_max,
            half_width,
            limit,
        });
    }
    if !phi.value().is_finite() {
        return Err(WarpError::NonFinite);
    }
    h3_clip(h2_boundary(h1_monotone(phi)?)?, phi_max)
}

pub fn make_path(params: &WarpParams, phi_max: f64, half_width: usize) -> Result<WarpPath, WarpError> {
    let tape = Tape::new();
    let path = make_path_var(tape.constant(params.phi.clone()), phi_max, half_width)?;
    Ok(WarpPath {
        displacements: path.value().data().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;

    fn eval(f: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>, WarpError>, x: &[f64]) -> Vec<f64> {
        let tape = Tape::new();
        f(tape.constant(Tensor::vector(x.to_vec())))
            .unwrap()
            .value()
            .data()
            .to_vec()
    }

    #[test]
    fn h1_examples() {
        assert_eq!(eval(h1_monotone, &[0., 0., 0.]), vec![0., 0., 0.]);
        assert_eq!(eval(h1_monotone, &[2., 1., 3.]), vec![1., 1., 3.]);
        let tape = Tape::new();
        assert!(matches!(
            h1_monotone(tape.constant(Tensor::vector(vec![1.0]))),
            Err(WarpError::TooShort(1))
        ));
    }

    #[test]
    fn h2_examples() {
        assert_eq!(eval(h2_boundary, &[0., 1., 2., 3.]), vec![0., 0., 0., 0.]);
        assert_eq!(eval(h2_boundary, &[0., 0., 1., 1.]), vec![0., -1., 1., 0.]);
        assert_eq!(eval(h2_boundary, &[4.; 5]), vec![0.; 5]);
    }

    #[test]
    fn h3_examples() {
        let clip = |d: &[f64]| eval(|v| h3_clip(v, 10.0), d);
        assert_eq!(clip(&[0., -1., 1., 0.]), vec![0., -1., 1., 0.]);
        assert_eq!(clip(&[0., 20., 0.]), vec![0., 10., 0.]);
        assert_eq!(clip(&[0., 0., 0.]), vec![0., 0., 0.]);
        let tape = Tape::new();
        assert!(matches!(
            h3_clip(tape.constant(Tensor::zeros([3])), 0.0),
            Err(WarpError::NonPositivePhiMax(_))
        ));
    }

    #[test]
    fn constant_phi_gives_identity() {
        let p = make_path(&WarpParams::new(vec![0.7; 16]).unwrap(), 5.0, 10).unwrap();
        assert!(p.displacements.iter().all(|&d| d.abs() < 1e-12));
    }

    #[test]
    fn phi_max_needs_headroom() {
        let params = WarpParams::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            make_path(&params, 10.0, 10),
            Err(WarpError::PhiMaxTooLarge { .. })
        ));
        assert!(make_path(&params, 9.0, 10).is_ok());
    }

    #[test]
    fn path_gradient_matches_fd() {
        let phi = Tensor::vector((0..12).map(|i| ((i * 7) % 12) as f64 * 0.13 - 0.4).collect());
        let weights = Tensor::vector((0..12).map(|i| (i as f64 * 0.9).sin()).collect());
        let err = finite_diff_check(
            |p| {
                let path = make_path_var(p, 2.0, 4).map_err(|e| match e {
                    WarpError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                path.mul(p.tape().constant(weights.clone()))?.sum()
            },
            &phi,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    proptest! {
        #[test]
        fn h1_output_nondecreasing(phi in prop::collection::vec(-5.0f64..5.0, 2..64)) {
            let out = eval(h1_monotone, &phi);
            for w in out.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
        }

        #[test]
        fn paths_satisfy_conditions(phi in prop::collection::vec(-3.0f64..3.0, 2..96), phi_max in 0.5f64..9.0) {
            let p = make_path(&WarpParams::new(phi.clone()).unwrap(), phi_max, 10).unwrap();
            prop_assert_eq!(p.check(phi_max), Ok(()));
            let whole = phi_max.floor().max(1.0);
            let q = make_path(&WarpParams::new(phi).unwrap(), whole, 10).unwrap();
            prop_assert_eq!(q.rounded().check(whole), Ok(()));
        }

        #[test]
        fn shift_invariant(phi in prop::collection::vec(-3.0f64..3.0, 2..64), c in -10.0f64..10.0) {
            let a = make_path(&WarpParams::new(phi.clone()).unwrap(), 5.0, 10).unwrap();
            let shifted: Vec<f64> = phi.iter().map(|v| v + c).collect();
            let b = make_path(&WarpParams::new(shifted).unwrap(), 5.0, 10).unwrap();
            for (x, y) in a.displacements.iter().zip(&b.displacements) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
