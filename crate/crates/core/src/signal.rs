//! Time warping as phase rotation of short-time spectra.
//!
//! Every index `i` of a series gets its own window of `L = 2M + 1` samples
//! centred on `i` (edges replicated). Shifting a window by `δ` samples is the
//! same as rotating its `k`-th DFT bin by `exp(j·2π·k̃·δ/L)`, where `k̃` is
//! the signed frequency of the bin. Reading back only the centre sample of
//! each rotated window gives `x[i + δ_i]`, and because every step is a
//! matrix product or an elementwise trig op, the result is differentiable in
//! both the signal and the displacements.

use std::f64::consts::PI;
use std::rc::Rc;

use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("series length {len} is shorter than the window length {window} (2M+1 with M={half_width})")]
    TooShort {
        len: usize,
        window: usize,
        half_width: usize,
    },
    #[error("warp path has {got} entries, series has {expected}")]
    PathLength { expected: usize, got: usize },
    #[error("warp displacement {value} at index {index} exceeds the window half-width {limit}")]
    PathOutOfRange { index: usize, value: f64, limit: usize },
    #[error("integer warp requires whole displacements, got {value} at index {index}")]
    Fractional { index: usize, value: f64 },
    #[error("series values must be a finite C×N matrix: {0}")]
    BadValues(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A labelled multichannel series; `values` is `[C×N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Tensor,
    pub label: usize,
    pub domain_tag: String,
}

impl TimeSeries {
    pub fn new(values: Tensor, label: usize, domain_tag: impl Into<String>) -> Result<Self, SignalError> {
        if values.rank() != 2 || values.is_empty() {
            return Err(SignalError::BadValues(format!("shape {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(SignalError::BadValues("non-finite sample".into()));
        }
        Ok(Self {
            values,
            label,
            domain_tag: domain_tag.into(),
        })
    }

    /// Single-channel convenience constructor.
    pub fn univariate(data: Vec<f64>, label: usize, domain_tag: impl Into<String>) -> Result<Self, SignalError> {
        let n = data.len();
        let t = Tensor::from_parts(vec![1, n], data)?;
        Self::new(t, label, domain_tag)
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.len();
        &self.values.data()[c * n..(c + 1) * n]
    }

    /// Same label and tag, new values of the same shape.
    pub fn with_values(&self, values: Tensor) -> Result<Self, SignalError> {
        if values.shape() != self.values.shape() {
            return Err(SignalError::BadValues(format!(
                "expected shape {:?}, got {:?}",
                self.values.shape(),
                values.shape()
            )));
        }
        Self::new(values, self.label, self.domain_tag.clone())
    }
}

/// Precomputed DFT, phase and centre-extraction matrices for one window size.
#[derive(Debug, Clone)]
pub struct StftBasis {
    half_width: usize,
    /// `[n][k] = cos(2πkn/L)`
    dft_cos: Tensor,
    /// `[n][k] = −sin(2πkn/L)`
    dft_neg_sin: Tensor,
    /// `[1×L]`, `2π·k̃/L`
    phase_row: Tensor,
    /// `[L×1]`, `cos(2πkM/L)/L`
    center_cos: Tensor,
    /// `[L×1]`, `sin(2πkM/L)/L`
    center_sin: Tensor,
}

impl StftBasis {
    pub fn new(half_width: usize) -> Self {
        let l = 2 * half_width + 1;
        let lf = l as f64;
        let mut cos = Vec::with_capacity(l * l);
        let mut nsin = Vec::with_capacity(l * l);
        for n in 0..l {
            for k in 0..l {
                // reduce k·n mod L first so the angle stays small
                let ang = 2.0 * PI * ((k * n) % l) as f64 / lf;
                cos.push(ang.cos());
                nsin.push(-ang.sin());
            }
        }
        let phase_row = (0..l).map(|k| 2.0 * PI * signed_bin(k, l) / lf).collect();
        let center_ang = |k: usize| 2.0 * PI * ((k * half_width) % l) as f64 / lf;
        Self {
            half_width,
            dft_cos: Tensor::matrix(l, l, cos),
            dft_neg_sin: Tensor::matrix(l, l, nsin),
            phase_row: Tensor::matrix(1, l, phase_row),
            center_cos: Tensor::matrix(l, 1, (0..l).map(|k| center_ang(k).cos() / lf).collect()),
            center_sin: Tensor::matrix(l, 1, (0..l).map(|k| center_ang(k).sin() / lf).collect()),
        }
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn window_len(&self) -> usize {
        2 * self.half_width + 1
    }
}

/// Signed frequency of bin `k` for an odd window length `l`.
pub fn signed_bin(k: usize, l: usize) -> f64 {
    if 2 * k <= l {
        k as f64
    } else {
        k as f64 - l as f64
    }
}

/// Complex DFT coefficients of one or more windows, `[L]` or `[R×L]`.
#[derive(Debug, Clone, Copy)]
pub struct SpectrumFrame<'t> {
    pub re: Var<'t>,
    pub im: Var<'t>,
}

/// Flat gather indices of the edge-replicated windows, row `c·N + i`
/// holding `x[c][clamp(i − M + n)]`.
pub fn segment_indices(channels: usize, n: usize, half_width: usize) -> Result<Vec<usize>, SignalError> {
    let l = 2 * half_width + 1;
    if n < l {
        return Err(SignalError::TooShort {
            len: n,
            window: l,
            half_width,
        });
    }
    let mut idx = Vec::with_capacity(channels * n * l);
    for c in 0..channels {
        for i in 0..n {
            for k in 0..l {
                let src = (i + k).saturating_sub(half_width).min(n - 1);
                idx.push(c * n + src);
            }
        }
    }
    Ok(idx)
}

/// Splits `x` (`[N]` or `[C×N]`) into one `L`-sample window per index,
/// returned as a `[C·N × L]` matrix.
pub fn segment<'t>(x: Var<'t>, half_width: usize) -> Result<Var<'t>, SignalError> {
    let shape = x.shape();
    let (c, n) = match shape[..] {
        [n] => (1, n),
        [c, n] => (c, n),
        _ => return Err(SignalError::BadValues(format!("shape {shape:?}"))),
    };
    let idx: Rc<[usize]> = segment_indices(c, n, half_width)?.into();
    Ok(x.gather(idx, [c * n, 2 * half_width + 1])?)
}

fn as_rows(v: Var<'_>) -> Result<(Var<'_>, bool), TensorError> {
    let shape = v.shape();
    if shape.len() == 1 {
        Ok((v.reshape([1, shape[0]])?, true))
    } else {
        Ok((v, false))
    }
}

/// Forward DFT of each window row: `re[k] = Σ s[n]cos(2πkn/L)`,
/// `im[k] = −Σ s[n]sin(2πkn/L)`. Accepts `[L]` or `[R×L]`.
pub fn dft_forward<'t>(basis: &StftBasis, segments: Var<'t>) -> Result<SpectrumFrame<'t>, SignalError> {
    let tape = segments.tape();
    let (rows, single) = as_rows(segments)?;
    let re = rows.matmul(tape.constant(basis.dft_cos.clone()))?;
    let im = rows.matmul(tape.constant(basis.dft_neg_sin.clone()))?;
    if single {
        let l = basis.window_len();
        Ok(SpectrumFrame {
            re: re.reshape([l])?,
            im: im.reshape([l])?,
        })
    } else {
        Ok(SpectrumFrame { re, im })
    }
}

/// Rotates bin `k` of every row by `exp(j·2π·k̃·δ/L)`. `delta` is a scalar
/// (one shift for all rows) or has one entry per row. Positive `δ` moves
/// the content so that the centre reads the sample `δ` steps later.
pub fn phase_shift<'t>(
    basis: &StftBasis,
    frame: SpectrumFrame<'t>,
    delta: Var<'t>,
) -> Result<SpectrumFrame<'t>, SignalError> {
    let tape = delta.tape();
    let l = basis.window_len();
    let (re, single) = as_rows(frame.re)?;
    let (im, _) = as_rows(frame.im)?;
    let rows = re.shape()[0];
    let delta_col = match delta.shape().as_slice() {
        [] if rows == 1 => delta.reshape([1, 1])?,
        [] => {
            let idx: Rc<[usize]> = vec![0; rows].into();
            delta.gather(idx, [rows, 1])?
        }
        [r] if *r == rows => delta.reshape([rows, 1])?,
        other => {
            return Err(TensorError::ShapeMismatch {
                op: "phase_shift",
                lhs: other.to_vec(),
                rhs: vec![rows],
            }
            .into())
        }
    };
    let theta = delta_col.matmul(tape.constant(basis.phase_row.clone()))?;
    let (cos, sin) = (theta.cos()?, theta.sin()?);
    let out_re = re.mul(cos)?.sub(im.mul(sin)?)?;
    let out_im = re.mul(sin)?.add(im.mul(cos)?)?;
    if single {
        Ok(SpectrumFrame {
            re: out_re.reshape([l])?,
            im: out_im.reshape([l])?,
        })
    } else {
        Ok(SpectrumFrame {
            re: out_re,
            im: out_im,
        })
    }
}

/// Inverse DFT evaluated only at the centre sample `n = M` of each row.
/// Returns a scalar for a single `[L]` frame and `[R]` otherwise.
pub fn center_extract<'t>(basis: &StftBasis, frame: SpectrumFrame<'t>) -> Result<Var<'t>, SignalError> {
    let tape = frame.re.tape();
    let (re, single) = as_rows(frame.re)?;
    let (im, _) = as_rows(frame.im)?;
    let rows = re.shape()[0];
    let col = re
        .matmul(tape.constant(basis.center_cos.clone()))?
        .sub(im.matmul(tape.constant(basis.center_sin.clone()))?)?;
    if single {
        Ok(col.reshape(Vec::<usize>::new())?)
    } else {
        Ok(col.reshape([rows])?)
    }
}

fn check_path(path: &[f64], n: usize, half_width: usize) -> Result<(), SignalError> {
    if path.len() != n {
        return Err(SignalError::PathLength {
            expected: n,
            got: path.len(),
        });
    }
    if let Some((index, &value)) = path
        .iter()
        .enumerate()
        .find(|(_, v)| v.abs() > half_width as f64)
    {
        return Err(SignalError::PathOutOfRange {
            index,
            value,
            limit: half_width,
        });
    }
    Ok(())
}

/// Warps `x: [C×N]` by per-index displacements `path: [N]` on the tape.
/// All channels share the same path.
pub fn warp_apply<'t>(basis: &StftBasis, x: Var<'t>, path: Var<'t>) -> Result<Var<'t>, SignalError> {
    let shape = x.shape();
    let [c, n] = shape[..] else {
        return Err(SignalError::BadValues(format!("shape {shape:?}")));
    };
    check_path(path.value().data(), n, basis.half_width)?;
    let segs = segment(x, basis.half_width)?;
    let frame = dft_forward(basis, segs)?;
    let per_row = if c == 1 {
        path
    } else {
        let idx: Rc<[usize]> = (0..c * n).map(|r| r % n).collect::<Vec<_>>().into();
        path.gather(idx, [c * n])?
    };
    let shifted = phase_shift(basis, frame, per_row)?;
    Ok(center_extract(basis, shifted)?.reshape([c, n])?)
}

/// Off-tape convenience wrapper around [`warp_apply`].
pub fn warp_series(x: &TimeSeries, path: &[f64], half_width: usize) -> Result<TimeSeries, SignalError> {
    let basis = StftBasis::new(half_width);
    let tape = Tape::new();
    let xv = tape.constant(x.values().clone());
    let pv = tape.constant(Tensor::vector(path.to_vec()));
    let out = warp_apply(&basis, xv, pv)?;
    x.with_values((*out.value()).clone())
}

/// Direct index remapping `x'_i = x[clamp(i + δ_i)]` for whole-number
/// displacements. Not differentiable; used as a reference.
pub fn integer_warp_oracle(x: &TimeSeries, path: &[f64]) -> Result<TimeSeries, SignalError> {
    let n = x.len();
    if path.len() != n {
        return Err(SignalError::PathLength {
            expected: n,
            got: path.len(),
        });
    }
    let mut shift = Vec::with_capacity(n);
    for (index, &value) in path.iter().enumerate() {
        if value.fract() != 0.0 || !value.is_finite() {
            return Err(SignalError::Fractional { index, value });
        }
        shift.push(value as i64);
    }
    let mut out = Vec::with_capacity(x.values().len());
    for c in 0..x.channels() {
        let row = x.channel(c);
        for (i, &d) in shift.iter().enumerate() {
            let src = (i as i64 + d).clamp(0, n as i64 - 1) as usize;
            out.push(row[src]);
        }
    }
    x.with_values(Tensor::from_parts(vec![x.channels(), n], out)?)
}
