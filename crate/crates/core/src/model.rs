//! A three-layer 1-D CNN classifier and the losses of both training phases.
//!
//! Layout: `conv(C→16) → conv(16→32) → conv(32→64)`, each width 5, stride 2,
//! padding 2 and ReLU; then a global average over time gives the 64-d
//! feature `z`, and an affine head maps `z` to class logits.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::signal::TimeSeries;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const CONV_WIDTHS: [usize; 3] = [16, 32, 64];
pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const PAD: usize = 2;
pub const FEATURE_DIM: usize = 64;

const MAGIC: &[u8; 5] = b"TADA1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("input shape {got:?} does not match the model input [{channels}, {len}]")]
    InputShape {
        got: Vec<usize>,
        channels: usize,
        len: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("feature dimensions differ: {0} vs {1}")]
    FeatureDim(usize, usize),
    #[error("weight vector has {got} entries, model needs {expected}")]
    WeightCount { expected: usize, got: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint layer shapes do not match the architecture")]
    Layout,
    #[error("trailing bytes after checkpoint payload")]
    Trailing,
}

/// Classifier weights plus the input geometry they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    in_channels: usize,
    input_len: usize,
    n_classes: usize,
    rng_seed: u64,
    /// `[w1, b1, w2, b2, w3, b3, head_w, head_b]`
    params: Vec<Tensor>,
}

fn param_shapes(in_channels: usize, n_classes: usize) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    let mut c_in = in_channels;
    for c_out in CONV_WIDTHS {
        shapes.push(vec![c_out, c_in, KERNEL]);
        shapes.push(vec![c_out]);
        c_in = c_out;
    }
    shapes.push(vec![n_classes, FEATURE_DIM]);
    shapes.push(vec![n_classes, 1]);
    shapes
}

/// Sequence length after the three strided convolutions.
pub fn pooled_len(input_len: usize) -> usize {
    (0..CONV_WIDTHS.len()).fold(input_len, |n, _| (n + 2 * PAD - KERNEL) / STRIDE + 1)
}

impl Classifier {
    /// Kaiming-uniform conv weights, LeCun-uniform head, zero biases.
    pub fn new(in_channels: usize, input_len: usize, n_classes: usize, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::zeros(in_channels, input_len, n_classes)?;
        model.rng_seed = seed;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        for (i, p) in model.params.iter_mut().enumerate() {
            if i % 2 == 1 {
                continue;
            }
            let fan_in: usize = p.shape()[1..].iter().product();
            let gain = if i + 2 == 8 { 3.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            for v in p.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn zeros(in_channels: usize, input_len: usize, n_classes: usize) -> Result<Self, ModelError> {
        if in_channels == 0 || n_classes < 2 {
            return Err(ModelError::Config(format!(
                "need ≥1 channel and ≥2 classes, got {in_channels} and {n_classes}"
            )));
        }
        if input_len < KERNEL {
            return Err(ModelError::Config(format!("input length {input_len} shorter than kernel {KERNEL}")));
        }
        Ok(Self {
            in_channels,
            input_len,
            n_classes,
            rng_seed: 0,
            params: param_shapes(in_channels, n_classes)
                .into_iter()
                .map(Tensor::zeros)
                .collect(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_weights(&mut self, w: &[f64]) -> Result<(), ModelError> {
        if w.len() != self.num_weights() {
            return Err(ModelError::WeightCount {
                expected: self.num_weights(),
                got: w.len(),
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&w[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// In-place `θ ← θ − lr·g` with one gradient tensor per parameter.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
    }

    /// Places the weights on `tape`, as leaves when `trainable` and as
    /// constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundClassifier<'t> {
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        BoundClassifier {
            params,
            in_channels: self.in_channels,
            input_len: self.input_len,
        }
    }

    /// Off-tape forward pass returning `(z, logits)`.
    pub fn predict(&self, x: &TimeSeries) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let tape = Tape::new();
        let out = self.bind(&tape, false).forward(tape.constant(x.values().clone()))?;
        let z = out.z.value().data().to_vec();
        let logits = out.logits.value().data().to_vec();
        Ok((z, logits))
    }

    pub fn predict_label(&self, x: &TimeSeries) -> Result<usize, ModelError> {
        let (_, logits) = self.predict(x)?;
        Ok(argmax(&logits))
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [self.in_channels, self.input_len, self.n_classes, self.params.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&(p.rank() as u32).to_le_bytes())?;
            for &d in p.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for p in &self.params {
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&self.rng_seed.to_le_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let in_channels = read_u32(&mut r)? as usize;
        let input_len = read_u32(&mut r)? as usize;
        let n_classes = read_u32(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        let expected = param_shapes(in_channels, n_classes);
        if count != expected.len() {
            return Err(CheckpointError::Layout);
        }
        for shape in &expected {
            let rank = read_u32(&mut r)? as usize;
            if rank != shape.len() {
                return Err(CheckpointError::Layout);
            }
            for &d in shape {
                if read_u32(&mut r)? as usize != d {
                    return Err(CheckpointError::Layout);
                }
            }
        }
        let mut model =
            Self::zeros(in_channels, input_len, n_classes).map_err(|_| CheckpointError::Layout)?;
        let mut buf = [0u8; 8];
        for p in &mut model.params {
            for v in p.data_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        r.read_exact(&mut buf)?;
        model.rng_seed = u64::from_le_bytes(buf);
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Trailing);
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(io::BufReader::new(file))
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Classifier weights placed on a tape.
pub struct BoundClassifier<'t> {
    params: Vec<Var<'t>>,
    in_channels: usize,
    input_len: usize,
}

/// Feature vector and logits of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward<'t> {
    pub z: Var<'t>,
    pub logits: Var<'t>,
}

impl<'t> BoundClassifier<'t> {
    /// Wraps externally built parameter nodes, in [`Classifier::params`] order.
    pub fn from_params(params: Vec<Var<'t>>, in_channels: usize, input_len: usize) -> Self {
        Self {
            params,
            in_channels,
            input_len,
        }
    }

    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    pub fn forward(&self, x: Var<'t>) -> Result<Forward<'t>, ModelError> {
        let shape = x.shape();
        if shape != [self.in_channels, self.input_len] {
            return Err(ModelError::InputShape {
                got: shape,
                channels: self.in_channels,
                len: self.input_len,
            });
        }
        let tape = x.tape();
        let mut h = x;
        for layer in self.params[..6].chunks(2) {
            h = h.conv1d(layer[0], Some(layer[1]), STRIDE, PAD)?.relu()?;
        }
        let len = h.shape()[1];
        let pool = tape.constant(Tensor::filled([len, 1], 1.0 / len as f64));
        let z = h.matmul(pool)?;
        let logits = self.params[6].matmul(z)?.add(self.params[7])?;
        let n_classes = logits.shape()[0];
        Ok(Forward {
            z: z.reshape([FEATURE_DIM])?,
            logits: logits.reshape([n_classes])?,
        })
    }
}

/// `log Σ exp(l)` computed with the max subtracted.
pub fn log_sum_exp(logits: Var<'_>) -> Result<Var<'_>, TensorError> {
    let m = logits.max_reduce()?;
    logits.sub(m)?.exp()?.sum()?.log()?.add(m)
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: Var<'_>, label: usize) -> Result<Var<'_>, ModelError> {
    let n = logits.value().len();
    if label >= n {
        return Err(ModelError::LabelOutOfRange { label, classes: n });
    }
    let mut onehot = vec![0.0; n];
    onehot[label] = 1.0;
    let picked = logits
        .mul(logits.tape().constant(Tensor::vector(onehot)))?
        .sum()?;
    Ok(log_sum_exp(logits)?.sub(picked)?)
}

/// Shannon entropy (nats) of `softmax(logits)`.
pub fn entropy(logits: Var<'_>) -> Result<Var<'_>, ModelError> {
    let lse = log_sum_exp(logits)?;
    let p = logits.sub(lse)?.exp()?;
    Ok(lse.sub(p.mul(logits)?.sum()?)?)
}

/// Squared Euclidean distance between two feature vectors.
pub fn semantic_distance<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, ModelError> {
    let (na, nb) = (a.value().len(), b.value().len());
    if na != nb {
        return Err(ModelError::FeatureDim(na, nb));
    }
    let d = a.sub(b)?;
    Ok(d.mul(d)?.sum()?)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the largest value.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, gradient_pair, max_relative_error, tape_fn};
    use proptest::prelude::*;

    fn series(n: usize, seed: u64) -> TimeSeries {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        TimeSeries::univariate((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 1, "t").unwrap()
    }

    fn ce_of(logits: &[f64], label: usize) -> f64 {
        let tape = Tape::new();
        cross_entropy(tape.constant(Tensor::vector(logits.to_vec())), label)
            .unwrap()
            .item()
            .unwrap()
    }

    fn entropy_of(logits: &[f64]) -> f64 {
        let tape = Tape::new();
        entropy(tape.constant(Tensor::vector(logits.to_vec())))
            .unwrap()
            .item()
            .unwrap()
    }

    #[test]
    fn geometry() {
        assert_eq!(pooled_len(128), 16);
        let m = Classifier::new(1, 128, 3, 1).unwrap();
        assert_eq!(m.num_weights(), 16 * 5 + 16 + 32 * 16 * 5 + 32 + 64 * 32 * 5 + 64 + 3 * 64 + 3);
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let m = Classifier::zeros(1, 64, 4).unwrap();
        let (_, logits) = m.predict(&series(64, 1)).unwrap();
        assert_eq!(logits, vec![0.0; 4]);
        assert!(softmax(&logits).iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Classifier::new(1, 64, 3, 9).unwrap();
        let x = series(64, 2);
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = Classifier::new(1, 64, 3, 9).unwrap();
        assert!(matches!(m.predict(&series(60, 2)), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn weight_gradient_matches_fd() {
        let model = Classifier::new(1, 32, 3, 4).unwrap();
        let x = series(32, 5);
        for slot in [0, 3, 6] {
            let f = tape_fn(|w| {
                let tape = w.tape();
                let mut params = model.bind(tape, false).params().to_vec();
                params[slot] = w;
                let bound = BoundClassifier::from_params(params, 1, 32);
                let out = bound.forward(tape.constant(x.values().clone())).map_err(to_t)?;
                cross_entropy(out.logits, 1).map_err(to_t)
            });
            let (a, n) = gradient_pair(&f, &model.params()[slot], 1e-5).unwrap();
            let err = max_relative_error(&a, &n);
            assert!(err < 1e-4, "slot {slot}: {err}");
        }
    }

    fn to_t(e: ModelError) -> TensorError {
        match e {
            ModelError::Tensor(t) => t,
            other => TensorError::Invalid {
                op: "model",
                msg: other.to_string(),
            },
        }
    }

    #[test]
    fn input_gradient_is_nonzero() {
        let model = Classifier::new(1, 32, 3, 4).unwrap();
        let x = series(32, 6);
        let tape = Tape::new();
        let xv = tape.leaf(x.values().clone());
        let out = model.bind(&tape, false).forward(xv).unwrap();
        let loss = cross_entropy(out.logits, 0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(xv).unwrap().data().iter().any(|v| v.abs() > 1e-8));

        let err = finite_diff_check(
            |v| {
                let out = model.bind(v.tape(), false).forward(v).map_err(to_t)?;
                cross_entropy(out.logits, 2).map_err(to_t)
            },
            x.values(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((ce_of(&[0.0; 4], 2) - 4f64.ln()).abs() < 1e-12);
        assert!(ce_of(&[1e6, 0.0, 0.0], 0).abs() < 1e-12);
        let tape = Tape::new();
        assert!(matches!(
            cross_entropy(tape.constant(Tensor::vector(vec![0.0; 3])), 3),
            Err(ModelError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy_of(&[0.3; 4]) - 4f64.ln()).abs() < 1e-12);
        assert!(entropy_of(&[50.0, 0.0, 0.0]).abs() < 1e-12);
    }

    #[test]
    fn semantic_distance_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(semantic_distance(a, b).unwrap().item(), Some(2.0));
        assert_eq!(semantic_distance(a, a).unwrap().item(), Some(0.0));
        let c = tape.constant(Tensor::vector(vec![0.0; 3]));
        assert!(matches!(semantic_distance(a, c), Err(ModelError::FeatureDim(2, 3))));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let m = Classifier::new(2, 48, 3, 77).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"TADA1");
        let back = Classifier::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let x = TimeSeries::new(Tensor::filled([2, 48], 0.3), 0, "t").unwrap();
        let (z1, l1) = m.predict(&x).unwrap();
        let (z2, l2) = back.predict(&x).unwrap();
        assert!(z1.iter().zip(&z2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(l1.iter().zip(&l2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(matches!(
            Classifier::read_checkpoint(&b"NOPE1xxxx"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let m = Classifier::new(1, 16, 2, 1).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Classifier::read_checkpoint(buf.as_slice()),
            Err(CheckpointError::Io(_))
        ));
    }

    proptest! {
        #[test]
        fn ce_matches_direct_formula(logits in prop::collection::vec(-20.0f64..20.0, 2..8), pick in 0usize..8) {
            let label = pick % logits.len();
            let direct = -(logits[label].exp() / logits.iter().map(|l| l.exp()).sum::<f64>()).ln();
            prop_assert!((ce_of(&logits, label) - direct).abs() < 1e-12);
            prop_assert!(ce_of(&logits, label) >= 0.0);
        }

        #[test]
        fn softmax_normalised_and_entropy_bounded(logits in prop::collection::vec(-30.0f64..30.0, 2..8)) {
            let s: f64 = softmax(&logits).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            let h = entropy_of(&logits);
            prop_assert!(h >= -1e-12 && h <= (logits.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn distance_symmetric(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
            let tape = Tape::new();
            let (va, vb) = (tape.constant(Tensor::vector(a)), tape.constant(Tensor::vector(b)));
            let d1 = semantic_distance(va, vb).unwrap().item().unwrap();
            let d2 = semantic_distance(vb, va).unwrap().item().unwrap();
            prop_assert!((d1 - d2).abs() < 1e-12);
        }
    }
}
