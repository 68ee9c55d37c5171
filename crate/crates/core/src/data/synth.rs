//! Synthetic single-source benchmark with amplitude and temporal shifts.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{DataError, Dataset};
use crate::signal::{integer_warp_oracle, TimeSeries};
use crate::tensor::Tensor;
use crate::warp::{make_path, phi_max_limit, WarpParams};

/// One sinusoid: `amplitude · sin(2π·frequency·t/N + phase)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub amplitude: f64,
    /// Cycles per series.
    pub frequency: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub name: String,
    /// Components per channel.
    pub channels: Vec<Vec<Component>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShiftKind {
    /// `scale · prototype + offset` plus fresh noise of std `noise_sigma`.
    Amplitude { scale: f64, offset: f64, noise_sigma: f64 },
    /// Source draws remapped along a smooth random path bounded by
    /// `max_displacement` samples.
    Warp { max_displacement: usize },
    /// Amplitude shift followed by a warp.
    Both {
        scale: f64,
        offset: f64,
        noise_sigma: f64,
        max_displacement: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDomain {
    pub name: String,
    pub shift: ShiftKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<ClassPrototype>,
    pub length: usize,
    pub noise_sigma: f64,
    pub n_per_class: usize,
    pub targets: Vec<TargetDomain>,
    /// STFT half-width the warp targets must stay representable under.
    pub m_window: usize,
    /// Correlation length (in samples) of the random warp speed profile.
    pub warp_smoothness: usize,
    pub seed: u64,
}

fn comp(amplitude: f64, frequency: f64, phase: f64) -> Component {
    Component {
        amplitude,
        frequency,
        phase,
    }
}

impl Default for SynthSpec {
    /// Three univariate classes of length 128 with 200 samples each, and
    /// amplitude, warp (d = 8) and combined targets.
    fn default() -> Self {
        let proto = |name: &str, comps: Vec<Component>| ClassPrototype {
            name: name.into(),
            channels: vec![comps],
        };
        Self {
            classes: vec![
                proto("c0", vec![comp(1.0, 4.0, 0.0)]),
                proto("c1", vec![comp(1.0, 5.0, 0.0)]),
                proto("c2", vec![comp(1.0, 6.0, 0.0)]),
            ],
            length: 128,
            noise_sigma: 0.3,
            n_per_class: 200,
            targets: vec![
                TargetDomain {
                    name: "amplitude".into(),
                    shift: ShiftKind::Amplitude {
                        scale: 0.3,
                        offset: 0.0,
                        noise_sigma: 0.3,
                    },
                },
                TargetDomain {
                    name: "warp".into(),
                    shift: ShiftKind::Warp { max_displacement: 8 },
                },
                TargetDomain {
                    name: "both".into(),
                    shift: ShiftKind::Both {
                        scale: 0.3,
                        offset: 0.0,
                        noise_sigma: 0.3,
                        max_displacement: 8,
                    },
                },
            ],
            m_window: 10,
            warp_smoothness: 16,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn channels(&self) -> usize {
        self.classes.first().map_or(0, |c| c.channels.len())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.classes.len() < 2 {
            return bad("need at least two classes".into());
        }
        let c = self.channels();
        if c == 0 {
            return bad("class prototypes have no channels".into());
        }
        if self.length < 2 {
            return bad(format!("length {} is too short", self.length));
        }
        if self.n_per_class == 0 {
            return bad("n_per_class must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        let nyq = self.length as f64 / 4.0;
        for p in &self.classes {
            if p.channels.len() != c {
                return bad(format!("class {} has {} channels, expected {c}", p.name, p.channels.len()));
            }
            for k in p.channels.iter().flatten() {
                if !(k.frequency >= 0.0 && k.frequency < nyq) {
                    return bad(format!(
                        "class {}: frequency {} must lie in [0, {nyq}) cycles",
                        p.name, k.frequency
                    ));
                }
                if !k.amplitude.is_finite() || !k.phase.is_finite() {
                    return bad(format!("class {}: non-finite component", p.name));
                }
            }
        }
        let limit = phi_max_limit(self.m_window);
        for t in &self.targets {
            let (d, amp) = match t.shift {
                ShiftKind::Amplitude {
                    scale,
                    offset,
                    noise_sigma,
                } => (None, Some((scale, offset, noise_sigma))),
                ShiftKind::Warp { max_displacement } => (Some(max_displacement), None),
                ShiftKind::Both {
                    scale,
                    offset,
                    noise_sigma,
                    max_displacement,
                } => (Some(max_displacement), Some((scale, offset, noise_sigma))),
            };
            if let Some(d) = d {
                if d as f64 > limit {
                    return bad(format!(
                        "target {}: displacement {d} exceeds {limit} for window half-width {}",
                        t.name, self.m_window
                    ));
                }
            }
            if let Some((s, b, sd)) = amp {
                if !s.is_finite() || !b.is_finite() || !(sd >= 0.0 && sd.is_finite()) {
                    return bad(format!("target {}: invalid amplitude shift", t.name));
                }
            }
        }
        if self.warp_smoothness == 0 {
            return bad("warp_smoothness must be positive".into());
        }
        Ok(())
    }

    /// Noise-free prototype of class `k`, `[C × N]` row-major.
    pub fn prototype(&self, k: usize) -> Vec<f64> {
        let n = self.length;
        let mut out = Vec::with_capacity(self.channels() * n);
        for comps in &self.classes[k].channels {
            for t in 0..n {
                let tt = t as f64 / n as f64;
                out.push(
                    comps
                        .iter()
                        .map(|c| c.amplitude * (std::f64::consts::TAU * c.frequency * tt + c.phase).sin())
                        .sum(),
                );
            }
        }
        out
    }
}

fn noisy(proto: &[f64], scale: f64, offset: f64, sigma: f64, rng: &mut Xoshiro256PlusPlus) -> Vec<f64> {
    if sigma == 0.0 {
        return proto.iter().map(|v| scale * v + offset).collect();
    }
    let noise = Normal::new(0.0, sigma).expect("sigma validated");
    proto.iter().map(|v| scale * v + offset + noise.sample(rng)).collect()
}

/// Whole-sample admissible path: a positive, smoothly varying speed profile
/// pushed through the warp h-chain, clipped to `d` and rounded.
fn random_path(n: usize, d: usize, m_window: usize, smooth: usize, rng: &mut Xoshiro256PlusPlus) -> Vec<f64> {
    if d == 0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f64> = (0..n + smooth).map(|_| normal.sample(rng)).collect();
    let norm = (smooth as f64).sqrt();
    let phi: Vec<f64> = (0..n)
        .map(|i| (raw[i..i + smooth].iter().sum::<f64>() / norm).exp())
        .collect();
    let params = WarpParams::new(phi).expect("finite speed profile");
    make_path(&params, d as f64, m_window)
        .expect("validated displacement")
        .rounded()
        .displacements
}

fn draw_domain(
    spec: &SynthSpec,
    tag: &str,
    shift: Option<ShiftKind>,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<Dataset, DataError> {
    let (c, n) = (spec.channels(), spec.length);
    let mut samples = Vec::with_capacity(spec.classes.len() * spec.n_per_class);
    for k in 0..spec.classes.len() {
        let proto = spec.prototype(k);
        for _ in 0..spec.n_per_class {
            let (scale, offset, sigma, d) = match shift {
                None => (1.0, 0.0, spec.noise_sigma, 0),
                Some(ShiftKind::Amplitude {
                    scale,
                    offset,
                    noise_sigma,
                }) => (scale, offset, noise_sigma, 0),
                Some(ShiftKind::Warp { max_displacement }) => (1.0, 0.0, spec.noise_sigma, max_displacement),
                Some(ShiftKind::Both {
                    scale,
                    offset,
                    noise_sigma,
                    max_displacement,
                }) => (scale, offset, noise_sigma, max_displacement),
            };
            let values = noisy(&proto, scale, offset, sigma, rng);
            let mut s = TimeSeries::new(Tensor::matrix(c, n, values), k, tag)
                .map_err(|e| DataError::Invalid(e.to_string()))?;
            if shift.is_some() && d > 0 {
                let path = random_path(n, d, spec.m_window, spec.warp_smoothness, rng);
                s = integer_warp_oracle(&s, &path).map_err(|e| DataError::Invalid(e.to_string()))?;
            }
            samples.push(s);
        }
    }
    Dataset::new(samples, spec.classes.iter().map(|p| p.name.clone()).collect())
}

/// Draws the source domain and one dataset per target domain.
///
/// Every domain uses its own generator stream derived from `spec.seed`, so
/// adding a target leaves the others unchanged.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, Vec<Dataset>), DataError> {
    spec.validate()?;
    let stream = |i: u64| Xoshiro256PlusPlus::seed_from_u64(spec.seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let source = draw_domain(spec, "source", None, &mut stream(0))?;
    let targets = spec
        .targets
        .iter()
        .enumerate()
        .map(|(i, t)| draw_domain(spec, &t.name, Some(t.shift), &mut stream(i as u64 + 1)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((source, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(targets: Vec<TargetDomain>) -> SynthSpec {
        SynthSpec {
            n_per_class: 40,
            targets,
            ..SynthSpec::default()
        }
    }

    fn means(ds: &Dataset) -> Vec<f64> {
        ds.samples()
            .iter()
            .map(|s| s.values().data().iter().sum::<f64>() / s.values().len() as f64)
            .collect()
    }

    #[test]
    fn neutral_amplitude_shift_matches_source() {
        let spec = small(vec![TargetDomain {
            name: "same".into(),
            shift: ShiftKind::Amplitude {
                scale: 1.0,
                offset: 0.0,
                noise_sigma: 0.3,
            },
        }]);
        let (src, tgt) = synth_generate(&spec).unwrap();
        let (a, b) = (means(&src), means(&tgt[0]));
        let mv = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
            (m, v / x.len() as f64)
        };
        let ((ma, va), (mb, vb)) = (mv(&a), mv(&b));
        assert!((ma - mb).abs() < 3.0 * (va + vb).sqrt(), "{ma} vs {mb}");
    }

    #[test]
    fn zero_warp_is_source_draws() {
        let spec = small(vec![TargetDomain {
            name: "w0".into(),
            shift: ShiftKind::Warp { max_displacement: 0 },
        }]);
        let (src, tgt) = synth_generate(&spec).unwrap();
        // Same stream layout as the source when the path draw is skipped.
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed ^ 0x9E37_79B9_7F4A_7C15);
        let again = draw_domain(&spec, "source", None, &mut rng).unwrap();
        for (x, y) in again.samples().iter().zip(tgt[0].samples()) {
            assert_eq!(x.values(), y.values());
        }
        assert_eq!(src.len(), tgt[0].len());
    }

    #[test]
    fn deterministic() {
        let spec = small(SynthSpec::default().targets);
        assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
        let other = SynthSpec { seed: 1, ..spec.clone() };
        assert_ne!(synth_generate(&spec).unwrap().0, synth_generate(&other).unwrap().0);
    }

    #[test]
    fn warp_only_moves_values() {
        let spec = small(vec![TargetDomain {
            name: "w".into(),
            shift: ShiftKind::Warp { max_displacement: 8 },
        }]);
        let (_, tgt) = synth_generate(&spec).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed ^ 0x9E37_79B9_7F4A_7C15);
        for k in 0..spec.classes.len() {
            let proto = spec.prototype(k);
            for j in 0..spec.n_per_class {
                let draw = noisy(&proto, 1.0, 0.0, spec.noise_sigma, &mut rng);
                let path = random_path(spec.length, 8, spec.m_window, spec.warp_smoothness, &mut rng);
                let warped = tgt[0].samples()[k * spec.n_per_class + j].values().data();
                for (i, v) in warped.iter().enumerate() {
                    let src = (i as f64 + path[i]) as usize;
                    assert_eq!(*v, draw[src]);
                    assert!(draw.contains(v));
                }
                assert!(path.iter().all(|d| d.abs() <= 8.0));
                assert!(path.iter().any(|d| d.abs() >= 4.0), "path too timid");
            }
        }
    }

    #[test]
    fn amplitude_shift_keeps_landmarks() {
        let spec = small(vec![]);
        for k in 0..spec.classes.len() {
            let p = spec.prototype(k);
            let q: Vec<f64> = p.iter().map(|v| 1.7 * v + 0.4).collect();
            let qm = q.iter().sum::<f64>() / q.len() as f64;
            let n = p.len() as i64;
            let xcorr = |lag: i64| -> f64 {
                (0..n)
                    .filter(|&i| (0..n).contains(&(i + lag)))
                    .map(|i| p[i as usize] * (q[(i + lag) as usize] - qm))
                    .sum()
            };
            let best = (-20..=20).max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b))).unwrap();
            assert_eq!(best, 0);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = SynthSpec::default();
        s.targets[1].shift = ShiftKind::Warp { max_displacement: 10 };
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.classes[0].channels[0][0].frequency = 32.0;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.n_per_class = 0;
        assert!(s.validate().is_err());
    }
}
