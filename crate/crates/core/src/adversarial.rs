//! Maximization phase: gradient ascent on a perturbation of one sample.
//!
//! All three generators maximise
//!
//! ```text
//! J = CE(f(x̂), y) + β·H(f(x̂)) − γ·‖z(x̂) − z(x)‖²
//! ```
//!
//! and differ only in how `x̂` is produced: additive noise (`ada`), a warp
//! through the phase-shift pipeline (`tada`), or both (`tada_plus`). The
//! path constraints live inside [`make_path_var`], so no ascent step can
//! leave the admissible set.

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{cross_entropy, entropy, semantic_distance, BoundClassifier, Classifier, ModelError};
use crate::signal::{warp_apply, SignalError, StftBasis, TimeSeries};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::warp::{make_path_var, phi_max_limit, WarpError, WarpPath};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdvError {
    #[error("invalid adversarial config: {0}")]
    Config(String),
    #[error("objective became non-finite at ascent iteration {iteration} (sample {origin_id})")]
    NonFinite { iteration: usize, origin_id: usize },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdvMode {
    Ada,
    Tada,
    TadaPlus,
}

impl AdvMode {
    pub fn name(self) -> &'static str {
        match self {
            AdvMode::Ada => "ada",
            AdvMode::Tada => "tada",
            AdvMode::TadaPlus => "tada_plus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ada" => Some(AdvMode::Ada),
            "tada" => Some(AdvMode::Tada),
            "tada_plus" | "tada+" => Some(AdvMode::TadaPlus),
            _ => None,
        }
    }

    /// Samples produced per source sample and round.
    pub fn growth(self, combine: Combine) -> usize {
        match (self, combine) {
            (AdvMode::TadaPlus, Combine::Union) => 2,
            _ => 1,
        }
    }
}

/// How `tada_plus` combines the two perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Combine {
    /// One amplitude sample and one warp sample.
    Union,
    /// One sample, warped after the additive perturbation, both ascended jointly.
    Composed,
}

impl Combine {
    pub fn name(self) -> &'static str {
        match self {
            Combine::Union => "union",
            Combine::Composed => "composed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "union" => Some(Combine::Union),
            "composed" => Some(Combine::Composed),
            _ => None,
        }
    }
}

/// Hyperparameters of the min/max procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvConfig {
    /// Penalty on feature-space distance from the source sample.
    pub gamma: f64,
    /// Ascent step for the warp parameters.
    pub eta: f64,
    /// Ascent step for additive perturbations.
    pub eta_ada: f64,
    pub t_max: usize,
    pub t_min: usize,
    pub k_rounds: usize,
    /// Final training epochs on the expanded dataset.
    pub t_final: usize,
    /// Window half-width `M`; windows hold `2M + 1` samples.
    pub m_window: usize,
    pub phi_max: f64,
    pub mode: AdvMode,
    pub combine: Combine,
    /// Weight of the predictive-entropy bonus; 0 disables it.
    pub me_beta: f64,
    /// Half-width of the uniform initialisation of the warp parameters.
    pub phi_init: f64,
    pub seed: u64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            eta: 1.0,
            eta_ada: 0.3,
            t_max: 10,
            t_min: 10,
            k_rounds: 2,
            t_final: 30,
            m_window: 10,
            phi_max: 8.0,
            mode: AdvMode::Tada,
            combine: Combine::Union,
            me_beta: 0.0,
            phi_init: 0.01,
            seed: 0,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<(), AdvError> {
        let bad = |msg: String| Err(AdvError::Config(msg));
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be > 0, got {}", self.gamma));
        }
        // zero steps are allowed: they reduce the procedure to ERM on duplicated data
        if !(self.eta >= 0.0) || !(self.eta_ada >= 0.0) {
            return bad(format!("eta and eta_ada must be ≥ 0, got {} and {}", self.eta, self.eta_ada));
        }
        for (name, v) in [
            ("t_max", self.t_max),
            ("t_min", self.t_min),
            ("k_rounds", self.k_rounds),
            ("t_final", self.t_final),
        ] {
            if v < 1 {
                return bad(format!("{name} must be ≥ 1"));
            }
        }
        if !(self.phi_max > 0.0) || self.phi_max > phi_max_limit(self.m_window) {
            return bad(format!(
                "phi_max must lie in (0, M−1] = (0, {}], got {}",
                phi_max_limit(self.m_window),
                self.phi_max
            ));
        }
        if !(self.me_beta >= 0.0) {
            return bad(format!("me_beta must be ≥ 0, got {}", self.me_beta));
        }
        if !(self.phi_init >= 0.0) {
            return bad(format!("phi_init must be ≥ 0, got {}", self.phi_init));
        }
        Ok(())
    }
}

/// Which perturbation produced a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleKind {
    Amplitude,
    Warp,
    Composed,
}

impl SampleKind {
    pub fn name(self) -> &'static str {
        match self {
            SampleKind::Amplitude => "amplitude",
            SampleKind::Warp => "warp",
            SampleKind::Composed => "composed",
        }
    }

    fn salt(self) -> u64 {
        match self {
            SampleKind::Amplitude => 0xA11C_E000,
            SampleKind::Warp => 0x3A7B_0000,
            SampleKind::Composed => 0xC0DE_0000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvSample {
    pub series: TimeSeries,
    pub origin_id: usize,
    pub kind: SampleKind,
    /// Objective at the returned perturbation.
    pub objective: f64,
    /// Objective before each ascent step, followed by the final value.
    pub trace: Vec<f64>,
    /// Warp displacements, for samples that were warped.
    pub path: Option<WarpPath>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the per-sample generator, independent of scheduling order.
pub fn sample_seed(seed: u64, origin_id: usize, kind: SampleKind) -> u64 {
    splitmix(splitmix(seed ^ kind.salt()) ^ origin_id as u64)
}

/// `J = CE + β·H − γ·‖z − z₀‖²` for a perturbed input already on the tape.
fn objective<'t>(
    bound: &BoundClassifier<'t>,
    x_hat: Var<'t>,
    label: usize,
    z_ref: &Tensor,
    cfg: &AdvConfig,
) -> Result<Var<'t>, AdvError> {
    let tape = x_hat.tape();
    let out = bound.forward(x_hat)?;
    let mut j = cross_entropy(out.logits, label)?;
    if cfg.me_beta > 0.0 {
        j = j.add(entropy(out.logits)?.mul_scalar(cfg.me_beta)?)?;
    }
    let dist = semantic_distance(out.z, tape.constant(z_ref.clone()))?;
    Ok(j.sub(dist.mul_scalar(cfg.gamma)?)?)
}

/// Perturbation state for one ascent run.
struct Ascent {
    amp: Option<Tensor>,
    phi: Option<Tensor>,
}

/// Runs `t_max` ascent steps and returns the final perturbed sample.
fn ascend(
    model: &Classifier,
    x: &TimeSeries,
    origin_id: usize,
    cfg: &AdvConfig,
    kind: SampleKind,
) -> Result<AdvSample, AdvError> {
    let basis = StftBasis::new(cfg.m_window);
    let (z_ref, _) = model.predict(x)?;
    let z_ref = Tensor::vector(z_ref);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(sample_seed(cfg.seed, origin_id, kind));
    let n = x.len();
    let mut state = Ascent {
        amp: matches!(kind, SampleKind::Amplitude | SampleKind::Composed)
            .then(|| Tensor::zeros(x.values().shape().to_vec())),
        phi: matches!(kind, SampleKind::Warp | SampleKind::Composed).then(|| {
            let lim = cfg.phi_init;
            Tensor::vector(
                (0..n)
                    .map(|_| if lim > 0.0 { rng.random_range(-lim..lim) } else { 0.0 })
                    .collect(),
            )
        }),
    };

    let mut trace = Vec::with_capacity(cfg.t_max + 1);
    for iteration in 0..=cfg.t_max {
        let last = iteration == cfg.t_max;
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let xv = tape.constant(x.values().clone());
        let amp = state.amp.as_ref().map(|a| tape.leaf(a.clone()));
        let phi = state.phi.as_ref().map(|p| tape.leaf(p.clone()));
        let mut x_hat = match amp {
            Some(a) => xv.add(a)?,
            None => xv,
        };
        let mut path = None;
        if let Some(p) = phi {
            let disp = make_path_var(p, cfg.phi_max, cfg.m_window)?;
            x_hat = warp_apply(&basis, x_hat, disp)?;
            path = Some(disp);
        }
        let j = objective(&bound, x_hat, x.label, &z_ref, cfg).map_err(|e| match e {
            AdvError::Tensor(TensorError::NonFinite { .. }) => AdvError::NonFinite { iteration, origin_id },
            other => other,
        })?;
        let value = j.item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(AdvError::NonFinite { iteration, origin_id });
        }
        trace.push(value);
        if last {
            let series = x.with_values((*x_hat.value()).clone())?;
            return Ok(AdvSample {
                series,
                origin_id,
                kind,
                objective: value,
                trace,
                path: path.map(|d| WarpPath {
                    displacements: d.value().data().to_vec(),
                }),
            });
        }
        let grads = tape.backward(j)?;
        let step = |var: Option<Var<'_>>, target: &mut Option<Tensor>, eta: f64| -> Result<(), AdvError> {
            if let (Some(v), Some(t)) = (var, target.as_mut()) {
                if let Some(g) = grads.get(v) {
                    if !g.is_finite() {
                        return Err(AdvError::NonFinite { iteration, origin_id });
                    }
                    for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
                        *w += eta * d;
                    }
                }
            }
            Ok(())
        };
        step(amp, &mut state.amp, cfg.eta_ada)?;
        step(phi, &mut state.phi, cfg.eta)?;
    }
    unreachable!("loop returns on its last iteration")
}

/// Temporal adversarial sample: ascent on the warp parameters.
pub fn tada_maximize(model: &Classifier, x: &TimeSeries, origin_id: usize, cfg: &AdvConfig) -> Result<AdvSample, AdvError> {
    ascend(model, x, origin_id, cfg, SampleKind::Warp)
}

/// Amplitude adversarial sample: ascent on an additive perturbation from zero.
pub fn ada_maximize(model: &Classifier, x: &TimeSeries, origin_id: usize, cfg: &AdvConfig) -> Result<AdvSample, AdvError> {
    ascend(model, x, origin_id, cfg, SampleKind::Amplitude)
}

/// Both perturbations, either as two separate samples or one joint one.
pub fn tadaplus_generate(
    model: &Classifier,
    x: &TimeSeries,
    origin_id: usize,
    cfg: &AdvConfig,
) -> Result<Vec<AdvSample>, AdvError> {
    match cfg.combine {
        Combine::Union => Ok(vec![
            ada_maximize(model, x, origin_id, cfg)?,
            tada_maximize(model, x, origin_id, cfg)?,
        ]),
        Combine::Composed => Ok(vec![ascend(model, x, origin_id, cfg, SampleKind::Composed)?]),
    }
}

/// Adversarial samples for one source sample under `cfg.mode`.
pub fn generate(model: &Classifier, x: &TimeSeries, origin_id: usize, cfg: &AdvConfig) -> Result<Vec<AdvSample>, AdvError> {
    match cfg.mode {
        AdvMode::Ada => Ok(vec![ada_maximize(model, x, origin_id, cfg)?]),
        AdvMode::Tada => Ok(vec![tada_maximize(model, x, origin_id, cfg)?]),
        AdvMode::TadaPlus => tadaplus_generate(model, x, origin_id, cfg),
    }
}

/// Runs [`generate`] for every sample, optionally on `jobs` worker threads.
/// Output is in origin order and identical for any worker count.
pub fn generate_all(
    model: &Classifier,
    samples: &[TimeSeries],
    cfg: &AdvConfig,
    jobs: Option<usize>,
) -> Result<Vec<AdvSample>, AdvError> {
    let run = || -> Result<Vec<Vec<AdvSample>>, AdvError> {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, x)| generate(model, x, i, cfg))
            .collect()
    };
    let nested = match jobs {
        Some(1) => samples
            .iter()
            .enumerate()
            .map(|(i, x)| generate(model, x, i, cfg))
            .collect::<Result<Vec<_>, _>>()?,
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| AdvError::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    Ok(nested.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::warp_series;
    use crate::warp::{make_path, WarpParams};

    fn toy(n: usize, seed: u64) -> TimeSeries {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let v = (0..n)
            .map(|i| (i as f64 * 0.3).sin() + 0.2 * rng.random_range(-1.0..1.0))
            .collect();
        TimeSeries::univariate(v, 1, "src").unwrap()
    }

    fn cfg() -> AdvConfig {
        AdvConfig {
            t_max: 3,
            m_window: 6,
            phi_max: 4.0,
            ..AdvConfig::default()
        }
    }

    #[test]
    fn validation() {
        assert!(AdvConfig::default().validate().is_ok());
        let mut c = AdvConfig::default();
        c.phi_max = 10.0;
        assert!(c.validate().is_err());
        c = AdvConfig { gamma: 0.0, ..AdvConfig::default() };
        assert!(c.validate().is_err());
        c = AdvConfig { t_max: 0, ..AdvConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_step_tada_returns_initial_warp() {
        let model = Classifier::new(1, 48, 3, 1).unwrap();
        let x = toy(48, 2);
        let c = AdvConfig { t_max: 1, eta: 0.0, ..cfg() };
        let s = tada_maximize(&model, &x, 7, &c).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(sample_seed(c.seed, 7, SampleKind::Warp));
        let phi0: Vec<f64> = (0..48).map(|_| rng.random_range(-0.01..0.01)).collect();
        let path = make_path(&WarpParams::new(phi0).unwrap(), c.phi_max, c.m_window).unwrap();
        let expect = warp_series(&x, &path.displacements, c.m_window).unwrap();
        assert_eq!(s.series, expect);
        assert_eq!(s.trace.len(), 2);
        assert_eq!(s.series.label, x.label);
    }

    #[test]
    fn zero_step_ada_is_identity() {
        let model = Classifier::new(1, 48, 3, 1).unwrap();
        let x = toy(48, 3);
        let c = AdvConfig { eta_ada: 0.0, ..cfg() };
        let s = ada_maximize(&model, &x, 0, &c).unwrap();
        assert_eq!(s.series, x);
        assert!(s.path.is_none());
    }

    #[test]
    fn single_ada_step_is_scaled_input_gradient() {
        let model = Classifier::new(1, 48, 3, 5).unwrap();
        let x = toy(48, 4);
        let c = AdvConfig { t_max: 1, eta_ada: 2.5, gamma: 3.0, ..cfg() };
        let s = ada_maximize(&model, &x, 0, &c).unwrap();

        // ∇ₓ CE at the clean input; the distance term has zero gradient there.
        let tape = Tape::new();
        let xv = tape.leaf(x.values().clone());
        let out = model.bind(&tape, false).forward(xv).unwrap();
        let ce = cross_entropy(out.logits, x.label).unwrap();
        let g = tape.backward(ce).unwrap();
        let grad = g.get(xv).unwrap();
        for ((xo, xa), gi) in x.values().data().iter().zip(s.series.values().data()).zip(grad.data()) {
            assert!((xa - xo - 2.5 * gi).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_paths_always_admissible() {
        let model = Classifier::new(1, 48, 3, 8).unwrap();
        let c = AdvConfig { eta: 50.0, ..cfg() };
        for seed in 0..20 {
            let s = tada_maximize(&model, &toy(48, seed), seed as usize, &c).unwrap();
            assert_eq!(s.path.as_ref().unwrap().check(c.phi_max), Ok(()));
        }
    }

    #[test]
    fn union_gives_two_labelled_samples() {
        let model = Classifier::new(1, 48, 3, 8).unwrap();
        let x = toy(48, 9);
        let c = AdvConfig { mode: AdvMode::TadaPlus, ..cfg() };
        let out = generate(&model, &x, 4, &c).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].kind, SampleKind::Amplitude);
        assert_eq!(out[1].kind, SampleKind::Warp);
        assert!(out.iter().all(|s| s.series.label == x.label && s.origin_id == 4));
        assert!(out[0].path.is_none());
        assert_ne!(out[0].series, out[1].series);
    }

    #[test]
    fn composed_zero_step_is_near_identity() {
        let model = Classifier::new(1, 48, 3, 8).unwrap();
        let x = toy(48, 10);
        let c = AdvConfig {
            mode: AdvMode::TadaPlus,
            combine: Combine::Composed,
            eta: 0.0,
            eta_ada: 0.0,
            phi_init: 0.0,
            ..cfg()
        };
        let out = generate(&model, &x, 0, &c).unwrap();
        assert_eq!(out.len(), 1);
        for (a, b) in out[0].series.values().data().iter().zip(x.values().data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let model = Classifier::new(1, 48, 3, 8).unwrap();
        let xs: Vec<_> = (0..6).map(|s| toy(48, s)).collect();
        let c = AdvConfig { mode: AdvMode::TadaPlus, ..cfg() };
        let seq = generate_all(&model, &xs, &c, Some(1)).unwrap();
        let par = generate_all(&model, &xs, &c, Some(3)).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.len(), 12);
    }
}
