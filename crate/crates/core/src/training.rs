//! Alternating min/max training, evaluation and reporting.
//!
//! [`run`] starts from `D_0`, and in each of `K` rounds takes `t_min` SGD
//! steps on the current dataset and then appends one adversarial copy (two
//! for `tada_plus` in union mode) of every ORIGINAL sample. It finishes with
//! `t_final` epochs of SGD on the expanded dataset.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use thiserror::Error;

use crate::adversarial::{generate_all, AdvConfig, AdvError, AdvSample};
use crate::data::Dataset;
use crate::model::{argmax, cross_entropy, Classifier, ModelError};
use crate::signal::TimeSeries;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}: dataset is empty")]
    EmptyDataset(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("length mismatch: {preds} predictions for {truth} labels")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("training aborted in {stage}: {source}")]
    Aborted {
        stage: String,
        #[source]
        source: Box<TrainError>,
        partial: Box<TrainReport>,
    },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Adv(#[from] AdvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Everything [`run`] needs besides data and the initial model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adv: AdvConfig,
    /// Constant SGD learning rate.
    pub lr: f64,
    pub batch: usize,
    /// Skip the alternating rounds and train on `D_0` only. Final epochs
    /// are sized as if `D_0` had grown to `|D_0|·(1+K)`.
    pub erm: bool,
    /// Worker threads for gradient and ascent fan-out; `None` uses the
    /// global pool. Results do not depend on it.
    pub jobs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adv: AdvConfig::default(),
            lr: 0.05,
            batch: 32,
            erm: false,
            jobs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.adv.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be ≥ 1".into()));
        }
        if self.jobs == Some(0) {
            return Err(TrainError::Config("jobs must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Name of the method this config trains with.
    pub fn method(&self) -> &'static str {
        if self.erm {
            "erm"
        } else {
            self.adv.mode.name()
        }
    }

    /// `key = value` lines describing every setting.
    pub fn echo(&self) -> Vec<(String, String)> {
        let a = &self.adv;
        let mut v: Vec<(&str, String)> = vec![
            ("method", self.method().into()),
            ("mode", a.mode.name().into()),
            ("combine", a.combine.name().into()),
            ("gamma", a.gamma.to_string()),
            ("eta", a.eta.to_string()),
            ("eta_ada", a.eta_ada.to_string()),
            ("t_max", a.t_max.to_string()),
            ("t_min", a.t_min.to_string()),
            ("k_rounds", a.k_rounds.to_string()),
            ("t_final", a.t_final.to_string()),
            ("m_window", a.m_window.to_string()),
            ("phi_max", a.phi_max.to_string()),
            ("me_beta", a.me_beta.to_string()),
            ("phi_init", a.phi_init.to_string()),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("optimizer", "sgd".into()),
        ];
        v.sort_by_key(|(k, _)| *k);
        v.into_iter().map(|(k, s)| (k.to_string(), s)).collect()
    }
}

/// One round of the alternating procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Mean minibatch loss of the minimization phase.
    pub min_loss: f64,
    /// Mean final objective of the generated samples.
    pub mean_objective: f64,
    /// Dataset size after this round's augmentation.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainScore {
    pub domain: String,
    pub macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub seed: u64,
    pub config: Vec<(String, String)>,
    /// `|D_0|, |D_1|, …, |D_K|`.
    pub sizes: Vec<usize>,
    pub rounds: Vec<RoundReport>,
    /// Mean minibatch loss of each final epoch.
    pub final_losses: Vec<f64>,
    pub domains: Vec<DomainScore>,
    pub average_f1: Option<f64>,
    pub wall_clock_secs: f64,
}

/// Equality ignores wall-clock time.
impl PartialEq for TrainReport {
    fn eq(&self, o: &Self) -> bool {
        self.seed == o.seed
            && self.config == o.config
            && self.sizes == o.sizes
            && bits_eq(
                self.rounds.iter().flat_map(|r| [r.min_loss, r.mean_objective]),
                o.rounds.iter().flat_map(|r| [r.min_loss, r.mean_objective]),
            )
            && self.rounds.iter().map(|r| (r.round, r.size)).eq(o.rounds.iter().map(|r| (r.round, r.size)))
            && bits_eq(self.final_losses.iter().copied(), o.final_losses.iter().copied())
            && self.domains == o.domains
            && self.average_f1.map(f64::to_bits) == o.average_f1.map(f64::to_bits)
    }
}

fn bits_eq(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> bool {
    a.map(f64::to_bits).eq(b.map(f64::to_bits))
}

impl TrainReport {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            seed: cfg.adv.seed,
            config: cfg.echo(),
            sizes: Vec::new(),
            rounds: Vec::new(),
            final_losses: Vec::new(),
            domains: Vec::new(),
            average_f1: None,
            wall_clock_secs: 0.0,
        }
    }

    pub fn record_eval(&mut self, eval: Evaluation) {
        self.average_f1 = Some(eval.average);
        self.domains = eval.domains;
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_string().as_bytes()).map_err(io)
    }
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# warpada train report")?;
        writeln!(f, "seed = {}", self.seed)?;
        for (k, v) in &self.config {
            writeln!(f, "config.{k} = {v}")?;
        }
        let sizes: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        writeln!(f, "sizes = {}", sizes.join(","))?;
        for r in &self.rounds {
            writeln!(
                f,
                "round.{} = min_loss {:.6} objective {:.6} size {}",
                r.round, r.min_loss, r.mean_objective, r.size
            )?;
        }
        let losses: Vec<String> = self.final_losses.iter().map(|l| format!("{l:.6}")).collect();
        writeln!(f, "final_losses = {}", losses.join(","))?;
        writeln!(f, "wall_clock_secs = {:.3}", self.wall_clock_secs)?;
        if let Some(avg) = self.average_f1 {
            writeln!(f)?;
            writeln!(f, "domain\tmacro_f1")?;
            for d in &self.domains {
                writeln!(f, "{}\t{:.6}", d.domain, d.macro_f1)?;
            }
            writeln!(f, "average\t{avg:.6}")?;
        }
        Ok(())
    }
}

/// Mean cross-entropy of a minibatch and its gradient per parameter.
///
/// Per-sample gradients are computed independently and summed in batch
/// order, so the result does not depend on the number of threads.
pub fn batch_gradient(model: &Classifier, batch: &[&TimeSeries]) -> Result<(f64, Vec<Tensor>), TrainError> {
    let per_sample = |x: &&TimeSeries| -> Result<(f64, Vec<Tensor>), TrainError> {
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let out = bound.forward(tape.constant(x.values().clone()))?;
        let loss = cross_entropy(out.logits, x.label)?;
        let grads = tape.backward(loss)?;
        let g = bound
            .params()
            .iter()
            .map(|p| grads.get(*p).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((loss.item().unwrap_or(f64::NAN), g))
    };
    let parts: Vec<(f64, Vec<Tensor>)> = batch.par_iter().map(per_sample).collect::<Result<_, _>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l * scale;
        for (t, gi) in total.iter_mut().zip(&g) {
            for (a, b) in t.data_mut().iter_mut().zip(gi.data()) {
                *a += b * scale;
            }
        }
    }
    Ok((loss, total))
}

fn in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, TrainError> {
    match jobs {
        None => Ok(f()),
        Some(n) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?
            .install(f)),
    }
}

/// `steps` SGD steps on minibatches drawn uniformly with replacement.
/// Returns the loss of each step.
pub fn minimize_phase(
    model: &mut Classifier,
    d: &Dataset,
    steps: usize,
    lr: f64,
    batch: usize,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<Vec<f64>, TrainError> {
    if d.is_empty() {
        return Err(TrainError::EmptyDataset("minimize_phase"));
    }
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let picks: Vec<&TimeSeries> = (0..batch)
            .map(|_| &d.samples()[rng.random_range(0..d.len())])
            .collect();
        let (loss, grads) = batch_gradient(model, &picks)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss(step));
        }
        model.sgd_step(&grads, lr);
        losses.push(loss);
    }
    Ok(losses)
}

/// Adversarial samples for every element of the original dataset `d0`,
/// against a frozen copy of the weights.
pub fn maximize_phase(model: &Classifier, d0: &Dataset, cfg: &AdvConfig, jobs: Option<usize>) -> Result<Vec<AdvSample>, TrainError> {
    if d0.is_empty() {
        return Err(TrainError::EmptyDataset("maximize_phase"));
    }
    Ok(generate_all(model, d0.samples(), cfg, jobs)?)
}

/// Number of minibatch steps in one pass over `n` samples.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch).max(1)
}

/// Full procedure. `d0` is never modified.
pub fn run(d0: &Dataset, cfg: &TrainConfig, model_init: Classifier) -> Result<(Classifier, TrainReport), TrainError> {
    cfg.validate()?;
    if d0.is_empty() {
        return Err(TrainError::EmptyDataset("run"));
    }
    let start = Instant::now();
    let mut report = TrainReport::new(cfg);
    let mut model = model_init;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.adv.seed);
    let mut current = d0.clone();
    report.sizes.push(current.len());
    let abort = |stage: String, e: TrainError, report: &TrainReport| TrainError::Aborted {
        stage,
        source: Box::new(e),
        partial: Box::new(report.clone()),
    };

    let rounds = if cfg.erm { 0 } else { cfg.adv.k_rounds };
    for round in 1..=rounds {
        let losses = in_pool(cfg.jobs, || {
            minimize_phase(&mut model, &current, cfg.adv.t_min, cfg.lr, cfg.batch, &mut rng)
        })?
        .map_err(|e| abort(format!("round {round} minimization"), e, &report))?;
        let min_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let mut adv = cfg.adv.clone();
        // distinct ascent initialisations per round
        adv.seed = cfg.adv.seed.wrapping_add(round as u64);
        let generated = maximize_phase(&model, d0, &adv, cfg.jobs)
            .map_err(|e| abort(format!("round {round} maximization"), e, &report))?;
        let mean_objective = generated.iter().map(|s| s.objective).sum::<f64>() / generated.len() as f64;
        current.extend(generated.into_iter().map(|s| s.series))?;
        report.sizes.push(current.len());
        report.rounds.push(RoundReport {
            round,
            min_loss,
            mean_objective,
            size: current.len(),
        });
    }

    // ERM gets the step budget of a single-growth augmented run, so the
    // comparison is between datasets rather than between training lengths.
    let epoch_size = if cfg.erm {
        d0.len() * (1 + cfg.adv.k_rounds)
    } else {
        current.len()
    };
    let per_epoch = steps_per_epoch(epoch_size, cfg.batch);
    for epoch in 0..cfg.adv.t_final {
        let losses = in_pool(cfg.jobs, || {
            minimize_phase(&mut model, &current, per_epoch, cfg.lr, cfg.batch, &mut rng)
        })?
        .map_err(|e| abort(format!("final epoch {epoch}"), e, &report))?;
        report.final_losses.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Unweighted mean of per-class F1 scores.
///
/// Classes absent from both `truth` and `preds` are skipped; a class present
/// in only one of them scores 0.
pub fn macro_f1(preds: &[usize], truth: &[usize], n_classes: usize) -> Result<f64, TrainError> {
    if preds.len() != truth.len() {
        return Err(TrainError::LengthMismatch {
            preds: preds.len(),
            truth: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(TrainError::EmptyDataset("macro_f1"));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &t) in preds.iter().zip(truth) {
        for label in [p, t] {
            if label >= n_classes {
                return Err(TrainError::LabelRange {
                    label,
                    classes: n_classes,
                });
            }
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let scores: Vec<f64> = (0..n_classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub domains: Vec<DomainScore>,
    pub average: f64,
}

pub fn predict_all(model: &Classifier, d: &Dataset) -> Result<Vec<usize>, TrainError> {
    d.samples()
        .par_iter()
        .map(|s| model.predict(s).map(|(_, l)| argmax(&l)).map_err(TrainError::from))
        .collect()
}

/// Macro-F1 of argmax predictions on each domain, and their plain average.
pub fn evaluate(model: &Classifier, domains: &[Dataset]) -> Result<Evaluation, TrainError> {
    if domains.is_empty() {
        return Err(TrainError::EmptyDataset("evaluate"));
    }
    let mut scores = Vec::with_capacity(domains.len());
    for d in domains {
        if d.is_empty() {
            return Err(TrainError::EmptyDataset("evaluate"));
        }
        let preds = predict_all(model, d)?;
        scores.push(DomainScore {
            domain: d.domain_name(),
            macro_f1: macro_f1(&preds, &d.labels(), d.n_classes())?,
        });
    }
    let average = scores.iter().map(|s| s.macro_f1).sum::<f64>() / scores.len() as f64;
    Ok(Evaluation {
        domains: scores,
        average,
    })
}

/// Embedding table: `origin_id,domain_tag,label,f0..f63`, one row per sample.
pub fn export_features(model: &Classifier, d: &Dataset, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let feats: Vec<Vec<f64>> = d
        .samples()
        .par_iter()
        .map(|s| model.predict(s).map(|(z, _)| z))
        .collect::<Result<_, _>>()?;
    let width = feats.first().map_or(0, Vec::len);
    let mut out = String::from("origin_id,domain_tag,label");
    for i in 0..width {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for (i, (s, z)) in d.samples().iter().zip(&feats).enumerate() {
        let _ = write!(out, "{i},{},{}", s.domain_tag, s.label);
        for v in z {
            let _ = write!(out, ",{v:.11e}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}
