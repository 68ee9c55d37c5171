//! TOML run configuration.
//!
//! Every key is optional; missing keys take the library defaults. Unknown
//! keys are rejected. Relative paths are resolved against the directory
//! holding the config file.
//!
//! ```toml
//! seed = 0
//! mode = "tada"            # erm | ada | tada | tada_plus
//! output_dir = "out"
//!
//! [train]
//! lr = 0.05
//! batch = 32
//!
//! [adv]
//! gamma = 1.0
//! eta = 1.0
//! t_max = 10
//!
//! [data]
//! train = "synth/source.manifest"
//! eval = ["synth/warp.manifest"]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use warpada::adversarial::{AdvConfig, AdvMode, Combine};
use warpada::data::{ClassPrototype, Component, ShiftKind, SynthSpec, TargetDomain};
use warpada::gradcheck::GradcheckConfig;
use warpada::tensor::OpKind;
use warpada::training::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `erm`, `ada`, `tada` or `tada_plus`.
    pub mode: String,
    pub output_dir: PathBuf,
    pub train: TrainSection,
    pub adv: AdvSection,
    pub data: DataSection,
    pub synth: SynthSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: "tada".into(),
            output_dir: "out".into(),
            train: TrainSection::default(),
            adv: AdvSection::default(),
            data: DataSection::default(),
            synth: SynthSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self { lr: d.lr, batch: d.batch }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvSection {
    pub gamma: f64,
    pub eta: f64,
    pub eta_ada: f64,
    pub t_max: usize,
    pub t_min: usize,
    pub k_rounds: usize,
    pub t_final: usize,
    pub m_window: usize,
    pub phi_max: f64,
    /// `union` or `composed`; only used by `tada_plus`.
    pub combine: String,
    pub me_beta: f64,
    pub phi_init: f64,
}

impl Default for AdvSection {
    fn default() -> Self {
        let d = AdvConfig::default();
        Self {
            gamma: d.gamma,
            eta: d.eta,
            eta_ada: d.eta_ada,
            t_max: d.t_max,
            t_min: d.t_min,
            k_rounds: d.k_rounds,
            t_final: d.t_final,
            m_window: d.m_window,
            phi_max: d.phi_max,
            combine: d.combine.name().into(),
            me_beta: d.me_beta,
            phi_init: d.phi_init,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training manifest. Without one, `train` generates the synthetic
    /// source domain from `[synth]` and evaluates on its targets.
    pub train: Option<PathBuf>,
    /// Manifests evaluated after training and by `eval`.
    pub eval: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub length: usize,
    pub n_per_class: usize,
    pub noise_sigma: f64,
    pub warp_smoothness: usize,
    pub classes: Vec<ClassSection>,
    pub targets: Vec<TargetSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSection {
    pub name: String,
    /// Sinusoid components of each channel.
    pub channels: Vec<Vec<ComponentSection>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSection {
    pub amplitude: f64,
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    pub name: String,
    /// `amplitude`, `warp` or `both`.
    pub kind: String,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
    /// Defaults to the source noise level.
    pub noise_sigma: Option<f64>,
    #[serde(default)]
    pub max_displacement: usize,
}

fn one() -> f64 {
    1.0
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthSpec::default();
        Self {
            length: d.length,
            n_per_class: d.n_per_class,
            noise_sigma: d.noise_sigma,
            warp_smoothness: d.warp_smoothness,
            classes: d
                .classes
                .iter()
                .map(|c| ClassSection {
                    name: c.name.clone(),
                    channels: c
                        .channels
                        .iter()
                        .map(|ch| {
                            ch.iter()
                                .map(|k| ComponentSection {
                                    amplitude: k.amplitude,
                                    frequency: k.frequency,
                                    phase: k.phase,
                                })
                                .collect()
                        })
                        .collect(),
                })
                .collect(),
            targets: d.targets.iter().map(target_section).collect(),
        }
    }
}

fn target_section(t: &TargetDomain) -> TargetSection {
    let mut s = TargetSection {
        name: t.name.clone(),
        kind: String::new(),
        scale: 1.0,
        offset: 0.0,
        noise_sigma: None,
        max_displacement: 0,
    };
    match t.shift {
        ShiftKind::Amplitude {
            scale,
            offset,
            noise_sigma,
        } => {
            s.kind = "amplitude".into();
            (s.scale, s.offset, s.noise_sigma) = (scale, offset, Some(noise_sigma));
        }
        ShiftKind::Warp { max_displacement } => {
            s.kind = "warp".into();
            s.max_displacement = max_displacement;
        }
        ShiftKind::Both {
            scale,
            offset,
            noise_sigma,
            max_displacement,
        } => {
            s.kind = "both".into();
            (s.scale, s.offset, s.noise_sigma) = (scale, offset, Some(noise_sigma));
            s.max_displacement = max_displacement;
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub points: usize,
    pub h: f64,
    pub threshold: f64,
    /// Test fixture: name of an op whose backward rule is sign-flipped.
    pub fault: Option<String>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let d = GradcheckConfig::default();
        Self {
            points: d.points,
            h: d.h,
            threshold: d.threshold,
            fault: None,
        }
    }
}

impl RunConfig {
    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {}", path.display(), e.to_string().trim_end())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.data.train = cfg.data.train.map(|p| base.join(p));
        cfg.data.eval = cfg.data.eval.iter().map(|p| base.join(p)).collect();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `None` for `erm`.
    pub fn adv_mode(&self) -> Result<Option<AdvMode>, CliError> {
        if self.mode == "erm" {
            return Ok(None);
        }
        AdvMode::parse(&self.mode)
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("unknown mode {:?} (expected erm, ada, tada or tada_plus)", self.mode)))
    }

    pub fn train_config(&self, jobs: Option<usize>) -> Result<TrainConfig, CliError> {
        let a = &self.adv;
        let mode = self.adv_mode()?;
        let combine = Combine::parse(&a.combine)
            .ok_or_else(|| CliError::Usage(format!("unknown combine {:?} (expected union or composed)", a.combine)))?;
        let cfg = TrainConfig {
            adv: AdvConfig {
                gamma: a.gamma,
                eta: a.eta,
                eta_ada: a.eta_ada,
                t_max: a.t_max,
                t_min: a.t_min,
                k_rounds: a.k_rounds,
                t_final: a.t_final,
                m_window: a.m_window,
                phi_max: a.phi_max,
                mode: mode.unwrap_or(AdvMode::Tada),
                combine,
                me_beta: a.me_beta,
                phi_init: a.phi_init,
                seed: self.seed,
            },
            lr: self.train.lr,
            batch: self.train.batch,
            erm: mode.is_none(),
            jobs,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec, CliError> {
        let s = &self.synth;
        let targets = s
            .targets
            .iter()
            .map(|t| {
                let noise_sigma = t.noise_sigma.unwrap_or(s.noise_sigma);
                let shift = match t.kind.as_str() {
                    "amplitude" => ShiftKind::Amplitude {
                        scale: t.scale,
                        offset: t.offset,
                        noise_sigma,
                    },
                    "warp" => ShiftKind::Warp {
                        max_displacement: t.max_displacement,
                    },
                    "both" => ShiftKind::Both {
                        scale: t.scale,
                        offset: t.offset,
                        noise_sigma,
                        max_displacement: t.max_displacement,
                    },
                    other => {
                        return Err(CliError::Usage(format!(
                            "target {:?}: unknown kind {other:?} (expected amplitude, warp or both)",
                            t.name
                        )))
                    }
                };
                Ok(TargetDomain {
                    name: t.name.clone(),
                    shift,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let spec = SynthSpec {
            classes: s
                .classes
                .iter()
                .map(|c| ClassPrototype {
                    name: c.name.clone(),
                    channels: c
                        .channels
                        .iter()
                        .map(|ch| {
                            ch.iter()
                                .map(|k| Component {
                                    amplitude: k.amplitude,
                                    frequency: k.frequency,
                                    phase: k.phase,
                                })
                                .collect()
                        })
                        .collect(),
                })
                .collect(),
            length: s.length,
            noise_sigma: s.noise_sigma,
            n_per_class: s.n_per_class,
            targets,
            m_window: self.adv.m_window,
            warp_smoothness: s.warp_smoothness,
            seed: self.seed,
        };
        spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(spec)
    }

    pub fn gradcheck_config(&self) -> Result<GradcheckConfig, CliError> {
        let g = &self.gradcheck;
        let fault = match &g.fault {
            None => None,
            Some(name) => Some(
                OpKind::from_name(name)
                    .ok_or_else(|| CliError::Usage(format!("gradcheck.fault: unknown op {name:?}")))?,
            ),
        };
        if g.points == 0 || !(g.h > 0.0) || !(g.threshold > 0.0) {
            return Err(CliError::Usage(
                "gradcheck: points, h and threshold must be positive".into(),
            ));
        }
        Ok(GradcheckConfig {
            points: g.points,
            h: g.h,
            threshold: g.threshold,
            seed: self.seed,
            fault,
        })
    }
}
