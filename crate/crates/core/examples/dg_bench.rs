//! Runs ERM, ADA, TADA and TADA+ on the synthetic benchmark and prints
//! per-target macro-F1.
//!
//! Usage: `cargo run --release --example dg_bench -- [seeds] [key=value ...]`

use std::time::Instant;

use warpada::adversarial::AdvMode;
use warpada::data::{synth_generate, ClassPrototype, Component, ShiftKind, SynthSpec};
use warpada::model::Classifier;
use warpada::training::{evaluate, run, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut base = TrainConfig::default();
    let mut spec = SynthSpec::default();
    let only: Option<String> = std::env::var("METHODS").ok();
    if let Ok(p) = std::env::var("PROTO") {
        // "a0:f0/h0,a1:f1/h1,..." amplitude, frequency, optional second-harmonic weight
        spec.classes = p
            .split(',')
            .enumerate()
            .map(|(i, c)| {
                let (a, rest) = c.split_once(':').unwrap();
                let (f, h) = rest.split_once('/').unwrap_or((rest, "0"));
                let (a, f, h): (f64, f64, f64) = (a.parse().unwrap(), f.parse().unwrap(), h.parse().unwrap());
                let mut comps = vec![Component { amplitude: a, frequency: f, phase: 0.0 }];
                if h != 0.0 {
                    comps.push(Component { amplitude: a * h, frequency: 2.0 * f, phase: 0.0 });
                }
                ClassPrototype { name: format!("c{i}"), channels: vec![comps] }
            })
            .collect();
    }
    for kv in args.iter().skip(1) {
        let (k, v) = kv.split_once('=').expect("key=value");
        let f: f64 = v.parse().expect("number");
        match k {
            "lr" => base.lr = f,
            "batch" => base.batch = f as usize,
            "eta" => base.adv.eta = f,
            "eta_ada" => base.adv.eta_ada = f,
            "gamma" => base.adv.gamma = f,
            "t_max" => base.adv.t_max = f as usize,
            "t_min" => base.adv.t_min = f as usize,
            "phi_init" => base.adv.phi_init = f,
            "me" => base.adv.me_beta = f,
            "t_final" => base.adv.t_final = f as usize,
            "k" => base.adv.k_rounds = f as usize,
            "phi_max" => base.adv.phi_max = f,
            "noise" => spec.noise_sigma = f,
            "smooth" => spec.warp_smoothness = f as usize,
            "b" | "s" | "sd" => {
                for t in &mut spec.targets {
                    if let ShiftKind::Amplitude { scale, offset, noise_sigma } | ShiftKind::Both { scale, offset, noise_sigma, .. } = &mut t.shift {
                        match k {
                            "b" => *offset = f,
                            "s" => *scale = f,
                            _ => *noise_sigma = f,
                        }
                    }
                }
            }
            other => panic!("unknown key {other}"),
        }
    }
    let methods: [(&str, bool, AdvMode); 4] = [
        ("erm", true, AdvMode::Tada),
        ("ada", false, AdvMode::Ada),
        ("tada", false, AdvMode::Tada),
        ("tada_plus", false, AdvMode::TadaPlus),
    ];
    let mut sums = vec![vec![0.0; 4]; methods.len()];
    for seed in 0..seeds {
        let spec = SynthSpec { seed, ..spec.clone() };
        let (src, targets) = synth_generate(&spec).unwrap();
        for (mi, (name, erm, mode)) in methods.iter().enumerate() {
            if only.as_ref().is_some_and(|o| !o.split(',').any(|m| m == *name)) {
                continue;
            }
            let t = Instant::now();
            let mut cfg = base.clone();
            cfg.erm = *erm;
            cfg.adv.mode = *mode;
            cfg.adv.seed = seed;
            let init = Classifier::new(1, spec.length, 3, seed).unwrap();
            let (m, _) = run(&src, &cfg, init).unwrap();
            let ev = evaluate(&m, &targets).unwrap();
            let f: Vec<f64> = ev.domains.iter().map(|d| d.macro_f1).collect();
            let srcf = evaluate(&m, std::slice::from_ref(&src)).unwrap().average;
            println!(
                "seed {seed} {name:10} src {srcf:.3} amp {:.3} warp {:.3} both {:.3} avg {:.3} ({:.1}s)",
                f[0], f[1], f[2], ev.average, t.elapsed().as_secs_f64()
            );
            for (s, v) in sums[mi].iter_mut().zip(f.iter().chain([&ev.average])) {
                *s += v;
            }
        }
    }
    for ((name, _, _), s) in methods.iter().zip(&sums) {
        let n = seeds as f64;
        println!("mean {name:10} amp {:.3} warp {:.3} both {:.3} avg {:.3}", s[0] / n, s[1] / n, s[2] / n, s[3] / n);
    }
}
