//! Trains one ERM model and reports its macro-F1 under a grid of shifts,
//! plus the size of the adversarial perturbations it induces.

use warpada::adversarial::{generate_all, AdvConfig, AdvMode};
use warpada::data::{synth_generate, ShiftKind, SynthSpec, TargetDomain};
use warpada::model::Classifier;
use warpada::training::{evaluate, run, TrainConfig};

fn main() {
    let t_final: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut targets = Vec::new();
    for (s, b, sd) in [(1.5, 0.5, 0.3), (1.0, 2.0, 0.3), (0.5, 0.0, 0.3), (0.5, 1.0, 0.6), (2.0, -1.0, 0.3), (1.0, 0.0, 0.8), (0.3,0.0,0.3)] {
        targets.push(TargetDomain {
            name: format!("amp s={s} b={b} sd={sd}"),
            shift: ShiftKind::Amplitude { scale: s, offset: b, noise_sigma: sd },
        });
    }
    for d in [4, 8, 9] {
        targets.push(TargetDomain { name: format!("warp d={d}"), shift: ShiftKind::Warp { max_displacement: d } });
    }
    let spec = SynthSpec { targets, ..SynthSpec::default() };
    let (src, tg) = synth_generate(&spec).unwrap();
    let mut cfg = TrainConfig { erm: true, ..TrainConfig::default() };
    cfg.adv.t_final = t_final;
    let (m, _) = run(&src, &cfg, Classifier::new(1, 128, 3, 0).unwrap()).unwrap();
    let ev = evaluate(&m, &tg).unwrap();
    for d in &ev.domains {
        println!("{:28} {:.3}", d.domain, d.macro_f1);
    }
    let few: Vec<_> = src.samples().iter().step_by(20).cloned().collect();
    let eta_ada: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let gamma: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    for mode in [AdvMode::Ada, AdvMode::Tada] {
        let adv = AdvConfig { mode, eta_ada, gamma, ..AdvConfig::default() };
        let out = generate_all(&m, &few, &adv, None).unwrap();
        let mut norm = 0.0;
        let mut shift = 0.0;
        let mut wrong = 0;
        let mut dc = 0.0;
        for (o, x) in out.iter().zip(&few) {
            let dx: f64 = o.series.values().data().iter().zip(x.values().data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            norm += (dx / 128.0).sqrt();
            dc += o.series.values().data().iter().zip(x.values().data()).map(|(a, b)| a - b).sum::<f64>().abs() / 128.0;
            shift += o.path.as_ref().map_or(0.0, |p| p.max_abs());
            if m.predict_label(&o.series).unwrap() != x.label {
                wrong += 1;
            }
            if o.origin_id < 2 {
                println!("{} trace {:?}", mode.name(), o.trace.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
            }
        }
        let n = out.len() as f64;
        println!("{}: rms change {:.3} |dc| {:.3} max|path| {:.2} flipped {}/{}", mode.name(), norm / n, dc / n, shift / n, wrong, out.len());
    }
}
