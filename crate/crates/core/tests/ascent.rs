use warpada::adversarial::{generate_all, AdvConfig, AdvMode};
use warpada::data::{synth_generate, SynthSpec};
use warpada::model::Classifier;
use warpada::training::{run, TrainConfig};

fn nondecreasing(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0))
}

// The first step leaves the near-identity start and can land lower; the
// ascent from there on is what should be monotone.
#[test]
fn tada_ascent_at_unit_step() {
    let (src, _) = synth_generate(&SynthSpec { n_per_class: 40, ..SynthSpec::default() }).unwrap();
    let mut cfg = TrainConfig { erm: true, ..TrainConfig::default() };
    cfg.adv.t_final = 5;
    let init = Classifier::new(1, 128, src.n_classes(), 0).unwrap();
    let (model, _) = run(&src, &cfg, init).unwrap();

    for gamma in [0.1, 1.0] {
        let adv = AdvConfig { mode: AdvMode::Tada, eta: 1.0, gamma, ..AdvConfig::default() };
        let out = generate_all(&model, src.samples(), &adv, None).unwrap();
        let n = out.len();
        let full = out.iter().filter(|s| nondecreasing(&s.trace)).count();
        let tail = out.iter().filter(|s| nondecreasing(&s.trace[1..])).count();
        println!("gamma {gamma}: nondecreasing {full}/{n} overall, {tail}/{n} after the first step");
        assert!(tail * 10 >= n * 9, "gamma {gamma}: {tail}/{n}");
        let rise: f64 = out.iter().map(|s| s.objective - s.trace[0]).sum();
        assert!(rise > 0.0, "gamma {gamma}: mean objective fell");
    }
}
