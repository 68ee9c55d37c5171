use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use warpada::adversarial::generate_all;
use warpada::data::{load_manifest, synth_generate, write_dataset, Dataset};
use warpada::gradcheck::{format_table, run_suite};
use warpada::model::Classifier;
use warpada::training::{evaluate, export_features, run, Evaluation, TrainError};

use crate::config::RunConfig;
use crate::CliError;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body).map_err(|e| failure(format!("cannot write {}: {e}", path.display())))
}

/// Creates the output directory and writes the resolved config next to
/// the command's outputs.
fn prepare_out(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    write_file(&dir.join(format!("{command}.config.toml")), &cfg.to_toml())?;
    Ok(dir)
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    load_manifest(path).map_err(usage)
}

fn load_checkpoint(path: &Path) -> Result<Classifier, CliError> {
    Classifier::load(path).map_err(|e| usage(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn check_fits(model: &Classifier, d: &Dataset, path: &Path) -> Result<(), CliError> {
    let shape = d.sample_shape();
    if shape != Some((model.in_channels(), model.input_len())) || d.n_classes() != model.n_classes() {
        return Err(usage(format!(
            "{}: samples {shape:?} with {} classes do not fit a model for [{}, {}] with {} classes",
            path.display(),
            d.n_classes(),
            model.in_channels(),
            model.input_len(),
            model.n_classes()
        )));
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.synth_spec()?;
    let out = prepare_out(cfg, "synth")?;
    let (src, targets) = synth_generate(&spec).map_err(usage)?;
    for (name, d) in std::iter::once(("source", &src)).chain(spec.targets.iter().map(|t| t.name.as_str()).zip(&targets)) {
        let m = write_dataset(&out, name, d).map_err(failure)?;
        println!("{}\t{} samples", m.display(), d.len());
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let gc = cfg.gradcheck_config()?;
    let out = prepare_out(cfg, "gradcheck")?;
    let results = run_suite(&gc).map_err(failure)?;
    let table = format_table(&results, gc.threshold);
    print!("{table}");
    write_file(&out.join("gradcheck.txt"), &table)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(failure(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

pub fn augment(cfg: &RunConfig, checkpoint: &Path, manifest: Option<&Path>, jobs: Option<usize>) -> Result<(), CliError> {
    let tc = cfg.train_config(jobs)?;
    if tc.erm {
        return Err(usage("augment needs mode ada, tada or tada_plus"));
    }
    let manifest = manifest
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.train.clone())
        .ok_or_else(|| usage("augment needs --manifest or data.train"))?;
    let model = load_checkpoint(checkpoint)?;
    let d = load(&manifest)?;
    check_fits(&model, &d, &manifest)?;
    let out = prepare_out(cfg, "augment")?;

    let generated = generate_all(&model, d.samples(), &tc.adv, jobs).map_err(failure)?;
    let mut augmented = d.empty_like();
    augmented
        .extend(generated.iter().map(|s| s.series.clone()))
        .map_err(failure)?;
    let m = write_dataset(&out, "augmented", &augmented).map_err(failure)?;

    let mut log = String::from("origin_id,kind,label,initial_objective,final_objective,max_abs_displacement\n");
    let mut paths = String::from("origin_id,kind");
    for i in 0..d.sample_shape().map_or(0, |s| s.1) {
        let _ = write!(paths, ",d{i}");
    }
    paths.push('\n');
    let mut bad = Vec::new();
    for s in &generated {
        let first = s.trace.first().copied().unwrap_or(s.objective);
        let reach = s.path.as_ref().map_or(0.0, |p| p.max_abs());
        let _ = writeln!(
            log,
            "{},{},{},{first:.11e},{:.11e},{reach:.6}",
            s.origin_id,
            s.kind.name(),
            s.series.label,
            s.objective
        );
        if let Some(p) = &s.path {
            if let Err(v) = p.check(tc.adv.phi_max) {
                bad.push(format!("sample {} ({}): {v:?}", s.origin_id, s.kind.name()));
            }
            let _ = write!(paths, "{},{}", s.origin_id, s.kind.name());
            for v in &p.displacements {
                let _ = write!(paths, ",{v:.11e}");
            }
            paths.push('\n');
        }
    }
    write_file(&out.join("augment_log.csv"), &log)?;
    write_file(&out.join("augment_paths.csv"), &paths)?;
    println!("{}\t{} samples from {}", m.display(), augmented.len(), d.len());
    if bad.is_empty() {
        Ok(())
    } else {
        Err(failure(format!("invalid warp paths: {}", bad.join("; "))))
    }
}

pub fn train(cfg: &RunConfig, manifest: Option<&Path>, jobs: Option<usize>) -> Result<(), CliError> {
    let tc = cfg.train_config(jobs)?;
    let manifest = manifest.map(Path::to_path_buf).or_else(|| cfg.data.train.clone());
    let (d0, eval_sets) = match &manifest {
        Some(m) => {
            let d = load(m)?;
            let evals = cfg.data.eval.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
            (d, evals)
        }
        None => synth_generate(&cfg.synth_spec()?).map_err(usage)?,
    };
    let (channels, length) = d0
        .sample_shape()
        .ok_or_else(|| usage("training set is empty"))?;
    let init = Classifier::new(channels, length, d0.n_classes(), cfg.seed).map_err(usage)?;
    for (d, p) in eval_sets.iter().zip(&cfg.data.eval) {
        check_fits(&init, d, p)?;
    }
    let out = prepare_out(cfg, "train")?;

    let (model, mut report) = match run(&d0, &tc, init) {
        Ok(r) => r,
        Err(TrainError::Aborted { stage, source, partial }) => {
            write_file(&out.join("report.partial.txt"), &partial.to_string())?;
            return Err(failure(format!("training aborted in {stage}: {source}")));
        }
        Err(e) => return Err(failure(e)),
    };
    if !eval_sets.is_empty() {
        report.record_eval(evaluate(&model, &eval_sets).map_err(failure)?);
    }
    let ckpt = out.join("model.ckpt");
    model
        .save(&ckpt)
        .map_err(|e| failure(format!("cannot write {}: {e}", ckpt.display())))?;
    report.write_to(out.join("report.txt")).map_err(failure)?;
    print!("{report}");
    println!("checkpoint\t{}", ckpt.display());
    Ok(())
}

fn score_table(ev: &Evaluation) -> String {
    let mut s = String::from("domain\tmacro_f1\n");
    for d in &ev.domains {
        let _ = writeln!(s, "{}\t{:.6}", d.domain, d.macro_f1);
    }
    let _ = writeln!(s, "average\t{:.6}", ev.average);
    s
}

/// `eval` (scores and embeddings) and `export-features` (embeddings only).
pub fn eval(cfg: &RunConfig, checkpoint: &Path, manifests: &[PathBuf], score: bool) -> Result<(), CliError> {
    let manifests: Vec<PathBuf> = if manifests.is_empty() {
        cfg.data.eval.clone()
    } else {
        manifests.to_vec()
    };
    if manifests.is_empty() {
        return Err(usage("no manifests: pass --manifest or set data.eval"));
    }
    let model = load_checkpoint(checkpoint)?;
    let sets = manifests.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    for (d, p) in sets.iter().zip(&manifests) {
        check_fits(&model, d, p)?;
    }
    let out = prepare_out(cfg, if score { "eval" } else { "export-features" })?;
    if score {
        let ev = evaluate(&model, &sets).map_err(failure)?;
        let table = score_table(&ev);
        print!("{table}");
        write_file(&out.join("eval.txt"), &table)?;
    }
    let mut all = sets[0].empty_like();
    for d in &sets {
        all.extend(d.samples().iter().cloned()).map_err(usage)?;
    }
    let path = out.join("embeddings.csv");
    export_features(&model, &all, &path).map_err(failure)?;
    println!("embeddings\t{}", path.display());
    Ok(())
}
