use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use warpada::warp::WarpPath;

fn warpada(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warpada"))
        .current_dir(dir)
        .env_remove("WARPADA_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small and fast: 3 classes of length 64, 20 per class, one training round.
const SMALL: &str = r#"
seed = 3
[adv]
gamma = 0.1
t_max = 2
t_min = 2
t_final = 2
k_rounds = 1
[synth]
length = 64
n_per_class = 20
[data]
train = "data/source.manifest"
eval = ["data/warp.manifest", "data/amplitude.manifest"]
"#;

fn small_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = warpada(dir.path(), &["synth", "-c", "small.toml", "--out", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_default_writes_four_manifests_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = warpada(dir.path(), &["synth", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = read_tree(&dir.path().join("a"));
    let manifests: Vec<_> = a
        .iter()
        .filter(|(p, _)| p.extension().is_some_and(|e| e == "manifest"))
        .map(|(p, _)| p.to_string_lossy().into_owned())
        .collect();
    assert_eq!(manifests, ["amplitude.manifest", "both.manifest", "source.manifest", "warp.manifest"]);
    assert!(a.iter().any(|(p, _)| p == Path::new("synth.config.toml")));
    let b = read_tree(&dir.path().join("b"));
    let strip = |t: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        t.into_iter().filter(|(p, _)| !p.ends_with("synth.config.toml")).collect()
    };
    assert!(strip(a) == strip(b), "same seed produced different files");
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[adv]\nt_maximum = 3\n").unwrap();
    let o = warpada(dir.path(), &["synth", "-c", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("t_maximum"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let dir = small_workspace();
    for args in [
        &["train", "-c", "small.toml", "--mode", "sgd"][..],
        &["train", "-c", "small.toml", "--jobs", "0"],
        &["augment", "-c", "small.toml", "--checkpoint", "x", "--mode", "erm"],
        &["frobnicate"],
        &["eval", "--manifest", "data/warp.manifest"],
    ] {
        let o = warpada(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "seed = 1\n[synth]\nlength = 64\nn_per_class = 3\n").unwrap();
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_warpada"));
        c.current_dir(dir.path()).env_remove("WARPADA_SEED").args(args);
        if let Some(s) = env {
            c.env("WARPADA_SEED", s);
        }
        assert!(c.output().unwrap().status.success());
    };
    run(&["synth", "-c", "c.toml", "--out", "cfg"], None);
    run(&["synth", "-c", "c.toml", "--out", "env"], Some("9"));
    run(&["synth", "-c", "c.toml", "--out", "flag", "--seed", "9"], Some("4"));
    let src = |d: &str| fs::read(dir.path().join(d).join("source/000000.csv")).unwrap();
    assert_ne!(src("cfg"), src("env"));
    assert_eq!(src("env"), src("flag"));
    let echo = fs::read_to_string(dir.path().join("env/synth.config.toml")).unwrap();
    assert!(echo.contains("seed = 9"));
}

#[test]
fn gradcheck_passes_and_catches_a_flipped_rule() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("g.toml"), "[gradcheck]\npoints = 2\n").unwrap();
    let o = warpada(dir.path(), &["gradcheck", "-c", "g.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let rows = stdout(&o).lines().filter(|l| l.ends_with(" ok")).count();
    assert!(rows >= 12, "{rows}");
    assert!(dir.path().join("out/gradcheck.txt").is_file());
    fs::write(dir.path().join("f.toml"), "[gradcheck]\npoints = 2\nfault = \"conv1d\"\n").unwrap();
    let o = warpada(dir.path(), &["gradcheck", "-c", "f.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

fn strip_clock(report: &str) -> String {
    report
        .lines()
        .filter(|l| !l.starts_with("wall_clock_secs"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn train_is_deterministic_and_echoes_defaults() {
    let dir = small_workspace();
    for out in ["t1", "t2"] {
        let o = warpada(dir.path(), &["train", "-c", "small.toml", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let r1 = fs::read_to_string(dir.path().join("t1/report.txt")).unwrap();
    let r2 = fs::read_to_string(dir.path().join("t2/report.txt")).unwrap();
    assert_eq!(strip_clock(&r1), strip_clock(&r2));
    assert!(r1.contains("sizes = 60,120"), "{r1}");
    // defaults not set in the file still appear
    assert!(r1.contains("config.phi_max = 8"), "{r1}");
    assert!(r1.contains("config.eta = 1"), "{r1}");
    let echo = fs::read_to_string(dir.path().join("t1/train.config.toml")).unwrap();
    assert!(echo.contains("m_window = 10"));
    assert!(dir.path().join("t1/model.ckpt").is_file());
}

#[test]
fn erm_skips_rounds() {
    let dir = small_workspace();
    let o = warpada(dir.path(), &["train", "-c", "small.toml", "--mode", "erm", "--out", "erm"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = fs::read_to_string(dir.path().join("erm/report.txt")).unwrap();
    assert!(r.contains("sizes = 60\n"), "{r}");
    assert!(!r.contains("round."), "{r}");
    assert!(r.contains("config.method = erm"));
}

#[test]
fn augment_sizes_and_paths() {
    let dir = small_workspace();
    let o = warpada(dir.path(), &["train", "-c", "small.toml", "--out", "t"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (mode, factor) in [("tada", 1), ("tada_plus", 2), ("ada", 1)] {
        let out = format!("aug_{mode}");
        let o = warpada(
            dir.path(),
            &["augment", "-c", "small.toml", "--checkpoint", "t/model.ckpt", "--mode", mode, "--out", &out],
        );
        assert!(o.status.success(), "{mode}: {}", stderr(&o));
        let ds = warpada::data::load_manifest(dir.path().join(&out).join("augmented.manifest")).unwrap();
        assert_eq!(ds.len(), 60 * factor, "{mode}");
        let log = fs::read_to_string(dir.path().join(&out).join("augment_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 1 + 60 * factor);
        let paths = fs::read_to_string(dir.path().join(&out).join("augment_paths.csv")).unwrap();
        let rows: Vec<&str> = paths.lines().skip(1).collect();
        assert_eq!(rows.len(), if mode == "ada" { 0 } else { 60 });
        for row in rows {
            let displacements = row.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
            let p = WarpPath { displacements };
            assert_eq!(p.len(), 64);
            assert_eq!(p.check(8.0), Ok(()), "{row}");
        }
    }
}

#[test]
fn eval_scores_and_embeddings() {
    let dir = small_workspace();
    fs::write(
        dir.path().join("fit.toml"),
        format!("{SMALL}\n[train]\nlr = 0.1\n").replace("t_final = 2", "t_final = 15"),
    )
    .unwrap();
    let o = warpada(dir.path(), &["train", "-c", "fit.toml", "--mode", "erm", "--out", "t"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = warpada(
        dir.path(),
        &["eval", "-c", "fit.toml", "--checkpoint", "t/model.ckpt", "--manifest", "data/source.manifest", "--out", "e"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("e/eval.txt")).unwrap();
    let f1: f64 = table
        .lines()
        .find(|l| l.starts_with("source\t"))
        .and_then(|l| l.split('\t').nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!(f1 > 0.95, "{table}");
    let emb = fs::read_to_string(dir.path().join("e/embeddings.csv")).unwrap();
    let mut lines = emb.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 67);
    assert_eq!(&header[..3], ["origin_id", "domain_tag", "label"]);
    assert_eq!(lines.count(), 60);

    let o = warpada(
        dir.path(),
        &["export-features", "--checkpoint", "t/model.ckpt", "--manifest", "data/warp.manifest", "--out", "x"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("x/embeddings.csv").is_file());
    assert!(!dir.path().join("x/eval.txt").exists());
}

#[test]
fn missing_checkpoint_names_path() {
    let dir = small_workspace();
    let o = warpada(
        dir.path(),
        &["eval", "--checkpoint", "no/such/model.ckpt", "--manifest", "data/warp.manifest"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/model.ckpt"), "{}", stderr(&o));
}
