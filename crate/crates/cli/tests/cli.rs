use std::path::Path;
use std::process::{Command, Output};

use sparks_cli::{compress, Selector};
use sparks_core::trainer::{Dataset, SyntheticBlobs};
use sparks_core::{infer, load_model, save_model, FileFormat, InferOptions};

fn sparks(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparks"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_codebook_sizes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("k3a.spks");
    let b = dir.path().join("k3b.spks");
    let c = dir.path().join("k2.spks");
    for (k, out) in [("3", &a), ("3", &b), ("2", &c)] {
        let o = sparks(&["gen-codebook", "-k", k, "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let bytes = std::fs::read(&a).unwrap();
    // magic, version, K, log2 n; 512 two-byte words; zero layer count
    assert_eq!(bytes.len(), 8 + 512 * 2 + 2);
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(load_model(&a).unwrap().sub_codebook().len(), 512);
    let small = load_model(&c).unwrap();
    assert_eq!(small.sub_codebook().len(), 16);
    // K=2 words fit in one byte
    assert_eq!(std::fs::read(&c).unwrap().len(), 8 + 16 + 2);
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn train_quantizer_fixture_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = |out: &str| {
        format!("# K=2 fixture\nmode=quantizer\nkernel_size=2\nn=4\nkernels=32\nsteps=40\nout_dir={out}\n")
    };
    for out in ["a", "b"] {
        let path = write_config(dir.path(), &cfg(out));
        let o = sparks(&["train", p(&path)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("final loss"));
    }
    let loss = std::fs::read_to_string(dir.path().join("a/loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 1 + 40);
    for f in ["loss.csv", "selection.csv", "perm_gap.csv", "codebook.spks"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(load_model(&dir.path().join("a/codebook.spks")).unwrap().sub_codebook().len(), 4);

    // the global flag overrides the config seed
    let path = write_config(dir.path(), &cfg("c"));
    assert!(sparks(&["--seed", "9", "train", p(&path)]).status.success());
    assert_ne!(
        std::fs::read(dir.path().join("a/loss.csv")).unwrap(),
        std::fs::read(dir.path().join("c/loss.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "n=16\nlearnrate=0.1\n");
    let o = sparks(&["train", p(&path)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnrate"), "{}", stderr(&o));

    let path = write_config(dir.path(), "n=17\n");
    assert_eq!(sparks(&["train", p(&path)]).status.code(), Some(2));
    assert_eq!(sparks(&["train", "/nonexistent/run.cfg"]).status.code(), Some(2));
    assert_eq!(sparks(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sparks(&["report"]).status.code(), Some(2));
}

/// Trains a tiny toy net through the CLI and returns its output directory.
fn toy_outputs(dir: &Path) -> std::path::PathBuf {
    let path = write_config(
        dir,
        "mode=toynet\nn=16\nsamples=48\nwarmup_steps=20\nsteps=6\nsettle_steps=4\nbatch=8\nout_dir=toy\n",
    );
    let o = sparks(&["--threads", "2", "train", p(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("final accuracy"));
    let out = dir.join("toy");
    for f in ["metrics.csv", "selection.csv", "perm_gap.csv", "model.spks", "checkpoint.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    out
}

#[test]
fn compress_prints_rate_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_outputs(dir.path());
    let ck = toy.join("checkpoint.json");
    let full = dir.path().join("full.spks");
    let o = sparks(&["compress", p(&ck), "--n", "512", "--out", p(&full)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("bits/weight: 1.000"), "{}", stdout(&o));

    for sel in ["topn", "random", "interval"] {
        let out = dir.path().join(format!("{sel}.spks"));
        let o = sparks(&["compress", p(&ck), "--n", "32", "--selector", sel, "--out", p(&out)]);
        assert!(o.status.success(), "{sel}: {}", stderr(&o));
        assert!(stdout(&o).contains("bits/weight: 0.556"), "{}", stdout(&o));
        assert_eq!(load_model(&out).unwrap().sub_codebook().len(), 32);
    }

    // 1-bit input regrouped to a learned codebook
    let one = dir.path().join("one.spk1");
    assert!(sparks(&["compress", p(&ck), "--n", "512", "--one-bit", "--out", p(&one)]).status.success());
    assert_eq!(&std::fs::read(&one).unwrap()[..4], b"SPK1");
    let learned = dir.path().join("learned.spks");
    let o = sparks(&[
        "compress",
        p(&one),
        "--selector",
        "learned",
        "--codebook",
        p(&toy.join("model.spks")),
        "--out",
        p(&learned),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("bits/weight: 0.444"), "{}", stdout(&o));
    assert_eq!(sparks(&["compress", p(&one), "--out", p(&learned)]).status.code(), Some(2));

    // the written file infers exactly like the in-memory result
    let mem = compress(&ck, Some(32), Selector::Topn, None, 0).unwrap();
    let path = dir.path().join("mem.spks");
    save_model(&mem, &path, FileFormat::SubBit).unwrap();
    let back = load_model(&path).unwrap();
    let data = SyntheticBlobs::default().generate(6, 3).unwrap();
    for i in 0..data.len() {
        let x: Vec<f32> = data.image(i).iter().map(|&v| v as f32).collect();
        assert_eq!(
            infer(&mem, &x, data.dims(), InferOptions::default()).unwrap(),
            infer(&back, &x, data.dims(), InferOptions::default()).unwrap()
        );
    }
}

#[test]
fn eval_reports_accuracy_and_reference_match() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_outputs(dir.path());
    let data = dir.path().join("data");
    let o = sparks(&["--seed", "5", "gen-data", "--samples", "40", "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = toy.join("model.spks");
    let csv = dir.path().join("timing.csv");
    let a = sparks(&["eval", p(&model), "--data", p(&data), "--reference", "--csv", p(&csv)]);
    assert!(a.status.success(), "{}", stderr(&a));
    let text = stdout(&a);
    assert!(text.contains("exact-match: true"), "{text}");
    assert!(text.contains("samples: 40"));
    let acc = |t: &str| t.lines().find(|l| l.starts_with("accuracy:")).unwrap().to_string();
    let b = sparks(&["eval", p(&model), "--data", p(&data)]);
    assert_eq!(acc(&text), acc(&stdout(&b)));
    let timing = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(timing.lines().next(), Some("layer,kind,us_per_sample"));
    assert_eq!(timing.lines().count(), 1 + 4);

    let empty = dir.path().join("empty");
    Dataset::new(1, 8, 8, Vec::new(), Vec::new()).unwrap().save(&empty).unwrap();
    let o = sparks(&["eval", p(&model), "--data", p(&empty)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no samples"), "{}", stderr(&o));
}

#[test]
fn report_builtin_and_custom() {
    let o = sparks(&["report", "--builtin", "resnet18", "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let total = text.lines().find(|l| l.starts_with("total,")).unwrap();
    assert_eq!(
        total,
        "total,10985472,8544256,7323648,6103040,1676279808,1215461888,883898624,501356672"
    );

    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("one.arch");
    // name in_w in_h in_c out_w out_h out_c k_w k_h binarized
    std::fs::write(&arch, "# single layer\nl1 8 8 16 4 4 32 3 3 1\n").unwrap();
    let o = sparks(&["report", "--arch", p(&arch), "--modes", "1bit,16", "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row = stdout(&o).lines().find(|l| l.starts_with("l1,")).unwrap().to_string();
    let positions = 16 * 4 * 4;
    let base = positions * 9 * 32;
    let lut = positions * 9 * 16 + 32 * (positions - 1) / 2;
    assert_eq!(row, format!("l1,{},{},{},{}", 32 * 16 * 9, 32 * 16 * 4, base, base.min(lut)));

    std::fs::write(&arch, "# nothing here\n").unwrap();
    let o = sparks(&["report", "--arch", p(&arch)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no layers"), "{}", stderr(&o));
}
