use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn afine(args: &[&str]) -> Output {
    afine_in(args, None)
}

fn afine_in(args: &[&str], corpus_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_afine"));
    cmd.args(args).env_remove("AFINE_CORPUS_ROOT").env("RUST_LOG", "off");
    if let Some(root) = corpus_env {
        cmd.env("AFINE_CORPUS_ROOT", root);
    }
    cmd.output().expect("spawn afine")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic corpus plus a fresh toy checkpoint.
fn corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let root = dir.join("synth");
    let o = afine(&["synth", "--out-dir", s(&root), "--contents", "4", "--size", "16", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = dir.join("m.ckpt");
    let o = afine(&["init", "--out", s(&model), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    (root, model)
}

fn listing(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(listing(&p));
        }
        out.push(p);
    }
    out.sort();
    out
}

#[test]
fn help_exits_zero() {
    let o = afine(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("Usage"));
    for sub in ["train", "score", "eval", "aggregate", "make-triplets", "split", "gradcheck"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = afine(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn score_prints_one_real() {
    let dir = tempfile::tempdir().unwrap();
    let (root, model) = corpus(dir.path());
    let json = dir.path().join("score.json");
    let (r, t) = (root.join("images/c0000/ref.png"), root.join("images/c0000/d2.png"));
    let o = afine(&["score", "--ref", s(&r), "--test", s(&t), "--model", s(&model), "--metric", "afine", "--json-out", s(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let value: f64 = out.trim().parse().expect("a single real");
    assert_eq!(out.lines().count(), 1);
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(record["metric"], "afine");
    assert_eq!(record["value"].as_f64(), Some(value));

    let o = afine(&["score", "--ref", s(&r), "--test", s(&r), "--metric", "psnr"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 1e9);
}

#[test]
fn afine_without_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (root, _) = corpus(dir.path());
    let r = root.join("images/c0000/ref.png");
    let o = afine(&["score", "--ref", s(&r), "--test", s(&r), "--metric", "afine"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--model"));
}

#[test]
fn missing_image_is_a_data_error() {
    let o = afine(&["score", "--ref", "/nonexistent/a.png", "--test", "/nonexistent/b.png", "--metric", "ssim"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/a.png"));
}

#[test]
fn bad_config_value_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "seed = 1\nbatch_size = abc\n").unwrap();
    let o = afine(&["train", "--config", s(&conf), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("batch_size") && err.contains(":2:"), "{err}");
}

fn train_args<'a>(root: &'a Path, out: &'a Path) -> Vec<String> {
    [
        "train",
        "--config",
        s(&root.join("afine.conf")),
        "--out",
        s(out),
        "--set",
        "iters_phase1=6",
        "--set",
        "iters_phase2=6",
        "--set",
        "iters_phase3=6",
        "--set",
        "checkpoint_every=3",
        "--set",
        "batch_size=4",
    ]
    .iter()
    .map(|a| a.to_string())
    .collect()
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (root, model) = corpus(dir.path());
    let before = listing(dir.path());
    let out = dir.path().join("run");
    let mut args = train_args(&root, &out);
    args.push("--dry-run".into());
    let o = afine(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = afine(&[
        "eval",
        "--dry-run",
        "--manifest",
        s(&root.join("pairs.csv")),
        "--corpus-root",
        s(&root.join("images")),
        "--model",
        s(&model),
        "--report",
        s(&dir.path().join("r.csv")),
        "--plot",
        s(&dir.path().join("r.png")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = afine(&["split", "--dry-run", "--contents", s(&root.join("contents.txt")), "--out-dir", s(&dir.path().join("splits"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(listing(dir.path()), before);
}

#[test]
fn dry_run_reports_unresolved_images() {
    let dir = tempfile::tempdir().unwrap();
    let (root, _) = corpus(dir.path());
    fs::remove_file(root.join("images/c0001/d3.png")).unwrap();
    let args = train_args(&root, &dir.path().join("run"));
    let mut args: Vec<&str> = args.iter().map(String::as_str).collect();
    args.push("--dry-run");
    let o = afine(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c0001/d3.png"));
}

#[test]
fn seeded_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (root, _) = corpus(dir.path());
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let args = train_args(&root, &out);
        let o = afine(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push((fs::read_to_string(out.join("trace.csv")).unwrap(), fs::read(out.join("model.ckpt")).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let trace = &runs[0].0;
    assert!(trace.starts_with("iter,phase,lr,loss,val_accuracy\n"));
    assert_eq!(trace.lines().count(), 1 + 18);
    for phase in 1..=3 {
        for kind in ["latest", "best"] {
            assert!(dir.path().join(format!("a/phase{phase}_{kind}.ckpt")).is_file());
        }
    }
}

#[test]
fn single_phase_resumes_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (root, model) = corpus(dir.path());
    let out = dir.path().join("p3");
    let mut args = train_args(&root, &out);
    args.extend(["--phase", "3", "--resume", s(&model)].map(String::from));
    let o = afine(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.lines().skip(1).all(|l| l.split(',').nth(1) == Some("3")));
}

#[test]
fn eval_writes_report_json_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let (root, model) = corpus(dir.path());
    let (report, json, plot) = (dir.path().join("r.csv"), dir.path().join("r.json"), dir.path().join("r.png"));
    let manifest = root.join("pairs.csv");
    let o = afine_in(
        &["eval", "--manifest", s(&manifest), "--model", s(&model), "--report", s(&report), "--json", s(&json), "--plot", s(&plot)],
        Some(&root.join("images")),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("metric,subset,count,accuracy\n"));
    assert!(csv.lines().last().unwrap().starts_with("afine,overall,40,"));
    assert!(fs::read_to_string(&json).unwrap().contains("\"overall\""));
    assert_eq!(&fs::read(&plot).unwrap()[..4], b"\x89PNG");

    let o = afine(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--corpus-root",
        s(&root.join("images")),
        "--metric",
        "ssim",
        "--subset",
        "ref>test",
        "--report",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.contains("ssim,ref>test,16,") && !csv.contains("test-vs-test"));
}

#[test]
fn annotation_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let votes = d.join("votes.csv");
    fs::write(
        &votes,
        "reference_path,test_path,vote,subject_id\n\
         r1.png,a.png,better,s1\nr1.png,a.png,better,s2\nr1.png,a.png,worse,s3\n\
         r1.png,b.png,worse,s1\nr1.png,b.png,similar,s2\nr1.png,b.png,better,s3\n\
         r1.png,c.png,similar,s1\nr1.png,c.png,similar,s2\nr1.png,c.png,similar,s3\n",
    )
    .unwrap();
    let labels = d.join("labels.csv");
    let stats = d.join("stats.csv");
    let o = afine(&["aggregate", "--votes", s(&votes), "--out", s(&labels), "--stats-out", s(&stats)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("outlier 1 (33.33%)"));
    assert!(fs::read_to_string(&stats).unwrap().contains("outlier,1,"));

    let o = afine(&["aggregate", "--votes", s(&labels), "--out", s(&d.join("again.csv"))]);
    assert_eq!(o.status.code(), Some(2));

    let triplets = d.join("triplets.csv");
    let o = afine(&["make-triplets", "--labels", s(&labels), "--mode", "both", "--out", s(&triplets)]);
    assert!(o.status.success(), "{}", stderr(&o));
    // two ref-as-test triplets and one cross-test triplet
    assert!(stdout(&o).contains("3 triplets"));
    let o = afine(&["make-triplets", "--labels", s(&labels), "--mode", "sideways", "--out", s(&triplets)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn split_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let contents = dir.path().join("contents.txt");
    fs::write(&contents, (0..100).map(|i| format!("content{i:03}\n")).collect::<String>()).unwrap();
    let mut outputs = Vec::new();
    for run in ["x", "y"] {
        let out = dir.path().join(run);
        let o = afine(&["split", "--contents", s(&contents), "--ratios", "7:1:2", "--seed", "5", "--out-dir", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("train 70, val 10, test 20"));
        outputs.push(["train.txt", "val.txt", "test.txt"].map(|f| fs::read_to_string(out.join(f)).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn gradcheck_passes_and_fails_by_tolerance() {
    let args = ["gradcheck", "--group", "fidelity", "--group", "calibration", "--group", "scale", "--samples", "2"];
    let o = afine(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("parameter,index,analytic,numeric,relative_error\n"));
    let mut strict = args.to_vec();
    strict.extend(["--tolerance", "1e-300"]);
    let o = afine(&strict);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("gradient check failed"));
}
