use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn synthrad(args: &[&str]) -> Output {
    synthrad_env(args, None)
}

fn synthrad_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_synthrad"));
    cmd.args(args).env_remove("SYNTHRAD_SEED");
    if let Some(v) = seed_env {
        cmd.env("SYNTHRAD_SEED", v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = synthrad(args);
    assert!(
        out.status.success(),
        "synthrad {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

fn toy(root: &Path, extra: &[&str]) -> PathBuf {
    let data = root.join("data");
    let mut args = vec!["prepare-data", "--toy", "--out", p(&data), "--resolution", "16", "--per-class", "8", "--seed", "1"];
    args.extend_from_slice(extra);
    ok(&args);
    data
}

fn tiny_diffusion(data: &Path, out: &Path, steps: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "train", "--kind", "diffusion", "--data", p(data), "--out", p(out), "--steps", steps, "--timesteps", "10",
        "--widths", "4,4,4", "--batch-size", "2", "--seed", "2",
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn prepared_dataset_layout_and_rerun_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), &[]);
    let listing = names(&data);
    for f in ["images", "metadata.csv", "prompts.csv", "test_ids.txt"] {
        assert!(listing.contains(&f.to_string()), "{listing:?}");
    }
    let prompts = fs::read_to_string(data.join("prompts.csv")).unwrap();
    assert!(prompts.starts_with("file,image_id,prompt,partition"));
    let images = names(&data.join("images"));
    assert!(!images.is_empty() && images.iter().all(|f| f.ends_with(".pgm") && f.contains("__")));

    let again = dir.path().join("again");
    ok(&["prepare-data", "--toy", "--out", p(&again), "--resolution", "16", "--per-class", "8", "--seed", "1"]);
    assert_eq!(prompts, fs::read_to_string(again.join("prompts.csv")).unwrap());
}

#[test]
fn checkpoints_follow_the_save_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), &[]);
    let out = dir.path().join("run");
    tiny_diffusion(&data, &out, "250", &["--ckpt-every", "100"]);
    let ckpts: Vec<String> = names(&out).into_iter().filter(|n| n.ends_with(".sxr")).collect();
    assert_eq!(ckpts, ["ckpt-000100.sxr", "ckpt-000200.sxr", "ckpt-000250.sxr"]);
    let losses = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 251);
    assert!(names(&out).contains(&"run.toml".to_string()));
}

#[test]
fn sampling_writes_count_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), &[]);
    let run = dir.path().join("run");
    tiny_diffusion(&data, &run, "5", &[]);
    let ck = run.join("ckpt-000005.sxr");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["sample", "--checkpoint", p(&ck), "--prompt", "edema, top left", "--count", "4", "--out", p(out), "--seed", "7"]);
    }
    let files = names(&a);
    assert_eq!(files.len(), 4);
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let c = dir.path().join("c");
    ok(&["sample", "--checkpoint", p(&ck), "--prompt", "edema, top left", "--count", "4", "--out", p(&c), "--seed", "8"]);
    assert_ne!(fs::read(a.join(&files[0])).unwrap(), fs::read(c.join(&files[0])).unwrap());
}

#[test]
fn misspelt_prompt_is_rejected_with_a_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), &[]);
    let run = dir.path().join("run");
    tiny_diffusion(&data, &run, "1", &[]);
    let out = synthrad(&[
        "sample", "--checkpoint", p(&run.join("ckpt-000001.sxr")), "--prompt", "edma", "--out", p(&dir.path().join("s")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("edma") && err.contains("edema"), "{err}");
}

#[test]
fn experiment_table_uses_the_expected_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "prepare-data", "--toy", "--out", p(&data), "--resolution", "16", "--per-class", "800", "--toy-classes",
        "No Finding,Edema", "--seed", "3",
    ]);
    let out = dir.path().join("exp");
    ok(&[
        "experiment", "--data", p(&data), "--out", p(&out), "--synth-source", "replay", "--epochs", "1", "--seed", "3",
    ]);
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "S. No,Size and Type of Data,Accuracy on test set");
    assert!(lines[1].starts_with("1,1000 Real,"), "{}", lines[1]);
    assert!(lines[2].starts_with("2,500 Real + 500 Synthesised,"), "{}", lines[2]);
    assert!(out.join("results.txt").exists());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), &[]);
    let code = |args: &[&str]| synthrad(args).status.code();

    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["train", "--kind", "bogus", "--data", p(&data), "--out", "x"]), Some(1));
    assert_eq!(code(&["experiment", "--data", p(&data), "--out", p(&dir.path().join("e"))]), Some(1));
    let bad_config = dir.path().join("bad.toml");
    fs::write(&bad_config, "[train]\nsteeps = 3\n").unwrap();
    assert_eq!(
        code(&["train", "--kind", "diffusion", "--data", p(&data), "--out", p(&dir.path().join("t")), "--config", p(&bad_config)]),
        Some(1)
    );
    assert_eq!(code(&["report-balance", "--data", p(&dir.path().join("missing"))]), Some(2));

    let garbage = dir.path().join("garbage.sxr");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&["sample", "--checkpoint", p(&garbage), "--out", p(&dir.path().join("s"))]), Some(2));

    let out = synthrad(&[
        "train", "--kind", "diffusion", "--data", p(&data), "--out", p(&dir.path().join("blowup")), "--steps", "20",
        "--timesteps", "10", "--widths", "4,4,4", "--batch-size", "2", "--lr", "1e30",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seed_precedence_is_flag_then_config_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), &[]);
    let config = dir.path().join("seeded.toml");
    fs::write(&config, "seed = 21\n").unwrap();
    let run_dir = dir.path().join("r");
    let seed_of = |extra: &[&str], env: Option<&str>| {
        let mut args = vec![
            "train", "--kind", "diffusion", "--data", p(&data), "--out", p(&run_dir), "--steps", "1",
            "--timesteps", "10", "--widths", "4,4,4", "--batch-size", "1",
        ];
        args.extend_from_slice(extra);
        let out = synthrad_env(&args, env);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        let at = text.find("(seed ").unwrap() + 6;
        text[at..].split(')').next().unwrap().to_string()
    };
    assert_eq!(seed_of(&[], None), "0");
    assert_eq!(seed_of(&[], Some("33")), "33");
    assert_eq!(seed_of(&["--config", p(&config)], Some("33")), "21");
    assert_eq!(seed_of(&["--config", p(&config), "--seed", "5"], Some("33")), "5");
    let run_toml = fs::read_to_string(dir.path().join("r/run.toml")).unwrap();
    assert!(run_toml.contains("seed = 5"), "{run_toml}");
}

#[test]
fn balance_report_counts_every_finding() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), &[]);
    let csv = dir.path().join("balance.csv");
    let stdout = ok(&["report-balance", "--data", p(&data), "--out", p(&csv)]);
    assert!(stdout.contains("Edema"), "{stdout}");
    assert!(fs::read_to_string(&csv).unwrap().lines().count() > 1);
}
