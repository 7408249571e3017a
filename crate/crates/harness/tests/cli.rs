use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[data]
size = 16
n_train = 3
n_val = 1
n_test = 2
[denoiser]
layers = 2
channels = 4
[unroll]
n_steps = 2
[smoothing]
samples = 2
[pretrain]
epochs = 2
[finetune]
epochs = 1
[attack]
steps = 2
[eval]
methods = ["modl", "smug"]
bound_random_deltas = 2
"#;

fn smug(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smug"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SMUG_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = smug(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pipeline(cwd: &Path, out: &str, seed: &str) {
    for cmd in [
        vec!["gen-data"],
        vec!["pretrain"],
        vec!["finetune", "--mode", "modl"],
        vec!["finetune", "--mode", "smug"],
        vec!["eval"],
    ] {
        let mut args = vec!["--config", "tiny.toml", "--output", out, "--seed", seed];
        args.extend(cmd);
        ok(&args, cwd);
    }
}

#[test]
fn eval_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    pipeline(dir.path(), "a", "11");
    pipeline(dir.path(), "b", "11");
    for f in [
        "eval.csv",
        "trace_smug.csv",
        "pretrain_epochs.csv",
        "checkpoints/smug.ckpt",
        "data/test.bin",
    ] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    pipeline(dir.path(), "c", "12");
    assert_ne!(
        fs::read(dir.path().join("a/eval.csv")).unwrap(),
        fs::read(dir.path().join("c/eval.csv")).unwrap()
    );
    // every CSV names the producing config
    let text = fs::read_to_string(dir.path().join("a/eval.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.ends_with(",config_hash"));
    assert!(header.starts_with("method,kind,grid_value,clean_psnr,clean_ssim,noise_psnr,noise_ssim,robust_psnr,robust_ssim,rob_error_mean,bound_Cn,holds,wall_seconds"));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a/manifest_eval.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], true);

    // report over one run, then refusal once a second config is mixed in
    ok(&["report", "a"], dir.path());
    assert!(dir.path().join("a/report/long.csv").exists());
    fs::copy(dir.path().join("c/eval.csv"), dir.path().join("a/other.csv")).unwrap();
    let out = smug(&["report", "a"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
    ok(&["report", "a", "--allow-mixed"], dir.path());
}

#[test]
fn report_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = smug(&["report", "."], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no inputs"));
}

#[test]
fn bad_flags_and_configs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!smug(&["eval", "--bogus"], dir.path()).status.success());
    fs::write(dir.path().join("bad.toml"), "[unroll]\nsteps = 3\n").unwrap();
    let out = smug(&["--config", "bad.toml", "gen-data"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
    assert!(!smug(&["finetune", "--mode", "nope"], dir.path()).status.success());
}

#[test]
fn missing_inputs_leave_no_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = smug(&["--config", "tiny.toml", "--output", "o", "pretrain"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
    ok(&["--config", "tiny.toml", "--output", "o", "gen-data"], dir.path());
    let out = smug(&["--config", "tiny.toml", "--output", "o", "eval"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
    let partial = walk(&dir.path().join("o")).into_iter().any(|p| p.ends_with(".partial"));
    assert!(!partial);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_smug"))
        .args(["--config", "tiny.toml", "gen-data"])
        .current_dir(dir.path())
        .env("SMUG_OUTPUT_ROOT", "envroot")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("envroot/data/train.bin").exists());
}

#[test]
fn bound_check_and_sweep_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    pipeline(dir.path(), "o", "5");
    ok(
        &["--config", "tiny.toml", "--output", "o", "--seed", "5", "bound-check"],
        dir.path(),
    );
    let text = fs::read_to_string(dir.path().join("o/bound_check.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().skip(1).all(|l| l.contains(",true,")));
    ok(
        &[
            "--config",
            "tiny.toml",
            "--output",
            "o",
            "--seed",
            "5",
            "sweep",
            "--kind",
            "unroll_steps",
            "--grid",
            "1,2",
        ],
        dir.path(),
    );
    let rows = fs::read_to_string(dir.path().join("o/sweep_unroll_steps.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2);
    ok(
        &[
            "--config",
            "tiny.toml",
            "--output",
            "o",
            "--seed",
            "5",
            "attack",
            "--mode",
            "modl",
        ],
        dir.path(),
    );
    assert!(dir.path().join("o/attack_modl.csv").exists());
}

fn walk(p: &Path) -> Vec<String> {
    let mut v = Vec::new();
    if let Ok(rd) = fs::read_dir(p) {
        for e in rd.flatten() {
            let path = e.path();
            if path.is_dir() {
                v.extend(walk(&path));
            } else {
                v.push(path.to_string_lossy().into_owned());
            }
        }
    }
    v
}
