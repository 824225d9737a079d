//! End-to-end checks against the compiled binary: subcommands, artifact
//! layout, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pseudotopic"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn binary");
    assert!(
        out.status.success(),
        "command {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    bin()
        .args(args)
        .output()
        .expect("spawn binary")
        .status
        .code()
        .unwrap_or(-1)
}

fn write_config(root: &Path) -> String {
    let text = format!(
        r#"
version = 1
seed = 21

[paths]
corpus_dir = "{root}/corpus"
manifest = "{root}/corpus/manifest.tsv"
workdir = "{root}/work"

[iteration0]
units = 12
topics = 2
train_steps = 8

[iteration0.encoder]
model_dim = 8
layers = 2
heads = 2
ff_dim = 16
mask_start_prob = 0.1
mask_span = 4

[iteration1]
units = 16
topics = 2
train_steps = 8

[iteration1.encoder]
model_dim = 8
layers = 2
heads = 2
ff_dim = 16
mask_start_prob = 0.1
mask_span = 4

[synth]
utterances = 10
duration_secs = [0.25, 0.4]
noise_level = 0.02
seed = 3

[[synth.classes]]
name = "low"
band_hz = [300.0, 1200.0]
proportion = 0.5

[[synth.classes]]
name = "high"
band_hz = [2500.0, 5500.0]
proportion = 0.5
"#,
        root = root.display()
    );
    let path = root.join("pipeline.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn full_workflow_via_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());

    // Report before anything exists: dependency failure, exit 2.
    assert_eq!(exit_code(&["report", "--config", &config]), 2);

    let out = run_ok(&["synth", "--config", &config]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 10 utterances"));

    // Front half first; topic labels must exist afterwards.
    run_ok(&["run", "--config", &config, "--stages", "features..assign0"]);
    let topics = dir.path().join("work/assign0/topics.tsv");
    assert!(topics.is_file());

    // Requesting a later stage without its inputs: dependency error.
    assert_eq!(
        exit_code(&["run", "--config", &config, "--stages", "kmeans1"]),
        2
    );

    // Finish the pipeline; rerun reports everything up to date.
    run_ok(&["run", "--config", &config]);
    let out = run_ok(&["run", "--config", &config]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("report: up to date"), "{stdout}");
    assert!(!stdout.contains(": done"), "{stdout}");

    let out = run_ok(&["report", "--config", &config]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("attribute"), "{stdout}");
    assert!(stdout.contains("class"), "{stdout}");
    let out = run_ok(&["report", "--config", &config, "--conventional"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("conventional"));

    // Inspect each artifact family.
    for (rel, needle) in [
        ("work/features", "feature file"),
        ("work/kmeans0/codebook.cb", "codebook"),
        ("work/lda0/model.lda", "topic model"),
        ("work/pretrain0/encoder.ckpt", "encoder checkpoint"),
        ("work/assign0/topics.tsv", "text artifact"),
    ] {
        let path = if rel.ends_with("features") {
            let first = std::fs::read_dir(dir.path().join(rel))
                .unwrap()
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .find(|p| p.extension().is_some_and(|x| x == "feat"))
                .unwrap();
            first.to_string_lossy().into_owned()
        } else {
            dir.path().join(rel).to_string_lossy().into_owned()
        };
        let out = run_ok(&["inspect", &path]);
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains(needle), "inspect {path}: {stdout}");
    }
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(exit_code(&["run"]), 1); // missing --config
    assert_eq!(exit_code(&["no-such-command"]), 1);

    let config = write_config(dir.path());
    assert_eq!(
        exit_code(&["run", "--config", &config, "--stages", "bogus..report"]),
        1
    );

    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "version = 1\nunknown_key = true\n").unwrap();
    assert_eq!(
        exit_code(&["run", "--config", &broken.to_string_lossy()]),
        1
    );

    assert_eq!(exit_code(&["--help"]), 0);
}

#[test]
fn numeric_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    run_ok(&["synth", "--config", &config]);

    // Truncate one utterance below a single analysis frame; the feature
    // stage must fail numerically (exit 3), not as usage or dependency.
    let wav = dir.path().join("corpus/utt00000.wav");
    let bytes = std::fs::read(&wav).unwrap();
    let mut short = bytes[..44 + 2 * 100].to_vec(); // 100 samples < 25 ms
    let data_len = (short.len() - 44) as u32;
    let riff_len = (short.len() - 8) as u32;
    short[4..8].copy_from_slice(&riff_len.to_le_bytes());
    short[40..44].copy_from_slice(&data_len.to_le_bytes());
    std::fs::write(&wav, short).unwrap();

    assert_eq!(
        exit_code(&["run", "--config", &config, "--stages", "features"]),
        3
    );
}

#[test]
fn seed_and_workdir_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    run_ok(&["synth", "--config", &config]);

    let alt = dir.path().join("alt_work");
    run_ok(&[
        "run",
        "--config",
        &config,
        "--stages",
        "features..kmeans0",
        "--workdir",
        &alt.to_string_lossy(),
    ]);
    assert!(alt.join("kmeans0/codebook.cb").is_file());

    // A different seed produces different labels in yet another workdir.
    let alt2 = dir.path().join("alt_work2");
    run_ok(&[
        "run",
        "--config",
        &config,
        "--stages",
        "features..kmeans0",
        "--workdir",
        &alt2.to_string_lossy(),
        "--seed",
        "99",
    ]);
    let a = std::fs::read(alt.join("kmeans0/labels.tsv")).unwrap();
    let b = std::fs::read(alt2.join("kmeans0/labels.tsv")).unwrap();
    assert_ne!(a, b, "seed override had no effect");
}
