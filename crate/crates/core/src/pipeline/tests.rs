use super::*;

fn tiny_config_text(root: &Path) -> String {
    format!(
        r#"
version = 1
seed = 11

[paths]
corpus_dir = "{root}/corpus"
manifest = "{root}/corpus/manifest.tsv"
workdir = "{root}/work"

[mfcc]
fft_size = 512

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
seed = 5

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
    )
}

fn setup(root: &Path) -> PipelineConfig {
    let cfg = PipelineConfig::parse(&tiny_config_text(root)).unwrap();
    synth_to_disk(&cfg).unwrap();
    cfg
}

/// Everything under a directory as relative path -> file bytes.
fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn visit(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let entry = entry.unwrap();
            let path = entry.path();
            if path.is_dir() {
                visit(base, &path, out);
            } else {
                let rel = path
                    .strip_prefix(base)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    visit(dir, dir, &mut out);
    out
}

#[test]
fn stage_range_parsing() {
    let r = StageRange::parse("features..assign0").unwrap();
    assert_eq!(r.first, Stage::Features);
    assert_eq!(r.last, Stage::Assign0);
    let r = StageRange::parse("lda1").unwrap();
    assert_eq!(r.first, Stage::Lda1);
    assert_eq!(r.last, Stage::Lda1);
    let r = StageRange::parse("..dedup0").unwrap();
    assert_eq!(r.first, Stage::Features);
    let r = StageRange::parse("extract..").unwrap();
    assert_eq!(r.last, Stage::Report);
    assert!(StageRange::parse("assign0..features").is_err());
    assert!(StageRange::parse("nope").is_err());
}

#[test]
fn stage_seeds_are_distinct_and_stable() {
    let a = stage_seed(11, "kmeans0");
    let b = stage_seed(11, "kmeans1");
    let c = stage_seed(12, "kmeans0");
    assert_ne!(a, b);
    assert_ne!(a, c);
    assert_eq!(a, stage_seed(11, "kmeans0"));
}

#[test]
fn front_half_produces_one_topic_label_per_utterance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    run(&cfg, StageRange::parse("features..assign0").unwrap()).unwrap();
    let topics = files::read_labels(&cfg.paths.workdir.join("assign0/topics.tsv")).unwrap();
    assert_eq!(topics.len(), 10);
    assert!(topics.values().all(|seq| seq.len() == 1));
    // Later-stage artifacts must not exist yet.
    assert!(!cfg.paths.workdir.join("pretrain0/encoder.ckpt").exists());
}

#[test]
fn missing_artifacts_give_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let err = run(&cfg, StageRange::parse("lda0..assign0").unwrap()).unwrap_err();
    assert!(matches!(err, Error::Dependency(_)), "{err}");
}

#[test]
fn full_run_chains_hashes_and_reruns_are_noops() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let info = run(&cfg, StageRange::full()).unwrap();
    assert_eq!(info.executed.len(), 13);
    assert!(info.skipped.is_empty());

    // Hash chain: assign0's recorded output equals pretrain0's recorded input.
    let read_summary = |stage: &str| -> StageSummary {
        let text = std::fs::read_to_string(cfg.paths.workdir.join(format!("{stage}/summary.json")))
            .unwrap();
        serde_json::from_str(&text).unwrap()
    };
    let assign0 = read_summary("assign0");
    let pretrain0 = read_summary("pretrain0");
    assert_eq!(
        assign0.outputs["assign0/topics.tsv"], pretrain0.inputs["assign0/topics.tsv"],
        "stage summaries do not chain"
    );
    let kmeans0 = read_summary("kmeans0");
    let dedup0 = read_summary("dedup0");
    assert_eq!(
        kmeans0.outputs["kmeans0/labels.tsv"],
        dedup0.inputs["kmeans0/labels.tsv"]
    );

    // Rerunning everything over unchanged config+inputs is a no-op.
    let before = tree_bytes(&cfg.paths.workdir);
    let info = run(&cfg, StageRange::full()).unwrap();
    assert!(info.executed.is_empty(), "reran {:?}", info.executed);
    assert_eq!(info.skipped.len(), 13);
    assert_eq!(tree_bytes(&cfg.paths.workdir), before);
}

#[test]
fn deleting_a_stage_invalidates_only_later_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    run(&cfg, StageRange::parse("features..lda0").unwrap()).unwrap();
    std::fs::remove_dir_all(cfg.paths.workdir.join("dedup0")).unwrap();
    let info = run(&cfg, StageRange::parse("features..lda0").unwrap()).unwrap();
    // dedup0 recomputes bit-identically, so lda0's recorded inputs still
    // match and it stays valid; only the deleted stage reruns.
    assert_eq!(
        info.executed,
        vec!["dedup0"],
        "executed {:?}",
        info.executed
    );
    assert_eq!(info.skipped, vec!["features", "kmeans0", "lda0"]);
}

#[test]
fn identical_config_and_seed_give_bit_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_a = setup(dir.path());
    // Same corpus, second workdir.
    let text_b = tiny_config_text(dir.path()).replace("/work\"", "/work_b\"");
    let cfg_b = PipelineConfig::parse(&text_b).unwrap();

    run(&cfg_a, StageRange::parse("features..assign0").unwrap()).unwrap();
    run(&cfg_b, StageRange::parse("features..assign0").unwrap()).unwrap();
    let tree_a = tree_bytes(&cfg_a.paths.workdir);
    let tree_b = tree_bytes(&cfg_b.paths.workdir);
    assert_eq!(
        tree_a.keys().collect::<Vec<_>>(),
        tree_b.keys().collect::<Vec<_>>()
    );
    for (path, bytes) in &tree_a {
        assert_eq!(bytes, &tree_b[path], "artifact {path} differs between runs");
    }
}

#[test]
fn report_matches_direct_metric_calls() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    run(&cfg, StageRange::full()).unwrap();

    let csv = std::fs::read_to_string(cfg.paths.workdir.join("report/report_it0.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "attribute,K,purity,random_mean,random_std"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "class");
    let reported: f64 = row[2].parse().unwrap();

    // Recompute purity directly from the same files.
    let manifest = Manifest::load(&cfg.paths.manifest).unwrap();
    let attrs: BTreeMap<String, String> = manifest
        .entries
        .iter()
        .map(|e| (e.utt_id.clone(), e.attrs["class"].clone()))
        .collect();
    let topics: BTreeMap<String, u32> =
        files::read_labels(&cfg.paths.workdir.join("assign0/topics.tsv"))
            .unwrap()
            .into_iter()
            .map(|(utt, seq)| (utt, seq[0]))
            .collect();
    let pair = metrics::LabelPair::new(attrs, topics).unwrap();
    assert_eq!(reported, metrics::purity(&pair));

    let table = std::fs::read_to_string(cfg.paths.workdir.join("report/report.txt")).unwrap();
    assert!(table.contains("class"), "{table}");
    assert!(table.contains("iteration 0:"), "{table}");
    assert!(table.contains("pretrain1/loss.csv"), "{table}");
}

#[test]
fn single_iteration_config_runs_truncated_stage_list() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny_config_text(dir.path());
    // Strip iteration1 and declare a single round.
    let head = text.split("[iteration1]").next().unwrap();
    let synth = format!("[synth]{}", text.split("[synth]").nth(1).unwrap());
    let single = format!("iterations = 1\n{head}{synth}");
    let cfg = PipelineConfig::parse(&single).unwrap();
    synth_to_disk(&cfg).unwrap();

    let info = run(&cfg, StageRange::full()).unwrap();
    assert_eq!(
        info.executed,
        vec![
            "features",
            "kmeans0",
            "dedup0",
            "lda0",
            "assign0",
            "pretrain0",
            "report"
        ]
    );
    assert!(!cfg.paths.workdir.join("extract").exists());
    assert!(cfg.paths.workdir.join("report/report_it0.csv").is_file());
    assert!(!cfg.paths.workdir.join("report/report_it1.csv").exists());

    // Iteration-1 stages are rejected outright under iterations = 1.
    let err = run(&cfg, StageRange::parse("kmeans1").unwrap()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn workdir_lock_blocks_concurrent_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    std::fs::create_dir_all(&cfg.paths.workdir).unwrap();
    std::fs::write(cfg.paths.workdir.join(".lock"), b"").unwrap();
    let err = run(&cfg, StageRange::full()).unwrap_err();
    assert!(matches!(err, Error::Dependency(_)), "{err}");
    std::fs::remove_file(cfg.paths.workdir.join(".lock")).unwrap();
}

#[test]
fn config_change_invalidates_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    run(&cfg, StageRange::parse("features..kmeans0").unwrap()).unwrap();
    let tweaked = tiny_config_text(dir.path()).replace("units = 12", "units = 13");
    let cfg2 = PipelineConfig::parse(&tweaked).unwrap();
    let info = run(&cfg2, StageRange::parse("features..kmeans0").unwrap()).unwrap();
    // Features ignore the unit count but share the config hash, so both rerun.
    assert!(info.executed.contains(&"kmeans0"));
    let cb = quantizer::read_codebook(&cfg.paths.workdir.join("kmeans0/codebook.cb")).unwrap();
    assert_eq!(cb.units(), 13);
}
