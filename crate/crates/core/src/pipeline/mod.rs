//! Two-iteration pipeline orchestration with resumable stage artifacts.
//!
//! Stages in order: `features -> kmeans0 -> dedup0 -> lda0 -> assign0 ->
//! pretrain0 -> extract -> kmeans1 -> dedup1 -> lda1 -> assign1 ->
//! pretrain1 -> report`. Every stage writes its artifacts plus a
//! `summary.json` recording the config hash and the hashes of its inputs
//! and outputs; rerunning a completed stage with identical config and
//! inputs is a no-op. Per-stage seeds derive from the global seed and the
//! stage name, so any stage can be re-run independently yet reproducibly,
//! and (config, seed) determines every artifact byte.

pub mod config;

pub use config::{IterationConfig, PipelineConfig};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::files::{self, LabelMap};
use crate::corpus::{self, Manifest};
use crate::encoder::{self, EncoderConfig, EncoderParams, TrainItem, TrainOptions};
use crate::error::{Error, Result};
use crate::features::{mfcc, FeatureMatrix};
use crate::matrix::Matrix;
use crate::quantizer::{self, FeatureSpace, PseudoLabelSeq, PseudoText};
use crate::{lda, metrics};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Per-stage seed: first 8 little-endian bytes of
/// `sha256(global_seed_le || name)`.
pub fn stage_seed(global: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Features,
    Kmeans0,
    Dedup0,
    Lda0,
    Assign0,
    Pretrain0,
    Extract,
    Kmeans1,
    Dedup1,
    Lda1,
    Assign1,
    Pretrain1,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 13] = [
        Stage::Features,
        Stage::Kmeans0,
        Stage::Dedup0,
        Stage::Lda0,
        Stage::Assign0,
        Stage::Pretrain0,
        Stage::Extract,
        Stage::Kmeans1,
        Stage::Dedup1,
        Stage::Lda1,
        Stage::Assign1,
        Stage::Pretrain1,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Features => "features",
            Stage::Kmeans0 => "kmeans0",
            Stage::Dedup0 => "dedup0",
            Stage::Lda0 => "lda0",
            Stage::Assign0 => "assign0",
            Stage::Pretrain0 => "pretrain0",
            Stage::Extract => "extract",
            Stage::Kmeans1 => "kmeans1",
            Stage::Dedup1 => "dedup1",
            Stage::Lda1 => "lda1",
            Stage::Assign1 => "assign1",
            Stage::Pretrain1 => "pretrain1",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }

    fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).unwrap()
    }

    /// Stages that exist for the configured iteration count.
    pub fn available(iterations: usize) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| {
                iterations >= 2 || s.index() <= Stage::Pretrain0.index() || *s == Stage::Report
            })
            .collect()
    }
}

/// Inclusive stage range, parsed from `A..B`, a single stage name, or an
/// open end (`..B`, `A..`).
#[derive(Debug, Clone, Copy)]
pub struct StageRange {
    pub first: Stage,
    pub last: Stage,
}

impl StageRange {
    pub fn full() -> Self {
        StageRange {
            first: Stage::Features,
            last: Stage::Report,
        }
    }

    pub fn single(stage: Stage) -> Self {
        StageRange {
            first: stage,
            last: stage,
        }
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let range = if let Some((a, b)) = spec.split_once("..") {
            let first = if a.is_empty() {
                Stage::Features
            } else {
                Stage::parse(a)?
            };
            let last = if b.is_empty() {
                Stage::Report
            } else {
                Stage::parse(b)?
            };
            StageRange { first, last }
        } else {
            StageRange::single(Stage::parse(spec)?)
        };
        if range.first.index() > range.last.index() {
            return Err(Error::Config(format!(
                "stage range `{spec}` runs backwards ({} after {})",
                range.first.name(),
                range.last.name()
            )));
        }
        Ok(range)
    }

    fn contains(&self, s: Stage) -> bool {
        (self.first.index()..=self.last.index()).contains(&s.index())
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct StageSummary {
    stage: String,
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    details: serde_json::Map<String, serde_json::Value>,
}

/// Exclusive ownership of a workdir for the duration of a run.
struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    fn acquire(workdir: &Path) -> Result<Self> {
        let path = workdir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(WorkdirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Dependency(format!(
                    "workdir {} is locked by another run (remove {} if stale)",
                    workdir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    workdir: PathBuf,
    manifest_path: PathBuf,
    manifest: Manifest,
    config_hash: String,
}

/// Outcome of a `run` invocation: which stages executed and which were
/// already up to date.
#[derive(Debug, Default)]
pub struct RunInfo {
    pub executed: Vec<&'static str>,
    pub skipped: Vec<&'static str>,
}

/// Run the requested stage range. Prior-stage artifacts must already exist
/// for the first requested stage; reruns over unchanged config and inputs
/// are no-ops.
pub fn run(cfg: &PipelineConfig, range: StageRange) -> Result<RunInfo> {
    cfg.validate()?;
    let workdir = cfg.paths.workdir.clone();
    std::fs::create_dir_all(&workdir)?;
    let _lock = WorkdirLock::acquire(&workdir)?;

    let manifest = Manifest::load(&cfg.paths.manifest)?;
    if manifest.is_empty() {
        return Err(Error::Input("manifest lists no utterances".into()));
    }
    let runner = Runner {
        cfg,
        workdir,
        manifest_path: cfg.paths.manifest.clone(),
        manifest,
        config_hash: cfg.algo_hash(),
    };

    let available = Stage::available(cfg.iterations);
    for requested in [range.first, range.last] {
        if !available.contains(&requested) {
            return Err(Error::Config(format!(
                "stage {} requires iterations = 2",
                requested.name()
            )));
        }
    }

    let mut info = RunInfo::default();
    for stage in available.into_iter().filter(|s| range.contains(*s)) {
        if runner.run_stage(stage)? {
            info.executed.push(stage.name());
        } else {
            info.skipped.push(stage.name());
        }
    }
    Ok(info)
}

impl Runner<'_> {
    fn seed_for(&self, name: &str) -> u64 {
        stage_seed(self.cfg.seed, name)
    }

    fn rel(&self, rel_path: &str) -> PathBuf {
        self.workdir.join(rel_path)
    }

    fn hash_file(&self, path: &Path, what: &str) -> Result<String> {
        let bytes = std::fs::read(path).map_err(|_| {
            Error::Dependency(format!("{what}: missing artifact {}", path.display()))
        })?;
        Ok(sha256_hex(&bytes))
    }

    fn workdir_input(
        &self,
        inputs: &mut BTreeMap<String, String>,
        stage: Stage,
        rel_path: &str,
    ) -> Result<()> {
        let hash = self.hash_file(&self.rel(rel_path), stage.name())?;
        inputs.insert(rel_path.to_string(), hash);
        Ok(())
    }

    fn feature_rel(&self, iteration: usize, utt: &str) -> String {
        match iteration {
            0 => format!("features/{utt}.feat"),
            _ => format!("extract/{utt}.feat"),
        }
    }

    fn feature_inputs(
        &self,
        inputs: &mut BTreeMap<String, String>,
        stage: Stage,
        iteration: usize,
    ) -> Result<()> {
        for e in &self.manifest.entries {
            self.workdir_input(inputs, stage, &self.feature_rel(iteration, &e.utt_id))?;
        }
        Ok(())
    }

    fn gather_inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        match stage {
            Stage::Features => {
                inputs.insert(
                    "manifest".into(),
                    self.hash_file(&self.manifest_path, "manifest")?,
                );
                let base = self
                    .manifest_path
                    .parent()
                    .unwrap_or_else(|| Path::new("."));
                for e in &self.manifest.entries {
                    let path = corpus::resolve_audio_path(base, &e.path);
                    inputs.insert(
                        format!("audio/{}", e.utt_id),
                        self.hash_file(&path, "audio")?,
                    );
                }
            }
            Stage::Kmeans0 => self.feature_inputs(&mut inputs, stage, 0)?,
            Stage::Dedup0 => self.workdir_input(&mut inputs, stage, "kmeans0/labels.tsv")?,
            Stage::Lda0 => self.workdir_input(&mut inputs, stage, "dedup0/texts.tsv")?,
            Stage::Assign0 => {
                self.workdir_input(&mut inputs, stage, "lda0/model.lda")?;
                self.workdir_input(&mut inputs, stage, "dedup0/texts.tsv")?;
            }
            Stage::Pretrain0 => {
                self.feature_inputs(&mut inputs, stage, 0)?;
                self.workdir_input(&mut inputs, stage, "kmeans0/labels.tsv")?;
                self.workdir_input(&mut inputs, stage, "assign0/topics.tsv")?;
                self.workdir_input(&mut inputs, stage, "assign0/mapping.tsv")?;
            }
            Stage::Extract => {
                self.workdir_input(&mut inputs, stage, "pretrain0/encoder.ckpt")?;
                self.feature_inputs(&mut inputs, stage, 0)?;
            }
            Stage::Kmeans1 => self.feature_inputs(&mut inputs, stage, 1)?,
            Stage::Dedup1 => self.workdir_input(&mut inputs, stage, "kmeans1/labels.tsv")?,
            Stage::Lda1 => self.workdir_input(&mut inputs, stage, "dedup1/texts.tsv")?,
            Stage::Assign1 => {
                self.workdir_input(&mut inputs, stage, "lda1/model.lda")?;
                self.workdir_input(&mut inputs, stage, "dedup1/texts.tsv")?;
            }
            Stage::Pretrain1 => {
                self.feature_inputs(&mut inputs, stage, 1)?;
                self.workdir_input(&mut inputs, stage, "kmeans1/labels.tsv")?;
                self.workdir_input(&mut inputs, stage, "assign1/topics.tsv")?;
                self.workdir_input(&mut inputs, stage, "assign1/mapping.tsv")?;
            }
            Stage::Report => {
                inputs.insert(
                    "manifest".into(),
                    self.hash_file(&self.manifest_path, "manifest")?,
                );
                for it in 0..self.cfg.iterations {
                    self.feature_inputs(&mut inputs, stage, it)?;
                    self.workdir_input(&mut inputs, stage, &format!("assign{it}/topics.tsv"))?;
                    self.workdir_input(&mut inputs, stage, &format!("assign{it}/mapping.tsv"))?;
                    self.workdir_input(&mut inputs, stage, &format!("pretrain{it}/encoder.ckpt"))?;
                    self.workdir_input(&mut inputs, stage, &format!("pretrain{it}/loss.csv"))?;
                }
            }
        }
        Ok(inputs)
    }

    /// Returns true when the stage actually executed (false: up to date).
    fn run_stage(&self, stage: Stage) -> Result<bool> {
        let inputs = self.gather_inputs(stage)?;
        let seed = self.seed_for(stage.name());
        let summary_path = self.rel(&format!("{}/summary.json", stage.name()));
        if let Ok(text) = std::fs::read_to_string(&summary_path) {
            if let Ok(prev) = serde_json::from_str::<StageSummary>(&text) {
                if prev.config_hash == self.config_hash
                    && prev.inputs == inputs
                    && self.outputs_intact(&prev)
                {
                    log::info!("stage {} up to date", stage.name());
                    return Ok(false);
                }
            }
        }

        log::info!("stage {} running", stage.name());
        std::fs::create_dir_all(self.rel(stage.name()))?;
        let (outputs, details) = self.compute(stage, seed)?;
        let summary = StageSummary {
            stage: stage.name().to_string(),
            config_hash: self.config_hash.clone(),
            seed,
            inputs,
            outputs,
            details,
        };
        let mut text =
            serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        std::fs::write(&summary_path, text)?;
        Ok(true)
    }

    fn outputs_intact(&self, summary: &StageSummary) -> bool {
        summary.outputs.iter().all(|(rel_path, hash)| {
            std::fs::read(self.rel(rel_path))
                .map(|bytes| sha256_hex(&bytes) == *hash)
                .unwrap_or(false)
        })
    }

    fn compute(
        &self,
        stage: Stage,
        seed: u64,
    ) -> Result<(
        BTreeMap<String, String>,
        serde_json::Map<String, serde_json::Value>,
    )> {
        match stage {
            Stage::Features => self.stage_features(),
            Stage::Kmeans0 => self.stage_kmeans(0, seed),
            Stage::Dedup0 => self.stage_dedup(0),
            Stage::Lda0 => self.stage_lda(0, seed),
            Stage::Assign0 => self.stage_assign(0),
            Stage::Pretrain0 => self.stage_pretrain(0, seed),
            Stage::Extract => self.stage_extract(),
            Stage::Kmeans1 => self.stage_kmeans(1, seed),
            Stage::Dedup1 => self.stage_dedup(1),
            Stage::Lda1 => self.stage_lda(1, seed),
            Stage::Assign1 => self.stage_assign(1),
            Stage::Pretrain1 => self.stage_pretrain(1, seed),
            Stage::Report => self.stage_report(),
        }
    }

    fn record_output(&self, outputs: &mut BTreeMap<String, String>, rel_path: &str) -> Result<()> {
        let bytes = std::fs::read(self.rel(rel_path))?;
        outputs.insert(rel_path.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    // -- features ----------------------------------------------------------

    fn stage_features(
        &self,
    ) -> Result<(
        BTreeMap<String, String>,
        serde_json::Map<String, serde_json::Value>,
    )> {
        let base = self
            .manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."));
        let mut outputs = BTreeMap::new();
        let mut total_frames = 0usize;
        let mut sample_rate: Option<u32> = None;
        for e in &self.manifest.entries {
            let mut wav = corpus::load_wav(&corpus::resolve_audio_path(base, &e.path))?;
            wav.utt_id = e.utt_id.clone();
            match sample_rate {
                None => sample_rate = Some(wav.sample_rate),
                Some(sr) if sr != wav.sample_rate => {
                    return Err(Error::Input(format!(
                        "mixed sample rates in corpus: {sr} vs {} ({})",
                        wav.sample_rate, e.utt_id
                    )))
                }
                _ => {}
            }
            let feats: FeatureMatrix<f32> = mfcc(&wav, &self.cfg.mfcc)?;
            total_frames += feats.frames();
            let rel_path = format!("features/{}.feat", e.utt_id);
            files::write_features(&self.rel(&rel_path), &feats.mat)?;
            self.record_output(&mut outputs, &rel_path)?;
        }
        let mut details = serde_json::Map::new();
        details.insert("utterances".into(), self.manifest.len().into());
        details.insert("total_frames".into(), total_frames.into());
        details.insert("sample_rate".into(), sample_rate.unwrap_or(0).into());
        // Echo the full feature configuration so iteration-0 labels are
        // regenerable from the summary alone.
        let m = &self.cfg.mfcc;
        details.insert(
            "mfcc".into(),
            serde_json::json!({
                "frame_ms": m.frame_ms,
                "hop_ms": m.hop_ms,
                "fft_size": m.fft_size,
                "mel_filters": m.mel_filters,
                "coefficients": m.coefficients,
                "pre_emphasis": m.pre_emphasis,
                "log_floor": m.log_floor,
            }),
        );
        Ok((outputs, details))
    }

    fn load_feature_map(&self, iteration: usize) -> Result<Vec<(String, Matrix<f32>)>> {
        self.manifest
            .entries
            .iter()
            .map(|e| {
                let rel_path = self.feature_rel(iteration, &e.utt_id);
                let mat = files::read_features(&self.rel(&rel_path))?;
                Ok((e.utt_id.clone(), mat))
            })
            .collect()
    }

    // -- kmeans --------------------------------------------------------------

    fn stage_kmeans(
        &self,
        iteration: usize,
        seed: u64,
    ) -> Result<(
        BTreeMap<String, String>,
        serde_json::Map<String, serde_json::Value>,
    )> {
        let feats = self.load_feature_map(iteration)?;
        let dims = feats.first().map(|(_, m)| m.cols()).unwrap_or(0);
        let mut frames: Matrix<f32> =
            Matrix::zeros(feats.iter().map(|(_, m)| m.rows()).sum(), dims);
        let mut row = 0;
        for (_, m) in &feats {
            for r in 0..m.rows() {
                frames.row_mut(row).copy_from_slice(m.row(r));
                row += 1;
            }
        }
        let it_cfg = self.cfg.iteration(iteration);
        let space = match iteration {
            0 => FeatureSpace::Mfcc,
            _ => FeatureSpace::EncoderLayer(self.cfg.iteration(0).extract_layer_value() as u32),
        };
        let cb = quantizer::kmeans_fit(&frames, it_cfg.units_value(), space, seed)?;
        let inertia = quantizer::inertia(&cb, &frames);

        let mut labels = LabelMap::new();
        for (utt_id, mat) in &feats {
            let fm = FeatureMatrix {
                utt_id: utt_id.clone(),
                mat: mat.clone(),
                hop_secs: 0.0,
            };
            labels.insert(utt_id.clone(), quantizer::assign(&cb, &fm)?.labels);
        }

        let dir = format!("kmeans{iteration}");
        let cb_rel = format!("{dir}/codebook.cb");
        let labels_rel = format!("{dir}/labels.tsv");
        quantizer::write_codebook(&self.rel(&cb_rel), &cb)?;
        files::write_labels(&self.rel(&labels_rel), &labels)?;

        let mut outputs = BTreeMap::new();
        self.record_output(&mut outputs, &cb_rel)?;
        self.record_output(&mut outputs, &labels_rel)?;
        let mut details = serde_json::Map::new();
        details.insert("units".into(), it_cfg.units_value().into());
        details.insert("frames".into(), frames.rows().into());
        details.insert("inertia".into(), inertia.into());
        Ok((outputs, details))
    }

    // -- dedup -----------------------------------------------------------------

    fn stage_dedup(
        &self,
        iteration: usize,
    ) -> Result<(
        BTreeMap<String, String>,
        serde_json::Map<String, serde_json::Value>,
    )> {
        let src = format!("kmeans{iteration}/labels.tsv");
        let labels = files::read_labels(&self.rel(&src))?;
        let mut texts = LabelMap::new();
        let mut label_count = 0usize;
        let mut token_count = 0usize;
        for (utt_id, seq) in &labels {
            let text = quantizer::dedup(&PseudoLabelSeq {
                utt_id: utt_id.clone(),
                labels: seq.clone(),
            });
            label_count += seq.len();
            token_count += text.tokens.len();
            texts.insert(utt_id.clone(), text.tokens);
        }
        let rel_path = format!("dedup{iteration}/texts.tsv");
        files::write_labels(&self.rel(&rel_path), &texts)?;
        let mut outputs = BTreeMap::new();
        self.record_output(&mut outputs, &rel_path)?;
        let mut details = serde_json::Map::new();
        details.insert("frame_labels".into(), label_count.into());
        details.insert("tokens".into(), token_count.into());
        Ok((outputs, details))
    }

    // -- lda --------------------------------------------------------------------

    fn read_texts(&self, iteration: usize) -> Result<Vec<PseudoText>> {
        let texts = files::read_labels(&self.rel(&format!("dedup{iteration}/texts.tsv")))?;
        Ok(texts
            .into_iter()
            .map(|(utt_id, tokens)| PseudoText { utt_id, tokens })
            .collect())
    }

    fn stage_lda(
        &self,
        iteration: usize,
        seed: u64,
    ) -> Result<(
        BTreeMap<String, String>,
        serde_json::Map<String, serde_json::Value>,
    )> {
        let corpus = self.read_texts(iteration)?;
        let it_cfg = self.cfg.iteration(iteration);
        let (model, elbo) = lda::lda_fit::<f64>(
            &corpus,
            it_cfg.topics,
            it_cfg.alpha_value(),
            seed,
            it_cfg.em_max_iters,
            it_cfg.em_tol,
        )?;
        let rel_path = format!("lda{iteration}/model.lda");
        lda::write_lda_model(&self.rel(&rel_path), &model)?;
        let mut outputs = BTreeMap::new();
        self.record_output(&mut outputs, &rel_path)?;
        let mut details = serde_json::Map::new();
        details.insert("topics".into(), it_cfg.topics.into());
        details.insert("vocab".into(), model.vocab_size().into());
        details.insert("em_iterations".into(), elbo.len().into());
        details.insert("final_elbo".into(), (*elbo.last().unwrap()).into());
        Ok((outputs, details))
    }

    // -- assign -------------------------------------------------------------------

    fn stage_assign(
        &self,
        iteration: usize,
    ) -> Result<(
        BTreeMap<String, String>,
        serde_json::Map<String, serde_json::Value>,
    )> {
        let model = lda::read_lda_model(&self.rel(&format!("lda{iteration}/model.lda")))?;
        let corpus = self.read_texts(iteration)?;
        let mut raw = BTreeMap::new();
        for doc in &corpus {
            raw.insert(doc.utt_id.clone(), lda::assign_topic(&model, doc)?);
        }
        let assignment = lda::compact_labels(&raw, model.num_topics)?;

        let topics_rel = format!("assign{iteration}/topics.tsv");
        let mapping_rel = format!("assign{iteration}/mapping.tsv");
        let compact_as_labels: LabelMap = assignment
            .compact
            .iter()
            .map(|(utt, &l)| (utt.clone(), vec![l]))
            .collect();
        files::write_labels(&self.rel(&topics_rel), &compact_as_labels)?;
        lda::write_topic_mapping(&self.rel(&mapping_rel), &assignment)?;

        let mut outputs = BTreeMap::new();
        self.record_output(&mut outputs, &topics_rel)?;
        self.record_output(&mut outputs, &mapping_rel)?;
        let mut details = serde_json::Map::new();
        details.insert("k".into(), model.num_topics.into());
        details.insert("k_prime".into(), assignment.k_prime.into());
        Ok((outputs, details))
    }

    // -- pretrain --------------------------------------------------------------------

    fn read_single_topics(&self, iteration: usize) -> Result<BTreeMap<String, u32>> {
        let raw = files::read_labels(&self.rel(&format!("assign{iteration}/topics.tsv")))?;
        raw.into_iter()
            .map(|(utt, seq)| match seq.as_slice() {
                [one] => Ok((utt, *one)),
                other => Err(Error::Format(format!(
                    "topic file entry {utt} has {} labels, expected 1",
                    other.len()
                ))),
            })
            .collect()
    }

    fn stage_pretrain(
        &self,
        iteration: usize,
        seed: u64,
    ) -> Result<(
        BTreeMap<String, String>,
        serde_json::Map<String, serde_json::Value>,
    )> {
        let feats = self.load_feature_map(iteration)?;
        let labels = files::read_labels(&self.rel(&format!("kmeans{iteration}/labels.tsv")))?;
        let topics = self.read_single_topics(iteration)?;
        let mapping =
            lda::read_topic_mapping(&self.rel(&format!("assign{iteration}/mapping.tsv")))?;
        let k_prime = mapping.len().max(1);
        let it_cfg = self.cfg.iteration(iteration);

        let input_dim = feats.first().map(|(_, m)| m.cols()).unwrap_or(0);
        let mut data = Vec::with_capacity(feats.len());
        for (utt_id, mat) in &feats {
            let frame_labels = labels
                .get(utt_id)
                .ok_or_else(|| Error::Dependency(format!("no frame labels for {utt_id}")))?
                .clone();
            if frame_labels.len() != mat.rows() {
                return Err(Error::Shape(format!(
                    "{utt_id}: {} labels for {} frames",
                    frame_labels.len(),
                    mat.rows()
                )));
            }
            let topic = *topics
                .get(utt_id)
                .ok_or_else(|| Error::Dependency(format!("no topic label for {utt_id}")))?;
            data.push(TrainItem {
                utt_id: utt_id.clone(),
                feats: mat.map(|v| v as f64),
                frame_labels,
                topic,
            });
        }

        let enc = &it_cfg.encoder;
        let cfg = EncoderConfig {
            input_dim,
            model_dim: enc.model_dim,
            layers: enc.layers,
            heads: enc.heads,
            ff_dim: enc.ff_dim,
            vocab_size: it_cfg.units_value(),
            num_topics: k_prime,
            mask_start_prob: enc.mask_start_prob,
            mask_span: enc.mask_span,
            rho: self.cfg.rho,
            positional: enc.positional,
            topic_bottleneck: enc.topic_bottleneck,
            seed,
        };
        let mut params = EncoderParams::init(&cfg)?;
        let (mean, std) = dataset_norm(&data, input_dim);
        params.set_feature_norm(&mean, &std)?;

        let opts = TrainOptions {
            steps: it_cfg.train_steps,
            learning_rate: enc.learning_rate,
            seed: self.seed_for(&format!("pretrain{iteration}.train")),
            ..TrainOptions::default()
        };
        let curve = encoder::train(&mut params, &data, &opts)?;

        let ckpt_rel = format!("pretrain{iteration}/encoder.ckpt");
        let curve_rel = format!("pretrain{iteration}/loss.csv");
        encoder::write_checkpoint(&self.rel(&ckpt_rel), &params)?;
        encoder::write_loss_curve(&self.rel(&curve_rel), &curve)?;

        let mut outputs = BTreeMap::new();
        self.record_output(&mut outputs, &ckpt_rel)?;
        self.record_output(&mut outputs, &curve_rel)?;
        let mut details = serde_json::Map::new();
        details.insert("steps".into(), it_cfg.train_steps.into());
        details.insert("k_prime".into(), k_prime.into());
        if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
            details.insert("first_total".into(), first.total.into());
            details.insert("last_total".into(), last.total.into());
        }
        Ok((outputs, details))
    }

    // -- extract ----------------------------------------------------------------------

    fn stage_extract(
        &self,
    ) -> Result<(
        BTreeMap<String, String>,
        serde_json::Map<String, serde_json::Value>,
    )> {
        let params = encoder::read_checkpoint(&self.rel("pretrain0/encoder.ckpt"))?;
        let layer = self.cfg.iteration(0).extract_layer_value();
        let feats = self.load_feature_map(0)?;
        let mut outputs = BTreeMap::new();
        for (utt_id, mat) in &feats {
            let hidden = encoder::extract_layer(&params, &mat.map(|v| v as f64), layer)?;
            let rel_path = format!("extract/{utt_id}.feat");
            files::write_features(&self.rel(&rel_path), &hidden.map(|v| v as f32))?;
            self.record_output(&mut outputs, &rel_path)?;
        }
        let mut details = serde_json::Map::new();
        details.insert("layer".into(), layer.into());
        details.insert("dims".into(), params.cfg.model_dim.into());
        Ok((outputs, details))
    }

    // -- report -----------------------------------------------------------------------

    fn stage_report(
        &self,
    ) -> Result<(
        BTreeMap<String, String>,
        serde_json::Map<String, serde_json::Value>,
    )> {
        let data = compute_report(self.cfg, &self.workdir, &self.manifest)?;
        let mut outputs = BTreeMap::new();
        let txt_rel = "report/report.txt";
        std::fs::write(self.rel(txt_rel), data.to_table(false))?;
        self.record_output(&mut outputs, txt_rel)?;
        for it in 0..self.cfg.iterations {
            let rel_path = format!("report/report_it{it}.csv");
            std::fs::write(self.rel(&rel_path), data.to_csv(it))?;
            self.record_output(&mut outputs, &rel_path)?;
        }
        let mut details = serde_json::Map::new();
        details.insert("attributes".into(), data.attributes().len().into());
        Ok((outputs, details))
    }
}

fn dataset_norm(data: &[TrainItem], dims: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0f64; dims];
    let mut count = 0usize;
    for item in data {
        for r in 0..item.feats.rows() {
            for (m, &v) in mean.iter_mut().zip(item.feats.row(r)) {
                *m += v;
            }
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0f64; dims];
    for item in data {
        for r in 0..item.feats.rows() {
            for (v, (&x, &m)) in var.iter_mut().zip(item.feats.row(r).iter().zip(&mean)) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    (mean, std)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

pub const RANDOM_PURITY_TRIALS: usize = 100;

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub attribute: String,
    pub iteration: usize,
    pub topics: usize,
    pub k_prime: usize,
    pub purity: f64,
    pub conventional: f64,
    pub random_mean: f64,
    pub random_std: f64,
}

#[derive(Debug, Clone)]
pub struct ReportData {
    pub rows: Vec<ReportRow>,
    /// Topic-head accuracy per iteration (fraction of utterances whose CLS
    /// argmax matches the assigned topic label).
    pub accuracy: Vec<(usize, f64)>,
    pub loss_curves: Vec<String>,
}

impl ReportData {
    pub fn attributes(&self) -> Vec<&str> {
        let mut attrs: Vec<&str> = self.rows.iter().map(|r| r.attribute.as_str()).collect();
        attrs.sort();
        attrs.dedup();
        attrs
    }

    /// Aligned text table; the conventional-purity column is included only
    /// on request.
    pub fn to_table(&self, conventional: bool) -> String {
        let mut header = vec![
            "attribute".to_string(),
            "iteration".to_string(),
            "K".to_string(),
            "K'".to_string(),
            "purity".to_string(),
        ];
        if conventional {
            header.push("conventional".to_string());
        }
        header.push("random_mean".to_string());
        header.push("random_std".to_string());

        let mut table: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            let mut row = vec![
                r.attribute.clone(),
                r.iteration.to_string(),
                r.topics.to_string(),
                r.k_prime.to_string(),
                format!("{:.4}", r.purity),
            ];
            if conventional {
                row.push(format!("{:.4}", r.conventional));
            }
            row.push(format!("{:.4}", r.random_mean));
            row.push(format!("{:.4}", r.random_std));
            table.push(row);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::from("topic/attribute purity\n");
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| format!("{cell:<width$}", width = widths[c]))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out.push_str("\ntopic-head accuracy\n");
        for (it, acc) in &self.accuracy {
            let _ = writeln!(out, "  iteration {it}: {acc:.4}");
        }
        out.push_str("\nloss curves\n");
        for c in &self.loss_curves {
            let _ = writeln!(out, "  {c}");
        }
        out
    }

    /// CSV for one iteration: `attribute,K,purity,random_mean,random_std`.
    pub fn to_csv(&self, iteration: usize) -> String {
        let mut out = String::from("attribute,K,purity,random_mean,random_std\n");
        for r in self.rows.iter().filter(|r| r.iteration == iteration) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.attribute, r.topics, r.purity, r.random_mean, r.random_std
            );
        }
        out
    }
}

/// Build the purity/accuracy report from finished stage artifacts.
pub fn compute_report(
    cfg: &PipelineConfig,
    workdir: &Path,
    manifest: &Manifest,
) -> Result<ReportData> {
    let mut attr_keys: Vec<String> = manifest
        .entries
        .first()
        .map(|e| e.attrs.keys().cloned().collect())
        .unwrap_or_default();
    attr_keys.retain(|k| manifest.entries.iter().all(|e| e.attrs.contains_key(k)));
    attr_keys.sort();

    let mut rows = Vec::new();
    let mut accuracy = Vec::new();
    let mut loss_curves = Vec::new();
    for it in 0..cfg.iterations {
        let topics_path = workdir.join(format!("assign{it}/topics.tsv"));
        let topic_labels: BTreeMap<String, u32> = files::read_labels(&topics_path)?
            .into_iter()
            .map(|(utt, seq)| {
                seq.first()
                    .copied()
                    .map(|l| (utt.clone(), l))
                    .ok_or_else(|| Error::Format(format!("empty topic entry for {utt}")))
            })
            .collect::<Result<_>>()?;
        let mapping = lda::read_topic_mapping(&workdir.join(format!("assign{it}/mapping.tsv")))?;
        let k = cfg.iteration(it).topics;

        for attr in &attr_keys {
            let attr_map: BTreeMap<String, String> = manifest
                .entries
                .iter()
                .map(|e| (e.utt_id.clone(), e.attrs[attr].clone()))
                .collect();
            let pair = metrics::LabelPair::new(attr_map.clone(), topic_labels.clone())?;
            let mut class_sizes: BTreeMap<&String, usize> = BTreeMap::new();
            for v in attr_map.values() {
                *class_sizes.entry(v).or_default() += 1;
            }
            let sizes: Vec<usize> = class_sizes.values().copied().collect();
            let (random_mean, random_std) = metrics::random_purity(
                &sizes,
                k,
                RANDOM_PURITY_TRIALS,
                stage_seed(cfg.seed, &format!("report.random.{attr}.{it}")),
            )?;
            rows.push(ReportRow {
                attribute: attr.clone(),
                iteration: it,
                topics: k,
                k_prime: mapping.len(),
                purity: metrics::purity(&pair),
                conventional: metrics::purity_conventional(&pair),
                random_mean,
                random_std,
            });
        }

        // Topic-head accuracy over the corpus.
        let params = encoder::read_checkpoint(&workdir.join(format!("pretrain{it}/encoder.ckpt")))?;
        let mut predictions = Vec::with_capacity(manifest.len());
        let mut labels = Vec::with_capacity(manifest.len());
        for e in &manifest.entries {
            let rel_path = match it {
                0 => format!("features/{}.feat", e.utt_id),
                _ => format!("extract/{}.feat", e.utt_id),
            };
            let mat = files::read_features(&workdir.join(&rel_path))?.map(|v| v as f64);
            let targets = vec![0u32; mat.rows()];
            let batch = encoder::Batch {
                feats: &mat,
                targets: &targets,
                mask: &[],
                topic: 0,
            };
            let out = encoder::forward(&params, &batch)?;
            let argmax = out
                .cls_logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i as u32)
                .unwrap_or(0);
            predictions.push(argmax);
            let label = topic_labels.get(&e.utt_id).ok_or_else(|| {
                Error::Dependency(format!("no topic label for {} in assign{it}", e.utt_id))
            })?;
            labels.push(*label);
        }
        accuracy.push((it, metrics::topic_accuracy(&predictions, &labels)?));
        loss_curves.push(format!("pretrain{it}/loss.csv"));
    }

    Ok(ReportData {
        rows,
        accuracy,
        loss_curves,
    })
}

/// Generate the configured synthetic corpus onto disk: audio under
/// `paths.corpus_dir`, manifest at `paths.manifest`.
pub fn synth_to_disk(cfg: &PipelineConfig) -> Result<usize> {
    let spec = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [synth] section".into()))?;
    let (waves, mut manifest) = corpus::synth_corpus(spec)?;
    std::fs::create_dir_all(&cfg.paths.corpus_dir)?;
    if let Some(parent) = cfg.paths.manifest.parent() {
        std::fs::create_dir_all(parent)?;
    }
    for wave in &waves {
        corpus::write_wav(
            &cfg.paths.corpus_dir.join(format!("{}.wav", wave.utt_id)),
            wave,
        )?;
    }
    // Manifest audio paths resolve against the manifest's own directory;
    // with the manifest outside the corpus dir, fall back to absolute paths.
    let manifest_dir = cfg
        .paths
        .manifest
        .parent()
        .unwrap_or_else(|| Path::new("."));
    if std::fs::canonicalize(manifest_dir).ok() != std::fs::canonicalize(&cfg.paths.corpus_dir).ok()
    {
        let abs = std::fs::canonicalize(&cfg.paths.corpus_dir)?;
        for e in manifest.entries.iter_mut() {
            e.path = abs.join(e.path.file_name().expect("synth wav file name"));
        }
    }
    manifest.save(&cfg.paths.manifest)?;
    Ok(waves.len())
}

#[cfg(test)]
mod tests;
