//! Pipeline configuration: one TOML file drives synthesis, both
//! iterations, and reporting. Unknown keys are rejected so typos fail
//! loudly; the schema itself is versioned.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::corpus::SynthSpec;
use crate::error::{Error, Result};
use crate::features::MfccConfig;

pub const CONFIG_VERSION: u32 = 1;

fn default_rho() -> f64 {
    0.01
}

fn default_iterations() -> usize {
    2
}

fn default_true() -> bool {
    true
}

fn default_mask_start_prob() -> f64 {
    0.065
}

fn default_mask_span() -> usize {
    10
}

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_em_max_iters() -> usize {
    100
}

fn default_em_tol() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Where `synth` writes audio and the manifest.
    pub corpus_dir: PathBuf,
    /// Manifest consumed by `run`; audio paths resolve against its directory.
    pub manifest: PathBuf,
    /// Stage artifacts land here; one run owns it exclusively.
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    #[serde(default = "default_mask_start_prob")]
    pub mask_start_prob: f64,
    #[serde(default = "default_mask_span")]
    pub mask_span: usize,
    #[serde(default = "default_true")]
    pub positional: bool,
    #[serde(default)]
    pub topic_bottleneck: Option<usize>,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationConfig {
    /// K-means cluster-unit count U for this iteration's pseudo-labels;
    /// defaults to 100 for iteration 0 and 500 for iteration 1.
    #[serde(default)]
    pub units: Option<usize>,
    /// LDA topic count K.
    pub topics: usize,
    /// Symmetric Dirichlet prior; defaults to 1/K.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub train_steps: usize,
    /// Which encoder layer feeds the next iteration's clustering
    /// (1-based); defaults to the middle of the stack.
    #[serde(default)]
    pub extract_layer: Option<usize>,
    #[serde(default = "default_em_max_iters")]
    pub em_max_iters: usize,
    #[serde(default = "default_em_tol")]
    pub em_tol: f64,
    pub encoder: EncoderSection,
}

pub const DEFAULT_UNITS: [usize; 2] = [100, 500];

impl IterationConfig {
    /// Cluster-unit count; `parse` resolves the per-iteration default.
    pub fn units_value(&self) -> usize {
        self.units.expect("units resolved during config parsing")
    }

    pub fn alpha_value(&self) -> f64 {
        self.alpha.unwrap_or(1.0 / self.topics as f64)
    }

    pub fn extract_layer_value(&self) -> usize {
        self.extract_layer
            .unwrap_or(self.encoder.layers.div_ceil(2))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Pseudo-label/pre-train rounds; 2 unless overridden down to 1.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub paths: PathsConfig,
    #[serde(default)]
    pub mfcc: MfccConfig,
    pub iteration0: IterationConfig,
    #[serde(default)]
    pub iteration1: Option<IterationConfig>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.iteration0.units.get_or_insert(DEFAULT_UNITS[0]);
        if let Some(it1) = cfg.iteration1.as_mut() {
            it1.units.get_or_insert(DEFAULT_UNITS[1]);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version: schema version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho: {} outside [0, 1]", self.rho)));
        }
        match self.iterations {
            1 => {
                if self.iteration1.is_some() {
                    return Err(Error::Config(
                        "iteration1: present but iterations = 1".into(),
                    ));
                }
            }
            2 => {
                if self.iteration1.is_none() {
                    return Err(Error::Config(
                        "iteration1: required when iterations = 2".into(),
                    ));
                }
            }
            n => {
                return Err(Error::Config(format!(
                    "iterations: {n} unsupported (1 or 2)"
                )))
            }
        }
        for (name, it) in self.iteration_sections() {
            validate_iteration(name, it)?;
        }
        if let Some(synth) = &self.synth {
            synth
                .validate()
                .map_err(|e| Error::Config(format!("synth: {e}")))?;
        }
        Ok(())
    }

    pub fn iteration(&self, idx: usize) -> &IterationConfig {
        match idx {
            0 => &self.iteration0,
            1 => self
                .iteration1
                .as_ref()
                .expect("iteration1 validated present"),
            _ => panic!("iteration index {idx}"),
        }
    }

    fn iteration_sections(&self) -> Vec<(&'static str, &IterationConfig)> {
        let mut out = vec![("iteration0", &self.iteration0)];
        if let Some(it1) = &self.iteration1 {
            out.push(("iteration1", it1));
        }
        out
    }

    /// Hash of every setting that influences artifact bytes. Paths and the
    /// synth section are excluded: the corpus enters stage summaries
    /// through input hashes, and moving a workdir must not invalidate it.
    pub fn algo_hash(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "version={};seed={};rho={};iterations={};",
            self.version, self.seed, self.rho, self.iterations
        );
        let m = &self.mfcc;
        let _ = write!(
            s,
            "mfcc={},{},{},{},{},{},{};",
            m.frame_ms,
            m.hop_ms,
            m.fft_size,
            m.mel_filters,
            m.coefficients,
            m.pre_emphasis,
            m.log_floor
        );
        for (name, it) in self.iteration_sections() {
            let e = &it.encoder;
            let _ = write!(
                s,
                "{name}=units:{},topics:{},alpha:{},steps:{},extract:{},em:{}/{},enc:{},{},{},{},{},{},{},{:?},{};",
                it.units_value(),
                it.topics,
                it.alpha_value(),
                it.train_steps,
                it.extract_layer_value(),
                it.em_max_iters,
                it.em_tol,
                e.model_dim,
                e.layers,
                e.heads,
                e.ff_dim,
                e.mask_start_prob,
                e.mask_span,
                e.positional,
                e.topic_bottleneck,
                e.learning_rate
            );
        }
        crate::pipeline::sha256_hex(s.as_bytes())
    }
}

fn validate_iteration(name: &str, it: &IterationConfig) -> Result<()> {
    if it.units == Some(0) {
        return Err(Error::Config(format!("{name}.units: must be >= 1")));
    }
    if it.topics == 0 {
        return Err(Error::Config(format!("{name}.topics: must be >= 1")));
    }
    if let Some(a) = it.alpha {
        if a.is_nan() || a <= 0.0 {
            return Err(Error::Config(format!("{name}.alpha: must be > 0")));
        }
    }
    if it.em_max_iters == 0 {
        return Err(Error::Config(format!("{name}.em_max_iters: must be >= 1")));
    }
    if it.em_tol.is_nan() || it.em_tol <= 0.0 {
        return Err(Error::Config(format!("{name}.em_tol: must be > 0")));
    }
    let e = &it.encoder;
    if e.model_dim == 0 || e.heads == 0 || !e.model_dim.is_multiple_of(e.heads) {
        return Err(Error::Config(format!(
            "{name}.encoder.model_dim: {} must be a positive multiple of heads {}",
            e.model_dim, e.heads
        )));
    }
    if e.layers == 0 || e.ff_dim == 0 {
        return Err(Error::Config(format!(
            "{name}.encoder: layers and ff_dim must be >= 1"
        )));
    }
    if e.mask_span == 0 {
        return Err(Error::Config(format!(
            "{name}.encoder.mask_span: must be >= 1"
        )));
    }
    if !(0.0..=1.0).contains(&e.mask_start_prob) {
        return Err(Error::Config(format!(
            "{name}.encoder.mask_start_prob: outside [0, 1]"
        )));
    }
    if e.learning_rate.is_nan() || e.learning_rate <= 0.0 {
        return Err(Error::Config(format!(
            "{name}.encoder.learning_rate: must be > 0"
        )));
    }
    if e.topic_bottleneck == Some(0) {
        return Err(Error::Config(format!(
            "{name}.encoder.topic_bottleneck: must be >= 1 when set"
        )));
    }
    let extract = it.extract_layer_value();
    if extract == 0 || extract > e.layers {
        return Err(Error::Config(format!(
            "{name}.extract_layer: {extract} outside 1..={}",
            e.layers
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
version = 1
seed = 7

[paths]
corpus_dir = "corpus"
manifest = "corpus/manifest.tsv"
workdir = "work"

[iteration0]
units = 12
topics = 2
train_steps = 10

[iteration0.encoder]
model_dim = 8
layers = 2
heads = 2
ff_dim = 16

[iteration1]
units = 16
topics = 2
train_steps = 10

[iteration1.encoder]
model_dim = 8
layers = 2
heads = 2
ff_dim = 16
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = PipelineConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.rho, 0.01);
        assert_eq!(cfg.iterations, 2);
        assert_eq!(cfg.mfcc.fft_size, 512);
        assert_eq!(cfg.iteration0.alpha_value(), 0.5);
        assert_eq!(cfg.iteration0.extract_layer_value(), 1);
        assert_eq!(cfg.iteration0.encoder.mask_span, 10);
        assert_eq!(cfg.iteration0.units_value(), 12);
    }

    #[test]
    fn unit_counts_default_per_iteration() {
        let trimmed = MINIMAL
            .replace("units = 12\n", "")
            .replace("units = 16\n", "");
        let cfg = PipelineConfig::parse(&trimmed).unwrap();
        assert_eq!(cfg.iteration0.units_value(), DEFAULT_UNITS[0]);
        assert_eq!(
            cfg.iteration1.as_ref().unwrap().units_value(),
            DEFAULT_UNITS[1]
        );
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let bad = MINIMAL.replace("units = 12", "units = 12\nbogus_knob = 3");
        let err = PipelineConfig::parse(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_knob"), "{msg}");
    }

    #[test]
    fn missing_iteration1_rejected() {
        let bad = MINIMAL.split("[iteration1]").next().unwrap().to_string();
        assert!(matches!(PipelineConfig::parse(&bad), Err(Error::Config(_))));
        let ok = format!("iterations = 1\n{bad}");
        assert_eq!(PipelineConfig::parse(&ok).unwrap().iterations, 1);
    }

    #[test]
    fn algo_hash_ignores_paths() {
        let a = PipelineConfig::parse(MINIMAL).unwrap();
        let moved = MINIMAL.replace("workdir = \"work\"", "workdir = \"elsewhere\"");
        let b = PipelineConfig::parse(&moved).unwrap();
        assert_eq!(a.algo_hash(), b.algo_hash());
        let tweaked = MINIMAL.replace("seed = 7", "seed = 8");
        let c = PipelineConfig::parse(&tweaked).unwrap();
        assert_ne!(a.algo_hash(), c.algo_hash());
    }

    #[test]
    fn extract_layer_bounds_checked() {
        let bad = MINIMAL.replace(
            "units = 12\ntopics = 2",
            "units = 12\ntopics = 2\nextract_layer = 5",
        );
        assert!(matches!(PipelineConfig::parse(&bad), Err(Error::Config(_))));
    }
}
