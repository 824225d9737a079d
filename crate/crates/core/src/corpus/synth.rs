//! Seeded synthetic corpus with planted per-class spectral bands.
//!
//! Each utterance is a sequence of short segments, every segment a fresh
//! random sine mixture confined to the utterance's class band, plus
//! low-level white noise. The segment walk makes utterances
//! non-stationary, so their frames traverse several distinct spectral
//! states inside the band while the planted `class` attribute stays
//! recoverable from the spectrum. Output is a pure function of the spec,
//! seed included.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::error::{Error, Result};

use super::{Manifest, ManifestEntry, Waveform};

const SINES_PER_SEGMENT: usize = 4;
const SEGMENT_SECS: (f64, f64) = (0.08, 0.16);
const PEAK_LEVEL: f32 = 0.9;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClass {
    pub name: String,
    /// Spectral band in Hz; sine components are drawn from its interior.
    pub band_hz: (f64, f64),
    pub proportion: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub utterances: usize,
    pub classes: Vec<SynthClass>,
    pub duration_secs: (f64, f64),
    pub noise_level: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    pub seed: u64,
}

fn default_sample_rate() -> u32 {
    16000
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidParameter("synth spec has no classes".into()));
        }
        let total: f64 = self.classes.iter().map(|c| c.proportion).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "class proportions sum to {total}, expected 1"
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for c in &self.classes {
            let (lo, hi) = c.band_hz;
            if !(lo > 0.0 && lo < hi && hi < nyquist) {
                return Err(Error::InvalidParameter(format!(
                    "class {} band ({lo}, {hi}) must lie strictly inside (0, {nyquist})",
                    c.name
                )));
            }
            if c.proportion < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "class {} has negative proportion",
                    c.name
                )));
            }
        }
        let (dlo, dhi) = self.duration_secs;
        if !(dlo > 0.0 && dlo <= dhi) {
            return Err(Error::InvalidParameter(format!(
                "bad duration range ({dlo}, {dhi})"
            )));
        }
        if self.noise_level < 0.0 {
            return Err(Error::InvalidParameter("noise_level must be >= 0".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidParameter("sample_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Exact class counts by largest remainder, so e.g. proportions (0.5, 0.5)
/// with 100 utterances give exactly 50/50.
fn class_counts(spec: &SynthSpec) -> Vec<usize> {
    let d = spec.utterances;
    let mut counts: Vec<usize> = Vec::with_capacity(spec.classes.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(spec.classes.len());
    let mut assigned = 0usize;
    for (i, c) in spec.classes.iter().enumerate() {
        let exact = c.proportion * d as f64;
        let base = exact.floor() as usize;
        counts.push(base);
        assigned += base;
        remainders.push((i, exact - exact.floor()));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().take(d - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Generate the corpus described by `spec`. Manifest paths are relative
/// file names (`<utt_id>.wav`); the caller decides where the audio lands.
pub fn synth_corpus(spec: &SynthSpec) -> Result<(Vec<Waveform>, Manifest)> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let counts = class_counts(spec);
    let mut class_of: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat_n(i, n))
        .collect();
    class_of.shuffle(&mut rng);

    let sr = spec.sample_rate as f64;
    let mut waves = Vec::with_capacity(spec.utterances);
    let mut entries = Vec::with_capacity(spec.utterances);
    for (idx, &ci) in class_of.iter().enumerate() {
        let class = &spec.classes[ci];
        let utt_id = format!("utt{idx:05}");

        let dur = if spec.duration_secs.0 == spec.duration_secs.1 {
            spec.duration_secs.0
        } else {
            rng.random_range(spec.duration_secs.0..spec.duration_secs.1)
        };
        let n = (dur * sr).round().max(1.0) as usize;

        // Keep sine components away from the band edges so spectral leakage
        // stays inside the nominal band.
        let (lo, hi) = class.band_hz;
        let margin = 0.05 * (hi - lo);
        let mut samples = vec![0.0f64; n];
        let mut start = 0usize;
        while start < n {
            let seg_secs = rng.random_range(SEGMENT_SECS.0..SEGMENT_SECS.1);
            let seg_len = ((seg_secs * sr).round() as usize).clamp(1, n - start);
            for _ in 0..SINES_PER_SEGMENT {
                let freq = rng.random_range(lo + margin..hi - margin);
                let amp = rng.random_range(0.25..1.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let step = std::f64::consts::TAU * freq / sr;
                for (t, s) in samples[start..start + seg_len].iter_mut().enumerate() {
                    *s += amp * (step * t as f64 + phase).sin();
                }
            }
            start += seg_len;
        }
        for s in samples.iter_mut() {
            let noise: f64 = rng.sample(StandardNormal);
            *s += spec.noise_level * noise;
        }
        let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let scale = if peak > 0.0 {
            PEAK_LEVEL as f64 / peak
        } else {
            0.0
        };
        let samples: Vec<f32> = samples.iter().map(|&s| (s * scale) as f32).collect();

        let mut attrs = BTreeMap::new();
        attrs.insert("class".to_string(), class.name.clone());
        entries.push(ManifestEntry {
            utt_id: utt_id.clone(),
            path: PathBuf::from(format!("{utt_id}.wav")),
            attrs,
        });
        waves.push(Waveform {
            utt_id,
            samples,
            sample_rate: spec.sample_rate,
        });
    }

    Ok((waves, Manifest::new(entries)?))
}
