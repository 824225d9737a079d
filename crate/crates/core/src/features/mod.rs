//! MFCC feature extraction: the iteration-0 input to unit clustering.
//!
//! Pipeline per frame: pre-emphasis -> Hann window -> magnitude FFT ->
//! mel filterbank -> log(max(., floor)) -> DCT-II, keeping the configured
//! number of coefficients. Deterministic; parallelizable across utterances.

pub mod dsp;

use serde::Deserialize;

use crate::corpus::Waveform;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::Real;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfccConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub mel_filters: usize,
    pub coefficients: usize,
    pub pre_emphasis: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            mel_filters: 26,
            coefficients: 13,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (self.frame_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let frame = self.frame_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        if frame == 0 {
            return Err(Error::InvalidParameter(
                "frame length rounds to zero samples".into(),
            ));
        }
        if hop == 0 {
            return Err(Error::InvalidParameter("hop rounds to zero samples".into()));
        }
        if self.fft_size < frame {
            return Err(Error::InvalidParameter(format!(
                "fft_size {} smaller than frame of {frame} samples",
                self.fft_size
            )));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "fft_size {} is not a power of two",
                self.fft_size
            )));
        }
        if self.coefficients == 0 || self.coefficients > self.mel_filters {
            return Err(Error::InvalidParameter(format!(
                "coefficients {} must be in 1..={}",
                self.coefficients, self.mel_filters
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::InvalidParameter("log_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Frames-by-dims matrix of acoustic features for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub utt_id: String,
    pub mat: Matrix<T>,
    pub hop_secs: f64,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn frames(&self) -> usize {
        self.mat.rows()
    }

    pub fn dims(&self) -> usize {
        self.mat.cols()
    }
}

/// Compute an MFCC feature matrix. Frame count is
/// `1 + floor((T - frame_samples) / hop_samples)`; utterances shorter than
/// one frame are rejected.
pub fn mfcc<T: Real>(wave: &Waveform, cfg: &MfccConfig) -> Result<FeatureMatrix<T>> {
    cfg.validate(wave.sample_rate)?;
    let frame_len = cfg.frame_samples(wave.sample_rate);
    let hop = cfg.hop_samples(wave.sample_rate);
    if wave.samples.len() < frame_len {
        return Err(Error::TooShort(format!(
            "utterance {} has {} samples, one frame needs {frame_len}",
            wave.utt_id,
            wave.samples.len()
        )));
    }
    let n_frames = 1 + (wave.samples.len() - frame_len) / hop;

    let signal: Vec<T> = wave
        .samples
        .iter()
        .map(|&s| T::from_f64_lossy(s as f64))
        .collect();
    let emphasized = dsp::pre_emphasis(&signal, T::from_f64_lossy(cfg.pre_emphasis));
    let window: Vec<T> = dsp::hann_window(frame_len);
    let bank: Vec<Vec<T>> = dsp::mel_filterbank(cfg.mel_filters, cfg.fft_size, wave.sample_rate);
    let floor = T::from_f64_lossy(cfg.log_floor);

    let mut mat = Matrix::zeros(n_frames, cfg.coefficients);
    let mut frame_buf = vec![T::zero(); frame_len];
    for f in 0..n_frames {
        let start = f * hop;
        for (dst, (&s, &w)) in frame_buf.iter_mut().zip(
            emphasized[start..start + frame_len]
                .iter()
                .zip(window.iter()),
        ) {
            *dst = s * w;
        }
        let spectrum = dsp::magnitude_spectrum(&frame_buf, cfg.fft_size)?;
        let log_mels: Vec<T> = bank
            .iter()
            .map(|filt| {
                let e: T = filt.iter().zip(spectrum.iter()).map(|(&w, &m)| w * m).sum();
                e.max(floor).ln()
            })
            .collect();
        let coeffs = dsp::dct_ii(&log_mels, cfg.coefficients);
        mat.row_mut(f).copy_from_slice(&coeffs);
    }

    Ok(FeatureMatrix {
        utt_id: wave.utt_id.clone(),
        mat,
        hop_secs: hop as f64 / wave.sample_rate as f64,
    })
}
