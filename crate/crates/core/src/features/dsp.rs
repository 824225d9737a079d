//! DSP kernels for the feature pipeline: pre-emphasis, Hann window,
//! radix-2 FFT, mel filterbank, and DCT-II.

use crate::error::{Error, Result};
use crate::num::Real;

/// `y[n] = x[n] - coeff * x[n-1]`, with `y[0] = x[0]`.
pub fn pre_emphasis<T: Real>(signal: &[T], coeff: T) -> Vec<T> {
    let mut out = Vec::with_capacity(signal.len());
    if let Some(&first) = signal.first() {
        out.push(first);
        for i in 1..signal.len() {
            out.push(signal[i] - coeff * signal[i - 1]);
        }
    }
    out
}

/// Symmetric Hann window: `w[n] = 0.5 * (1 - cos(2*pi*n / (N-1)))`.
pub fn hann_window<T: Real>(len: usize) -> Vec<T> {
    if len == 1 {
        return vec![T::one()];
    }
    (0..len)
        .map(|n| {
            let x = std::f64::consts::TAU * n as f64 / (len - 1) as f64;
            T::from_f64_lossy(0.5 * (1.0 - x.cos()))
        })
        .collect()
}

/// In-place iterative radix-2 FFT over `(re, im)` pairs. Length must be a
/// power of two.
pub fn fft_in_place<T: Real>(buf: &mut [(T, T)]) -> Result<()> {
    let n = buf.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidParameter(format!(
            "FFT length {n} is not a power of two"
        )));
    }
    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for k in 0..half {
            let ang = -std::f64::consts::TAU * k as f64 / len as f64;
            let (wr, wi) = (T::from_f64_lossy(ang.cos()), T::from_f64_lossy(ang.sin()));
            let mut i = k;
            while i < n {
                let (ar, ai) = buf[i];
                let (br, bi) = buf[i + half];
                let tr = wr * br - wi * bi;
                let ti = wr * bi + wi * br;
                buf[i] = (ar + tr, ai + ti);
                buf[i + half] = (ar - tr, ai - ti);
                i += len;
            }
        }
        len *= 2;
    }
    Ok(())
}

/// Magnitude spectrum of a real signal zero-padded to `fft_size`; returns
/// bins `0..=fft_size/2`.
pub fn magnitude_spectrum<T: Real>(frame: &[T], fft_size: usize) -> Result<Vec<T>> {
    let mut buf: Vec<(T, T)> = Vec::with_capacity(fft_size);
    buf.extend(frame.iter().map(|&x| (x, T::zero())));
    buf.resize(fft_size, (T::zero(), T::zero()));
    fft_in_place(&mut buf)?;
    Ok(buf[..fft_size / 2 + 1]
        .iter()
        .map(|&(re, im)| (re * re + im * im).sqrt())
        .collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular filters spanning 0..Nyquist.
pub fn mel_filter_centers(num_filters: usize, sample_rate: u32) -> Vec<f64> {
    mel_points(num_filters, sample_rate)[1..=num_filters].to_vec()
}

fn mel_points(num_filters: usize, sample_rate: u32) -> Vec<f64> {
    let mel_hi = hz_to_mel(sample_rate as f64 / 2.0);
    (0..num_filters + 2)
        .map(|i| mel_to_hz(mel_hi * i as f64 / (num_filters + 1) as f64))
        .collect()
}

/// Triangular mel filterbank with continuous (not bin-snapped) edges;
/// `num_filters` rows by `fft_size/2 + 1` bins.
pub fn mel_filterbank<T: Real>(
    num_filters: usize,
    fft_size: usize,
    sample_rate: u32,
) -> Vec<Vec<T>> {
    let points = mel_points(num_filters, sample_rate);
    let n_bins = fft_size / 2 + 1;
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut bank = Vec::with_capacity(num_filters);
    for m in 0..num_filters {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        let mut filt = vec![T::zero(); n_bins];
        for (k, w) in filt.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let v = if f <= center {
                (f - left) / (center - left)
            } else {
                (right - f) / (right - center)
            };
            if v > 0.0 {
                *w = T::from_f64_lossy(v);
            }
        }
        bank.push(filt);
    }
    bank
}

/// Unscaled DCT-II: `c[k] = sum_n x[n] * cos(pi * (n + 0.5) * k / N)`.
pub fn dct_ii<T: Real>(input: &[T], keep: usize) -> Vec<T> {
    let n = input.len();
    let mut out = Vec::with_capacity(keep);
    for k in 0..keep.min(n) {
        let mut acc = T::zero();
        for (i, &x) in input.iter().enumerate() {
            let ang = std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64;
            acc += x * T::from_f64_lossy(ang.cos());
        }
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(N^2) DFT straight from the definition; the independent oracle for
    /// the FFT.
    fn naive_dft(signal: &[f64]) -> Vec<(f64, f64)> {
        let n = signal.len();
        (0..n)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (t, &x) in signal.iter().enumerate() {
                    let ang = std::f64::consts::TAU * k as f64 * t as f64 / n as f64;
                    re += x * ang.cos();
                    im -= x * ang.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn fft_matches_naive_dft() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        for &n in &[2usize, 8, 64, 256, 512] {
            let signal: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expected = naive_dft(&signal);
            let mut buf: Vec<(f64, f64)> = signal.iter().map(|&x| (x, 0.0)).collect();
            fft_in_place(&mut buf).unwrap();
            let scale: f64 = expected
                .iter()
                .map(|&(re, im)| (re * re + im * im).sqrt())
                .sum::<f64>()
                / n as f64;
            for (k, (&(ar, ai), &(br, bi))) in buf.iter().zip(&expected).enumerate() {
                let err = ((ar - br).powi(2) + (ai - bi).powi(2)).sqrt();
                assert!(err / scale.max(1e-12) < 1e-6, "n={n} bin {k}: err {err}");
            }
        }
    }

    #[test]
    fn fft_rejects_non_power_of_two() {
        let mut buf = vec![(0.0f64, 0.0); 12];
        assert!(fft_in_place(&mut buf).is_err());
    }

    #[test]
    fn dct_of_constant_has_single_nonzero() {
        let x = vec![3.0f64; 26];
        let c = dct_ii(&x, 13);
        assert!((c[0] - 3.0 * 26.0).abs() < 1e-9);
        for (k, &v) in c.iter().enumerate().skip(1) {
            assert!(v.abs() < 1e-9, "c[{k}]={v}");
        }
    }

    #[test]
    fn hann_endpoints_and_midpoint() {
        let w: Vec<f64> = hann_window(401);
        assert!(w[0].abs() < 1e-12);
        assert!(w[400].abs() < 1e-12);
        assert!((w[200] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mel_hz_roundtrip() {
        for &f in &[0.0, 150.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-6);
        }
    }

    #[test]
    fn filterbank_peaks_at_centers() {
        let bank: Vec<Vec<f64>> = mel_filterbank(26, 512, 16000);
        let centers = mel_filter_centers(26, 16000);
        let bin_hz = 16000.0 / 512.0;
        for (m, filt) in bank.iter().enumerate() {
            let argmax = filt
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(
                ((argmax as f64 * bin_hz) - centers[m]).abs() <= bin_hz,
                "filter {m} peaks at bin {argmax}, center {}",
                centers[m]
            );
        }
    }
}
