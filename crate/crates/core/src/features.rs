//! Log-mel spectrogram extraction.
//!
//! Defaults: 1024-sample periodic Hann window, hop of 320 samples, 64 mel
//! bands on the HTK mel scale, natural log with a floor of 1e-10. Frames are
//! centered by reflect-padding `n_fft / 2` samples on each side, so a clip of
//! `len` samples yields `len / hop + 1` frames.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::{Error, Result};

/// Per-filter normalization of the mel filterbank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MelNorm {
    /// Scale each triangle by `2 / (f_hi - f_lo)` so it has unit area in Hz.
    #[default]
    Slaney,
    /// Unit-height triangles.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper band edge in Hz; `None` means the Nyquist frequency.
    pub f_max: Option<f64>,
    pub log_floor: f64,
    pub mel_norm: MelNorm,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 320,
            n_mels: 64,
            f_min: 0.0,
            f_max: None,
            log_floor: 1e-10,
            mel_norm: MelNorm::Slaney,
        }
    }
}

impl SpectrogramConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn f_max_for(&self, sample_rate: u32) -> f64 {
        self.f_max.unwrap_or(f64::from(sample_rate) / 2.0)
    }

    /// Number of frames produced for a clip of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.n_fft < 2 || !self.n_fft.is_power_of_two() {
            return Err(Error::Config(format!(
                "n_fft = {} must be a power of two >= 2",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "hop = {} must satisfy 0 < hop <= n_fft = {}",
                self.hop, self.n_fft
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        if !(self.log_floor.is_finite() && self.log_floor > 0.0) {
            return Err(Error::Config(format!(
                "log_floor = {} must be a positive real",
                self.log_floor
            )));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        let nyquist = f64::from(sample_rate) / 2.0;
        let f_max = self.f_max_for(sample_rate);
        if !(self.f_min >= 0.0 && self.f_min < f_max && f_max <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= f_min ({}) < f_max ({f_max}) <= sample_rate / 2 ({nyquist})",
                self.f_min
            )));
        }
        Ok(())
    }
}

/// Where a spectrogram came from. Absent for spectrograms read back from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: SpectrogramConfig,
    pub sample_rate: u32,
    pub n_samples: usize,
}

/// An `F x T` matrix of log-power values: rows are mel bands, columns frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    data: Array2<f64>,
    provenance: Option<Provenance>,
}

impl MelSpectrogram {
    /// Wraps an existing matrix, checking it is non-empty and finite.
    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        check_matrix(&data)?;
        Ok(Self {
            data,
            provenance: None,
        })
    }

    /// Row-major constructor, mostly for tests and small literals.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::from_array(rows_to_array(rows)?)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn n_mels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }
}

pub(crate) fn check_matrix(data: &Array2<f64>) -> Result<()> {
    if data.nrows() == 0 || data.ncols() == 0 {
        return Err(Error::Shape(format!(
            "spectrogram must be at least 1 x 1, got {} x {}",
            data.nrows(),
            data.ncols()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("spectrogram holds non-finite values".into()));
    }
    Ok(())
}

pub(crate) fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n_cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(Error::Shape("ragged rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), n_cols), flat).map_err(|e| Error::Shape(e.to_string()))
}

/// Periodic Hann window: `w[i] = 0.5 - 0.5 cos(2 pi i / n)`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Maps an index into the reflect-padded signal back into `0..len`.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let j = i.rem_euclid(period);
    if j < len as isize {
        j as usize
    } else {
        (period - j) as usize
    }
}

/// Full `n`-bin power spectrum `|DFT(window * frame)|^2` of one frame.
pub fn frame_power_full(frame: &[f64], window: &[f64]) -> Vec<f64> {
    assert_eq!(frame.len(), window.len(), "frame and window lengths differ");
    let fft = FftPlanner::new().plan_fft_forward(frame.len());
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .zip(window)
        .map(|(x, w)| Complex::new(x * w, 0.0))
        .collect();
    fft.process(&mut buf);
    buf.iter().map(Complex::norm_sqr).collect()
}

/// Centered short-time power spectrum, shape `(n_fft / 2 + 1) x T`.
pub fn stft_power(clip: &AudioClip, cfg: &SpectrogramConfig) -> Result<Array2<f64>> {
    cfg.validate(clip.sample_rate())?;
    let samples = clip.samples();
    if samples.is_empty() {
        return Err(Error::InputTooShort("clip has no samples".into()));
    }
    let n_fft = cfg.n_fft;
    let n_bins = cfg.n_bins();
    let n_frames = cfg.n_frames(samples.len());
    let pad = (n_fft / 2) as isize;
    let window = hann_window(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::default(); n_fft];
    let mut power = Array2::<f64>::zeros((n_bins, n_frames));

    for t in 0..n_frames {
        let start = (t * cfg.hop) as isize - pad;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = samples[reflect_index(start + i as isize, samples.len())];
            *slot = Complex::new(f64::from(s) * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (bin, c) in buf[..n_bins].iter().enumerate() {
            power[[bin, t]] = c.norm_sqr();
        }
    }
    Ok(power)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Band edges in Hz: `n_mels + 2` points equally spaced on the mel scale.
pub fn mel_band_edges(cfg: &SpectrogramConfig, sample_rate: u32) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max_for(sample_rate));
    let steps = (cfg.n_mels + 1) as f64;
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / steps))
        .collect()
}

/// Triangular mel filterbank, shape `n_mels x (n_fft / 2 + 1)`.
pub fn mel_filterbank(cfg: &SpectrogramConfig, sample_rate: u32) -> Result<Array2<f64>> {
    cfg.validate(sample_rate)?;
    let n_bins = cfg.n_bins();
    let bin_hz = f64::from(sample_rate) / cfg.n_fft as f64;
    let edges = mel_band_edges(cfg, sample_rate);
    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));

    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if hi - lo < bin_hz {
            return Err(Error::Config(format!(
                "mel filter {m} spans {:.3} Hz, less than one FFT bin ({bin_hz:.3} Hz); \
                 reduce n_mels or increase n_fft",
                hi - lo
            )));
        }
        let scale = match cfg.mel_norm {
            MelNorm::Slaney => 2.0 / (hi - lo),
            MelNorm::None => 1.0,
        };
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            let w = rising.min(falling).max(0.0);
            fb[[m, k]] = w * scale;
        }
        if fb.row(m).iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} ({lo:.1}..{hi:.1} Hz) covers no FFT bin"
            )));
        }
    }
    Ok(fb)
}

/// `ln(max(filterbank . stft_power, log_floor))`.
pub fn log_mel(clip: &AudioClip, cfg: &SpectrogramConfig) -> Result<MelSpectrogram> {
    let fb = mel_filterbank(cfg, clip.sample_rate())?;
    let power = stft_power(clip, cfg)?;
    let floor = cfg.log_floor;
    let data = fb.dot(&power).mapv(|v| v.max(floor).ln());
    Ok(MelSpectrogram {
        data,
        provenance: Some(Provenance {
            config: cfg.clone(),
            sample_rate: clip.sample_rate(),
            n_samples: clip.len(),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, sample_rate: u32, len: usize) -> AudioClip {
        let samples = (0..len)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / f64::from(sample_rate)).sin()) as f32)
            .collect();
        AudioClip::new(samples, sample_rate).unwrap()
    }

    fn naive_dft_power(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * t % n) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn hann_small_cases() {
        let w = hann_window(4);
        let expect = [0.0, 0.5, 1.0, 0.5];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(hann_window(1), vec![0.0]);
    }

    #[test]
    fn hann_1024_symmetric_about_512() {
        let w = hann_window(1024);
        for i in 1..512 {
            assert!((w[512 - i] - w[512 + i]).abs() < 1e-12);
        }
        assert!((w[512] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frame_count_formula() {
        let cfg = SpectrogramConfig::default();
        assert_eq!(cfg.n_frames(441_000), 1379);
        let clip = AudioClip::new(vec![0.0; 441_000], 44_100).unwrap();
        assert_eq!(stft_power(&clip, &cfg).unwrap().dim(), (513, 1379));
    }

    #[test]
    fn silence_has_zero_power() {
        let clip = AudioClip::new(vec![0.0; 5000], 16_000).unwrap();
        let p = stft_power(&clip, &SpectrogramConfig::default()).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        let clip = tone(1000.0, 16_000, 16_000);
        let cfg = SpectrogramConfig::default();
        let p = stft_power(&clip, &cfg).unwrap();

        // Oracle: naive DFT on one interior frame.
        let t = 20;
        let start = t * cfg.hop - cfg.n_fft / 2;
        let w = hann_window(cfg.n_fft);
        let frame: Vec<f64> = (0..cfg.n_fft)
            .map(|i| f64::from(clip.samples()[start + i]) * w[i])
            .collect();
        let oracle = naive_dft_power(&frame);
        let oracle_peak = (0..=512)
            .max_by(|&a, &b| oracle[a].total_cmp(&oracle[b]))
            .unwrap();
        assert_eq!(oracle_peak, 64);
        for k in 0..=512 {
            assert!((p[[k, t]] - oracle[k]).abs() <= 1e-9 * (1.0 + oracle[k]));
        }
        // Frames 0 and 1 and the tail reach into the reflected padding.
        for t in 2..p.ncols() - 2 {
            let col = p.column(t);
            let peak = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            assert_eq!(peak, 64, "frame {t}");
        }
    }

    #[test]
    fn parseval_per_frame() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = hann_window(1024);
        for _ in 0..10 {
            let frame: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
            let spectrum: f64 = frame_power_full(&frame, &w).iter().sum();
            let energy: f64 = frame.iter().zip(&w).map(|(x, w)| (x * w).powi(2)).sum();
            let expect = 1024.0 * energy;
            assert!((spectrum - expect).abs() <= 1e-6 * expect);
        }
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(-9, 5), 1);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn one_sample_clip_still_frames() {
        let clip = AudioClip::new(vec![0.5], 16_000).unwrap();
        let p = stft_power(&clip, &SpectrogramConfig::default()).unwrap();
        assert_eq!(p.dim(), (513, 1));
    }

    #[test]
    fn filterbank_shape_and_support() {
        let cfg = SpectrogramConfig::default();
        let fb = mel_filterbank(&cfg, 16_000).unwrap();
        assert_eq!(fb.dim(), (64, 513));
        assert!(fb.iter().all(|&w| w >= 0.0));
        for row in fb.rows() {
            assert!(row.iter().any(|&w| w > 0.0));
        }
    }

    #[test]
    fn filter_peaks_follow_mel_scale() {
        let cfg = SpectrogramConfig::default();
        let sr = 16_000;
        let fb = mel_filterbank(&cfg, sr).unwrap();
        // Independent oracle for the band centers.
        let top = 2595.0 * (1.0 + 8000.0f64 / 700.0).log10();
        let centers: Vec<f64> = (1..=64)
            .map(|i| 700.0 * (10f64.powf(top * i as f64 / 65.0 / 2595.0) - 1.0))
            .collect();
        let bin_hz = 16_000.0 / 1024.0;
        let mut last = -1.0;
        for (m, row) in fb.rows().into_iter().enumerate() {
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            let peak_hz = peak as f64 * bin_hz;
            assert!(peak_hz >= last, "row {m} peak went backwards");
            assert!((peak_hz - centers[m]).abs() <= bin_hz, "row {m}: {peak_hz} vs {}", centers[m]);
            last = peak_hz;
        }
    }

    #[test]
    fn too_many_mels_is_a_config_error() {
        let cfg = SpectrogramConfig {
            n_fft: 256,
            n_mels: 128,
            hop: 128,
            ..SpectrogramConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg, 16_000), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let ok = SpectrogramConfig::default();
        assert!(ok.validate(16_000).is_ok());
        let bad = [
            SpectrogramConfig { n_fft: 1000, ..ok.clone() },
            SpectrogramConfig { hop: 0, ..ok.clone() },
            SpectrogramConfig { hop: 2048, ..ok.clone() },
            SpectrogramConfig { f_min: 9000.0, ..ok.clone() },
            SpectrogramConfig { f_max: Some(9000.0), ..ok.clone() },
            SpectrogramConfig { log_floor: 0.0, ..ok.clone() },
        ];
        for cfg in bad {
            assert!(cfg.validate(16_000).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let clip = AudioClip::new(vec![0.0; 16_000], 16_000).unwrap();
        let mel = log_mel(&clip, &SpectrogramConfig::default()).unwrap();
        assert_eq!((mel.n_mels(), mel.n_frames()), (64, 51));
        let floor = 1e-10f64.ln();
        assert!(mel.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn log_mel_shape_and_floor() {
        let clip = tone(440.0, 22_050, 10_000);
        let cfg = SpectrogramConfig::default();
        let mel = log_mel(&clip, &cfg).unwrap();
        assert_eq!(mel.data().dim(), (64, 10_000 / 320 + 1));
        let floor = cfg.log_floor.ln();
        assert!(mel.data().iter().all(|&v| v.is_finite() && v >= floor));
        assert_eq!(mel.provenance().unwrap().sample_rate, 22_050);
    }

    #[test]
    fn log_mel_is_bit_deterministic() {
        let clip = tone(700.0, 16_000, 8000);
        let cfg = SpectrogramConfig::default();
        let a = log_mel(&clip, &cfg).unwrap();
        let b = log_mel(&clip, &cfg).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn white_noise_rows_are_flat_above_100_hz() {
        use rand::{Rng, SeedableRng};
        let cfg = SpectrogramConfig::default();
        let sr = 16_000;
        let edges = mel_band_edges(&cfg, sr);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut sums = vec![0.0; cfg.n_mels];
        for _ in 0..100 {
            let samples = (0..8000).map(|_| rng.random_range(-0.5f32..0.5)).collect();
            let clip = AudioClip::new(samples, sr).unwrap();
            let mel = log_mel(&clip, &cfg).unwrap();
            for (m, row) in mel.data().rows().into_iter().enumerate() {
                sums[m] += row.iter().map(|v| v.exp()).sum::<f64>();
            }
        }
        let kept: Vec<f64> = (0..cfg.n_mels)
            .filter(|&m| edges[m] > 100.0)
            .map(|m| sums[m])
            .collect();
        assert!(kept.len() > 50);
        let max = kept.iter().cloned().fold(f64::MIN, f64::max);
        let min = kept.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - min) / max <= 0.2, "spread {}", (max - min) / max);
    }
}
