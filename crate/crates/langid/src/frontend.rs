//! Feature frontend: 80-band log-mel spectrograms (25 ms window, 10 ms hop,
//! 512-point FFT, Hann window) with per-bin normalization, plus the two
//! training-time augmentations (speed perturbation, spectrogram masking).

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio::{resample_to_len, AudioBuffer};
use crate::error::{Error, Result};
use crate::nn::Mat;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WIN_LENGTH: usize = 400; // 25 ms at 16 kHz
pub const HOP_LENGTH: usize = 160; // 10 ms
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 80;
/// Floor added before the log; 2^-24.
pub const LOG_EPS: f64 = 1.0 / (1 << 24) as f64;
/// Standard-deviation floor for normalization.
pub const STD_FLOOR: f32 = 1e-5;

/// Number of frames produced for `len` samples: 1 + floor((len-400)/160).
pub fn frame_count(len: usize) -> Option<usize> {
    if len < WIN_LENGTH {
        None
    } else {
        Some(1 + (len - WIN_LENGTH) / HOP_LENGTH)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over 0..8000 Hz: (n_mels x n_bins) weights and
/// the center frequency of each filter.
pub fn mel_filterbank() -> (Mat<f64>, Vec<f64>) {
    let n_bins = N_FFT / 2 + 1;
    let f_max = SAMPLE_RATE as f64 / 2.0;
    let mel_points: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(hz_to_mel(0.0) + (hz_to_mel(f_max) - hz_to_mel(0.0)) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let mut fb = Mat::zeros(N_MELS, n_bins);
    for m in 0..N_MELS {
        let (lo, center, hi) = (mel_points[m], mel_points[m + 1], mel_points[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
            let w = if f > lo && f < center {
                (f - lo) / (center - lo)
            } else if (f - center).abs() < 1e-12 {
                1.0
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb.set(m, b, w);
        }
    }
    let centers = mel_points[1..=N_MELS].to_vec();
    (fb, centers)
}

/// Per-frame log-mel computation shared by the batch frontend and the
/// streaming path, so both produce bit-identical frames.
pub(crate) struct LogmelExtractor {
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    window: Vec<f64>,
    fb: Mat<f64>,
}

impl LogmelExtractor {
    pub fn new() -> Self {
        let (fb, _) = mel_filterbank();
        LogmelExtractor {
            fft: FftPlanner::<f64>::new().plan_fft_forward(N_FFT),
            window: (0..WIN_LENGTH)
                .map(|n| {
                    0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / WIN_LENGTH as f64).cos())
                })
                .collect(),
            fb,
        }
    }

    /// One 400-sample window -> 80 log-mel values.
    pub fn frame(&self, samples: &[f32]) -> Vec<f32> {
        debug_assert_eq!(samples.len(), WIN_LENGTH);
        let mut buf_c: Vec<Complex<f64>> = (0..N_FFT)
            .map(|n| {
                if n < WIN_LENGTH {
                    Complex::new(samples[n] as f64 * self.window[n], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                }
            })
            .collect();
        self.fft.process(&mut buf_c);
        let power: Vec<f64> = buf_c[..N_FFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let mut col = vec![0.0f32; N_MELS];
        for (m, cv) in col.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (b, &p) in power.iter().enumerate() {
                acc += self.fb.at(m, b) * p;
            }
            *cv = (acc + LOG_EPS).ln() as f32;
        }
        col
    }
}

/// Log-mel features (80 x T). Requires 16 kHz input of at least one window.
pub fn compute_logmel(buf: &AudioBuffer) -> Result<Mat<f32>> {
    if buf.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "expected {SAMPLE_RATE} Hz input, got {} (resample first)",
            buf.sample_rate
        )));
    }
    let t = frame_count(buf.len()).ok_or_else(|| {
        Error::Audio(format!(
            "audio of {} samples shorter than one {WIN_LENGTH}-sample window",
            buf.len()
        ))
    })?;
    let ex = LogmelExtractor::new();
    let frames = crate::par::map_range(t, |fi| {
        let start = fi * HOP_LENGTH;
        ex.frame(&buf.samples[start..start + WIN_LENGTH])
    });
    let mut out = Mat::zeros(N_MELS, t);
    for (fi, col) in frames.iter().enumerate() {
        for (m, &v) in col.iter().enumerate() {
            out.set(m, fi, v);
        }
    }
    Ok(out)
}

/// Which axis normalization statistics run over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormAxis {
    /// Per mel bin over time (the default scheme).
    #[default]
    PerBin,
    /// Per frame over bins; exposed for comparison only.
    PerFrame,
}

/// Per-bin mean and population standard deviation over time.
pub fn feature_norm_stats(f: &Mat<f32>) -> (Vec<f32>, Vec<f32>) {
    let t = f.cols() as f32;
    let mut means = Vec::with_capacity(f.rows());
    let mut stds = Vec::with_capacity(f.rows());
    for r in 0..f.rows() {
        let row = f.row(r);
        let mean = row.iter().sum::<f32>() / t;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / t;
        means.push(mean);
        stds.push(var.sqrt());
    }
    (means, stds)
}

/// Normalize with precomputed per-bin statistics.
pub fn normalize_with_stats(f: &Mat<f32>, means: &[f32], stds: &[f32]) -> Mat<f32> {
    Mat::from_fn(f.rows(), f.cols(), |r, c| {
        (f.at(r, c) - means[r]) / stds[r].max(STD_FLOOR)
    })
}

/// Per-utterance feature normalization.
pub fn normalize_features(f: &Mat<f32>, axis: NormAxis) -> Mat<f32> {
    match axis {
        NormAxis::PerBin => {
            let (means, stds) = feature_norm_stats(f);
            normalize_with_stats(f, &means, &stds)
        }
        NormAxis::PerFrame => {
            let n = f.rows() as f32;
            let mut out = Mat::zeros(f.rows(), f.cols());
            for c in 0..f.cols() {
                let mut mean = 0.0f32;
                for r in 0..f.rows() {
                    mean += f.at(r, c);
                }
                mean /= n;
                let mut var = 0.0f32;
                for r in 0..f.rows() {
                    let d = f.at(r, c) - mean;
                    var += d * d;
                }
                var /= n;
                let std = var.sqrt().max(STD_FLOOR);
                for r in 0..f.rows() {
                    out.set(r, c, (f.at(r, c) - mean) / std);
                }
            }
            out
        }
    }
}

/// Augmentation settings; defaults follow the training recipe
/// (speed 0.5 probability in (0.95, 1.05); masks 3x4 and 5x0.03).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub speed_prob: f64,
    pub speed_range: (f64, f64),
    pub freq_masks: usize,
    pub freq_width: usize,
    pub time_masks: usize,
    /// Fraction of the utterance frames; each time mask width is drawn in
    /// [0, ceil(time_width * T)].
    pub time_width: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            speed_prob: 0.5,
            speed_range: (0.95, 1.05),
            freq_masks: 3,
            freq_width: 4,
            time_masks: 5,
            time_width: 0.03,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            speed_prob: 0.0,
            speed_range: (1.0, 1.0),
            freq_masks: 0,
            freq_width: 0,
            time_masks: 0,
            time_width: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.speed_prob) {
            return Err(Error::Config("speed_prob outside [0,1]".into()));
        }
        if self.speed_range.0 <= 0.0 || self.speed_range.1 < self.speed_range.0 {
            return Err(Error::Config("invalid speed range".into()));
        }
        if self.time_width < 0.0 {
            return Err(Error::Config("negative time_width".into()));
        }
        Ok(())
    }
}

/// With probability `speed_prob`, resample the waveform to length
/// `round(len / r)` for r uniform in the speed range (nominal rate kept).
pub fn speed_perturb(buf: &AudioBuffer, cfg: &AugmentConfig, rng: &mut impl Rng) -> AudioBuffer {
    if cfg.speed_prob <= 0.0 || rng.random::<f64>() >= cfg.speed_prob {
        return buf.clone();
    }
    let (lo, hi) = cfg.speed_range;
    let r = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let out_len = (buf.samples.len() as f64 / r).round() as usize;
    AudioBuffer::new(resample_to_len(&buf.samples, out_len), buf.sample_rate)
}

/// One zeroed rectangle of a spectrogram mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpan {
    pub on_freq_axis: bool,
    pub start: usize,
    pub width: usize,
}

/// Spectrogram masking; returns the coordinates actually zeroed so tests
/// can verify untouched cells.
pub fn spec_augment_recorded(
    f: &Mat<f32>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Mat<f32>, Vec<MaskSpan>) {
    let mut out = f.clone();
    let mut spans = Vec::with_capacity(cfg.freq_masks + cfg.time_masks);
    let n_bins = f.rows();
    let t = f.cols();
    for _ in 0..cfg.freq_masks {
        let width = rng.random_range(0..=cfg.freq_width.min(n_bins));
        let start = rng.random_range(0..=n_bins - width);
        for r in start..start + width {
            for c in 0..t {
                out.set(r, c, 0.0);
            }
        }
        spans.push(MaskSpan {
            on_freq_axis: true,
            start,
            width,
        });
    }
    let max_t = ((cfg.time_width * t as f64).ceil() as usize).min(t);
    for _ in 0..cfg.time_masks {
        let width = rng.random_range(0..=max_t);
        let start = rng.random_range(0..=t - width);
        for c in start..start + width {
            for r in 0..n_bins {
                out.set(r, c, 0.0);
            }
        }
        spans.push(MaskSpan {
            on_freq_axis: false,
            start,
            width,
        });
    }
    (out, spans)
}

pub fn spec_augment(f: &Mat<f32>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Mat<f32> {
    spec_augment_recorded(f, cfg, rng).0
}

/// Feature-dump binary format: magic `LMEL`, frame count u32 LE, then the
/// 80 x T matrix as row-major little-endian f32.
pub fn write_feature_dump(path: impl AsRef<std::path::Path>, f: &Mat<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(8 + f.rows() * f.cols() * 4);
    bytes.extend_from_slice(b"LMEL");
    bytes.extend_from_slice(&(f.cols() as u32).to_le_bytes());
    for &v in f.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_dump(path: impl AsRef<std::path::Path>) -> Result<Mat<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[0..4] != b"LMEL" {
        return Err(Error::Audio(format!("{}: not a feature dump", path.display())));
    }
    let t = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let need = 8 + N_MELS * t * 4;
    if bytes.len() != need {
        return Err(Error::Audio(format!(
            "{}: expected {need} bytes for {t} frames, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Mat::from_vec(N_MELS, t, data))
}
