//! Audio ingestion and synthesis: WAV read/write, linear resampling, segment
//! slicing, and a seeded synthetic two-language corpus for desk-scale runs.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifest::{Manifest, UtteranceRecord};

/// Mono waveform plus its sample rate. Samples live in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0);
        AudioBuffer {
            samples,
            sample_rate,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Sample encoding for [`write_wav`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

// ---------------------------------------------------------------------------
// WAV I/O (RIFF, PCM16 / IEEE float32)
// ---------------------------------------------------------------------------

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Read a WAV file as a mono buffer. Multi-channel input is downmixed by
/// per-sample channel mean; PCM16 samples are scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|msg| Error::Wav(format!("{}: {msg}", path.display())))
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<AudioBuffer, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err("truncated chunk".into());
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err("fmt chunk too short".into());
                }
                fmt = Some((
                    read_u16(body, 0),
                    read_u16(body, 2),
                    read_u32(body, 4),
                    read_u16(body, 14),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_start + size + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or("missing fmt chunk")?;
    let data = data.ok_or("missing data chunk")?;
    if channels == 0 || rate == 0 {
        return Err("invalid fmt fields".into());
    }
    if data.is_empty() {
        return Err("zero-length data payload".into());
    }
    let ch = channels as usize;
    let samples: Vec<f32> = match (format, bits) {
        (1, 16) => {
            let n = data.len() / 2;
            let frames = n / ch;
            (0..frames)
                .map(|i| {
                    let mut acc = 0.0f32;
                    for c in 0..ch {
                        let v = i16::from_le_bytes([data[(i * ch + c) * 2], data[(i * ch + c) * 2 + 1]]);
                        acc += v as f32 / 32768.0;
                    }
                    acc / ch as f32
                })
                .collect()
        }
        (3, 32) => {
            let n = data.len() / 4;
            let frames = n / ch;
            (0..frames)
                .map(|i| {
                    let mut acc = 0.0f32;
                    for c in 0..ch {
                        let at = (i * ch + c) * 4;
                        acc += f32::from_le_bytes([data[at], data[at + 1], data[at + 2], data[at + 3]]);
                    }
                    acc / ch as f32
                })
                .collect()
        }
        _ => {
            return Err(format!(
                "unsupported encoding: format {format}, {bits} bits (want PCM16 or float32)"
            ))
        }
    };
    if samples.is_empty() {
        return Err("zero-length payload".into());
    }
    Ok(AudioBuffer::new(samples, rate))
}

/// Write a mono WAV file.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer, enc: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(buf, enc);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn encode_wav(buf: &AudioBuffer, enc: WavEncoding) -> Vec<u8> {
    let (format, bits): (u16, u16) = match enc {
        WavEncoding::Pcm16 => (1, 16),
        WavEncoding::Float32 => (3, 32),
    };
    let bytes_per = (bits / 8) as u32;
    let data_len = buf.samples.len() as u32 * bytes_per;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&buf.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate * bytes_per).to_le_bytes());
    out.extend_from_slice(&(bytes_per as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    match enc {
        WavEncoding::Pcm16 => {
            for &s in &buf.samples {
                // Same 1/32768 scale as the reader keeps the round trip
                // within one LSB across the full range.
                let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        WavEncoding::Float32 => {
            for &s in &buf.samples {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Resampling and slicing
// ---------------------------------------------------------------------------

/// Endpoint-aligned linear interpolation to an explicit output length.
pub(crate) fn resample_to_len(samples: &[f32], out_len: usize) -> Vec<f32> {
    if out_len == 0 || samples.is_empty() {
        return Vec::new();
    }
    if out_len == samples.len() {
        return samples.to_vec();
    }
    if samples.len() == 1 || out_len == 1 {
        return vec![samples[0]; out_len];
    }
    let scale = (samples.len() - 1) as f64 / (out_len - 1) as f64;
    (0..out_len)
        .map(|j| {
            let u = j as f64 * scale;
            let i = (u.floor() as usize).min(samples.len() - 2);
            let frac = (u - i as f64) as f32;
            samples[i] * (1.0 - frac) + samples[i + 1] * frac
        })
        .collect()
}

/// Linear-interpolation resampling. Output length is
/// `round(len * target_rate / source_rate)`; identical rates return the
/// buffer unchanged.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::Audio("target rate must be positive".into()));
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let out_len =
        (buf.samples.len() as f64 * target_rate as f64 / buf.sample_rate as f64).round() as usize;
    Ok(AudioBuffer::new(
        resample_to_len(&buf.samples, out_len),
        target_rate,
    ))
}

/// Extract `round(duration*rate)` samples starting at `round(offset*rate)`.
/// The slice may overrun the buffer end by at most one sample.
pub fn slice_segment(buf: &AudioBuffer, offset: f64, duration: f64) -> Result<AudioBuffer> {
    if offset < 0.0 || duration < 0.0 {
        return Err(Error::Audio(format!(
            "negative offset/duration ({offset}, {duration})"
        )));
    }
    let rate = buf.sample_rate as f64;
    let start = (offset * rate).round() as usize;
    let mut n = (duration * rate).round() as usize;
    if start > buf.samples.len() {
        return Err(Error::Audio(format!(
            "slice start {start} beyond buffer of {} samples",
            buf.samples.len()
        )));
    }
    if start + n > buf.samples.len() {
        // One sample of rounding slack; anything more is a caller error.
        if start + n <= buf.samples.len() + 1 {
            n = buf.samples.len() - start;
        } else {
            return Err(Error::Audio(format!(
                "slice [{start}, {}) beyond buffer of {} samples",
                start + n,
                buf.samples.len()
            )));
        }
    }
    Ok(AudioBuffer::new(
        buf.samples[start..start + n].to_vec(),
        buf.sample_rate,
    ))
}

/// Read one manifest record: open its file, slice to offset/duration, and
/// resample to `target_rate`.
pub fn load_record_audio(
    manifest: &Manifest,
    rec: &UtteranceRecord,
    target_rate: u32,
) -> Result<AudioBuffer> {
    let path = manifest.resolve_path(rec);
    let buf = read_wav(&path)?;
    let sliced = if rec.offset > 0.0 || rec.duration < buf.duration() - 1e-9 {
        slice_segment(&buf, rec.offset, rec.duration)?
    } else {
        buf
    };
    resample(&sliced, target_rate)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Spectral recipe for one class: where its resonances sit and how fast its
/// amplitude envelope wobbles.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProfile {
    pub label: String,
    pub resonances_hz: Vec<f64>,
    pub modulation_hz: f64,
}

/// Recipe for a deterministic labeled corpus of narrowband-noise utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpusSpec {
    pub per_class: usize,
    pub duration_range: (f64, f64),
    pub seed: u64,
    pub sample_rate: u32,
    pub profiles: Vec<ClassProfile>,
}

impl SynthCorpusSpec {
    /// Two-language corpus with well-separated resonance bands, labeled with
    /// the generic class tags "en" and "zh".
    pub fn two_language(per_class: usize, duration_range: (f64, f64), seed: u64) -> Self {
        SynthCorpusSpec {
            per_class,
            duration_range,
            seed,
            sample_rate: 16_000,
            profiles: vec![
                ClassProfile {
                    label: "en".into(),
                    resonances_hz: vec![400.0, 900.0, 1400.0],
                    modulation_hz: 3.0,
                },
                ClassProfile {
                    label: "zh".into(),
                    resonances_hz: vec![2600.0, 3100.0, 3600.0],
                    modulation_hz: 6.0,
                },
            ],
        }
    }

    /// Many-class corpus for the synthetic speaker-recognition pretraining
    /// task: each "speaker" gets its own resonance pair and modulation rate.
    pub fn speakers(n_speakers: usize, per_class: usize, duration_range: (f64, f64), seed: u64) -> Self {
        let profiles = (0..n_speakers)
            .map(|i| {
                let base = 350.0 + 450.0 * i as f64;
                ClassProfile {
                    label: format!("spk{i:02}"),
                    resonances_hz: vec![base, base + 200.0],
                    modulation_hz: 2.0 + i as f64,
                }
            })
            .collect();
        SynthCorpusSpec {
            per_class,
            duration_range,
            seed,
            sample_rate: 16_000,
            profiles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.duration_range;
        if !(0.3..=16.0).contains(&lo) || !(0.3..=16.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "duration range ({lo}, {hi}) must lie within [0.3, 16.0] s"
            )));
        }
        if self.profiles.len() < 2 {
            return Err(Error::Config("need at least two class profiles".into()));
        }
        for (i, a) in self.profiles.iter().enumerate() {
            for b in &self.profiles[i + 1..] {
                if a.resonances_hz == b.resonances_hz {
                    return Err(Error::Config(format!(
                        "profiles {} and {} share the same resonances",
                        a.label, b.label
                    )));
                }
            }
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        Ok(())
    }

    /// Smallest spacing between the resonance bands of any two classes
    /// (zero if bands overlap). The long-run spectral centroids of two
    /// classes are expected to differ by at least this much.
    pub fn resonance_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for (i, a) in self.profiles.iter().enumerate() {
            let (a_lo, a_hi) = band(&a.resonances_hz);
            for b in &self.profiles[i + 1..] {
                let (b_lo, b_hi) = band(&b.resonances_hz);
                let sep = if a_hi < b_lo {
                    b_lo - a_hi
                } else if b_hi < a_lo {
                    a_lo - b_hi
                } else {
                    0.0
                };
                gap = gap.min(sep);
            }
        }
        gap
    }
}

fn band(res: &[f64]) -> (f64, f64) {
    let lo = res.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = res.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive an independent stream seed from a base seed and stream tags.
pub(crate) fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15)) ^ b)
}

/// One utterance: per-resonance narrowband noise (two-pole resonator driven
/// by white noise, RMS-normalized per band), summed and amplitude-modulated.
fn synth_utterance(profile: &ClassProfile, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut mix = vec![0.0f64; n];
    let r = 0.995f64;
    for &fc in &profile.resonances_hz {
        let w0 = 2.0 * std::f64::consts::PI * fc / sr;
        let (a1, a2) = (2.0 * r * w0.cos(), -r * r);
        let mut y1 = 0.0f64;
        let mut y2 = 0.0f64;
        let mut bandbuf = vec![0.0f64; n];
        for b in bandbuf.iter_mut() {
            let x: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let y = x + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            *b = y;
        }
        let rms = (bandbuf.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if rms > 0.0 {
            for (m, b) in mix.iter_mut().zip(&bandbuf) {
                *m += b / rms;
            }
        }
    }
    let phase: f64 = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
    let wm = 2.0 * std::f64::consts::PI * profile.modulation_hz / sr;
    for (i, m) in mix.iter_mut().enumerate() {
        *m *= 1.0 + 0.8 * (wm * i as f64 + phase).sin();
    }
    let peak = mix.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    mix.iter().map(|v| (0.7 * v / peak) as f32).collect()
}

/// Generate the corpus under `out_dir` (WAVs in `wavs/`, manifest at
/// `manifest.jsonl`) and return the manifest. Deterministic for a fixed
/// seed: the same spec always produces byte-identical audio and manifest.
pub fn synth_corpus(spec: &SynthCorpusSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wavs");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let sr = spec.sample_rate;
    let mut records = Vec::with_capacity(spec.profiles.len() * spec.per_class);
    for (ci, profile) in spec.profiles.iter().enumerate() {
        for ui in 0..spec.per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, ci as u64, ui as u64));
            let (lo, hi) = spec.duration_range;
            let dur = if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            };
            let n = (dur * sr as f64).round() as usize;
            let samples = synth_utterance(profile, n, sr as f64, &mut rng);
            let fname = format!("{}_{ui:04}.wav", profile.label);
            let rel = format!("wavs/{fname}");
            write_wav(
                wav_dir.join(&fname),
                &AudioBuffer::new(samples, sr),
                WavEncoding::Pcm16,
            )?;
            records.push(UtteranceRecord {
                audio_filepath: rel,
                offset: 0.0,
                duration: n as f64 / sr as f64,
                label: profile.label.clone(),
                recording_id: Some(format!("{}_{ui:04}", profile.label)),
            });
        }
    }
    let manifest = Manifest {
        records,
        base_dir: Some(out_dir.to_path_buf()),
    };
    manifest.write(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn tempdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    /// Test-side oracle: spectral centroid of a waveform by direct FFT.
    fn spectral_centroid(samples: &[f32], sr: f64) -> f64 {
        let n = samples.len().next_power_of_two();
        let mut buf: Vec<Complex<f64>> = samples
            .iter()
            .map(|&s| Complex::new(s as f64, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(n)
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, c) in buf.iter().take(n / 2 + 1).enumerate() {
            let p = c.norm_sqr();
            num += k as f64 * sr / n as f64 * p;
            den += p;
        }
        num / den.max(1e-30)
    }

    #[test]
    fn identity_read_16k_mono() {
        let dir = tempdir();
        let path = dir.path().join("t.wav");
        let samples: Vec<f32> = (0..16_000).map(|i| ((i % 100) as f32 - 50.0) / 64.0).collect();
        write_wav(&path, &AudioBuffer::new(samples.clone(), 16_000), WavEncoding::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.samples, samples);
    }

    #[test]
    fn stereo_opposite_channels_downmix_to_zero() {
        // Hand-build a stereo PCM16 file with channels (+0.5, -0.5).
        let frames = 256u32;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36 + frames * 4).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16_000u32.to_le_bytes());
        bytes.extend_from_slice(&(16_000u32 * 4).to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&(frames * 4).to_le_bytes());
        for _ in 0..frames {
            bytes.extend_from_slice(&16384i16.to_le_bytes());
            bytes.extend_from_slice(&(-16384i16).to_le_bytes());
        }
        let dir = tempdir();
        let path = dir.path().join("stereo.wav");
        std::fs::write(&path, bytes).unwrap();
        let buf = read_wav(&path).unwrap();
        assert_eq!(buf.samples.len(), frames as usize);
        assert!(buf.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn read_errors() {
        let dir = tempdir();
        assert!(matches!(
            read_wav(dir.path().join("missing.wav")),
            Err(Error::Io { .. })
        ));
        let bad = dir.path().join("bad.wav");
        std::fs::write(&bad, b"not a wav").unwrap();
        assert!(matches!(read_wav(&bad), Err(Error::Wav(_))));
    }

    #[test]
    fn pcm16_roundtrip_within_one_lsb() {
        let dir = tempdir();
        let path = dir.path().join("rt.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f32> = (0..4000).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        let buf = AudioBuffer::new(samples.clone(), 16_000);
        write_wav(&path, &buf, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        let lsb = 1.0 / 32768.0;
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= lsb + 1e-9, "{a} vs {b}");
        }
        // Writing the decoded samples again must be byte-stable.
        let path2 = dir.path().join("rt2.wav");
        write_wav(&path2, &back, WavEncoding::Pcm16).unwrap();
        let again = read_wav(&path2).unwrap();
        assert_eq!(again.samples, back.samples);
    }

    #[test]
    fn resample_identity_is_bit_exact() {
        let buf = AudioBuffer::new(vec![0.1, -0.2, 0.3], 16_000);
        let out = resample(&buf, 16_000).unwrap();
        assert_eq!(out, buf);
    }

    #[test]
    fn resample_length_formula() {
        let buf = AudioBuffer::new(vec![0.0; 16_000], 16_000);
        assert_eq!(resample(&buf, 8_000).unwrap().samples.len(), 8_000);
        let buf8 = AudioBuffer::new(vec![0.0; 8_000], 8_000);
        assert_eq!(resample(&buf8, 16_000).unwrap().samples.len(), 16_000);
        // Non-integer ratio still follows round(len * target / source).
        let odd = AudioBuffer::new(vec![0.0; 1234], 16_000);
        assert_eq!(
            resample(&odd, 22_050).unwrap().samples.len(),
            (1234f64 * 22_050.0 / 16_000.0).round() as usize
        );
    }

    #[test]
    fn upsample_matches_naive_linear_interpolation() {
        // Independent oracle: naive endpoint-aligned interpolation.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src: Vec<f32> = (0..800).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        let buf = AudioBuffer::new(src.clone(), 8_000);
        let out = resample(&buf, 16_000).unwrap();
        assert_eq!(out.samples.len(), 1600);
        let scale = (src.len() - 1) as f64 / (out.samples.len() - 1) as f64;
        for (j, &have) in out.samples.iter().enumerate() {
            let u = j as f64 * scale;
            let i = (u.floor() as usize).min(src.len() - 2);
            let frac = (u - i as f64) as f32;
            let want = src[i] * (1.0 - frac) + src[i + 1] * frac;
            assert!((have - want).abs() < 1e-6);
        }
    }

    #[test]
    fn upsampled_sine_correlates_with_analytic_sine() {
        let sr = 16_000u32;
        let f = 100.0f64;
        let n = 16_000;
        let src: Vec<f32> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / sr as f64).sin() as f32)
            .collect();
        let up = resample(&AudioBuffer::new(src, sr), 32_000).unwrap();
        let analytic: Vec<f64> = (0..up.samples.len())
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 32_000.0).sin())
            .collect();
        let dot: f64 = up
            .samples
            .iter()
            .zip(&analytic)
            .map(|(&a, &b)| a as f64 * b)
            .sum();
        let na: f64 = up.samples.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = analytic.iter().map(|b| b * b).sum::<f64>().sqrt();
        // Endpoint-aligned mapping stretches time by (n-1)/(2n-1) vs 1/2, a
        // sub-sample phase drift over 1 s; correlation still clears 0.999.
        assert!(dot / (na * nb) >= 0.999, "corr = {}", dot / (na * nb));
    }

    #[test]
    fn slice_identity_and_arithmetic() {
        let buf = AudioBuffer::new((0..32_000).map(|i| i as f32 / 32_000.0).collect(), 16_000);
        let full = slice_segment(&buf, 0.0, buf.duration()).unwrap();
        assert_eq!(full, buf);
        let part = slice_segment(&buf, 1.0, 0.5).unwrap();
        assert_eq!(part.samples.len(), 8_000);
        assert_eq!(part.samples[0], buf.samples[16_000]);
    }

    #[test]
    fn slice_partition_reassembles() {
        let buf = AudioBuffer::new((0..1600).map(|i| (i as f32).sin()).collect(), 16_000);
        let t = 0.037;
        let a = slice_segment(&buf, 0.0, t).unwrap();
        let b = slice_segment(&buf, t, buf.duration() - t).unwrap();
        let mut joined = a.samples.clone();
        joined.extend_from_slice(&b.samples);
        assert_eq!(joined, buf.samples);
    }

    #[test]
    fn slice_out_of_range_rejected() {
        let buf = AudioBuffer::new(vec![0.0; 1600], 16_000);
        assert!(slice_segment(&buf, 0.05, 0.1).is_err());
        assert!(slice_segment(&buf, 0.2, 0.01).is_err());
    }

    #[test]
    fn synth_deterministic_and_counted() {
        let spec = SynthCorpusSpec::two_language(10, (0.4, 0.6), 99);
        let d1 = tempdir();
        let d2 = tempdir();
        let m1 = synth_corpus(&spec, d1.path()).unwrap();
        let m2 = synth_corpus(&spec, d2.path()).unwrap();
        assert_eq!(m1.records.len(), 20);
        let counts = m1.label_counts();
        assert_eq!(counts["en"], 10);
        assert_eq!(counts["zh"], 10);
        assert_eq!(m1.records, m2.records);
        let manifest_bytes_1 = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let manifest_bytes_2 = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest_bytes_1, manifest_bytes_2);
        for rec in &m1.records {
            let b1 = std::fs::read(m1.resolve_path(rec)).unwrap();
            let b2 = std::fs::read(m2.resolve_path(rec)).unwrap();
            assert_eq!(b1, b2, "audio bytes differ for {}", rec.audio_filepath);
        }
    }

    #[test]
    fn synth_classes_separated_by_resonance_gap() {
        let spec = SynthCorpusSpec::two_language(6, (0.5, 0.7), 11);
        let dir = tempdir();
        let m = synth_corpus(&spec, dir.path()).unwrap();
        let centroid_of = |label: &str| -> f64 {
            let vals: Vec<f64> = m
                .records
                .iter()
                .filter(|r| r.label == label)
                .map(|r| {
                    let buf = read_wav(m.resolve_path(r)).unwrap();
                    spectral_centroid(&buf.samples, buf.sample_rate as f64)
                })
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let (c_en, c_zh) = (centroid_of("en"), centroid_of("zh"));
        assert!(
            (c_zh - c_en).abs() >= spec.resonance_gap(),
            "centroids {c_en:.0} / {c_zh:.0} Hz closer than designed gap {}",
            spec.resonance_gap()
        );
    }

    #[test]
    fn synth_classes_pass_trivial_centroid_classifier() {
        let spec = SynthCorpusSpec::two_language(15, (0.4, 0.6), 5);
        let dir = tempdir();
        let m = synth_corpus(&spec, dir.path()).unwrap();
        let scored: Vec<(f64, bool)> = m
            .records
            .iter()
            .map(|r| {
                let buf = read_wav(m.resolve_path(r)).unwrap();
                (
                    spectral_centroid(&buf.samples, buf.sample_rate as f64),
                    r.label == "zh",
                )
            })
            .collect();
        let threshold = 2000.0; // midpoint between the designed bands
        let correct = scored
            .iter()
            .filter(|(c, is_zh)| (*c > threshold) == *is_zh)
            .count();
        let acc = correct as f64 / scored.len() as f64;
        assert!(acc >= 0.9, "centroid classifier accuracy {acc}");
    }
}
