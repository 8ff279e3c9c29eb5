//! Dataset curation: energy VAD segmentation, hard-example mining,
//! recording-disjoint stratified splits, and manifest filters.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{derive_seed, AudioBuffer};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, UtteranceRecord};
use crate::metrics::argmax;
use crate::nn::{ModelConfig, ParameterSet};
use crate::train::predict_manifest;

/// Energy-VAD settings. Frame RMS is thresholded at the given percentile
/// (with an absolute silence floor), gaps shorter than `min_gap` are
/// bridged, islands shorter than `min_speech` dropped, and segments longer
/// than `max_segment` split at their quietest interior frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VadConfig {
    pub frame: f64,
    pub hop: f64,
    pub threshold_percentile: f64,
    pub min_speech: f64,
    pub min_gap: f64,
    pub max_segment: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            frame: 0.025,
            hop: 0.010,
            threshold_percentile: 30.0,
            min_speech: 0.2,
            min_gap: 0.3,
            max_segment: 8.0,
        }
    }
}

/// Absolute RMS floor below which a frame can never count as speech.
const VAD_SILENCE_FLOOR: f64 = 1e-4;

fn frame_rms(buf: &AudioBuffer, cfg: &VadConfig) -> Vec<f64> {
    let frame_len = (cfg.frame * buf.sample_rate as f64).round() as usize;
    let hop_len = (cfg.hop * buf.sample_rate as f64).round() as usize;
    if buf.len() < frame_len || frame_len == 0 || hop_len == 0 {
        return Vec::new();
    }
    let n_frames = 1 + (buf.len() - frame_len) / hop_len;
    (0..n_frames)
        .map(|f| {
            let start = f * hop_len;
            let sum: f64 = buf.samples[start..start + frame_len]
                .iter()
                .map(|&s| (s as f64) * (s as f64))
                .sum();
            (sum / frame_len as f64).sqrt()
        })
        .collect()
}

fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (pct / 100.0 * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Split an over-long frame run at its lowest-energy interior frame,
/// recursively, until every piece fits `max_frames`.
fn split_long(frames: (usize, usize), rms: &[f64], max_frames: usize, out: &mut Vec<(usize, usize)>) {
    let (start, end) = frames;
    if end - start <= max_frames {
        out.push(frames);
        return;
    }
    // Interior minimum (exclude the first and last frame so both halves
    // stay non-empty).
    let mut cut = start + 1;
    for f in start + 1..end - 1 {
        if rms[f] < rms[cut] {
            cut = f;
        }
    }
    split_long((start, cut), rms, max_frames, out);
    split_long((cut, end), rms, max_frames, out);
}

/// Detect speech segments as (offset, duration) pairs in seconds. Segments
/// are sorted, non-overlapping, and never longer than `max_segment`.
pub fn energy_vad(buf: &AudioBuffer, cfg: &VadConfig) -> Vec<(f64, f64)> {
    let rms = frame_rms(buf, cfg);
    if rms.is_empty() {
        return Vec::new();
    }
    let mut sorted = rms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = percentile(&sorted, cfg.threshold_percentile).max(VAD_SILENCE_FLOOR);
    let active: Vec<bool> = rms.iter().map(|&r| r >= threshold).collect();
    if !active.iter().any(|&a| a) {
        return Vec::new();
    }

    // Raw runs of active frames: half-open frame ranges.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (f, &on) in active.iter().enumerate() {
        match (on, start) {
            (true, None) => start = Some(f),
            (false, Some(s)) => {
                runs.push((s, f));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, active.len()));
    }

    // Bridge short gaps.
    let min_gap_frames = (cfg.min_gap / cfg.hop).round() as usize;
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for run in runs {
        match merged.last_mut() {
            Some(last) if run.0 - last.1 < min_gap_frames => last.1 = run.1,
            _ => merged.push(run),
        }
    }

    // Drop runs shorter than the minimum speech length.
    let min_speech_frames = ((cfg.min_speech / cfg.hop).round() as usize).max(1);
    merged.retain(|&(s, e)| e - s >= min_speech_frames);

    // Enforce the segment-length ceiling.
    let max_frames = ((cfg.max_segment / cfg.hop).floor() as usize).max(1);
    let mut bounded = Vec::new();
    for run in merged {
        split_long(run, &rms, max_frames, &mut bounded);
    }

    bounded
        .into_iter()
        .map(|(s, e)| (s as f64 * cfg.hop, (e - s) as f64 * cfg.hop))
        .collect()
}

/// Segment one audio file into VAD-bounded utterance records with the
/// given label; `recording_id` groups them for split purposes.
pub fn vad_segment_file(
    buf: &AudioBuffer,
    cfg: &VadConfig,
    audio_filepath: &str,
    label: &str,
    recording_id: &str,
) -> Vec<UtteranceRecord> {
    energy_vad(buf, cfg)
        .into_iter()
        .map(|(offset, duration)| UtteranceRecord {
            audio_filepath: audio_filepath.to_string(),
            offset,
            duration,
            label: label.to_string(),
            recording_id: Some(recording_id.to_string()),
        })
        .collect()
}

/// Keep records whose duration lies in [min, max].
pub fn duration_filter(manifest: &Manifest, min_s: f64, max_s: f64) -> Manifest {
    manifest.with_records(
        manifest
            .records
            .iter()
            .filter(|r| r.duration >= min_s && r.duration <= max_s)
            .cloned()
            .collect(),
    )
}

/// Records on which the model's argmax prediction disagrees with the
/// label. Unreadable audio is skipped; the count of skips is returned.
pub fn mine_errors(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    manifest: &Manifest,
    labels: &[String],
    batch_size: usize,
) -> Result<(Manifest, usize)> {
    // Partition into readable and skipped records first so prediction runs
    // on a clean manifest.
    let mut readable = Vec::new();
    let mut skipped = 0usize;
    for rec in &manifest.records {
        match crate::audio::load_record_audio(manifest, rec, crate::frontend::SAMPLE_RATE) {
            Ok(_) => readable.push(rec.clone()),
            Err(e) => {
                log::warn!("mine_errors: skipping {}: {e}", rec.audio_filepath);
                skipped += 1;
            }
        }
    }
    let clean = manifest.with_records(readable);
    let probs = predict_manifest(cfg, params, &clean, batch_size)?;
    let mut errors = Vec::new();
    for (rec, p) in clean.records.iter().zip(&probs) {
        let truth = labels
            .iter()
            .position(|l| *l == rec.label)
            .ok_or_else(|| Error::Manifest(format!("unknown label {}", rec.label)))?;
        if argmax(p) != truth {
            errors.push(rec.clone());
        }
    }
    Ok((clean.with_records(errors), skipped))
}

/// Recording-disjoint, label-stratified split for a single seed.
pub fn make_split(manifest: &Manifest, val_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside (0,1)")));
    }
    // Group records by recording key; a recording is stratified under its
    // majority label.
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        groups.entry(rec.recording_key()).or_default().push(i);
    }
    let mut by_label: BTreeMap<String, Vec<(&str, Vec<usize>)>> = BTreeMap::new();
    for (key, idxs) in groups {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &i in &idxs {
            *counts.entry(manifest.records[i].label.as_str()).or_insert(0) += 1;
        }
        let majority = counts
            .iter()
            .max_by_key(|(_, &c)| c)
            .map(|(l, _)| l.to_string())
            .expect("non-empty group");
        by_label.entry(majority).or_default().push((key, idxs));
    }

    let mut val_idx = Vec::new();
    for (label, mut recs) in by_label {
        if recs.len() < 2 {
            return Err(Error::Manifest(format!(
                "label {label} has only {} recording(s); cannot stratify",
                recs.len()
            )));
        }
        let label_records: usize = recs.iter().map(|(_, v)| v.len()).sum();
        let target = val_fraction * label_records as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x51u64, fnv(&label)));
        recs.shuffle(&mut rng);
        let mut taken = 0usize;
        for (_, idxs) in recs {
            if taken as f64 >= target {
                break;
            }
            taken += idxs.len();
            val_idx.extend(idxs);
        }
    }
    val_idx.sort_unstable();
    let in_val: std::collections::BTreeSet<usize> = val_idx.iter().cloned().collect();
    let train_records: Vec<UtteranceRecord> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| !in_val.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    let val_records: Vec<UtteranceRecord> = val_idx
        .iter()
        .map(|&i| manifest.records[i].clone())
        .collect();
    if train_records.is_empty() || val_records.is_empty() {
        return Err(Error::Manifest("split left an empty side".into()));
    }
    Ok((
        manifest.with_records(train_records),
        manifest.with_records(val_records),
    ))
}

fn fnv(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// One candidate from the EER-matched split search.
#[derive(Clone, Debug)]
pub struct SplitCandidate {
    pub seed: u64,
    /// |EER(full manifest) - EER(val split)| under the reference model.
    pub gap: f64,
}

#[derive(Debug)]
pub struct SplitSearchReport {
    pub train: Manifest,
    pub val: Manifest,
    pub chosen: SplitCandidate,
    pub candidates: Vec<SplitCandidate>,
}

/// Search over candidate seeds for the split whose validation EER sits
/// closest to the full-set EER under a reference model.
pub fn make_split_eer_matched(
    manifest: &Manifest,
    val_fraction: f64,
    seeds: &[u64],
    model_cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    labels: &[String],
    batch_size: usize,
) -> Result<SplitSearchReport> {
    if seeds.is_empty() {
        return Err(Error::Config("no candidate seeds".into()));
    }
    if labels.len() != 2 {
        return Err(Error::Config("EER-matched split needs a two-class manifest".into()));
    }
    // Score the whole manifest once; candidate splits reuse these scores.
    let probs = predict_manifest(model_cfg, params, manifest, batch_size)?;
    let truth: Vec<usize> = manifest
        .records
        .iter()
        .map(|r| labels.iter().position(|l| *l == r.label).unwrap_or(0))
        .collect();
    let full_scores: Vec<f64> = probs.iter().map(|p| p[0]).collect();
    let full_pos: Vec<bool> = truth.iter().map(|&t| t == 0).collect();
    let full_eer = crate::metrics::eer_from_scores(&full_scores, &full_pos)?;

    let mut candidates = Vec::with_capacity(seeds.len());
    let mut best: Option<(SplitCandidate, Manifest, Manifest)> = None;
    // Index records by identity for score lookup.
    use std::collections::BTreeMap;
    let mut index: BTreeMap<(String, i64), usize> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        index.insert(rec_key(r), i);
    }
    for &seed in seeds {
        let (train, val) = make_split(manifest, val_fraction, seed)?;
        let mut scores = Vec::with_capacity(val.len());
        let mut pos = Vec::with_capacity(val.len());
        for r in &val.records {
            let i = index[&rec_key(r)];
            scores.push(full_scores[i]);
            pos.push(full_pos[i]);
        }
        let val_eer = crate::metrics::eer_from_scores(&scores, &pos)?;
        let cand = SplitCandidate {
            seed,
            gap: (val_eer - full_eer).abs(),
        };
        candidates.push(cand.clone());
        let better = match &best {
            None => true,
            Some((b, _, _)) => cand.gap < b.gap,
        };
        if better {
            best = Some((cand, train, val));
        }
    }
    let (chosen, train, val) = best.expect("at least one candidate");
    Ok(SplitSearchReport {
        train,
        val,
        chosen,
        candidates,
    })
}

fn rec_key(r: &UtteranceRecord) -> (String, i64) {
    (
        r.audio_filepath.clone(),
        (r.offset * 1_000_000.0).round() as i64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tone(freq: f64, secs: f64, sr: u32, amp: f32) -> Vec<f32> {
        let n = (secs * sr as f64).round() as usize;
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32 * amp)
            .collect()
    }

    #[test]
    fn silence_yields_no_segments() {
        let buf = AudioBuffer::new(vec![0.0; 16_000], 16_000);
        assert!(energy_vad(&buf, &VadConfig::default()).is_empty());
    }

    #[test]
    fn long_noise_tiles_into_capped_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<f32> = (0..160_000).map(|_| rng.random::<f32>() - 0.5).collect();
        let buf = AudioBuffer::new(samples, 16_000);
        let cfg = VadConfig::default();
        let segs = energy_vad(&buf, &cfg);
        assert!(!segs.is_empty());
        for &(off, dur) in &segs {
            assert!(dur <= 8.0 + 1e-9, "segment of {dur}s exceeds the cap");
            assert!(off >= 0.0 && off + dur <= buf.duration() + 1e-9);
        }
        // Sorted, non-overlapping, and covering (almost) the whole file.
        let mut end = 0.0;
        let mut covered = 0.0;
        for &(off, dur) in &segs {
            assert!(off >= end - 1e-9);
            end = off + dur;
            covered += dur;
        }
        assert!(covered > 0.9 * buf.duration(), "covered only {covered}s");
    }

    #[test]
    fn three_bursts_recovered_within_tolerance() {
        let sr = 16_000u32;
        let mut samples = Vec::new();
        // 1 s silence, then three 1 s bursts separated by 1 s silences.
        let truth = [(1.0, 1.0), (3.0, 1.0), (5.0, 1.0)];
        samples.extend(std::iter::repeat(0.0f32).take(sr as usize));
        for _ in 0..3 {
            samples.extend(tone(440.0, 1.0, sr, 0.4));
            samples.extend(std::iter::repeat(0.0f32).take(sr as usize));
        }
        let buf = AudioBuffer::new(samples, sr);
        let segs = energy_vad(&buf, &VadConfig::default());
        assert_eq!(segs.len(), 3, "segments: {segs:?}");
        for (&(off, dur), &(t_off, t_dur)) in segs.iter().zip(&truth) {
            assert!(
                (off - t_off).abs() <= 0.02 + 1e-9,
                "onset {off} vs {t_off}"
            );
            assert!(
                ((off + dur) - (t_off + t_dur)).abs() <= 0.02 + 1e-9,
                "end {} vs {}",
                off + dur,
                t_off + t_dur
            );
        }
    }

    fn rec(path: &str, label: &str, dur: f64, recording: &str) -> UtteranceRecord {
        UtteranceRecord {
            audio_filepath: path.into(),
            offset: 0.0,
            duration: dur,
            label: label.into(),
            recording_id: Some(recording.into()),
        }
    }

    #[test]
    fn duration_filter_bounds() {
        let m = Manifest::new(vec![
            rec("a", "en", 0.2, "r0"),
            rec("b", "en", 0.3, "r1"),
            rec("c", "zh", 16.0, "r2"),
            rec("d", "zh", 16.5, "r3"),
        ]);
        let f = duration_filter(&m, 0.3, 16.0);
        assert_eq!(f.len(), 2);
        assert!(f.records.iter().all(|r| r.duration >= 0.3 && r.duration <= 16.0));
        // All within bounds: identity.
        let same = duration_filter(&f, 0.3, 16.0);
        assert_eq!(same.records, f.records);
        // Brute-force count check on a random set.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let randoms: Vec<UtteranceRecord> = (0..200)
            .map(|i| rec(&format!("f{i}"), "en", rng.random::<f64>() * 20.0 + 0.05, "r"))
            .collect();
        let m2 = Manifest::new(randoms.clone());
        let kept = duration_filter(&m2, 0.3, 16.0).len();
        let brute = randoms
            .iter()
            .filter(|r| r.duration >= 0.3 && r.duration <= 16.0)
            .count();
        assert_eq!(kept, brute);
    }

    #[test]
    fn split_is_recording_disjoint_and_stratified() {
        let mut records = Vec::new();
        for i in 0..50 {
            records.push(rec(&format!("en{i}.wav"), "en", 1.0, &format!("ren{i}")));
            records.push(rec(&format!("zh{i}.wav"), "zh", 1.0, &format!("rzh{i}")));
        }
        let m = Manifest::new(records);
        let (train, val) = make_split(&m, 0.2, 7).unwrap();
        assert_eq!(train.len() + val.len(), 100);
        let train_keys: std::collections::BTreeSet<&str> =
            train.records.iter().map(|r| r.recording_key()).collect();
        for r in &val.records {
            assert!(!train_keys.contains(r.recording_key()), "leaked recording");
        }
        let counts = val.label_counts();
        assert!((counts["en"] as i64 - 10).abs() <= 1, "en count {}", counts["en"]);
        assert!((counts["zh"] as i64 - 10).abs() <= 1);
        assert!((val.len() as i64 - 20).abs() <= 2);
        // Deterministic under the seed.
        let (t2, v2) = make_split(&m, 0.2, 7).unwrap();
        assert_eq!(t2.records, train.records);
        assert_eq!(v2.records, val.records);
    }

    #[test]
    fn split_rejects_unstratifiable_label() {
        let m = Manifest::new(vec![
            rec("a", "en", 1.0, "r0"),
            rec("b", "zh", 1.0, "r1"),
            rec("c", "zh", 1.0, "r2"),
        ]);
        assert!(make_split(&m, 0.3, 0).is_err());
    }
}
