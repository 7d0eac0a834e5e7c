//! Positive/negative clip sampling from annotated videos.
//!
//! MINI draws freely overlapping windows: one positive ending at the
//! collision frame plus negatives drawn inside the pre-accident span.
//! FULL constrains overlap to at most half a window and requires enough
//! pre-onset frames for the requested anticipation horizon.

use crate::annotations::{validate, AnnotationRecord};
use crate::{CapError, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSample {
    pub video_id: String,
    pub start: u32,
    pub length: u32,
    pub label: ClipLabel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_ai_local: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_co_local: Option<u32>,
    pub fps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mini,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub window_len: u32,
    pub strategy: Strategy,
    pub horizon_s: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window_len: 150,
            strategy: Strategy::Mini,
            horizon_s: 5.0,
            seed: 0,
        }
    }
}

/// Sampling result for one video; skipped videos carry a notice instead of
/// clips.
#[derive(Debug, Clone, Default)]
pub struct SampleBatch {
    pub clips: Vec<ClipSample>,
    pub notices: Vec<String>,
}

fn video_rng(config: &SamplerConfig, video_id: &str) -> ChaCha8Rng {
    // FNV-1a over the video id keeps per-video streams independent of
    // iteration order, so parallel sampling across videos is stable.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in video_id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(config.seed ^ h)
}

fn check_precondition(record: &AnnotationRecord, config: &SamplerConfig) -> Result<Option<String>> {
    let violations = validate(record);
    if !violations.is_empty() {
        return Err(CapError::InvalidRecord {
            video_id: record.video_id.clone(),
            violations,
        });
    }
    if config.window_len == 0 {
        return Err(CapError::BadInput("window_len must be > 0".into()));
    }
    if record.n_frames < config.window_len {
        return Ok(Some(format!(
            "skipped {}: {} frames < window {}",
            record.video_id, record.n_frames, config.window_len
        )));
    }
    Ok(None)
}

fn make_clip(record: &AnnotationRecord, start: u32, len: u32, positive: bool) -> ClipSample {
    ClipSample {
        video_id: record.video_id.clone(),
        start,
        length: len,
        label: if positive {
            ClipLabel::Positive
        } else {
            ClipLabel::Negative
        },
        t_ai_local: positive.then(|| record.t_ai - start),
        t_co_local: positive.then(|| record.t_co.min(start + len).saturating_sub(start)),
        fps: record.fps,
    }
}

/// MINI strategy: the positive window ends at `t_co` and must contain
/// `t_ai`; negatives are windows drawn uniformly inside `[0, t_ai]`.
pub fn sample_mini(record: &AnnotationRecord, config: &SamplerConfig) -> Result<SampleBatch> {
    let mut out = SampleBatch::default();
    if let Some(notice) = check_precondition(record, config)? {
        out.notices.push(notice);
        return Ok(out);
    }
    let len = config.window_len;
    let mut rng = video_rng(config, &record.video_id);
    if record.is_accident() && record.t_co >= len {
        let start = record.t_co - len;
        if start <= record.t_ai {
            out.clips.push(make_clip(record, start, len, true));
        }
    }
    // Negative windows fit inside [0, t_ai] only when the pre-accident span
    // is at least one window long (t_ai = n_frames for non-accident videos).
    if record.t_ai >= len {
        let end = rng.random_range(len..=record.t_ai);
        out.clips.push(make_clip(record, end - len, len, false));
    }
    Ok(out)
}

/// FULL strategy: the positive window still ends at `t_co`, but requires
/// ⌈horizon·fps⌉ pre-onset frames so an `horizon`-second anticipation is
/// measurable, and negatives overlap the positive by at most half a window.
pub fn sample_full(record: &AnnotationRecord, config: &SamplerConfig) -> Result<SampleBatch> {
    let mut out = SampleBatch::default();
    if let Some(notice) = check_precondition(record, config)? {
        out.notices.push(notice);
        return Ok(out);
    }
    let len = config.window_len;
    let margin = (config.horizon_s * record.fps).ceil() as u32;
    let mut rng = video_rng(config, &record.video_id);
    let mut positive_start = None;
    if record.is_accident() && record.t_co >= len && record.t_ai >= margin {
        let start = record.t_co - len;
        if start <= record.t_ai {
            positive_start = Some(start);
            out.clips.push(make_clip(record, start, len, true));
        }
    }
    // Negative end must stay inside [0, t_ai] and keep overlap with the
    // positive window at or below len/2.
    let mut max_end = record.t_ai.min(record.n_frames);
    if let Some(ps) = positive_start {
        max_end = max_end.min(ps + len / 2);
    }
    if max_end >= len {
        let end = rng.random_range(len..=max_end);
        out.clips.push(make_clip(record, end - len, len, false));
    }
    Ok(out)
}

pub fn sample(record: &AnnotationRecord, config: &SamplerConfig) -> Result<SampleBatch> {
    match config.strategy {
        Strategy::Mini => sample_mini(record, config),
        Strategy::Full => sample_full(record, config),
    }
}

pub fn sample_corpus(
    records: &[AnnotationRecord],
    config: &SamplerConfig,
) -> Result<SampleBatch> {
    let mut out = SampleBatch::default();
    for rec in records {
        let batch = sample(rec, config)?;
        out.clips.extend(batch.clips);
        out.notices.extend(batch.notices);
    }
    Ok(out)
}

pub fn save_manifest(clips: &[ClipSample], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for clip in clips {
        serde_json::to_writer(&mut f, clip).map_err(|e| CapError::Corpus {
            line: 0,
            msg: e.to_string(),
        })?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ClipSample>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut clips = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        clips.push(serde_json::from_str(&line).map_err(|e| CapError::Corpus {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(clips)
}
