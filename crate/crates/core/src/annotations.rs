//! Annotation schema for accident videos: per-frame accident window stamps,
//! the four-part text description, and static scene attributes, with JSONL
//! corpus I/O and descriptive statistics.

use crate::{CapError, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Sunny,
    Rainy,
    Snowy,
    // "fogy" appears in upstream annotation tables; accept it as an alias.
    #[serde(alias = "fogy")]
    Foggy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Light {
    Daytime,
    Nighttime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Occasion {
    Highway,
    Urban,
    Rural,
    Mountain,
    Tunnel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadType {
    MainLane,
    CurveRoad,
    Intersection,
    TRoad,
    Ramp,
}

/// One video's annotation. Frame indices are 0-based; windows are
/// inclusive-start / exclusive-end, so `[t_ai, t_ae)` has length
/// `t_ae - t_ai`. A record with `t_ai == n_frames` (the window never opens)
/// is a non-accident record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub n_frames: u32,
    pub fps: f64,
    pub t_ai: u32,
    pub t_co: u32,
    pub t_ae: u32,
    pub fact: String,
    pub effect: String,
    pub reason: String,
    pub introspection: String,
    pub accident_category: i32,
    pub weather: Weather,
    pub light: Light,
    pub occasion: Occasion,
    pub road_type: RoadType,
}

impl AnnotationRecord {
    pub fn is_accident(&self) -> bool {
        self.t_ai < self.n_frames
    }
}

/// Lengths of the pre-window, accident sub-windows and post-window, each
/// divided by the video length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRatios {
    pub r_pre: f64,
    pub r_ai_co: f64,
    pub r_ai_ae: f64,
    pub r_co_ae: f64,
    pub r_post: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

fn violation(field: &str, rule: &str) -> Violation {
    Violation {
        field: field.to_string(),
        rule: rule.to_string(),
    }
}

/// Check every schema invariant. Violations are data, not errors: the result
/// is empty iff the record is valid.
pub fn validate(record: &AnnotationRecord) -> Vec<Violation> {
    let mut v = Vec::new();
    if record.video_id.is_empty() {
        v.push(violation("video_id", "video_id non-empty"));
    }
    if record.n_frames == 0 {
        v.push(violation("n_frames", "n_frames ≥ 1"));
    }
    if !(record.fps.is_finite() && record.fps > 0.0) {
        v.push(violation("fps", "fps > 0"));
    }
    if record.t_ai > record.t_co {
        v.push(violation("t_ai", "t_ai ≤ t_co"));
    }
    if record.t_co > record.t_ae {
        v.push(violation("t_co", "t_co ≤ t_ae"));
    }
    if record.t_ae > record.n_frames {
        v.push(violation("t_ae", "t_ae ≤ n_frames"));
    }
    if record.is_accident() {
        for (name, text) in [
            ("fact", &record.fact),
            ("effect", &record.effect),
            ("reason", &record.reason),
            ("introspection", &record.introspection),
        ] {
            if text.trim().is_empty() {
                v.push(violation(name, "text non-empty for accident videos"));
            }
        }
    }
    if !(1..=58).contains(&record.accident_category) {
        v.push(violation("accident_category", "accident_category in [1, 58]"));
    }
    v
}

/// Frame-count ratios of [0,t_ai], [t_ai,t_co], [t_ai,t_ae], [t_co,t_ae]
/// and [t_ae,end] relative to the video length.
pub fn frame_ratios(record: &AnnotationRecord) -> Result<FrameRatios> {
    let violations = validate(record);
    if !violations.is_empty() {
        return Err(CapError::InvalidRecord {
            video_id: record.video_id.clone(),
            violations,
        });
    }
    let n = f64::from(record.n_frames);
    Ok(FrameRatios {
        r_pre: f64::from(record.t_ai) / n,
        r_ai_co: f64::from(record.t_co - record.t_ai) / n,
        r_ai_ae: f64::from(record.t_ae - record.t_ai) / n,
        r_co_ae: f64::from(record.t_ae - record.t_co) / n,
        r_post: f64::from(record.n_frames - record.t_ae) / n,
    })
}

/// Histogram of the five window ratios over a corpus; `bins` equal-width
/// buckets over [0, 1]. Rows: pre, ai_co, ai_ae, co_ae, post.
pub fn ratio_histogram(records: &[AnnotationRecord], bins: usize) -> Result<[Vec<usize>; 5]> {
    let mut hist: [Vec<usize>; 5] = std::array::from_fn(|_| vec![0; bins]);
    for rec in records {
        let r = frame_ratios(rec)?;
        for (row, value) in [r.r_pre, r.r_ai_co, r.r_ai_ae, r.r_co_ae, r.r_post]
            .into_iter()
            .enumerate()
        {
            let b = ((value * bins as f64) as usize).min(bins - 1);
            hist[row][b] += 1;
        }
    }
    Ok(hist)
}

/// Load a JSONL corpus. Any malformed line rejects the whole file with its
/// line number; an empty file is an empty corpus.
pub fn load_corpus(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| CapError::Corpus {
                line: i + 1,
                msg: e.to_string(),
            })?;
        records.push(rec);
    }
    Ok(records)
}

/// Write a corpus as JSONL via a temp file + rename so readers never observe
/// a partially written corpus.
pub fn save_corpus(records: &[AnnotationRecord], path: &Path) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        for rec in records {
            serde_json::to_writer(&mut f, rec).map_err(|e| CapError::Corpus {
                line: 0,
                msg: e.to_string(),
            })?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
pub fn sample_record() -> AnnotationRecord {
    AnnotationRecord {
        video_id: "v0".into(),
        n_frames: 200,
        fps: 30.0,
        t_ai: 50,
        t_co: 100,
        t_ae: 150,
        fact: "a pedestrian is crossing the road".into(),
        effect: "ego-car hits a pedestrian".into(),
        reason: "a pedestrian stays on the motorway".into(),
        introspection: "the driver should slow down near crossings".into(),
        accident_category: 1,
        weather: Weather::Sunny,
        light: Light::Daytime,
        occasion: Occasion::Urban,
        road_type: RoadType::MainLane,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_record_passes() {
        assert!(validate(&sample_record()).is_empty());
    }

    #[test]
    fn ordering_violations_are_named() {
        let mut r = sample_record();
        r.t_co = 40; // below t_ai
        let v = validate(&r);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "t_ai ≤ t_co");

        let mut r = sample_record();
        r.t_ae = 201;
        r.t_co = 201;
        r.t_ai = 201;
        let v = validate(&r);
        assert!(v.iter().any(|x| x.rule == "t_ae ≤ n_frames"));
    }

    #[test]
    fn empty_text_only_allowed_for_non_accident() {
        let mut r = sample_record();
        r.fact = String::new();
        assert!(validate(&r).iter().any(|v| v.field == "fact"));
        // Non-accident: window never opens.
        r.t_ai = 200;
        r.t_co = 200;
        r.t_ae = 200;
        r.effect = String::new();
        r.reason = String::new();
        r.introspection = String::new();
        assert!(validate(&r).is_empty());
        assert!(!r.is_accident());
    }

    #[test]
    fn frame_ratios_hand_case() {
        let r = frame_ratios(&sample_record()).unwrap();
        assert_eq!(
            (r.r_pre, r.r_ai_co, r.r_ai_ae, r.r_co_ae, r.r_post),
            (0.25, 0.25, 0.50, 0.25, 0.25)
        );
    }

    #[test]
    fn frame_ratios_degenerate_window() {
        let mut rec = sample_record();
        rec.t_ai = 0;
        rec.t_co = 0;
        rec.t_ae = 200;
        let r = frame_ratios(&rec).unwrap();
        assert_eq!(
            (r.r_pre, r.r_ai_co, r.r_ai_ae, r.r_co_ae, r.r_post),
            (0.0, 0.0, 1.0, 1.0, 0.0)
        );
    }

    #[test]
    fn frame_ratios_refuses_invalid() {
        let mut rec = sample_record();
        rec.t_co = 10;
        assert!(frame_ratios(&rec).is_err());
    }

    #[test]
    fn roundtrip_and_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut records = Vec::new();
        for i in 0..3 {
            let mut r = sample_record();
            r.video_id = format!("v{i}");
            records.push(r);
        }
        save_corpus(&records, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(records, loaded);

        // Corrupt the middle line; the loader must name it and reject all.
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1] = "{\"video_id\": 42}";
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_corpus(&path) {
            Err(CapError::Corpus { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected corpus error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn fogy_alias_is_normalized() {
        let mut line = serde_json::to_value(sample_record()).unwrap();
        line["weather"] = serde_json::Value::String("fogy".into());
        let rec: AnnotationRecord = serde_json::from_value(line).unwrap();
        assert_eq!(rec.weather, Weather::Foggy);
        // And it serializes back as the normalized spelling.
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"foggy\""));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(sample_record()).unwrap();
        v["bogus"] = serde_json::Value::Null;
        assert!(serde_json::from_value::<AnnotationRecord>(v).is_err());
    }
}
