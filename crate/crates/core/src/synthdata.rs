//! Synthetic collision-scenario generator: a moving agent blob approaches a
//! fixed ego marker on a 64x64 canvas, with per-frame ground-truth attention
//! maps (a Gaussian on the agent) and templated text descriptions. Gives
//! every downstream stage a trainable, fully deterministic desk-scale corpus.

use crate::annotations::{
    save_corpus, validate, AnnotationRecord, Light, Occasion, RoadType, Weather,
};
use crate::tensor_io::{read_tensor, write_tensor, Dtype};
use crate::{CapError, Result};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const GRID: usize = 64;
/// Central corridor: the region whose entry defines the accident window
/// start t_ai.
const CORRIDOR_HALF_X: f64 = 12.0;
const CORRIDOR_MIN_Y: f64 = 40.0;
/// Ego marker box (half extents) near the bottom center of the frame.
const EGO_X: f64 = 32.0;
const EGO_Y: f64 = 54.0;
const EGO_HALF: f64 = 5.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_frames: u32,
    pub fps: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_frames: 30,
            fps: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentClass {
    Pedestrian,
    Car,
    Truck,
    Motorbike,
    Cyclist,
}

const CLASSES: [AgentClass; 5] = [
    AgentClass::Pedestrian,
    AgentClass::Car,
    AgentClass::Truck,
    AgentClass::Motorbike,
    AgentClass::Cyclist,
];

impl AgentClass {
    pub fn name(self) -> &'static str {
        match self {
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::Car => "car",
            AgentClass::Truck => "truck",
            AgentClass::Motorbike => "motorbike",
            AgentClass::Cyclist => "cyclist",
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            AgentClass::Pedestrian => [0.95, 0.35, 0.25],
            AgentClass::Car => [0.25, 0.55, 0.95],
            AgentClass::Truck => [0.90, 0.80, 0.25],
            AgentClass::Motorbike => [0.45, 0.90, 0.45],
            AgentClass::Cyclist => [0.85, 0.40, 0.85],
        }
    }

    fn radius(self) -> f64 {
        match self {
            AgentClass::Truck => 4.5,
            AgentClass::Car => 4.0,
            _ => 3.0,
        }
    }

    fn category(self) -> i32 {
        match self {
            AgentClass::Pedestrian => 1,
            AgentClass::Cyclist => 2,
            AgentClass::Motorbike => 6,
            AgentClass::Truck => 8,
            AgentClass::Car => 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Motion {
    /// Horizontal approach toward the ego marker (accident).
    Crossing,
    /// Vertical approach from the top (accident).
    Approaching,
    /// Horizontal traversal high in the frame (no accident).
    PassingBy,
    /// Jitter near the frame edge (no accident).
    Roadside,
}

impl Motion {
    fn verb_phrase(self, class: AgentClass) -> String {
        match self {
            Motion::Crossing => format!("a {} is crossing the road", class.name()),
            Motion::Approaching => format!("a {} is approaching the ego-car", class.name()),
            Motion::PassingBy => format!("a {} is passing by in the distance", class.name()),
            Motion::Roadside => format!("a {} stays on the roadside", class.name()),
        }
    }
}

/// Every phrase the generator can emit; the tokenizer vocabulary is frozen
/// over this set.
pub fn template_phrases() -> Vec<String> {
    let mut phrases = Vec::new();
    for class in CLASSES {
        for motion in [
            Motion::Crossing,
            Motion::Approaching,
            Motion::PassingBy,
            Motion::Roadside,
        ] {
            phrases.push(motion.verb_phrase(class));
        }
        phrases.push(format!("ego-car hits a {}", class.name()));
        phrases.push(format!("a {} does not notice the ego-car", class.name()));
        phrases.push(format!(
            "the driver should brake earlier and watch the {}",
            class.name()
        ));
    }
    phrases
}

#[derive(Debug, Clone)]
pub struct SyntheticScenario {
    pub record: AnnotationRecord,
    /// Per-frame (3, 64, 64) images in [0, 1].
    pub frames: Vec<Array3<f64>>,
    /// Per-frame 64x64 attention maps, each summing to 1.
    pub attention_gt: Vec<Array2<f64>>,
    pub agent_track: Vec<(f64, f64)>,
}

fn circle_box_overlaps(cx: f64, cy: f64, r: f64) -> bool {
    let dx = (cx - EGO_X).abs() - EGO_HALF;
    let dy = (cy - EGO_Y).abs() - EGO_HALF;
    let dx = dx.max(0.0);
    let dy = dy.max(0.0);
    (dx * dx + dy * dy).sqrt() < r
}

fn in_corridor(x: f64, y: f64) -> bool {
    (x - EGO_X).abs() <= CORRIDOR_HALF_X && y >= CORRIDOR_MIN_Y
}

fn render_frame(track_pos: (f64, f64), class: AgentClass, light: Light) -> Array3<f64> {
    let base = match light {
        Light::Daytime => 0.35,
        Light::Nighttime => 0.15,
    };
    let mut img = Array3::<f64>::zeros((3, GRID, GRID));
    for y in 0..GRID {
        // Mild vertical gradient so the canvas is not constant.
        let shade = base + 0.08 * (y as f64 / GRID as f64);
        for x in 0..GRID {
            for c in 0..3 {
                img[[c, y, x]] = shade;
            }
        }
    }
    // Ego marker: light box at the bottom center.
    for y in 0..GRID {
        for x in 0..GRID {
            let yf = y as f64;
            let xf = x as f64;
            if (xf - EGO_X).abs() <= EGO_HALF && (yf - EGO_Y).abs() <= EGO_HALF {
                for c in 0..3 {
                    img[[c, y, x]] = 0.85;
                }
            }
        }
    }
    // Agent blob.
    let (ax, ay) = track_pos;
    let r = class.radius();
    let color = class.color();
    for y in 0..GRID {
        for x in 0..GRID {
            let d = ((x as f64 - ax).powi(2) + (y as f64 - ay).powi(2)).sqrt();
            if d <= r {
                for c in 0..3 {
                    img[[c, y, x]] = color[c];
                }
            }
        }
    }
    img
}

fn attention_map(track_pos: (f64, f64)) -> Array2<f64> {
    let (ax, ay) = track_pos;
    let sigma = 3.0;
    let mut map = Array2::<f64>::zeros((GRID, GRID));
    let mut sum = 0.0;
    for y in 0..GRID {
        for x in 0..GRID {
            let d2 = (x as f64 - ax).powi(2) + (y as f64 - ay).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp();
            map[[y, x]] = v;
            sum += v;
        }
    }
    map.mapv_inplace(|v| v / sum);
    map
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn generate_one(seed: u64, index: usize, positive: bool, cfg: &SynthConfig) -> SyntheticScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ splitmix64(index as u64 + 1));
    let n = cfg.n_frames as usize;
    let class = CLASSES[rng.random_range(0..CLASSES.len())];
    let motion = if positive {
        if rng.random_bool(0.5) {
            Motion::Crossing
        } else {
            Motion::Approaching
        }
    } else if rng.random_bool(0.5) {
        Motion::PassingBy
    } else {
        Motion::Roadside
    };

    // Linear track; positives aim at the ego marker with their speed set so
    // the corridor entry lands on an exact frame (10 or 11), which keeps the
    // pre-onset span shorter than a training window while the collision
    // itself still falls at frame >= 12. Negatives avoid the corridor
    // entirely. Short videos shrink the entry frame proportionally so the
    // collision still fits inside the track.
    let enter_hi = 11u32.min((cfg.n_frames.saturating_sub(1) * 2 / 3).max(2));
    let t_enter = rng.random_range(enter_hi - 1..=enter_hi) as f64 - 0.01;
    let (start, vel): ((f64, f64), (f64, f64)) = match motion {
        Motion::Crossing => {
            let from_left = rng.random_bool(0.5);
            let x0 = if from_left { 2.0 } else { 61.0 };
            let y0 = rng.random_range(48.0..58.0);
            // Fraction of the run to the ego marker at which |x - EGO_X|
            // first reaches the corridor half-width.
            let entry_x = EGO_X - CORRIDOR_HALF_X * (EGO_X - x0).signum();
            let f_ai = (entry_x - x0) / (EGO_X - x0);
            let t_hit = t_enter / f_ai;
            let vx = (EGO_X - x0) / t_hit;
            let vy = (EGO_Y - y0) / t_hit;
            ((x0, y0), (vx, vy))
        }
        Motion::Approaching => {
            let x0 = rng.random_range(28.0..36.0);
            let y0 = 2.0;
            let f_ai = (CORRIDOR_MIN_Y - y0) / (EGO_Y - y0);
            let t_hit = t_enter / f_ai;
            let vx = (EGO_X - x0) / t_hit;
            let vy = (EGO_Y - y0) / t_hit;
            ((x0, y0), (vx, vy))
        }
        Motion::PassingBy => {
            let from_left = rng.random_bool(0.5);
            let x0 = if from_left { 2.0 } else { 61.0 };
            let y0 = rng.random_range(6.0..20.0);
            let vx = if from_left { 1.7 } else { -1.7 };
            ((x0, y0), (vx, 0.0))
        }
        Motion::Roadside => {
            let left = rng.random_bool(0.5);
            let x0 = if left {
                rng.random_range(3.0..8.0)
            } else {
                rng.random_range(56.0..61.0)
            };
            let y0 = rng.random_range(40.0..58.0);
            ((x0, y0), (rng.random_range(-0.15..0.15), 0.0))
        }
    };

    let mut track = Vec::with_capacity(n);
    for t in 0..n {
        let x = start.0 + vel.0 * t as f64;
        let y = start.1 + vel.1 * t as f64;
        track.push((x, y));
    }

    let (t_ai, t_co, t_ae) = if positive {
        let t_ai = track
            .iter()
            .position(|&(x, y)| in_corridor(x, y))
            .expect("positive track must enter corridor") as u32;
        let t_co = track
            .iter()
            .position(|&(x, y)| circle_box_overlaps(x, y, class.radius()))
            .expect("positive track must reach the ego marker") as u32;
        let t_ae = (t_co + 6).min(cfg.n_frames);
        (t_ai, t_co.max(t_ai), t_ae)
    } else {
        debug_assert!(track.iter().all(|&(x, y)| !in_corridor(x, y)));
        (cfg.n_frames, cfg.n_frames, cfg.n_frames)
    };

    let weather = [Weather::Sunny, Weather::Rainy, Weather::Snowy, Weather::Foggy]
        [rng.random_range(0..4)];
    let light = if rng.random_bool(0.85) {
        Light::Daytime
    } else {
        Light::Nighttime
    };
    let occasion = [
        Occasion::Highway,
        Occasion::Urban,
        Occasion::Rural,
        Occasion::Mountain,
        Occasion::Tunnel,
    ][rng.random_range(0..5)];
    let road_type = [
        RoadType::MainLane,
        RoadType::CurveRoad,
        RoadType::Intersection,
        RoadType::TRoad,
        RoadType::Ramp,
    ][rng.random_range(0..5)];

    let (fact, effect, reason, introspection) = if positive {
        (
            motion.verb_phrase(class),
            format!("ego-car hits a {}", class.name()),
            format!("a {} does not notice the ego-car", class.name()),
            format!(
                "the driver should brake earlier and watch the {}",
                class.name()
            ),
        )
    } else {
        (motion.verb_phrase(class), String::new(), String::new(), String::new())
    };

    let record = AnnotationRecord {
        video_id: format!("synth-{seed}-{index:04}"),
        n_frames: cfg.n_frames,
        fps: cfg.fps,
        t_ai,
        t_co,
        t_ae,
        fact,
        effect,
        reason,
        introspection,
        accident_category: class.category(),
        weather,
        light,
        occasion,
        road_type,
    };
    debug_assert!(validate(&record).is_empty(), "{:?}", validate(&record));

    let frames: Vec<Array3<f64>> = track
        .iter()
        .map(|&p| render_frame(p, class, light))
        .collect();
    let attention_gt: Vec<Array2<f64>> = track.iter().map(|&p| attention_map(p)).collect();

    SyntheticScenario {
        record,
        frames,
        attention_gt,
        agent_track: track,
    }
}

/// Generate `n_videos` scenarios; `class_mix` is the fraction of accident
/// (positive) scenarios. Deterministic per (seed, index).
pub fn generate(seed: u64, n_videos: usize, class_mix: f64, cfg: &SynthConfig) -> Vec<SyntheticScenario> {
    assert!(n_videos >= 1);
    let n_pos = (n_videos as f64 * class_mix).round() as usize;
    (0..n_videos)
        .map(|i| generate_one(seed, i, i < n_pos, cfg))
        .collect()
}

/// Nearest-neighbour upsample of frame `t` to the 224x224x3 encoder input.
pub fn render_patchable(scenario: &SyntheticScenario, t: usize) -> Result<Array3<f64>> {
    if t >= scenario.frames.len() {
        return Err(CapError::BadInput(format!(
            "frame {t} out of range (n_frames = {})",
            scenario.frames.len()
        )));
    }
    Ok(upsample_nearest_224(&scenario.frames[t]))
}

pub fn upsample_nearest_224(frame: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = frame.dim();
    let mut out = Array3::<f64>::zeros((c, 224, 224));
    for ch in 0..c {
        for y in 0..224 {
            let sy = y * h / 224;
            for x in 0..224 {
                let sx = x * w / 224;
                out[[ch, y, x]] = frame[[ch, sy, sx]];
            }
        }
    }
    out
}

/// Write the corpus as an annotation JSONL plus per-video raw tensors.
pub fn save_corpus_dir(scenarios: &[SyntheticScenario], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let records: Vec<AnnotationRecord> = scenarios.iter().map(|s| s.record.clone()).collect();
    save_corpus(&records, &dir.join("annotations.jsonl"))?;
    for s in scenarios {
        let n = s.frames.len();
        let mut frames = ArrayD::<f64>::zeros(IxDyn(&[n, 3, GRID, GRID]));
        let mut attn = ArrayD::<f64>::zeros(IxDyn(&[n, GRID, GRID]));
        for (t, f) in s.frames.iter().enumerate() {
            for c in 0..3 {
                for y in 0..GRID {
                    for x in 0..GRID {
                        frames[[t, c, y, x]] = f[[c, y, x]];
                    }
                }
            }
        }
        for (t, a) in s.attention_gt.iter().enumerate() {
            for y in 0..GRID {
                for x in 0..GRID {
                    attn[[t, y, x]] = a[[y, x]];
                }
            }
        }
        write_tensor(
            &dir.join(format!("{}.frames.tensor", s.record.video_id)),
            &frames,
            Dtype::F64,
        )?;
        write_tensor(
            &dir.join(format!("{}.attn.tensor", s.record.video_id)),
            &attn,
            Dtype::F64,
        )?;
    }
    Ok(())
}

pub fn load_corpus_dir(dir: &Path) -> Result<Vec<SyntheticScenario>> {
    let records = crate::annotations::load_corpus(&dir.join("annotations.jsonl"))?;
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let frames_t = read_tensor(&dir.join(format!("{}.frames.tensor", record.video_id)))?;
        let attn_t = read_tensor(&dir.join(format!("{}.attn.tensor", record.video_id)))?;
        let n = frames_t.shape()[0];
        let mut frames = Vec::with_capacity(n);
        let mut attention_gt = Vec::with_capacity(n);
        let mut agent_track = Vec::with_capacity(n);
        for t in 0..n {
            let mut f = Array3::<f64>::zeros((3, GRID, GRID));
            let mut a = Array2::<f64>::zeros((GRID, GRID));
            for y in 0..GRID {
                for x in 0..GRID {
                    for c in 0..3 {
                        f[[c, y, x]] = frames_t[[t, c, y, x]];
                    }
                    a[[y, x]] = attn_t[[t, y, x]];
                }
            }
            // Track is derivable from the attention peak; good enough for
            // inspection after a reload.
            let (mut by, mut bx, mut bv) = (0usize, 0usize, f64::NEG_INFINITY);
            for y in 0..GRID {
                for x in 0..GRID {
                    if a[[y, x]] > bv {
                        bv = a[[y, x]];
                        by = y;
                        bx = x;
                    }
                }
            }
            agent_track.push((bx as f64, by as f64));
            frames.push(f);
            attention_gt.push(a);
        }
        out.push(SyntheticScenario {
            record,
            frames,
            attention_gt,
            agent_track,
        });
    }
    Ok(out)
}
