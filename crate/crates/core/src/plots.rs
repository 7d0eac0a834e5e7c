//! Static PNG artifacts: precision-recall curves, per-clip score-vs-time
//! traces, and grayscale attention-map dumps.

use crate::metrics::{video_score, VideoPrediction, VideoScoreStat};
use crate::Result;
use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;
use std::path::Path;

const W: u32 = 480;
const H: u32 = 360;
const MARGIN: u32 = 30;

fn blank() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    // Axis frame.
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, Rgb([0, 0, 0]));
        img.put_pixel(x, MARGIN, Rgb([200, 200, 200]));
    }
    for y in MARGIN..H - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
        img.put_pixel(W - MARGIN, y, Rgb([200, 200, 200]));
    }
    img
}

fn to_px(x: f64, y: f64) -> (u32, u32) {
    let px = MARGIN as f64 + x.clamp(0.0, 1.0) * (W - 2 * MARGIN) as f64;
    let py = (H - MARGIN) as f64 - y.clamp(0.0, 1.0) * (H - 2 * MARGIN) as f64;
    (px as u32, py as u32)
}

fn draw_line(img: &mut RgbImage, a: (u32, u32), b: (u32, u32), color: Rgb<u8>) {
    let (x0, y0) = (a.0 as i64, a.1 as i64);
    let (x1, y1) = (b.0 as i64, b.1 as i64);
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Precision-recall curve over video-level scores.
pub fn plot_pr_curve(
    preds: &[VideoPrediction],
    stat: VideoScoreStat,
    path: &Path,
) -> Result<()> {
    let mut pairs: Vec<(f64, bool)> = preds
        .iter()
        .map(|p| (video_score(&p.p_hat, stat), p.is_positive()))
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let total_pos = pairs.iter().filter(|(_, l)| *l).count().max(1);
    let mut img = blank();
    let mut prev = to_px(0.0, 1.0);
    let mut hits = 0usize;
    for (k, (_, label)) in pairs.iter().enumerate() {
        if *label {
            hits += 1;
        }
        let recall = hits as f64 / total_pos as f64;
        let precision = hits as f64 / (k + 1) as f64;
        let cur = to_px(recall, precision);
        draw_line(&mut img, prev, cur, Rgb([30, 60, 200]));
        prev = cur;
    }
    img.save(path)
        .map_err(|e| crate::CapError::BadInput(format!("png write failed: {e}")))?;
    Ok(())
}

/// Per-frame score traces for up to `max_clips` clips; positives red,
/// negatives blue.
pub fn plot_score_vs_time(
    preds: &[VideoPrediction],
    max_clips: usize,
    path: &Path,
) -> Result<()> {
    let mut img = blank();
    for p in preds.iter().take(max_clips) {
        let color = if p.is_positive() {
            Rgb([200, 40, 40])
        } else {
            Rgb([40, 80, 200])
        };
        let n = p.p_hat.len().max(2);
        let mut prev = to_px(0.0, p.p_hat[0]);
        for (t, &v) in p.p_hat.iter().enumerate() {
            let cur = to_px(t as f64 / (n - 1) as f64, v);
            draw_line(&mut img, prev, cur, color);
            prev = cur;
        }
    }
    img.save(path)
        .map_err(|e| crate::CapError::BadInput(format!("png write failed: {e}")))?;
    Ok(())
}

/// Max-scaled 8-bit grayscale dump of an attention map.
pub fn save_map_png(map: &Array2<f64>, path: &Path) -> Result<()> {
    let peak = map.iter().cloned().fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let mut img = GrayImage::new(map.ncols() as u32, map.nrows() as u32);
    for (y, row) in map.rows().into_iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            img.put_pixel(x as u32, y as u32, Luma([(v * scale) as u8]));
        }
    }
    img.save(path)
        .map_err(|e| crate::CapError::BadInput(format!("png write failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip_sampler::{ClipLabel, ClipSample};

    fn pred(label: ClipLabel, p: Vec<f64>) -> VideoPrediction {
        VideoPrediction {
            clip: ClipSample {
                video_id: "v".into(),
                start: 0,
                length: p.len() as u32,
                label,
                t_ai_local: None,
                t_co_local: None,
                fps: 10.0,
            },
            p_hat: p,
        }
    }

    #[test]
    fn plots_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let preds = vec![
            pred(ClipLabel::Positive, vec![0.1, 0.4, 0.9]),
            pred(ClipLabel::Negative, vec![0.2, 0.1, 0.15]),
        ];
        let pr = dir.path().join("pr.png");
        plot_pr_curve(&preds, VideoScoreStat::Max, &pr).unwrap();
        assert!(pr.metadata().unwrap().len() > 0);
        let ts = dir.path().join("time.png");
        plot_score_vs_time(&preds, 10, &ts).unwrap();
        assert!(ts.exists());

        let map = Array2::from_shape_fn((64, 64), |(y, x)| (y + x) as f64);
        let mp = dir.path().join("map.png");
        save_map_png(&map, &mp).unwrap();
        let back = image::open(&mp).unwrap().to_luma8();
        assert_eq!(back.dimensions(), (64, 64));
        assert_eq!(back.get_pixel(63, 63).0[0], 255);
    }
}
