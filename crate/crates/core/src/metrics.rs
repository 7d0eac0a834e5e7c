//! Evaluation metrics: average precision and ROC area over video-level
//! scores, time-to-accident statistics, and the saliency-map comparison
//! suite (divergence, correlation, histogram intersection, shuffled ROC).

use crate::clip_sampler::{ClipLabel, ClipSample};
/// Floor for the divergence ratio. Much smaller than the training-loss
/// epsilon: on a 64x64 grid the per-pixel mass is ~2.4e-4, so a 1e-4 floor
/// would bias the metric visibly even for a perfect prediction.
const KL_EPS: f64 = 1e-12;
use crate::{CapError, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub clip: ClipSample,
    pub p_hat: Vec<f64>,
}

impl VideoPrediction {
    pub fn is_positive(&self) -> bool {
        self.clip.label == ClipLabel::Positive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VideoScoreStat {
    #[default]
    Max,
    Mean,
}

pub fn video_score(p_hat: &[f64], stat: VideoScoreStat) -> f64 {
    match stat {
        VideoScoreStat::Max => p_hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        VideoScoreStat::Mean => p_hat.iter().sum::<f64>() / p_hat.len() as f64,
    }
}

/// First frame whose score exceeds the threshold defines the alarm time;
/// tau = max(0, t_ai - t_a) / fps, and a clip that never alarms scores 0.
pub fn tta(p_hat: &[f64], t_ai_local: usize, fps: f64, threshold: f64) -> f64 {
    match p_hat.iter().position(|&p| p > threshold) {
        Some(t_a) => (t_ai_local as f64 - t_a as f64).max(0.0) / fps,
        None => 0.0,
    }
}

pub const MTTA_GRID: usize = 101;

/// Mean of tta over thresholds 0.00, 0.01, ..., 1.00.
pub fn mtta(p_hat: &[f64], t_ai_local: usize, fps: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..MTTA_GRID {
        acc += tta(p_hat, t_ai_local, fps, i as f64 / 100.0);
    }
    acc / MTTA_GRID as f64
}

/// Step-interpolated average precision: mean of precision-at-k over the
/// positives, scores descending (ties broken by original index).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    if !labels.iter().any(|&l| l) {
        return Err(CapError::BadInput("average precision needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(acc / hits as f64)
}

/// Mann-Whitney ROC area: probability a positive outscores a negative,
/// ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(CapError::BadInput("auc needs both classes".into()));
    }
    let mut acc = 0.0;
    for &p in &pos {
        for &n in &neg {
            acc += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(acc / (pos.len() * neg.len()) as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Saliency {
    pub kldiv: f64,
    pub cc: f64,
    pub sim: f64,
    pub s_auc: f64,
}

/// Compare a predicted map against ground truth. Both maps must be
/// distributions; `fixations` are ground-truth gaze points and
/// `shuffled_fixations` come from other frames' maps.
pub fn saliency_metrics(
    gt: &Array2<f64>,
    pred: &Array2<f64>,
    fixations: &[(usize, usize)],
    shuffled_fixations: &[(usize, usize)],
) -> Result<Saliency> {
    if gt.dim() != pred.dim() {
        return Err(CapError::BadInput("saliency map shape mismatch".into()));
    }
    if fixations.is_empty() || shuffled_fixations.is_empty() {
        return Err(CapError::BadInput("empty fixation set".into()));
    }
    let mut kldiv = 0.0;
    let mut sim = 0.0;
    for (&d, &dh) in gt.iter().zip(pred.iter()) {
        kldiv += d * (KL_EPS + d / (KL_EPS + dh)).ln();
        sim += d.min(dh);
    }
    let n = gt.len() as f64;
    let (mg, mp) = (gt.sum() / n, pred.sum() / n);
    let mut cov = 0.0;
    let mut vg = 0.0;
    let mut vp = 0.0;
    for (&d, &dh) in gt.iter().zip(pred.iter()) {
        cov += (d - mg) * (dh - mp);
        vg += (d - mg) * (d - mg);
        vp += (dh - mp) * (dh - mp);
    }
    let cc = if vg == 0.0 || vp == 0.0 {
        0.0
    } else {
        cov / (vg.sqrt() * vp.sqrt())
    };
    let pos: Vec<f64> = fixations.iter().map(|&(y, x)| pred[[y, x]]).collect();
    let neg: Vec<f64> = shuffled_fixations.iter().map(|&(y, x)| pred[[y, x]]).collect();
    let scores: Vec<f64> = pos.iter().chain(neg.iter()).cloned().collect();
    let labels: Vec<bool> = pos
        .iter()
        .map(|_| true)
        .chain(neg.iter().map(|_| false))
        .collect();
    let s_auc = auc(&scores, &labels)?;
    Ok(Saliency {
        kldiv,
        cc,
        sim,
        s_auc,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_videos: usize,
    pub n_positive: usize,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    /// Mean TTA at threshold 0.5 over positive clips, seconds.
    pub tta_05: Option<f64>,
    pub mtta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saliency: Option<Saliency>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_key: Option<(String, String)>,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
        }
        if let Some((k, v)) = &self.group_key {
            writeln!(f, "group {k}={v}")?;
        }
        writeln!(f, "videos     {:>8}", self.n_videos)?;
        writeln!(f, "positives  {:>8}", self.n_positive)?;
        writeln!(f, "AP         {:>8}", opt(self.ap))?;
        writeln!(f, "AUC        {:>8}", opt(self.auc))?;
        writeln!(f, "TTA@0.5    {:>8} s", opt(self.tta_05))?;
        writeln!(f, "mTTA       {:>8} s", opt(self.mtta))?;
        if let Some(s) = &self.saliency {
            writeln!(
                f,
                "saliency   kldiv {:.4}  cc {:.4}  sim {:.4}  s-AUC {:.4}",
                s.kldiv, s.cc, s.sim, s.s_auc
            )?;
        }
        Ok(())
    }
}

/// Aggregate video-level classification and timing metrics; saliency is
/// attached by the caller when attention maps were evaluated.
pub fn compute_report(
    preds: &[VideoPrediction],
    fps: f64,
    stat: VideoScoreStat,
) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(CapError::BadInput("no predictions".into()));
    }
    let scores: Vec<f64> = preds.iter().map(|p| video_score(&p.p_hat, stat)).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.is_positive()).collect();
    let positives: Vec<&VideoPrediction> = preds.iter().filter(|p| p.is_positive()).collect();
    let mut tta_sum = 0.0;
    let mut mtta_sum = 0.0;
    for p in &positives {
        let t_ai = p.clip.t_ai_local.ok_or_else(|| {
            CapError::BadInput(format!("positive clip {} lacks t_ai", p.clip.video_id))
        })? as usize;
        tta_sum += tta(&p.p_hat, t_ai, fps, 0.5);
        mtta_sum += mtta(&p.p_hat, t_ai, fps);
    }
    let n_pos = positives.len();
    Ok(MetricReport {
        n_videos: preds.len(),
        n_positive: n_pos,
        ap: average_precision(&scores, &labels).ok(),
        auc: auc(&scores, &labels).ok(),
        tta_05: (n_pos > 0).then(|| tta_sum / n_pos as f64),
        mtta: (n_pos > 0).then(|| mtta_sum / n_pos as f64),
        saliency: None,
        group_key: None,
    })
}

/// Slice predictions by a scene attribute of the source videos and compute
/// one report per present value.
pub fn group_by_attribute(
    preds: &[VideoPrediction],
    records: &[crate::annotations::AnnotationRecord],
    attribute: &str,
    fps: f64,
    stat: VideoScoreStat,
) -> Result<Vec<MetricReport>> {
    let by_id: BTreeMap<&str, &crate::annotations::AnnotationRecord> =
        records.iter().map(|r| (r.video_id.as_str(), r)).collect();
    let mut groups: BTreeMap<String, Vec<VideoPrediction>> = BTreeMap::new();
    for p in preds {
        let rec = by_id.get(p.clip.video_id.as_str()).ok_or_else(|| {
            CapError::BadInput(format!("no record for video {}", p.clip.video_id))
        })?;
        let value = attribute_value(rec, attribute)?;
        groups.entry(value).or_default().push(p.clone());
    }
    let mut out = Vec::new();
    for (value, members) in groups {
        let mut report = compute_report(&members, fps, stat)?;
        report.group_key = Some((attribute.to_string(), value));
        out.push(report);
    }
    Ok(out)
}

fn attribute_value(rec: &crate::annotations::AnnotationRecord, attribute: &str) -> Result<String> {
    fn tag<T: Serialize>(v: &T) -> String {
        serde_json::to_value(v)
            .expect("attribute serializes")
            .as_str()
            .expect("attribute is a string tag")
            .to_string()
    }
    match attribute {
        "weather" => Ok(tag(&rec.weather)),
        "light" => Ok(tag(&rec.light)),
        "occasion" => Ok(tag(&rec.occasion)),
        "road_type" => Ok(tag(&rec.road_type)),
        other => Err(CapError::BadInput(format!("unknown attribute {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip_sampler::{ClipLabel, ClipSample};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(video: &str, label: ClipLabel, t_ai: Option<u32>) -> ClipSample {
        ClipSample {
            video_id: video.to_string(),
            start: 0,
            length: 4,
            label,
            t_ai_local: t_ai,
            t_co_local: None,
            fps: 2.0,
        }
    }

    #[test]
    fn tta_hand_case() {
        let p = [0.1, 0.2, 0.6, 0.7];
        assert!((tta(&p, 3, 2.0, 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(tta(&[0.1, 0.2], 1, 2.0, 0.5), 0.0);
        // Alarm exactly at t_ai.
        assert_eq!(tta(&[0.1, 0.2, 0.9], 2, 2.0, 0.5), 0.0);
    }

    #[test]
    fn tta_non_increasing_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut prev = f64::INFINITY;
            for i in 0..=10 {
                let v = tta(&p, 8, 10.0, i as f64 / 10.0);
                assert!(v <= prev + 1e-12);
                prev = v;
            }
        }
    }

    #[test]
    fn mtta_hand_case_and_grid_oracle() {
        let p = [1.0; 8];
        let v = mtta(&p, 4, 1.0);
        assert!((v - 4.0 * 100.0 / 101.0).abs() < 1e-9);
        assert_eq!(mtta(&[0.0; 8], 4, 1.0), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        let direct: f64 =
            (0..101).map(|i| tta(&p, 6, 5.0, i as f64 / 100.0)).sum::<f64>() / 101.0;
        assert!((mtta(&p, 6, 5.0) - direct).abs() < 1e-12);
        // Averaging bound: mTTA is at most the threshold-0 TTA.
        assert!(mtta(&p, 6, 5.0) <= tta(&p, 6, 5.0, 0.0) + 1e-12);
    }

    #[test]
    fn ap_hand_cases() {
        let v = average_precision(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap();
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let v = average_precision(&[0.9, 0.8, 0.3], &[true, true, false]).unwrap();
        assert_eq!(v, 1.0);
        // Single positive ranked last among 5.
        let v = average_precision(&[0.9, 0.8, 0.7, 0.6, 0.1], &[false, false, false, false, true])
            .unwrap();
        assert!((v - 0.2).abs() < 1e-12);
        assert!(average_precision(&[0.5], &[false]).is_err());
    }

    #[test]
    fn auc_hand_cases() {
        let v = auc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4, 0.4, 0.4], &[true, false, true]).unwrap(), 0.5);
        assert!(auc(&[0.5, 0.6], &[true, true]).is_err());
    }

    #[test]
    fn rank_metrics_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(4..15);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = rng.random_range(0.5..3.0);
            let transformed: Vec<f64> = scores.iter().map(|&s| (a * s).exp() + s.powi(3)).collect();
            let ap0 = average_precision(&scores, &labels).unwrap();
            let ap1 = average_precision(&transformed, &labels).unwrap();
            assert!((ap0 - ap1).abs() < 1e-12);
            let a0 = auc(&scores, &labels).unwrap();
            let a1 = auc(&transformed, &labels).unwrap();
            assert!((a0 - a1).abs() < 1e-12);
        }
    }

    #[test]
    fn saliency_identity_and_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = Array2::from_shape_fn((64, 64), |_| rng.random_range(0.0..1.0));
        let s = d.sum();
        d.mapv_inplace(|x| x / s);
        let m = saliency_metrics(&d, &d, &[(10, 10)], &[(50, 50)]).unwrap();
        assert!((m.cc - 1.0).abs() < 1e-12);
        assert!((m.sim - 1.0).abs() < 1e-9);
        assert!(m.kldiv.abs() < 1e-2);

        let uniform = Array2::from_elem((64, 64), 1.0 / 4096.0);
        let mut delta = Array2::zeros((64, 64));
        delta[[32, 32]] = 1.0;
        let m = saliency_metrics(&delta, &uniform, &[(32, 32)], &[(0, 0)]).unwrap();
        assert!((m.sim - 1.0 / 4096.0).abs() < 1e-12);

        assert!(saliency_metrics(&uniform, &uniform, &[], &[(0, 0)]).is_err());
        let small = Array2::from_elem((8, 8), 1.0 / 64.0);
        assert!(saliency_metrics(&small, &uniform, &[(0, 0)], &[(1, 1)]).is_err());
    }

    #[test]
    fn report_and_grouping() {
        let preds = vec![
            VideoPrediction {
                clip: clip("a", ClipLabel::Positive, Some(2)),
                p_hat: vec![0.1, 0.2, 0.9, 0.9],
            },
            VideoPrediction {
                clip: clip("b", ClipLabel::Negative, None),
                p_hat: vec![0.1, 0.1, 0.2, 0.1],
            },
        ];
        let r = compute_report(&preds, 2.0, VideoScoreStat::Max).unwrap();
        assert_eq!(r.n_videos, 2);
        assert_eq!(r.n_positive, 1);
        assert_eq!(r.ap, Some(1.0));
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.tta_05, Some(0.0));

        let mut rec_a = crate::annotations::sample_record();
        rec_a.video_id = "a".into();
        let mut rec_b = crate::annotations::sample_record();
        rec_b.video_id = "b".into();
        rec_b.light = crate::annotations::Light::Nighttime;
        let records = vec![rec_a, rec_b];
        let groups =
            group_by_attribute(&preds, &records, "light", 2.0, VideoScoreStat::Max).unwrap();
        assert_eq!(groups.len(), 2);
        let total: usize = groups.iter().map(|g| g.n_videos).sum();
        assert_eq!(total, preds.len());
        assert!(group_by_attribute(&preds, &records, "speed", 2.0, VideoScoreStat::Max).is_err());

        // Constant attribute: one group whose AP equals the whole-set AP.
        let mut recs2 = records.clone();
        recs2[1].light = recs2[0].light;
        let one = group_by_attribute(&preds, &recs2, "light", 2.0, VideoScoreStat::Max).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].ap, r.ap);
    }

    #[test]
    fn video_score_stats() {
        let p = [0.2, 0.8, 0.5];
        assert_eq!(video_score(&p, VideoScoreStat::Max), 0.8);
        assert!((video_score(&p, VideoScoreStat::Mean) - 0.5).abs() < 1e-12);
    }
}
