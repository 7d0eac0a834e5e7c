//! Training loop (per-sample stochastic gradient descent with four
//! learning-rate groups), loss logging, and forward-only evaluation with
//! the metric suite.

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::clip_sampler::{sample, ClipLabel, ClipSample, SamplerConfig, Strategy};
use crate::config::TrainConfig;
use crate::losses::{
    anticipation_loss_var, attention_loss_var, total_loss, LossBreakdown, Reduction, EPSILON,
};
use crate::metrics::{
    compute_report, saliency_metrics, MetricReport, Saliency, VideoPrediction,
};
use crate::model::{forward_clip, CapModel};
use crate::nn::params::{group_of, ParamGroup, ParamStore, ParamVars};
use crate::nn::Dropout;
use crate::synthdata::SyntheticScenario;
use crate::text::{Vocab, PLACEHOLDER_TEXT};
use crate::{CapError, Result};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: u32,
    pub update: u64,
    pub sample_id: String,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
}

/// One resolvable training unit: a clip plus its text token ids.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub scenario_index: usize,
    pub clip: ClipSample,
}

pub fn sampler_for(config: &TrainConfig) -> SamplerConfig {
    SamplerConfig {
        window_len: config.window_len,
        strategy: Strategy::Mini,
        horizon_s: 5.0,
        seed: config.seed,
    }
}

/// Resolve every scenario into clips; order is deterministic (corpus order,
/// positives before negatives within a video as emitted by the sampler).
pub fn prepare_samples(
    scenarios: &[SyntheticScenario],
    sampler: &SamplerConfig,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for (i, s) in scenarios.iter().enumerate() {
        let batch = sample(&s.record, sampler)?;
        for clip in batch.clips {
            out.push(TrainSample {
                scenario_index: i,
                clip,
            });
        }
    }
    Ok(out)
}

fn clip_frames(scenario: &SyntheticScenario, clip: &ClipSample) -> Vec<ndarray::Array3<f64>> {
    let (a, b) = (clip.start as usize, (clip.start + clip.length) as usize);
    scenario.frames[a..b].to_vec()
}

fn clip_maps(scenario: &SyntheticScenario, clip: &ClipSample) -> Vec<Array2<f64>> {
    let (a, b) = (clip.start as usize, (clip.start + clip.length) as usize);
    scenario.attention_gt[a..b].to_vec()
}

fn token_ids(vocab: &Vocab, scenario: &SyntheticScenario, placeholder: bool) -> Vec<usize> {
    if placeholder {
        vocab.encode(PLACEHOLDER_TEXT)
    } else {
        vocab.encode(&scenario.record.fact)
    }
}

fn lr_for(config: &TrainConfig, group: ParamGroup) -> f64 {
    match group {
        ParamGroup::SelfAttention => config.lr_self_attention,
        ParamGroup::Fusion => config.lr_t2i,
        ParamGroup::Recurrent => config.lr_gru,
        ParamGroup::Decoder => config.lr_decoder,
    }
}

/// Forward one sample and return (loss breakdown, per-parameter gradients).
fn sample_pass(
    model: &CapModel,
    scenario: &SyntheticScenario,
    clip: &ClipSample,
    config: &TrainConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossBreakdown, Vec<(String, Tensor)>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, &model.store);
    let frames = clip_frames(scenario, clip);
    let ids = token_ids(&model.vocab, scenario, config.placeholder_text_mode);
    let mut dropout = match dropout_rng {
        Some(rng) => Dropout::train(config.dropout, rng),
        None => Dropout::eval(),
    };
    let decode = !config.decoder_ablated;
    let out = forward_clip(
        &mut tape,
        &pv,
        &frames,
        &ids,
        config.t2i_layers,
        &mut dropout,
        decode,
    );
    let positive = clip.label == ClipLabel::Positive;
    let t_ai_local = clip.t_ai_local.unwrap_or(0) as f64;
    let mut l_a = anticipation_loss_var(&mut tape, &out.p_hats, positive, t_ai_local, clip.fps);
    if config.reduction == Reduction::Mean {
        l_a = tape.scale(l_a, 1.0 / frames.len() as f64);
    }
    let mut l_d_val = 0.0;
    let mut loss = tape.scale(l_a, config.lambda);
    if decode {
        let gts = clip_maps(scenario, clip);
        let mut l_d: Option<crate::autodiff::Var> = None;
        for (gt, &pred) in gts.iter().zip(&out.attention) {
            let term = attention_loss_var(&mut tape, gt, pred, EPSILON);
            l_d = Some(match l_d {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
        let mut l_d = l_d.expect("decoded clip has frames");
        if config.reduction == Reduction::Mean {
            l_d = tape.scale(l_d, 1.0 / gts.len() as f64);
        }
        l_d_val = tape.scalar(l_d);
        loss = tape.add(loss, l_d);
    }
    let l_a_val = tape.scalar(l_a);
    let breakdown = total_loss(l_d_val, l_a_val, config.lambda);
    if !breakdown.l_total.is_finite() {
        return Err(CapError::NonFiniteLoss(clip.video_id.clone()));
    }
    let grads = tape.backward(loss);
    let mut named = Vec::new();
    for (name, var) in pv.iter() {
        if let Some(g) = &grads[var.0] {
            named.push((name.to_string(), g.clone()));
        }
    }
    Ok((breakdown, named))
}

fn apply_update(
    store: &mut ParamStore,
    accum: &std::collections::BTreeMap<String, Tensor>,
    batch: usize,
    config: &TrainConfig,
) {
    let scale = 1.0 / batch as f64;
    for (name, grad) in accum {
        let lr = lr_for(config, group_of(name));
        let p = store.get_mut(name);
        ndarray::Zip::from(&mut *p).and(grad).for_each(|w, &g| {
            *w -= lr * scale * g;
        });
    }
}

pub fn train(scenarios: &[SyntheticScenario], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let model = CapModel::new(Vocab::builtin(), config.t2i_layers, config.seed);
    let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7261_696e));
    run_epochs(model, rng, 0, Vec::new(), scenarios, config)
}

/// Continue a run from a saved checkpoint; on the same platform this is
/// bit-identical to never having stopped.
pub fn resume(checkpoint: &Checkpoint, scenarios: &[SyntheticScenario]) -> Result<TrainOutcome> {
    let config = checkpoint.config.clone();
    let model = CapModel {
        store: checkpoint.store.clone(),
        vocab: Vocab::builtin(),
        t2i_layers: config.t2i_layers,
    };
    let rng = checkpoint.restore_rng();
    run_epochs(model, rng, checkpoint.epoch, Vec::new(), scenarios, &config)
}

fn run_epochs(
    mut model: CapModel,
    mut rng: ChaCha8Rng,
    start_epoch: u32,
    mut log: Vec<LogEntry>,
    scenarios: &[SyntheticScenario],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let sampler = sampler_for(config);
    let samples = prepare_samples(scenarios, &sampler)?;
    if samples.is_empty() {
        return Err(CapError::BadInput("no trainable clips in corpus".into()));
    }
    let mut update = log.len() as u64;
    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut accum: std::collections::BTreeMap<String, Tensor> = Default::default();
        let mut in_batch = 0usize;
        let mut batch_ids: Vec<String> = Vec::new();
        for &si in &order {
            let s = &samples[si];
            let scenario = &scenarios[s.scenario_index];
            let (breakdown, grads) =
                sample_pass(&model, scenario, &s.clip, config, Some(&mut rng))?;
            for (name, g) in grads {
                accum
                    .entry(name)
                    .and_modify(|t| *t += &g)
                    .or_insert(g);
            }
            in_batch += 1;
            batch_ids.push(s.clip.video_id.clone());
            log.push(LogEntry {
                epoch,
                update,
                sample_id: s.clip.video_id.clone(),
                loss: breakdown,
            });
            if in_batch == config.batch_size as usize {
                apply_update(&mut model.store, &accum, in_batch, config);
                update += 1;
                accum.clear();
                in_batch = 0;
                batch_ids.clear();
            }
        }
        if in_batch > 0 {
            apply_update(&mut model.store, &accum, in_batch, config);
            update += 1;
        }
    }
    let mut checkpoint = Checkpoint {
        store: model.store,
        config: config.clone(),
        epoch: config.epochs,
        rng_seed: [0; 32],
        rng_word_pos: 0,
    };
    checkpoint.capture_rng(&rng);
    Ok(TrainOutcome {
        checkpoint,
        log,
    })
}

pub fn save_log(log: &[LogEntry], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in log {
        serde_json::to_writer(&mut f, entry).map_err(|e| CapError::BadInput(e.to_string()))?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// The k brightest ground-truth pixels, ties broken by position; used as
/// fixation points for the shuffled ROC metric.
pub fn top_fixations(map: &Array2<f64>, k: usize) -> Vec<(usize, usize)> {
    let mut cells: Vec<(usize, usize)> = (0..map.nrows())
        .flat_map(|y| (0..map.ncols()).map(move |x| (y, x)))
        .collect();
    cells.sort_by(|&a, &b| {
        map[[b.0, b.1]]
            .partial_cmp(&map[[a.0, a.1]])
            .unwrap()
            .then(a.cmp(&b))
    });
    cells.truncate(k);
    cells
}

pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Vec<VideoPrediction>,
}

/// Forward-only pass over a corpus: per-clip probability series, video
/// metrics, and (when maps are decoded) the mean saliency scores against
/// ground truth, with shuffled fixations drawn from other clips.
pub fn evaluate(
    scenarios: &[SyntheticScenario],
    store: &ParamStore,
    config: &TrainConfig,
    placeholder_text: bool,
) -> Result<Evaluation> {
    let vocab = Vocab::builtin();
    let sampler = sampler_for(config);
    let samples = prepare_samples(scenarios, &sampler)?;
    if samples.is_empty() {
        return Err(CapError::BadInput("no clips to evaluate".into()));
    }
    let mut predictions = Vec::new();
    let mut per_frame: Vec<(Array2<f64>, Array2<f64>)> = Vec::new(); // (gt, pred)
    let mut fps = 10.0;
    for s in &samples {
        let scenario = &scenarios[s.scenario_index];
        fps = scenario.record.fps;
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, store);
        let frames = clip_frames(scenario, &s.clip);
        let ids = if placeholder_text {
            vocab.encode(PLACEHOLDER_TEXT)
        } else {
            vocab.encode(&scenario.record.fact)
        };
        let out = forward_clip(
            &mut tape,
            &pv,
            &frames,
            &ids,
            config.t2i_layers,
            &mut Dropout::eval(),
            true,
        );
        let p_hat: Vec<f64> = out.p_hats.iter().map(|p| tape.scalar(*p)).collect();
        if s.clip.label == ClipLabel::Positive {
            for (gt, &pred) in clip_maps(scenario, &s.clip).iter().zip(&out.attention) {
                let pred_map = tape
                    .value(pred)
                    .clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("decoded map is 2-d");
                per_frame.push((gt.clone(), pred_map));
            }
        }
        predictions.push(VideoPrediction {
            clip: s.clip.clone(),
            p_hat,
        });
    }
    let mut report = compute_report(&predictions, fps, config.video_score_stat)?;
    if per_frame.len() >= 2 {
        let mut acc = Saliency {
            kldiv: 0.0,
            cc: 0.0,
            sim: 0.0,
            s_auc: 0.0,
        };
        let n = per_frame.len();
        for i in 0..n {
            let (gt, pred) = &per_frame[i];
            let fix = top_fixations(gt, 10);
            // Shuffled fixations from a different frame's ground truth.
            let (other_gt, _) = &per_frame[(i + n / 2).max(i + 1) % n];
            let shuffled = top_fixations(other_gt, 10);
            let s = saliency_metrics(gt, pred, &fix, &shuffled)?;
            acc.kldiv += s.kldiv;
            acc.cc += s.cc;
            acc.sim += s.sim;
            acc.s_auc += s.s_auc;
        }
        let nf = n as f64;
        report.saliency = Some(Saliency {
            kldiv: acc.kldiv / nf,
            cc: acc.cc / nf,
            sim: acc.sim / nf,
            s_auc: acc.s_auc / nf,
        });
    }
    Ok(Evaluation {
        report,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SynthConfig};

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 1,
            t2i_layers: 1,
            window_len: 10,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_update_per_sample_when_batch_is_one() {
        let cfg = small_config();
        let scenarios = generate(5, 2, 0.5, &SynthConfig::default());
        let out = train(&scenarios, &cfg).unwrap();
        // Every logged entry corresponds to exactly one parameter update.
        let n_samples =
            prepare_samples(&scenarios, &sampler_for(&cfg)).unwrap().len();
        assert_eq!(out.log.len(), n_samples);
        let updates: std::collections::BTreeSet<u64> =
            out.log.iter().map(|e| e.update).collect();
        assert_eq!(updates.len(), n_samples);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_config();
        let scenarios = generate(6, 2, 0.5, &SynthConfig::default());
        let a = train(&scenarios, &cfg).unwrap();
        let b = train(&scenarios, &cfg).unwrap();
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.loss.l_total.to_bits(), y.loss.l_total.to_bits());
        }
        for (name, t) in a.checkpoint.store.iter() {
            let u = b.checkpoint.store.get(name);
            for (p, q) in t.iter().zip(u.iter()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut cfg = small_config();
        cfg.epochs = 2;
        let scenarios = generate(7, 2, 0.5, &SynthConfig::default());
        let full = train(&scenarios, &cfg).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.epochs = 1;
        let half = train(&scenarios, &half_cfg).unwrap();
        let mut ckpt = half.checkpoint.clone();
        ckpt.config.epochs = 2;
        let resumed = resume(&ckpt, &scenarios).unwrap();
        for (name, t) in full.checkpoint.store.iter() {
            let u = resumed.checkpoint.store.get(name);
            for (p, q) in t.iter().zip(u.iter()) {
                assert_eq!(p.to_bits(), q.to_bits(), "{name} diverged");
            }
        }
    }

    #[test]
    fn evaluate_produces_report_with_saliency() {
        let cfg = small_config();
        let scenarios = generate(8, 4, 0.5, &SynthConfig::default());
        let model = CapModel::new(Vocab::builtin(), cfg.t2i_layers, cfg.seed);
        let eval = evaluate(&scenarios, &model.store, &cfg, false).unwrap();
        assert!(eval.report.n_videos >= 2);
        assert!(eval.report.saliency.is_some());
        for p in &eval.predictions {
            assert!(p.p_hat.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        // Placeholder mode runs end to end too.
        let eval2 = evaluate(&scenarios, &model.store, &cfg, true).unwrap();
        assert_eq!(eval2.predictions.len(), eval.predictions.len());
    }

    #[test]
    fn log_serializes_as_jsonl() {
        let cfg = small_config();
        let scenarios = generate(9, 2, 0.5, &SynthConfig::default());
        let out = train(&scenarios, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.jsonl");
        save_log(&out.log, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), out.log.len());
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("l_total").is_some());
        }
    }

    #[test]
    fn top_fixations_orders_by_value() {
        let mut m = Array2::<f64>::zeros((4, 4));
        m[[2, 1]] = 0.9;
        m[[0, 3]] = 0.5;
        m[[3, 3]] = 0.7;
        let f = top_fixations(&m, 3);
        assert_eq!(f, vec![(2, 1), (3, 3), (0, 3)]);
    }
}
