//! Python bindings for the accident anticipation pipeline. Exposes corpus
//! generation, training, evaluation, gradient checking, and the metric
//! functions; heavyweight results come back as JSON strings so the Python
//! side stays dependency-free.

use cap_core::checkpoint::Checkpoint;
use cap_core::config::TrainConfig;
use cap_core::metrics;
use cap_core::synthdata::{generate, load_corpus_dir, save_corpus_dir, SynthConfig};
use cap_core::train::{evaluate as eval_impl, save_log, train as train_impl};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::path::PathBuf;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Write a synthetic corpus to `out_dir`; returns the number of scenarios.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, n_videos=10, positive_frac=0.5, n_frames=30, fps=10.0))]
fn generate_corpus(
    out_dir: PathBuf,
    seed: u64,
    n_videos: usize,
    positive_frac: f64,
    n_frames: u32,
    fps: f64,
) -> PyResult<usize> {
    let cfg = SynthConfig { n_frames, fps };
    let scenarios = generate(seed, n_videos, positive_frac, &cfg);
    save_corpus_dir(&scenarios, &out_dir).map_err(err)?;
    Ok(scenarios.len())
}

/// Train on a corpus directory. `config_json` overrides default settings
/// field by field. Writes model.ckpt and loss_log.jsonl into `out_dir` and
/// returns the final logged total loss.
#[pyfunction]
#[pyo3(signature = (corpus_dir, out_dir, config_json=None))]
fn train(corpus_dir: PathBuf, out_dir: PathBuf, config_json: Option<&str>) -> PyResult<f64> {
    let config: TrainConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(err)?,
        None => TrainConfig::default(),
    };
    config.validate().map_err(err)?;
    let scenarios = load_corpus_dir(&corpus_dir).map_err(err)?;
    std::fs::create_dir_all(&out_dir).map_err(err)?;
    let outcome = train_impl(&scenarios, &config).map_err(err)?;
    outcome
        .checkpoint
        .save(&out_dir.join("model.ckpt"))
        .map_err(err)?;
    save_log(&outcome.log, &out_dir.join("loss_log.jsonl")).map_err(err)?;
    Ok(outcome.log.last().map(|e| e.loss.l_total).unwrap_or(0.0))
}

/// Evaluate a checkpoint on a corpus directory; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (corpus_dir, checkpoint, placeholder_text=false))]
fn evaluate(corpus_dir: PathBuf, checkpoint: PathBuf, placeholder_text: bool) -> PyResult<String> {
    let scenarios = load_corpus_dir(&corpus_dir).map_err(err)?;
    let ckpt = Checkpoint::load(&checkpoint).map_err(err)?;
    let eval = eval_impl(&scenarios, &ckpt.store, &ckpt.config, placeholder_text).map_err(err)?;
    serde_json::to_string_pretty(&eval.report).map_err(err)
}

/// Finite-difference gradient verification; returns (all_pass, report text).
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(seed: u64) -> PyResult<(bool, String)> {
    let report = cap_core::gradcheck::run(seed);
    Ok((report.all_pass(), report.to_string()))
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::average_precision(&scores, &labels).map_err(err)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(err)
}

#[pyfunction]
fn tta(p_hat: Vec<f64>, t_ai_local: usize, fps: f64, threshold: f64) -> f64 {
    metrics::tta(&p_hat, t_ai_local, fps, threshold)
}

#[pyfunction]
fn mtta(p_hat: Vec<f64>, t_ai_local: usize, fps: f64) -> f64 {
    metrics::mtta(&p_hat, t_ai_local, fps)
}

#[pymodule]
fn cap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(tta, m)?)?;
    m.add_function(wrap_pyfunction!(mtta, m)?)?;
    Ok(())
}
