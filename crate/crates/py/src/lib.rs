//! Python bindings for the core suggested-reply engine: tokenization, the
//! symmetric matching loss, ranking metrics, encoder checkpoints, and the
//! serving graph.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use unireply::eval::EvalConfig;
use unireply::inference::{load_graph, CompositeGraph};
use unireply::model::{Checkpoint, ModelParams};
use unireply::text::{normalize_and_split, tokenize as core_tokenize, Vocabulary};

fn to_py_err(e: unireply::Error) -> PyErr {
    match &e {
        unireply::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Normalize text and hash it into token ids (PAD=0, UNK=1, MASK=2, SEP=3).
#[pyfunction]
#[pyo3(signature = (text, lang, max_len = 96, vocab_size = 30000, hash_seed = 17))]
fn tokenize(
    text: &str,
    lang: &str,
    max_len: usize,
    vocab_size: u32,
    hash_seed: u64,
) -> PyResult<Vec<u32>> {
    let vocab = Vocabulary::new(vocab_size, hash_seed).map_err(to_py_err)?;
    Ok(core_tokenize(text, lang, max_len, &vocab).ids)
}

/// Unicode-normalized, lowercased word split used everywhere in the engine.
#[pyfunction]
fn normalize(text: &str) -> Vec<String> {
    normalize_and_split(text)
}

/// Symmetric in-batch contrastive loss over an n x n similarity matrix.
#[pyfunction]
fn symmetric_loss(logits: Vec<Vec<f64>>) -> PyResult<f64> {
    let n = logits.len();
    if n == 0 || logits.iter().any(|row| row.len() != n) {
        return Err(PyValueError::new_err("logits must be a non-empty square matrix"));
    }
    let flat: Vec<f64> = logits.into_iter().flatten().collect();
    let matrix = Array2::from_shape_vec((n, n), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(unireply::objectives::symmetric_loss(&matrix)
        .map_err(to_py_err)?
        .value)
}

/// Mean reciprocal rank; `None` or a rank beyond `cutoff` contributes 0.
#[pyfunction]
#[pyo3(signature = (ranks, cutoff = 15))]
fn mrr(ranks: Vec<Option<usize>>, cutoff: usize) -> PyResult<f64> {
    unireply::eval::mrr(&ranks, cutoff).map_err(to_py_err)
}

/// N-gram overlap F1 between a reference and a single candidate.
#[pyfunction]
fn rouge_n(reference: &str, candidate: &str, n: usize) -> f64 {
    unireply::eval::rouge_n(reference, candidate, n)
}

/// Weighted 1/2/3-gram ROUGE, maximized over the candidate list.
#[pyfunction]
fn w_rouge(reference: &str, candidates: Vec<String>) -> PyResult<f64> {
    unireply::eval::w_rouge(reference, &candidates, &EvalConfig::default()).map_err(to_py_err)
}

/// A trained dual-encoder checkpoint.
#[pyclass]
struct Model {
    params: ModelParams,
}

#[pymethods]
impl Model {
    /// Load a checkpoint directory (manifest.json + tensors.bin).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(to_py_err)?;
        Ok(Model { params: ckpt.params })
    }

    /// Encode text into the shared matching space.
    fn encode(&self, text: &str, lang: &str) -> PyResult<Vec<f64>> {
        let vocab = self.params.config.vocab();
        let seq = core_tokenize(text, lang, self.params.config.max_msg_len, &vocab);
        Ok(self.params.encode(&seq).map_err(to_py_err)?.to_vec())
    }

    /// Dot-product match score between a message and a candidate reply.
    fn score(&self, message: &str, reply: &str, lang: &str) -> PyResult<f64> {
        let vocab = self.params.config.vocab();
        let m = self
            .params
            .encode(&core_tokenize(message, lang, self.params.config.max_msg_len, &vocab))
            .map_err(to_py_err)?;
        let r = self
            .params
            .encode(&core_tokenize(reply, lang, self.params.config.max_reply_len, &vocab))
            .map_err(to_py_err)?;
        Ok(m.dot(&r))
    }

    #[getter]
    fn vocab_size(&self) -> u32 {
        self.params.config.vocab_size
    }

    #[getter]
    fn languages(&self) -> Vec<String> {
        self.params.active_languages.iter().cloned().collect()
    }
}

/// One suggestion produced by the serving graph.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Suggestion {
    #[pyo3(get)]
    text: String,
    #[pyo3(get)]
    score: f64,
}

#[pymethods]
impl Suggestion {
    fn __repr__(&self) -> String {
        format!("Suggestion(text={:?}, score={:.4})", self.text, self.score)
    }
}

/// Result of running one message through the serving graph.
#[pyclass]
struct PredictionResult {
    #[pyo3(get)]
    triggered: bool,
    #[pyo3(get)]
    reason: Option<String>,
    #[pyo3(get)]
    lang: String,
    #[pyo3(get)]
    responses: Vec<Suggestion>,
}

#[pymethods]
impl PredictionResult {
    fn __repr__(&self) -> String {
        format!(
            "PredictionResult(triggered={}, lang={:?}, responses={})",
            self.triggered,
            self.lang,
            self.responses.len()
        )
    }
}

/// The composite serving graph: encoder, per-language response matrices,
/// penalties, and language-identification profiles.
#[pyclass]
struct Graph {
    inner: CompositeGraph,
}

#[pymethods]
impl Graph {
    /// Load a graph bundle directory produced by `unireply build-responses`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Graph { inner: load_graph(&path).map_err(to_py_err)? })
    }

    /// Run triggering, language identification, scoring, and dedup for one
    /// incoming message.
    fn predict(&self, message: &str) -> PyResult<PredictionResult> {
        let p = self.inner.predict(message).map_err(to_py_err)?;
        Ok(PredictionResult {
            triggered: p.triggered,
            reason: p.reason,
            lang: p.lang,
            responses: p
                .responses
                .into_iter()
                .map(|r| Suggestion { text: r.text, score: r.score })
                .collect(),
        })
    }

    #[getter]
    fn languages(&self) -> Vec<String> {
        self.inner.responses.keys().cloned().collect()
    }
}

#[pymodule]
fn unireply_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mrr, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_n, m)?)?;
    m.add_function(wrap_pyfunction!(w_rouge, m)?)?;
    m.add_class::<Model>()?;
    m.add_class::<Suggestion>()?;
    m.add_class::<PredictionResult>()?;
    m.add_class::<Graph>()?;
    Ok(())
}
