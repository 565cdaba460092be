//! Python bindings for the capfuse hybrid captioner.
//!
//! Exposes the main types and operations (tokenization, vocabulary, BLEU,
//! cosine/consensus retrieval, the neural decoder, the gate) plus the
//! pipeline commands. Build with `cargo build -p capfuse-py`, then import
//! the produced `libcapfuse_py.so` as `capfuse_py` (see python/smoke_test.py).

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList};

use capfuse::config::RunConfig;
use capfuse::corpus::Split;
use capfuse::pipeline::{self, CaptionTarget};
use capfuse::{bleu, corpus, fixture, gate, knn, nic};

fn to_py_err(e: capfuse::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    Ok(match value {
        Value::Null => py.None(),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any().unbind(),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any().unbind()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind()
            }
        }
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let converted: Vec<Py<PyAny>> = items
                .iter()
                .map(|v| json_to_py(py, v))
                .collect::<PyResult<_>>()?;
            PyList::new(py, converted)?.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn serialize_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let json = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &json)
}

/// Lowercase, strip punctuation, split on whitespace.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::tokenize(text)
}

/// Token/id mapping with START/END/UNK/PAD specials at fixed ids.
#[pyclass(name = "Vocabulary")]
struct PyVocabulary {
    inner: corpus::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Build from tokenized captions, keeping tokens with frequency > cutoff.
    #[new]
    fn new(captions: Vec<Vec<String>>, cutoff: usize) -> PyResult<Self> {
        let captions: Vec<corpus::Caption> = captions
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| corpus::Caption {
                image_id: format!("caption-{i}"),
                tokens,
            })
            .collect();
        Ok(PyVocabulary {
            inner: corpus::Vocabulary::build(&captions, cutoff).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: corpus::Vocabulary::load(&path).map_err(to_py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn encode(&self, tokens: Vec<String>) -> Vec<u32> {
        self.inner.encode(&tokens)
    }

    fn decode(&self, ids: Vec<u32>) -> Vec<String> {
        self.inner.decode(&ids)
    }

    fn id(&self, token: &str) -> Option<u32> {
        self.inner.id(token)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.inner.token(id).map(str::to_owned)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }
}

/// Smoothed sentence BLEU up to max_order.
#[pyfunction(signature = (hypothesis, references, max_order = 4))]
fn sentence_bleu(
    hypothesis: Vec<String>,
    references: Vec<Vec<String>>,
    max_order: usize,
) -> PyResult<f64> {
    Ok(bleu::sentence_bleu(&hypothesis, &references, max_order)
        .map_err(to_py_err)?
        .value)
}

/// Unsmoothed corpus BLEU over (hypothesis, references) pairs.
#[pyfunction(signature = (pairs, max_order = 4))]
fn corpus_bleu(pairs: Vec<(Vec<String>, Vec<Vec<String>>)>, max_order: usize) -> PyResult<f64> {
    Ok(bleu::corpus_bleu(&pairs, max_order).map_err(to_py_err)?.value)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    knn::cosine_similarity(&a, &b).map_err(to_py_err)
}

/// Consensus caption over a candidate pool: the candidate maximizing the sum
/// of its m largest BLEU-4 similarities to the others. Returns a dict with
/// tokens, candidate_index, raw_score, avg_similarity and m_used.
#[pyfunction]
fn consensus_caption(py: Python<'_>, captions: Vec<Vec<String>>, m: usize) -> PyResult<Py<PyAny>> {
    let set = knn::CandidateSet::from_token_lists(captions);
    let result = knn::consensus_caption(&set, m).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("tokens", result.caption.tokens)?;
    dict.set_item("candidate_index", result.candidate_index)?;
    dict.set_item("raw_score", result.raw_score)?;
    dict.set_item("avg_similarity", result.avg_similarity)?;
    dict.set_item("m_used", result.m_used)?;
    Ok(dict.into_any().unbind())
}

/// A trained neural captioner checkpoint plus its vocabulary.
#[pyclass(name = "NicModel")]
struct PyNicModel {
    params: nic::NicParameters,
    vocab: corpus::Vocabulary,
}

#[pymethods]
impl PyNicModel {
    #[staticmethod]
    fn load(nic_path: PathBuf, vocab_path: PathBuf) -> PyResult<Self> {
        let (params, _, nic_vocab_hash) = nic::load_nic(&nic_path).map_err(to_py_err)?;
        let vocab = corpus::Vocabulary::load(&vocab_path).map_err(to_py_err)?;
        if vocab.hash() != nic_vocab_hash {
            return Err(PyValueError::new_err(
                "checkpoint was trained against a different vocabulary",
            ));
        }
        Ok(PyNicModel { params, vocab })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.params.dims.vocab_size
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.params.dims.feature_dim
    }

    #[pyo3(signature = (features, max_len = 35))]
    fn decode_greedy(
        &self,
        py: Python<'_>,
        features: Vec<f64>,
        max_len: usize,
    ) -> PyResult<Py<PyAny>> {
        let decoded =
            nic::decode_greedy(&self.params, &self.vocab, &features, max_len).map_err(to_py_err)?;
        serialize_to_py(py, &decoded)
    }

    #[pyo3(signature = (features, beam, max_len = 35))]
    fn decode_beam(
        &self,
        py: Python<'_>,
        features: Vec<f64>,
        beam: usize,
        max_len: usize,
    ) -> PyResult<Py<PyAny>> {
        let decoded = nic::decode_beam(&self.params, &self.vocab, &features, beam, max_len)
            .map_err(to_py_err)?;
        serialize_to_py(py, &decoded)
    }
}

/// A trained gate checkpoint.
#[pyclass(name = "GateModel")]
struct PyGateModel {
    inner: gate::GateModel,
}

fn features_from_array(values: [f64; 5]) -> gate::GateFeatures {
    gate::GateFeatures {
        nic_confidence: values[0],
        consensus_similarity: values[1],
        neighbor_similarity: values[2],
        nic_length: values[3],
        knn_length: values[4],
    }
}

#[pymethods]
impl PyGateModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = gate::load_gate(&path).map_err(to_py_err)?;
        Ok(PyGateModel { inner })
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.to_vec()
    }

    #[getter]
    fn bias(&self) -> f64 {
        self.inner.bias
    }

    /// Probability that the consensus caption is the better one.
    fn probability(&self, features: [f64; 5]) -> f64 {
        self.inner.probability(&features_from_array(features))
    }

    /// 0 picks the neural caption, 1 the consensus caption; an exact 0.5
    /// ties to 0.
    fn predict(&self, features: [f64; 5]) -> u8 {
        self.inner.predict(&features_from_array(features))
    }

    /// Apply the gate to one image's candidates, returning (predicted,
    /// final_caption).
    fn decide(
        &self,
        features: [f64; 5],
        nic_caption: Vec<String>,
        knn_caption: Vec<String>,
    ) -> (u8, Vec<String>) {
        let decision = gate::decide(
            &self.inner,
            &features_from_array(features),
            "query",
            &nic_caption,
            &knn_caption,
        );
        (decision.predicted, decision.final_caption)
    }
}

/// Write the synthetic fixture corpus into a directory.
#[pyfunction(signature = (out_dir, images = 200, seed = 42))]
fn generate_fixture(out_dir: PathBuf, images: usize, seed: u64) -> PyResult<(String, String, String)> {
    let config = fixture::FixtureConfig {
        images,
        seed,
        ..Default::default()
    };
    let (captions, features, splits) = fixture::write(&config, &out_dir).map_err(to_py_err)?;
    Ok((
        captions.display().to_string(),
        features.display().to_string(),
        splits.display().to_string(),
    ))
}

fn load_config(path: &Path) -> PyResult<RunConfig> {
    RunConfig::load(path).map_err(to_py_err)
}

fn parse_split(name: &str) -> PyResult<Split> {
    name.parse().map_err(PyValueError::new_err)
}

/// Build the vocabulary and neighbor index for a run config (TOML path).
#[pyfunction]
fn prepare(py: Python<'_>, config_path: PathBuf) -> PyResult<Py<PyAny>> {
    let summary = pipeline::prepare(&load_config(&config_path)?).map_err(to_py_err)?;
    serialize_to_py(py, &summary)
}

/// Train the neural captioner and the gate for a run config.
#[pyfunction]
fn train(py: Python<'_>, config_path: PathBuf) -> PyResult<Py<PyAny>> {
    let summary = pipeline::train(&load_config(&config_path)?).map_err(to_py_err)?;
    serialize_to_py(py, &summary)
}

/// Caption images (the test split, or explicit ids) and return the decision
/// records as dicts.
#[pyfunction(signature = (config_path, ids = None, force_gate = None))]
fn caption(
    py: Python<'_>,
    config_path: PathBuf,
    ids: Option<Vec<String>>,
    force_gate: Option<u8>,
) -> PyResult<Py<PyAny>> {
    let target = match ids {
        Some(ids) => CaptionTarget::Ids(ids),
        None => CaptionTarget::TestSplit,
    };
    let lines = pipeline::caption(&load_config(&config_path)?, &target, force_gate)
        .map_err(to_py_err)?;
    serialize_to_py(py, &lines)
}

/// Score both captioners, the hybrid, and the oracle-gated hybrid.
#[pyfunction(signature = (config_path, split = "test"))]
fn evaluate(py: Python<'_>, config_path: PathBuf, split: &str) -> PyResult<Py<PyAny>> {
    let report = pipeline::evaluate(&load_config(&config_path)?, parse_split(split)?)
        .map_err(to_py_err)?;
    serialize_to_py(py, &report)
}

/// Score the neural captioner across beam widths.
#[pyfunction(signature = (config_path, split = "test", beams = vec![1, 3, 5, 7]))]
fn sweep_beam(
    py: Python<'_>,
    config_path: PathBuf,
    split: &str,
    beams: Vec<usize>,
) -> PyResult<Py<PyAny>> {
    let report = pipeline::sweep_beam(&load_config(&config_path)?, parse_split(split)?, &beams)
        .map_err(to_py_err)?;
    serialize_to_py(py, &report)
}

#[pymodule]
fn capfuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(consensus_caption, m)?)?;
    m.add_function(wrap_pyfunction!(generate_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(caption, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_beam, m)?)?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyNicModel>()?;
    m.add_class::<PyGateModel>()?;
    m.add("START_TOKEN", corpus::START_TOKEN)?;
    m.add("END_TOKEN", corpus::END_TOKEN)?;
    m.add("UNK_TOKEN", corpus::UNK_TOKEN)?;
    m.add("PAD_TOKEN", corpus::PAD_TOKEN)?;
    m.add("MAX_CAPTION_TOKENS", corpus::MAX_CAPTION_TOKENS)?;
    Ok(())
}
