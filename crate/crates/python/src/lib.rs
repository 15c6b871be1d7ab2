//! Python bindings. Structured results cross the boundary as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use fewuser::config::RunConfig;
use fewuser::corpus::{self, LabelId};
use fewuser::encoder::{HashTokenizer, TokenizerConfig};
use fewuser::eval;
use fewuser::geo_prompt::HardPrompt;
use fewuser::objectives::{self, MiningKind, MiningPolicy, SimilarityRow};
use fewuser::trainer;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json(value: &impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(value).map_err(err)
}

#[pyclass(module = "fewuser_py")]
struct Tokenizer {
    inner: HashTokenizer,
}

#[pymethods]
impl Tokenizer {
    #[new]
    #[pyo3(signature = (vocab_size=4096, lowercase=true))]
    fn new(vocab_size: usize, lowercase: bool) -> PyResult<Self> {
        let inner = HashTokenizer::new(TokenizerConfig { vocab_size, lowercase }).map_err(err)?;
        Ok(Self { inner })
    }

    /// Token ids, CLS first, truncated to `max_len`.
    #[pyo3(signature = (text, max_len=128))]
    fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        self.inner.tokenize(text, max_len).tokens
    }
}

#[pyclass(module = "fewuser_py")]
struct Dataset {
    inner: corpus::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: corpus::load_dataset(path).map_err(err)? })
    }

    /// The default synthetic corpus, or one described by a JSON spec.
    #[staticmethod]
    #[pyo3(signature = (spec_json=None))]
    fn synthetic(spec_json: Option<&str>) -> PyResult<Self> {
        let spec = match spec_json {
            Some(s) => serde_json::from_str(s).map_err(err)?,
            None => Default::default(),
        };
        Ok(Self { inner: corpus::synthetic::generate(&spec).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        corpus::save_dataset(&self.inner, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.users.len()
    }

    fn label_ids(&self) -> Vec<String> {
        self.inner.labels.iter().map(|l| l.label_id.0.clone()).collect()
    }

    fn user_labels(&self) -> Vec<String> {
        self.inner.users.iter().map(|u| u.label_id.0.clone()).collect()
    }

    /// Train/dev/test ids and shot subsets as JSON.
    #[pyo3(signature = (seed=0, shots=vec![1, 8], subset_seeds=[11, 22, 33], min_count=3))]
    fn split(&self, seed: u64, shots: Vec<usize>, subset_seeds: [u64; 3], min_count: usize) -> PyResult<String> {
        let filtered = corpus::filter_minority_classes(&self.inner, min_count).map_err(err)?;
        let split = corpus::make_split(&filtered, Default::default(), seed, None).map_err(err)?;
        let split = corpus::make_shot_subsets(&split, &filtered, &shots, &subset_seeds).map_err(err)?;
        json(&split)
    }

    /// Metrics for predicted label ids against this dataset's gold labels.
    fn evaluate(&self, predicted: Vec<String>) -> PyResult<String> {
        let gold: Vec<LabelId> = self.inner.users.iter().map(|u| u.label_id.clone()).collect();
        let predicted: Vec<LabelId> = predicted.into_iter().map(LabelId).collect();
        json(&eval::evaluate(&gold, &predicted, &self.inner.labels).map_err(err)?)
    }
}

/// A model built from a TOML config, untrained or loaded from a checkpoint.
#[pyclass(module = "fewuser_py")]
struct Model {
    inner: trainer::Model,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (dataset, config_toml=""))]
    fn new(dataset: &Dataset, config_toml: &str) -> PyResult<Self> {
        let cfg = RunConfig::from_toml_str(config_toml).map_err(err)?;
        Ok(Self { inner: trainer::Model::build(&cfg, &dataset.inner.labels).map_err(err)? })
    }

    fn predict(&self, dataset: &Dataset) -> PyResult<Vec<String>> {
        let users: Vec<_> = dataset.inner.users.iter().collect();
        let ids = self.inner.predict_users(&users, 0).map_err(err)?;
        Ok(ids.into_iter().map(|l| l.0).collect())
    }

    fn evaluate(&self, dataset: &Dataset) -> PyResult<String> {
        let users: Vec<_> = dataset.inner.users.iter().collect();
        json(&self.inner.evaluate_users(&users, 0).map_err(err)?)
    }
}

/// Runs a full experiment from a TOML config; returns the result as JSON.
#[pyfunction]
#[pyo3(signature = (config_toml=""))]
fn run(config_toml: &str) -> PyResult<String> {
    let cfg = RunConfig::from_toml_str(config_toml).map_err(err)?;
    let (_, result) = trainer::run_config(&cfg).map_err(err)?;
    json(&result)
}

#[pyfunction]
fn haversine_km(a: (f64, f64), b: (f64, f64)) -> PyResult<f64> {
    eval::haversine_km(a, b).map_err(err)
}

#[pyfunction]
fn contrastive_loss(scores: Vec<f64>, gold: usize, tau: f64) -> PyResult<f64> {
    let row = SimilarityRow::new(scores, gold).map_err(err)?;
    objectives::contrastive_loss(&row, tau).map_err(err)
}

/// Cross-entropy with the gold pair at position 0.
#[pyfunction]
fn matching_loss(scores: Vec<f64>) -> PyResult<f64> {
    objectives::matching_loss(&scores).map_err(err)
}

/// Indices of `k` hard negatives, ascending.
#[pyfunction]
#[pyo3(signature = (scores, gold, k, tau=0.03, seed=0, top=false))]
fn mine_negatives(scores: Vec<f64>, gold: usize, k: usize, tau: f64, seed: u64, top: bool) -> PyResult<Vec<usize>> {
    let row = SimilarityRow::new(scores, gold).map_err(err)?;
    let kind = if top { MiningKind::Top } else { MiningKind::Multinomial };
    objectives::mine_negatives(&row, MiningPolicy { kind, k }, tau, seed).map_err(err)
}

/// Fills the `[CLASS]` slot of a hard prompt template.
#[pyfunction]
fn apply_prompt(template: &str, class_name: &str) -> PyResult<String> {
    Ok(HardPrompt::new(template).map_err(err)?.apply(class_name))
}

#[pymodule]
fn fewuser_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tokenizer>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(haversine_km, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(matching_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mine_negatives, m)?)?;
    m.add_function(wrap_pyfunction!(apply_prompt, m)?)?;
    Ok(())
}
