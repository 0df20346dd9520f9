//! Python bindings. Reviews cross the boundary as dicts with keys `id`,
//! `hotel_id`, `label`, `text`; labels as the strings `"Bad"`, `"Good"`,
//! `"Excellent"`.

use std::path::PathBuf;

use bertv::corpus::{self, Format, SynthOptions};
use bertv::encoder::{self, EncoderConfig, EncoderWeights, FreezePolicy, Pooling};
use bertv::recommender::{self, ClassWeights, HotelStore};
use bertv::tfidf::{self, LinearHyperParams, LinearModel, TfidfModel, TfidfOptions};
use bertv::tokenizer::{self, build_vocab, Vocabulary};
use bertv::vtrain::{self, EpochReport, Metrics, Monitor, TrainConfig};
use bertv::{DatasetSplit, Label, LabeledReview};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_label(s: &str) -> PyResult<Label> {
    s.parse::<Label>()
        .map_err(|_| PyValueError::new_err(format!("invalid label {s:?}")))
}

fn review_to_py<'py>(py: Python<'py>, r: &LabeledReview) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("id", &r.id)?;
    d.set_item("hotel_id", r.hotel_id.as_deref())?;
    d.set_item("label", r.label.name())?;
    d.set_item("text", &r.text)?;
    Ok(d)
}

fn reviews_to_py<'py>(py: Python<'py>, rs: &[LabeledReview]) -> PyResult<Bound<'py, PyList>> {
    let items = rs
        .iter()
        .map(|r| review_to_py(py, r))
        .collect::<PyResult<Vec<_>>>()?;
    PyList::new(py, items)
}

fn review_from_py(obj: &Bound<'_, PyAny>, index: usize) -> PyResult<LabeledReview> {
    let get = |key: &str| -> PyResult<Option<Bound<'_, PyAny>>> {
        match obj.get_item(key) {
            Ok(v) if v.is_none() => Ok(None),
            Ok(v) => Ok(Some(v)),
            Err(_) => Ok(None),
        }
    };
    let text: String = get("text")?
        .ok_or_else(|| PyValueError::new_err(format!("review {index} has no text")))?
        .extract()?;
    let label: String = get("label")?
        .ok_or_else(|| PyValueError::new_err(format!("review {index} has no label")))?
        .extract()?;
    let id = match get("id")? {
        Some(v) => v.str()?.to_string(),
        None => (index + 1).to_string(),
    };
    Ok(LabeledReview {
        id,
        hotel_id: get("hotel_id")?.map(|v| v.extract()).transpose()?,
        text,
        label: parse_label(&label)?,
    })
}

fn reviews_from_py(objs: &Bound<'_, PyAny>) -> PyResult<Vec<LabeledReview>> {
    objs.try_iter()?
        .enumerate()
        .map(|(i, o)| review_from_py(&o?, i))
        .collect()
}

fn metrics_to_py<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("n", m.n)?;
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("precision", m.precision.to_vec())?;
    d.set_item("recall", m.recall.to_vec())?;
    d.set_item("f1", m.f1.to_vec())?;
    d.set_item("macro_f1", m.macro_f1)?;
    d.set_item("confusion", m.confusion.iter().map(|r| r.to_vec()).collect::<Vec<_>>())?;
    Ok(d)
}

fn history_to_py<'py>(py: Python<'py>, h: &[EpochReport]) -> PyResult<Bound<'py, PyList>> {
    let items = h
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("lr", r.lr)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("train_acc", r.train_acc)?;
            d.set_item("val_acc", r.val_acc)?;
            d.set_item("improved", r.improved)?;
            d.set_item("rolled_back", r.rolled_back)?;
            d.set_item("decays_used", r.decays_used)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    PyList::new(py, items)
}

/// Template-generated labelled reviews, `n_per_class` per label.
#[pyfunction]
#[pyo3(signature = (n_per_class, seed=0, n_hotels=5))]
fn synth_corpus<'py>(
    py: Python<'py>,
    n_per_class: usize,
    seed: u64,
    n_hotels: usize,
) -> PyResult<Bound<'py, PyList>> {
    let rs = corpus::synth_corpus_with(SynthOptions {
        n_per_class,
        seed,
        n_hotels,
    });
    reviews_to_py(py, &rs)
}

/// The three bundled reference reviews (Good, Bad, Excellent).
#[pyfunction]
fn reference_reviews(py: Python<'_>) -> PyResult<Bound<'_, PyList>> {
    reviews_to_py(py, &corpus::reference_reviews())
}

/// Read a `.csv` or `.jsonl` review file.
#[pyfunction]
fn load_reviews(py: Python<'_>, path: PathBuf) -> PyResult<Bound<'_, PyList>> {
    let format = Format::from_path(&path).map_err(value_err)?;
    let rs = corpus::load_reviews(&path, format).map_err(|e| PyIOError::new_err(e.to_string()))?;
    reviews_to_py(py, &rs)
}

/// Write reviews as `.csv` or `.jsonl` (chosen by extension).
#[pyfunction]
fn write_reviews(path: PathBuf, reviews: &Bound<'_, PyAny>) -> PyResult<()> {
    let rs = reviews_from_py(reviews)?;
    let format = Format::from_path(&path).map_err(value_err)?;
    corpus::write_reviews(&path, format, &rs).map_err(|e| PyIOError::new_err(e.to_string()))
}

/// Per-class split into `(train, val, test)`.
#[pyfunction]
#[pyo3(signature = (reviews, ratios=(0.6, 0.2, 0.2), seed=0))]
fn stratified_split<'py>(
    py: Python<'py>,
    reviews: &Bound<'py, PyAny>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> PyResult<(Bound<'py, PyList>, Bound<'py, PyList>, Bound<'py, PyList>)> {
    let rs = reviews_from_py(reviews)?;
    let s = corpus::stratified_split(&rs, ratios, seed).map_err(value_err)?;
    Ok((
        reviews_to_py(py, &s.train)?,
        reviews_to_py(py, &s.val)?,
        reviews_to_py(py, &s.test)?,
    ))
}

/// Lower-cased word and punctuation tokens.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    tokenizer::tokenize(text)
}

/// Accuracy, per-class precision/recall/F1, macro F1 and confusion matrix.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, truth: Vec<String>, predicted: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    if truth.len() != predicted.len() {
        return Err(PyValueError::new_err("truth and predicted differ in length"));
    }
    let t = truth.iter().map(|s| parse_label(s)).collect::<PyResult<Vec<_>>>()?;
    let p = predicted.iter().map(|s| parse_label(s)).collect::<PyResult<Vec<_>>>()?;
    metrics_to_py(py, &Metrics::from_predictions(&t, &p))
}

/// Finite-difference check of the encoder backward pass on a fixed small
/// 64-bit model. Returns the worst relative error and where it occurred.
#[pyfunction]
#[pyo3(signature = (seed=0, eps=1e-5))]
fn grad_check(py: Python<'_>, seed: u64, eps: f64) -> PyResult<Bound<'_, PyDict>> {
    let r = encoder::run_selfcheck(seed, eps).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("max_rel_error", r.max_rel_error)?;
    d.set_item("worst", r.worst)?;
    d.set_item("coords_checked", r.coords_checked)?;
    d.set_item("passed", r.max_rel_error < encoder::SELFCHECK_TOLERANCE)?;
    Ok(d)
}

/// Word-level vocabulary with `[PAD]`, `[UNK]`, `[CLS]`, `[SEP]` at ids 0..4.
#[pyclass(name = "Vocabulary", module = "bertv_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Most frequent tokens of `texts` with count >= `min_freq`, at most
    /// `max_size` entries including the reserved ones.
    #[staticmethod]
    #[pyo3(signature = (texts, max_size=8000, min_freq=1))]
    fn build(texts: Vec<String>, max_size: usize, min_freq: usize) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: build_vocab(&texts, max_size, min_freq).map_err(value_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn id(&self, token: &str) -> Option<u32> {
        self.inner.id(token)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.inner.token(id).map(str::to_string)
    }

    /// `(ids, mask)` of length `max_len`, starting with `[CLS]`.
    #[pyo3(signature = (text, max_len=64))]
    fn encode(&self, text: &str, max_len: usize) -> PyResult<(Vec<u32>, Vec<u8>)> {
        let s = tokenizer::encode(text, &self.inner, max_len).map_err(value_err)?;
        Ok((s.ids, s.mask))
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        let seq = tokenizer::TokenSequence {
            true_length: ids.len(),
            mask: vec![1; ids.len()],
            ids,
        };
        tokenizer::decode(&seq, &self.inner).map_err(value_err)
    }

    fn words(&self) -> Vec<String> {
        self.inner.words().to_vec()
    }
}

/// TF-IDF features with a softmax-regression classifier.
#[pyclass(name = "TfidfClassifier", module = "bertv_py")]
struct PyTfidfClassifier {
    model: TfidfModel,
    linear: LinearModel,
}

#[pymethods]
impl PyTfidfClassifier {
    #[staticmethod]
    #[pyo3(signature = (reviews, min_df=1, stopwords=false, l2_normalize=true, smooth_idf=false, lr=0.5, epochs=300))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        reviews: &Bound<'_, PyAny>,
        min_df: usize,
        stopwords: bool,
        l2_normalize: bool,
        smooth_idf: bool,
        lr: f64,
        epochs: usize,
    ) -> PyResult<Self> {
        let rs = reviews_from_py(reviews)?;
        let texts: Vec<&str> = rs.iter().map(|r| r.text.as_str()).collect();
        let labels: Vec<Label> = rs.iter().map(|r| r.label).collect();
        let opts = TfidfOptions {
            min_df,
            stopwords,
            l2_normalize,
            smooth_idf,
        };
        let model = tfidf::fit_tfidf(&texts, opts).map_err(value_err)?;
        let feats: Vec<_> = texts.iter().map(|t| tfidf::transform(&model, t)).collect();
        let hp = LinearHyperParams {
            lr,
            epochs,
            ..Default::default()
        };
        let linear = tfidf::train_linear(&feats, &labels, &hp).map_err(value_err)?;
        Ok(PyTfidfClassifier { model, linear })
    }

    fn n_terms(&self) -> usize {
        self.model.n_terms()
    }

    fn idf(&self, term: &str) -> Option<f64> {
        self.model.idf(term)
    }

    /// Non-zero features as `{term: weight}`.
    fn transform(&self, text: &str) -> Vec<(String, f64)> {
        let terms = self.model.terms();
        tfidf::transform(&self.model, text)
            .iter()
            .map(|(i, v)| (terms[i].term.clone(), v))
            .collect()
    }

    fn predict(&self, texts: Vec<String>) -> PyResult<Vec<&'static str>> {
        texts
            .iter()
            .map(|t| {
                tfidf::predict_linear(&self.linear, &tfidf::transform(&self.model, t))
                    .map(Label::name)
                    .map_err(value_err)
            })
            .collect()
    }

    fn evaluate<'py>(&self, py: Python<'py>, reviews: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyDict>> {
        let rs = reviews_from_py(reviews)?;
        let truth: Vec<Label> = rs.iter().map(|r| r.label).collect();
        let pred = rs
            .iter()
            .map(|r| tfidf::predict_linear(&self.linear, &tfidf::transform(&self.model, &r.text)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_err)?;
        metrics_to_py(py, &Metrics::from_predictions(&truth, &pred))
    }
}

fn parse_pooling(s: &str) -> PyResult<Pooling> {
    match s {
        "cls" => Ok(Pooling::Cls),
        "mean" => Ok(Pooling::Mean),
        _ => Err(PyValueError::new_err(format!("pooling must be 'cls' or 'mean', got {s:?}"))),
    }
}

/// Transformer encoder classifier (32-bit weights) with its vocabulary.
#[pyclass(name = "Encoder", module = "bertv_py")]
struct PyEncoder {
    weights: EncoderWeights<f32>,
    vocab: Vocabulary,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (vocab, seed=0, max_len=64, d_model=64, n_heads=4, n_layers=4, d_ff=128, dropout_rate=0.1, head_layers=1, pooling="cls"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab: &PyVocabulary,
        seed: u64,
        max_len: usize,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        d_ff: usize,
        dropout_rate: f32,
        head_layers: usize,
        pooling: &str,
    ) -> PyResult<Self> {
        let config = EncoderConfig {
            vocab_size: vocab.inner.len(),
            max_len,
            d_model,
            n_heads,
            n_layers,
            d_ff,
            dropout_rate,
            head_layers,
            pooling: parse_pooling(pooling)?,
            ..EncoderConfig::default()
        };
        Ok(PyEncoder {
            weights: EncoderWeights::init(config, seed).map_err(value_err)?,
            vocab: vocab.inner.clone(),
        })
    }

    /// Load a checkpoint. Pooling is not stored in the file.
    #[staticmethod]
    #[pyo3(signature = (path, pooling="cls"))]
    fn load(path: PathBuf, pooling: &str) -> PyResult<Self> {
        let (mut weights, _, vocab) = encoder::load_checkpoint(&path).map_err(value_err)?;
        weights.config.pooling = parse_pooling(pooling)?;
        Ok(PyEncoder { weights, vocab })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        encoder::save_checkpoint(&self.weights, &self.vocab, &path).map_err(value_err)
    }

    #[getter]
    fn vocab(&self) -> PyVocabulary {
        PyVocabulary {
            inner: self.vocab.clone(),
        }
    }

    /// `(name, rows, cols)` for every tensor in parameter order.
    fn tensor_shapes(&self) -> Vec<(String, usize, usize)> {
        self.weights
            .params
            .iter()
            .map(|p| {
                let (r, c) = p.shape();
                (p.name.clone(), r, c)
            })
            .collect()
    }

    fn tensor(&self, name: &str) -> PyResult<Vec<f32>> {
        self.weights
            .param(name)
            .map(|p| p.value.as_slice().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("no tensor {name:?}")))
    }

    fn frozen_names(&self) -> Vec<String> {
        self.weights.frozen_names().into_iter().map(str::to_string).collect()
    }

    fn classify(&self, texts: Vec<String>) -> PyResult<Vec<&'static str>> {
        let labels = vtrain::classify(&self.weights, &texts, &self.vocab).map_err(value_err)?;
        Ok(labels.into_iter().map(Label::name).collect())
    }

    fn evaluate<'py>(&self, py: Python<'py>, reviews: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyDict>> {
        let rs = reviews_from_py(reviews)?;
        let m = vtrain::evaluate(&self.weights, &rs, &self.vocab).map_err(value_err)?;
        metrics_to_py(py, &m)
    }

    /// Train on `train`, monitoring `val`. With `validation_schedule` the
    /// learning rate decays on plateaus and the best weights are kept;
    /// otherwise the rate is constant for `max_epochs`. Returns the history.
    #[pyo3(signature = (train, val, validation_schedule=true, freeze_fraction=0.75, max_epochs=50, batch_size=16, lr0=1e-3, decay_factor=0.5, patience=2, max_decays=3, improvement_threshold=1e-4, cooldown=1, rollback_moments=false, monitor="accuracy", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train: &Bound<'py, PyAny>,
        val: &Bound<'py, PyAny>,
        validation_schedule: bool,
        freeze_fraction: f64,
        max_epochs: usize,
        batch_size: usize,
        lr0: f64,
        decay_factor: f64,
        patience: usize,
        max_decays: usize,
        improvement_threshold: f64,
        cooldown: usize,
        rollback_moments: bool,
        monitor: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyList>> {
        let split = DatasetSplit {
            train: reviews_from_py(train)?,
            val: reviews_from_py(val)?,
            test: Vec::new(),
        };
        let monitor = match monitor {
            "accuracy" => Monitor::Accuracy,
            "macro_f1" => Monitor::MacroF1,
            _ => return Err(PyValueError::new_err("monitor must be 'accuracy' or 'macro_f1'")),
        };
        let config = TrainConfig {
            max_epochs,
            batch_size,
            lr0,
            decay_factor,
            patience,
            max_decays,
            improvement_threshold,
            cooldown,
            rollback_moments,
            monitor,
            seed,
        };
        let policy = FreezePolicy::new(freeze_fraction);
        let weights = self.weights.clone();
        let vocab = &self.vocab;
        let result = py
            .detach(|| {
                if validation_schedule {
                    vtrain::train_v(weights, vocab, &split, &config, &policy)
                } else {
                    vtrain::train_fixed(weights, vocab, &split, &config, &policy)
                }
            })
            .map_err(value_err)?;
        self.weights = result.weights;
        history_to_py(py, &result.history)
    }
}

/// Per-hotel counts of classified reviews.
#[pyclass(name = "HotelStore", module = "bertv_py")]
#[derive(Default)]
struct PyHotelStore {
    inner: HotelStore,
}

#[pymethods]
impl PyHotelStore {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    /// Load a store file; a missing file gives an empty store.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyHotelStore {
            inner: HotelStore::load(&path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(value_err)
    }

    /// Add `(hotel_id, label)` pairs.
    fn add(&mut self, classified: Vec<(String, String)>) -> PyResult<()> {
        let pairs = classified
            .into_iter()
            .map(|(h, l)| Ok((h, parse_label(&l)?)))
            .collect::<PyResult<Vec<_>>>()?;
        self.inner.add(&pairs);
        Ok(())
    }

    /// `[n_bad, n_good, n_excellent]` for a hotel.
    fn counts(&self, hotel_id: &str) -> Option<[u64; 3]> {
        self.inner.hotels.get(hotel_id).copied()
    }

    fn __len__(&self) -> usize {
        self.inner.hotels.len()
    }

    /// Hotels with at least `min_reviews` reviews, best first, as dicts
    /// with `hotel_id`, `score`, `n_reviews`, `counts`.
    #[pyo3(signature = (min_reviews=1, weights=(0.0, 1.0, 2.0)))]
    fn rank<'py>(
        &self,
        py: Python<'py>,
        min_reviews: u64,
        weights: (f64, f64, f64),
    ) -> PyResult<Bound<'py, PyList>> {
        let w = class_weights(weights)?;
        let items = recommender::rank_hotels(&self.inner, min_reviews, &w)
            .into_iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("hotel_id", r.hotel_id)?;
                d.set_item("score", r.score)?;
                d.set_item("n_reviews", r.n_reviews)?;
                d.set_item("counts", r.counts)?;
                Ok(d)
            })
            .collect::<PyResult<Vec<_>>>()?;
        PyList::new(py, items)
    }
}

fn class_weights(w: (f64, f64, f64)) -> PyResult<ClassWeights> {
    let w = ClassWeights {
        bad: w.0,
        good: w.1,
        excellent: w.2,
    };
    w.validate().map_err(value_err)?;
    Ok(w)
}

/// Weighted mean class value of `[n_bad, n_good, n_excellent]`.
#[pyfunction]
#[pyo3(signature = (counts, weights=(0.0, 1.0, 2.0)))]
fn hotel_score(counts: [u64; 3], weights: (f64, f64, f64)) -> PyResult<f64> {
    Ok(recommender::score(&counts, &class_weights(weights)?))
}

#[pymodule]
fn bertv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LABELS", Label::ALL.map(Label::name).to_vec())?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(reference_reviews, m)?)?;
    m.add_function(wrap_pyfunction!(load_reviews, m)?)?;
    m.add_function(wrap_pyfunction!(write_reviews, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_split, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(hotel_score, m)?)?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyTfidfClassifier>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyHotelStore>()?;
    Ok(())
}
