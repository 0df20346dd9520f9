//! TF-IDF features and a softmax-regression baseline classifier.
//!
//! `tf` is the raw count of a term in a document and `idf = ln(N / df)`,
//! with `N` the number of fitted documents and `df` the number of documents
//! containing the term. With `smooth_idf` the weight becomes
//! `ln((1 + N) / (1 + df)) + 1`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::tokenizer::tokenize_filtered;

#[derive(Debug, Error)]
pub enum TfidfError {
    #[error("cannot fit on an empty corpus")]
    EmptyCorpus,
    #[error("{features} feature vectors but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("feature dimension {got} does not match model width {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training needs at least one example")]
    NoExamples,
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TfidfOptions {
    pub min_df: usize,
    pub stopwords: bool,
    pub l2_normalize: bool,
    pub smooth_idf: bool,
}

impl Default for TfidfOptions {
    fn default() -> Self {
        TfidfOptions {
            min_df: 1,
            stopwords: false,
            l2_normalize: true,
            smooth_idf: false,
        }
    }
}

/// Sparse row: `(index, value)` pairs with strictly increasing indices and
/// nonzero values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    pub dim: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEntry {
    pub term: String,
    pub idf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfidfModel {
    pub n_docs: usize,
    pub options: TfidfOptions,
    terms: Vec<TermEntry>,
    columns: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct TfidfFile {
    n_docs: usize,
    options: TfidfOptions,
    terms: Vec<TermEntry>,
}

impl TfidfModel {
    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[TermEntry] {
        &self.terms
    }

    pub fn column(&self, term: &str) -> Option<usize> {
        self.columns.get(term).map(|&c| c as usize)
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.column(term).map(|c| self.terms[c].idf)
    }

    fn from_parts(n_docs: usize, options: TfidfOptions, terms: Vec<TermEntry>) -> Self {
        let columns = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.term.clone(), i as u32))
            .collect();
        TfidfModel {
            n_docs,
            options,
            terms,
            columns,
        }
    }

    /// `{n_docs, options, terms: [{term, idf}]}`; the column is the array position.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&TfidfFile {
            n_docs: self.n_docs,
            options: self.options,
            terms: self.terms.clone(),
        })
        .expect("tf-idf model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TfidfError> {
        let f: TfidfFile =
            serde_json::from_str(s).map_err(|e| TfidfError::InvalidModel(e.to_string()))?;
        let unique: BTreeSet<&str> = f.terms.iter().map(|t| t.term.as_str()).collect();
        if unique.len() != f.terms.len() {
            return Err(TfidfError::InvalidModel("duplicate term".into()));
        }
        Ok(TfidfModel::from_parts(f.n_docs, f.options, f.terms))
    }
}

/// Fit document frequencies and idf weights. Columns are assigned in
/// lexicographic term order.
pub fn fit_tfidf<S: AsRef<str>>(
    corpus: &[S],
    options: TfidfOptions,
) -> Result<TfidfModel, TfidfError> {
    if corpus.is_empty() {
        return Err(TfidfError::EmptyCorpus);
    }
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus {
        let distinct: BTreeSet<String> = tokenize_filtered(doc.as_ref(), options.stopwords)
            .into_iter()
            .collect();
        for t in distinct {
            *df.entry(t).or_default() += 1;
        }
    }
    let n = corpus.len() as f64;
    let min_df = options.min_df.max(1);
    let terms = df
        .into_iter()
        .filter(|(_, d)| *d >= min_df)
        .map(|(term, d)| {
            let d = d as f64;
            let idf = if options.smooth_idf {
                ((1.0 + n) / (1.0 + d)).ln() + 1.0
            } else {
                (n / d).ln()
            };
            TermEntry { term, idf }
        })
        .collect();
    Ok(TfidfModel::from_parts(corpus.len(), options, terms))
}

/// `count(t) * idf(t)` per known term, optionally scaled to unit L2 norm.
/// Unknown terms and zero weights are left out.
pub fn transform(model: &TfidfModel, text: &str) -> SparseVector {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for tok in tokenize_filtered(text, model.options.stopwords) {
        if let Some(&c) = model.columns.get(&tok) {
            *counts.entry(c).or_default() += 1;
        }
    }
    let (indices, mut values): (Vec<u32>, Vec<f64>) = counts
        .into_iter()
        .map(|(c, n)| (c, n as f64 * model.terms[c as usize].idf))
        .filter(|(_, v)| *v != 0.0)
        .unzip();
    if model.options.l2_normalize {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
    }
    SparseVector {
        dim: model.n_terms(),
        indices,
        values,
    }
}

/// Softmax regression over sparse features: `logits = W x + b`, `W` is
/// `3 x n_features` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub n_features: usize,
    pub weights: Vec<f64>,
    pub bias: [f64; 3],
}

impl LinearModel {
    pub fn zeros(n_features: usize) -> Self {
        LinearModel {
            n_features,
            weights: vec![0.0; 3 * n_features],
            bias: [0.0; 3],
        }
    }

    pub fn logits(&self, x: &SparseVector) -> Result<[f64; 3], TfidfError> {
        if x.dim != self.n_features {
            return Err(TfidfError::DimensionMismatch {
                expected: self.n_features,
                got: x.dim,
            });
        }
        let mut out = self.bias;
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weights[k * self.n_features..(k + 1) * self.n_features];
            *o += x.iter().map(|(i, v)| row[i] * v).sum::<f64>();
        }
        Ok(out)
    }

    pub fn predict_proba(&self, x: &SparseVector) -> Result<[f64; 3], TfidfError> {
        Ok(softmax3(self.logits(x)?))
    }
}

fn softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Index of the largest value, earliest index on ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearHyperParams {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LinearHyperParams {
    fn default() -> Self {
        LinearHyperParams {
            lr: 0.5,
            epochs: 300,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent on mean softmax cross-entropy from a zero
/// model. Returns the model and the loss measured before each epoch's update.
///
/// Full-batch descent from zeros involves no sampling, so `seed` does not
/// affect the result.
pub fn train_linear_traced(
    features: &[SparseVector],
    labels: &[Label],
    hp: &LinearHyperParams,
) -> Result<(LinearModel, Vec<f64>), TfidfError> {
    if features.len() != labels.len() {
        return Err(TfidfError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(TfidfError::NoExamples);
    }
    let dim = features[0].dim;
    if let Some(bad) = features.iter().find(|f| f.dim != dim) {
        return Err(TfidfError::DimensionMismatch {
            expected: dim,
            got: bad.dim,
        });
    }
    let n = features.len() as f64;
    let mut model = LinearModel::zeros(dim);
    let mut losses = Vec::with_capacity(hp.epochs);
    let mut grad_w = vec![0.0; 3 * dim];
    for _ in 0..hp.epochs {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = [0.0; 3];
        let mut loss = 0.0;
        for (x, y) in features.iter().zip(labels) {
            let p = softmax3(model.logits(x)?);
            loss -= p[y.index()].max(f64::MIN_POSITIVE).ln();
            for k in 0..3 {
                let d = p[k] - f64::from(k == y.index());
                grad_b[k] += d;
                for (i, v) in x.iter() {
                    grad_w[k * dim + i] += d * v;
                }
            }
        }
        losses.push(loss / n);
        let step = hp.lr / n;
        for (w, g) in model.weights.iter_mut().zip(&grad_w) {
            *w -= step * g;
        }
        for k in 0..3 {
            model.bias[k] -= step * grad_b[k];
        }
    }
    Ok((model, losses))
}

pub fn train_linear(
    features: &[SparseVector],
    labels: &[Label],
    hp: &LinearHyperParams,
) -> Result<LinearModel, TfidfError> {
    train_linear_traced(features, labels, hp).map(|(m, _)| m)
}

/// Argmax of the logits, ties resolved toward the smaller label index.
pub fn predict_linear(model: &LinearModel, feature: &SparseVector) -> Result<Label, TfidfError> {
    let z = model.logits(feature)?;
    Ok(Label::ALL[argmax(&z)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw() -> TfidfOptions {
        TfidfOptions {
            l2_normalize: false,
            ..Default::default()
        }
    }

    #[test]
    fn idf_spot_values() {
        let docs = ["apple x", "banana x", "cherry x", "date x"];
        let m = fit_tfidf(&docs, raw()).unwrap();
        assert_eq!(m.idf("x"), Some(0.0));
        assert!((m.idf("apple").unwrap() - 1.386294).abs() < 1e-6);
        assert_eq!(m.idf("apple").unwrap(), 4f64.ln());
    }

    #[test]
    fn min_df_drops_singletons() {
        let docs = ["apple x", "banana x", "cherry x y", "y"];
        let m = fit_tfidf(
            &docs,
            TfidfOptions {
                min_df: 2,
                ..raw()
            },
        )
        .unwrap();
        let kept: Vec<&str> = m.terms().iter().map(|t| t.term.as_str()).collect();
        assert_eq!(kept, ["x", "y"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            fit_tfidf::<&str>(&[], TfidfOptions::default()),
            Err(TfidfError::EmptyCorpus)
        ));
    }

    #[test]
    fn transform_two_doc_example() {
        let docs = ["a b", "a"];
        let m = fit_tfidf(&docs, raw()).unwrap();
        let v = transform(&m, "a a b");
        // a has idf 0 and is dropped from the sparse vector
        assert_eq!(v.indices, [m.column("b").unwrap() as u32]);
        assert_eq!(v.values, [2f64.ln()]);
        let m = fit_tfidf(&docs, TfidfOptions::default()).unwrap();
        let v = transform(&m, "a a b");
        assert_eq!(v.values, [1.0]);
    }

    #[test]
    fn transform_degenerate_docs() {
        let m = fit_tfidf(&["a b", "a b"], TfidfOptions::default()).unwrap();
        assert_eq!(transform(&m, "a b b").nnz(), 0);
        assert_eq!(transform(&m, "zzz qqq").nnz(), 0);
    }

    #[test]
    fn stopword_flag_only_affects_tfidf_tokens() {
        let opts = TfidfOptions {
            stopwords: true,
            ..raw()
        };
        let m = fit_tfidf(&["the room was dirty", "the view"], opts).unwrap();
        assert!(m.column("the").is_none());
        assert!(m.column("dirty").is_some());
    }

    #[test]
    fn json_round_trip() {
        let m = fit_tfidf(&["a b c", "a d"], TfidfOptions::default()).unwrap();
        let back = TfidfModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["terms"][0]["term"], "a");
        assert_eq!(v["n_docs"], 2);
    }

    fn sv(dim: usize, entries: &[(u32, f64)]) -> SparseVector {
        SparseVector {
            dim,
            indices: entries.iter().map(|e| e.0).collect(),
            values: entries.iter().map(|e| e.1).collect(),
        }
    }

    #[test]
    fn separable_toy_set_fits() {
        let xs = vec![
            sv(2, &[(0, 1.0)]),
            sv(2, &[(0, 0.8), (1, 0.1)]),
            sv(2, &[(1, 1.0)]),
            sv(2, &[(0, 0.2), (1, 0.9)]),
        ];
        let ys = [Label::Bad, Label::Bad, Label::Good, Label::Good];
        let hp = LinearHyperParams {
            lr: 0.5,
            epochs: 500,
            seed: 0,
        };
        let m = train_linear(&xs, &ys, &hp).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(predict_linear(&m, x).unwrap(), *y);
        }
    }

    #[test]
    fn zero_epochs_gives_uniform_model() {
        let xs = vec![sv(2, &[(0, 1.0)])];
        let hp = LinearHyperParams {
            epochs: 0,
            ..Default::default()
        };
        let m = train_linear(&xs, &[Label::Good], &hp).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
        let p = m.predict_proba(&xs[0]).unwrap();
        assert!(p.iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(predict_linear(&m, &xs[0]).unwrap(), Label::Bad);
    }

    #[test]
    fn mismatches_are_errors() {
        let xs = vec![sv(2, &[(0, 1.0)])];
        assert!(matches!(
            train_linear(&xs, &[], &LinearHyperParams::default()),
            Err(TfidfError::LengthMismatch { .. })
        ));
        let m = LinearModel::zeros(3);
        assert!(matches!(
            predict_linear(&m, &xs[0]),
            Err(TfidfError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn large_weight_selects_excellent() {
        let mut m = LinearModel::zeros(4);
        m.weights[2 * 4 + 1] = 10.0;
        assert_eq!(
            predict_linear(&m, &sv(4, &[(1, 0.5), (3, 0.2)])).unwrap(),
            Label::Excellent
        );
    }
}
