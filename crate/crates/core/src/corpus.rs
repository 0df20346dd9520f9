//! Labelled review datasets: loading, writing, stratified splitting and a
//! synthetic generator.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("invalid label {value:?} at line {line}")]
    InvalidLabel { value: String, line: u64 },
    #[error("empty review text at line {line}")]
    EmptyText { line: u64 },
    #[error("duplicate review id {id:?} at line {line}")]
    DuplicateId { id: String, line: u64 },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("class {0} has fewer than 3 reviews")]
    ClassTooSmall(Label),
    #[error("unknown data format {0:?} (expected csv or jsonl)")]
    UnknownFormat(String),
}

/// Review sentiment class. The integer encoding is `Bad=0, Good=1, Excellent=2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Bad,
    Good,
    Excellent,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Bad, Label::Good, Label::Excellent];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Bad => "Bad",
            Label::Good => "Good",
            Label::Excellent => "Excellent",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseLabelError(pub String);

impl FromStr for Label {
    type Err = ParseLabelError;

    /// Case-insensitive, surrounding whitespace ignored. Nothing else is accepted.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bad" => Ok(Label::Bad),
            "good" => Ok(Label::Good),
            "excellent" => Ok(Label::Excellent),
            _ => Err(ParseLabelError(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledReview {
    pub id: String,
    pub hotel_id: Option<String>,
    pub text: String,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledReview>,
    pub val: Vec<LabeledReview>,
    pub test: Vec<LabeledReview>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guess from the file extension (`.csv`, `.jsonl`/`.json`).
    pub fn from_path(path: &Path) -> Result<Format, CorpusError> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        ext.parse()
    }
}

impl FromStr for Format {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "json" | "ndjson" => Ok(Format::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

const CSV_HEADER: [&str; 4] = ["id", "hotel_id", "label", "text"];

#[derive(Deserialize)]
struct JsonRecord {
    id: String,
    hotel_id: Option<String>,
    label: String,
    text: String,
}

#[derive(Serialize)]
struct JsonRecordOut<'a> {
    id: &'a str,
    hotel_id: Option<&'a str>,
    label: &'a str,
    text: &'a str,
}

fn make_review(
    id: String,
    hotel_id: Option<String>,
    label: &str,
    text: String,
    line: u64,
) -> Result<LabeledReview, CorpusError> {
    let label = label.parse::<Label>().map_err(|_| CorpusError::InvalidLabel {
        value: label.to_string(),
        line,
    })?;
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyText { line });
    }
    let hotel_id = hotel_id.filter(|h| !h.is_empty());
    Ok(LabeledReview {
        id,
        hotel_id,
        text,
        label,
    })
}

/// Load reviews from a CSV (`id,hotel_id,label,text` header) or JSONL file.
pub fn load_reviews(path: &Path, format: Format) -> Result<Vec<LabeledReview>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.display().to_string()));
    }
    let reviews = match format {
        Format::Csv => load_csv(path)?,
        Format::Jsonl => load_jsonl(path)?,
    };
    Ok(reviews)
}

fn check_unique(seen: &mut HashSet<String>, id: &str, line: u64) -> Result<(), CorpusError> {
    if !seen.insert(id.to_string()) {
        return Err(CorpusError::DuplicateId {
            id: id.to_string(),
            line,
        });
    }
    Ok(())
}

fn load_csv(path: &Path) -> Result<Vec<LabeledReview>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_error(e, 1))?;
    let header = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    if header.iter().map(str::trim).ne(CSV_HEADER) {
        return Err(CorpusError::MalformedRow {
            line: 1,
            reason: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or_default().to_string();
        let id = field(0);
        if id.is_empty() {
            return Err(CorpusError::MalformedRow {
                line,
                reason: "empty id".into(),
            });
        }
        check_unique(&mut seen, &id, line)?;
        let hotel = field(1);
        out.push(make_review(id, Some(hotel), &field(2), field(3), line)?);
    }
    Ok(out)
}

fn csv_error(err: csv::Error, fallback_line: u64) -> CorpusError {
    let line = err.position().map(|p| p.line()).unwrap_or(fallback_line);
    match err.into_kind() {
        csv::ErrorKind::Io(io) => CorpusError::Io(io),
        kind => CorpusError::MalformedRow {
            line,
            reason: format!("{kind:?}"),
        },
    }
}

fn load_jsonl(path: &Path) -> Result<Vec<LabeledReview>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRow {
                line: line_no,
                reason: e.to_string(),
            })?;
        check_unique(&mut seen, &rec.id, line_no)?;
        out.push(make_review(rec.id, rec.hotel_id, &rec.label, rec.text, line_no)?);
    }
    Ok(out)
}

/// Write reviews in the same schema `load_reviews` reads.
pub fn write_reviews(
    path: &Path,
    format: Format,
    reviews: &[LabeledReview],
) -> Result<(), CorpusError> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(e, 0))?;
            w.write_record(CSV_HEADER).map_err(|e| csv_error(e, 0))?;
            for r in reviews {
                w.write_record([
                    r.id.as_str(),
                    r.hotel_id.as_deref().unwrap_or(""),
                    r.label.name(),
                    r.text.as_str(),
                ])
                .map_err(|e| csv_error(e, 0))?;
            }
            w.flush()?;
        }
        Format::Jsonl => {
            let mut w = BufWriter::new(File::create(path)?);
            for r in reviews {
                let rec = JsonRecordOut {
                    id: &r.id,
                    hotel_id: r.hotel_id.as_deref(),
                    label: r.label.name(),
                    text: &r.text,
                };
                serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// The three reference reviews (one per class) shipped with the crate.
pub fn reference_reviews() -> Vec<LabeledReview> {
    const RAW: &str = include_str!("../fixtures/reference_reviews.jsonl");
    RAW.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let rec: JsonRecord = serde_json::from_str(l).expect("bundled fixture is valid");
            make_review(rec.id, rec.hotel_id, &rec.label, rec.text, i as u64 + 1)
                .expect("bundled fixture is valid")
        })
        .collect()
}

/// Largest-remainder allocation of `n` items over `ratios`. Ties go to the
/// earlier bucket.
fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|x| x.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Per-class shuffled split into train/val/test.
///
/// Each class is shuffled independently and cut by largest-remainder counts,
/// so every split holds within one review of its exact share of each class.
/// Within a split the input order is preserved.
pub fn stratified_split(
    reviews: &[LabeledReview],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| !(x > 0.0) || !x.is_finite()) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(CorpusError::BadRatios(ratios));
    }
    let mut rng = rng::seeded(seed, rng::STREAM_SPLIT);
    let mut assignment = vec![0u8; reviews.len()];
    for label in Label::ALL {
        let mut members: Vec<usize> = reviews
            .iter()
            .enumerate()
            .filter(|(_, rv)| rv.label == label)
            .map(|(i, _)| i)
            .collect();
        if members.len() < 3 {
            return Err(CorpusError::ClassTooSmall(label));
        }
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), r);
        let mut pos = 0;
        for (bucket, &c) in counts.iter().enumerate() {
            for &i in &members[pos..pos + c] {
                assignment[i] = bucket as u8;
            }
            pos += c;
        }
    }
    let mut split = DatasetSplit::default();
    for (rv, &bucket) in reviews.iter().zip(&assignment) {
        match bucket {
            0 => split.train.push(rv.clone()),
            1 => split.val.push(rv.clone()),
            _ => split.test.push(rv.clone()),
        }
    }
    Ok(split)
}

/// Class lexicons for the synthetic generator. Pairwise disjoint, and
/// disjoint from [`NEUTRAL_NOUNS`] and the template glue words.
pub const BAD_WORDS: &[&str] = &[
    "disappointed", "cramped", "tiny", "dirty", "rude", "noisy", "terrible", "awful",
    "broken", "smelly", "uncomfortable", "overpriced", "unhelpful", "stained", "horrible",
    "disappointing",
];
pub const GOOD_WORDS: &[&str] = &[
    "enjoyed", "pleased", "nice", "friendly", "decent", "comfortable", "pleasant", "clean",
    "helpful", "fine", "good", "solid", "convenient", "satisfied", "tidy", "reasonable",
];
pub const EXCELLENT_WORDS: &[&str] = &[
    "wow", "charm", "loved", "beautiful", "amazing", "stunning", "superb", "perfect",
    "fantastic", "outstanding", "gorgeous", "wonderful", "exceptional", "magnificent",
    "delightful", "incredible",
];
pub const NEUTRAL_NOUNS: &[&str] = &[
    "room", "staff", "breakfast", "location", "bed", "view", "lobby", "pool", "service",
    "bathroom", "hotel", "stay", "desk", "decor", "balcony", "restaurant",
];

pub fn lexicon(label: Label) -> &'static [&'static str] {
    match label {
        Label::Bad => BAD_WORDS,
        Label::Good => GOOD_WORDS,
        Label::Excellent => EXCELLENT_WORDS,
    }
}

// `{w}` is a class word, `{n}` a neutral noun.
const TEMPLATES: &[&str] = &[
    "the {n} was {w}",
    "{w} {n} and {w} {n}",
    "we found the {n} {w}",
    "our stay was {w}",
    "the {n} felt {w} and the {n} was {w}",
    "honestly the {n} is {w}",
    "{w} {w} {n}",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthOptions {
    pub n_per_class: usize,
    pub seed: u64,
    pub n_hotels: usize,
}

impl SynthOptions {
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        SynthOptions {
            n_per_class,
            seed,
            n_hotels: 5,
        }
    }
}

/// Template-generated reviews, `n_per_class` for each label, classes
/// interleaved (`Bad, Good, Excellent, Bad, ...`) and hotels assigned round-robin.
pub fn synth_corpus(n_per_class: usize, seed: u64) -> Vec<LabeledReview> {
    synth_corpus_with(SynthOptions::new(n_per_class, seed))
}

pub fn synth_corpus_with(opts: SynthOptions) -> Vec<LabeledReview> {
    let mut rng = rng::seeded(opts.seed, rng::STREAM_SYNTH);
    let n_hotels = opts.n_hotels.max(1);
    let total = opts.n_per_class * Label::COUNT;
    (0..total)
        .map(|i| {
            let label = Label::ALL[i % Label::COUNT];
            LabeledReview {
                id: format!("syn-{:05}", i + 1),
                hotel_id: Some(format!("hotel-{}", i % n_hotels + 1)),
                text: synth_text(label, &mut rng),
                label,
            }
        })
        .collect()
}

fn synth_text(label: Label, rng: &mut rng::Rng) -> String {
    let words = lexicon(label);
    let end = if label == Label::Excellent { "!" } else { "." };
    let n_sentences = rng.random_range(2..=4);
    let mut sentences = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let template = TEMPLATES.choose(rng).expect("templates non-empty");
        let mut s = String::new();
        let mut rest = *template;
        while let Some(pos) = rest.find('{') {
            s.push_str(&rest[..pos]);
            let slot = &rest[pos..pos + 3];
            let pool = if slot == "{w}" { words } else { NEUTRAL_NOUNS };
            s.push_str(pool.choose(rng).expect("lexicon non-empty"));
            rest = &rest[pos + 3..];
        }
        s.push_str(rest);
        s.push_str(end);
        if label == Label::Excellent && rng.random_bool(0.5) {
            s.push('!');
        }
        let mut chars = s.chars();
        let first = chars.next().map(|c| c.to_ascii_uppercase()).unwrap_or(' ');
        sentences.push(std::iter::once(first).chain(chars).collect::<String>());
    }
    sentences.join(" ")
}
