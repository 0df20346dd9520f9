//! Per-hotel aggregation of predicted review labels, a flat-file store for
//! the counts, and ranking.
//!
//! The store is a CSV file:
//!
//! ```text
//! # bertv hotel store v1
//! hotel_id,n_bad,n_good,n_excellent
//! h1,2,1,1
//! ```

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;

pub const STORE_HEADER_COMMENT: &str = "# bertv hotel store v1";
const COLUMNS: [&str; 4] = ["hotel_id", "n_bad", "n_good", "n_excellent"];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("corrupt hotel store at line {line}: {reason}")]
    CorruptStore { line: usize, reason: String },
    #[error("invalid class weights: {0}")]
    InvalidWeights(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Score contributed by one review of each class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub bad: f64,
    pub good: f64,
    pub excellent: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights {
            bad: 0.0,
            good: 1.0,
            excellent: 2.0,
        }
    }
}

impl ClassWeights {
    pub fn validate(&self) -> Result<(), StoreError> {
        if ![self.bad, self.good, self.excellent].iter().all(|w| w.is_finite()) {
            return Err(StoreError::InvalidWeights("weights must be finite".into()));
        }
        if !(self.bad <= self.good && self.good <= self.excellent) {
            return Err(StoreError::InvalidWeights(
                "weights must be ordered bad <= good <= excellent".into(),
            ));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.bad, self.good, self.excellent]
    }
}

/// Review counts per class, indexed by [`Label::index`].
pub type Counts = [u64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotelRecord {
    pub hotel_id: String,
    pub score: f64,
    pub n_reviews: u64,
    /// `[n_bad, n_good, n_excellent]`
    pub counts: Counts,
}

impl HotelRecord {
    pub fn new(hotel_id: impl Into<String>, counts: Counts, weights: &ClassWeights) -> Self {
        let n_reviews = counts.iter().sum();
        HotelRecord {
            hotel_id: hotel_id.into(),
            score: score(&counts, weights),
            n_reviews,
            counts,
        }
    }
}

/// Weighted mean of the class weights; 0 when there are no reviews.
pub fn score(counts: &Counts, weights: &ClassWeights) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = counts
        .iter()
        .zip(weights.as_array())
        .map(|(&c, w)| c as f64 * w)
        .sum();
    total / n as f64
}

/// Hotel id to class counts, kept sorted by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HotelStore {
    pub hotels: BTreeMap<String, Counts>,
}

impl HotelStore {
    /// A missing file reads as an empty store.
    pub fn load(path: &Path) -> Result<HotelStore, StoreError> {
        match fs::read_to_string(path) {
            Ok(text) => HotelStore::parse(&text),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(HotelStore::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn parse(text: &str) -> Result<HotelStore, StoreError> {
        let corrupt = |line: usize, reason: String| StoreError::CorruptStore { line, reason };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == STORE_HEADER_COMMENT => {}
            Some((n, l)) => return Err(corrupt(n, format!("expected {STORE_HEADER_COMMENT:?}, got {l:?}"))),
            None => return Err(corrupt(1, "empty file".into())),
        }
        match lines.next() {
            Some((_, l)) if l.trim_end() == COLUMNS.join(",") => {}
            Some((n, l)) => return Err(corrupt(n, format!("bad column header {l:?}"))),
            None => return Err(corrupt(2, "missing column header".into())),
        }
        let mut store = HotelStore::default();
        for (n, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_reader(line.as_bytes());
            let rec = match reader.records().next() {
                Some(Ok(r)) => r,
                Some(Err(e)) => return Err(corrupt(n, e.to_string())),
                None => continue,
            };
            if rec.len() != COLUMNS.len() {
                return Err(corrupt(n, format!("expected 4 fields, found {}", rec.len())));
            }
            let id = rec[0].to_string();
            if id.is_empty() {
                return Err(corrupt(n, "empty hotel_id".into()));
            }
            let mut counts = [0u64; 3];
            for (k, c) in counts.iter_mut().enumerate() {
                *c = rec[k + 1]
                    .parse()
                    .map_err(|_| corrupt(n, format!("{} is not a count: {:?}", COLUMNS[k + 1], &rec[k + 1])))?;
            }
            if store.hotels.insert(id.clone(), counts).is_some() {
                return Err(corrupt(n, format!("duplicate hotel_id {id:?}")));
            }
        }
        Ok(store)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(COLUMNS).expect("in-memory write");
        for (id, c) in &self.hotels {
            w.write_record([id.clone(), c[0].to_string(), c[1].to_string(), c[2].to_string()])
                .expect("in-memory write");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
        format!("{STORE_HEADER_COMMENT}\n{body}")
    }

    /// Write to a temporary file in the same directory, then rename over
    /// `path`.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(self.to_csv().as_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
        Ok(())
    }

    pub fn add<S: AsRef<str>>(&mut self, classified: &[(S, Label)]) {
        for (id, label) in classified {
            let counts = self.hotels.entry(id.as_ref().to_string()).or_default();
            counts[label.index()] += 1;
        }
    }

    pub fn records(&self, weights: &ClassWeights) -> Vec<HotelRecord> {
        self.hotels
            .iter()
            .map(|(id, c)| HotelRecord::new(id.clone(), *c, weights))
            .collect()
    }
}

/// Load the store at `path` (absent means empty), add the classified
/// reviews and save it back atomically.
pub fn update_feature_matrix<S: AsRef<str>>(
    path: &Path,
    classified: &[(S, Label)],
) -> Result<HotelStore, StoreError> {
    let mut store = HotelStore::load(path)?;
    store.add(classified);
    store.save(path)?;
    Ok(store)
}

fn rank_order(a: &HotelRecord, b: &HotelRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.n_reviews.cmp(&a.n_reviews))
        .then_with(|| a.hotel_id.cmp(&b.hotel_id))
}

/// Hotels with at least `min_reviews` reviews, best first: score
/// descending, then review count descending, then id ascending.
pub fn rank_hotels(store: &HotelStore, min_reviews: u64, weights: &ClassWeights) -> Vec<HotelRecord> {
    let mut out: Vec<HotelRecord> = store
        .records(weights)
        .into_iter()
        .filter(|r| r.n_reviews >= min_reviews.max(1))
        .collect();
    out.sort_by(rank_order);
    out
}

pub fn ranking_json(ranked: &[HotelRecord]) -> String {
    serde_json::to_string_pretty(ranked).expect("records serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use Label::{Bad, Excellent, Good};

    fn w() -> ClassWeights {
        ClassWeights::default()
    }

    #[test]
    fn hand_scores() {
        assert_eq!(score(&[2, 3, 5], &w()), 1.3);
        assert_eq!(score(&[2, 1, 1], &w()), 0.75);
        assert_eq!(score(&[0, 0, 0], &w()), 0.0);
    }

    #[test]
    fn update_from_empty_and_existing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.csv");
        let s = update_feature_matrix(&path, &[("h1", Excellent)]).unwrap();
        assert_eq!(s.hotels["h1"], [0, 0, 1]);
        assert_eq!(s.records(&w())[0].score, 2.0);

        let mut s = HotelStore::default();
        s.hotels.insert("h1".into(), [1, 1, 1]);
        s.save(&path).unwrap();
        let s = update_feature_matrix(&path, &[("h1", Bad)]).unwrap();
        assert_eq!(s.hotels["h1"], [2, 1, 1]);
        assert_eq!(s.records(&w())[0].score, 0.75);
        assert_eq!(HotelStore::load(&path).unwrap(), s);
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(names.len(), 1, "temporary file left behind");
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let text = format!("{STORE_HEADER_COMMENT}\nhotel_id,n_bad,n_good,n_excellent\nh1,1,2,3\nh2,1,x,3\n");
        match HotelStore::parse(&text) {
            Err(StoreError::CorruptStore { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let short = format!("{STORE_HEADER_COMMENT}\nhotel_id,n_bad,n_good,n_excellent\nh1,1,2\n");
        assert!(matches!(HotelStore::parse(&short), Err(StoreError::CorruptStore { line: 3, .. })));
        assert!(matches!(
            HotelStore::parse("hotel_id,n_bad,n_good,n_excellent\n"),
            Err(StoreError::CorruptStore { line: 1, .. })
        ));
        let neg = format!("{STORE_HEADER_COMMENT}\nhotel_id,n_bad,n_good,n_excellent\nh1,-1,2,3\n");
        assert!(HotelStore::parse(&neg).is_err());
    }

    #[test]
    fn quoted_ids_round_trip() {
        let mut s = HotelStore::default();
        s.add(&[("Hotel \"Sol\", Lisbon", Good)]);
        assert_eq!(HotelStore::parse(&s.to_csv()).unwrap(), s);
    }

    #[test]
    fn ranking_rules() {
        let mut s = HotelStore::default();
        s.hotels.insert("A".into(), [0, 0, 5]);
        s.hotels.insert("B".into(), [5, 0, 0]);
        s.hotels.insert("M".into(), [2, 3, 5]);
        let r = rank_hotels(&s, 1, &w());
        let ids: Vec<_> = r.iter().map(|h| h.hotel_id.as_str()).collect();
        assert_eq!(ids, ["A", "M", "B"]);
        let scores: Vec<f64> = r.iter().map(|h| h.score).collect();
        assert_eq!(scores, [2.0, 1.3, 0.0]);

        let mut t = HotelStore::default();
        t.hotels.insert("z".into(), [0, 2, 0]);
        t.hotels.insert("y".into(), [0, 2, 0]);
        t.hotels.insert("x".into(), [0, 1, 0]);
        let ids: Vec<_> = rank_hotels(&t, 1, &w()).into_iter().map(|h| h.hotel_id).collect();
        assert_eq!(ids, ["y", "z", "x"]);
        assert_eq!(rank_hotels(&t, 2, &w()).len(), 2);
    }

    #[test]
    fn ranking_json_fields() {
        let r = vec![HotelRecord::new("h", [2, 3, 5], &w())];
        let v: serde_json::Value = serde_json::from_str(&ranking_json(&r)).unwrap();
        assert_eq!(v[0]["hotel_id"], "h");
        assert_eq!(v[0]["score"], 1.3);
        assert_eq!(v[0]["n_reviews"], 10);
        assert_eq!(v[0]["counts"], serde_json::json!([2, 3, 5]));
    }

    #[test]
    fn weight_validation() {
        assert!(w().validate().is_ok());
        let bad = ClassWeights { bad: 3.0, ..w() };
        assert!(bad.validate().is_err());
    }

    fn label() -> impl Strategy<Value = Label> {
        prop_oneof![Just(Bad), Just(Good), Just(Excellent)]
    }

    proptest! {
        #[test]
        fn score_bounds(c in proptest::array::uniform3(0u64..50)) {
            let s = score(&c, &w());
            prop_assert!((0.0..=2.0).contains(&s));
            let n: u64 = c.iter().sum();
            if n > 0 {
                prop_assert_eq!(s == 2.0, c[2] == n);
                prop_assert_eq!(s == 0.0, c[0] == n);
            }
        }

        #[test]
        fn aggregation_is_order_independent(
            items in proptest::collection::vec((0u8..4, label()), 0..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let items: Vec<(String, Label)> = items.into_iter().map(|(h, l)| (format!("h{h}"), l)).collect();
            let mut shuffled = items.clone();
            shuffled.shuffle(&mut crate::rng::seeded(seed, 0));
            let mut a = HotelStore::default();
            a.add(&items);
            let mut b = HotelStore::default();
            b.add(&shuffled);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(HotelStore::parse(&a.to_csv()).unwrap(), a.clone());
            let ranked = rank_hotels(&a, 1, &w());
            for pair in ranked.windows(2) {
                prop_assert_eq!(rank_order(&pair[0], &pair[1]), Ordering::Less);
            }
        }
    }
}
