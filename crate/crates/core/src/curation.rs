//! Curated training set: the full target cohort plus capped,
//! single-pathology background subsets, one supervision bucket per image.
//!
//! Only the train split is ever curated.

use std::collections::HashMap;
use std::io;
use std::path::Path;

use rand::Rng as _;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, LabelVocabulary, LabeledExample, Split};
use crate::numerics::{derive_seed, name_hash, seeded_rng};

pub const DEFAULT_CAP: usize = 4000;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid curation config: {0}")]
    Config(String),
    #[error("target cohort for {0:?} is empty")]
    EmptyTarget(String),
    #[error("curation file: {0}")]
    File(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct CurationConfig {
    pub target: String,
    /// Per-background bucket cap `K`.
    pub cap: usize,
    pub seed: u64,
    /// Background findings; `None` means every non-target finding.
    pub background: Option<Vec<String>>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self { target: "pneumothorax".into(), cap: DEFAULT_CAP, seed: 0, background: None }
    }
}

impl CurationConfig {
    /// Resolves the background set to vocabulary indices in vocabulary order.
    pub fn resolve(&self, vocabulary: &LabelVocabulary) -> Result<(usize, Vec<usize>), CurationError> {
        if self.cap == 0 {
            return Err(CurationError::Config("cap K must be at least 1".into()));
        }
        let t = vocabulary.index_of(&self.target)?;
        let mut background = match &self.background {
            None => (0..vocabulary.len()).filter(|&i| i != t).collect(),
            Some(names) => {
                let mut idx = Vec::with_capacity(names.len());
                for name in names {
                    let b = vocabulary.index_of(name)?;
                    if b == t {
                        return Err(CurationError::Config(format!("target {name:?} listed as background")));
                    }
                    if idx.contains(&b) {
                        return Err(CurationError::Config(format!("background {name:?} listed twice")));
                    }
                    idx.push(b);
                }
                idx
            }
        };
        background.sort_unstable();
        Ok((t, background))
    }

    /// Bucket axis: target first, then backgrounds in vocabulary order.
    pub fn class_axis(&self, vocabulary: &LabelVocabulary) -> Result<Vec<String>, CurationError> {
        let (t, bg) = self.resolve(vocabulary)?;
        Ok(std::iter::once(t).chain(bg).map(|i| vocabulary.name(i).to_string()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct CuratedEntry {
    pub id: String,
    pub bucket: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct BucketStats {
    pub class: String,
    /// Size of the eligible pool before the cap.
    pub available: usize,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct CuratedDataset {
    pub target: String,
    pub classes: Vec<String>,
    pub entries: Vec<CuratedEntry>,
    pub buckets: Vec<BucketStats>,
}

impl CuratedDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Checks the bucket axis against an anchor class axis and adopts it.
    pub fn align_to(&mut self, axis: &[String]) -> Result<(), CurationError> {
        if self.classes.len() > axis.len() {
            return Err(CurationError::Config(format!(
                "curation has {} buckets but the class axis has {}",
                self.classes.len(),
                axis.len()
            )));
        }
        for (i, class) in self.classes.iter().enumerate() {
            if !class.is_empty() && class != &axis[i] {
                return Err(CurationError::Config(format!(
                    "bucket {i} is {class:?} but class axis slot {i} is {:?}",
                    axis[i]
                )));
            }
        }
        self.classes = axis.to_vec();
        let mut buckets = std::mem::take(&mut self.buckets);
        buckets.resize_with(axis.len(), BucketStats::default);
        for (b, class) in buckets.iter_mut().zip(axis) {
            b.class = class.clone();
        }
        self.buckets = buckets;
        self.target = axis[0].clone();
        Ok(())
    }

    pub fn bucket_ids(&self, bucket: usize) -> impl Iterator<Item = &str> + '_ {
        self.entries.iter().filter(move |e| e.bucket == bucket).map(|e| e.id.as_str())
    }
}

fn train_examples(dataset: &Dataset) -> impl Iterator<Item = &LabeledExample> + '_ {
    dataset.in_split(Split::Train)
}

/// Ids of every train image carrying the target finding, whatever else it
/// carries.
pub fn target_cohort(dataset: &Dataset, target: &str) -> Result<Vec<String>, CurationError> {
    let t = dataset.vocabulary().index_of(target)?;
    Ok(train_examples(dataset).filter(|e| e.labels[t]).map(|e| e.id.clone()).collect())
}

fn is_pure_background(ex: &LabeledExample, target: usize, b: usize, background: &[usize]) -> bool {
    ex.labels[b] && !ex.labels[target] && background.iter().all(|&c| c == b || !ex.labels[c])
}

/// Ids of train images whose only finding among `{target} ∪ background` is `b`.
pub fn background_subset(
    dataset: &Dataset,
    target: &str,
    b: &str,
    background: Option<&[String]>,
) -> Result<Vec<String>, CurationError> {
    let vocab = dataset.vocabulary();
    let config = CurationConfig {
        target: target.to_string(),
        background: background.map(<[String]>::to_vec),
        ..CurationConfig::default()
    };
    let (t, bg) = config.resolve(vocab)?;
    let bi = vocab.index_of(b)?;
    if bi == t {
        return Err(CurationError::Config(format!("background {b:?} equals the target")));
    }
    if !bg.contains(&bi) {
        return Err(CurationError::Config(format!("{b:?} is not in the background set")));
    }
    Ok(train_examples(dataset).filter(|e| is_pure_background(e, t, bi, &bg)).map(|e| e.id.clone()).collect())
}

/// Draws `k` of `pool` without replacement via a seeded Fisher-Yates prefix,
/// returned in the pool's original order.
fn sample_prefix(pool: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = seeded_rng(seed);
    let k = k.min(pool.len());
    for i in 0..k {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pool[i]).collect()
}

pub fn curate(dataset: &Dataset, config: &CurationConfig) -> Result<CuratedDataset, CurationError> {
    let vocab = dataset.vocabulary();
    let (t, background) = config.resolve(vocab)?;
    let examples = dataset.examples();

    let target_pool: Vec<usize> =
        (0..examples.len()).filter(|&i| examples[i].split == Split::Train && examples[i].labels[t]).collect();
    if target_pool.is_empty() {
        return Err(CurationError::EmptyTarget(config.target.clone()));
    }

    let mut classes = vec![config.target.clone()];
    let mut buckets =
        vec![BucketStats { class: config.target.clone(), available: target_pool.len(), selected: target_pool.len() }];
    let mut entries: Vec<CuratedEntry> =
        target_pool.iter().map(|&i| CuratedEntry { id: examples[i].id.clone(), bucket: 0 }).collect();

    for (slot, &b) in background.iter().enumerate() {
        let name = vocab.name(b);
        let pool: Vec<usize> = (0..examples.len())
            .filter(|&i| examples[i].split == Split::Train && is_pure_background(&examples[i], t, b, &background))
            .collect();
        let seed = derive_seed(config.seed, name_hash(name));
        let chosen = sample_prefix(&pool, config.cap, seed);
        if pool.is_empty() {
            log::warn!("background finding {name:?} has no single-pathology examples; bucket left empty");
        }
        classes.push(name.to_string());
        buckets.push(BucketStats { class: name.to_string(), available: pool.len(), selected: chosen.len() });
        entries.extend(chosen.into_iter().map(|i| CuratedEntry { id: examples[i].id.clone(), bucket: slot + 1 }));
    }

    Ok(CuratedDataset { target: config.target.clone(), classes, entries, buckets })
}

/// Writes the `(id, bucket, class)` sidecar CSV.
pub fn save_curation_csv(curated: &CuratedDataset, path: &Path) -> Result<(), CurationError> {
    let file_err = |e: csv::Error| CurationError::File(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(file_err)?;
    w.write_record(["id", "bucket", "class"]).map_err(file_err)?;
    for e in &curated.entries {
        w.write_record([e.id.as_str(), &e.bucket.to_string(), curated.classes[e.bucket].as_str()]).map_err(file_err)?;
    }
    w.flush().map_err(|e: io::Error| CurationError::File(format!("{}: {e}", path.display())))
}

/// Reads a sidecar CSV back, rebuilding the class axis and bucket sizes.
/// `available` is unknown from the CSV alone and is set to `selected`.
/// Buckets with no entries are absent from the file, so their class names
/// come back empty until [`CuratedDataset::align_to`] fills them in.
pub fn load_curation_csv(path: &Path) -> Result<CuratedDataset, CurationError> {
    let file_err = |e: csv::Error| CurationError::File(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(file_err)?;
    let header = r.headers().map_err(file_err)?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "bucket", "class"] {
        return Err(CurationError::File(format!("{}: expected header id,bucket,class", path.display())));
    }
    let mut classes: HashMap<usize, String> = HashMap::new();
    let mut entries = Vec::new();
    for record in r.records() {
        let record = record.map_err(file_err)?;
        let bucket: usize =
            record[1].parse().map_err(|_| CurationError::File(format!("bad bucket index {:?}", &record[1])))?;
        let class = record[2].to_string();
        if let Some(prev) = classes.insert(bucket, class.clone()) {
            if prev != class {
                return Err(CurationError::File(format!("bucket {bucket} names both {prev:?} and {class:?}")));
            }
        }
        entries.push(CuratedEntry { id: record[0].to_string(), bucket });
    }
    let n = classes.keys().max().map_or(0, |m| m + 1);
    let classes: Vec<String> = (0..n).map(|i| classes.remove(&i).unwrap_or_default()).collect();
    let target = match classes.first() {
        Some(first) if !first.is_empty() => first.clone(),
        _ => return Err(CurationError::File("curation file has no target bucket".into())),
    };
    let buckets = classes
        .iter()
        .enumerate()
        .map(|(i, class)| {
            let selected = entries.iter().filter(|e| e.bucket == i).count();
            BucketStats { class: class.clone(), available: selected, selected }
        })
        .collect();
    Ok(CuratedDataset { target, classes, entries, buckets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledExample;

    fn dataset(rows: &[(&str, &[u8])], names: &[&str]) -> Dataset {
        let examples = rows
            .iter()
            .map(|(id, labels)| LabeledExample {
                id: id.to_string(),
                labels: labels.iter().map(|&b| b == 1).collect(),
                teacher: vec![1.0],
                feature: None,
                split: Split::Train,
            })
            .collect();
        Dataset::new(LabelVocabulary::new(names.iter().copied()).unwrap(), 1, None, examples).unwrap()
    }

    const NAMES: [&str; 3] = ["pneumothorax", "pleural effusion", "atelectasis"];

    #[test]
    fn target_cohort_ignores_cooccurrence() {
        let ds = dataset(&[("a", &[1, 1, 0]), ("b", &[0, 1, 0]), ("c", &[1, 0, 0])], &NAMES);
        assert_eq!(target_cohort(&ds, "pneumothorax").unwrap(), vec!["a", "c"]);
        let none = dataset(&[("b", &[0, 1, 0])], &NAMES);
        assert!(target_cohort(&none, "pneumothorax").unwrap().is_empty());
        assert!(matches!(target_cohort(&ds, "edema"), Err(CurationError::Data(DataError::UnknownLabel(_)))));
    }

    #[test]
    fn background_requires_single_pathology() {
        let ds = dataset(
            &[("e", &[0, 1, 0]), ("ea", &[0, 1, 1]), ("te", &[1, 1, 0]), ("n", &[0, 0, 0]), ("a", &[0, 0, 1])],
            &NAMES,
        );
        assert_eq!(background_subset(&ds, "pneumothorax", "pleural effusion", None).unwrap(), vec!["e"]);
        assert_eq!(background_subset(&ds, "pneumothorax", "atelectasis", None).unwrap(), vec!["a"]);
        assert!(background_subset(&ds, "pneumothorax", "pneumothorax", None).is_err());
        // restricting B relaxes purity against findings outside it
        let only_eff = vec!["pleural effusion".to_string()];
        assert_eq!(
            background_subset(&ds, "pneumothorax", "pleural effusion", Some(&only_eff)).unwrap(),
            vec!["e", "ea"]
        );
    }

    #[test]
    fn cap_and_min() {
        let mut rows: Vec<(String, Vec<u8>)> = (0..60).map(|i| (format!("e{i}"), vec![0, 1, 0])).collect();
        rows.extend((0..3).map(|i| (format!("a{i}"), vec![0, 0, 1])));
        rows.push(("t".into(), vec![1, 1, 1]));
        let refs: Vec<(&str, &[u8])> = rows.iter().map(|(a, b)| (a.as_str(), b.as_slice())).collect();
        let ds = dataset(&refs, &NAMES);
        let cfg = CurationConfig { cap: 40, ..CurationConfig::default() };
        let cur = curate(&ds, &cfg).unwrap();
        assert_eq!(cur.classes, vec!["pneumothorax", "pleural effusion", "atelectasis"]);
        let sizes: Vec<usize> = cur.buckets.iter().map(|b| b.selected).collect();
        assert_eq!(sizes, vec![1, 40, 3]);
        assert_eq!(cur.buckets[1].available, 60);
        assert_eq!(cur, curate(&ds, &cfg).unwrap());
        let other = curate(&ds, &CurationConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(cur.entries, other.entries);
    }

    #[test]
    fn full_scale_cap() {
        let mut rows: Vec<(String, Vec<u8>)> = (0..6000).map(|i| (format!("e{i}"), vec![0, 1])).collect();
        rows.extend((0..10).map(|i| (format!("t{i}"), vec![1, 0])));
        let refs: Vec<(&str, &[u8])> = rows.iter().map(|(a, b)| (a.as_str(), b.as_slice())).collect();
        let ds = dataset(&refs, &NAMES[..2]);
        let cur = curate(&ds, &CurationConfig::default()).unwrap();
        assert_eq!(cur.buckets[1].selected, 4000);
        assert_eq!(cur.buckets[0].selected, 10);
    }

    #[test]
    fn empty_target_and_bad_config() {
        let ds = dataset(&[("b", &[0, 1, 0])], &NAMES);
        assert!(matches!(curate(&ds, &CurationConfig::default()), Err(CurationError::EmptyTarget(_))));
        let ds = dataset(&[("t", &[1, 0, 0])], &NAMES);
        let bad = CurationConfig { cap: 0, ..CurationConfig::default() };
        assert!(matches!(curate(&ds, &bad), Err(CurationError::Config(_))));
        let bad = CurationConfig { background: Some(vec!["pneumothorax".into()]), ..CurationConfig::default() };
        assert!(matches!(curate(&ds, &bad), Err(CurationError::Config(_))));
        // a background with nothing pure is an empty bucket, not an error
        let cur = curate(&ds, &CurationConfig::default()).unwrap();
        assert_eq!(cur.buckets[1].selected, 0);
    }

    #[test]
    fn test_split_never_curated() {
        let mut ds_rows = vec![];
        for (id, split) in [("tr", Split::Train), ("te", Split::Test)] {
            ds_rows.push(LabeledExample {
                id: id.into(),
                labels: vec![true, false],
                teacher: vec![1.0],
                feature: None,
                split,
            });
        }
        let ds = Dataset::new(LabelVocabulary::new(["t", "b"]).unwrap(), 1, None, ds_rows).unwrap();
        let cfg = CurationConfig { target: "t".into(), ..CurationConfig::default() };
        let cur = curate(&ds, &cfg).unwrap();
        assert_eq!(cur.entries, vec![CuratedEntry { id: "tr".into(), bucket: 0 }]);
    }

    #[test]
    fn sampling_is_uniform() {
        let pool: Vec<usize> = (0..10).collect();
        let mut hits = [0usize; 10];
        for seed in 0..1000u64 {
            for i in sample_prefix(&pool, 5, derive_seed(seed, name_hash("b"))) {
                hits[i] += 1;
            }
        }
        for h in hits {
            let freq = h as f64 / 1000.0;
            assert!((0.4..=0.6).contains(&freq), "inclusion frequency {freq}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let ds = dataset(&[("a", &[1, 1, 0]), ("b", &[0, 1, 0]), ("c", &[0, 0, 1]), ("d,x", &[0, 0, 1])], &NAMES);
        let cur = curate(&ds, &CurationConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curation.csv");
        save_curation_csv(&cur, &path).unwrap();
        let mut back = load_curation_csv(&path).unwrap();
        assert_eq!(back.entries, cur.entries);
        assert_eq!(back.classes, cur.classes);
        assert_eq!(back.target, "pneumothorax");
        back.align_to(&cur.classes).unwrap();
        let wrong: Vec<String> = ["pneumothorax", "atelectasis", "pleural effusion"].map(String::from).to_vec();
        assert!(back.align_to(&wrong).is_err());
    }
}
