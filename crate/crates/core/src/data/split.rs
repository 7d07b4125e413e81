//! Train/test partitioning. Generative trainers accept only a [`TrainSet`],
//! so test examples cannot reach them.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub trait ImageId {
    fn image_id(&self) -> &str;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet<T>(Vec<T>);

#[derive(Clone, Debug, PartialEq)]
pub struct TestSet<T>(Vec<T>);

impl<T> TrainSet<T> {
    /// Designates a whole corpus as training data, e.g. a separately curated
    /// subset that never overlaps an evaluation split.
    pub fn from_training_corpus(items: Vec<T>) -> Self {
        Self(items)
    }

    pub fn items(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> TestSet<T> {
    pub fn items(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitRule {
    /// Fraction of distinct image ids assigned to training.
    Ratio(f64),
    /// Exactly these image ids form the test partition.
    Manifest(Vec<String>),
}

/// Reads a newline-delimited list of image ids, skipping blank lines.
pub fn read_manifest<R: BufRead>(input: R) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<manifest>", e))?;
        let id = line.trim();
        if !id.is_empty() {
            ids.push(id.to_string());
        }
    }
    Ok(ids)
}

/// Partitions `records` by image id. Records sharing an id always land in the
/// same partition and keep their input order.
pub fn split_train_test<T: ImageId>(
    records: Vec<T>,
    rule: &SplitRule,
    seed: u64,
) -> Result<(TrainSet<T>, TestSet<T>)> {
    let mut ids: Vec<String> = Vec::new();
    let mut seen = HashMap::new();
    for r in &records {
        if !seen.contains_key(r.image_id()) {
            seen.insert(r.image_id().to_string(), ids.len());
            ids.push(r.image_id().to_string());
        }
    }
    let test_ids: BTreeSet<String> = match rule {
        SplitRule::Ratio(ratio) => {
            if !(0.0..=1.0).contains(ratio) {
                return Err(Error::Config(format!("train ratio {ratio} outside [0, 1]")));
            }
            let mut order = ids.clone();
            Rng::seed_from_u64(seed).shuffle(&mut order);
            let n_train = (ratio * ids.len() as f64).round() as usize;
            order.into_iter().skip(n_train).collect()
        }
        SplitRule::Manifest(list) => {
            let mut set = BTreeSet::new();
            for id in list {
                if !seen.contains_key(id) {
                    return Err(Error::data("split manifest", format!("unknown image id {id:?}")));
                }
                if !set.insert(id.clone()) {
                    return Err(Error::data("split manifest", format!("image id {id:?} listed twice")));
                }
            }
            set
        }
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for r in records {
        if test_ids.contains(r.image_id()) {
            test.push(r);
        } else {
            train.push(r);
        }
    }
    let train_ids: BTreeSet<&str> = train.iter().map(ImageId::image_id).collect();
    if let Some(id) = test.iter().map(ImageId::image_id).find(|id| train_ids.contains(id)) {
        return Err(Error::data("split", format!("image id {id:?} in both partitions")));
    }
    Ok((TrainSet(train), TestSet(test)))
}
