//! Seeded, class-stratified train/test partitioning.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AnnotationSet, Split};
use crate::error::{Error, Result};

/// Tags every instance train or test, stratified by class.
///
/// Within each class the instances are shuffled with `seed` and the first
/// `round(n * train_fraction)` become train. A class too small to place at
/// least one instance on each side goes wholly to train, with a warning.
pub fn split(set: &AnnotationSet, fractions: (f64, f64), seed: u64) -> Result<AnnotationSet> {
    let (train, test) = fractions;
    if !(train >= 0.0 && test >= 0.0) || (train + test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {train} and {test} must be non-negative and sum to 1"
        )));
    }
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, inst) in set.instances.iter().enumerate() {
        by_class.entry(AnnotationSet::class_of(inst)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = vec![Split::Train; set.len()];
    for (class, mut idx) in by_class {
        let n = idx.len();
        let n_train = (n as f64 * train).round() as usize;
        if test > 0.0 && n_train == n && n < 2 {
            warn!("class {class} has {n} instance(s); kept wholly in train");
            continue;
        }
        idx.shuffle(&mut rng);
        for &i in &idx[n_train..] {
            splits[i] = Split::Test;
        }
    }
    let mut out = set.clone();
    out.splits = splits;
    Ok(out)
}
