//! Stratified splitting and class weighting.

use super::Label;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Half-up rounding of `n * frac`.
fn rounded_fraction(n: usize, frac: f64) -> usize {
    (n as f64 * frac).round() as usize
}

/// Per-class stratified split: 20% of each class goes to test (rounded
/// half-up), the remaining development pool splits 80/20 into train and
/// validation, again per class. Deterministic per seed.
pub fn stratified_split(labels: &[Label], seed: u64) -> Result<Split> {
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in [Label::Cement, Label::Landcover] {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < 5 {
            return Err(Error::invalid(format!(
                "class {class:?} has only {} samples; need at least 5 to stratify",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = rounded_fraction(idx.len(), 0.2);
        let rest = idx.len() - n_test;
        let n_val = rounded_fraction(rest, 0.2);
        split.test.extend(&idx[..n_test]);
        split.val.extend(&idx[n_test..n_test + n_val]);
        split.train.extend(&idx[n_test + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// How the loss weights the two classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeightMode {
    /// The protocol default [3, 1].
    Fixed,
    /// Inverse-frequency weights normalised so landcover gets 1.0.
    Auto,
}

impl Default for ClassWeightMode {
    fn default() -> Self {
        ClassWeightMode::Fixed
    }
}

pub fn class_weights(n_cement: usize, n_landcover: usize, mode: ClassWeightMode) -> Result<[f64; 2]> {
    if n_cement == 0 || n_landcover == 0 {
        return Err(Error::invalid("class weighting needs both classes present"));
    }
    Ok(match mode {
        ClassWeightMode::Fixed => [3.0, 1.0],
        ClassWeightMode::Auto => [n_landcover as f64 / n_cement as f64, 1.0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(cement: usize, landcover: usize) -> Vec<Label> {
        let mut v = vec![Label::Cement; cement];
        v.extend(vec![Label::Landcover; landcover]);
        v
    }

    #[test]
    fn table_counts_reproduce_the_reported_test_rows() {
        let split = stratified_split(&labels(899, 2807), 42).unwrap();
        let cement_test = split.test.iter().filter(|&&i| i < 899).count();
        let land_test = split.test.len() - cement_test;
        assert_eq!(cement_test, 180);
        assert_eq!(land_test, 561);
    }

    #[test]
    fn ten_plus_ten_splits_to_2_2_6() {
        let split = stratified_split(&labels(10, 10), 7).unwrap();
        for class in 0..2 {
            let range = (class * 10)..((class + 1) * 10);
            assert_eq!(split.test.iter().filter(|&&i| range.contains(&i)).count(), 2);
            assert_eq!(split.val.iter().filter(|&&i| range.contains(&i)).count(), 2);
            assert_eq!(split.train.iter().filter(|&&i| range.contains(&i)).count(), 6);
        }
    }

    #[test]
    fn test_fraction_always_within_one_sample_of_twenty_percent() {
        for n in 5..=5000 {
            let t = rounded_fraction(n, 0.2);
            assert!(
                (t as f64 - n as f64 * 0.2).abs() < 1.0,
                "class size {n} => test {t}"
            );
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let l = labels(37, 91);
        let split = stratified_split(&l, 3).unwrap();
        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), l.len());
        assert_eq!(all, (0..l.len()).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed() {
        let l = labels(20, 80);
        assert_eq!(stratified_split(&l, 5).unwrap(), stratified_split(&l, 5).unwrap());
        assert_ne!(stratified_split(&l, 5).unwrap(), stratified_split(&l, 6).unwrap());
    }

    #[test]
    fn tiny_class_rejected() {
        assert!(stratified_split(&labels(4, 100), 1).is_err());
    }

    #[test]
    fn weight_modes() {
        assert_eq!(class_weights(899, 2807, ClassWeightMode::Fixed).unwrap(), [3.0, 1.0]);
        assert_eq!(class_weights(50, 50, ClassWeightMode::Auto).unwrap(), [1.0, 1.0]);
        assert_eq!(class_weights(25, 100, ClassWeightMode::Auto).unwrap(), [4.0, 1.0]);
        assert!(class_weights(0, 10, ClassWeightMode::Fixed).is_err());
    }
}
