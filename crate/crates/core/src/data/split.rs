use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::param("ratios", format!("{parts:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled partition of `0..n`. Validation and test sizes are
/// `floor(ratio * n)`; training takes the remainder.
pub fn split_indices(n: usize, ratios: SplitRatios, seed: u64) -> Result<SplitIndices> {
    ratios.validate()?;
    if n == 0 {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let size = |r: f64| (r * n as f64 + 1e-9).floor() as usize;
    let (n_val, n_test) = (size(ratios.val), size(ratios.test));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n - n_test);
    let val = order.split_off(n - n_test - n_val);
    Ok(SplitIndices { train: order, val, test })
}

pub fn split<T: Clone>(items: &[T], ratios: SplitRatios, seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let idx = split_indices(items.len(), ratios, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&idx.train), pick(&idx.val), pick(&idx.test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sizes(n: usize) -> (usize, usize, usize) {
        let s = split_indices(n, SplitRatios::default(), 0).unwrap();
        (s.train.len(), s.val.len(), s.test.len())
    }

    #[test]
    fn default_ratio_sizes() {
        assert_eq!(sizes(100), (80, 10, 10));
        assert_eq!(sizes(10), (8, 1, 1));
        assert_eq!(sizes(11), (9, 1, 1));
    }

    #[test]
    fn disjoint_cover_for_small_n() {
        for n in 1..=50 {
            let s = split_indices(n, SplitRatios::default(), n as u64).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>(), "n = {n}");
            assert_eq!(s.val.len(), n / 10);
            assert_eq!(s.test.len(), n / 10);
        }
    }

    #[test]
    fn seeded_and_shuffled() {
        let a = split_indices(40, SplitRatios::default(), 1).unwrap();
        assert_eq!(a, split_indices(40, SplitRatios::default(), 1).unwrap());
        assert_ne!(a, split_indices(40, SplitRatios::default(), 2).unwrap());
        assert_ne!(a.train, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn errors() {
        assert!(matches!(split_indices(0, SplitRatios::default(), 0), Err(Error::Data(_))));
        let bad = SplitRatios { train: 0.5, val: 0.1, test: 0.1 };
        assert!(split_indices(10, bad, 0).is_err());
    }

    proptest! {
        #[test]
        fn partitions_cover(n in 3usize..400, seed: u64, val in 0.0f64..0.4, test in 0.0f64..0.4) {
            let r = SplitRatios { train: 1.0 - val - test, val, test };
            let s = split_indices(n, r, seed).unwrap();
            let mut seen = vec![false; n];
            for &i in s.train.iter().chain(&s.val).chain(&s.test) {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
            prop_assert!(seen.iter().all(|&b| b));
            prop_assert!(s.train.len() >= (r.train * n as f64).floor() as usize);
        }
    }
}
