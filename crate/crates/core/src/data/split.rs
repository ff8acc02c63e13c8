use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Validation share implied by the reference dataset: 66 of 1,386 images.
pub const DEFAULT_VAL_FRACTION: f64 = 66.0 / 1386.0;

/// Seeded random train/validation partition.
///
/// The validation set has `round(val_fraction * N)` items. Both halves keep
/// the relative order of `items`.
pub fn split_dataset<T: Clone>(items: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Empty("split_dataset items"));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let n = items.len();
    let n_val = (val_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (item, v) in items.iter().zip(is_val) {
        if v {
            val.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_items() {
        let items: Vec<u32> = (0..10).collect();
        let (train, val) = split_dataset(&items, 0.2, 1).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        assert!(val.iter().all(|v| !train.contains(v)));
        assert_eq!(split_dataset(&items, 0.2, 1).unwrap(), (train, val));
    }

    #[test]
    fn reference_dataset_counts() {
        let items: Vec<u32> = (0..1386).collect();
        let (train, val) = split_dataset(&items, DEFAULT_VAL_FRACTION, 0).unwrap();
        assert_eq!(val.len(), 66);
        assert_eq!(train.len(), 1320);
    }

    #[test]
    fn errors() {
        assert!(split_dataset::<u8>(&[], 0.2, 0).is_err());
        assert!(split_dataset(&[1, 2], 0.0, 0).is_err());
        assert!(split_dataset(&[1, 2], 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition(n in 1usize..300, frac in 0.01f64..0.99, seed: u64) {
            let items: Vec<usize> = (0..n).collect();
            let (train, val) = split_dataset(&items, frac, seed).unwrap();
            prop_assert_eq!(val.len(), (frac * n as f64).round() as usize);
            let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, items.clone());
            prop_assert_eq!(split_dataset(&items, frac, seed).unwrap(), (train, val));
        }
    }
}
