//! Deterministic label-stratified splitting.

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

use super::dataset::{DatasetSplit, SplitId};

/// Index lists for (train, val, test) under a seeded stratified shuffle.
/// `fractions` are the train and val shares; the remainder is the test set.
pub fn split_indices(
    ds: &DatasetSplit,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (ft, fv) = fractions;
    if !(0.0..=1.0).contains(&ft) || !(0.0..=1.0).contains(&fv) {
        return Err(Error::InvalidArg(format!("fractions out of range: ({ft}, {fv})")));
    }
    if ft + fv > 1.0 + 1e-9 {
        return Err(Error::InvalidArg(format!(
            "fractions sum to {} > 1",
            ft + fv
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for class in 0..ds.n_classes {
        let mut idx: Vec<usize> = (0..ds.n).filter(|&i| ds.label(i) == class).collect();
        let mut rng = Rng::derive(seed, &[stream::SPLIT, class as u64]);
        rng.shuffle(&mut idx);
        let n_c = idx.len();
        let n_train = ((ft * n_c as f64) + 0.5).floor() as usize;
        let n_val = (((fv * n_c as f64) + 0.5).floor() as usize).min(n_c - n_train.min(n_c));
        let n_train = n_train.min(n_c);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    // stable cross-class order
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}

fn take(ds: &DatasetSplit, indices: &[usize], split_id: SplitId, seed: u64) -> DatasetSplit {
    let s = ds.image_size();
    let mut images = Vec::with_capacity(indices.len() * s);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        images.extend_from_slice(ds.image(i));
        labels.push(ds.labels[i]);
    }
    DatasetSplit {
        images,
        n: indices.len(),
        c: ds.c,
        h: ds.h,
        w: ds.w,
        n_classes: ds.n_classes,
        labels,
        split_id,
        provenance: format!("{}+split({split_id},seed={seed})", ds.provenance),
    }
}

/// Splits a dataset into disjoint, label-stratified train / val / test
/// parts. The permutation is a pure function of the seed.
pub fn split(
    ds: &DatasetSplit,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit, DatasetSplit)> {
    ds.validate()?;
    let (it, iv, ix) = split_indices(ds, fractions, seed)?;
    Ok((
        take(ds, &it, SplitId::Train, seed),
        take(ds, &iv, SplitId::Val, seed),
        take(ds, &ix, SplitId::Test, seed),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::color_vs_shape;

    fn hundred() -> DatasetSplit {
        // 100 images, 2 balanced classes
        color_vs_shape(100, 8, 1)
    }

    #[test]
    fn half_half_split_is_balanced_per_class() {
        let ds = hundred();
        let (train, val, test) = split(&ds, (0.5, 0.5), 9).unwrap();
        assert_eq!(train.n, 50);
        assert_eq!(val.n, 50);
        assert_eq!(test.n, 0);
        for part in [&train, &val] {
            let c0 = part.labels.iter().filter(|&&l| l == 0).count();
            assert_eq!(c0, 25, "stratification broken");
        }
    }

    #[test]
    fn same_seed_identical_indices() {
        let ds = hundred();
        let a = split_indices(&ds, (0.6, 0.2), 4).unwrap();
        let b = split_indices(&ds, (0.6, 0.2), 4).unwrap();
        assert_eq!(a, b);
        let c = split_indices(&ds, (0.6, 0.2), 5).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let ds = hundred();
        for seed in 0..100 {
            let (t, v, x) = split_indices(&ds, (0.5, 0.3), seed).unwrap();
            let mut all: Vec<usize> = t.iter().chain(&v).chain(&x).copied().collect();
            all.sort_unstable();
            // no duplicates across splits and full coverage
            assert_eq!(all, (0..ds.n).collect::<Vec<_>>(), "seed {seed}");
        }
    }

    #[test]
    fn fractions_above_one_rejected() {
        let ds = hundred();
        assert!(split(&ds, (0.7, 0.5), 1).is_err());
    }
}
