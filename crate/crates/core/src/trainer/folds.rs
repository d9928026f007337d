use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Splits `case_ids` into `k` disjoint validation folds after a seeded
/// shuffle. Sizes differ by at most one; the larger folds come last.
pub fn make_folds(case_ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::invalid("folds", "need at least two folds"));
    }
    if case_ids.len() < k {
        return Err(Error::invalid("folds", format!("{k} folds requested for {} cases", case_ids.len())));
    }
    let mut ids = case_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut rest = ids.as_slice();
    for i in 0..k {
        let n = base + usize::from(i >= k - extra);
        let (fold, tail) = rest.split_at(n);
        folds.push(fold.to_vec());
        rest = tail;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case_{i:03}")).collect()
    }

    #[test]
    fn spleen_split_sizes() {
        let folds = make_folds(&ids(41), 3, 0).unwrap();
        assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![13, 14, 14]);
        let folds = make_folds(&ids(10), 5, 3).unwrap();
        assert!(folds.iter().all(|f| f.len() == 2));
    }

    #[test]
    fn errors_and_determinism() {
        assert!(make_folds(&ids(2), 3, 0).is_err());
        assert!(make_folds(&ids(5), 1, 0).is_err());
        assert_eq!(make_folds(&ids(20), 4, 9).unwrap(), make_folds(&ids(20), 4, 9).unwrap());
        assert_ne!(make_folds(&ids(20), 4, 9).unwrap(), make_folds(&ids(20), 4, 10).unwrap());
    }

    proptest! {
        #[test]
        fn partition_properties(n in 2usize..60, k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let all = ids(n);
            let folds = make_folds(&all, k, seed).unwrap();
            prop_assert_eq!(folds.len(), k);
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let union: BTreeSet<&String> = folds.iter().flatten().collect();
            prop_assert_eq!(union.len(), n);
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        }
    }
}
