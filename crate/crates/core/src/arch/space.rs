//! Size of the discrete cell search space.

use num_bigint::BigUint;

use crate::error::{Error, Result};

/// Number of distinct cells for `n_nodes` total nodes and `n_ops` candidate
/// operations: `|F|^2 * prod_{k=1}^{N-3} k(k+1)/2`, evaluated exactly.
pub fn search_space_size(n_nodes: usize, n_ops: usize) -> Result<BigUint> {
    if n_nodes < 4 {
        return Err(Error::InvalidArg(format!(
            "search space needs N >= 4 nodes, got {n_nodes}"
        )));
    }
    if n_ops == 0 {
        return Err(Error::InvalidArg("search space needs at least one operation".into()));
    }
    let mut total = BigUint::from(n_ops) * BigUint::from(n_ops);
    for k in 1..=(n_nodes - 3) {
        total *= BigUint::from(k * (k + 1) / 2);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_case_is_ops_squared() {
        assert_eq!(search_space_size(4, 3).unwrap(), BigUint::from(9u32));
    }

    #[test]
    fn known_values() {
        // 64 * (1 * 3 * 6 * 10) = 11,520
        assert_eq!(search_space_size(7, 8).unwrap(), BigUint::from(11_520u32));
        assert_eq!(search_space_size(5, 3).unwrap(), BigUint::from(27u32));
    }

    #[test]
    fn too_few_nodes_rejected() {
        assert!(search_space_size(3, 2).is_err());
    }

    /// Independent oracle: explicitly enumerate, for every intermediate
    /// node, all unordered pairs of distinct predecessors, and multiply the
    /// wiring count by the `|F|^2` operation factor.
    fn enumerate_wirings(n_nodes: usize) -> u64 {
        fn recurse(node: usize, last: usize) -> u64 {
            if node > last {
                return 1;
            }
            let preds = node; // node j has predecessors 0..j
            let mut count = 0u64;
            for a in 0..preds {
                for b in (a + 1)..preds {
                    let _ = (a, b);
                    count += recurse(node + 1, last);
                }
            }
            count
        }
        recurse(2, n_nodes - 2)
    }

    #[test]
    fn matches_exhaustive_enumeration_for_small_cells() {
        for n in 4..=6 {
            for f in 1..=3u64 {
                let expect = BigUint::from(enumerate_wirings(n) * f * f);
                assert_eq!(
                    search_space_size(n, f as usize).unwrap(),
                    expect,
                    "N={n}, |F|={f}"
                );
            }
        }
    }
}
