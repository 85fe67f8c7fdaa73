//! Deterministic average-linkage agglomerative clustering, used to seed the
//! factor matrix from groups of variables with similar time courses.

use ndarray::Array2;

use crate::error::{OpfaError, Result};

/// Squared Euclidean distances between the columns of `profiles`.
pub fn column_distances(profiles: &Array2<f64>) -> Array2<f64> {
    let (n, p) = profiles.dim();
    let mut dist = Array2::zeros((p, p));
    for a in 0..p {
        for b in (a + 1)..p {
            let mut d = 0.0;
            for t in 0..n {
                let diff = profiles[(t, a)] - profiles[(t, b)];
                d += diff * diff;
            }
            dist[(a, b)] = d;
            dist[(b, a)] = d;
        }
    }
    dist
}

/// Cuts an average-linkage dendrogram over the given symmetric distance
/// matrix at `k` clusters and returns one label in `0..k` per item. Labels
/// are assigned in order of each cluster's smallest member index, and merge
/// ties always pick the lexicographically smallest pair, so the result is
/// fully deterministic.
pub fn average_linkage(distances: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    let p = distances.nrows();
    if distances.ncols() != p {
        return Err(OpfaError::ShapeMismatch("distance matrix must be square".into()));
    }
    if k == 0 || k > p {
        return Err(OpfaError::InvalidInput(format!(
            "cannot cut {p} items into {k} clusters"
        )));
    }
    if distances.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(OpfaError::InvalidInput(
            "distances must be finite and nonnegative".into(),
        ));
    }

    // active[i]: cluster currently rooted at item i; dist is kept updated with
    // the Lance–Williams rule for average linkage.
    let mut dist = distances.clone();
    let mut size = vec![1usize; p];
    let mut active = vec![true; p];
    let mut parent: Vec<usize> = (0..p).collect();
    let mut n_clusters = p;

    while n_clusters > k {
        let mut best = f64::INFINITY;
        let (mut bi, mut bj) = (usize::MAX, usize::MAX);
        for i in 0..p {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..p {
                if !active[j] {
                    continue;
                }
                if dist[(i, j)] < best {
                    best = dist[(i, j)];
                    bi = i;
                    bj = j;
                }
            }
        }
        // merge bj into bi (bi < bj), so the surviving root is the smallest
        // member index of the merged cluster
        for m in 0..p {
            if !active[m] || m == bi || m == bj {
                continue;
            }
            let merged = (size[bi] as f64 * dist[(bi, m)] + size[bj] as f64 * dist[(bj, m)])
                / (size[bi] + size[bj]) as f64;
            dist[(bi, m)] = merged;
            dist[(m, bi)] = merged;
        }
        size[bi] += size[bj];
        active[bj] = false;
        parent[bj] = bi;
        n_clusters -= 1;
    }

    // path-compress to roots, then number the roots in ascending order
    let root_of = |mut i: usize, parent: &[usize]| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let roots: Vec<usize> = (0..p).map(|i| root_of(i, &parent)).collect();
    let mut label_of_root = vec![usize::MAX; p];
    let mut next = 0;
    for &r in &roots {
        if label_of_root[r] == usize::MAX {
            label_of_root[r] = next;
            next += 1;
        }
    }
    Ok(roots.into_iter().map(|r| label_of_root[r]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn distances_match_manual_values() {
        let profiles = array![[0.0, 3.0, 0.0], [0.0, 4.0, 1.0]];
        let d = column_distances(&profiles);
        assert_eq!(d[(0, 1)], 25.0);
        assert_eq!(d[(0, 2)], 1.0);
        assert_eq!(d[(1, 2)], 18.0);
        assert_eq!(d[(1, 0)], 25.0);
        assert_eq!(d[(0, 0)], 0.0);
    }

    #[test]
    fn separates_two_obvious_groups() {
        // items 0,1,2 near zero; items 3,4 near ten
        let mut dist = Array2::zeros((5, 5));
        let pos = [0.0, 0.1, 0.2, 10.0, 10.1];
        for a in 0..5 {
            for b in 0..5 {
                dist[(a, b)] = (pos[a] - pos[b]) * (pos[a] - pos[b]);
            }
        }
        let labels = average_linkage(&dist, 2).unwrap();
        assert_eq!(labels, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn k_equals_p_is_identity() {
        let dist = column_distances(&array![[0.0, 1.0, 4.0], [0.0, 1.0, 4.0]]);
        let labels = average_linkage(&dist, 3).unwrap();
        assert_eq!(labels, vec![0, 1, 2]);
    }

    #[test]
    fn k_equals_one_groups_everything() {
        let dist = column_distances(&array![[0.0, 5.0, 9.0, 2.0]]);
        let labels = average_linkage(&dist, 1).unwrap();
        assert_eq!(labels, vec![0, 0, 0, 0]);
    }

    /// Average linkage must use mean pairwise distances, not single or
    /// complete linkage: constructed so the linkages disagree on the cut.
    #[test]
    fn uses_mean_pairwise_distance() {
        // three items: 0 and 1 are close (d = 1); item 2 sits at d = 4 from 0
        // and d = 10 from 1. After merging {0,1}, average linkage puts the
        // pair distance to 2 at 7.
        let mut dist = Array2::zeros((3, 3));
        dist[(0, 1)] = 1.0;
        dist[(1, 0)] = 1.0;
        dist[(0, 2)] = 4.0;
        dist[(2, 0)] = 4.0;
        dist[(1, 2)] = 10.0;
        dist[(2, 1)] = 10.0;
        let labels = average_linkage(&dist, 2).unwrap();
        assert_eq!(labels, vec![0, 0, 1]);
    }

    #[test]
    fn ties_break_toward_smallest_pair() {
        // equilateral distances: the first merge must be (0, 1)
        let mut dist = Array2::from_elem((3, 3), 2.0);
        for i in 0..3 {
            dist[(i, i)] = 0.0;
        }
        let labels = average_linkage(&dist, 2).unwrap();
        assert_eq!(labels, vec![0, 0, 1]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let dist = Array2::zeros((3, 4));
        assert!(average_linkage(&dist, 2).is_err());
        let dist = Array2::zeros((3, 3));
        assert!(average_linkage(&dist, 0).is_err());
        assert!(average_linkage(&dist, 4).is_err());
        let mut neg = Array2::zeros((2, 2));
        neg[(0, 1)] = -1.0;
        assert!(average_linkage(&neg, 1).is_err());
    }
}
