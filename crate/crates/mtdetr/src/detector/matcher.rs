//! Exact bipartite matching between object queries and targets
//! (Kuhn-Munkres via shortest augmenting paths).

use ndarray::Array2;

use crate::error::{Error, Result};

/// Injective query-target assignment; queries absent from `pairs` are
/// implicitly background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// (query_index, target_index) pairs, one per target.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn target_of_query(&self, q: usize) -> Option<usize> {
        self.pairs.iter().find(|(qi, _)| *qi == q).map(|(_, t)| *t)
    }
}

/// Minimize the total cost of assigning every target (column) to a distinct
/// query (row). `cost` is (n_queries, n_targets) with n_targets <= n_queries.
pub fn hungarian_min_cost(cost: &Array2<f64>) -> Result<MatchResult> {
    let (n_queries, n_targets) = (cost.nrows(), cost.ncols());
    if n_targets == 0 {
        return Ok(MatchResult { pairs: Vec::new() });
    }
    if n_targets > n_queries {
        return Err(Error::Capacity(format!(
            "{n_targets} targets exceed {n_queries} queries"
        )));
    }
    // Shortest-augmenting-path assignment with potentials. Internally rows
    // iterate over targets and columns over queries (targets <= queries).
    let (m, n) = (n_targets, n_queries);
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut assigned_target = vec![0usize; n + 1]; // query column -> target row (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        assigned_target[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_target[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(j - 1, i0 - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_target[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_target[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_target[j0] = assigned_target[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(m);
    for j in 1..=n {
        let t = assigned_target[j];
        if t != 0 {
            pairs.push((j - 1, t - 1));
        }
    }
    pairs.sort_by_key(|&(_, t)| t);
    Ok(MatchResult { pairs })
}

/// Total cost of an assignment, summed in target order (stable for
/// exact-equality comparisons against oracles).
pub fn assignment_cost(cost: &Array2<f64>, result: &MatchResult) -> f64 {
    let mut pairs = result.pairs.clone();
    pairs.sort_by_key(|&(_, t)| t);
    pairs.iter().map(|&(q, t)| cost[(q, t)]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    /// Exhaustive minimum over all injective target->query assignments.
    pub fn brute_force_min_cost(cost: &Array2<f64>) -> (f64, Vec<(usize, usize)>) {
        let (nq, nt) = (cost.nrows(), cost.ncols());
        let mut best = (f64::INFINITY, Vec::new());
        let mut rows: Vec<usize> = (0..nq).collect();
        permute(&mut rows, 0, nt, &mut |assign: &[usize]| {
            let total: f64 = assign.iter().enumerate().map(|(t, &q)| cost[(q, t)]).sum();
            if total < best.0 {
                best = (total, assign.iter().enumerate().map(|(t, &q)| (q, t)).collect());
            }
        });
        best
    }

    fn permute(rows: &mut Vec<usize>, depth: usize, k: usize, f: &mut impl FnMut(&[usize])) {
        if depth == k {
            f(&rows[..k]);
            return;
        }
        for i in depth..rows.len() {
            rows.swap(depth, i);
            permute(rows, depth + 1, k, f);
            rows.swap(depth, i);
        }
    }

    #[test]
    fn single_pair() {
        let cost = array![[3.5]];
        let m = hungarian_min_cost(&cost).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
    }

    #[test]
    fn two_by_two_diagonal() {
        let cost = array![[1.0, 2.0], [2.0, 1.0]];
        let m = hungarian_min_cost(&cost).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&cost, &m), 2.0);
    }

    #[test]
    fn overflow_targets_is_capacity_error() {
        let cost = Array2::zeros((2, 3));
        assert!(matches!(
            hungarian_min_cost(&cost),
            Err(crate::error::Error::Capacity(_))
        ));
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = crate::data::stream_rng(&[11]);
        for trial in 0..100 {
            let nq = 5 + (trial % 2);
            let nt = 1 + rng.gen_range(0..nq);
            let cost = Array2::from_shape_fn((nq, nt), |_| rng.gen_range(-2.0..5.0f64));
            let m = hungarian_min_cost(&cost).unwrap();
            assert_eq!(m.pairs.len(), nt);
            // injectivity
            let qs: std::collections::BTreeSet<_> = m.pairs.iter().map(|p| p.0).collect();
            assert_eq!(qs.len(), nt);
            let (best, _) = brute_force_min_cost(&cost);
            assert_eq!(assignment_cost(&cost, &m), best);
        }
    }
}
