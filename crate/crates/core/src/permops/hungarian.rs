use nalgebra::DMatrix;

use super::Permutation;

/// Minimum-cost assignment with potentials (O(K^3)). Returns the row to
/// column assignment and the row/column duals.
fn solve_min(cost: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.nrows();
    let inf = f64::INFINITY;
    // 1-based arrays, index 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

/// Kuhn augmenting-path search restricted to allowed edges.
fn try_kuhn(
    row: usize,
    allowed: &[Vec<bool>],
    col_free: &[bool],
    seen: &mut [bool],
    match_col: &mut [Option<usize>],
) -> bool {
    for j in 0..allowed.len() {
        if !allowed[row][j] || !col_free[j] || seen[j] {
            continue;
        }
        seen[j] = true;
        let ok = match match_col[j] {
            None => true,
            Some(r) => try_kuhn(r, allowed, col_free, seen, match_col),
        };
        if ok {
            match_col[j] = Some(row);
            return true;
        }
    }
    false
}

fn has_perfect_matching(allowed: &[Vec<bool>], rows_free: &[bool], col_free: &[bool]) -> bool {
    let k = allowed.len();
    let mut match_col = vec![None; k];
    for r in (0..k).filter(|&r| rows_free[r]) {
        let mut seen = vec![false; k];
        if !try_kuhn(r, allowed, col_free, &mut seen, &mut match_col) {
            return false;
        }
    }
    true
}

/// Maximum-weight assignment. Among optimal assignments the
/// lexicographically smallest mapping is returned.
pub fn max_assignment(weights: &DMatrix<f64>) -> (Permutation, f64) {
    let k = weights.nrows();
    assert_eq!(k, weights.ncols(), "assignment matrix must be square");
    if k == 0 {
        return (Permutation::identity(0), 0.0);
    }
    let cost = -weights;
    let (assign, u, v) = solve_min(&cost);
    let scale = weights.amax().max(1.0);
    let eps = 1e-12 * scale * k as f64;
    let allowed: Vec<Vec<bool>> = (0..k)
        .map(|i| (0..k).map(|j| cost[(i, j)] - u[i] - v[j] <= eps).collect())
        .collect();
    let n_tight: usize = allowed.iter().map(|r| r.iter().filter(|&&b| b).count()).sum();
    let mapping = if n_tight == k {
        assign
    } else {
        let mut rows_free = vec![true; k];
        let mut col_free = vec![true; k];
        let mut mapping = vec![0; k];
        for i in 0..k {
            rows_free[i] = false;
            let mut chosen = None;
            for j in 0..k {
                if !allowed[i][j] || !col_free[j] {
                    continue;
                }
                col_free[j] = false;
                if has_perfect_matching(&allowed, &rows_free, &col_free) {
                    chosen = Some(j);
                    break;
                }
                col_free[j] = true;
            }
            // the optimal assignment guarantees some tight column works
            mapping[i] = chosen.unwrap_or(assign[i]);
        }
        mapping
    };
    let value = mapping.iter().enumerate().map(|(i, &j)| weights[(i, j)]).sum();
    (Permutation::new(mapping).expect("assignment is a bijection"), value)
}

/// Nearest permutation to `psi` in the sense of maximal matched weight.
pub fn hungarian_round(psi: &DMatrix<f64>) -> Permutation {
    max_assignment(psi).0
}
