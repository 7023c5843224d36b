//! Permutations, Birkhoff projection, assignment rounding and the relaxed
//! permutation family used by the variational fit.
//!
//! A [`Permutation`] stores `mapping` with the convention that row `i` of
//! the matrix form has its single 1 in column `mapping[i]`, so applying the
//! matrix to a vector gives `(P v)[i] = v[mapping[i]]`.

mod hungarian;
mod relaxed;
mod sinkhorn;

pub use hungarian::{hungarian_round, max_assignment};
pub use relaxed::{
    perm_moments, relaxed_entropy, relaxed_log_density, sample_relaxed, PermMoments,
    RelaxedPermParams, RelaxedPermutation, RelaxedSampler,
};
pub use sinkhorn::{positivity, sinkhorn_knopp, DoublyStochastic, SinkhornTape};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let k = mapping.len();
        let mut seen = vec![false; k];
        for &m in &mapping {
            if m >= k || seen[m] {
                return Err(Error::Input(format!("not a bijection: {mapping:?}")));
            }
            seen[m] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(k: usize) -> Self {
        Self { mapping: (0..k).collect() }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    /// Matrix transpose, which is also the group inverse.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// Matrix product `self * other`.
    pub fn compose(&self, other: &Permutation) -> Self {
        Self {
            mapping: self.mapping.iter().map(|&m| other.mapping[m]).collect(),
        }
    }

    /// `P v`.
    pub fn apply<T: Copy>(&self, v: &[T]) -> Vec<T> {
        self.mapping.iter().map(|&m| v[m]).collect()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let k = self.len();
        let mut m = DMatrix::zeros(k, k);
        for (i, &j) in self.mapping.iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        m
    }

    /// Lexicographic enumeration of all permutations of size `k`.
    pub fn all(k: usize) -> Vec<Permutation> {
        let mut out = Vec::new();
        let mut cur: Vec<usize> = (0..k).collect();
        loop {
            out.push(Permutation { mapping: cur.clone() });
            // next lexicographic permutation
            let Some(i) = (1..k).rev().find(|&i| cur[i - 1] < cur[i]) else {
                break;
            };
            let j = (i..k).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
            cur.swap(i - 1, j);
            cur[i..].reverse();
        }
        out
    }
}

impl std::fmt::Display for Permutation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.mapping.iter().map(|m| m.to_string()).collect();
        write!(f, "{}", parts.join(" "))
    }
}

pub fn hamming(p: &Permutation, q: &Permutation) -> Result<usize> {
    if p.len() != q.len() {
        return Err(Error::Dimension { expected: p.len(), got: q.len() });
    }
    Ok(p.mapping.iter().zip(&q.mapping).filter(|(a, b)| a != b).count())
}

/// Uniformly chooses `target_h` positions and deranges them.
pub fn random_perm_with_hamming<R: Rng + ?Sized>(
    k: usize,
    target_h: usize,
    rng: &mut R,
) -> Result<Permutation> {
    if target_h == 1 || target_h > k {
        return Err(Error::InfeasibleHamming { k, target: target_h });
    }
    let mut mapping: Vec<usize> = (0..k).collect();
    if target_h == 0 {
        return Ok(Permutation { mapping });
    }
    let mut pos: Vec<usize> = (0..k).collect();
    pos.shuffle(rng);
    pos.truncate(target_h);
    pos.sort_unstable();
    let mut img = pos.clone();
    // rejection sampling; acceptance rate tends to 1/e
    loop {
        img.shuffle(rng);
        if img.iter().zip(&pos).all(|(a, b)| a != b) {
            break;
        }
    }
    for (&p, &m) in pos.iter().zip(&img) {
        mapping[p] = m;
    }
    Ok(Permutation { mapping })
}

/// `bdiag(pi, ..., pi)` with `b` copies, as an index mapping of length `K b`.
pub fn block_expand(pi: &Permutation, b: usize) -> Vec<usize> {
    let k = pi.len();
    let mut out = Vec::with_capacity(k * b);
    for blk in 0..b {
        out.extend(pi.mapping.iter().map(|&m| blk * k + m));
    }
    out
}

/// Applies `bdiag(pi)` to a stacked vector of `B` blocks.
pub fn apply_blocks<T: Copy>(pi: &Permutation, v: &[T]) -> Vec<T> {
    let k = pi.len();
    assert!(k > 0 && v.len().is_multiple_of(k), "vector length is not a multiple of K");
    let mut out = Vec::with_capacity(v.len());
    for chunk in v.chunks(k) {
        out.extend(pi.mapping.iter().map(|&m| chunk[m]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hamming_examples() {
        let id = Permutation::identity(4);
        assert_eq!(hamming(&id, &id).unwrap(), 0);
        let t = Permutation::new(vec![1, 0, 2, 3]).unwrap();
        assert_eq!(hamming(&t, &id).unwrap(), 2);
        let c = Permutation::new(vec![1, 2, 0, 3]).unwrap();
        assert_eq!(hamming(&c, &id).unwrap(), 3);
        assert!(hamming(&id, &Permutation::identity(3)).is_err());
    }

    #[test]
    fn rejects_non_bijection() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());
    }

    #[test]
    fn compose_matches_matrix_product() {
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        let q = Permutation::new(vec![1, 0, 2]).unwrap();
        assert_eq!(p.compose(&q).to_matrix(), p.to_matrix() * q.to_matrix());
        assert_eq!(p.inverse().to_matrix(), p.to_matrix().transpose());
        let v = [10.0, 20.0, 30.0];
        let mv = p.to_matrix() * nalgebra::DVector::from_row_slice(&v);
        assert_eq!(p.apply(&v), mv.as_slice());
    }

    #[test]
    fn enumeration_is_lexicographic_and_complete() {
        let all = Permutation::all(4);
        assert_eq!(all.len(), 24);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(Permutation::all(1).len(), 1);
    }

    #[test]
    fn random_hamming_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_perm_with_hamming(5, 0, &mut rng).unwrap().is_identity());
        for k in 2..8 {
            for h in (2..=k).chain([0]) {
                for _ in 0..20 {
                    let p = random_perm_with_hamming(k, h, &mut rng).unwrap();
                    assert_eq!(hamming(&p, &Permutation::identity(k)).unwrap(), h);
                }
            }
        }
        assert!(random_perm_with_hamming(5, 1, &mut rng).is_err());
        assert!(random_perm_with_hamming(5, 6, &mut rng).is_err());
    }

    #[test]
    fn block_expand_examples() {
        let swap = Permutation::new(vec![1, 0]).unwrap();
        assert_eq!(block_expand(&swap, 2), vec![1, 0, 3, 2]);
        assert_eq!(block_expand(&Permutation::identity(3), 4), (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn block_expand_hamming_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for b in 1..=5 {
            let p = random_perm_with_hamming(5, 3, &mut rng).unwrap();
            let full = block_expand(&p, b);
            let d = full.iter().enumerate().filter(|(i, m)| *i != **m).count();
            assert_eq!(d, 3 * b);
            assert!(Permutation::new(full).is_ok());
        }
    }

    #[test]
    fn apply_blocks_agrees_with_expansion() {
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        let v: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let full = block_expand(&p, 3);
        let want: Vec<f64> = full.iter().map(|&m| v[m]).collect();
        assert_eq!(apply_blocks(&p, &v), want);
    }
}
