//! Greedy k-center (farthest-first) prototype selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GcrError, Result};
use crate::matrix::{sq_dist, Matrix};
use crate::rng::SplitMix64;

/// Rows per rayon task in the distance update.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoresetConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for CoresetConfig {
    fn default() -> Self {
        CoresetConfig { k: 196, seed: 0 }
    }
}

impl CoresetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(GcrError::InvalidConfig("K must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coreset {
    /// Selected rows, in selection order.
    pub indices: Vec<usize>,
    /// Final squared distance of every row to its nearest selected row.
    pub min_dists: Vec<f64>,
}

impl Coreset {
    /// Largest nearest-selected distance over all rows.
    pub fn covering_radius(&self) -> f64 {
        self.min_dists.iter().copied().fold(0.0, f64::max)
    }
}

/// Lowest index among the maximal values, or `None` for an empty slice.
pub fn duplicate_aware_tiebreak(candidates: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in candidates.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// The seeded first pick: uniform over row indices.
pub fn first_pick(n: usize, seed: u64) -> usize {
    SplitMix64::new(seed).below(n)
}

/// Farthest-first traversal. Each step picks the unselected row with the
/// largest squared distance to its nearest already-selected row, breaking
/// ties by lowest index. `K > n` is clamped to `n`.
pub fn select_coreset(features: &Matrix, config: &CoresetConfig) -> Result<Coreset> {
    config.validate()?;
    let n = features.rows();
    if n == 0 {
        return Err(GcrError::EmptyInput("coreset input has no rows".into()));
    }
    if features.cols() == 0 {
        return Err(GcrError::EmptyInput("coreset input has zero width".into()));
    }
    let k = if config.k > n {
        log::warn!("requested K={} exceeds {} candidate features; clamping", config.k, n);
        n
    } else {
        config.k
    };

    let mut min_dists = vec![f64::INFINITY; n];
    let mut selected = vec![false; n];
    let mut indices = Vec::with_capacity(k);
    let mut current = first_pick(n, config.seed);

    loop {
        indices.push(current);
        selected[current] = true;
        let center = features.row(current);

        // Update the running nearest-selected distance and find, per chunk,
        // the farthest unselected row. Chunks are merged in order so the
        // result does not depend on scheduling.
        let chunk_best: Vec<Option<(usize, f64)>> = min_dists
            .par_chunks_mut(CHUNK)
            .zip(selected.par_chunks(CHUNK))
            .enumerate()
            .map(|(c, (dists, taken))| {
                let base = c * CHUNK;
                let mut best: Option<(usize, f64)> = None;
                for (j, (d, &t)) in dists.iter_mut().zip(taken).enumerate() {
                    let i = base + j;
                    let nd = sq_dist(features.row(i), center);
                    if nd < *d {
                        *d = nd;
                    }
                    if t {
                        continue;
                    }
                    match best {
                        Some((_, b)) if *d <= b => {}
                        _ => best = Some((i, *d)),
                    }
                }
                best
            })
            .collect();

        if indices.len() == k {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for cand in chunk_best.into_iter().flatten() {
            match best {
                Some((_, b)) if cand.1 <= b => {}
                _ => best = Some(cand),
            }
        }
        current = best.expect("unselected rows remain while |S| < K <= n").0;
    }

    for &i in &indices {
        min_dists[i] = 0.0;
    }
    Ok(Coreset { indices, min_dists })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rescans every pairwise distance at every step.
    fn brute_force(features: &Matrix, k: usize, seed: u64) -> Vec<usize> {
        let n = features.rows();
        let k = k.min(n);
        let mut sel = vec![first_pick(n, seed)];
        while sel.len() < k {
            let mut best: Option<(usize, f64)> = None;
            for q in 0..n {
                if sel.contains(&q) {
                    continue;
                }
                let m = sel
                    .iter()
                    .map(|&s| {
                        features
                            .row(q)
                            .iter()
                            .zip(features.row(s))
                            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min);
                if best.map_or(true, |(_, b)| m > b) {
                    best = Some((q, m));
                }
            }
            sel.push(best.unwrap().0);
        }
        sel
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        let data = (0..n * d).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        Matrix::new(n, d, data).unwrap()
    }

    #[test]
    fn single_candidate() {
        let m = Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let c = select_coreset(&m, &CoresetConfig { k: 5, seed: 1 }).unwrap();
        assert_eq!(c.indices, vec![0]);
        assert_eq!(c.min_dists, vec![0.0]);
    }

    #[test]
    fn line_example_picks_farthest() {
        let m = Matrix::new(3, 1, vec![0.0, 1.0, 10.0]).unwrap();
        let seed = (0u64..).find(|&s| first_pick(3, s) == 0).unwrap();
        let c = select_coreset(&m, &CoresetConfig { k: 2, seed }).unwrap();
        assert_eq!(c.indices, vec![0, 2]);
        assert_eq!(c.min_dists, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn tiebreak_lowest_index() {
        assert_eq!(duplicate_aware_tiebreak(&[3.0, 5.0, 5.0]), Some(1));
        assert_eq!(duplicate_aware_tiebreak(&[7.0]), Some(0));
        assert_eq!(duplicate_aware_tiebreak(&[2.0; 4]), Some(0));
        assert_eq!(duplicate_aware_tiebreak(&[]), None);
    }

    #[test]
    fn errors_and_clamping() {
        let empty = Matrix::new(0, 2, vec![]).unwrap();
        assert!(matches!(
            select_coreset(&empty, &CoresetConfig { k: 1, seed: 0 }),
            Err(GcrError::EmptyInput(_))
        ));
        let m = Matrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(select_coreset(&m, &CoresetConfig { k: 0, seed: 0 }).is_err());
        let c = select_coreset(&m, &CoresetConfig { k: 9, seed: 0 }).unwrap();
        assert_eq!(c.indices.len(), 2);
    }

    #[test]
    fn duplicates_yield_distinct_indices() {
        let m = Matrix::new(4, 2, vec![1.0; 8]).unwrap();
        let c = select_coreset(&m, &CoresetConfig { k: 4, seed: 3 }).unwrap();
        let mut s = c.indices.clone();
        s.sort_unstable();
        assert_eq!(s, vec![0, 1, 2, 3]);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(1..=200);
            let d = rng.random_range(1..=8);
            let k = rng.random_range(1..=16);
            let m = random_matrix(&mut rng, n, d);
            let seed = rng.random();
            let c = select_coreset(&m, &CoresetConfig { k, seed }).unwrap();
            assert_eq!(c.indices, brute_force(&m, k, seed));
        }
    }

    #[test]
    fn farthest_first_replay_and_monotone_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let n = rng.random_range(20..=500);
            let m = random_matrix(&mut rng, n, 4);
            let c = select_coreset(&m, &CoresetConfig { k: 12, seed: 11 }).unwrap();
            for t in 1..c.indices.len() {
                let prior = &c.indices[..t];
                let nearest = |q: usize| {
                    prior
                        .iter()
                        .map(|&s| sq_dist(m.row(q), m.row(s)))
                        .fold(f64::INFINITY, f64::min)
                };
                let chosen = nearest(c.indices[t]);
                for q in (0..n).filter(|q| !prior.contains(q)) {
                    assert!(nearest(q) <= chosen);
                }
            }
            let mut last = f64::INFINITY;
            for k in 1..=12 {
                let r = select_coreset(&m, &CoresetConfig { k, seed: 11 })
                    .unwrap()
                    .covering_radius();
                assert!(r <= last);
                last = r;
            }
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let m = random_matrix(&mut rng, 5000, 6);
        let cfg = CoresetConfig { k: 32, seed: 99 };
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| select_coreset(&m, &cfg).unwrap());
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| select_coreset(&m, &cfg).unwrap());
        assert_eq!(one, many);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn rows() -> impl Strategy<Value = Matrix> {
            (1usize..60, 1usize..5).prop_flat_map(|(n, d)| {
                // Small integer grid so duplicates and ties are common.
                proptest::collection::vec((-3i8..3).prop_map(f32::from), n * d)
                    .prop_map(move |v| Matrix::new(n, d, v).unwrap())
            })
        }

        proptest! {
            #[test]
            fn distinct_deterministic_and_farthest_first(m in rows(), k in 1usize..20, seed in any::<u64>()) {
                let cfg = CoresetConfig { k, seed };
                let c = select_coreset(&m, &cfg).unwrap();
                prop_assert_eq!(c.indices.len(), k.min(m.rows()));
                let mut seen = c.indices.clone();
                seen.sort_unstable();
                seen.dedup();
                prop_assert_eq!(seen.len(), c.indices.len());
                prop_assert_eq!(&select_coreset(&m, &cfg).unwrap(), &c);
                // Replay: each pick is at least as far from the earlier picks
                // as every row that was still unselected.
                for t in 1..c.indices.len() {
                    let near = |i: usize| {
                        c.indices[..t].iter().map(|&s| sq_dist(m.row(i), m.row(s))).fold(f64::INFINITY, f64::min)
                    };
                    let chosen = near(c.indices[t]);
                    for q in 0..m.rows() {
                        if !c.indices[..=t].contains(&q) {
                            prop_assert!(near(q) <= chosen);
                        }
                    }
                }
            }
        }
    }
}
