//! Independent reference implementations and shared fixtures for the
//! integration tests. Nothing here calls into the library's graph or
//! scoring code.

#![allow(dead_code)]

use cutstat::data::{EmbeddingMatrix, PseudoLabeling, ABSTAIN};
use cutstat::synth::TwoViewConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Full sort of every pairwise distance; neighbor lists as node indices
/// into `covered`, ordered by `(squared distance, index)`.
pub fn oracle_knn(emb: &EmbeddingMatrix, covered: &[usize], k: usize) -> Vec<Vec<(usize, f64)>> {
    covered
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut all: Vec<(usize, f64)> = covered
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &b)| {
                    let d2: f64 = emb
                        .row(a)
                        .iter()
                        .zip(emb.row(b))
                        .map(|(x, y)| {
                            let t = *x as f64 - *y as f64;
                            t * t
                        })
                        .sum();
                    (j, d2)
                })
                .collect();
            all.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then(x.0.cmp(&y.0)));
            all.truncate(k);
            all
        })
        .collect()
}

/// Union of the directed neighbor relation, same ordering.
pub fn oracle_symmetrize(lists: &[Vec<(usize, f64)>]) -> Vec<Vec<(usize, f64)>> {
    let mut out: Vec<Vec<(usize, f64)>> = lists.to_vec();
    for (i, l) in lists.iter().enumerate() {
        for &(j, d2) in l {
            if !out[j].iter().any(|&(x, _)| x == i) {
                out[j].push((i, d2));
            }
        }
    }
    for l in &mut out {
        l.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then(x.0.cmp(&y.0)));
    }
    out
}

/// `Z_i = (J_i - mu_i) / sigma_i` with `w_ij = 1 / (1 + ||x_i - x_j||)`,
/// `J_i = sum_j w_ij [y_i != y_j]`, `mu_i = (1 - P_i) sum_j w_ij`,
/// `sigma_i^2 = P_i (1 - P_i) sum_j w_ij^2`, `P_i` the covered-set
/// frequency of `y_i`.
pub fn oracle_z(lists: &[Vec<(usize, f64)>], labels: &[i32], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; num_classes];
    for &y in labels {
        counts[y as usize] += 1.0;
    }
    let n = labels.len() as f64;
    lists
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let p = counts[labels[i] as usize] / n;
            let mut j_stat = 0.0;
            let mut sum_w = 0.0;
            let mut sum_w2 = 0.0;
            for &(j, d2) in l {
                let w = 1.0 / (1.0 + d2.sqrt());
                if labels[i] != labels[j] {
                    j_stat += w;
                }
                sum_w += w;
                sum_w2 += w * w;
            }
            let mu = (1.0 - p) * sum_w;
            let sigma = (p * (1.0 - p) * sum_w2).sqrt();
            (j_stat - mu) / sigma
        })
        .collect()
}

/// Uniform points, optionally snapped to a coarse grid to create
/// duplicate distances.
pub fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize, grid: bool) -> EmbeddingMatrix {
    let vals = (0..n * d)
        .map(|_| {
            let v: f32 = rng.gen_range(-1.0..1.0);
            if grid {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        })
        .collect();
    EmbeddingMatrix::new(vals, n, d).unwrap()
}

/// Random labels over `c` classes with at least two distinct classes and
/// an abstain rate.
pub fn random_pseudo(rng: &mut ChaCha8Rng, n: usize, c: usize, abstain: f64) -> PseudoLabeling {
    loop {
        let hard: Vec<i32> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < abstain {
                    ABSTAIN
                } else {
                    rng.gen_range(0..c as i32)
                }
            })
            .collect();
        let mut seen: Vec<i32> = hard.iter().copied().filter(|&h| h != ABSTAIN).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() >= 2 {
            return PseudoLabeling::hard_only(hard, c).unwrap();
        }
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `(alpha, gamma)` giving forward flip rates `e0 = P[pseudo 1 | Y 0]`
/// and `e1 = P[pseudo 0 | Y 1]` under `P[Y = 1] = pi1`.
pub fn noise_from_flip_rates(e0: f64, e1: f64, pi1: f64) -> (f64, f64) {
    let pi0 = 1.0 - pi1;
    let q = pi0 * e0 + pi1 * (1.0 - e1);
    (pi0 * e0 / q, pi1 * e1 / (1.0 - q))
}

/// Boundary-concentrated noise: a quarter of all pseudolabels wrong,
/// mostly class-0 examples close to the midplane.
pub fn boundary_fixture(n: usize) -> TwoViewConfig {
    let (alpha, gamma) = noise_from_flip_rates(0.45, 0.05, 0.5);
    TwoViewConfig {
        n,
        alpha,
        gamma,
        abstain_rate: 0.0,
        class_prior: 0.5,
        view1_dim: 8,
        cluster_sep: 2.0,
        boundary_noise: true,
        boundary_scale: 0.05,
    }
}

pub fn accuracy(hard: &[i32], gold: &[u32]) -> f64 {
    hard.iter()
        .zip(gold)
        .filter(|(h, g)| **h == **g as i32)
        .count() as f64
        / gold.len() as f64
}
