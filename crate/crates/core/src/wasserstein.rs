//! Exact Wasserstein-2 distance between equal-size equal-weight ensembles.
//!
//! For two `n`-point ensembles the optimal transport plan is a permutation,
//! so `W2^2` is a minimum-cost perfect matching on the squared-distance
//! matrix. Three routes are provided:
//!
//! - [`w2_assignment`]: shortest-augmenting-path assignment (Jonker-Volgenant
//!   style), exact in `O(n^3)`;
//! - [`w2_bruteforce`]: exhaustive search over all permutations, the oracle
//!   used to validate the solver (guarded to `n <= 8`);
//! - [`w2_1d`]: monotone rearrangement, optimal in one dimension.
//!
//! [`index_coupling_cost`] is the synchronous-coupling transport cost under
//! the identity permutation, an upper bound for `W2^2` that the contraction
//! experiments track step by step.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::math::FloatExt;

use crate::error::{Error, Result};
use crate::mat::dist_sq;
use crate::measures::ParticleEnsemble;

/// Largest `n` for which the squared-distance matrix is built explicitly.
pub const ASSIGNMENT_MAX_N: usize = 20_000;

/// Largest `n` accepted by the exhaustive oracle.
pub const BRUTEFORCE_MAX_N: usize = 8;

/// A permutation coupling between two equal-size ensembles.
///
/// `permutation[i] = j` matches particle `i` of the first ensemble to
/// particle `j` of the second; `cost` is the mean squared displacement,
/// i.e. the squared transport cost of the plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub permutation: Vec<usize>,
    pub cost: f64,
}

fn check_pair(mu: &ParticleEnsemble, nu: &ParticleEnsemble) -> Result<()> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            found: nu.dim(),
        });
    }
    if mu.len() != nu.len() {
        return Err(Error::SizeMismatch {
            left: mu.len(),
            right: nu.len(),
        });
    }
    Ok(())
}

/// Transport cost of the identity coupling, `(1/n) sum_i |x_i - y_i|^2`.
pub fn index_coupling_cost(mu: &ParticleEnsemble, nu: &ParticleEnsemble) -> Result<f64> {
    check_pair(mu, nu)?;
    let n = mu.len() as f64;
    let total: f64 = mu
        .iter()
        .zip(nu.iter())
        .map(|(x, y)| dist_sq(x, y))
        .sum();
    Ok(total / n)
}

/// W2 in one dimension by sorting both ensembles and pairing by rank.
pub fn w2_1d(mu: &ParticleEnsemble, nu: &ParticleEnsemble) -> Result<f64> {
    check_pair(mu, nu)?;
    if mu.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: mu.dim(),
        });
    }
    let mut xs: Vec<f64> = mu.positions().to_vec();
    let mut ys: Vec<f64> = nu.positions().to_vec();
    xs.sort_unstable_by(f64::total_cmp);
    ys.sort_unstable_by(f64::total_cmp);
    let n = xs.len() as f64;
    let cost: f64 = xs
        .iter()
        .zip(ys.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(cost.sqrt())
}

fn cost_matrix(mu: &ParticleEnsemble, nu: &ParticleEnsemble) -> Vec<f64> {
    let n = mu.len();
    let mut c = vec![0.0; n * n];
    for (i, x) in mu.iter().enumerate() {
        for (j, y) in nu.iter().enumerate() {
            c[i * n + j] = dist_sq(x, y);
        }
    }
    c
}

fn coupling_cost(mu: &ParticleEnsemble, nu: &ParticleEnsemble, perm: &[usize]) -> f64 {
    let n = mu.len() as f64;
    perm.iter()
        .enumerate()
        .map(|(i, &j)| dist_sq(mu.position(i), nu.position(j)))
        .sum::<f64>()
        / n
}

/// Exact minimum-cost assignment by shortest augmenting paths with dual
/// potentials. Any optimal matching may be returned under ties.
fn solve_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    // job[w] = row assigned to column w; column n is a virtual root.
    let mut job: Vec<Option<usize>> = vec![None; n + 1];
    let mut ys = vec![0.0f64; n];
    let mut yt = vec![0.0f64; n + 1];

    for row in 0..n {
        let mut w_cur = n;
        job[w_cur] = Some(row);
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut prv: Vec<Option<usize>> = vec![None; n + 1];
        let mut in_tree = vec![false; n + 1];

        while let Some(j) = job[w_cur] {
            in_tree[w_cur] = true;
            let mut delta = f64::INFINITY;
            let mut w_next = n;
            for w in 0..n {
                if !in_tree[w] {
                    let reduced = cost[j * n + w] - ys[j] - yt[w];
                    if reduced < min_to[w] {
                        min_to[w] = reduced;
                        prv[w] = Some(w_cur);
                    }
                    if min_to[w] < delta {
                        delta = min_to[w];
                        w_next = w;
                    }
                }
            }
            for w in 0..=n {
                if in_tree[w] {
                    if let Some(r) = job[w] {
                        ys[r] += delta;
                    }
                    yt[w] -= delta;
                } else {
                    min_to[w] -= delta;
                }
            }
            w_cur = w_next;
        }

        // augment along the alternating path back to the root
        while w_cur != n {
            let w_prev = prv[w_cur].expect("augmenting path is connected");
            job[w_cur] = job[w_prev];
            w_cur = w_prev;
        }
    }

    let mut perm = vec![0usize; n];
    for w in 0..n {
        if let Some(r) = job[w] {
            perm[r] = w;
        }
    }
    perm
}

/// Exact optimal coupling and `W2` distance between equal-size ensembles.
pub fn w2_assignment(
    mu: &ParticleEnsemble,
    nu: &ParticleEnsemble,
) -> Result<(f64, Coupling)> {
    check_pair(mu, nu)?;
    let n = mu.len();
    if n > ASSIGNMENT_MAX_N {
        return Err(Error::TooLarge {
            what: "w2_assignment",
            n,
            limit: ASSIGNMENT_MAX_N,
        });
    }
    let cost = cost_matrix(mu, nu);
    let perm = solve_assignment(n, &cost);
    let c = coupling_cost(mu, nu, &perm);
    Ok((
        c.sqrt(),
        Coupling {
            permutation: perm,
            cost: c,
        },
    ))
}

/// Convenience wrapper returning only the distance.
pub fn w2(mu: &ParticleEnsemble, nu: &ParticleEnsemble) -> Result<f64> {
    Ok(w2_assignment(mu, nu)?.0)
}

/// Exhaustive minimum over all `n!` permutations (Heap's algorithm).
pub fn w2_bruteforce(
    mu: &ParticleEnsemble,
    nu: &ParticleEnsemble,
) -> Result<(f64, Coupling)> {
    check_pair(mu, nu)?;
    let n = mu.len();
    if n > BRUTEFORCE_MAX_N {
        return Err(Error::TooLarge {
            what: "w2_bruteforce",
            n,
            limit: BRUTEFORCE_MAX_N,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best_perm = perm.clone();
    let mut best = coupling_cost(mu, nu, &perm);

    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let cost = coupling_cost(mu, nu, &perm);
            if cost < best {
                best = cost;
                best_perm.copy_from_slice(&perm);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }

    Ok((
        best.sqrt(),
        Coupling {
            permutation: best_perm,
            cost: best,
        },
    ))
}

/// Reorders `nu` so that the identity coupling realizes the optimal plan
/// against `mu`. Returned ensemble has position `i` equal to `nu`'s particle
/// matched to `mu`'s particle `i`.
pub fn align_by_optimal_coupling(
    mu: &ParticleEnsemble,
    nu: &ParticleEnsemble,
) -> Result<ParticleEnsemble> {
    let (_, coupling) = w2_assignment(mu, nu)?;
    let d = nu.dim();
    let mut positions = vec![0.0; nu.positions().len()];
    for (i, &j) in coupling.permutation.iter().enumerate() {
        positions[i * d..(i + 1) * d].copy_from_slice(nu.position(j));
    }
    ParticleEnsemble::new(d, positions)
}
