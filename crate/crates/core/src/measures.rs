//! Equal-weight particle ensembles: the computational stand-in for a
//! square-integrable probability measure on `R^d`.
//!
//! Positions are stored flat in row-major `n x d` layout and particle
//! identity is the index, so index couplings between two ensembles of equal
//! size are free transport plans. All operations are pure; an ensemble never
//! changes after construction.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mat::{dist_sq, norm_sq};

/// An empirical measure `(1/n) sum_i delta_{x_i}` on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    positions: Vec<f64>,
}

impl ParticleEnsemble {
    /// Builds an ensemble from flat row-major positions.
    ///
    /// Rejects empty data, ragged data and non-finite coordinates (the
    /// offending particle index is reported).
    pub fn new(dim: usize, positions: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive"));
        }
        if positions.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if positions.len() % dim != 0 {
            return Err(Error::RaggedPositions {
                len: positions.len(),
                dim,
            });
        }
        for (i, chunk) in positions.chunks_exact(dim).enumerate() {
            if chunk.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "ensemble construction",
                    particle: i,
                });
            }
        }
        Ok(ParticleEnsemble { dim, positions })
    }

    /// Single-particle ensemble `delta_x`.
    pub fn dirac(x: &[f64]) -> Result<Self> {
        ParticleEnsemble::new(x.len(), x.to_vec())
    }

    /// Draws `n` i.i.d. points from `N(0, scale^2 I_d)` shifted by `center`.
    pub fn sample_gaussian<R: Rng + ?Sized>(
        n: usize,
        dim: usize,
        scale: f64,
        center: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        if center.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: center.len(),
            });
        }
        let mut positions = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for c in center.iter().take(dim) {
                let z: f64 = rng.sample(StandardNormal);
                positions.push(c + scale * z);
            }
        }
        ParticleEnsemble::new(dim, positions)
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false // n >= 1 is a construction invariant
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub(crate) fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.positions.chunks_exact(self.dim)
    }

    /// `(1/n) sum_i |x_i|^2`, the square of the P2 norm of the measure.
    pub fn second_moment(&self) -> f64 {
        let n = self.len() as f64;
        self.iter().map(norm_sq).sum::<f64>() / n
    }

    /// Arithmetic mean of the particle positions.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.iter() {
            for (acc, x) in m.iter_mut().zip(p.iter()) {
                *acc += x;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|x| *x /= n);
        m
    }

    /// `mu(h)` for a scalar observable `h`.
    pub fn integrate<H: Fn(&[f64]) -> f64>(&self, h: H) -> f64 {
        let n = self.len() as f64;
        self.iter().map(h).sum::<f64>() / n
    }

    /// `(1/n) sum_i |x_i - mean|^2`; equals `W2(mu, delta_mean)^2` since any
    /// coupling with a Dirac is the product coupling.
    pub fn spread_squared(&self) -> f64 {
        let m = self.mean();
        let n = self.len() as f64;
        self.iter().map(|p| dist_sq(p, &m)).sum::<f64>() / n
    }

    /// Pushforward `mu o T^{-1}`: applies `T` to every particle, preserving
    /// order. `map` writes `T(x)` into its output slice.
    pub fn pushforward<T: Fn(&[f64], &mut [f64])>(&self, map: T) -> Result<Self> {
        let mut positions = vec![0.0; self.positions.len()];
        let mut out = vec![0.0; self.dim];
        for (i, p) in self.iter().enumerate() {
            map(p, &mut out);
            if out.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "pushforward",
                    particle: i,
                });
            }
            positions[i * self.dim..(i + 1) * self.dim].copy_from_slice(&out);
        }
        ParticleEnsemble::new(self.dim, positions)
    }

    /// `mu o (Id + eps * phi)^{-1}`, exact for empirical measures: every
    /// particle moves to `x_i + eps * phi(x_i)`.
    pub fn perturb<P: Fn(&[f64], &mut [f64])>(&self, phi: P, eps: f64) -> Result<Self> {
        let d = self.dim;
        let mut positions = vec![0.0; self.positions.len()];
        let mut shift = vec![0.0; d];
        for (i, p) in self.iter().enumerate() {
            phi(p, &mut shift);
            for j in 0..d {
                let v = p[j] + eps * shift[j];
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: "perturbation",
                        particle: i,
                    });
                }
                positions[i * d + j] = v;
            }
        }
        ParticleEnsemble::new(self.dim, positions)
    }
}

/// An ensemble plus tagged points that ride on the same dynamics but never
/// contribute to empirical-measure statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedEnsemble {
    base: ParticleEnsemble,
    tagged: Vec<f64>,
}

impl TaggedEnsemble {
    pub fn new(base: ParticleEnsemble, tagged: Vec<f64>) -> Result<Self> {
        if tagged.len() % base.dim() != 0 {
            return Err(Error::RaggedPositions {
                len: tagged.len(),
                dim: base.dim(),
            });
        }
        for (i, chunk) in tagged.chunks_exact(base.dim()).enumerate() {
            if chunk.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "tagged points",
                    particle: i,
                });
            }
        }
        Ok(TaggedEnsemble { base, tagged })
    }

    pub fn without_tags(base: ParticleEnsemble) -> Self {
        TaggedEnsemble {
            base,
            tagged: Vec::new(),
        }
    }

    pub fn base(&self) -> &ParticleEnsemble {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn num_tagged(&self) -> usize {
        self.tagged.len() / self.base.dim()
    }

    pub fn tagged(&self, i: usize) -> &[f64] {
        let d = self.base.dim();
        &self.tagged[i * d..(i + 1) * d]
    }

    pub fn tagged_flat(&self) -> &[f64] {
        &self.tagged
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut ParticleEnsemble, &mut Vec<f64>) {
        (&mut self.base, &mut self.tagged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ens(d: usize, xs: &[f64]) -> ParticleEnsemble {
        ParticleEnsemble::new(d, xs.to_vec()).unwrap()
    }

    #[test]
    fn second_moment_examples() {
        assert_eq!(ens(1, &[0.0]).second_moment(), 0.0);
        assert_eq!(ens(1, &[-1.0, 1.0]).second_moment(), 1.0);
        assert_eq!(ens(2, &[3.0, 4.0]).second_moment(), 25.0);
    }

    #[test]
    fn mean_examples() {
        assert_eq!(ens(1, &[0.0, 2.0]).mean(), vec![1.0]);
        assert_eq!(ens(2, &[1.0, 0.0, 0.0, 1.0]).mean(), vec![0.5, 0.5]);
        assert_eq!(ens(1, &[7.5]).mean(), vec![7.5]);
    }

    #[test]
    fn pushforward_identity_and_scaling() {
        let mu = ens(1, &[0.0, 1.0]);
        let id = mu.pushforward(|x, out| out.copy_from_slice(x)).unwrap();
        assert_eq!(id, mu);
        let doubled = mu.pushforward(|x, out| out[0] = 2.0 * x[0]).unwrap();
        assert_eq!(doubled.positions(), &[0.0, 2.0]);
    }

    #[test]
    fn pushforward_of_dirac_is_dirac_of_image() {
        let mu = ParticleEnsemble::dirac(&[1.5, -2.0]).unwrap();
        let nu = mu
            .pushforward(|x, out| {
                out[0] = x[0] + 1.0;
                out[1] = -x[1];
            })
            .unwrap();
        assert_eq!(nu.len(), 1);
        assert_eq!(nu.position(0), &[2.5, 2.0]);
    }

    #[test]
    fn pushforward_rejects_non_finite_with_index() {
        let mu = ens(1, &[0.0, 1.0, 2.0]);
        let err = mu
            .pushforward(|x, out| out[0] = if x[0] == 1.0 { f64::NAN } else { x[0] })
            .unwrap_err();
        assert_eq!(
            err,
            Error::NonFinite {
                context: "pushforward",
                particle: 1
            }
        );
    }

    #[test]
    fn perturb_examples() {
        let mu = ens(1, &[1.0]);
        let moved = mu.perturb(|x, out| out.copy_from_slice(x), 0.5).unwrap();
        assert_eq!(moved.positions(), &[1.5]);

        let mu = ens(1, &[0.0, 2.0]);
        let moved = mu.perturb(|x, out| out.copy_from_slice(x), 1.0).unwrap();
        assert_eq!(moved.positions(), &[0.0, 4.0]);
        assert_eq!(mu.second_moment(), 2.0);
        assert_eq!(moved.second_moment(), 8.0);

        // zero perturbation is exactly the identity
        let same = mu.perturb(|x, out| out.copy_from_slice(x), 0.0).unwrap();
        assert_eq!(same, mu);
    }

    #[test]
    fn spread_of_dirac_is_zero() {
        let mu = ParticleEnsemble::dirac(&[3.0]).unwrap();
        assert_eq!(mu.spread_squared(), 0.0);
    }

    #[test]
    fn tagged_points_do_not_enter_statistics() {
        let base = ens(1, &[0.0, 2.0]);
        let te = TaggedEnsemble::new(base.clone(), vec![100.0]).unwrap();
        assert_eq!(te.base().second_moment(), base.second_moment());
        assert_eq!(te.base().mean(), base.mean());
        assert_eq!(te.num_tagged(), 1);
        assert_eq!(te.tagged(0), &[100.0]);
    }

    #[test]
    fn construction_guards() {
        assert!(matches!(
            ParticleEnsemble::new(1, vec![]),
            Err(Error::EmptyEnsemble)
        ));
        assert!(matches!(
            ParticleEnsemble::new(2, vec![1.0, 2.0, 3.0]),
            Err(Error::RaggedPositions { .. })
        ));
        assert!(matches!(
            ParticleEnsemble::new(1, vec![f64::INFINITY]),
            Err(Error::NonFinite { particle: 0, .. })
        ));
    }
}
