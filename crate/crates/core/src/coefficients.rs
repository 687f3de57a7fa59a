//! Drift and diffusion coefficients of the image dynamics.
//!
//! A coefficient set maps `(t, x, mu)` to a drift vector in `R^d` and a
//! `d x m` diffusion matrix, where `mu` is the current base ensemble. The
//! built-in families are analytically tractable: their dissipativity
//! constants, spatial Jacobians and Lions kernels are known in closed form,
//! which the derivative flows and the ergodicity experiments rely on.
//!
//! [`probe_monotonicity`] samples the dissipativity inequality
//!
//! ```text
//! 2 <b(x,mu)-b(y,nu), x-y> + |sigma(x,mu)-sigma(y,nu)|_HS^2
//!     <= kappa W2(mu,nu)^2 - lambda |x-y|^2
//! ```
//!
//! at random arguments. It is a falsification tool: sampling can reveal a
//! violated inequality but never proves one.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mat::{dot, norm_sq, Mat};
use crate::measures::ParticleEnsemble;
use crate::rng;
use crate::wasserstein;

/// Constants `(lambda, kappa, delta, K)` declared for the dissipativity
/// hypothesis: `lambda` is the self-dissipativity rate, `kappa` the measure
/// coupling strength, `delta` the growth bound and `growth` the Lipschitz
/// bound on the diffusion differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisConstants {
    pub lambda: f64,
    pub kappa: f64,
    pub delta: f64,
    pub growth: f64,
}

/// Coefficient interface consumed by the solver and the calculus.
///
/// Evaluation must be pure and reentrant; the solver calls it from parallel
/// replicas. Default spatial derivatives fall back to central differences;
/// built-ins override them with closed forms.
pub trait Coefficients: Sync {
    fn dim_d(&self) -> usize;
    fn dim_m(&self) -> usize;

    /// Writes `b(t, x, mu)` into `out` (length `d`).
    fn drift(&self, t: f64, x: &[f64], mu: &ParticleEnsemble, out: &mut [f64]);

    /// Writes `sigma(t, x, mu)` into `out` (`d x m`).
    fn diffusion(&self, t: f64, x: &[f64], mu: &ParticleEnsemble, out: &mut Mat);

    /// Declared dissipativity constants, when the family states them.
    fn constants(&self) -> Option<HypothesisConstants> {
        None
    }

    /// `grad_x b(t, x, mu)` as a `d x d` matrix (row = drift component).
    fn drift_jacobian(&self, t: f64, x: &[f64], mu: &ParticleEnsemble, out: &mut Mat) {
        let d = self.dim_d();
        let mut xp = x.to_vec();
        let mut bp = vec![0.0; d];
        let mut bm = vec![0.0; d];
        for j in 0..d {
            let h = fd_step(x[j]);
            let orig = xp[j];
            xp[j] = orig + h;
            self.drift(t, &xp, mu, &mut bp);
            xp[j] = orig - h;
            self.drift(t, &xp, mu, &mut bm);
            xp[j] = orig;
            for i in 0..d {
                out.set(i, j, (bp[i] - bm[i]) / (2.0 * h));
            }
        }
    }

    /// Directional derivative of the diffusion in space,
    /// `(grad_x sigma)(t, x, mu) v`, as a `d x m` matrix.
    fn diffusion_dir_deriv(
        &self,
        t: f64,
        x: &[f64],
        mu: &ParticleEnsemble,
        dir: &[f64],
        out: &mut Mat,
    ) {
        let d = self.dim_d();
        let m = self.dim_m();
        let scale = 1.0 + dir.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        let h = 1e-4 / scale * (1.0 + x.iter().fold(0.0f64, |s, v| s.max(v.abs())));
        let mut xp = vec![0.0; d];
        let mut sp = Mat::zeros(d, m);
        let mut sm = Mat::zeros(d, m);
        for j in 0..d {
            xp[j] = x[j] + h * dir[j];
        }
        self.diffusion(t, &xp, mu, &mut sp);
        for j in 0..d {
            xp[j] = x[j] - h * dir[j];
        }
        self.diffusion(t, &xp, mu, &mut sm);
        for i in 0..d * m {
            out.data_mut()[i] = (sp.data()[i] - sm.data()[i]) / (2.0 * h);
        }
    }

    /// Closed-form Lions kernel `Db(t, x, mu)(y)` as a `d x d` matrix
    /// (row = drift component, column = perturbation direction at `y`).
    /// Returns `false` when no closed form is available.
    fn drift_measure_kernel(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &ParticleEnsemble,
        _y: &[f64],
        _out: &mut Mat,
    ) -> bool {
        false
    }

    /// Whether the diffusion reads the measure argument. The Lions flow
    /// requires this to be `false` (so `D sigma = 0`).
    fn diffusion_depends_on_measure(&self) -> bool;
}

impl<C: Coefficients + ?Sized> Coefficients for &C {
    fn dim_d(&self) -> usize {
        (**self).dim_d()
    }
    fn dim_m(&self) -> usize {
        (**self).dim_m()
    }
    fn drift(&self, t: f64, x: &[f64], mu: &ParticleEnsemble, out: &mut [f64]) {
        (**self).drift(t, x, mu, out)
    }
    fn diffusion(&self, t: f64, x: &[f64], mu: &ParticleEnsemble, out: &mut Mat) {
        (**self).diffusion(t, x, mu, out)
    }
    fn constants(&self) -> Option<HypothesisConstants> {
        (**self).constants()
    }
    fn drift_jacobian(&self, t: f64, x: &[f64], mu: &ParticleEnsemble, out: &mut Mat) {
        (**self).drift_jacobian(t, x, mu, out)
    }
    fn diffusion_dir_deriv(
        &self,
        t: f64,
        x: &[f64],
        mu: &ParticleEnsemble,
        dir: &[f64],
        out: &mut Mat,
    ) {
        (**self).diffusion_dir_deriv(t, x, mu, dir, out)
    }
    fn drift_measure_kernel(
        &self,
        t: f64,
        x: &[f64],
        mu: &ParticleEnsemble,
        y: &[f64],
        out: &mut Mat,
    ) -> bool {
        (**self).drift_measure_kernel(t, x, mu, y, out)
    }
    fn diffusion_depends_on_measure(&self) -> bool {
        (**self).diffusion_depends_on_measure()
    }
}

fn fd_step(x: f64) -> f64 {
    1e-4 * (1.0 + x.abs())
}

/// Mean-reverting drift with mean-field attraction and constant diffusion:
/// `b(x, mu) = -a x + c mean(mu)`, `sigma = sigma0`.
///
/// Satisfies the dissipativity hypothesis with `lambda = 2a - c` and
/// `kappa = c` (Young's inequality on the cross term, optimal split).
#[derive(Debug, Clone)]
pub struct LinearMeanField {
    a: f64,
    c: f64,
    sigma: Mat,
}

impl LinearMeanField {
    pub fn new(a: f64, c: f64, sigma: Mat) -> Result<Self> {
        if !(a >= 0.0) || !(c >= 0.0) {
            return Err(Error::InvalidArgument(
                "linear mean-field rates must be nonnegative",
            ));
        }
        if sigma.rows() == 0 || sigma.cols() == 0 {
            return Err(Error::InvalidArgument("diffusion matrix must be nonempty"));
        }
        Ok(LinearMeanField { a, c, sigma })
    }

    /// Scalar convenience for `d = m = 1`.
    pub fn scalar(a: f64, c: f64, sigma: f64) -> Self {
        LinearMeanField::new(a, c, Mat::from_rows(1, 1, vec![sigma])).unwrap()
    }

    pub fn decay(&self) -> f64 {
        self.a
    }

    pub fn interaction(&self) -> f64 {
        self.c
    }

    pub fn sigma(&self) -> &Mat {
        &self.sigma
    }
}

impl Coefficients for LinearMeanField {
    fn dim_d(&self) -> usize {
        self.sigma.rows()
    }

    fn dim_m(&self) -> usize {
        self.sigma.cols()
    }

    fn drift(&self, _t: f64, x: &[f64], mu: &ParticleEnsemble, out: &mut [f64]) {
        if self.c == 0.0 {
            for (o, xi) in out.iter_mut().zip(x.iter()) {
                *o = -self.a * xi;
            }
        } else {
            let mean = mu.mean();
            for i in 0..x.len() {
                out[i] = -self.a * x[i] + self.c * mean[i];
            }
        }
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _mu: &ParticleEnsemble, out: &mut Mat) {
        out.data_mut().copy_from_slice(self.sigma.data());
    }

    fn constants(&self) -> Option<HypothesisConstants> {
        let sig_hs: f64 = self.sigma.data().iter().map(|s| s * s).sum();
        let delta = (2.0 * self.a * self.a).max(2.0 * self.c * self.c) + sig_hs;
        Some(HypothesisConstants {
            lambda: 2.0 * self.a - self.c,
            kappa: self.c,
            delta,
            growth: 0.0,
        })
    }

    fn drift_jacobian(&self, _t: f64, _x: &[f64], _mu: &ParticleEnsemble, out: &mut Mat) {
        out.fill(0.0);
        for i in 0..self.dim_d() {
            out.set(i, i, -self.a);
        }
    }

    fn diffusion_dir_deriv(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &ParticleEnsemble,
        _dir: &[f64],
        out: &mut Mat,
    ) {
        out.fill(0.0);
    }

    fn drift_measure_kernel(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &ParticleEnsemble,
        _y: &[f64],
        out: &mut Mat,
    ) -> bool {
        // mean(mu) has Lions derivative Id at every y, scaled by c
        out.fill(0.0);
        for i in 0..self.dim_d() {
            out.set(i, i, self.c);
        }
        true
    }

    fn diffusion_depends_on_measure(&self) -> bool {
        false
    }
}

/// Dissipative cubic drift with mean-field attraction:
/// `b(x, mu) = -a x - g |x|^2 x + c mean(mu)`, constant diffusion.
///
/// The cubic term is monotone, so the same constants `lambda = 2a - c`,
/// `kappa = c` apply. Used to exercise the derivative flows on genuinely
/// nonlinear dynamics.
#[derive(Debug, Clone)]
pub struct CubicMeanField {
    a: f64,
    g: f64,
    c: f64,
    sigma: Mat,
}

impl CubicMeanField {
    pub fn new(a: f64, g: f64, c: f64, sigma: Mat) -> Result<Self> {
        if !(a >= 0.0) || !(g >= 0.0) || !(c >= 0.0) {
            return Err(Error::InvalidArgument(
                "cubic mean-field rates must be nonnegative",
            ));
        }
        Ok(CubicMeanField { a, g, c, sigma })
    }

    pub fn scalar(a: f64, g: f64, c: f64, sigma: f64) -> Self {
        CubicMeanField::new(a, g, c, Mat::from_rows(1, 1, vec![sigma])).unwrap()
    }
}

impl Coefficients for CubicMeanField {
    fn dim_d(&self) -> usize {
        self.sigma.rows()
    }

    fn dim_m(&self) -> usize {
        self.sigma.cols()
    }

    fn drift(&self, _t: f64, x: &[f64], mu: &ParticleEnsemble, out: &mut [f64]) {
        let r2 = norm_sq(x);
        if self.c == 0.0 {
            for i in 0..x.len() {
                out[i] = -(self.a + self.g * r2) * x[i];
            }
        } else {
            let mean = mu.mean();
            for i in 0..x.len() {
                out[i] = -(self.a + self.g * r2) * x[i] + self.c * mean[i];
            }
        }
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _mu: &ParticleEnsemble, out: &mut Mat) {
        out.data_mut().copy_from_slice(self.sigma.data());
    }

    fn constants(&self) -> Option<HypothesisConstants> {
        Some(HypothesisConstants {
            lambda: 2.0 * self.a - self.c,
            kappa: self.c,
            delta: f64::INFINITY, // cubic growth exceeds the linear bound
            growth: 0.0,
        })
    }

    fn drift_jacobian(&self, _t: f64, x: &[f64], _mu: &ParticleEnsemble, out: &mut Mat) {
        let d = x.len();
        let r2 = norm_sq(x);
        for i in 0..d {
            for j in 0..d {
                let mut v = -2.0 * self.g * x[i] * x[j];
                if i == j {
                    v -= self.a + self.g * r2;
                }
                out.set(i, j, v);
            }
        }
    }

    fn diffusion_dir_deriv(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &ParticleEnsemble,
        _dir: &[f64],
        out: &mut Mat,
    ) {
        out.fill(0.0);
    }

    fn drift_measure_kernel(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &ParticleEnsemble,
        _y: &[f64],
        out: &mut Mat,
    ) -> bool {
        out.fill(0.0);
        for i in 0..self.dim_d() {
            out.set(i, i, self.c);
        }
        true
    }

    fn diffusion_depends_on_measure(&self) -> bool {
        false
    }
}

/// Restriction of a coefficient set to the Dirac diagonal:
/// `b0(x) = b(t, x, delta_x)`, `sigma0(x) = sigma(t, x, delta_x)`.
///
/// The restricted pair drives the classical one-particle dynamics whose
/// invariant law is the building block of the collapsed invariant measure.
#[derive(Debug, Clone)]
pub struct DiagonalRestriction<C> {
    inner: C,
}

/// Restricts a coefficient set to Dirac measures.
pub fn diagonal_restriction<C: Coefficients>(coeffs: C) -> DiagonalRestriction<C> {
    DiagonalRestriction { inner: coeffs }
}

impl<C: Coefficients> Coefficients for DiagonalRestriction<C> {
    fn dim_d(&self) -> usize {
        self.inner.dim_d()
    }

    fn dim_m(&self) -> usize {
        self.inner.dim_m()
    }

    fn drift(&self, t: f64, x: &[f64], _mu: &ParticleEnsemble, out: &mut [f64]) {
        let dirac = ParticleEnsemble::dirac(x).expect("finite state");
        self.inner.drift(t, x, &dirac, out);
    }

    fn diffusion(&self, t: f64, x: &[f64], _mu: &ParticleEnsemble, out: &mut Mat) {
        let dirac = ParticleEnsemble::dirac(x).expect("finite state");
        self.inner.diffusion(t, x, &dirac, out);
    }

    fn diffusion_depends_on_measure(&self) -> bool {
        false
    }
}

/// Sampling ranges for the dissipativity probe.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub trials: usize,
    pub seed: u64,
    /// Ensembles are drawn with 1..=max_particles points.
    pub max_particles: usize,
    /// Points and particles are uniform in `[-scale, scale]^d`.
    pub scale: f64,
    /// Evaluation time for time-dependent coefficients.
    pub time: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            trials: 1000,
            seed: 0,
            max_particles: 16,
            scale: 2.0,
            time: 0.0,
        }
    }
}

/// Worst case found by the probe.
#[derive(Debug, Clone)]
pub struct ProbeWorstCase {
    pub slack: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub mu: ParticleEnsemble,
    pub nu: ParticleEnsemble,
}

/// Outcome of sampling the dissipativity inequality. `violations` counts
/// trials with positive slack beyond rounding; the report is evidence, not
/// a proof.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub trials: usize,
    pub violations: usize,
    pub worst_slack: f64,
    pub worst_case: Option<ProbeWorstCase>,
}

/// Samples `2<b(x,mu)-b(y,nu), x-y> + |sigma diff|_HS^2 - kappa W2^2
/// + lambda |x-y|^2` at random arguments and reports the maximum slack.
pub fn probe_monotonicity<C: Coefficients>(
    coeffs: &C,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let constants = coeffs
        .constants()
        .ok_or(Error::Unsupported("probe requires declared constants"))?;
    let d = coeffs.dim_d();
    let m = coeffs.dim_m();
    let mut rng = rng::stream(config.seed, 0);

    let mut report = ProbeReport {
        trials: config.trials,
        violations: 0,
        worst_slack: f64::NEG_INFINITY,
        worst_case: None,
    };

    let mut bx = vec![0.0; d];
    let mut by = vec![0.0; d];
    let mut sx = Mat::zeros(d, m);
    let mut sy = Mat::zeros(d, m);

    for _ in 0..config.trials {
        let n = rng.random_range(1..=config.max_particles);
        let sample_point = |rng: &mut rng::Stream| -> Vec<f64> {
            (0..d)
                .map(|_| rng.random_range(-config.scale..=config.scale))
                .collect()
        };
        let sample_ensemble = |rng: &mut rng::Stream| -> ParticleEnsemble {
            let mut pos = Vec::with_capacity(n * d);
            for _ in 0..n * d {
                pos.push(rng.random_range(-config.scale..=config.scale));
            }
            ParticleEnsemble::new(d, pos).expect("finite sample")
        };

        let x = sample_point(&mut rng);
        let y = sample_point(&mut rng);
        let mu = sample_ensemble(&mut rng);
        let nu = sample_ensemble(&mut rng);

        coeffs.drift(config.time, &x, &mu, &mut bx);
        coeffs.drift(config.time, &y, &nu, &mut by);
        coeffs.diffusion(config.time, &x, &mu, &mut sx);
        coeffs.diffusion(config.time, &y, &nu, &mut sy);

        let diff: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a - b).collect();
        let bdiff: Vec<f64> = bx.iter().zip(by.iter()).map(|(a, b)| a - b).collect();
        let sig_diff_sq: f64 = sx
            .data()
            .iter()
            .zip(sy.data().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let w2sq = wasserstein::w2_assignment(&mu, &nu)?.1.cost;

        let lhs = 2.0 * dot(&bdiff, &diff) + sig_diff_sq;
        let rhs = constants.kappa * w2sq - constants.lambda * norm_sq(&diff);
        let slack = lhs - rhs;
        let tol = 1e-10 * (1.0 + lhs.abs() + rhs.abs());
        if slack > tol {
            report.violations += 1;
        }
        if slack > report.worst_slack {
            report.worst_slack = slack;
            report.worst_case = Some(ProbeWorstCase {
                slack,
                x: x.clone(),
                y: y.clone(),
                mu: mu.clone(),
                nu: nu.clone(),
            });
        }
    }

    Ok(report)
}
