//! Cylindrical functionals on measure space and their lifted versions.
//!
//! A cylindrical functional has the form
//!
//! ```text
//! f(mu) = g(mu(h_1), ..., mu(h_k)),
//! ```
//!
//! an outer function of finitely many linear statistics. On this class the
//! intrinsic (Lions) derivative is closed-form:
//!
//! ```text
//! Df(mu)(x)      = sum_i  d_i g(mu(h)) grad h_i(x),
//! D^2 f(mu)(x,y) = sum_ij d_i d_j g(mu(h)) grad h_i(x) (x) grad h_j(y),
//! ```
//!
//! which is everything the generators need. The lifted variant
//! `f(x, mu) = g(x, mu(h_1), ..., mu(h_k))` adds a state slot in front of
//! the statistics; its outer function lives on `R^{d+k}` and the mixed
//! blocks of its Hessian provide the state-measure cross derivatives.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::measures::ParticleEnsemble;

/// A twice-differentiable scalar function on `R^p` with explicit gradient
/// and Hessian.
pub trait ScalarFunction: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, u: &[f64]) -> f64;
    fn gradient(&self, u: &[f64], out: &mut [f64]);
    fn hessian(&self, u: &[f64], out: &mut Mat);
}

/// `u -> c0 + <c1, u>`.
pub struct Linear {
    pub offset: f64,
    pub coeffs: Vec<f64>,
}

impl Linear {
    pub fn coordinate(dim: usize, index: usize) -> Self {
        let mut coeffs = vec![0.0; dim];
        coeffs[index] = 1.0;
        Linear { offset: 0.0, coeffs }
    }
}

impl ScalarFunction for Linear {
    fn dim(&self) -> usize {
        self.coeffs.len()
    }
    fn value(&self, u: &[f64]) -> f64 {
        self.offset + u.iter().zip(self.coeffs.iter()).map(|(a, b)| a * b).sum::<f64>()
    }
    fn gradient(&self, _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.coeffs);
    }
    fn hessian(&self, _u: &[f64], out: &mut Mat) {
        out.fill(0.0);
    }
}

/// `u -> |u|^2`.
pub struct NormSquared {
    pub dim: usize,
}

impl ScalarFunction for NormSquared {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, u: &[f64]) -> f64 {
        u.iter().map(|x| x * x).sum()
    }
    fn gradient(&self, u: &[f64], out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(u.iter()) {
            *o = 2.0 * x;
        }
    }
    fn hessian(&self, _u: &[f64], out: &mut Mat) {
        out.fill(0.0);
        for i in 0..self.dim {
            out.set(i, i, 2.0);
        }
    }
}

/// `u -> u_i * u_j` (distinct indices).
pub struct PairProduct {
    pub dim: usize,
    pub i: usize,
    pub j: usize,
}

impl ScalarFunction for PairProduct {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, u: &[f64]) -> f64 {
        u[self.i] * u[self.j]
    }
    fn gradient(&self, u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        out[self.i] += u[self.j];
        out[self.j] += u[self.i];
    }
    fn hessian(&self, _u: &[f64], out: &mut Mat) {
        out.fill(0.0);
        out.set(self.i, self.j, 1.0);
        out.set(self.j, self.i, 1.0);
    }
}

/// Polynomial `u -> c0 + <c1, u> + (1/2) u^T Q u + sum_i c3_i u_i^3`.
///
/// The diagonal cubic keeps third derivatives around, which the
/// finite-difference order studies need.
pub struct Poly3 {
    pub c0: f64,
    pub c1: Vec<f64>,
    pub quad: Mat,
    pub c3: Vec<f64>,
}

impl ScalarFunction for Poly3 {
    fn dim(&self) -> usize {
        self.c1.len()
    }
    fn value(&self, u: &[f64]) -> f64 {
        let p = self.dim();
        let mut v = self.c0;
        for i in 0..p {
            v += self.c1[i] * u[i] + self.c3[i] * u[i] * u[i] * u[i];
            for j in 0..p {
                v += 0.5 * self.quad.get(i, j) * u[i] * u[j];
            }
        }
        v
    }
    fn gradient(&self, u: &[f64], out: &mut [f64]) {
        let p = self.dim();
        for i in 0..p {
            let mut g = self.c1[i] + 3.0 * self.c3[i] * u[i] * u[i];
            for j in 0..p {
                g += 0.5 * (self.quad.get(i, j) + self.quad.get(j, i)) * u[j];
            }
            out[i] = g;
        }
    }
    fn hessian(&self, u: &[f64], out: &mut Mat) {
        let p = self.dim();
        for i in 0..p {
            for j in 0..p {
                let mut h = 0.5 * (self.quad.get(i, j) + self.quad.get(j, i));
                if i == j {
                    h += 6.0 * self.c3[i] * u[i];
                }
                out.set(i, j, h);
            }
        }
    }
}

/// `f(mu) = g(mu(h_1), ..., mu(h_k))`.
pub struct CylindricalFunctional {
    outer: Box<dyn ScalarFunction>,
    inner: Vec<Box<dyn ScalarFunction>>,
    dim_d: usize,
}

impl core::fmt::Debug for CylindricalFunctional {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("CylindricalFunctional")
            .field("k", &self.inner.len())
            .field("dim_d", &self.dim_d)
            .finish()
    }
}

impl CylindricalFunctional {
    pub fn new(
        outer: Box<dyn ScalarFunction>,
        inner: Vec<Box<dyn ScalarFunction>>,
    ) -> Result<Self> {
        if inner.is_empty() {
            return Err(Error::InvalidArgument(
                "cylindrical functional needs at least one statistic",
            ));
        }
        if outer.dim() != inner.len() {
            return Err(Error::DimensionMismatch {
                expected: inner.len(),
                found: outer.dim(),
            });
        }
        let dim_d = inner[0].dim();
        if inner.iter().any(|h| h.dim() != dim_d) {
            return Err(Error::InvalidArgument(
                "all inner observables must share the state dimension",
            ));
        }
        Ok(CylindricalFunctional {
            outer,
            inner,
            dim_d,
        })
    }

    /// `f(mu) = mu(h)`, the linear statistic itself.
    pub fn statistic(h: Box<dyn ScalarFunction>) -> Self {
        let outer = Linear {
            offset: 0.0,
            coeffs: vec![1.0],
        };
        CylindricalFunctional::new(Box::new(outer), vec![h]).expect("valid statistic")
    }

    /// First coordinate mean, `f(mu) = mu(x_0)`.
    pub fn mean(dim: usize) -> Self {
        CylindricalFunctional::statistic(Box::new(Linear::coordinate(dim, 0)))
    }

    /// `f(mu) = mu(|x|^2)`.
    pub fn second_moment(dim: usize) -> Self {
        CylindricalFunctional::statistic(Box::new(NormSquared { dim }))
    }

    /// `f(mu) = (mu(x_0))^2`.
    pub fn mean_squared(dim: usize) -> Self {
        CylindricalFunctional::new(
            Box::new(NormSquared { dim: 1 }),
            vec![Box::new(Linear::coordinate(dim, 0))],
        )
        .expect("valid functional")
    }

    /// Pointwise product `(fg)(mu) = f(mu) g(mu)`, again cylindrical with
    /// the statistics of both factors concatenated.
    pub fn product(f: CylindricalFunctional, g: CylindricalFunctional) -> Result<Self> {
        if f.dim_d != g.dim_d {
            return Err(Error::DimensionMismatch {
                expected: f.dim_d,
                found: g.dim_d,
            });
        }
        struct ProductOuter {
            f: Box<dyn ScalarFunction>,
            g: Box<dyn ScalarFunction>,
        }
        impl ScalarFunction for ProductOuter {
            fn dim(&self) -> usize {
                self.f.dim() + self.g.dim()
            }
            fn value(&self, u: &[f64]) -> f64 {
                let kf = self.f.dim();
                self.f.value(&u[..kf]) * self.g.value(&u[kf..])
            }
            fn gradient(&self, u: &[f64], out: &mut [f64]) {
                let kf = self.f.dim();
                let fv = self.f.value(&u[..kf]);
                let gv = self.g.value(&u[kf..]);
                self.f.gradient(&u[..kf], &mut out[..kf]);
                self.g.gradient(&u[kf..], &mut out[kf..]);
                for o in out[..kf].iter_mut() {
                    *o *= gv;
                }
                for o in out[kf..].iter_mut() {
                    *o *= fv;
                }
            }
            fn hessian(&self, u: &[f64], out: &mut Mat) {
                let kf = self.f.dim();
                let kg = self.g.dim();
                let fv = self.f.value(&u[..kf]);
                let gv = self.g.value(&u[kf..]);
                let mut gf = vec![0.0; kf];
                let mut ggrad = vec![0.0; kg];
                self.f.gradient(&u[..kf], &mut gf);
                self.g.gradient(&u[kf..], &mut ggrad);
                let mut hf = Mat::zeros(kf, kf);
                let mut hg = Mat::zeros(kg, kg);
                self.f.hessian(&u[..kf], &mut hf);
                self.g.hessian(&u[kf..], &mut hg);
                for i in 0..kf {
                    for j in 0..kf {
                        out.set(i, j, gv * hf.get(i, j));
                    }
                    for j in 0..kg {
                        out.set(i, kf + j, gf[i] * ggrad[j]);
                        out.set(kf + j, i, gf[i] * ggrad[j]);
                    }
                }
                for i in 0..kg {
                    for j in 0..kg {
                        out.set(kf + i, kf + j, fv * hg.get(i, j));
                    }
                }
            }
        }
        let dim_d = f.dim_d;
        let mut inner = f.inner;
        inner.extend(g.inner);
        Ok(CylindricalFunctional {
            outer: Box::new(ProductOuter {
                f: f.outer,
                g: g.outer,
            }),
            inner,
            dim_d,
        })
    }

    pub fn k(&self) -> usize {
        self.inner.len()
    }

    pub fn dim_d(&self) -> usize {
        self.dim_d
    }

    pub fn outer(&self) -> &dyn ScalarFunction {
        self.outer.as_ref()
    }

    pub fn inner(&self, i: usize) -> &dyn ScalarFunction {
        self.inner[i].as_ref()
    }

    /// The statistics vector `(mu(h_1), ..., mu(h_k))`.
    pub fn statistics(&self, mu: &ParticleEnsemble, out: &mut [f64]) {
        for (i, h) in self.inner.iter().enumerate() {
            out[i] = mu.integrate(|x| h.value(x));
        }
    }

    pub fn eval(&self, mu: &ParticleEnsemble) -> f64 {
        let mut u = vec![0.0; self.k()];
        self.statistics(mu, &mut u);
        self.outer.value(&u)
    }

    /// Spot-checks the supplied derivatives of `g` and the `h_i` against
    /// central differences at the given points.
    pub fn check_derivatives(&self, points: &[Vec<f64>], tol: f64) -> Result<()> {
        for p in points {
            for h in &self.inner {
                check_scalar_derivatives(h.as_ref(), p, tol)?;
            }
        }
        // check the outer function at the statistics of a synthetic point
        if let Some(p) = points.first() {
            let mu = ParticleEnsemble::new(self.dim_d, p.clone())?;
            let mut u = vec![0.0; self.k()];
            self.statistics(&mu, &mut u);
            check_scalar_derivatives(self.outer.as_ref(), &u, tol)?;
        }
        Ok(())
    }
}

fn check_scalar_derivatives(f: &dyn ScalarFunction, u: &[f64], tol: f64) -> Result<()> {
    let p = f.dim();
    if u.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: u.len(),
        });
    }
    let h = 1e-5;
    let mut grad = vec![0.0; p];
    f.gradient(u, &mut grad);
    let mut up = u.to_vec();
    let mut gp = vec![0.0; p];
    let mut gm = vec![0.0; p];
    let mut hess = Mat::zeros(p, p);
    f.hessian(u, &mut hess);
    for j in 0..p {
        let orig = up[j];
        up[j] = orig + h;
        let vp = f.value(&up);
        f.gradient(&up, &mut gp);
        up[j] = orig - h;
        let vm = f.value(&up);
        f.gradient(&up, &mut gm);
        up[j] = orig;
        let fd = (vp - vm) / (2.0 * h);
        if (fd - grad[j]).abs() > tol * (1.0 + fd.abs()) {
            return Err(Error::Unsupported("gradient inconsistent with values"));
        }
        for i in 0..p {
            let fd2 = (gp[i] - gm[i]) / (2.0 * h);
            if (fd2 - hess.get(i, j)).abs() > tol * (1.0 + fd2.abs()) {
                return Err(Error::Unsupported("hessian inconsistent with gradient"));
            }
        }
    }
    Ok(())
}

/// `f(x, mu) = g(x, mu(h_1), ..., mu(h_k))` with `g` on `R^{d+k}`; the
/// first `d` outer slots hold the state, the rest the statistics.
pub struct LiftedFunctional {
    outer: Box<dyn ScalarFunction>,
    inner: Vec<Box<dyn ScalarFunction>>,
    dim_d: usize,
}

impl core::fmt::Debug for LiftedFunctional {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("LiftedFunctional")
            .field("k", &self.inner.len())
            .field("dim_d", &self.dim_d)
            .finish()
    }
}

impl LiftedFunctional {
    pub fn new(
        dim_d: usize,
        outer: Box<dyn ScalarFunction>,
        inner: Vec<Box<dyn ScalarFunction>>,
    ) -> Result<Self> {
        if outer.dim() != dim_d + inner.len() {
            return Err(Error::DimensionMismatch {
                expected: dim_d + inner.len(),
                found: outer.dim(),
            });
        }
        if inner.iter().any(|h| h.dim() != dim_d) {
            return Err(Error::InvalidArgument(
                "all inner observables must share the state dimension",
            ));
        }
        Ok(LiftedFunctional {
            outer,
            inner,
            dim_d,
        })
    }

    /// Lifts a measure-only functional (the state slot is ignored).
    pub fn from_cylindrical(f: CylindricalFunctional) -> Self {
        struct IgnoreState {
            inner: Box<dyn ScalarFunction>,
            d: usize,
        }
        impl ScalarFunction for IgnoreState {
            fn dim(&self) -> usize {
                self.d + self.inner.dim()
            }
            fn value(&self, u: &[f64]) -> f64 {
                self.inner.value(&u[self.d..])
            }
            fn gradient(&self, u: &[f64], out: &mut [f64]) {
                out[..self.d].iter_mut().for_each(|x| *x = 0.0);
                self.inner.gradient(&u[self.d..], &mut out[self.d..]);
            }
            fn hessian(&self, u: &[f64], out: &mut Mat) {
                out.fill(0.0);
                let k = self.inner.dim();
                let mut sub = Mat::zeros(k, k);
                self.inner.hessian(&u[self.d..], &mut sub);
                for i in 0..k {
                    for j in 0..k {
                        out.set(self.d + i, self.d + j, sub.get(i, j));
                    }
                }
            }
        }
        let d = f.dim_d;
        LiftedFunctional {
            outer: Box::new(IgnoreState { inner: f.outer, d }),
            inner: f.inner,
            dim_d: d,
        }
    }

    /// `f(x, mu) = x_0 * mu(x_0)`, the canonical state-measure cross term.
    pub fn coord_times_mean(dim: usize) -> Self {
        LiftedFunctional::new(
            dim,
            Box::new(PairProduct {
                dim: dim + 1,
                i: 0,
                j: dim,
            }),
            vec![Box::new(Linear::coordinate(dim, 0))],
        )
        .expect("valid functional")
    }

    pub fn k(&self) -> usize {
        self.inner.len()
    }

    pub fn dim_d(&self) -> usize {
        self.dim_d
    }

    pub fn outer(&self) -> &dyn ScalarFunction {
        self.outer.as_ref()
    }

    pub fn inner(&self, i: usize) -> &dyn ScalarFunction {
        self.inner[i].as_ref()
    }

    /// Fills `out = (x, mu(h_1), ..., mu(h_k))`.
    pub fn arguments(&self, x: &[f64], mu: &ParticleEnsemble, out: &mut [f64]) {
        out[..self.dim_d].copy_from_slice(x);
        for (i, h) in self.inner.iter().enumerate() {
            out[self.dim_d + i] = mu.integrate(|p| h.value(p));
        }
    }

    pub fn eval(&self, x: &[f64], mu: &ParticleEnsemble) -> f64 {
        let mut u = vec![0.0; self.dim_d + self.k()];
        self.arguments(x, mu, &mut u);
        self.outer.value(&u)
    }
}

/// A time-indexed lifted functional: values for the Monte Carlo weights
/// plus a closed-form slice at fixed `t` for generator evaluation.
pub trait TimeLifted: Send + Sync {
    fn value(&self, t: f64, x: &[f64], mu: &ParticleEnsemble) -> f64;
    /// Materializes `f(t, ., .)` as a lifted functional.
    fn at(&self, t: f64) -> LiftedFunctional;
}

/// Time-indexed functional built from closures.
pub struct FnTimeLifted {
    slice: Box<dyn Fn(f64) -> LiftedFunctional + Send + Sync>,
}

impl FnTimeLifted {
    pub fn new(slice: Box<dyn Fn(f64) -> LiftedFunctional + Send + Sync>) -> Self {
        FnTimeLifted { slice }
    }
}

impl TimeLifted for FnTimeLifted {
    fn value(&self, t: f64, x: &[f64], mu: &ParticleEnsemble) -> f64 {
        (self.slice)(t).eval(x, mu)
    }
    fn at(&self, t: f64) -> LiftedFunctional {
        (self.slice)(t)
    }
}
