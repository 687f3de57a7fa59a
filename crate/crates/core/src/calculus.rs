//! Intrinsic-derivative calculus on cylindrical functionals and the
//! generators of the measure-valued dynamics.
//!
//! For `f(mu) = g(mu(h_1), ..., mu(h_k))` the derivative fields are closed
//! form, and the generator acting on measures reads
//!
//! ```text
//! A_t f(mu) = 1/2 int int <sigma(t,y,mu) sigma(t,z,mu)^T, D^2 f(mu)(y,z)> mu(dy) mu(dz)
//!           + int ( 1/2 <(sigma sigma^T)(t,y,mu), grad{Df(mu)}(y)>
//!                   + <b(t,y,mu), Df(mu)(y)> ) mu(dy)
//! ```
//!
//! with every `mu`-integral an ensemble average (exact for empirical
//! measures). The extension to state-measure functionals adds the classical
//! Ito terms in the state slot plus a cross term pairing the tagged noise
//! with the ensemble noise; since all particles share one Brownian path the
//! cross quadratic covariation is `(sigma(x) sigma(y)^T)` summed against the
//! mixed derivative block.
//!
//! Martingale tests integrate the generator along simulated paths and check
//! that the compensated functional has mean zero. Derivative flows integrate
//! the linearized dynamics: the state Jacobian along a frozen path, and the
//! Lions kernel system coupling all base particles.

use alloc::vec;
use alloc::vec::Vec;

use crate::coefficients::Coefficients;
use crate::error::{Error, Result};
use crate::functionals::{CylindricalFunctional, LiftedFunctional, ScalarFunction};
use crate::mat::{dot, Mat};
use crate::measures::{ParticleEnsemble, TaggedEnsemble};
use crate::solver::{n_steps_between, simulate_with, BrownianPath};
use crate::stats::Estimate;

/// Largest ensemble accepted by the Lions-kernel flow (state is
/// `O(n^2 d^2)` and each step couples all particle pairs).
pub const LIONS_FLOW_MAX_N: usize = 256;

/// Closed-form intrinsic derivative `Df(mu)(x)` of a cylindrical functional.
pub fn lions_derivative_closed(
    f: &CylindricalFunctional,
    mu: &ParticleEnsemble,
    x: &[f64],
    out: &mut [f64],
) {
    let k = f.k();
    let d = f.dim_d();
    let mut u = vec![0.0; k];
    f.statistics(mu, &mut u);
    let mut gg = vec![0.0; k];
    f.outer().gradient(&u, &mut gg);
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut grad_h = vec![0.0; d];
    for i in 0..k {
        f.inner(i).gradient(x, &mut grad_h);
        for j in 0..d {
            out[j] += gg[i] * grad_h[j];
        }
    }
}

/// Numerical directional derivative of an arbitrary functional on measures
/// by central differences through the exact pushforward perturbation.
pub fn lions_derivative_numeric<F, P>(
    f: F,
    mu: &ParticleEnsemble,
    phi: P,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&ParticleEnsemble) -> f64,
    P: Fn(&[f64], &mut [f64]),
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("step must be positive"));
    }
    let plus = mu.perturb(&phi, eps)?;
    let minus = mu.perturb(&phi, -eps)?;
    Ok((f(&plus) - f(&minus)) / (2.0 * eps))
}

/// Closed-form second derivative `D^2 f(mu)(x, y)` (a `d x d` matrix).
pub fn second_lions_closed(
    f: &CylindricalFunctional,
    mu: &ParticleEnsemble,
    x: &[f64],
    y: &[f64],
    out: &mut Mat,
) {
    let k = f.k();
    let d = f.dim_d();
    let mut u = vec![0.0; k];
    f.statistics(mu, &mut u);
    let mut hess = Mat::zeros(k, k);
    f.outer().hessian(&u, &mut hess);
    out.fill(0.0);
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    for i in 0..k {
        f.inner(i).gradient(x, &mut gx);
        for j in 0..k {
            let hij = hess.get(i, j);
            if hij == 0.0 {
                continue;
            }
            f.inner(j).gradient(y, &mut gy);
            for r in 0..d {
                for c in 0..d {
                    out.set(r, c, out.get(r, c) + hij * gx[r] * gy[c]);
                }
            }
        }
    }
}

/// `grad{Df(mu)}(x) = sum_i d_i g(mu(h)) grad^2 h_i(x)`.
pub fn nabla_lions_closed(
    f: &CylindricalFunctional,
    mu: &ParticleEnsemble,
    x: &[f64],
    out: &mut Mat,
) {
    let k = f.k();
    let d = f.dim_d();
    let mut u = vec![0.0; k];
    f.statistics(mu, &mut u);
    let mut gg = vec![0.0; k];
    f.outer().gradient(&u, &mut gg);
    out.fill(0.0);
    let mut hh = Mat::zeros(d, d);
    for i in 0..k {
        if gg[i] == 0.0 {
            continue;
        }
        f.inner(i).hessian(x, &mut hh);
        out.axpy(gg[i], &hh);
    }
}

/// Reusable buffers for generator evaluation; martingale integrals call
/// the generator at every grid point, so the buffers are hoisted out of
/// the loop.
pub struct GeneratorWorkspace {
    u: Vec<f64>,
    grad: Vec<f64>,
    hess: Mat,
    particles: ParticleBuffers,
    scratch: TermScratch,
}

impl Default for GeneratorWorkspace {
    fn default() -> Self {
        GeneratorWorkspace {
            u: Vec::new(),
            grad: Vec::new(),
            hess: Mat::zeros(0, 0),
            particles: ParticleBuffers {
                n: 0,
                d: 0,
                k: 0,
                m: 0,
                sigmas: Vec::new(),
                drifts: Vec::new(),
                grads: Vec::new(),
            },
            scratch: TermScratch {
                hh: Mat::zeros(0, 0),
                nabla_df: Mat::zeros(0, 0),
                sig_point: Mat::zeros(0, 0),
                b_point: Vec::new(),
            },
        }
    }
}

fn ensure_mat(mat: &mut Mat, rows: usize, cols: usize) {
    if mat.rows() != rows || mat.cols() != cols {
        *mat = Mat::zeros(rows, cols);
    }
}

fn ensure_vec(v: &mut Vec<f64>, len: usize) {
    if v.len() != len {
        v.resize(len, 0.0);
    }
}

/// Per-particle coefficient and observable data shared by the generator
/// terms: `sigma_l`, `b_l`, and `grad h_i(y_l)` for every statistic, all
/// stored flat.
struct ParticleBuffers {
    n: usize,
    d: usize,
    k: usize,
    m: usize,
    sigmas: Vec<f64>, // [l][r][q]
    drifts: Vec<f64>, // [l][r]
    grads: Vec<f64>,  // [l][i][r]
}

struct TermScratch {
    hh: Mat,
    nabla_df: Mat,
    sig_point: Mat,
    b_point: Vec<f64>,
}

impl ParticleBuffers {
    fn collect<'a, C: Coefficients + ?Sized>(
        &mut self,
        inner: &dyn Fn(usize) -> &'a dyn ScalarFunction,
        k: usize,
        t: f64,
        mu: &ParticleEnsemble,
        coeffs: &C,
        sig_scratch: &mut Mat,
    ) {
        let n = mu.len();
        let d = mu.dim();
        let m = coeffs.dim_m();
        self.n = n;
        self.d = d;
        self.k = k;
        self.m = m;
        ensure_vec(&mut self.sigmas, n * d * m);
        ensure_vec(&mut self.drifts, n * d);
        ensure_vec(&mut self.grads, n * k * d);
        ensure_mat(sig_scratch, d, m);
        for (l, y) in mu.iter().enumerate() {
            coeffs.diffusion(t, y, mu, sig_scratch);
            self.sigmas[l * d * m..(l + 1) * d * m].copy_from_slice(sig_scratch.data());
            coeffs.drift(t, y, mu, &mut self.drifts[l * d..(l + 1) * d]);
            for i in 0..k {
                inner(i).gradient(y, &mut self.grads[(l * k + i) * d..(l * k + i + 1) * d]);
            }
        }
    }

    fn sigma(&self, l: usize) -> &[f64] {
        &self.sigmas[l * self.d * self.m..(l + 1) * self.d * self.m]
    }

    fn grad(&self, l: usize, i: usize) -> &[f64] {
        &self.grads[(l * self.k + i) * self.d..(l * self.k + i + 1) * self.d]
    }

    fn drift(&self, l: usize) -> &[f64] {
        &self.drifts[l * self.d..(l + 1) * self.d]
    }
}

/// The three measure-slot terms of the generator, shared by the plain and
/// the lifted version. `gg` are the outer derivatives in the statistics
/// slots and `hess` is the outer Hessian with `offset` locating those
/// slots.
fn generator_measure_terms<'a>(
    inner: &dyn Fn(usize) -> &'a dyn ScalarFunction,
    gg: &[f64],
    hess: &Mat,
    offset: usize,
    data: &ParticleBuffers,
    scratch: &mut TermScratch,
    mu: &ParticleEnsemble,
) -> f64 {
    let n = data.n;
    let d = data.d;
    let k = data.k;
    let m = data.m;

    // (i) pair term: the outer Hessian couples all particle pairs through
    // the shared noise. Explicit double sum over pairs.
    let mut pair_term = 0.0;
    let hess_is_zero = (0..k).all(|i| (0..k).all(|j| hess.get(offset + i, offset + j) == 0.0));
    if !hess_is_zero {
        for l in 0..n {
            let sig_l = data.sigma(l);
            for p in 0..n {
                let sig_p = data.sigma(p);
                // <sigma_l sigma_p^T, D^2 f(y_l, y_p)>
                let mut acc = 0.0;
                for i in 0..k {
                    let gl = data.grad(l, i);
                    for j in 0..k {
                        let hij = hess.get(offset + i, offset + j);
                        if hij == 0.0 {
                            continue;
                        }
                        let gp = data.grad(p, j);
                        // (grad h_i(y_l))^T sigma_l sigma_p^T grad h_j(y_p)
                        let mut sl = 0.0;
                        for q in 0..m {
                            let mut a = 0.0;
                            let mut b = 0.0;
                            for r in 0..d {
                                a += sig_l[r * m + q] * gl[r];
                                b += sig_p[r * m + q] * gp[r];
                            }
                            sl += a * b;
                        }
                        acc += hij * sl;
                    }
                }
                pair_term += acc;
            }
        }
        pair_term *= 0.5 / (n * n) as f64;
    }

    // (ii) diffusion term and (iii) drift term, single averages.
    ensure_mat(&mut scratch.hh, d, d);
    ensure_mat(&mut scratch.nabla_df, d, d);
    let gg_all_zero = gg.iter().all(|g| *g == 0.0);
    let mut single = 0.0;
    for l in 0..n {
        if gg_all_zero {
            break;
        }
        let y = mu.position(l);
        scratch.nabla_df.fill(0.0);
        for i in 0..k {
            if gg[i] == 0.0 {
                continue;
            }
            inner(i).hessian(y, &mut scratch.hh);
            scratch.nabla_df.axpy(gg[i], &scratch.hh);
        }
        let sig = data.sigma(l);
        let mut acc = 0.0;
        for r in 0..d {
            for c in 0..d {
                let mut ssq = 0.0;
                for q in 0..m {
                    ssq += sig[r * m + q] * sig[c * m + q];
                }
                acc += ssq * scratch.nabla_df.get(r, c);
            }
        }
        single += 0.5 * acc;

        let b = data.drift(l);
        let mut bd = 0.0;
        for i in 0..k {
            if gg[i] == 0.0 {
                continue;
            }
            bd += gg[i] * dot(b, data.grad(l, i));
        }
        single += bd;
    }
    pair_term + single / n as f64
}

/// Generator of the measure-valued dynamics on a cylindrical functional,
/// reusing the supplied workspace.
pub fn generator_a_with<C: Coefficients + ?Sized>(
    f: &CylindricalFunctional,
    t: f64,
    mu: &ParticleEnsemble,
    coeffs: &C,
    ws: &mut GeneratorWorkspace,
) -> f64 {
    let k = f.k();
    ensure_vec(&mut ws.u, k);
    ensure_vec(&mut ws.grad, k);
    ensure_mat(&mut ws.hess, k, k);
    f.statistics(mu, &mut ws.u);
    f.outer().gradient(&ws.u, &mut ws.grad);
    f.outer().hessian(&ws.u, &mut ws.hess);

    let getter = |i: usize| f.inner(i);
    ws.particles
        .collect(&getter, k, t, mu, coeffs, &mut ws.scratch.sig_point);
    generator_measure_terms(
        &getter,
        &ws.grad,
        &ws.hess,
        0,
        &ws.particles,
        &mut ws.scratch,
        mu,
    )
}

/// Generator of the measure-valued dynamics on a cylindrical functional.
pub fn generator_a<C: Coefficients + ?Sized>(
    f: &CylindricalFunctional,
    t: f64,
    mu: &ParticleEnsemble,
    coeffs: &C,
) -> f64 {
    let mut ws = GeneratorWorkspace::default();
    generator_a_with(f, t, mu, coeffs, &mut ws)
}

/// Generator of the coupled (state, measure) dynamics on a lifted
/// functional, reusing the supplied workspace.
pub fn generator_a_tilde_with<C: Coefficients + ?Sized>(
    f: &LiftedFunctional,
    t: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    coeffs: &C,
    ws: &mut GeneratorWorkspace,
) -> f64 {
    let d = f.dim_d();
    let k = f.k();
    let m = coeffs.dim_m();
    ensure_vec(&mut ws.u, d + k);
    ensure_vec(&mut ws.grad, d + k);
    ensure_mat(&mut ws.hess, d + k, d + k);
    f.arguments(x, mu, &mut ws.u);
    f.outer().gradient(&ws.u, &mut ws.grad);
    f.outer().hessian(&ws.u, &mut ws.hess);

    let getter = |i: usize| f.inner(i);
    ws.particles
        .collect(&getter, k, t, mu, coeffs, &mut ws.scratch.sig_point);

    // measure-slot generator with x frozen
    let total_mu = generator_measure_terms(
        &getter,
        &ws.grad[d..],
        &ws.hess,
        d,
        &ws.particles,
        &mut ws.scratch,
        mu,
    );

    // classical Ito terms in the state slot
    ensure_mat(&mut ws.scratch.sig_point, d, m);
    ensure_vec(&mut ws.scratch.b_point, d);
    coeffs.diffusion(t, x, mu, &mut ws.scratch.sig_point);
    coeffs.drift(t, x, mu, &mut ws.scratch.b_point);
    let sig_x = ws.scratch.sig_point.data();
    let mut classical = 0.0;
    for r in 0..d {
        classical += ws.scratch.b_point[r] * ws.grad[r];
        for c in 0..d {
            let mut ssq = 0.0;
            for q in 0..m {
                ssq += sig_x[r * m + q] * sig_x[c * m + q];
            }
            classical += 0.5 * ssq * ws.hess.get(r, c);
        }
    }

    // cross term: covariation of the tagged noise with the ensemble noise.
    // For base particle y, the mixed block D[d_{x_r} f](y)_c pairs with
    // (sigma(x) sigma(y)^T)_{rc}.
    let n = mu.len();
    let mut cross = 0.0;
    for l in 0..n {
        let sig_l = ws.particles.sigma(l);
        for r in 0..d {
            for i in 0..k {
                let hri = ws.hess.get(r, d + i);
                if hri == 0.0 {
                    continue;
                }
                let gl = ws.particles.grad(l, i);
                // sum_c grad h_i(y_l)_c (sigma(x) sigma(y_l)^T)_{rc}
                let mut acc = 0.0;
                for q in 0..m {
                    let mut b = 0.0;
                    for c in 0..d {
                        b += sig_l[c * m + q] * gl[c];
                    }
                    acc += sig_x[r * m + q] * b;
                }
                cross += hri * acc;
            }
        }
    }
    cross /= n as f64;

    total_mu + classical + cross
}

/// Generator of the coupled (state, measure) dynamics on a lifted
/// functional `f(x, mu) = g(x, mu(h_1), ..., mu(h_k))`.
pub fn generator_a_tilde<C: Coefficients + ?Sized>(
    f: &LiftedFunctional,
    t: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    coeffs: &C,
) -> f64 {
    let mut ws = GeneratorWorkspace::default();
    generator_a_tilde_with(f, t, x, mu, coeffs, &mut ws)
}

/// Square field `Gamma(f,g)(mu) = int <Df, Dg> dmu`.
pub fn square_field(
    f: &CylindricalFunctional,
    g: &CylindricalFunctional,
    mu: &ParticleEnsemble,
) -> f64 {
    let d = f.dim_d();
    let n = mu.len();
    let mut df = vec![0.0; d];
    let mut dg = vec![0.0; d];
    let mut acc = 0.0;
    for x in mu.iter() {
        lions_derivative_closed(f, mu, x, &mut df);
        lions_derivative_closed(g, mu, x, &mut dg);
        acc += dot(&df, &dg);
    }
    acc / n as f64
}

/// Laplacian `Delta f(mu) = int tr D^2 f(mu)(x,x) mu(dx)`.
pub fn laplacian(f: &CylindricalFunctional, mu: &ParticleEnsemble) -> f64 {
    let d = f.dim_d();
    let n = mu.len();
    let mut dd = Mat::zeros(d, d);
    let mut acc = 0.0;
    for x in mu.iter() {
        second_lions_closed(f, mu, x, x, &mut dd);
        for r in 0..d {
            acc += dd.get(r, r);
        }
    }
    acc / n as f64
}

/// Square field of the measure dynamics,
/// `Gamma_t(f,g)(mu) = int int <sigma^T Df(x), sigma^T Dg(y)> dmu dmu`.
pub fn square_field_t<C: Coefficients + ?Sized>(
    f: &CylindricalFunctional,
    g: &CylindricalFunctional,
    t: f64,
    mu: &ParticleEnsemble,
    coeffs: &C,
) -> f64 {
    let d = f.dim_d();
    let m = coeffs.dim_m();
    let n = mu.len();
    let mut df = vec![0.0; d];
    let mut dg = vec![0.0; d];
    let mut sig = Mat::zeros(d, m);
    let mut vf = vec![0.0; m];
    let mut vg = vec![0.0; m];
    let mut sum_f = vec![0.0; m];
    let mut sum_g = vec![0.0; m];
    for x in mu.iter() {
        coeffs.diffusion(t, x, mu, &mut sig);
        lions_derivative_closed(f, mu, x, &mut df);
        lions_derivative_closed(g, mu, x, &mut dg);
        for q in 0..m {
            vf[q] = 0.0;
            vg[q] = 0.0;
            for r in 0..d {
                vf[q] += sig.get(r, q) * df[r];
                vg[q] += sig.get(r, q) * dg[r];
            }
        }
        for q in 0..m {
            sum_f[q] += vf[q];
            sum_g[q] += vg[q];
        }
    }
    dot(&sum_f, &sum_g) / (n * n) as f64
}

/// Replication setup for the martingale tests.
#[derive(Debug, Clone)]
pub struct MartingaleConfig {
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
    pub replicas: usize,
    pub seed: u64,
    pub stream_offset: u64,
}

/// Compensated value of one replica:
/// `f(L_T) - f(mu) - int_s^T A_r f(L_r) dr` (trapezoid in time).
pub fn martingale_replica<C: Coefficients + ?Sized>(
    f: &CylindricalFunctional,
    mu: &ParticleEnsemble,
    coeffs: &C,
    cfg: &MartingaleConfig,
    replica: usize,
) -> Result<f64> {
    let steps = n_steps_between(cfg.t_start, cfg.t_end, cfg.dt)?;
    let path = BrownianPath::sample(
        cfg.seed,
        cfg.stream_offset + replica as u64,
        coeffs.dim_m(),
        cfg.dt,
        steps,
        cfg.t_start,
    )?;
    let initial = TaggedEnsemble::without_tags(mu.clone());
    let mut integral = 0.0;
    let mut prev = 0.0;
    let mut terminal_value = 0.0;
    let mut ws = GeneratorWorkspace::default();
    simulate_with(&initial, cfg.t_start, cfg.t_end, coeffs, &path, |k, t, st| {
        let a = generator_a_with(f, t, st.base(), coeffs, &mut ws);
        if k > 0 {
            integral += 0.5 * cfg.dt * (prev + a);
        }
        prev = a;
        if k == steps {
            terminal_value = f.eval(st.base());
        }
    })?;
    Ok(terminal_value - f.eval(mu) - integral)
}

/// Monte Carlo mean of the compensated functional; the martingale property
/// of the dynamics predicts mean zero.
pub fn martingale_test<C: Coefficients + ?Sized>(
    f: &CylindricalFunctional,
    mu: &ParticleEnsemble,
    coeffs: &C,
    cfg: &MartingaleConfig,
) -> Result<Estimate> {
    let mut values = Vec::with_capacity(cfg.replicas);
    for r in 0..cfg.replicas {
        values.push(martingale_replica(f, mu, coeffs, cfg, r)?);
    }
    Ok(Estimate::from_values(&values))
}

/// Compensated value of one replica of the coupled (state, measure) test.
pub fn martingale_replica_tilde<C: Coefficients + ?Sized>(
    f: &LiftedFunctional,
    x: &[f64],
    mu: &ParticleEnsemble,
    coeffs: &C,
    cfg: &MartingaleConfig,
    replica: usize,
) -> Result<f64> {
    let steps = n_steps_between(cfg.t_start, cfg.t_end, cfg.dt)?;
    let path = BrownianPath::sample(
        cfg.seed,
        cfg.stream_offset + replica as u64,
        coeffs.dim_m(),
        cfg.dt,
        steps,
        cfg.t_start,
    )?;
    let initial = TaggedEnsemble::new(mu.clone(), x.to_vec())?;
    let mut integral = 0.0;
    let mut prev = 0.0;
    let mut terminal_value = 0.0;
    let mut ws = GeneratorWorkspace::default();
    simulate_with(&initial, cfg.t_start, cfg.t_end, coeffs, &path, |k, t, st| {
        let a = generator_a_tilde_with(f, t, st.tagged(0), st.base(), coeffs, &mut ws);
        if k > 0 {
            integral += 0.5 * cfg.dt * (prev + a);
        }
        prev = a;
        if k == steps {
            terminal_value = f.eval(st.tagged(0), st.base());
        }
    })?;
    Ok(terminal_value - f.eval(x, mu) - integral)
}

/// Monte Carlo martingale test for the coupled dynamics.
pub fn martingale_test_tilde<C: Coefficients + ?Sized>(
    f: &LiftedFunctional,
    x: &[f64],
    mu: &ParticleEnsemble,
    coeffs: &C,
    cfg: &MartingaleConfig,
) -> Result<Estimate> {
    let mut values = Vec::with_capacity(cfg.replicas);
    for r in 0..cfg.replicas {
        values.push(martingale_replica_tilde(f, x, mu, coeffs, cfg, r)?);
    }
    Ok(Estimate::from_values(&values))
}

/// Jacobian flow of the tagged state along one path.
#[derive(Debug, Clone)]
pub struct NablaFlow {
    pub times: Vec<f64>,
    pub mats: Vec<Mat>,
}

impl NablaFlow {
    pub fn terminal(&self) -> &Mat {
        self.mats.last().expect("flow has snapshots")
    }
}

fn add_sigma_dir_noise<C: Coefficients + ?Sized>(
    coeffs: &C,
    t: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    m_in: &Mat,
    dw: &[f64],
    out: &mut Mat,
    scratch: &mut Mat,
) {
    // per column v of m_in: out_col += (grad_x sigma(x) v) dW
    let d = x.len();
    let mut dir = vec![0.0; d];
    for c in 0..d {
        for r in 0..d {
            dir[r] = m_in.get(r, c);
        }
        coeffs.diffusion_dir_deriv(t, x, mu, &dir, scratch);
        for r in 0..d {
            let mut acc = 0.0;
            for (q, w) in dw.iter().enumerate() {
                acc += scratch.get(r, q) * w;
            }
            out.set(r, c, out.get(r, c) + acc);
        }
    }
}

/// Integrates the linearized state equation
/// `dv = grad b(X) v dt + (grad sigma(X) v) dW` alongside the main
/// simulation on the same path, starting from the identity.
pub fn nabla_flow<C: Coefficients + ?Sized>(
    s: f64,
    t_end: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    coeffs: &C,
    path: &BrownianPath,
) -> Result<NablaFlow> {
    let d = coeffs.dim_d();
    let m = coeffs.dim_m();
    let k0 = path.grid_index(s)?;
    let k1 = path.grid_index(t_end)?;
    let dt = path.dt();

    let mut state = TaggedEnsemble::new(mu.clone(), x.to_vec())?;
    let mut v = Mat::identity(d);
    let mut times = vec![s];
    let mut mats = vec![v.clone()];

    let mut jb = Mat::zeros(d, d);
    let mut drift_part = Mat::zeros(d, d);
    let mut scratch = Mat::zeros(d, m);

    for k in k0..k1 {
        let t = path.t0() + k as f64 * dt;
        let dw = path.increment(k);
        let tagged = state.tagged(0).to_vec();
        coeffs.drift_jacobian(t, &tagged, state.base(), &mut jb);
        jb.matmul(&v, &mut drift_part);
        let mut v_next = v.clone();
        v_next.axpy(dt, &drift_part);
        add_sigma_dir_noise(
            coeffs,
            t,
            &tagged,
            state.base(),
            &v,
            dw,
            &mut v_next,
            &mut scratch,
        );
        // advance the carrier state after the linearization was evaluated
        let next = crate::solver::euler_step(&state, t, coeffs, dw, dt)?;
        state = next;
        v = v_next;
        times.push(t + dt);
        mats.push(v.clone());
    }

    Ok(NablaFlow { times, mats })
}

/// Pathwise finite-difference oracle for the state Jacobian: runs tagged
/// points `x + h e_c` and `x - h e_c` on the same path and differences.
pub fn nabla_flow_fd_oracle<C: Coefficients + ?Sized>(
    s: f64,
    t_end: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    coeffs: &C,
    path: &BrownianPath,
    h: f64,
) -> Result<Mat> {
    let d = coeffs.dim_d();
    let mut tagged = Vec::with_capacity(2 * d * d);
    for c in 0..d {
        let mut plus = x.to_vec();
        plus[c] += h;
        let mut minus = x.to_vec();
        minus[c] -= h;
        tagged.extend_from_slice(&plus);
        tagged.extend_from_slice(&minus);
    }
    let initial = TaggedEnsemble::new(mu.clone(), tagged)?;
    let fin = simulate_with(&initial, s, t_end, coeffs, path, |_, _, _| {})?;
    let mut out = Mat::zeros(d, d);
    for c in 0..d {
        let plus = fin.tagged(2 * c);
        let minus = fin.tagged(2 * c + 1);
        for r in 0..d {
            out.set(r, c, (plus[r] - minus[r]) / (2.0 * h));
        }
    }
    Ok(out)
}

/// Terminal first-order derivative data of the flow at a tagged point:
/// the state Jacobian and, when computed, the Lions kernel against every
/// base particle.
#[derive(Debug, Clone)]
pub struct DerivativeFlowState {
    /// `grad_x X_{s,T}^{x,mu}` for the tagged point.
    pub nabla: Mat,
    /// `D X_{s,T}^{x,mu}(y_z)` per base index `z`.
    pub lions: Vec<Mat>,
}

/// Integrates the Lions-kernel system jointly for all base indices.
///
/// State per step: the flow Jacobian `a_u` of every base particle, the
/// base-to-base kernels `B[u][z]`, and the tagged kernels `C[z]`; all
/// evolve with the drift Jacobian, the measure kernel of the drift, and
/// the ensemble average coupling every pair. Requires closed-form measure
/// kernels and measure-free diffusion.
pub fn lions_flow<C: Coefficients + ?Sized>(
    s: f64,
    t_end: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    coeffs: &C,
    path: &BrownianPath,
) -> Result<DerivativeFlowState> {
    let n = mu.len();
    let d = coeffs.dim_d();
    let m = coeffs.dim_m();
    if n > LIONS_FLOW_MAX_N {
        return Err(Error::TooLarge {
            what: "lions_flow",
            n,
            limit: LIONS_FLOW_MAX_N,
        });
    }
    if coeffs.diffusion_depends_on_measure() {
        return Err(Error::Unsupported(
            "lions_flow requires measure-free diffusion",
        ));
    }
    {
        let mut probe = Mat::zeros(d, d);
        if !coeffs.drift_measure_kernel(s, x, mu, mu.position(0), &mut probe) {
            return Err(Error::Unsupported(
                "lions_flow requires a closed-form drift measure kernel",
            ));
        }
    }

    let k0 = path.grid_index(s)?;
    let k1 = path.grid_index(t_end)?;
    let dt = path.dt();

    let mut state = TaggedEnsemble::new(mu.clone(), x.to_vec())?;
    let mut a: Vec<Mat> = (0..n).map(|_| Mat::identity(d)).collect();
    let mut b: Vec<Mat> = (0..n * n).map(|_| Mat::zeros(d, d)).collect();
    let mut c_tag: Vec<Mat> = (0..n).map(|_| Mat::zeros(d, d)).collect();
    let mut a_tag = Mat::identity(d);

    let mut jb = vec![Mat::zeros(d, d); n];
    let mut kernels = vec![Mat::zeros(d, d); n * n];
    let mut kernels_tag = vec![Mat::zeros(d, d); n];
    let mut jb_tag = Mat::zeros(d, d);
    let mut tmp = Mat::zeros(d, d);
    let mut accum = Mat::zeros(d, d);
    let mut sig_scratch = Mat::zeros(d, m);

    for k in k0..k1 {
        let t = path.t0() + k as f64 * dt;
        let dw = path.increment(k);
        let base = state.base().clone();
        let tagged = state.tagged(0).to_vec();

        for u in 0..n {
            coeffs.drift_jacobian(t, base.position(u), &base, &mut jb[u]);
            for w in 0..n {
                coeffs.drift_measure_kernel(
                    t,
                    base.position(u),
                    &base,
                    base.position(w),
                    &mut kernels[u * n + w],
                );
            }
        }
        coeffs.drift_jacobian(t, &tagged, &base, &mut jb_tag);
        for w in 0..n {
            coeffs.drift_measure_kernel(t, &tagged, &base, base.position(w), &mut kernels_tag[w]);
        }

        // base Jacobians
        let mut a_next = a.clone();
        for u in 0..n {
            jb[u].matmul(&a[u], &mut tmp);
            a_next[u].axpy(dt, &tmp);
            add_sigma_dir_noise(
                coeffs,
                t,
                base.position(u),
                &base,
                &a[u],
                dw,
                &mut a_next[u],
                &mut sig_scratch,
            );
        }
        // tagged Jacobian
        let mut a_tag_next = a_tag.clone();
        jb_tag.matmul(&a_tag, &mut tmp);
        a_tag_next.axpy(dt, &tmp);
        add_sigma_dir_noise(
            coeffs,
            t,
            &tagged,
            &base,
            &a_tag,
            dw,
            &mut a_tag_next,
            &mut sig_scratch,
        );

        // base-to-base kernels
        let mut b_next = b.clone();
        for u in 0..n {
            for z in 0..n {
                let idx = u * n + z;
                accum.fill(0.0);
                jb[u].matmul(&b[idx], &mut tmp);
                accum.axpy(1.0, &tmp);
                kernels[u * n + z].matmul(&a[z], &mut tmp);
                accum.axpy(1.0, &tmp);
                for w in 0..n {
                    kernels[u * n + w].matmul(&b[w * n + z], &mut tmp);
                    accum.axpy(1.0 / n as f64, &tmp);
                }
                b_next[idx].axpy(dt, &accum);
                add_sigma_dir_noise(
                    coeffs,
                    t,
                    base.position(u),
                    &base,
                    &b[idx],
                    dw,
                    &mut b_next[idx],
                    &mut sig_scratch,
                );
            }
        }

        // tagged kernels
        let mut c_next = c_tag.clone();
        for z in 0..n {
            accum.fill(0.0);
            jb_tag.matmul(&c_tag[z], &mut tmp);
            accum.axpy(1.0, &tmp);
            kernels_tag[z].matmul(&a[z], &mut tmp);
            accum.axpy(1.0, &tmp);
            for w in 0..n {
                kernels_tag[w].matmul(&b[w * n + z], &mut tmp);
                accum.axpy(1.0 / n as f64, &tmp);
            }
            c_next[z].axpy(dt, &accum);
            add_sigma_dir_noise(
                coeffs,
                t,
                &tagged,
                &base,
                &c_tag[z],
                dw,
                &mut c_next[z],
                &mut sig_scratch,
            );
        }

        let next = crate::solver::euler_step(&state, t, coeffs, dw, dt)?;
        state = next;
        a = a_next;
        b = b_next;
        c_tag = c_next;
        a_tag = a_tag_next;
    }

    Ok(DerivativeFlowState {
        nabla: a_tag,
        lions: c_tag,
    })
}

/// Perturbation oracle for the Lions flow: moves every base particle by
/// `eps * phi(y)` at time `s` (the tagged point stays put), reruns on the
/// same path and differences the tagged terminal. The kernels predict
/// `(1/n) sum_z DX(y_z) phi(y_z)`.
pub fn lions_flow_oracle<C, P>(
    s: f64,
    t_end: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    coeffs: &C,
    path: &BrownianPath,
    phi: P,
    eps: f64,
) -> Result<Vec<f64>>
where
    C: Coefficients + ?Sized,
    P: Fn(&[f64], &mut [f64]),
{
    let base_run = simulate_with(
        &TaggedEnsemble::new(mu.clone(), x.to_vec())?,
        s,
        t_end,
        coeffs,
        path,
        |_, _, _| {},
    )?;
    let perturbed = mu.perturb(phi, eps)?;
    let pert_run = simulate_with(
        &TaggedEnsemble::new(perturbed, x.to_vec())?,
        s,
        t_end,
        coeffs,
        path,
        |_, _, _| {},
    )?;
    Ok(base_run
        .tagged(0)
        .iter()
        .zip(pert_run.tagged(0).iter())
        .map(|(a, b)| (b - a) / eps)
        .collect())
}
