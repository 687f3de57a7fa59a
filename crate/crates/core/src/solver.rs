//! Euler-Maruyama time stepping of the image dynamics.
//!
//! One step advances every particle, base and tagged, by
//!
//! ```text
//! p <- p + b(t, p, mu) dt + sigma(t, p, mu) dW
//! ```
//!
//! with two hard rules: the measure argument `mu` is the base ensemble
//! frozen at the start of the step, and the Brownian increment `dW` is the
//! same for every particle (common noise). Tagged particles see the same
//! `mu` and the same `dW` but never feed back into it.
//!
//! The Picard construction freezes the whole measure curve, solves the
//! resulting classical SDE on the same Brownian path, updates the curve by
//! pushforward and repeats; on a short horizon the map is a contraction and
//! the iterates converge to the direct solution.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::math::FloatExt;

use crate::coefficients::Coefficients;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::measures::{ParticleEnsemble, TaggedEnsemble};
use crate::rng;
use crate::wasserstein::index_coupling_cost;

/// Coordinates beyond this magnitude abort the run.
pub const BLOWUP_GUARD: f64 = 1e12;

/// One shared Brownian realization on a uniform grid.
///
/// Increments are i.i.d. `N(0, dt I_m)` drawn from the `(seed, stream)`
/// generator, so a path is bitwise-reproducible from its key.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    m: usize,
    dt: f64,
    t0: f64,
    increments: Vec<f64>,
    seed: u64,
    stream: u64,
}

impl BrownianPath {
    pub fn sample(
        seed: u64,
        stream: u64,
        m: usize,
        dt: f64,
        n_steps: usize,
        t0: f64,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument("step size must be positive"));
        }
        if m == 0 {
            return Err(Error::InvalidArgument("noise dimension must be positive"));
        }
        let mut rng = rng::stream(seed, stream);
        let scale = dt.sqrt();
        let increments = (0..n_steps * m)
            .map(|_| scale * rng::standard_normal(&mut rng))
            .collect();
        Ok(BrownianPath {
            m,
            dt,
            t0,
            increments,
            seed,
            stream,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.dt * self.n_steps() as f64
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len() / self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Increment of step `k` (from `t0 + k dt` to `t0 + (k+1) dt`).
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.m..(k + 1) * self.m]
    }

    /// Grid index of `t`, rejecting off-grid times.
    pub fn grid_index(&self, t: f64) -> Result<usize> {
        let raw = (t - self.t0) / self.dt;
        let k = raw.round();
        if (raw - k).abs() > 1e-9 * (1.0 + raw.abs()) || k < 0.0 {
            return Err(Error::OffGrid {
                t,
                t0: self.t0,
                dt: self.dt,
            });
        }
        let k = k as usize;
        if k > self.n_steps() {
            return Err(Error::PathTooShort {
                t0: self.t0,
                t1: self.t1(),
                s: self.t0,
                t,
            });
        }
        Ok(k)
    }
}

/// Discretization and replication parameters of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub dt: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub particles: usize,
    pub replicas: usize,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn n_steps(&self) -> Result<usize> {
        n_steps_between(self.t_start, self.t_end, self.dt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("step size must be positive"));
        }
        if self.t_end < self.t_start {
            return Err(Error::InvalidArgument("horizon must be nonnegative"));
        }
        self.n_steps()?;
        Ok(())
    }
}

/// Number of steps spanning `[s, t]` exactly with step `dt`.
pub fn n_steps_between(s: f64, t: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("step size must be positive"));
    }
    let raw = (t - s) / dt;
    let k = raw.round();
    if k < 0.0 || (raw - k).abs() > 1e-9 * (1.0 + raw.abs()) {
        return Err(Error::OffGrid { t, t0: s, dt });
    }
    Ok(k as usize)
}

/// Snapshots of the coupled (base, tagged) state along a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<TaggedEnsemble>,
    pub path_seed: u64,
    pub path_stream: u64,
}

impl Trajectory {
    pub fn terminal(&self) -> &TaggedEnsemble {
        self.states.last().expect("trajectory has snapshots")
    }
}

struct Stepper<'a, C: Coefficients + ?Sized> {
    coeffs: &'a C,
    drift: Vec<f64>,
    sigma: Mat,
    next_base: Vec<f64>,
    next_tagged: Vec<f64>,
}

impl<'a, C: Coefficients + ?Sized> Stepper<'a, C> {
    fn new(coeffs: &'a C, state: &TaggedEnsemble) -> Self {
        let d = coeffs.dim_d();
        let m = coeffs.dim_m();
        Stepper {
            coeffs,
            drift: vec![0.0; d],
            sigma: Mat::zeros(d, m),
            next_base: vec![0.0; state.base().positions().len()],
            next_tagged: vec![0.0; state.tagged_flat().len()],
        }
    }

    /// One Euler step in place. The measure argument is the pre-step base
    /// ensemble for every particle, so tagged points never influence it.
    /// Base updates land in scratch first; the state mutates only after
    /// every evaluation against the pre-step ensemble has finished.
    fn step(
        &mut self,
        state: &mut TaggedEnsemble,
        t: f64,
        dw: &[f64],
        dt: f64,
        step_idx: usize,
    ) -> Result<()> {
        let d = state.dim();
        let n = state.base().len();
        let mu = state.base();

        for i in 0..n {
            advance_point(
                self.coeffs,
                &mut self.drift,
                &mut self.sigma,
                t,
                mu.position(i),
                mu,
                dw,
                dt,
                &mut self.next_base[i * d..(i + 1) * d],
                step_idx,
                i,
            )?;
        }
        for i in 0..state.num_tagged() {
            advance_point(
                self.coeffs,
                &mut self.drift,
                &mut self.sigma,
                t,
                state.tagged(i),
                mu,
                dw,
                dt,
                &mut self.next_tagged[i * d..(i + 1) * d],
                step_idx,
                n + i,
            )?;
        }

        let (base, tagged) = state.parts_mut();
        base.positions_mut().copy_from_slice(&self.next_base);
        tagged.copy_from_slice(&self.next_tagged);
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn advance_point<C: Coefficients + ?Sized>(
    coeffs: &C,
    drift: &mut [f64],
    sigma: &mut Mat,
    t: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    dw: &[f64],
    dt: f64,
    slot: &mut [f64],
    step_idx: usize,
    particle: usize,
) -> Result<()> {
    coeffs.drift(t, x, mu, drift);
    coeffs.diffusion(t, x, mu, sigma);
    for j in 0..x.len() {
        let mut noise = 0.0;
        let row = sigma.row(j);
        for (s, w) in row.iter().zip(dw.iter()) {
            noise += s * w;
        }
        let v = x[j] + drift[j] * dt + noise;
        if !v.is_finite() || v.abs() > BLOWUP_GUARD {
            return Err(Error::Blowup {
                step: step_idx,
                particle,
            });
        }
        slot[j] = v;
    }
    Ok(())
}

/// One Euler step of the image dynamics; every particle sees the pre-step
/// base ensemble and the same increment `dw`.
pub fn euler_step<C: Coefficients + ?Sized>(
    state: &TaggedEnsemble,
    t: f64,
    coeffs: &C,
    dw: &[f64],
    dt: f64,
) -> Result<TaggedEnsemble> {
    if dw.len() != coeffs.dim_m() {
        return Err(Error::DimensionMismatch {
            expected: coeffs.dim_m(),
            found: dw.len(),
        });
    }
    let mut next = state.clone();
    let mut stepper = Stepper::new(coeffs, state);
    stepper.step(&mut next, t, dw, dt, 0)?;
    Ok(next)
}

/// Drives the dynamics over `[s, t_end]` on `path`, invoking `observe` at
/// every grid time (including both endpoints) with the step index, the time
/// and the current state. Returns the terminal state.
pub fn simulate_with<C, F>(
    initial: &TaggedEnsemble,
    s: f64,
    t_end: f64,
    coeffs: &C,
    path: &BrownianPath,
    mut observe: F,
) -> Result<TaggedEnsemble>
where
    C: Coefficients + ?Sized,
    F: FnMut(usize, f64, &TaggedEnsemble),
{
    if initial.dim() != coeffs.dim_d() {
        return Err(Error::DimensionMismatch {
            expected: coeffs.dim_d(),
            found: initial.dim(),
        });
    }
    if path.m() != coeffs.dim_m() {
        return Err(Error::DimensionMismatch {
            expected: coeffs.dim_m(),
            found: path.m(),
        });
    }
    let k0 = path.grid_index(s)?;
    let k1 = path.grid_index(t_end)?;
    if k1 < k0 {
        return Err(Error::InvalidArgument("horizon must be nonnegative"));
    }

    let mut state = initial.clone();
    let mut stepper = Stepper::new(coeffs, &state);
    let dt = path.dt();
    observe(0, path.t0() + k0 as f64 * dt, &state);
    for k in k0..k1 {
        let t = path.t0() + k as f64 * dt;
        stepper.step(&mut state, t, path.increment(k), dt, k)?;
        observe(k + 1 - k0, t + dt, &state);
    }
    Ok(state)
}

/// Integrates the image SDE and records a snapshot at every grid time.
pub fn simulate<C: Coefficients + ?Sized>(
    mu0: &ParticleEnsemble,
    tagged0: &[f64],
    s: f64,
    t_end: f64,
    coeffs: &C,
    path: &BrownianPath,
) -> Result<Trajectory> {
    let initial = TaggedEnsemble::new(mu0.clone(), tagged0.to_vec())?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    simulate_with(&initial, s, t_end, coeffs, path, |_, t, st| {
        times.push(t);
        states.push(st.clone());
    })?;
    Ok(Trajectory {
        times,
        states,
        path_seed: path.seed(),
        path_stream: path.stream(),
    })
}

/// Strong solution of the conditional-distribution-dependent dynamics: each
/// initial sample rides as a tagged particle on the image ensemble, and the
/// conditional law of the solution given the noise is the base pushforward.
pub fn conditional_mkv_solve<C: Coefficients + ?Sized>(
    mu0: &ParticleEnsemble,
    x0_samples: &[f64],
    s: f64,
    t_end: f64,
    coeffs: &C,
    path: &BrownianPath,
) -> Result<Trajectory> {
    simulate(mu0, x0_samples, s, t_end, coeffs, path)
}

/// Outcome of the fixed-point construction on a short horizon.
#[derive(Debug, Clone)]
pub struct PicardResult {
    /// Base-ensemble trajectory of the final iterate.
    pub trajectory: Trajectory,
    /// Sup-over-grid index coupling cost between successive iterates.
    pub distances: Vec<f64>,
    /// Successive ratios `distances[k] / distances[k-1]`.
    pub ratios: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Picard iteration for the image SDE: freeze the measure curve, solve the
/// classical SDE on the same path, update the curve by pushforward. The
/// zeroth curve is the initial measure frozen in time.
pub fn picard_solve<C: Coefficients + ?Sized>(
    mu0: &ParticleEnsemble,
    s: f64,
    horizon: f64,
    coeffs: &C,
    path: &BrownianPath,
    max_iters: usize,
    tol: f64,
) -> Result<PicardResult> {
    if max_iters == 0 {
        return Err(Error::InvalidArgument("need at least one iteration"));
    }
    let t_end = s + horizon;
    let k0 = path.grid_index(s)?;
    let k1 = path.grid_index(t_end)?;
    let n_steps = k1 - k0;
    let dt = path.dt();
    let d = mu0.dim();
    let n = mu0.len();

    let mut curve: Vec<ParticleEnsemble> = vec![mu0.clone(); n_steps + 1];
    let mut distances = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    let mut drift = vec![0.0; d];
    let mut sigma = Mat::zeros(d, coeffs.dim_m());

    for _iter in 0..max_iters {
        iterations += 1;
        let mut positions = mu0.positions().to_vec();
        let mut new_curve = Vec::with_capacity(n_steps + 1);
        new_curve.push(mu0.clone());
        for k in 0..n_steps {
            let t = path.t0() + (k0 + k) as f64 * dt;
            let frozen = &curve[k];
            let dw = path.increment(k0 + k);
            for i in 0..n {
                let xi: Vec<f64> = positions[i * d..(i + 1) * d].to_vec();
                coeffs.drift(t, &xi, frozen, &mut drift);
                coeffs.diffusion(t, &xi, frozen, &mut sigma);
                for j in 0..d {
                    let mut noise = 0.0;
                    let row = sigma.row(j);
                    for (sv, wv) in row.iter().zip(dw.iter()) {
                        noise += sv * wv;
                    }
                    let v = xi[j] + drift[j] * dt + noise;
                    if !v.is_finite() || v.abs() > BLOWUP_GUARD {
                        return Err(Error::Blowup {
                            step: k0 + k,
                            particle: i,
                        });
                    }
                    positions[i * d + j] = v;
                }
            }
            new_curve.push(ParticleEnsemble::new(d, positions.clone())?);
        }

        let mut dist = 0.0f64;
        for (a, b) in new_curve.iter().zip(curve.iter()) {
            dist = dist.max(index_coupling_cost(a, b)?);
        }
        distances.push(dist);
        curve = new_curve;
        if dist < tol {
            converged = true;
            break;
        }
    }

    let ratios = distances
        .windows(2)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
        .collect();

    let times: Vec<f64> = (0..=n_steps)
        .map(|k| path.t0() + (k0 + k) as f64 * dt)
        .collect();
    let states: Vec<TaggedEnsemble> = curve
        .into_iter()
        .map(TaggedEnsemble::without_tags)
        .collect();

    Ok(PicardResult {
        trajectory: Trajectory {
            times,
            states,
            path_seed: path.seed(),
            path_stream: path.stream(),
        },
        distances,
        ratios,
        converged,
        iterations,
    })
}

/// Flow-property check: compares the direct run over `[s, t_end]` against a
/// run restarted at `r` from the `[s, r]` terminal state on the same path
/// tail. On matching grids the two step sequences are identical, so the
/// discrepancy is exactly zero.
pub fn flow_compose_check<C: Coefficients + ?Sized>(
    mu0: &ParticleEnsemble,
    tagged0: &[f64],
    s: f64,
    r: f64,
    t_end: f64,
    coeffs: &C,
    path: &BrownianPath,
) -> Result<f64> {
    if !(s <= r && r <= t_end) {
        return Err(Error::InvalidArgument("need s <= r <= t_end"));
    }
    let initial = TaggedEnsemble::new(mu0.clone(), tagged0.to_vec())?;
    let direct = simulate_with(&initial, s, t_end, coeffs, path, |_, _, _| {})?;
    let mid = simulate_with(&initial, s, r, coeffs, path, |_, _, _| {})?;
    let restarted = simulate_with(&mid, r, t_end, coeffs, path, |_, _, _| {})?;

    let mut disc = 0.0f64;
    for (a, b) in direct
        .base()
        .positions()
        .iter()
        .zip(restarted.base().positions().iter())
    {
        disc = disc.max((a - b).abs());
    }
    for (a, b) in direct
        .tagged_flat()
        .iter()
        .zip(restarted.tagged_flat().iter())
    {
        disc = disc.max((a - b).abs());
    }
    Ok(disc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::LinearMeanField;
    use crate::wasserstein;

    fn ens(d: usize, xs: &[f64]) -> ParticleEnsemble {
        ParticleEnsemble::new(d, xs.to_vec()).unwrap()
    }

    #[test]
    fn zero_coefficients_leave_state_unchanged() {
        let zero = LinearMeanField::scalar(0.0, 0.0, 0.0);
        let state = TaggedEnsemble::new(ens(1, &[1.0, -2.0]), vec![0.5]).unwrap();
        let next = euler_step(&state, 0.0, &zero, &[0.3], 0.01).unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn unit_noise_translates_every_particle() {
        let unit = LinearMeanField::scalar(0.0, 0.0, 1.0);
        let mu = ens(1, &[0.0, 1.0, 3.0]);
        let state = TaggedEnsemble::without_tags(mu.clone());
        let dw = [0.7];
        let next = euler_step(&state, 0.0, &unit, &dw, 0.01).unwrap();
        let shifted = mu.pushforward(|x, out| out[0] = x[0] + 0.7).unwrap();
        assert_eq!(next.base(), &shifted);
        assert_eq!(wasserstein::w2(next.base(), &shifted).unwrap(), 0.0);
    }

    #[test]
    fn deterministic_linear_step_is_euler_map() {
        let a = 0.8;
        let lin = LinearMeanField::scalar(a, 0.0, 0.0);
        let state = TaggedEnsemble::without_tags(ens(1, &[2.0]));
        let dt = 0.05;
        let next = euler_step(&state, 0.0, &lin, &[0.0], dt).unwrap();
        assert!((next.base().position(0)[0] - 2.0 * (1.0 - a * dt)).abs() < 1e-15);
    }

    #[test]
    fn common_noise_increment_is_reconstructible() {
        // with sigma = 1 and known drift, dW must agree across particles
        let lmf = LinearMeanField::scalar(1.0, 0.5, 1.0);
        let mu = ens(1, &[0.4, -1.0, 2.0]);
        let path = BrownianPath::sample(5, 0, 1, 0.01, 1, 0.0).unwrap();
        let state = TaggedEnsemble::without_tags(mu.clone());
        let next = euler_step(&state, 0.0, &lmf, path.increment(0), 0.01).unwrap();
        let mean = mu.mean()[0];
        let mut recovered = Vec::new();
        for i in 0..3 {
            let x = mu.position(i)[0];
            let b = -x + 0.5 * mean;
            recovered.push(next.base().position(i)[0] - x - b * 0.01);
        }
        assert!((recovered[0] - recovered[1]).abs() < 1e-15);
        assert!((recovered[1] - recovered[2]).abs() < 1e-15);
        assert!((recovered[0] - path.increment(0)[0]).abs() < 1e-15);
    }

    #[test]
    fn dirac_base_equals_tagged_copy() {
        let lmf = LinearMeanField::scalar(1.0, 0.5, 1.0);
        let x = [0.7];
        let mu = ParticleEnsemble::dirac(&x).unwrap();
        let path = BrownianPath::sample(9, 0, 1, 0.01, 50, 0.0).unwrap();
        let traj = simulate(&mu, &x, 0.0, 0.5, &lmf, &path).unwrap();
        for st in &traj.states {
            assert_eq!(st.base().position(0), st.tagged(0));
        }
    }

    #[test]
    fn linear_flow_is_affine_image() {
        // b = -a x, sigma const: terminal = alpha * x + beta for all particles
        let lmf = LinearMeanField::scalar(1.0, 0.0, 0.5);
        let mu = ens(1, &[-1.0, 0.3, 2.0]);
        let path = BrownianPath::sample(13, 0, 1, 1e-3, 1000, 0.0).unwrap();
        let traj = simulate(&mu, &[], 0.0, 1.0, &lmf, &path).unwrap();
        let terminal = traj.terminal().base();
        let x = [
            mu.position(0)[0],
            mu.position(1)[0],
            mu.position(2)[0],
        ];
        let y = [
            terminal.position(0)[0],
            terminal.position(1)[0],
            terminal.position(2)[0],
        ];
        let alpha = (y[1] - y[0]) / (x[1] - x[0]);
        let beta = y[0] - alpha * x[0];
        assert!((alpha * x[2] + beta - y[2]).abs() < 1e-12);
        // contraction factor close to e^{-aT}
        assert!((alpha - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn synchronous_coupling_contracts_index_cost() {
        let lmf = LinearMeanField::scalar(1.0, 0.5, 1.0);
        let constants = lmf.constants().unwrap();
        let rate = constants.lambda - constants.kappa;
        let mu = ens(1, &[0.0, 1.0, -0.5, 2.0]);
        let nu = ens(1, &[0.5, -1.0, 1.5, 0.25]);
        let path = BrownianPath::sample(21, 0, 1, 1e-3, 1000, 0.0).unwrap();
        let tmu = simulate(&mu, &[], 0.0, 1.0, &lmf, &path).unwrap();
        let tnu = simulate(&nu, &[], 0.0, 1.0, &lmf, &path).unwrap();
        let c0 = index_coupling_cost(&mu, &nu).unwrap();
        for (k, (a, b)) in tmu.states.iter().zip(tnu.states.iter()).enumerate() {
            let t = tmu.times[k];
            let ct = index_coupling_cost(a.base(), b.base()).unwrap();
            assert!(
                ct <= c0 * (-rate * t).exp() + 1e-12,
                "cost {ct} above bound at t={t}"
            );
        }
    }

    #[test]
    fn trajectory_is_bitwise_reproducible() {
        let lmf = LinearMeanField::scalar(1.0, 0.5, 1.0);
        let mu = ens(1, &[0.2, -0.4, 1.1]);
        let run = || {
            let path = BrownianPath::sample(77, 3, 1, 1e-2, 100, 0.0).unwrap();
            simulate(&mu, &[0.9], 0.0, 1.0, &lmf, &path).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn blowup_reports_step_and_particle() {
        struct Explosive;
        impl Coefficients for Explosive {
            fn dim_d(&self) -> usize {
                1
            }
            fn dim_m(&self) -> usize {
                1
            }
            fn drift(&self, _t: f64, _x: &[f64], _mu: &ParticleEnsemble, out: &mut [f64]) {
                out[0] = 1e14;
            }
            fn diffusion(&self, _t: f64, _x: &[f64], _mu: &ParticleEnsemble, out: &mut Mat) {
                out.fill(0.0);
            }
            fn diffusion_depends_on_measure(&self) -> bool {
                false
            }
        }
        let mu = ens(1, &[0.0, 1.0]);
        let path = BrownianPath::sample(1, 0, 1, 1.0, 2, 0.0).unwrap();
        let err = simulate(&mu, &[], 0.0, 2.0, &Explosive, &path).unwrap_err();
        assert_eq!(
            err,
            Error::Blowup {
                step: 0,
                particle: 0
            }
        );
    }

    #[test]
    fn flow_property_is_exact_on_grid() {
        let lmf = LinearMeanField::scalar(1.0, 0.5, 1.0);
        let mu = ens(1, &[0.0, 1.0, -1.0]);
        let path = BrownianPath::sample(31, 0, 1, 0.01, 100, 0.0).unwrap();
        for (s, r, t) in [(0.0, 0.25, 1.0), (0.0, 0.0, 0.7), (0.2, 1.0, 1.0)] {
            let disc = flow_compose_check(&mu, &[0.5], s, r, t, &lmf, &path).unwrap();
            assert_eq!(disc, 0.0, "(s,r,t)=({s},{r},{t})");
        }
    }

    #[test]
    fn picard_measure_free_converges_immediately() {
        // c = 0: iteration 1 already solves the SDE, distances collapse
        let lmf = LinearMeanField::scalar(1.0, 0.0, 1.0);
        let mu = ens(1, &[0.3, -0.7]);
        let path = BrownianPath::sample(41, 0, 1, 1e-2, 25, 0.0).unwrap();
        let res = picard_solve(&mu, 0.0, 0.25, &lmf, &path, 10, 1e-12).unwrap();
        assert!(res.converged);
        // first update moves away from the frozen curve, second changes nothing
        assert!(res.distances[0] > 0.0);
        assert!(res.distances[1] <= 1e-30);
    }

    #[test]
    fn picard_contracts_and_matches_direct_solution() {
        let lmf = LinearMeanField::scalar(1.0, 0.5, 1.0);
        let mu = ens(1, &[0.0, 1.0, -0.5, 0.25]);
        let path = BrownianPath::sample(43, 0, 1, 1e-3, 250, 0.0).unwrap();
        let res = picard_solve(&mu, 0.0, 0.25, &lmf, &path, 50, 1e-10).unwrap();
        assert!(res.converged);
        for r in &res.ratios {
            assert!(*r < 1.0, "ratio {r} not contracting");
        }
        let direct = simulate(&mu, &[], 0.0, 0.25, &lmf, &path).unwrap();
        let cost = index_coupling_cost(
            res.trajectory.terminal().base(),
            direct.terminal().base(),
        )
        .unwrap();
        assert!(cost < 1e-9, "terminal cost {cost}");
    }

    #[test]
    fn moment_bound_over_seeds() {
        // sup over grid of max(second moment, tagged square) stays below
        // C (1 + |x|^2 + ||mu||_2^2) with one constant across 100 seeds
        let lmf = LinearMeanField::scalar(1.0, 0.5, 1.0);
        let mu = ens(1, &[0.5, -1.0, 1.5, 0.0, 0.7, -0.3, 2.0, -1.4]);
        let x = [1.5];
        let budget = 1.0 + x[0] * x[0] + mu.second_moment();
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let path = BrownianPath::sample(seed, 0, 1, 1e-2, 100, 0.0).unwrap();
            let initial = TaggedEnsemble::new(mu.clone(), x.to_vec()).unwrap();
            let mut sup = 0.0f64;
            simulate_with(&initial, 0.0, 1.0, &lmf, &path, |_, _, st| {
                sup = sup
                    .max(st.base().second_moment())
                    .max(st.tagged(0)[0] * st.tagged(0)[0]);
            })
            .unwrap();
            worst = worst.max(sup / budget);
        }
        assert!(worst <= 10.0, "worst ratio {worst}");
    }

    #[test]
    fn tagged_perturbation_is_stable() {
        // shifting one tagged start by h moves the terminal by at most h,
        // with an h-independent ratio (linear dynamics, shared noise)
        let lmf = LinearMeanField::scalar(1.0, 0.5, 1.0);
        let mu = ens(1, &[0.5, -1.0, 1.5, 0.0]);
        let path = BrownianPath::sample(4, 0, 1, 1e-3, 500, 0.0).unwrap();
        let mut ratios = Vec::new();
        for h in [1e-2, 1e-4] {
            let initial =
                TaggedEnsemble::new(mu.clone(), vec![0.8, 0.8 + h]).unwrap();
            let fin = simulate_with(&initial, 0.0, 0.5, &lmf, &path, |_, _, _| {}).unwrap();
            let diff = (fin.tagged(1)[0] - fin.tagged(0)[0]).abs();
            assert!(diff <= h * (1.0 + 1e-12));
            ratios.push(diff / h);
        }
        assert!((ratios[0] - ratios[1]).abs() < 1e-9 * ratios[0].max(1e-300));
    }

    #[test]
    fn conditional_law_of_translation_flow() {
        // b = 0, sigma = 1: conditional law given W is mu translated by W_t,
        // and tagged samples equal their own translations
        let unit = LinearMeanField::scalar(0.0, 0.0, 1.0);
        let mu = ens(1, &[0.0, 1.0, -2.0]);
        let samples = [0.25, 0.75];
        let path = BrownianPath::sample(8, 0, 1, 1e-2, 50, 0.0).unwrap();
        let traj = conditional_mkv_solve(&mu, &samples, 0.0, 0.5, &unit, &path).unwrap();
        let w_t: f64 = (0..50).map(|k| path.increment(k)[0]).sum();
        let terminal = traj.terminal();
        for i in 0..3 {
            let expect = mu.position(i)[0] + w_t;
            assert!((terminal.base().position(i)[0] - expect).abs() < 1e-12);
        }
        for (i, s0) in samples.iter().enumerate() {
            assert!((terminal.tagged(i)[0] - (s0 + w_t)).abs() < 1e-12);
        }
    }

    #[test]
    fn tagged_duplicates_track_base() {
        let lmf = LinearMeanField::scalar(1.0, 0.5, 1.0);
        let mu = ens(1, &[0.3, -0.9]);
        let samples = [0.3, -0.9]; // equal to base particles
        let path = BrownianPath::sample(15, 0, 1, 1e-2, 30, 0.0).unwrap();
        let traj = conditional_mkv_solve(&mu, &samples, 0.0, 0.3, &lmf, &path).unwrap();
        for st in &traj.states {
            assert_eq!(st.tagged(0), st.base().position(0));
            assert_eq!(st.tagged(1), st.base().position(1));
        }
    }

    #[test]
    fn grid_validation() {
        let path = BrownianPath::sample(0, 0, 1, 0.1, 10, 0.0).unwrap();
        assert!(path.grid_index(0.35).is_err());
        assert_eq!(path.grid_index(0.3).unwrap(), 3);
        assert!(path.grid_index(1.2).is_err());
        assert!(n_steps_between(0.0, 1.0, 1e-3).unwrap() == 1000);
        assert!(n_steps_between(0.0, 1.0005, 1e-3).is_err());
    }

    #[test]
    fn simulation_config_validation() {
        let good = SimulationConfig {
            dt: 1e-2,
            t_start: 0.0,
            t_end: 1.0,
            particles: 8,
            replicas: 4,
            seed: 0,
        };
        good.validate().unwrap();
        assert_eq!(good.n_steps().unwrap(), 100);

        let off_grid = SimulationConfig {
            t_end: 1.005,
            ..good.clone()
        };
        assert!(off_grid.validate().is_err());
        let bad_dt = SimulationConfig {
            dt: 0.0,
            ..good
        };
        assert!(bad_dt.validate().is_err());
    }

    #[test]
    fn tagged_terminal_law_approaches_base_pushforward() {
        // empirical law of independently-started tagged terminals vs the
        // base pushforward: the gap shrinks as both sample counts grow
        let lmf = LinearMeanField::scalar(1.0, 0.5, 1.0);
        let mut gaps = Vec::new();
        for (seed, n) in [(1u64, 32usize), (2, 256)] {
            let mut r = crate::rng::stream(seed, 999);
            let mu =
                ParticleEnsemble::sample_gaussian(n, 1, 1.0, &[0.0], &mut r).unwrap();
            let tagged: Vec<f64> = (0..n)
                .map(|_| crate::rng::standard_normal(&mut r))
                .collect();
            let path = BrownianPath::sample(seed, 0, 1, 1e-2, 50, 0.0).unwrap();
            let traj = conditional_mkv_solve(&mu, &tagged, 0.0, 0.5, &lmf, &path).unwrap();
            let terminal = traj.terminal();
            let tagged_law =
                ParticleEnsemble::new(1, terminal.tagged_flat().to_vec()).unwrap();
            gaps.push(wasserstein::w2(&tagged_law, terminal.base()).unwrap());
        }
        assert!(gaps[1] < gaps[0], "gaps {gaps:?}");
        assert!(gaps[1] < 0.3, "gaps {gaps:?}");
    }
}
