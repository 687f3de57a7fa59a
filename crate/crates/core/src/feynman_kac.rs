//! Monte Carlo evaluation of the probabilistic solution of the PDEs on
//! `R^d x P2`.
//!
//! With terminal data `Phi`, running source `F` and bounded potential `V`,
//! the candidate solution is
//!
//! ```text
//! U(t,x,mu) = E[ Phi(X_T, L_T) e^{int_t^T V dr}
//!              + int_t^T F(r, X_r, L_r) e^{int_t^r V} dr ]
//! ```
//!
//! along the coupled (tagged state, ensemble) dynamics started at `(x, mu)`
//! at time `t`. The exponential weight accumulates multiplicatively per step
//! from averaged endpoint potentials, which keeps it positive and matches
//! the trapezoid rule used for the source integral. Consistency with the
//! PDE is checked two ways: a nested dynamic-programming identity and a
//! pointwise generator residual on closed-form candidates.

use alloc::boxed::Box;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::math::FloatExt;

use crate::calculus::generator_a_tilde;
use crate::coefficients::Coefficients;
use crate::error::{Error, Result};
use crate::functionals::{LiftedFunctional, TimeLifted};
use crate::measures::{ParticleEnsemble, TaggedEnsemble};
use crate::solver::{n_steps_between, simulate_with, BrownianPath};
pub use crate::stats::Estimate;

/// Data of the terminal-value problem.
pub struct PDEData {
    /// Terminal condition (may ignore the state slot).
    pub terminal: LiftedFunctional,
    /// Running source; `None` means zero.
    pub running: Option<Box<dyn TimeLifted>>,
    /// Potential; `None` means zero. Must be bounded by `potential_bound`.
    pub potential: Option<Box<dyn TimeLifted>>,
    /// Declared bound on the potential.
    pub potential_bound: f64,
    /// Terminal time of the problem.
    pub horizon: f64,
}

impl PDEData {
    pub fn terminal_only(terminal: LiftedFunctional, horizon: f64) -> Self {
        PDEData {
            terminal,
            running: None,
            potential: None,
            potential_bound: 0.0,
            horizon,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.potential.is_some() && !self.potential_bound.is_finite() {
            return Err(Error::InvalidArgument(
                "a potential requires a finite declared bound",
            ));
        }
        Ok(())
    }
}

/// Step size and replication of the estimator.
#[derive(Debug, Clone)]
pub struct FkConfig {
    pub dt: f64,
    pub replicas: usize,
    pub seed: u64,
    pub stream_offset: u64,
}

struct WeightedRun {
    terminal_weighted: f64,
    source_integral: f64,
    log_weight: f64,
    potential_ok: bool,
}

fn weighted_run<C: Coefficients + ?Sized>(
    t: f64,
    t_end: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    data: &PDEData,
    coeffs: &C,
    path: &BrownianPath,
) -> Result<WeightedRun> {
    let steps = n_steps_between(t, t_end, path.dt())?;
    let initial = TaggedEnsemble::new(mu.clone(), x.to_vec())?;
    let mut log_weight = 0.0;
    let mut prev_v = 0.0;
    let mut prev_fw = 0.0;
    let mut source_integral = 0.0;
    let mut terminal_weighted = 0.0;
    let mut potential_ok = true;
    simulate_with(&initial, t, t_end, coeffs, path, |k, tk, st| {
        let v = data
            .potential
            .as_ref()
            .map(|p| p.value(tk, st.tagged(0), st.base()))
            .unwrap_or(0.0);
        if v.abs() > data.potential_bound * (1.0 + 1e-9) {
            potential_ok = false;
        }
        if k > 0 {
            log_weight += 0.5 * path.dt() * (prev_v + v);
        }
        let fw = data
            .running
            .as_ref()
            .map(|f| f.value(tk, st.tagged(0), st.base()) * log_weight.exp())
            .unwrap_or(0.0);
        if k > 0 {
            source_integral += 0.5 * path.dt() * (prev_fw + fw);
        }
        prev_v = v;
        prev_fw = fw;
        if k == steps {
            terminal_weighted =
                data.terminal.eval(st.tagged(0), st.base()) * log_weight.exp();
        }
    })?;
    Ok(WeightedRun {
        terminal_weighted,
        source_integral,
        log_weight,
        potential_ok,
    })
}

/// One replica of the estimator started at `(t, x, mu)`.
pub fn estimate_u_replica<C: Coefficients + ?Sized>(
    t: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    data: &PDEData,
    coeffs: &C,
    cfg: &FkConfig,
    replica: usize,
) -> Result<f64> {
    data.validate()?;
    let steps = n_steps_between(t, data.horizon, cfg.dt)?;
    let path = BrownianPath::sample(
        cfg.seed,
        cfg.stream_offset + replica as u64,
        coeffs.dim_m(),
        cfg.dt,
        steps,
        t,
    )?;
    let run = weighted_run(t, data.horizon, x, mu, data, coeffs, &path)?;
    if !run.potential_ok {
        return Err(Error::InvalidArgument(
            "potential exceeded its declared bound",
        ));
    }
    Ok(run.terminal_weighted + run.source_integral)
}

/// Monte Carlo estimate of `U(t, x, mu)`.
pub fn estimate_u<C: Coefficients + ?Sized>(
    t: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    data: &PDEData,
    coeffs: &C,
    cfg: &FkConfig,
) -> Result<Estimate> {
    if cfg.replicas < 2 {
        return Err(Error::InvalidArgument("estimator needs at least 2 replicas"));
    }
    if !(t <= data.horizon) {
        return Err(Error::InvalidArgument("evaluation time beyond the horizon"));
    }
    let mut values = Vec::with_capacity(cfg.replicas);
    for r in 0..cfg.replicas {
        values.push(estimate_u_replica(t, x, mu, data, coeffs, cfg, r)?);
    }
    Ok(Estimate::from_values(&values))
}

/// Nested replication of the dynamic-programming check.
#[derive(Debug, Clone)]
pub struct NestedConfig {
    pub dt: f64,
    pub outer: usize,
    pub inner: usize,
    /// Cap on `outer * inner`.
    pub budget_cap: usize,
    pub seed: u64,
}

/// Estimates `U(t,x,mu) - E[U(t+eps, X_eps, L_eps) e^{int V} + int F e^{int V}]`,
/// the one-step dynamic-programming discrepancy; the identity predicts zero.
/// The inner value is itself estimated with independent streams per outer
/// replica, and the returned standard error combines both sides.
pub fn semigroup_consistency<C: Coefficients + ?Sized>(
    t: f64,
    eps: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    data: &PDEData,
    coeffs: &C,
    cfg: &NestedConfig,
) -> Result<Estimate> {
    data.validate()?;
    if eps < 0.0 || t + eps > data.horizon + 1e-12 {
        return Err(Error::InvalidArgument("nested window must fit the horizon"));
    }
    let budget = cfg.outer.saturating_mul(cfg.inner);
    if budget > cfg.budget_cap {
        return Err(Error::BudgetExceeded {
            requested: budget,
            cap: cfg.budget_cap,
        });
    }
    if cfg.outer < 2 || cfg.inner < 2 {
        return Err(Error::InvalidArgument("nested estimator needs >= 2 replicas"));
    }
    if eps == 0.0 {
        // both sides are the same functional of the same state
        return Ok(Estimate {
            mean: 0.0,
            stderr: 0.0,
            replicas: cfg.outer,
        });
    }

    let left_cfg = FkConfig {
        dt: cfg.dt,
        replicas: cfg.outer,
        seed: cfg.seed,
        stream_offset: 0,
    };
    let left = estimate_u(t, x, mu, data, coeffs, &left_cfg)?;

    let outer_base = cfg.outer as u64;
    let eps_steps = n_steps_between(t, t + eps, cfg.dt)?;
    let mut right_values = Vec::with_capacity(cfg.outer);
    for o in 0..cfg.outer {
        let path = BrownianPath::sample(
            cfg.seed,
            outer_base + o as u64,
            coeffs.dim_m(),
            cfg.dt,
            eps_steps,
            t,
        )?;
        let run = weighted_run(t, t + eps, x, mu, data, coeffs, &path)?;
        if !run.potential_ok {
            return Err(Error::InvalidArgument(
                "potential exceeded its declared bound",
            ));
        }
        // terminal state of the short run
        let initial = TaggedEnsemble::new(mu.clone(), x.to_vec())?;
        let fin = simulate_with(&initial, t, t + eps, coeffs, &path, |_, _, _| {})?;
        let inner_cfg = FkConfig {
            dt: cfg.dt,
            replicas: cfg.inner,
            seed: cfg.seed,
            stream_offset: 2 * outer_base + (o as u64) * cfg.inner as u64,
        };
        let inner = estimate_u(
            t + eps,
            fin.tagged(0),
            fin.base(),
            data,
            coeffs,
            &inner_cfg,
        )?;
        right_values.push(inner.mean * run.log_weight.exp() + run.source_integral);
    }
    let right = Estimate::from_values(&right_values);
    Ok(Estimate {
        mean: left.mean - right.mean,
        stderr: (left.stderr * left.stderr + right.stderr * right.stderr).sqrt(),
        replicas: cfg.outer,
    })
}

/// Pointwise PDE residual of a closed-form candidate solution:
/// `d_t U + A~ U + V U + F` (central difference in time). Zero for a true
/// solution up to finite-difference error.
pub fn analytic_residual<C: Coefficients + ?Sized>(
    u: &dyn TimeLifted,
    t: f64,
    x: &[f64],
    mu: &ParticleEnsemble,
    data: &PDEData,
    coeffs: &C,
) -> f64 {
    let h = 1e-5;
    let du_dt = (u.value(t + h, x, mu) - u.value(t - h, x, mu)) / (2.0 * h);
    let slice = u.at(t);
    let gen = generator_a_tilde(&slice, t, x, mu, coeffs);
    let v = data
        .potential
        .as_ref()
        .map(|p| p.value(t, x, mu))
        .unwrap_or(0.0);
    let f = data
        .running
        .as_ref()
        .map(|f| f.value(t, x, mu))
        .unwrap_or(0.0);
    du_dt + gen + v * u.value(t, x, mu) + f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::LinearMeanField;
    use crate::functionals::{CylindricalFunctional, FnTimeLifted, Linear};
    use crate::mat::Mat;
    use alloc::vec;

    fn ens(d: usize, xs: &[f64]) -> ParticleEnsemble {
        ParticleEnsemble::new(d, xs.to_vec()).unwrap()
    }

    fn heat_data(d: usize, horizon: f64) -> PDEData {
        PDEData::terminal_only(
            LiftedFunctional::from_cylindrical(CylindricalFunctional::second_moment(d)),
            horizon,
        )
    }

    /// Closed-form solution of the heat problem: `mu(|.|^2) + d (T - t)`.
    fn heat_solution(d: usize, horizon: f64) -> FnTimeLifted {
        FnTimeLifted::new(Box::new(move |t| {
            LiftedFunctional::new(
                d,
                Box::new(Linear {
                    offset: d as f64 * (horizon - t),
                    coeffs: {
                        let mut c = vec![0.0; d + 1];
                        c[d] = 1.0;
                        c
                    },
                }),
                vec![Box::new(crate::functionals::NormSquared { dim: d })],
            )
            .unwrap()
        }))
    }

    fn identity_coeffs(d: usize) -> LinearMeanField {
        LinearMeanField::new(0.0, 0.0, Mat::identity(d)).unwrap()
    }

    #[test]
    fn constant_potential_is_exact_with_zero_variance() {
        // Phi = 1, V = v: U = e^{v (T-t)} with no randomness
        let v0 = 0.4;
        let data = PDEData {
            terminal: LiftedFunctional::new(
                1,
                Box::new(Linear {
                    offset: 1.0,
                    coeffs: vec![0.0, 0.0],
                }),
                vec![Box::new(Linear::coordinate(1, 0))],
            )
            .unwrap(),
            running: None,
            potential: Some(Box::new(FnTimeLifted::new(Box::new(move |_t| {
                LiftedFunctional::new(
                    1,
                    Box::new(Linear {
                        offset: v0,
                        coeffs: vec![0.0, 0.0],
                    }),
                    vec![Box::new(Linear::coordinate(1, 0))],
                )
                .unwrap()
            })))),
            potential_bound: v0,
            horizon: 1.0,
        };
        let coeffs = identity_coeffs(1);
        let mu = ens(1, &[0.3, -0.8]);
        let cfg = FkConfig {
            dt: 1e-3,
            replicas: 4,
            seed: 3,
            stream_offset: 0,
        };
        let est = estimate_u(0.0, &[0.1], &mu, &data, &coeffs, &cfg).unwrap();
        assert!((est.mean - v0.exp()).abs() < 1e-12);
        assert!(est.stderr < 1e-14);
    }

    #[test]
    fn empty_horizon_returns_terminal_exactly() {
        let data = heat_data(1, 1.0);
        let coeffs = identity_coeffs(1);
        let mu = ens(1, &[0.3, -0.8]);
        let cfg = FkConfig {
            dt: 1e-2,
            replicas: 2,
            seed: 1,
            stream_offset: 0,
        };
        let est = estimate_u(1.0, &[0.1], &mu, &data, &coeffs, &cfg).unwrap();
        assert_eq!(est.mean, mu.second_moment());
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn heat_estimate_matches_closed_form() {
        let d = 2;
        let data = heat_data(d, 1.0);
        let coeffs = identity_coeffs(d);
        let mu = ens(d, &[0.3, -0.8, 1.1, 0.2, -0.5, 0.7]);
        let cfg = FkConfig {
            dt: 1e-2,
            replicas: 2000,
            seed: 7,
            stream_offset: 0,
        };
        let est = estimate_u(0.0, &[0.0, 0.0], &mu, &data, &coeffs, &cfg).unwrap();
        let expect = mu.second_moment() + d as f64;
        let z = (est.mean - expect).abs() / est.stderr;
        assert!(z < 3.0, "estimate {} vs {} (z = {z})", est.mean, expect);
    }

    #[test]
    fn heat_residual_vanishes() {
        let d = 2;
        let data = heat_data(d, 1.0);
        let coeffs = identity_coeffs(d);
        let mu = ens(d, &[0.3, -0.8, 1.1, 0.2]);
        let u = heat_solution(d, 1.0);
        let r = analytic_residual(&u, 0.4, &[0.5, -0.1], &mu, &data, &coeffs);
        assert!(r.abs() < 1e-8, "residual {r}");
    }

    #[test]
    fn constant_candidate_has_zero_residual() {
        let data = PDEData::terminal_only(
            LiftedFunctional::new(
                1,
                Box::new(Linear {
                    offset: 2.5,
                    coeffs: vec![0.0, 0.0],
                }),
                vec![Box::new(Linear::coordinate(1, 0))],
            )
            .unwrap(),
            1.0,
        );
        let u = FnTimeLifted::new(Box::new(|_t| {
            LiftedFunctional::new(
                1,
                Box::new(Linear {
                    offset: 2.5,
                    coeffs: vec![0.0, 0.0],
                }),
                vec![Box::new(Linear::coordinate(1, 0))],
            )
            .unwrap()
        }));
        let coeffs = LinearMeanField::scalar(1.0, 0.5, 1.0);
        let mu = ens(1, &[0.3, -0.8]);
        let r = analytic_residual(&u, 0.5, &[0.1], &mu, &data, &coeffs);
        assert!(r.abs() < 1e-12);
    }

    #[test]
    fn exponential_candidate_matches_potential() {
        // U = e^{v(T-t)}, Phi = 1, V = v: residual 0
        let v0 = 0.7;
        let horizon = 1.0;
        let constant_one = |c: f64| {
            LiftedFunctional::new(
                1,
                Box::new(Linear {
                    offset: c,
                    coeffs: vec![0.0, 0.0],
                }),
                vec![Box::new(Linear::coordinate(1, 0))],
            )
            .unwrap()
        };
        let data = PDEData {
            terminal: constant_one(1.0),
            running: None,
            potential: Some(Box::new(FnTimeLifted::new(Box::new(move |_t| {
                constant_one(v0)
            })))),
            potential_bound: v0,
            horizon,
        };
        let u = FnTimeLifted::new(Box::new(move |t| constant_one((v0 * (horizon - t)).exp())));
        let coeffs = identity_coeffs(1);
        let mu = ens(1, &[0.3]);
        let r = analytic_residual(&u, 0.25, &[0.0], &mu, &data, &coeffs);
        assert!(r.abs() < 1e-8, "residual {r}");
    }

    #[test]
    fn semigroup_discrepancy_is_small() {
        let data = heat_data(1, 0.5);
        let coeffs = identity_coeffs(1);
        let mu = ens(1, &[0.3, -0.8, 0.5]);
        let cfg = NestedConfig {
            dt: 1e-2,
            outer: 60,
            inner: 60,
            budget_cap: 10_000,
            seed: 13,
            };
        let est = semigroup_consistency(0.0, 0.1, &[0.2], &mu, &data, &coeffs, &cfg).unwrap();
        assert!(
            est.mean.abs() <= 3.0 * est.stderr,
            "discrepancy {} stderr {}",
            est.mean,
            est.stderr
        );
    }

    #[test]
    fn semigroup_zero_window_is_exact() {
        let data = heat_data(1, 0.5);
        let coeffs = identity_coeffs(1);
        let mu = ens(1, &[0.3, -0.8]);
        let cfg = NestedConfig {
            dt: 1e-2,
            outer: 4,
            inner: 4,
            budget_cap: 100,
            seed: 13,
        };
        let est =
            semigroup_consistency(0.1, 0.0, &[0.2], &mu, &data, &coeffs, &cfg).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn nested_budget_is_enforced() {
        let data = heat_data(1, 0.5);
        let coeffs = identity_coeffs(1);
        let mu = ens(1, &[0.3]);
        let cfg = NestedConfig {
            dt: 1e-2,
            outer: 200,
            inner: 200,
            budget_cap: 10_000,
            seed: 13,
        };
        assert!(matches!(
            semigroup_consistency(0.0, 0.1, &[0.2], &mu, &data, &coeffs, &cfg),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn estimator_is_monotone_in_terminal_data() {
        // Phi2 = Phi1 + 1 pointwise, same paths: means shift by exactly 1
        let coeffs = identity_coeffs(1);
        let mu = ens(1, &[0.3, -0.8]);
        let cfg = FkConfig {
            dt: 1e-2,
            replicas: 50,
            seed: 99,
            stream_offset: 0,
        };
        let lower = heat_data(1, 0.5);
        let upper = PDEData::terminal_only(
            LiftedFunctional::new(
                1,
                Box::new(Linear {
                    offset: 1.0,
                    coeffs: vec![0.0, 1.0],
                }),
                vec![Box::new(crate::functionals::NormSquared { dim: 1 })],
            )
            .unwrap(),
            0.5,
        );
        let a = estimate_u(0.0, &[0.1], &mu, &lower, &coeffs, &cfg).unwrap();
        let b = estimate_u(0.0, &[0.1], &mu, &upper, &coeffs, &cfg).unwrap();
        assert!(b.mean >= a.mean);
        assert!((b.mean - a.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variance_scales_inversely_with_replicas() {
        let data = heat_data(1, 0.5);
        let coeffs = identity_coeffs(1);
        let mu = ens(1, &[0.3, -0.8, 0.5, 1.2]);
        let m = 400;
        let small = estimate_u(
            0.0,
            &[0.0],
            &mu,
            &data,
            &coeffs,
            &FkConfig {
                dt: 1e-2,
                replicas: m,
                seed: 31,
                stream_offset: 0,
            },
        )
        .unwrap();
        let large = estimate_u(
            0.0,
            &[0.0],
            &mu,
            &data,
            &coeffs,
            &FkConfig {
                dt: 1e-2,
                replicas: 4 * m,
                seed: 31,
                stream_offset: 0,
            },
        )
        .unwrap();
        let ratio = large.stderr / (0.5 * small.stderr);
        assert!((0.7..1.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn euler_weak_bias_decays_linearly() {
        // deterministic cubic decay: x' = -x^3 has the closed solution
        // x(t) = x0 / sqrt(1 + 2 x0^2 t); sigma = 0 isolates the Euler bias
        struct Cubic;
        impl Coefficients for Cubic {
            fn dim_d(&self) -> usize {
                1
            }
            fn dim_m(&self) -> usize {
                1
            }
            fn drift(&self, _t: f64, x: &[f64], _mu: &ParticleEnsemble, out: &mut [f64]) {
                out[0] = -x[0] * x[0] * x[0];
            }
            fn diffusion(&self, _t: f64, _x: &[f64], _mu: &ParticleEnsemble, out: &mut Mat) {
                out.fill(0.0);
            }
            fn diffusion_depends_on_measure(&self) -> bool {
                false
            }
        }
        let x0 = 1.0f64;
        let horizon = 1.0;
        let exact = {
            let xt: f64 = x0 / (1.0 + 2.0 * x0 * x0 * horizon).sqrt();
            xt * xt
        };
        let data = heat_data(1, horizon);
        let mu = ens(1, &[x0]);
        let mut errors = Vec::new();
        for dt in [4e-3, 2e-3] {
            let est = estimate_u(
                0.0,
                &[0.0],
                &mu,
                &data,
                &Cubic,
                &FkConfig {
                    dt,
                    replicas: 2,
                    seed: 0,
                    stream_offset: 0,
                },
            )
            .unwrap();
            errors.push((est.mean - exact).abs());
        }
        let ratio = errors[0] / errors[1];
        assert!((1.6..2.4).contains(&ratio), "bias ratio {ratio}");
    }
}
