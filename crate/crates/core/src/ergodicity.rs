//! Contraction-rate and invariant-measure experiments.
//!
//! Synchronous coupling realizes the Gronwall bounds: two copies of the
//! dynamics run on the same Brownian path with an index-matched initial
//! optimal coupling, so the pathwise index cost dominates `W2^2` and the
//! dissipativity constants `(lambda, kappa)` bound its decay,
//!
//! ```text
//! E W2(L_t^mu, L_t^nu)^2 <= W2(mu, nu)^2 e^{-(lambda - kappa) t}.
//! ```
//!
//! The collapse experiment tracks the ensemble spread around its mean; for
//! dissipative dynamics the spread dies and the surviving randomness is the
//! location of the limiting Dirac, whose law is the stationary law of the
//! diagonal-restricted one-particle dynamics.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::math::FloatExt;

use crate::coefficients::{diagonal_restriction, Coefficients};
use crate::error::{Error, Result};
use crate::measures::{ParticleEnsemble, TaggedEnsemble};
use crate::solver::{n_steps_between, simulate_with, BrownianPath};
use crate::stats::{fit_exponential_rate, Estimate};
use crate::wasserstein::{align_by_optimal_coupling, w2_assignment};

/// Floor below which spread values are dropped from rate fits, to keep the
/// floating-point tail out of the regression.
pub const RATE_FIT_FLOOR: f64 = 1e-10;

/// Replication setup for the contraction experiments.
#[derive(Debug, Clone)]
pub struct ContractionConfig {
    pub dt: f64,
    pub replicas: usize,
    pub seed: u64,
    /// Report times, each a multiple of `dt`.
    pub report_times: Vec<f64>,
}

/// Estimated squared distance per report time against the dissipativity
/// bound `W2(mu,nu)^2 e^{-(lambda-kappa) t}`.
#[derive(Debug, Clone)]
pub struct ContractionReport {
    pub times: Vec<f64>,
    pub mean_sq: Vec<f64>,
    pub stderr: Vec<f64>,
    pub bound: Vec<f64>,
    pub initial_sq: f64,
    pub rate_reference: f64,
    pub fitted_rate: Option<f64>,
    /// Whether the estimate stays below the bound within three standard
    /// errors at every report time.
    pub within_bound: bool,
}

fn report_indices(cfg: &ContractionConfig) -> Result<Vec<usize>> {
    cfg.report_times
        .iter()
        .map(|&t| n_steps_between(0.0, t, cfg.dt))
        .collect()
}

/// One synchronous-coupling replica: runs `mu` and the aligned `nu` on the
/// same path and returns `W2^2` at every report time (by exact assignment).
pub fn contraction_replica<C: Coefficients + ?Sized>(
    mu: &ParticleEnsemble,
    nu_aligned: &ParticleEnsemble,
    coeffs: &C,
    cfg: &ContractionConfig,
    replica: usize,
) -> Result<Vec<f64>> {
    let indices = report_indices(cfg)?;
    let t_end = cfg.report_times.iter().cloned().fold(0.0f64, f64::max);
    let steps = n_steps_between(0.0, t_end, cfg.dt)?;
    let path = BrownianPath::sample(
        cfg.seed,
        replica as u64,
        coeffs.dim_m(),
        cfg.dt,
        steps,
        0.0,
    )?;

    let mut mu_snaps: Vec<ParticleEnsemble> = Vec::with_capacity(indices.len());
    simulate_with(
        &TaggedEnsemble::without_tags(mu.clone()),
        0.0,
        t_end,
        coeffs,
        &path,
        |k, _, st| {
            if indices.contains(&k) {
                mu_snaps.push(st.base().clone());
            }
        },
    )?;
    let mut nu_snaps: Vec<ParticleEnsemble> = Vec::with_capacity(indices.len());
    simulate_with(
        &TaggedEnsemble::without_tags(nu_aligned.clone()),
        0.0,
        t_end,
        coeffs,
        &path,
        |k, _, st| {
            if indices.contains(&k) {
                nu_snaps.push(st.base().clone());
            }
        },
    )?;

    mu_snaps
        .iter()
        .zip(nu_snaps.iter())
        .map(|(a, b)| Ok(w2_assignment(a, b)?.1.cost))
        .collect()
}

/// Aggregates per-replica squared distances into the contraction report.
pub fn contraction_aggregate(
    per_replica: &[Vec<f64>],
    cfg: &ContractionConfig,
    initial_sq: f64,
    rate_reference: f64,
) -> ContractionReport {
    let nt = cfg.report_times.len();
    let mut mean_sq = Vec::with_capacity(nt);
    let mut stderr = Vec::with_capacity(nt);
    for i in 0..nt {
        let values: Vec<f64> = per_replica.iter().map(|v| v[i]).collect();
        let est = Estimate::from_values(&values);
        mean_sq.push(est.mean);
        stderr.push(est.stderr);
    }
    let bound: Vec<f64> = cfg
        .report_times
        .iter()
        .map(|&t| initial_sq * (-rate_reference * t).exp())
        .collect();
    let within_bound = mean_sq
        .iter()
        .zip(stderr.iter())
        .zip(bound.iter())
        .all(|((m, s), b)| *m <= b + 3.0 * s);

    // fit only where the signal clears the noise
    let mut fit_t = Vec::new();
    let mut fit_v = Vec::new();
    for i in 0..nt {
        if mean_sq[i] > 10.0 * stderr[i] && mean_sq[i] > RATE_FIT_FLOOR {
            fit_t.push(cfg.report_times[i]);
            fit_v.push(mean_sq[i]);
        }
    }
    let fitted_rate = if fit_t.len() >= 2 {
        fit_exponential_rate(&fit_t, &fit_v, RATE_FIT_FLOOR)
    } else {
        None
    };

    ContractionReport {
        times: cfg.report_times.clone(),
        mean_sq,
        stderr,
        bound,
        initial_sq,
        rate_reference,
        fitted_rate,
        within_bound,
    }
}

/// Synchronous-coupling contraction experiment between two ensembles.
pub fn contraction_experiment<C: Coefficients + ?Sized>(
    mu: &ParticleEnsemble,
    nu: &ParticleEnsemble,
    coeffs: &C,
    cfg: &ContractionConfig,
) -> Result<ContractionReport> {
    let constants = coeffs
        .constants()
        .ok_or(Error::Unsupported("contraction needs declared constants"))?;
    if cfg.replicas < 2 {
        return Err(Error::InvalidArgument("need at least two replicas"));
    }
    if cfg.report_times.is_empty() {
        return Err(Error::InvalidArgument("need at least one report time"));
    }
    let nu_aligned = align_by_optimal_coupling(mu, nu)?;
    let initial_sq = w2_assignment(mu, nu)?.1.cost;
    let rate = constants.lambda - constants.kappa;
    let mut per_replica = Vec::with_capacity(cfg.replicas);
    for r in 0..cfg.replicas {
        per_replica.push(contraction_replica(mu, &nu_aligned, coeffs, cfg, r)?);
    }
    Ok(contraction_aggregate(&per_replica, cfg, initial_sq, rate))
}

/// Squared tagged-point distances per report time with the mixed bound
/// `|x-y|^2 e^{-lambda t} + W2(mu,nu)^2 e^{-(lambda-kappa) t}`.
#[derive(Debug, Clone)]
pub struct TaggedContractionReport {
    pub times: Vec<f64>,
    pub mean_sq: Vec<f64>,
    pub stderr: Vec<f64>,
    pub bound: Vec<f64>,
    pub within_bound: bool,
}

/// One replica of the tagged contraction: both tagged points ride their own
/// ensembles on the shared path.
pub fn tagged_contraction_replica<C: Coefficients + ?Sized>(
    x: &[f64],
    mu: &ParticleEnsemble,
    y: &[f64],
    nu_aligned: &ParticleEnsemble,
    coeffs: &C,
    cfg: &ContractionConfig,
    replica: usize,
) -> Result<Vec<f64>> {
    let indices = report_indices(cfg)?;
    let t_end = cfg.report_times.iter().cloned().fold(0.0f64, f64::max);
    let steps = n_steps_between(0.0, t_end, cfg.dt)?;
    let path = BrownianPath::sample(
        cfg.seed,
        replica as u64,
        coeffs.dim_m(),
        cfg.dt,
        steps,
        0.0,
    )?;
    let mut x_snaps: Vec<Vec<f64>> = Vec::new();
    simulate_with(
        &TaggedEnsemble::new(mu.clone(), x.to_vec())?,
        0.0,
        t_end,
        coeffs,
        &path,
        |k, _, st| {
            if indices.contains(&k) {
                x_snaps.push(st.tagged(0).to_vec());
            }
        },
    )?;
    let mut y_snaps: Vec<Vec<f64>> = Vec::new();
    simulate_with(
        &TaggedEnsemble::new(nu_aligned.clone(), y.to_vec())?,
        0.0,
        t_end,
        coeffs,
        &path,
        |k, _, st| {
            if indices.contains(&k) {
                y_snaps.push(st.tagged(0).to_vec());
            }
        },
    )?;
    Ok(x_snaps
        .iter()
        .zip(y_snaps.iter())
        .map(|(a, b)| crate::mat::dist_sq(a, b))
        .collect())
}

/// Tagged-point contraction experiment.
pub fn tagged_contraction<C: Coefficients + ?Sized>(
    x: &[f64],
    mu: &ParticleEnsemble,
    y: &[f64],
    nu: &ParticleEnsemble,
    coeffs: &C,
    cfg: &ContractionConfig,
) -> Result<TaggedContractionReport> {
    let constants = coeffs
        .constants()
        .ok_or(Error::Unsupported("contraction needs declared constants"))?;
    if cfg.replicas < 2 {
        return Err(Error::InvalidArgument("need at least two replicas"));
    }
    let nu_aligned = align_by_optimal_coupling(mu, nu)?;
    let w2_sq = w2_assignment(mu, nu)?.1.cost;
    let xy_sq = crate::mat::dist_sq(x, y);
    let mut per_replica = Vec::with_capacity(cfg.replicas);
    for r in 0..cfg.replicas {
        per_replica.push(tagged_contraction_replica(
            x,
            mu,
            y,
            &nu_aligned,
            coeffs,
            cfg,
            r,
        )?);
    }
    let nt = cfg.report_times.len();
    let mut mean_sq = Vec::with_capacity(nt);
    let mut stderr = Vec::with_capacity(nt);
    for i in 0..nt {
        let values: Vec<f64> = per_replica.iter().map(|v| v[i]).collect();
        let est = Estimate::from_values(&values);
        mean_sq.push(est.mean);
        stderr.push(est.stderr);
    }
    let bound: Vec<f64> = cfg
        .report_times
        .iter()
        .map(|&t| {
            xy_sq * (-constants.lambda * t).exp()
                + w2_sq * (-(constants.lambda - constants.kappa) * t).exp()
        })
        .collect();
    let within_bound = mean_sq
        .iter()
        .zip(stderr.iter())
        .zip(bound.iter())
        .all(|((m, s), b)| *m <= b + 3.0 * s);
    Ok(TaggedContractionReport {
        times: cfg.report_times.clone(),
        mean_sq,
        stderr,
        bound,
        within_bound,
    })
}

/// Replication setup for the collapse experiment.
#[derive(Debug, Clone)]
pub struct CollapseConfig {
    pub dt: f64,
    pub t_end: f64,
    pub replicas: usize,
    pub seed: u64,
    /// Steps between spread records.
    pub record_every: usize,
    /// Terminal spread above this threshold counts as non-collapse.
    pub spread_threshold: f64,
}

/// Per-replica collapse data.
#[derive(Debug, Clone)]
pub struct CollapseReplica {
    pub spread_sq: Vec<f64>,
    pub terminal_mean: Vec<f64>,
    pub collapsed: bool,
}

/// One replica: runs to `t_end`, recording the squared spread around the
/// ensemble mean and keeping the terminal mean as the collapse point.
pub fn collapse_replica<C: Coefficients + ?Sized>(
    mu: &ParticleEnsemble,
    coeffs: &C,
    cfg: &CollapseConfig,
    replica: usize,
) -> Result<CollapseReplica> {
    let steps = n_steps_between(0.0, cfg.t_end, cfg.dt)?;
    let path = BrownianPath::sample(
        cfg.seed,
        replica as u64,
        coeffs.dim_m(),
        cfg.dt,
        steps,
        0.0,
    )?;
    let every = cfg.record_every.max(1);
    let mut spread_sq = Vec::with_capacity(steps / every + 2);
    let mut terminal_mean = vec![0.0; mu.dim()];
    let mut terminal_spread_sq = 0.0;
    simulate_with(
        &TaggedEnsemble::without_tags(mu.clone()),
        0.0,
        cfg.t_end,
        coeffs,
        &path,
        |k, _, st| {
            if k % every == 0 || k == steps {
                let s = st.base().spread_squared();
                if k % every == 0 {
                    spread_sq.push(s);
                }
                if k == steps {
                    terminal_mean = st.base().mean();
                    terminal_spread_sq = s;
                }
            }
        },
    )?;
    Ok(CollapseReplica {
        spread_sq,
        terminal_mean,
        collapsed: terminal_spread_sq.sqrt() < cfg.spread_threshold,
    })
}

/// Aggregated collapse report: mean spread curve, fitted decay rate of the
/// squared spread, collapse-point samples and their first two moments.
#[derive(Debug, Clone)]
pub struct CollapseReport {
    pub times: Vec<f64>,
    pub mean_spread_sq: Vec<f64>,
    /// Fitted exponential rate of the mean squared spread.
    pub fitted_rate: Option<f64>,
    /// Bound rate `lambda - kappa` from the declared constants; the bound
    /// is one-sided, so the fitted rate may exceed it.
    pub rate_reference: f64,
    /// Terminal ensemble means, one point per replica (flat, row-major).
    pub collapse_points: Vec<f64>,
    pub dim: usize,
    pub collapsed_fraction: f64,
    pub points_mean: Vec<f64>,
    pub points_variance: Vec<f64>,
}

/// Aggregates per-replica collapse data.
pub fn collapse_aggregate(
    per_replica: &[CollapseReplica],
    dim: usize,
    cfg: &CollapseConfig,
    rate_reference: f64,
) -> CollapseReport {
    let replicas = per_replica.len();
    let nt = per_replica[0].spread_sq.len();
    let every = cfg.record_every.max(1);
    let times: Vec<f64> = (0..nt).map(|i| (i * every) as f64 * cfg.dt).collect();
    let mean_spread_sq: Vec<f64> = (0..nt)
        .map(|i| per_replica.iter().map(|r| r.spread_sq[i]).sum::<f64>() / replicas as f64)
        .collect();
    let fitted_rate = fit_exponential_rate(&times, &mean_spread_sq, RATE_FIT_FLOOR);

    let mut collapse_points = Vec::with_capacity(replicas * dim);
    let mut collapsed = 0usize;
    for r in per_replica {
        collapse_points.extend_from_slice(&r.terminal_mean);
        if r.collapsed {
            collapsed += 1;
        }
    }
    let mut points_mean = vec![0.0; dim];
    for point in collapse_points.chunks_exact(dim) {
        for (m, p) in points_mean.iter_mut().zip(point.iter()) {
            *m += p;
        }
    }
    points_mean.iter_mut().for_each(|m| *m /= replicas as f64);
    let mut points_variance = vec![0.0; dim];
    for point in collapse_points.chunks_exact(dim) {
        for j in 0..dim {
            let dev = point[j] - points_mean[j];
            points_variance[j] += dev * dev;
        }
    }
    points_variance
        .iter_mut()
        .for_each(|v| *v /= (replicas - 1).max(1) as f64);

    CollapseReport {
        times,
        mean_spread_sq,
        fitted_rate,
        rate_reference,
        collapse_points,
        dim,
        collapsed_fraction: collapsed as f64 / replicas as f64,
        points_mean,
        points_variance,
    }
}

/// Dirac-collapse experiment: requires strictly dissipative constants.
pub fn collapse_experiment<C: Coefficients + ?Sized>(
    mu: &ParticleEnsemble,
    coeffs: &C,
    cfg: &CollapseConfig,
) -> Result<CollapseReport> {
    let constants = coeffs
        .constants()
        .ok_or(Error::Unsupported("collapse needs declared constants"))?;
    if !(constants.lambda > constants.kappa) {
        return Err(Error::InvalidArgument(
            "collapse requires lambda > kappa",
        ));
    }
    if cfg.replicas < 2 {
        return Err(Error::InvalidArgument("need at least two replicas"));
    }
    let mut per_replica = Vec::with_capacity(cfg.replicas);
    for r in 0..cfg.replicas {
        per_replica.push(collapse_replica(mu, coeffs, cfg, r)?);
    }
    Ok(collapse_aggregate(
        &per_replica,
        mu.dim(),
        cfg,
        constants.lambda - constants.kappa,
    ))
}

/// Long-run sampler of the diagonal-restricted one-particle dynamics.
#[derive(Debug, Clone)]
pub struct StationarySamplerConfig {
    pub dt: f64,
    pub burn_in: f64,
    pub n_samples: usize,
    /// Steps between retained samples.
    pub thin: usize,
    pub seed: u64,
    /// Noise stream id, kept disjoint from any replica streams under the
    /// same seed.
    pub stream: u64,
    pub x0: Vec<f64>,
}

/// Simulates the restricted dynamics `dX = b0(X) dt + sigma0(X) dW` on one
/// long path, discards the burn-in and returns thinned samples (flat,
/// row-major `n_samples x d`).
pub fn stationary_sampler_e0<C: Coefficients>(
    coeffs: &C,
    cfg: &StationarySamplerConfig,
) -> Result<Vec<f64>> {
    let restricted = diagonal_restriction(coeffs);
    let d = cfg.x0.len();
    let thin = cfg.thin.max(1);
    let burn_steps = n_steps_between(0.0, cfg.burn_in, cfg.dt)?;
    let total_steps = burn_steps + cfg.n_samples * thin;
    let t_end = total_steps as f64 * cfg.dt;
    let path = BrownianPath::sample(cfg.seed, cfg.stream, coeffs.dim_m(), cfg.dt, total_steps, 0.0)?;
    let start = ParticleEnsemble::new(d, cfg.x0.clone())?;
    let mut samples = Vec::with_capacity(cfg.n_samples * d);
    simulate_with(
        &TaggedEnsemble::without_tags(start),
        0.0,
        t_end,
        &restricted,
        &path,
        |k, _, st| {
            if k > burn_steps && (k - burn_steps) % thin == 0 {
                samples.extend_from_slice(st.base().position(0));
            }
        },
    )?;
    Ok(samples)
}

/// First two moments of collapse points against a reference sample.
#[derive(Debug, Clone)]
pub struct MomentComparison {
    pub sample_mean: Vec<f64>,
    pub sample_variance: Vec<f64>,
    pub reference_mean: Vec<f64>,
    pub reference_variance: Vec<f64>,
}

/// Compares per-coordinate first and second moments of two flat samples.
pub fn compare_moments(points: &[f64], reference: &[f64], dim: usize) -> MomentComparison {
    let moments = |flat: &[f64]| {
        let n = flat.len() / dim;
        let mut mean = vec![0.0; dim];
        for p in flat.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(p.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for p in flat.chunks_exact(dim) {
            for j in 0..dim {
                let dev = p[j] - mean[j];
                var[j] += dev * dev;
            }
        }
        var.iter_mut().for_each(|v| *v /= (n - 1).max(1) as f64);
        (mean, var)
    };
    let (sample_mean, sample_variance) = moments(points);
    let (reference_mean, reference_variance) = moments(reference);
    MomentComparison {
        sample_mean,
        sample_variance,
        reference_mean,
        reference_variance,
    }
}
