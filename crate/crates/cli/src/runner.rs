//! Experiment dispatch and the replica-parallel execution policy.
//!
//! Replicas map over disjoint noise streams in parallel; results are
//! collected in replica order and reduced sequentially, so output bytes do
//! not depend on thread count or scheduling. Every run writes its files
//! into a fresh output directory and finishes with a manifest digesting
//! each of them.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;

use p2flow_core::calculus::{martingale_replica, martingale_replica_tilde, MartingaleConfig};
use p2flow_core::coefficients::Coefficients;
use p2flow_core::ergodicity::{
    collapse_aggregate, collapse_replica, compare_moments, contraction_aggregate,
    contraction_replica, stationary_sampler_e0, CollapseConfig, ContractionConfig,
    StationarySamplerConfig,
};
use p2flow_core::feynman_kac::{estimate_u_replica, FkConfig, PDEData};
use p2flow_core::measures::TaggedEnsemble;
use p2flow_core::solver::{n_steps_between, picard_solve, simulate_with, BrownianPath};
use p2flow_core::stats::Estimate;
use p2flow_core::wasserstein::{align_by_optimal_coupling, w2_assignment};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{Error, Result};
use crate::io;
use crate::manifest::{digest_bytes, RunManifest};
use crate::registry;

/// Result of one run: the manifest plus a one-line human summary.
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub summary: String,
}

/// Parallel map over replica indices with order-preserving collection.
fn replica_map<T, F>(replicas: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..replicas).into_par_iter().map(f).collect()
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir.to_path_buf(), e))?
            .next()
            .is_some();
        if occupied {
            return Err(Error::config(
                "E_OUT_COLLISION",
                format!("output directory {} is not empty", dir.display()),
            ));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))
}

/// Runs the experiment named in the configuration and writes its outputs
/// and manifest into the configured directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    let dir = config.output.dir.clone();
    prepare_out_dir(&dir)?;

    let config_digest = digest_bytes(config.to_toml()?.as_bytes());
    let mut manifest = RunManifest::new(
        config.experiment.kind.name(),
        config.experiment.seed,
        config_digest,
    );

    let summary = match config.experiment.kind {
        ExperimentKind::Simulate => run_simulate(config, &dir, &mut manifest)?,
        ExperimentKind::W2 => run_w2(config, &dir, &mut manifest)?,
        ExperimentKind::GeneratorCheck => run_generator_check(config, &dir, &mut manifest)?,
        ExperimentKind::FeynmanKac => run_feynman_kac(config, &dir, &mut manifest)?,
        ExperimentKind::Contract => run_contract(config, &dir, &mut manifest)?,
        ExperimentKind::Collapse => run_collapse(config, &dir, &mut manifest)?,
        ExperimentKind::Picard => run_picard(config, &dir, &mut manifest)?,
    };

    manifest.wall_ms = started.elapsed().as_millis() as u64;
    manifest.write(&dir)?;
    Ok(RunOutcome { manifest, summary })
}

fn run_simulate(
    config: &ExperimentConfig,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<String> {
    let coeffs = registry::coefficients(config.coefficients()?)?;
    let initial_cfg = config.initial()?;
    let mu0 = registry::initial_ensemble(initial_cfg)?;
    let tagged = registry::tagged_points(&initial_cfg.tagged, mu0.dim())?;
    let sim = config.simulation()?;
    let steps = n_steps_between(sim.t_start, sim.t_end, sim.dt)?;
    let path = BrownianPath::sample(
        config.experiment.seed,
        0,
        coeffs.dim_m(),
        sim.dt,
        steps,
        sim.t_start,
    )?;

    let thin = sim.thin.max(1);
    let initial = TaggedEnsemble::new(mu0, tagged)?;
    let mut snapshots: Vec<(usize, f64)> = Vec::new();
    let mut write_error: Option<Error> = None;
    simulate_with(&initial, sim.t_start, sim.t_end, &coeffs, &path, |k, t, st| {
        if write_error.is_some() || (k % thin != 0 && k != steps) {
            return;
        }
        let name = format!("snap_{k:06}.csv");
        if let Err(e) = io::write_ensemble_csv(&dir.join(&name), st.base()) {
            write_error = Some(e);
            return;
        }
        snapshots.push((k, t));
        if st.num_tagged() > 0 {
            let name = format!("tagged_{k:06}.csv");
            if let Err(e) =
                io::write_points_csv(&dir.join(&name), st.dim(), st.tagged_flat())
            {
                write_error = Some(e);
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }

    for (k, _) in &snapshots {
        manifest.add_output(dir, &format!("snap_{k:06}.csv"))?;
        if initial.num_tagged() > 0 {
            manifest.add_output(dir, &format!("tagged_{k:06}.csv"))?;
        }
    }
    let summary = json!({
        "dt": sim.dt,
        "t_start": sim.t_start,
        "t_end": sim.t_end,
        "steps": steps,
        "snapshots": snapshots.iter().map(|(k, t)| json!({"step": k, "t": t})).collect::<Vec<_>>(),
    });
    io::write_json(&dir.join("summary.json"), &summary)?;
    manifest.add_output(dir, "summary.json")?;
    Ok(format!(
        "simulate: {} snapshots over [{}, {}]",
        snapshots.len(),
        sim.t_start,
        sim.t_end
    ))
}

fn run_w2(
    config: &ExperimentConfig,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<String> {
    let section = config
        .w2
        .as_ref()
        .ok_or_else(|| Error::config("E_SECTION", "missing [w2] section"))?;
    let mu = io::read_ensemble_csv(&section.mu_csv)?;
    let nu = io::read_ensemble_csv(&section.nu_csv)?;
    let (distance, coupling) = w2_assignment(&mu, &nu)?;

    io::write_json(
        &dir.join("distance.json"),
        &json!({ "distance": distance, "squared_cost": coupling.cost, "n": mu.len() }),
    )?;
    manifest.add_output(dir, "distance.json")?;

    let mut summary = format!("w2: {distance:.12e}");
    if section.print_coupling {
        let rows: Vec<Vec<f64>> = coupling
            .permutation
            .iter()
            .enumerate()
            .map(|(i, &j)| vec![i as f64, j as f64])
            .collect();
        io::write_table_csv(&dir.join("coupling.csv"), &["i", "j"], &rows)?;
        manifest.add_output(dir, "coupling.csv")?;
        let pairs = coupling
            .permutation
            .iter()
            .enumerate()
            .map(|(i, &j)| format!("{i}->{j}"))
            .collect::<Vec<_>>()
            .join(" ");
        summary.push_str(&format!("\ncoupling: {pairs}"));
    }
    Ok(summary)
}

fn run_generator_check(
    config: &ExperimentConfig,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<String> {
    let coeffs = registry::coefficients(config.coefficients()?)?;
    let mu = registry::initial_ensemble(config.initial()?)?;
    let sim = config.simulation()?;
    let section = config
        .generator_check
        .as_ref()
        .ok_or_else(|| Error::config("E_SECTION", "missing [generator_check] section"))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    let mut worst_z = 0.0f64;
    for (idx, name) in section.functionals.iter().enumerate() {
        let cfg = MartingaleConfig {
            t_start: sim.t_start,
            t_end: sim.t_end,
            dt: sim.dt,
            replicas: sim.replicas,
            seed: config.experiment.seed,
            stream_offset: (idx * sim.replicas) as u64,
        };
        let values: Vec<f64> = if registry::functional_is_lifted(name) {
            let f = registry::lifted(name, mu.dim())?;
            let x = section.tagged.clone().ok_or_else(|| {
                Error::config(
                    "E_SECTION",
                    format!("functional '{name}' needs [generator_check] tagged"),
                )
            })?;
            replica_map(sim.replicas, |r| {
                martingale_replica_tilde(&f, &x, &mu, &coeffs, &cfg, r).map_err(Into::into)
            })?
        } else {
            let f = registry::cylindrical(name, mu.dim())?;
            replica_map(sim.replicas, |r| {
                martingale_replica(&f, &mu, &coeffs, &cfg, r).map_err(Into::into)
            })?
        };
        let est = Estimate::from_values(&values);
        worst_z = worst_z.max(est.z_score());
        ids.push(name.clone());
        rows.push(vec![idx as f64, est.mean, est.stderr, est.z_score()]);
    }

    io::write_table_csv(
        &dir.join("generator_check.csv"),
        &["test_id", "mean", "stderr", "z_score"],
        &rows,
    )?;
    manifest.add_output(dir, "generator_check.csv")?;
    io::write_json(
        &dir.join("summary.json"),
        &json!({
            "functionals": ids,
            "replicas": config.simulation()?.replicas,
            "worst_z": worst_z,
        }),
    )?;
    manifest.add_output(dir, "summary.json")?;
    Ok(format!(
        "generator-check: {} tests, worst |z| = {worst_z:.3}",
        rows.len()
    ))
}

fn run_feynman_kac(
    config: &ExperimentConfig,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<String> {
    let coeffs = registry::coefficients(config.coefficients()?)?;
    let mu = registry::initial_ensemble(config.initial()?)?;
    let sim = config.simulation()?;
    let section = config
        .feynman_kac
        .as_ref()
        .ok_or_else(|| Error::config("E_SECTION", "missing [feynman_kac] section"))?;
    if section.x.len() != mu.dim() {
        return Err(Error::config(
            "E_SECTION",
            "feynman_kac.x must match the ensemble dimension",
        ));
    }

    let data = PDEData {
        terminal: registry::lifted(&section.phi, mu.dim())?,
        running: registry::time_constant(&section.source, section.source_value, mu.dim())?,
        potential: registry::time_constant(
            &section.potential,
            section.potential_value,
            mu.dim(),
        )?,
        potential_bound: section.potential_value.abs(),
        horizon: sim.t_end,
    };
    let cfg = FkConfig {
        dt: sim.dt,
        replicas: sim.replicas,
        seed: config.experiment.seed,
        stream_offset: 0,
    };
    if cfg.replicas < 2 {
        return Err(Error::config("E_SECTION", "feynman-kac needs >= 2 replicas"));
    }
    let values = replica_map(cfg.replicas, |r| {
        estimate_u_replica(section.t_eval, &section.x, &mu, &data, &coeffs, &cfg, r)
            .map_err(Into::into)
    })?;
    let est = Estimate::from_values(&values);

    io::write_json(
        &dir.join("estimate.json"),
        &json!({
            "mean": est.mean,
            "stderr": est.stderr,
            "replicas": est.replicas,
            "dt": sim.dt,
            "seed": config.experiment.seed,
        }),
    )?;
    manifest.add_output(dir, "estimate.json")?;
    Ok(format!(
        "feynman-kac: U = {:.6e} +- {:.2e} ({} replicas)",
        est.mean, est.stderr, est.replicas
    ))
}

fn run_contract(
    config: &ExperimentConfig,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<String> {
    let coeffs = registry::coefficients(config.coefficients()?)?;
    let mu = registry::initial_ensemble(config.initial()?)?;
    let nu = registry::initial_ensemble(config.initial2()?)?;
    let sim = config.simulation()?;
    let section = config
        .contract
        .as_ref()
        .ok_or_else(|| Error::config("E_SECTION", "missing [contract] section"))?;
    let constants = coeffs
        .constants()
        .ok_or_else(|| Error::config("E_COEFFS", "family declares no constants"))?;

    let cfg = ContractionConfig {
        dt: sim.dt,
        replicas: sim.replicas,
        seed: config.experiment.seed,
        report_times: section.report_times.clone(),
    };
    let nu_aligned = align_by_optimal_coupling(&mu, &nu)?;
    let initial_sq = w2_assignment(&mu, &nu)?.1.cost;
    let per_replica = replica_map(cfg.replicas, |r| {
        contraction_replica(&mu, &nu_aligned, &coeffs, &cfg, r).map_err(Into::into)
    })?;
    let report = contraction_aggregate(
        &per_replica,
        &cfg,
        initial_sq,
        constants.lambda - constants.kappa,
    );

    let rows: Vec<Vec<f64>> = report
        .times
        .iter()
        .enumerate()
        .map(|(i, &t)| vec![t, report.mean_sq[i], report.stderr[i], report.bound[i]])
        .collect();
    io::write_table_csv(
        &dir.join("contract.csv"),
        &["t", "estimate", "stderr", "bound"],
        &rows,
    )?;
    manifest.add_output(dir, "contract.csv")?;
    io::write_json(
        &dir.join("summary.json"),
        &json!({
            "initial_sq": report.initial_sq,
            "rate_reference": report.rate_reference,
            "fitted_rate": report.fitted_rate,
            "within_bound": report.within_bound,
            "replicas": sim.replicas,
        }),
    )?;
    manifest.add_output(dir, "summary.json")?;
    Ok(format!(
        "contract: within_bound = {}, fitted rate = {:?}",
        report.within_bound, report.fitted_rate
    ))
}

fn run_collapse(
    config: &ExperimentConfig,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<String> {
    let coeffs = registry::coefficients(config.coefficients()?)?;
    let mu = registry::initial_ensemble(config.initial()?)?;
    let sim = config.simulation()?;
    let section = config
        .collapse
        .as_ref()
        .ok_or_else(|| Error::config("E_SECTION", "missing [collapse] section"))?;
    let constants = coeffs
        .constants()
        .ok_or_else(|| Error::config("E_COEFFS", "family declares no constants"))?;
    if !(constants.lambda > constants.kappa) {
        return Err(Error::config(
            "E_COEFFS",
            "collapse requires lambda > kappa",
        ));
    }

    let cfg = CollapseConfig {
        dt: sim.dt,
        t_end: sim.t_end,
        replicas: sim.replicas,
        seed: config.experiment.seed,
        record_every: section.record_every,
        spread_threshold: section.spread_threshold,
    };
    let per_replica = replica_map(cfg.replicas, |r| {
        collapse_replica(&mu, &coeffs, &cfg, r).map_err(Into::into)
    })?;
    let report = collapse_aggregate(
        &per_replica,
        mu.dim(),
        &cfg,
        constants.lambda - constants.kappa,
    );

    // reference sample of the restricted one-particle dynamics
    let sampler_cfg = StationarySamplerConfig {
        dt: sim.dt,
        burn_in: section.e0_burn_in,
        n_samples: section.e0_samples,
        thin: section.e0_thin,
        seed: config.experiment.seed,
        stream: sim.replicas as u64,
        x0: vec![0.0; mu.dim()],
    };
    let e0 = stationary_sampler_e0(&coeffs, &sampler_cfg)?;
    let moments = compare_moments(&report.collapse_points, &e0, mu.dim());

    let rows: Vec<Vec<f64>> = report
        .times
        .iter()
        .zip(report.mean_spread_sq.iter())
        .map(|(&t, &s)| vec![t, s])
        .collect();
    io::write_table_csv(&dir.join("collapse.csv"), &["t", "mean_spread_sq"], &rows)?;
    manifest.add_output(dir, "collapse.csv")?;
    io::write_points_csv(
        &dir.join("collapse_points.csv"),
        report.dim,
        &report.collapse_points,
    )?;
    manifest.add_output(dir, "collapse_points.csv")?;
    io::write_points_csv(&dir.join("e0_samples.csv"), mu.dim(), &e0)?;
    manifest.add_output(dir, "e0_samples.csv")?;
    io::write_json(
        &dir.join("summary.json"),
        &json!({
            "fitted_rate": report.fitted_rate,
            "rate_reference": report.rate_reference,
            "collapsed_fraction": report.collapsed_fraction,
            "points_mean": moments.sample_mean,
            "points_variance": moments.sample_variance,
            "e0_mean": moments.reference_mean,
            "e0_variance": moments.reference_variance,
            "replicas": sim.replicas,
        }),
    )?;
    manifest.add_output(dir, "summary.json")?;
    Ok(format!(
        "collapse: fraction = {:.3}, fitted rate = {:?}",
        report.collapsed_fraction, report.fitted_rate
    ))
}

fn run_picard(
    config: &ExperimentConfig,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<String> {
    let coeffs = registry::coefficients(config.coefficients()?)?;
    let mu = registry::initial_ensemble(config.initial()?)?;
    let sim = config.simulation()?;
    let section = config
        .picard
        .as_ref()
        .ok_or_else(|| Error::config("E_SECTION", "missing [picard] section"))?;

    let steps = n_steps_between(sim.t_start, sim.t_start + section.horizon, sim.dt)?;
    let path = BrownianPath::sample(
        config.experiment.seed,
        0,
        coeffs.dim_m(),
        sim.dt,
        steps,
        sim.t_start,
    )?;
    let result = picard_solve(
        &mu,
        sim.t_start,
        section.horizon,
        &coeffs,
        &path,
        section.max_iters,
        section.tol,
    )?;

    let rows: Vec<Vec<f64>> = result
        .distances
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let ratio = if i > 0 { result.ratios[i - 1] } else { f64::NAN };
            vec![(i + 1) as f64, d, ratio]
        })
        .collect();
    io::write_table_csv(
        &dir.join("picard.csv"),
        &["iteration", "distance", "ratio"],
        &rows,
    )?;
    manifest.add_output(dir, "picard.csv")?;
    io::write_ensemble_csv(&dir.join("final.csv"), result.trajectory.terminal().base())?;
    manifest.add_output(dir, "final.csv")?;
    io::write_json(
        &dir.join("summary.json"),
        &json!({
            "converged": result.converged,
            "iterations": result.iterations,
            "tol": section.tol,
            "horizon": section.horizon,
        }),
    )?;
    manifest.add_output(dir, "summary.json")?;
    Ok(format!(
        "picard: converged = {} after {} iterations",
        result.converged, result.iterations
    ))
}
