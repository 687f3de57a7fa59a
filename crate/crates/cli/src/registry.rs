//! Name resolution for coefficient families, functionals, potentials and
//! initial-ensemble samplers. User-defined coefficients and functionals
//! enter through code, not configuration.

use p2flow_core::coefficients::{
    Coefficients, CubicMeanField, HypothesisConstants, LinearMeanField,
};
use p2flow_core::functionals::{
    CylindricalFunctional, FnTimeLifted, LiftedFunctional, Linear, TimeLifted,
};
use p2flow_core::mat::Mat;
use p2flow_core::measures::ParticleEnsemble;
use p2flow_core::rng;

use crate::config::{CoefficientsSection, InitialSection};
use crate::error::{Error, Result};
use crate::io;

/// A configured built-in coefficient family.
#[derive(Debug)]
pub enum Family {
    Linear(LinearMeanField),
    Cubic(CubicMeanField),
}

impl Coefficients for Family {
    fn dim_d(&self) -> usize {
        match self {
            Family::Linear(f) => f.dim_d(),
            Family::Cubic(f) => f.dim_d(),
        }
    }
    fn dim_m(&self) -> usize {
        match self {
            Family::Linear(f) => f.dim_m(),
            Family::Cubic(f) => f.dim_m(),
        }
    }
    fn drift(&self, t: f64, x: &[f64], mu: &ParticleEnsemble, out: &mut [f64]) {
        match self {
            Family::Linear(f) => f.drift(t, x, mu, out),
            Family::Cubic(f) => f.drift(t, x, mu, out),
        }
    }
    fn diffusion(&self, t: f64, x: &[f64], mu: &ParticleEnsemble, out: &mut Mat) {
        match self {
            Family::Linear(f) => f.diffusion(t, x, mu, out),
            Family::Cubic(f) => f.diffusion(t, x, mu, out),
        }
    }
    fn constants(&self) -> Option<HypothesisConstants> {
        match self {
            Family::Linear(f) => f.constants(),
            Family::Cubic(f) => f.constants(),
        }
    }
    fn drift_jacobian(&self, t: f64, x: &[f64], mu: &ParticleEnsemble, out: &mut Mat) {
        match self {
            Family::Linear(f) => f.drift_jacobian(t, x, mu, out),
            Family::Cubic(f) => f.drift_jacobian(t, x, mu, out),
        }
    }
    fn diffusion_dir_deriv(
        &self,
        t: f64,
        x: &[f64],
        mu: &ParticleEnsemble,
        dir: &[f64],
        out: &mut Mat,
    ) {
        match self {
            Family::Linear(f) => f.diffusion_dir_deriv(t, x, mu, dir, out),
            Family::Cubic(f) => f.diffusion_dir_deriv(t, x, mu, dir, out),
        }
    }
    fn drift_measure_kernel(
        &self,
        t: f64,
        x: &[f64],
        mu: &ParticleEnsemble,
        y: &[f64],
        out: &mut Mat,
    ) -> bool {
        match self {
            Family::Linear(f) => f.drift_measure_kernel(t, x, mu, y, out),
            Family::Cubic(f) => f.drift_measure_kernel(t, x, mu, y, out),
        }
    }
    fn diffusion_depends_on_measure(&self) -> bool {
        false
    }
}

/// Builds the coefficient family named in the configuration.
pub fn coefficients(section: &CoefficientsSection) -> Result<Family> {
    let d = section.sigma.len();
    if d == 0 || section.sigma.iter().any(|row| row.len() != section.sigma[0].len()) {
        return Err(Error::config(
            "E_COEFFS",
            "sigma must be a nonempty rectangular matrix",
        ));
    }
    let m = section.sigma[0].len();
    let flat: Vec<f64> = section.sigma.iter().flatten().copied().collect();
    let sigma = Mat::from_rows(d, m, flat);
    match section.family.as_str() {
        "linear_mean_field" => Ok(Family::Linear(
            LinearMeanField::new(section.a, section.c, sigma)
                .map_err(|e| Error::config("E_COEFFS", e.to_string()))?,
        )),
        "cubic_mean_field" => Ok(Family::Cubic(
            CubicMeanField::new(section.a, section.g, section.c, sigma)
                .map_err(|e| Error::config("E_COEFFS", e.to_string()))?,
        )),
        other => Err(Error::config(
            "E_REGISTRY",
            format!("unknown coefficient family '{other}'"),
        )),
    }
}

/// Whether a registry functional reads the state slot (and therefore runs
/// through the coupled martingale test).
pub fn functional_is_lifted(name: &str) -> bool {
    matches!(name, "coord_times_mean")
}

/// Measure-only functionals by name.
pub fn cylindrical(name: &str, dim: usize) -> Result<CylindricalFunctional> {
    match name {
        "mean" => Ok(CylindricalFunctional::mean(dim)),
        "second_moment" => Ok(CylindricalFunctional::second_moment(dim)),
        "mean_squared" => Ok(CylindricalFunctional::mean_squared(dim)),
        other => Err(Error::config(
            "E_REGISTRY",
            format!("unknown functional '{other}'"),
        )),
    }
}

/// State-measure functionals by name (measure-only ones are lifted).
pub fn lifted(name: &str, dim: usize) -> Result<LiftedFunctional> {
    match name {
        "coord_times_mean" => Ok(LiftedFunctional::coord_times_mean(dim)),
        other => Ok(LiftedFunctional::from_cylindrical(cylindrical(other, dim)?)),
    }
}

/// Constant-in-time potentials and sources: `zero` or `constant`.
pub fn time_constant(
    name: &str,
    value: f64,
    dim: usize,
) -> Result<Option<Box<dyn TimeLifted>>> {
    match name {
        "zero" => Ok(None),
        "constant" => {
            let f = FnTimeLifted::new(Box::new(move |_t| {
                LiftedFunctional::new(
                    dim,
                    Box::new(Linear {
                        offset: value,
                        coeffs: vec![0.0; dim + 1],
                    }),
                    vec![Box::new(Linear::coordinate(dim, 0))],
                )
                .expect("constant functional")
            }));
            Ok(Some(Box::new(f)))
        }
        other => Err(Error::config(
            "E_REGISTRY",
            format!("unknown potential/source '{other}'"),
        )),
    }
}

/// Resolves the initial ensemble: explicit CSV or a named sampler.
pub fn initial_ensemble(section: &InitialSection) -> Result<ParticleEnsemble> {
    match (&section.csv, &section.sampler) {
        (Some(path), None) => io::read_ensemble_csv(path),
        (None, Some(name)) => match name.as_str() {
            "gaussian" => {
                if section.n == 0 || section.dim == 0 {
                    return Err(Error::config(
                        "E_INITIAL",
                        "gaussian sampler needs positive n and dim",
                    ));
                }
                let center = section
                    .center
                    .clone()
                    .unwrap_or_else(|| vec![0.0; section.dim]);
                let mut r = rng::stream(section.seed, 0);
                Ok(ParticleEnsemble::sample_gaussian(
                    section.n,
                    section.dim,
                    section.scale,
                    &center,
                    &mut r,
                )?)
            }
            other => Err(Error::config(
                "E_REGISTRY",
                format!("unknown sampler '{other}'"),
            )),
        },
        (Some(_), Some(_)) => Err(Error::config(
            "E_INITIAL",
            "give either csv or sampler, not both",
        )),
        (None, None) => Err(Error::config(
            "E_INITIAL",
            "an initial ensemble needs csv or sampler",
        )),
    }
}

/// Flattens configured tagged points and checks the dimension.
pub fn tagged_points(rows: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for row in rows {
        if row.len() != dim {
            return Err(Error::config(
                "E_INITIAL",
                format!("tagged point has dimension {} instead of {dim}", row.len()),
            ));
        }
        flat.extend_from_slice(row);
    }
    Ok(flat)
}
