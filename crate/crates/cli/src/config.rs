//! Experiment configuration: one structured TOML file with flat sections.
//!
//! Every knob of a run lives in the file, so the manifest's config digest
//! pins the whole experiment; the only overrides are the `--seed` and
//! `--out` command-line flags, which rewrite the corresponding fields
//! before anything executes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    W2,
    GeneratorCheck,
    FeynmanKac,
    Contract,
    Collapse,
    Picard,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::W2 => "w2",
            ExperimentKind::GeneratorCheck => "generator-check",
            ExperimentKind::FeynmanKac => "feynman-kac",
            ExperimentKind::Contract => "contract",
            ExperimentKind::Collapse => "collapse",
            ExperimentKind::Picard => "picard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSection {
    /// Built-in family name: `linear_mean_field` or `cubic_mean_field`.
    pub family: String,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub c: f64,
    /// Cubic damping rate, used by `cubic_mean_field`.
    #[serde(default)]
    pub g: f64,
    /// Diffusion matrix, `d` rows of `m` entries.
    pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    /// Explicit ensemble file; mutually exclusive with `sampler`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Named sampler (`gaussian`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<String>,
    #[serde(default)]
    pub n: usize,
    #[serde(default)]
    pub dim: usize,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    /// Sampler seed, independent of the experiment seed.
    #[serde(default)]
    pub seed: u64,
    /// Tagged points, one row per point.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tagged: Vec<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub dt: f64,
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// Snapshot thinning for `simulate` output (every `thin` steps).
    #[serde(default = "one_usize")]
    pub thin: usize,
}

fn default_replicas() -> usize {
    10_000
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct W2Section {
    pub mu_csv: PathBuf,
    pub nu_csv: PathBuf,
    #[serde(default)]
    pub print_coupling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorCheckSection {
    /// Functional names from the registry.
    pub functionals: Vec<String>,
    /// Tagged start for state-dependent functionals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tagged: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeynmanKacSection {
    /// Terminal functional name.
    pub phi: String,
    /// Potential name (`zero` or `constant`).
    #[serde(default = "zero_name")]
    pub potential: String,
    #[serde(default)]
    pub potential_value: f64,
    /// Source name (`zero` or `constant`).
    #[serde(default = "zero_name")]
    pub source: String,
    #[serde(default)]
    pub source_value: f64,
    /// Evaluation time.
    #[serde(default)]
    pub t_eval: f64,
    /// Tagged start.
    pub x: Vec<f64>,
}

fn zero_name() -> String {
    "zero".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractSection {
    pub report_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseSection {
    #[serde(default = "default_threshold")]
    pub spread_threshold: f64,
    #[serde(default = "default_record")]
    pub record_every: usize,
    /// Burn-in horizon of the restricted-dynamics reference sampler.
    #[serde(default = "default_burn_in")]
    pub e0_burn_in: f64,
    #[serde(default = "default_e0_samples")]
    pub e0_samples: usize,
    #[serde(default = "default_e0_thin")]
    pub e0_thin: usize,
}

fn default_threshold() -> f64 {
    1e-3
}
fn default_record() -> usize {
    100
}
fn default_burn_in() -> f64 {
    5.0
}
fn default_e0_samples() -> usize {
    2000
}
fn default_e0_thin() -> usize {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardSection {
    pub horizon: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_max_iters() -> usize {
    50
}
fn default_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<CoefficientsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialSection>,
    /// Second ensemble for the contraction experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial2: Option<InitialSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2: Option<W2Section>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_check: Option<GeneratorCheckSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feynman_kac: Option<FeynmanKacSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contract: Option<ContractSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collapse: Option<CollapseSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picard: Option<PicardSection>,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("E_PARSE", e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("E_SERIALIZE", e.to_string()))
    }

    fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T> {
        section
            .as_ref()
            .ok_or_else(|| Error::config("E_SECTION", format!("missing [{name}] section")))
    }

    pub fn simulation(&self) -> Result<&SimulationSection> {
        Self::require(&self.simulation, "simulation")
    }

    pub fn coefficients(&self) -> Result<&CoefficientsSection> {
        Self::require(&self.coefficients, "coefficients")
    }

    pub fn initial(&self) -> Result<&InitialSection> {
        Self::require(&self.initial, "initial")
    }

    pub fn initial2(&self) -> Result<&InitialSection> {
        Self::require(&self.initial2, "initial2")
    }
}
