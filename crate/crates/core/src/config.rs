//! Run configuration: a TOML file with one table per concern.
//!
//! Unknown keys are rejected, and every semantic check reports the file and
//! line of the offending key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{ForceMethod, IntegratorConfig};
use crate::error::{Error, Result};
use crate::gibbs::{ChainConfig, GibbsParams, QuadratureConfig};
use crate::metrics::{QOptions, QSetup, TheoremParams};
use crate::potential::PotentialSpec;
use crate::shifts::{RadialLaw, ShiftSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    pub alpha: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default = "one_u32")]
    pub image_shells: u32,
    /// Taper radius; `0` disables the taper.
    #[serde(default = "half")]
    pub taper_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GibbsSection {
    pub beta: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremSection {
    pub epsilon: Option<f64>,
    pub a: Option<f64>,
    pub l: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorSection {
    pub dt: f64,
    pub t_end: f64,
    pub observations: usize,
    pub min_pair_distance_floor: f64,
    pub energy_drift_tolerance: f64,
    pub max_halvings: u32,
    pub force_method: ForceMethod,
}

impl Default for IntegratorSection {
    fn default() -> Self {
        let d = IntegratorConfig::default();
        Self {
            dt: d.dt,
            t_end: d.t_end,
            observations: d.observations,
            min_pair_distance_floor: d.min_pair_distance_floor,
            energy_drift_tolerance: d.energy_drift_tolerance,
            max_halvings: d.max_halvings,
            force_method: d.force_method,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloSection {
    pub samples: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            samples: 200,
            seed: 1,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksSection {
    pub marginal_samples: usize,
    pub bins_per_side: usize,
    pub psi_samples: usize,
    pub quadrature_tolerance: f64,
    pub quadrature_max_evaluations: usize,
}

impl Default for ChecksSection {
    fn default() -> Self {
        let q = QuadratureConfig::default();
        Self {
            marginal_samples: 100_000,
            bins_per_side: 4,
            psi_samples: 1000,
            quadrature_tolerance: q.relative_tolerance,
            quadrature_max_evaluations: q.max_evaluations,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecipeSection {
    /// Pre-evolution time of the position-shift recipe.
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: String,
    pub formats: Vec<String>,
    pub proof_terms: bool,
    pub overlap: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: "results".into(),
            formats: vec!["csv".into(), "json".into(), "svg".into()],
            proof_terms: false,
            overlap: false,
        }
    }
}

impl OutputSection {
    pub fn wants(&self, format: &str) -> bool {
        self.formats.iter().any(|f| f == format)
    }
}

/// Parameter lists whose cross product is run by `sweep`; an empty list
/// keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub n: Vec<usize>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub potential: PotentialSection,
    pub gibbs: GibbsSection,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default = "default_shift")]
    pub shift: ShiftSpec,
    #[serde(default)]
    pub theorem: TheoremSection,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub monte_carlo: MonteCarloSection,
    #[serde(default)]
    pub checks: ChecksSection,
    #[serde(default)]
    pub recipe: RecipeSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn one() -> f64 {
    1.0
}
fn one_u32() -> u32 {
    1
}
fn half() -> f64 {
    0.5
}
fn default_shift() -> ShiftSpec {
    ShiftSpec::GaussianVelocity { sigma: 1.0 }
}

/// A parsed configuration together with its source text and digest.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: String,
    pub origin: String,
    /// SHA-256 of the source bytes, hex encoded.
    pub digest: String,
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content digest in the style of a git blob id (`blob <len>\0<bytes>`), over SHA-256.
pub fn blob_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Line (1-based) of `key` inside `[section]` (or a dotted sub-table of it).
fn locate(source: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header_line = None;
    for (k, raw) in source.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.starts_with('[') && line.ends_with(']') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section {
                header_line = Some(k + 1);
            }
            continue;
        }
        let in_section = current == section || current.starts_with(&format!("{section}."));
        if in_section {
            if let Some((lhs, _)) = line.split_once('=') {
                if lhs.trim() == key {
                    return Some(k + 1);
                }
            }
        }
    }
    header_line
}

struct Violation {
    section: &'static str,
    key: &'static str,
    message: String,
}

fn violation(section: &'static str, key: &'static str, message: impl Into<String>) -> Violation {
    Violation {
        section,
        key,
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_toml(source: &str) -> Result<Self> {
        toml::from_str(source).map_err(|e| Error::Config(e.to_string()))
    }

    fn check(&self) -> std::result::Result<(), Violation> {
        let p = &self.potential;
        if !(p.alpha > 0.0 && p.alpha < 2.0) {
            return Err(violation(
                "potential",
                "alpha",
                format!(
                    "alpha = {} is outside (0, 2); the growth theorem requires 0 < alpha < 2",
                    p.alpha
                ),
            ));
        }
        if !(p.amplitude >= 0.0 && p.amplitude.is_finite()) {
            return Err(violation("potential", "amplitude", "amplitude must be >= 0"));
        }
        if !(p.taper_radius >= 0.0 && p.taper_radius <= 1.5) {
            return Err(violation(
                "potential",
                "taper_radius",
                "taper_radius must lie in [0, 1.5] (0 disables the taper)",
            ));
        }
        if !(self.gibbs.beta > 0.0 && self.gibbs.beta.is_finite()) {
            return Err(violation("gibbs", "beta", "beta must be > 0"));
        }
        if self.gibbs.n < 2 {
            return Err(violation("gibbs", "n", "n must be >= 2"));
        }
        self.chain
            .validate()
            .map_err(|e| violation("chain", "burn_in_sweeps", e.to_string()))?;
        self.shift
            .validate()
            .map_err(|e| violation("shift", "kind", e.to_string()))?;
        let t = self.theorem_params();
        if !(t.epsilon > 0.0) {
            return Err(violation("theorem", "epsilon", "epsilon must be > 0"));
        }
        if !(t.a > 2.0 * t.alpha / 3.0) {
            return Err(violation(
                "theorem",
                "a",
                format!("a = {} must exceed 2 alpha / 3 = {}", t.a, 2.0 * t.alpha / 3.0),
            ));
        }
        if let Some(l) = self.theorem.l {
            if l == 0 || l >= self.gibbs.n {
                return Err(violation("theorem", "l", "l must lie in [1, n - 1]"));
            }
        }
        let ic = self.integrator_config();
        if !(ic.dt > 0.0) {
            return Err(violation("integrator", "dt", "dt must be > 0"));
        }
        if !(ic.t_end >= 0.0) {
            return Err(violation("integrator", "t_end", "t_end must be >= 0"));
        }
        ic.validate()
            .map_err(|e| violation("integrator", "observations", e.to_string()))?;
        if self.monte_carlo.samples < 2 {
            return Err(violation("monte_carlo", "samples", "samples must be >= 2"));
        }
        if self.monte_carlo.workers == 0 {
            return Err(violation("monte_carlo", "workers", "workers must be >= 1"));
        }
        if !(self.recipe.tau >= 0.0 && self.recipe.tau.is_finite()) {
            return Err(violation("recipe", "tau", "tau must be >= 0"));
        }
        if self.recipe.tau > 0.0 {
            let pre = IntegratorConfig {
                t_end: self.recipe.tau,
                observations: 1,
                ..ic.clone()
            };
            pre.validate()
                .map_err(|e| violation("recipe", "tau", format!("tau must be a multiple of dt: {e}")))?;
        }
        for f in &self.output.formats {
            if !matches!(f.as_str(), "csv" | "json" | "svg") {
                return Err(violation(
                    "output",
                    "formats",
                    format!("unknown format {f:?} (expected csv, json, svg)"),
                ));
            }
        }
        let c = &self.checks;
        if c.bins_per_side == 0 || c.marginal_samples < 2 || c.psi_samples < 2 {
            return Err(violation(
                "checks",
                "bins_per_side",
                "check sample counts must be >= 2 and bins_per_side >= 1",
            ));
        }
        if self.sweep.n.iter().any(|&n| n < 2) {
            return Err(violation("sweep", "n", "every n must be >= 2"));
        }
        if self.sweep.alpha.iter().any(|&a| !(a > 0.0 && a < 2.0)) {
            return Err(violation(
                "sweep",
                "alpha",
                "every alpha must lie in (0, 2); the growth theorem requires alpha < 2",
            ));
        }
        if self.sweep.beta.iter().any(|&b| !(b > 0.0)) {
            return Err(violation("sweep", "beta", "every beta must be > 0"));
        }
        if self.sweep.epsilon.iter().any(|&e| !(e > 0.0)) {
            return Err(violation("sweep", "epsilon", "every epsilon must be > 0"));
        }
        if self.sweep.sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(violation("sweep", "sigma", "every sigma must be > 0"));
        }
        Ok(())
    }

    /// Semantic validation; `source` and `origin` are used for locations.
    pub fn validate_with_source(&self, source: &str, origin: &str) -> Result<()> {
        self.check().map_err(|v| {
            let line = locate(source, v.section, v.key)
                .map(|l| format!(":{l}"))
                .unwrap_or_default();
            Error::Config(format!(
                "{origin}{line}: [{}] {}: {}",
                v.section, v.key, v.message
            ))
        })
    }

    pub fn parse(source: &str, origin: &str) -> Result<LoadedConfig> {
        let config = toml::from_str::<RunConfig>(source)
            .map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        config.validate_with_source(source, origin)?;
        Ok(LoadedConfig {
            config,
            source: source.to_string(),
            origin: origin.to_string(),
            digest: sha256_hex(source.as_bytes()),
        })
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&source, &path.display().to_string())
    }

    pub fn potential_spec(&self) -> Result<PotentialSpec> {
        let p = &self.potential;
        let taper = (p.taper_radius > 0.0).then_some(p.taper_radius);
        PotentialSpec::with_options(p.alpha, p.amplitude, p.image_shells, taper)
    }

    pub fn theorem_params(&self) -> TheoremParams {
        let base = TheoremParams::for_alpha(self.potential.alpha);
        TheoremParams {
            epsilon: self.theorem.epsilon.unwrap_or(base.epsilon),
            a: self.theorem.a.unwrap_or(base.a),
            l_override: self.theorem.l,
            ..base
        }
    }

    pub fn integrator_config(&self) -> IntegratorConfig {
        let i = &self.integrator;
        IntegratorConfig {
            dt: i.dt,
            t_end: i.t_end,
            observations: i.observations,
            min_pair_distance_floor: i.min_pair_distance_floor,
            energy_drift_tolerance: i.energy_drift_tolerance,
            max_halvings: i.max_halvings,
            force_method: i.force_method,
        }
    }

    pub fn quadrature_config(&self) -> QuadratureConfig {
        QuadratureConfig {
            relative_tolerance: self.checks.quadrature_tolerance,
            max_evaluations: self.checks.quadrature_max_evaluations,
        }
    }

    /// Assembles the estimator input; `spec` is passed in so callers can reuse
    /// a calibrated potential across runs.
    pub fn q_setup(&self, spec: PotentialSpec, seed: u64, pre_evolve: f64) -> Result<QSetup> {
        Ok(QSetup {
            params: GibbsParams::new(self.gibbs.beta, self.gibbs.n, spec)?,
            chain: self.chain.clone(),
            shift: self.shift,
            theorem: self.theorem_params(),
            integrator: self.integrator_config(),
            samples: self.monte_carlo.samples,
            master_seed: seed,
            options: QOptions {
                proof_terms: self.output.proof_terms,
                overlap: self.output.overlap,
                pre_evolve,
            },
        })
    }

    /// The configuration with `sigma` substituted into a Gaussian or compact shift.
    pub fn with_sigma(&self, sigma: f64) -> Self {
        let mut c = self.clone();
        c.shift = match c.shift {
            ShiftSpec::GaussianVelocity { .. } => ShiftSpec::GaussianVelocity { sigma },
            ShiftSpec::CompactVelocity { .. } => ShiftSpec::CompactVelocity { delta_m: sigma },
            ShiftSpec::EnergySphere {
                radial: RadialLaw::Fixed { .. },
            } => ShiftSpec::EnergySphere {
                radial: RadialLaw::Fixed { radius: sigma },
            },
            s => s,
        };
        c
    }
}
