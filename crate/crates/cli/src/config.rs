//! The experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use hsd::approx::{Construction, ConvergenceOptions, Sampling};
use hsd::cellsolver::SolverOptions;
use hsd::hierarchy::{BackendChoice, HierarchicalDeformation};
use hsd::{BulkSpec, PairSpec, SamplingPlan, SurfaceSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

fn default_pair() -> PairSpec {
    PairSpec::new(BulkSpec::Quadratic, SurfaceSpec::TraceInterfacial { scale: 1.0 })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub densities: PairSpec,
    /// Fixes every stochastic choice; overrides `solver.seed`.
    pub seed: u64,
    /// Overrides `solver.tolerance` when present.
    pub tolerance: Option<f64>,
    pub solver: SolverOptions,
    pub cache: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub relax_bulk: RelaxBulkConfig,
    pub relax_surface: RelaxSurfaceConfig,
    pub recurse: RecurseConfig,
    pub energy: EnergyConfig,
    pub approximate: ApproximateConfig,
    pub check_class: CheckClassConfig,
    pub verify_example: VerifyExampleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            densities: default_pair(),
            seed: 0,
            tolerance: None,
            solver: SolverOptions::default(),
            cache: None,
            out: None,
            threads: None,
            relax_bulk: RelaxBulkConfig::default(),
            relax_surface: RelaxSurfaceConfig::default(),
            recurse: RecurseConfig::default(),
            energy: EnergyConfig::default(),
            approximate: ApproximateConfig::default(),
            check_class: CheckClassConfig::default(),
            verify_example: VerifyExampleConfig::default(),
        }
    }
}

/// One `(x, A, B)` point; `x` defaults to the origin.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BulkPoint {
    #[serde(default)]
    pub x: Option<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// Random square matrices with entries uniform in `[-range, range]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSampler {
    pub count: usize,
    pub dim: usize,
    pub range: f64,
}

impl Default for MatrixSampler {
    fn default() -> Self {
        MatrixSampler {
            count: 4,
            dim: 2,
            range: 2.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxBulkConfig {
    /// Explicit points; when empty, `samples` draws them.
    pub points: Vec<BulkPoint>,
    pub samples: MatrixSampler,
    pub n: usize,
    /// Resolutions for the value-vs-resolution series (default: divisor chain of n).
    pub resolutions: Vec<usize>,
    /// Relative tolerance against the closed form, when one applies.
    pub reference_tolerance: f64,
}

impl Default for RelaxBulkConfig {
    fn default() -> Self {
        RelaxBulkConfig {
            points: Vec::new(),
            samples: MatrixSampler::default(),
            n: 8,
            resolutions: Vec::new(),
            reference_tolerance: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfacePoint {
    #[serde(default)]
    pub x: Option<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxSurfaceConfig {
    pub points: Vec<SurfacePoint>,
    /// Number of random `(λ, ν)` with `λ ∈ [-2, 2]^dim`.
    pub count: usize,
    pub dim: usize,
    pub n: usize,
    pub reference_tolerance: f64,
}

impl Default for RelaxSurfaceConfig {
    fn default() -> Self {
        RelaxSurfaceConfig {
            points: Vec::new(),
            count: 4,
            dim: 2,
            n: 3,
            reference_tolerance: 0.02,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecurseConfig {
    /// Stage k: each sample is `(A, B_k, …, B_1)`.
    pub stage: usize,
    pub samples: MatrixSampler,
    pub backend: BackendChoice,
    /// Resolution of nested bulk solves.
    pub n: usize,
    /// Resolution of nested surface solves.
    pub surface_n: usize,
    pub depth_cap: usize,
    /// Surface-stability samples checked at the final stage.
    pub surface_samples: usize,
    pub reference_tolerance: f64,
    pub surface_tolerance: f64,
}

impl Default for RecurseConfig {
    fn default() -> Self {
        RecurseConfig {
            stage: 2,
            samples: MatrixSampler {
                count: 4,
                dim: 1,
                range: 3.0,
            },
            backend: BackendChoice::NestedSolver,
            n: 8,
            surface_n: 3,
            depth_cap: hsd::hierarchy::DEFAULT_DEPTH_CAP,
            surface_samples: 2,
            reference_tolerance: 1e-6,
            surface_tolerance: 0.02,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    /// Path of an `hsdeformation-v1` document, relative to the config file.
    pub deformation_file: Option<PathBuf>,
    pub deformation: Option<HierarchicalDeformation>,
    /// Levels ℓ to evaluate (default: all).
    pub levels: Vec<usize>,
    pub backend: BackendChoice,
    pub n: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproximateConfig {
    pub deformation_file: Option<PathBuf>,
    pub deformation: Option<HierarchicalDeformation>,
    /// Values of n_ℓ per level.
    pub indices: Vec<Vec<usize>>,
    pub construction: Construction,
    pub sampling: Sampling,
    pub convergence: ConvergenceOptions,
}

impl Default for ApproximateConfig {
    fn default() -> Self {
        ApproximateConfig {
            deformation_file: None,
            deformation: None,
            indices: Vec::new(),
            construction: Construction::Primitive1d,
            sampling: Sampling::Floor,
            convergence: ConvergenceOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckClassConfig {
    pub plan: SamplingPlan,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyExampleConfig {
    /// 1D exact-mode bulk samples.
    pub bulk_1d: usize,
    /// 2D numeric bulk samples and their resolution.
    pub bulk_2d: usize,
    pub n_2d: usize,
    pub surface: usize,
    pub surface_n: usize,
    /// 1D stage-2 triples through the nested solver.
    pub stage2: usize,
    pub tolerance_1d: f64,
    pub tolerance_2d: f64,
    pub tolerance_surface: f64,
}

impl Default for VerifyExampleConfig {
    fn default() -> Self {
        VerifyExampleConfig {
            bulk_1d: 8,
            bulk_2d: 1,
            n_2d: 8,
            surface: 3,
            surface_n: 3,
            stage2: 4,
            tolerance_1d: 1e-8,
            tolerance_2d: 0.1,
            tolerance_surface: 0.02,
        }
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub cache: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub tolerance: Option<f64>,
}

impl ExperimentConfig {
    /// Reads the config file (or defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<(Self, PathBuf), CliError> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                let cfg: ExperimentConfig =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (cfg, base)
            }
            None => (ExperimentConfig::default(), PathBuf::new()),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(c) = &overrides.cache {
            cfg.cache = Some(c.clone());
        }
        if let Some(o) = &overrides.out {
            cfg.out = Some(o.clone());
        }
        if let Some(t) = overrides.threads {
            cfg.threads = Some(t);
        }
        if let Some(t) = overrides.tolerance {
            cfg.tolerance = Some(t);
        }
        cfg.solver.seed = cfg.seed;
        if let Some(t) = cfg.tolerance {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::Config(format!("tolerance must be positive, got {t}")));
            }
            cfg.solver.tolerance = t;
        }
        if cfg.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        Ok((cfg, base))
    }

    /// SHA-256 of the result-relevant configuration. Output, cache and thread
    /// settings are excluded: they do not change any number.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.cache = None;
        c.out = None;
        c.threads = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Inline deformation or one read from a file relative to `base`.
pub fn resolve_deformation(
    inline: &Option<HierarchicalDeformation>,
    file: &Option<PathBuf>,
    base: &Path,
) -> Result<HierarchicalDeformation, CliError> {
    match (inline, file) {
        (Some(d), None) => Ok(d.clone()),
        (None, Some(f)) => {
            let path = if f.is_absolute() { f.clone() } else { base.join(f) };
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            HierarchicalDeformation::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
        (Some(_), Some(_)) => Err(CliError::Config(
            "give either deformation or deformation_file, not both".into(),
        )),
        (None, None) => Err(CliError::Config("a deformation or deformation_file is required".into())),
    }
}
