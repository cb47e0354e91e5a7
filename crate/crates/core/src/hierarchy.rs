//! Recursive relaxation: stage-k densities `W_k(x, A, 𝐁_k)` and `ψ_k`, and the
//! energies `E_ℓ` they assign to multi-level structured deformations.
//!
//! A stage-(k+1) bulk value solves the bulk cell problem whose bulk density is
//! `A' ↦ W_k(x, A', 𝐁_k)` and whose surface density is `ψ_k`. Values are
//! computed lazily and memoized.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{BulkSpec, SurfaceSpec};
use crate::cellsolver::{solve_bulk, solve_surface, BulkProblem, SolverOptions, SurfaceProblem};
use crate::density::{BulkDensity, DensityPair, FnBulk, SurfaceDensity, SurfaceKind};
use crate::error::{Error, Result};
use crate::linalg::{check_unit, norm, Matrix};
use crate::oracle;
use crate::sbvmesh::{eval_energy_with, EnergyOptions, Exterior, SBVField};

pub const DENSITYCACHE_VERSION: &str = "densitycache-v1";
pub const HSDEFORMATION_VERSION: &str = "hsdeformation-v1";
pub const DEFAULT_DEPTH_CAP: usize = 4;
/// Resolution of memo keys.
pub const KEY_QUANTUM: f64 = 1e-9;

/// A field `g` together with per-cell matrices `G₁,…,G_L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DeformationDoc", into = "DeformationDoc")]
pub struct HierarchicalDeformation {
    g: SBVField,
    levels: Vec<Vec<Matrix>>,
    p: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeformationDoc {
    version: String,
    g: SBVField,
    levels: Vec<Vec<Matrix>>,
    p: f64,
}

impl TryFrom<DeformationDoc> for HierarchicalDeformation {
    type Error = Error;
    fn try_from(doc: DeformationDoc) -> Result<Self> {
        if doc.version != HSDEFORMATION_VERSION {
            return Err(Error::Serde(format!(
                "expected {HSDEFORMATION_VERSION}, got {}",
                doc.version
            )));
        }
        HierarchicalDeformation::new(doc.g, doc.levels, doc.p)
    }
}

impl From<HierarchicalDeformation> for DeformationDoc {
    fn from(h: HierarchicalDeformation) -> Self {
        DeformationDoc {
            version: HSDEFORMATION_VERSION.into(),
            g: h.g,
            levels: h.levels,
            p: h.p,
        }
    }
}

impl HierarchicalDeformation {
    /// `levels[ℓ-1][cell]` holds `G_ℓ` on that cell.
    pub fn new(g: SBVField, levels: Vec<Vec<Matrix>>, p: f64) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Invalid("at least one level G_1 is required".into()));
        }
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::Invalid(format!("exponent p must exceed 1, got {p}")));
        }
        let shape = (g.d(), g.grid().dim());
        let ne = g.grid().num_elements();
        for (l, level) in levels.iter().enumerate() {
            if level.len() != ne {
                return Err(Error::ShapeMismatch {
                    expected: format!("{ne} cells in level {}", l + 1),
                    got: format!("{}", level.len()),
                });
            }
            for (c, m) in level.iter().enumerate() {
                if m.shape() != shape {
                    return Err(Error::AtCell {
                        cell: c,
                        message: format!("G_{} has shape {:?}, expected {shape:?}", l + 1, m.shape()),
                    });
                }
                if !m.is_finite() {
                    return Err(Error::AtCell {
                        cell: c,
                        message: format!("G_{} is not finite", l + 1),
                    });
                }
            }
        }
        Ok(HierarchicalDeformation { g, levels, p })
    }

    /// Same matrix on every cell at each level.
    pub fn uniform(g: SBVField, levels: &[Matrix], p: f64) -> Result<Self> {
        let ne = g.grid().num_elements();
        let levels = levels.iter().map(|m| vec![m.clone(); ne]).collect();
        Self::new(g, levels, p)
    }

    pub fn g(&self) -> &SBVField {
        &self.g
    }

    pub fn levels(&self) -> &[Vec<Matrix>] {
        &self.levels
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Number of levels `L`.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// `G_ℓ` on a cell, with `G₀ = ∇g`.
    pub fn level_at(&self, l: usize, cell: usize) -> &Matrix {
        if l == 0 {
            &self.g.cells()[cell].slope
        } else {
            &self.levels[l - 1][cell]
        }
    }

    /// The frozen tuple `(G_ℓ, …, G_L)` on a cell.
    pub fn tuple_at(&self, l: usize, cell: usize) -> Vec<Matrix> {
        (l..=self.depth()).map(|j| self.levels[j - 1][cell].clone()).collect()
    }

    /// `∫|G_{ℓ-1} − G_ℓ|` for `ℓ = 1..L`.
    pub fn disarrangement_norms(&self) -> Vec<f64> {
        let mesh = self.g.grid().mesh();
        (1..=self.depth())
            .map(|l| {
                mesh.elements
                    .iter()
                    .enumerate()
                    .map(|(c, e)| e.measure * (self.level_at(l - 1, c) - self.level_at(l, c)).norm())
                    .sum()
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// How stage densities are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    /// Closed form when the base pair is the trace example by catalog identity.
    #[default]
    Auto,
    ClosedFormOracle,
    NestedSolver,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    ClosedFormOracle,
    NestedSolver,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxationOptions {
    pub backend: BackendChoice,
    /// Grid resolution of nested bulk solves.
    pub n: usize,
    /// Grid resolution of nested surface solves.
    pub surface_n: usize,
    pub depth_cap: usize,
    pub solver: SolverOptions,
}

impl Default for RelaxationOptions {
    fn default() -> Self {
        RelaxationOptions {
            backend: BackendChoice::Auto,
            n: 8,
            surface_n: 4,
            depth_cap: DEFAULT_DEPTH_CAP,
            solver: SolverOptions::default(),
        }
    }
}

impl RelaxationOptions {
    fn tag(&self) -> String {
        let s = &self.solver;
        format!(
            "n{}:m{}:r{}:s{}:e{:e}-{:e}:b{:?}:t{:e}",
            self.n, self.surface_n, s.restarts, s.seed, s.eps_start, s.eps_end, s.boundary, s.tolerance
        )
    }
}

fn quantize(v: f64) -> i64 {
    (v / KEY_QUANTUM).round() as i64
}

fn dequantize(q: i64) -> f64 {
    q as f64 * KEY_QUANTUM
}

fn snap(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| dequantize(quantize(*x))).collect()
}

fn snap_matrix(m: &Matrix) -> Matrix {
    Matrix::from_row_major(m.rows(), m.cols(), snap(m.as_slice())).expect("same shape")
}

fn key_part(v: &[f64]) -> String {
    v.iter().map(|x| quantize(*x).to_string()).collect::<Vec<_>>().join(",")
}

/// Memoized density values keyed by quantized arguments. Values are always
/// computed at the quantized arguments, so hits and misses agree exactly.
#[derive(Debug, Default)]
pub struct DensityCache {
    map: RwLock<BTreeMap<String, f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheDoc {
    version: String,
    entries: BTreeMap<String, f64>,
}

impl DensityCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.map.write().expect("cache lock").clear();
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.map.read().expect("cache lock").get(key).copied()
    }

    fn get_or_compute(&self, key: String, f: impl FnOnce() -> Result<f64>) -> Result<f64> {
        if let Some(v) = self.get(&key) {
            return Ok(v);
        }
        let v = f()?;
        // first writer wins; a concurrent duplicate computed the same value
        Ok(*self.map.write().expect("cache lock").entry(key).or_insert(v))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = CacheDoc {
            version: DENSITYCACHE_VERSION.into(),
            entries: self.map.read().expect("cache lock").clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: CacheDoc = serde_json::from_str(s)?;
        if doc.version != DENSITYCACHE_VERSION {
            return Err(Error::Serde(format!(
                "expected {DENSITYCACHE_VERSION}, got {}",
                doc.version
            )));
        }
        if let Some((k, v)) = doc.entries.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Serde(format!("cache entry {k} is not finite ({v})")));
        }
        Ok(DensityCache {
            map: RwLock::new(doc.entries),
        })
    }

    /// Loads a cache file, or returns an empty cache when the file does not exist.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(s) => Self::from_json(&s),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Whether the surface density of a stage equals the base one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceStage {
    Stable,
    Solve,
}

/// Stage-k densities `W_k(x, ·, 𝐁_k)` and `ψ_k` for a base pair.
pub struct RelaxedDensityHandle {
    stage: usize,
    base: DensityPair,
    /// `(B_k, …, B_1)`.
    tuple: Vec<Matrix>,
    parent: Option<Arc<RelaxedDensityHandle>>,
    options: RelaxationOptions,
    cache: Arc<DensityCache>,
    surface_stage: SurfaceStage,
    oracle_match: OracleMatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum OracleMatch {
    Always,
    ScalarOnly,
    Never,
}

fn oracle_match(base: &DensityPair) -> OracleMatch {
    let Some(spec) = &base.spec else {
        return OracleMatch::Never;
    };
    let convex = matches!(spec.bulk, BulkSpec::Quadratic | BulkSpec::PPower { .. });
    match spec.surface {
        SurfaceSpec::TraceInterfacial { scale } if convex && scale == 1.0 => OracleMatch::Always,
        // |λ| coincides with |λ·ν| when d = N = 1
        SurfaceSpec::NormInterfacial { c } if convex && c == 1.0 => OracleMatch::ScalarOnly,
        _ => OracleMatch::Never,
    }
}

impl fmt::Debug for RelaxedDensityHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RelaxedDensityHandle")
            .field("stage", &self.stage)
            .field("base", &self.base.label())
            .field("tuple", &self.tuple)
            .field("surface", &self.surface_stage)
            .finish()
    }
}

impl RelaxedDensityHandle {
    /// Stage 0: evaluates the base pair directly.
    pub fn new(base: DensityPair, options: RelaxationOptions, cache: Arc<DensityCache>) -> Result<Arc<Self>> {
        if options.depth_cap == 0 || options.n == 0 || options.surface_n == 0 {
            return Err(Error::Invalid("depth cap and resolutions must be positive".into()));
        }
        if options.backend == BackendChoice::ClosedFormOracle && oracle_match(&base) == OracleMatch::Never {
            return Err(Error::Unsupported(format!(
                "closed-form backend requested for {}, which is not the trace example",
                base.label()
            )));
        }
        let surface_stage = if base.surface.is_jointly_convex() {
            SurfaceStage::Stable
        } else {
            SurfaceStage::Solve
        };
        Ok(Arc::new(RelaxedDensityHandle {
            stage: 0,
            oracle_match: oracle_match(&base),
            base,
            tuple: Vec::new(),
            parent: None,
            options,
            cache,
            surface_stage,
        }))
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn tuple(&self) -> &[Matrix] {
        &self.tuple
    }

    pub fn base(&self) -> &DensityPair {
        &self.base
    }

    pub fn options(&self) -> &RelaxationOptions {
        &self.options
    }

    pub fn cache(&self) -> &Arc<DensityCache> {
        &self.cache
    }

    pub fn surface_stage(&self) -> SurfaceStage {
        self.surface_stage
    }

    /// Backend used for a bulk evaluation at `a`.
    pub fn backend_for(&self, a: &Matrix) -> Backend {
        let eligible = match self.oracle_match {
            OracleMatch::Always => a.rows() == a.cols(),
            OracleMatch::ScalarOnly => a.shape() == (1, 1),
            OracleMatch::Never => false,
        };
        match self.options.backend {
            BackendChoice::NestedSolver => Backend::NestedSolver,
            BackendChoice::ClosedFormOracle => Backend::ClosedFormOracle,
            BackendChoice::Auto if eligible => Backend::ClosedFormOracle,
            BackendChoice::Auto => Backend::NestedSolver,
        }
    }

    fn convex(&self) -> bool {
        self.base.bulk.is_convex() && (self.stage == 0 || self.base.surface.is_jointly_convex())
    }

    /// `W_k(x, A, 𝐁_k)`.
    pub fn bulk(&self, x: &[f64], a: &Matrix) -> Result<f64> {
        if let Some(b) = self.tuple.first() {
            a.check_same_shape(b)?;
        }
        let Some(parent) = &self.parent else {
            return self.base.bulk_at(x, a);
        };
        match self.backend_for(a) {
            Backend::ClosedFormOracle => oracle::exact_wk(self.base.bulk.as_ref(), x, a, &self.tuple),
            Backend::NestedSolver => {
                let (xq, aq) = (snap(x), snap_matrix(a));
                let key = format!(
                    "bulk|{}|{}|k{}|x{}|a{}|t{}",
                    self.base.label(),
                    self.options.tag(),
                    self.stage,
                    key_part(&xq),
                    key_part(aq.as_slice()),
                    self.tuple
                        .iter()
                        .map(|m| key_part(m.as_slice()))
                        .collect::<Vec<_>>()
                        .join(";")
                );
                self.cache.get_or_compute(key, || {
                    let b = snap_matrix(&self.tuple[0]);
                    let problem = BulkProblem::new(xq.clone(), aq.clone(), b, parent.stage_pair(), self.options.n)?
                        .with_options(self.options.solver.clone());
                    Ok(solve_bulk(&problem)?.value)
                })
            }
        }
    }

    /// `ψ_k(x, λ, ν)`.
    pub fn surface(&self, x: &[f64], lambda: &[f64], nu: &[f64]) -> Result<f64> {
        let Some(parent) = &self.parent else {
            return self.base.surface_at(x, lambda, nu);
        };
        if self.surface_stage == SurfaceStage::Stable {
            return self.base.surface_at(x, lambda, nu);
        }
        check_unit(nu)?;
        let (xq, lq, nq) = (snap(x), snap(lambda), snap(nu));
        let key = format!(
            "surface|{}|{}|k{}|x{}|l{}|n{}",
            self.base.label(),
            self.options.tag(),
            self.stage,
            key_part(&xq),
            key_part(&lq),
            key_part(&nq)
        );
        self.cache.get_or_compute(key, || {
            let nu_unit: Vec<f64> = {
                let m = norm(&nq);
                nq.iter().map(|v| v / m).collect()
            };
            let problem = SurfaceProblem::new(
                xq.clone(),
                lq.clone(),
                nu_unit,
                parent.stage_pair(),
                self.options.surface_n,
            )?
            .with_options(self.options.solver.clone());
            Ok(solve_surface(&problem)?.value)
        })
    }

    /// This stage as a density pair (for use inside cell problems).
    pub fn stage_pair(self: &Arc<Self>) -> DensityPair {
        if self.stage == 0 {
            return self.base.clone();
        }
        DensityPair {
            bulk: Arc::new(StageBulk(self.clone())),
            surface: Arc::new(StageSurface(self.clone())),
            exponent_q: self.base.exponent_q,
            constants: self.base.constants.clone(),
            spec: None,
        }
    }
}

#[derive(Debug)]
struct StageBulk(Arc<RelaxedDensityHandle>);

impl BulkDensity for StageBulk {
    fn value(&self, x: &[f64], a: &Matrix) -> Result<f64> {
        self.0.bulk(x, a)
    }
    fn is_convex(&self) -> bool {
        self.0.convex()
    }
    fn depends_on_x(&self) -> bool {
        self.0.base.bulk.depends_on_x() || self.0.base.surface.depends_on_x()
    }
    fn is_expensive(&self) -> bool {
        true
    }
    fn label(&self) -> String {
        let t: Vec<String> = self.0.tuple.iter().map(|m| key_part(m.as_slice())).collect();
        format!("W{}[{}]({})", self.0.stage, self.0.base.bulk.label(), t.join(";"))
    }
}

#[derive(Debug)]
struct StageSurface(Arc<RelaxedDensityHandle>);

impl SurfaceDensity for StageSurface {
    fn value(&self, x: &[f64], lambda: &[f64], nu: &[f64]) -> Result<f64> {
        self.0.surface(x, lambda, nu)
    }
    fn kind(&self) -> SurfaceKind {
        match self.0.surface_stage {
            SurfaceStage::Stable => self.0.base.surface.kind(),
            SurfaceStage::Solve => SurfaceKind::General,
        }
    }
    fn smoothed(&self, x: &[f64], lambda: &[f64], nu: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
        match self.0.surface_stage {
            SurfaceStage::Stable => self.0.base.surface.smoothed(x, lambda, nu, eps),
            SurfaceStage::Solve => {
                // finite differences of the exact value
                let v = self.value(x, lambda, nu)?;
                let mut g = vec![0.0; lambda.len()];
                let mut probe = lambda.to_vec();
                for i in 0..lambda.len() {
                    let h = 1e-6 * (1.0 + lambda[i].abs());
                    probe[i] = lambda[i] + h;
                    let fp = self.value(x, &probe, nu)?;
                    probe[i] = lambda[i] - h;
                    let fm = self.value(x, &probe, nu)?;
                    probe[i] = lambda[i];
                    g[i] = (fp - fm) / (2.0 * h);
                }
                Ok((v, g))
            }
        }
    }
    fn is_subadditive_homogeneous(&self) -> bool {
        self.0.base.surface.is_subadditive_homogeneous()
    }
    fn is_jointly_convex(&self) -> bool {
        self.0.base.surface.is_jointly_convex()
    }
    fn depends_on_x(&self) -> bool {
        self.0.base.surface.depends_on_x()
    }
    fn is_expensive(&self) -> bool {
        self.0.surface_stage == SurfaceStage::Solve
    }
    fn label(&self) -> String {
        format!("psi{}[{}]", self.0.stage, self.0.base.surface.label())
    }
}

/// Freezes `B_next` and returns the stage-(k+1) handle.
pub fn relax_stage(handle: &Arc<RelaxedDensityHandle>, b_next: &Matrix) -> Result<Arc<RelaxedDensityHandle>> {
    let depth = handle.stage + 1;
    if depth > handle.options.depth_cap {
        return Err(Error::DepthExceeded {
            depth,
            cap: handle.options.depth_cap,
        });
    }
    if let Some(b) = handle.tuple.first() {
        b.check_same_shape(b_next)?;
    }
    if !b_next.is_finite() {
        return Err(Error::Invalid("frozen matrix must be finite".into()));
    }
    let mut tuple = Vec::with_capacity(depth);
    tuple.push(b_next.clone());
    tuple.extend(handle.tuple.iter().cloned());
    Ok(Arc::new(RelaxedDensityHandle {
        stage: depth,
        base: handle.base.clone(),
        tuple,
        parent: Some(handle.clone()),
        options: handle.options.clone(),
        cache: handle.cache.clone(),
        surface_stage: handle.surface_stage,
        oracle_match: handle.oracle_match,
    }))
}

/// Builds the handle for `W_k(·, tuple)` with `tuple = (B_k, …, B_1)`.
pub fn handle_for_tuple(
    base: &DensityPair,
    tuple: &[Matrix],
    options: &RelaxationOptions,
    cache: &Arc<DensityCache>,
) -> Result<Arc<RelaxedDensityHandle>> {
    let mut h = RelaxedDensityHandle::new(base.clone(), options.clone(), cache.clone())?;
    for b in tuple.iter().rev() {
        h = relax_stage(&h, b)?;
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilitySample {
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
    pub psi: f64,
    pub solved: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub stage: usize,
    pub tolerance: f64,
    pub samples: Vec<StabilitySample>,
    pub pass: bool,
}

/// Samples `count` pairs `(λ, ν)` with `λ ∈ [-2, 2]^d`, `ν` uniform on the sphere.
pub fn stability_samples(d: usize, dim: usize, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let lambda = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let nu = if dim == 1 {
                vec![if rng.gen_bool(0.5) { 1.0 } else { -1.0 }]
            } else {
                let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                vec![t.cos(), t.sin()]
            };
            (lambda, nu)
        })
        .collect()
}

/// Checks `ψ_{k+1} = ψ_k` by solving the surface cell problem with `ψ_k`
/// at each sample. A sample passes when the relative error is within
/// `tolerance` (absolute for `ψ_k = 0`).
pub fn surface_stability_check(
    handle: &Arc<RelaxedDensityHandle>,
    x: &[f64],
    samples: &[(Vec<f64>, Vec<f64>)],
    tolerance: f64,
) -> Result<StabilityReport> {
    let pair = handle.stage_pair();
    let out = samples
        .par_iter()
        .map(|(lambda, nu)| {
            let psi = handle.surface(x, lambda, nu)?;
            let problem = SurfaceProblem::new(
                x.to_vec(),
                lambda.clone(),
                nu.clone(),
                pair.clone(),
                handle.options.surface_n,
            )?
            .with_options(handle.options.solver.clone());
            let solved = solve_surface(&problem)?.value;
            let relative_error = if psi == 0.0 {
                solved.abs()
            } else {
                (solved - psi).abs() / psi.abs()
            };
            Ok(StabilitySample {
                lambda: lambda.clone(),
                nu: nu.clone(),
                psi,
                solved,
                relative_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pass = out.iter().all(|s| s.relative_error <= tolerance);
    Ok(StabilityReport {
        stage: handle.stage,
        tolerance,
        samples: out,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyAssignment {
    pub level: usize,
    /// Stage `L + 1 − ℓ` of the densities used.
    pub stage: usize,
    pub bulk: f64,
    pub surface: f64,
    pub total: f64,
    /// `∫|G_{ℓ-1} − G_ℓ|` for `ℓ = 1..L`.
    pub disarrangements: Vec<f64>,
    pub backend: Backend,
}

/// `E_ℓ(g, G₁, …, G_L)` with default relaxation options and a private cache.
pub fn assign_energy(def: &HierarchicalDeformation, base: &DensityPair, level: usize) -> Result<EnergyAssignment> {
    assign_energy_with(
        def,
        base,
        level,
        &RelaxationOptions::default(),
        &Arc::new(DensityCache::new()),
    )
}

/// `E_ℓ = Σ_cells |cell| W_{L+1−ℓ}(x_c, ∇g, G_ℓ, …, G_L) + Σ_faces ∫ψ_{L+1−ℓ}(x, [g], ν)`.
pub fn assign_energy_with(
    def: &HierarchicalDeformation,
    base: &DensityPair,
    level: usize,
    options: &RelaxationOptions,
    cache: &Arc<DensityCache>,
) -> Result<EnergyAssignment> {
    let depth = def.depth();
    if level == 0 || level > depth {
        return Err(Error::Invalid(format!("level must lie in 1..={depth}, got {level}")));
    }
    let stage = depth + 1 - level;
    let g = def.g();
    let grid = g.grid();
    let mesh = grid.mesh();
    let per_cell = (0..mesh.elements.len())
        .into_par_iter()
        .map(|c| {
            let e = &mesh.elements[c];
            let at_cell = |err: Error| Error::AtCell {
                cell: c,
                message: err.to_string(),
            };
            let h = handle_for_tuple(base, &def.tuple_at(level, c), options, cache).map_err(at_cell)?;
            let a = &g.cells()[c].slope;
            let x = grid.to_physical(&e.centroid);
            let w = h.bulk(&x, a).map_err(at_cell)?;
            Ok((e.measure * w, h.backend_for(a)))
        })
        .collect::<Result<Vec<_>>>()?;
    let bulk: f64 = per_cell.iter().map(|(v, _)| v).sum();
    let backend = per_cell.first().map(|(_, b)| *b).unwrap_or(Backend::ClosedFormOracle);

    // ψ_k does not depend on the frozen tuple
    let h = handle_for_tuple(base, &def.tuple_at(level, 0), options, cache)?;
    let mut surface_pair = h.stage_pair();
    surface_pair.bulk = Arc::new(FnBulk::new("zero", |_, _| 0.0).convex(true).x_dependent(false));
    let surface = eval_energy_with(
        g,
        &surface_pair,
        &EnergyOptions {
            x_frozen: None,
            exterior: Exterior::None,
        },
    )?
    .surface_value;
    Ok(EnergyAssignment {
        level,
        stage,
        bulk,
        surface,
        total: bulk + surface,
        disarrangements: def.disarrangement_norms(),
        backend,
    })
}
