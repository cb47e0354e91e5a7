//! Minimization of the bulk and surface cell formulas.
//!
//! Numeric values are energies of explicit discrete competitors and hence
//! upper bounds for the infima. In one dimension, with a convex bulk density
//! and a sub-additive, 1-homogeneous surface density, the bulk problem is
//! solved in closed form.

mod lbfgs;
mod objective;

use std::cmp::Ordering;
use std::sync::Arc;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::PairSpec;
use crate::density::{DensityPair, FnBulk};
use crate::error::{Error, Result};
use crate::linalg::{check_unit, dot, frame_from_normal, norm, Matrix};
use crate::sbvmesh::{
    eval_energy_with, mean_gradient, step_field, total_variation_with, Cut, EnergyOptions, Exterior, Grid, Piece,
    SBVField,
};

use lbfgs::{minimize, LbfgsOptions};
use objective::{Discrete, SlopeSpec};

pub const BULKPROBLEM_VERSION: &str = "bulkproblem-v1";
pub const SOLVERESULT_VERSION: &str = "solveresult-v1";

/// How the boundary condition `u = a_A` on `∂Q` is imposed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// The datum is prescribed outside `Q`; the mismatch across `∂Q` is a
    /// jump and is charged with the surface density.
    #[default]
    Collar,
    /// Boundary elements match the datum exactly (linear constraints).
    Trace,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlopeMode {
    /// Pinned for expensive convex bulk densities, free otherwise.
    #[default]
    Auto,
    Free,
    /// Every slope equals the mean gradient B.
    Pinned,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeRequest {
    #[default]
    Auto,
    Numeric,
    Exact1dConvex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    Exact1dConvex,
    NumericUpperBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub restarts: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_factor: f64,
    /// L-BFGS iterations per smoothing stage.
    pub max_iterations: usize,
    /// Feasibility tolerance for the constraint residuals.
    pub tolerance: f64,
    pub seed: u64,
    pub boundary: BoundaryMode,
    pub slopes: SlopeMode,
    pub mode: ModeRequest,
    /// Element layout for 2D bulk problems (default criss-cross).
    pub cut: Option<Cut>,
    pub polish_sweeps: usize,
    /// Solve on the chain n/2ᵏ first and warm-start each level from the last.
    pub ladder: bool,
    pub parallel: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            restarts: 8,
            eps_start: 1e-1,
            eps_end: 1e-6,
            eps_factor: 10.0,
            max_iterations: 400,
            tolerance: 1e-8,
            seed: 0,
            boundary: BoundaryMode::Collar,
            slopes: SlopeMode::Auto,
            mode: ModeRequest::Auto,
            cut: None,
            polish_sweeps: 3,
            ladder: true,
            parallel: true,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Invalid("at least one restart is needed".into()));
        }
        if !(self.eps_start >= self.eps_end && self.eps_end > 0.0 && self.eps_factor > 1.0) {
            return Err(Error::Invalid(
                "smoothing schedule must decrease from eps_start to eps_end > 0".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Invalid("tolerance must be positive".into()));
        }
        Ok(())
    }

    fn schedule(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut eps = self.eps_start;
        while eps > self.eps_end * (1.0 + 1e-9) {
            out.push(eps);
            eps /= self.eps_factor;
        }
        out.push(self.eps_end);
        out
    }
}

#[derive(Clone, Debug)]
pub struct BulkProblem {
    pub x: Vec<f64>,
    pub a: Matrix,
    pub b: Matrix,
    pub pair: DensityPair,
    pub n: usize,
    pub options: SolverOptions,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BulkProblemDoc {
    version: String,
    x: Vec<f64>,
    a: Matrix,
    b: Matrix,
    pair: PairSpec,
    n: usize,
    #[serde(default)]
    options: SolverOptions,
}

impl BulkProblem {
    pub fn new(x: Vec<f64>, a: Matrix, b: Matrix, pair: DensityPair, n: usize) -> Result<Self> {
        let p = BulkProblem {
            x,
            a,
            b,
            pair,
            n,
            options: SolverOptions::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.a.check_same_shape(&self.b)?;
        let dim = self.x.len();
        if !(1..=2).contains(&dim) || self.a.cols() != dim {
            return Err(Error::Dimension(format!(
                "x has {dim} coordinates but A is {}x{}",
                self.a.rows(),
                self.a.cols()
            )));
        }
        if self.n == 0 {
            return Err(Error::Invalid("n must be at least 1".into()));
        }
        if !self.x.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("x must be finite".into()));
        }
        self.options.validate()
    }

    /// Energy options under which `SolveResult::value` is measured.
    pub fn energy_options(&self) -> EnergyOptions {
        EnergyOptions {
            x_frozen: Some(self.x.clone()),
            exterior: Exterior::affine(&self.a),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let pair = self
            .pair
            .spec
            .clone()
            .ok_or_else(|| Error::Unsupported("only catalog densities can be serialized".into()))?;
        Ok(serde_json::to_string(&BulkProblemDoc {
            version: BULKPROBLEM_VERSION.into(),
            x: self.x.clone(),
            a: self.a.clone(),
            b: self.b.clone(),
            pair,
            n: self.n,
            options: self.options.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: BulkProblemDoc = serde_json::from_str(s)?;
        if doc.version != BULKPROBLEM_VERSION {
            return Err(Error::Serde(format!(
                "expected {BULKPROBLEM_VERSION}, got {}",
                doc.version
            )));
        }
        let pair = doc.pair.build()?;
        Ok(BulkProblem::new(doc.x, doc.a, doc.b, pair, doc.n)?.with_options(doc.options))
    }
}

#[derive(Clone, Debug)]
pub struct SurfaceProblem {
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
    pub pair: DensityPair,
    pub n: usize,
    pub options: SolverOptions,
}

impl SurfaceProblem {
    pub fn new(x: Vec<f64>, lambda: Vec<f64>, nu: Vec<f64>, pair: DensityPair, n: usize) -> Result<Self> {
        let p = SurfaceProblem {
            x,
            lambda,
            nu,
            pair,
            n,
            options: SolverOptions::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_unit(&self.nu)?;
        if self.nu.len() != self.x.len() || !(1..=2).contains(&self.x.len()) {
            return Err(Error::Dimension("x and nu must share dimension 1 or 2".into()));
        }
        if self.lambda.is_empty() || !self.lambda.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("lambda must be a nonempty finite vector".into()));
        }
        if self.n == 0 {
            return Err(Error::Invalid("n must be at least 1".into()));
        }
        self.options.validate()
    }

    /// The rotated cell `Q_ν`. For odd `n` the box is shifted by half a cell
    /// along `ν` so that the plane `x·ν = 0` is a union of faces.
    pub fn grid(&self) -> Result<Grid> {
        let dim = self.nu.len();
        let shift = if self.n % 2 == 1 { 0.5 / self.n as f64 } else { 0.0 };
        let mut bounds = vec![[-0.5, 0.5]; dim];
        bounds[0] = [-0.5 + shift, 0.5 + shift];
        Grid::unit_cube(dim, self.n)?
            .with_box(bounds)?
            .with_rotation(frame_from_normal(&self.nu)?)
    }

    pub fn energy_options(&self) -> EnergyOptions {
        EnergyOptions {
            x_frozen: Some(self.x.clone()),
            exterior: Exterior::Step {
                lambda: self.lambda.clone(),
                mu: vec![0.0; self.lambda.len()],
                nu: self.nu.clone(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Largest trace mismatch on `∂Q` (exact-trace and exact modes only).
    pub boundary_trace: Option<f64>,
    /// `|∫∇u/|Q| − B|` (max entry); zero for surface problems.
    pub mean_gradient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub value: f64,
    pub minimizer: SBVField,
    pub residuals: Residuals,
    pub mode: SolveMode,
    pub boundary: BoundaryMode,
    pub iterations: usize,
    pub restarts_used: usize,
    /// Index of the winning start.
    pub winner: usize,
    pub restart_values: Vec<f64>,
    pub converged: bool,
    /// Energy of the flat-interface competitor (surface problems).
    pub planar_value: Option<f64>,
}

#[derive(Serialize)]
struct ResultDocRef<'a> {
    version: &'static str,
    #[serde(flatten)]
    result: &'a SolveResult,
}

#[derive(Deserialize)]
struct ResultDoc {
    version: String,
    #[serde(flatten)]
    result: SolveResult,
}

impl SolveResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ResultDocRef {
            version: SOLVERESULT_VERSION,
            result: self,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ResultDoc = serde_json::from_str(s)?;
        if doc.version != SOLVERESULT_VERSION {
            return Err(Error::Serde(format!(
                "expected {SOLVERESULT_VERSION}, got {}",
                doc.version
            )));
        }
        Ok(doc.result)
    }
}

/// Whether the closed-form one-dimensional mode applies.
pub fn exact_mode_applies(p: &BulkProblem) -> bool {
    p.x.len() == 1 && p.a.rows() == 1 && p.pair.bulk.is_convex() && p.pair.surface.is_subadditive_homogeneous()
}

/// Relaxed bulk density `H(x, A, B)` (upper bound in numeric mode).
pub fn solve_bulk(problem: &BulkProblem) -> Result<SolveResult> {
    problem.validate()?;
    let mut chain = vec![problem.n];
    if problem.options.ladder {
        let mut m = problem.n;
        while m % 2 == 0 && m / 2 >= 2 {
            m /= 2;
            chain.push(m);
        }
        chain.reverse();
    }
    let mut results = solve_bulk_ladder(problem, &chain)?;
    Ok(results.pop().expect("nonempty chain"))
}

/// Solves at each resolution in turn, seeding each level with the previous minimizer.
/// Values are nonincreasing along the list whenever each entry divides the next.
pub fn solve_bulk_ladder(problem: &BulkProblem, resolutions: &[usize]) -> Result<Vec<SolveResult>> {
    problem.validate()?;
    if resolutions.is_empty() || resolutions.contains(&0) {
        return Err(Error::Invalid(
            "resolutions must be a nonempty list of positive integers".into(),
        ));
    }
    let exact = match problem.options.mode {
        ModeRequest::Numeric => false,
        ModeRequest::Auto => exact_mode_applies(problem),
        ModeRequest::Exact1dConvex => {
            if !exact_mode_applies(problem) {
                return Err(Error::Unsupported(
                    "exact mode needs N = d = 1, convex bulk and sub-additive 1-homogeneous surface".into(),
                ));
            }
            true
        }
    };
    let mut out: Vec<SolveResult> = Vec::with_capacity(resolutions.len());
    for &n in resolutions {
        let r = if exact {
            solve_exact_1d(problem, n)?
        } else {
            let warm = out.last().map(|r| &r.minimizer);
            solve_bulk_numeric(problem, n, warm)?
        };
        out.push(r);
    }
    Ok(out)
}

fn solve_exact_1d(p: &BulkProblem, n: usize) -> Result<SolveResult> {
    let (a, b) = (p.a.get(0, 0), p.b.get(0, 0));
    let n = n.max(2);
    let grid = Grid::unit_cube(1, n)?;
    let k = n / 2;
    let c = 0.5 * (b - a);
    let cells = (0..n)
        .map(|i| Piece {
            offset: vec![if i < k { c } else { c + a - b }],
            slope: p.b.clone(),
        })
        .collect();
    let field = SBVField::new(grid.clone(), cells)?;
    let value = p.pair.bulk_at(&p.x, &p.b)? * grid.volume() + p.pair.surface_at(&p.x, &[a - b], &[1.0])?;
    let check = eval_energy_with(&field, &p.pair, &p.energy_options())?.total;
    if (check - value).abs() > 1e-10 * (1.0 + value.abs()) {
        return Err(Error::Residual {
            what: "exact minimizer energy".into(),
            residual: (check - value).abs(),
            tolerance: 1e-10,
        });
    }
    let ends = [
        field.cells()[0].eval(&[-0.5])[0] + 0.5 * a,
        field.cells()[n - 1].eval(&[0.5])[0] - 0.5 * a,
    ];
    Ok(SolveResult {
        value,
        residuals: Residuals {
            boundary_trace: Some(ends[0].abs().max(ends[1].abs())),
            mean_gradient: (mean_gradient(&field).get(0, 0) - b).abs(),
        },
        minimizer: field,
        mode: SolveMode::Exact1dConvex,
        boundary: p.options.boundary,
        iterations: 0,
        restarts_used: 0,
        winner: 0,
        restart_values: vec![value],
        converged: true,
        planar_value: None,
    })
}

struct RunOutcome {
    z: Vec<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
}

fn run_start(disc: &Discrete, mut z: Vec<f64>, opts: &SolverOptions) -> Result<RunOutcome> {
    let mut best_value = disc.energy(&z, 0.0, None)?;
    let mut best = z.clone();
    let mut iterations = 0;
    let mut converged = true;
    let lb = LbfgsOptions {
        memory: 10,
        max_iter: opts.max_iterations,
        gtol: 1e-10,
        ftol: 1e-13,
    };
    for eps in opts.schedule() {
        let out = minimize(
            |z, g| disc.energy(z, eps, Some(g)),
            |g| disc.project_gradient(g),
            &mut z,
            lb,
        )?;
        iterations += out.iterations;
        converged = out.converged;
        disc.project_point(&mut z);
        let v = disc.energy(&z, 0.0, None)?;
        if v < best_value {
            best_value = v;
            best.copy_from_slice(&z);
        }
    }
    if opts.polish_sweeps > 0 {
        let mut zp = best.clone();
        if disc.polish(&mut zp, opts.polish_sweeps)? > 0 {
            let v = disc.energy(&zp, 0.0, None)?;
            if v < best_value {
                best_value = v;
                best = zp;
            }
        }
    }
    Ok(RunOutcome {
        z: best,
        value: best_value,
        iterations,
        converged,
    })
}

/// Strip-midpoint coordinate of `x` along `m` for strips of width `h`
/// whose boundaries pass through `origin`.
fn strip_coordinate(x: &[f64], origin: &[f64], m: &[f64], h: f64) -> f64 {
    let s = dot(&crate::linalg::sub_vec(x, origin), m);
    let o = dot(origin, m);
    o + ((s / h).floor() + 0.5) * h
}

/// Laminate directions and amplitudes `(m_k, a_k)` with `Σ a_k ⊗ m_k = M`.
/// In 2D with `d = 2` the split keeps `Σ |a_k · m_k| = |tr M|`.
fn laminate_decomposition(m: &Matrix, diagonals: bool) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (d, dim) = m.shape();
    if dim == 1 {
        return vec![(vec![1.0], m.column(0))];
    }
    if d == 2 && diagonals {
        let t = m.get(0, 0) + m.get(1, 1);
        let k = 0.5 * (m.get(0, 0) - m.get(1, 1));
        let c = 0.5 * (m.get(0, 1) + m.get(1, 0));
        let s = 0.5 * (m.get(0, 1) - m.get(1, 0));
        let r = 0.5f64.sqrt();
        return vec![
            (vec![1.0, 0.0], vec![0.5 * t, c - s]),
            (vec![0.0, 1.0], vec![c + s, 0.5 * t]),
            (vec![r, r], vec![k * r, -k * r]),
            (vec![r, -r], vec![k * r, k * r]),
        ];
    }
    (0..dim)
        .map(|j| {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            (e, m.column(j))
        })
        .collect()
}

fn bulk_starts(p: &BulkProblem, disc: &Discrete, grid: &Grid) -> Vec<Vec<Piece>> {
    let (d, dim) = p.a.shape();
    let m = &p.a - &p.b;
    let ne = disc.num_elements();
    let h = grid.spacing(0);
    let origin: Vec<f64> = grid.bounds().iter().map(|b| b[0]).collect();
    let diagonals = grid.cut() == Cut::CrissCross;
    let piece = |value: Vec<f64>, c: &[f64]| {
        let mut offset = value;
        for (i, o) in offset.iter_mut().enumerate() {
            for j in 0..dim {
                *o -= p.b.get(i, j) * c[j];
            }
        }
        Piece {
            offset,
            slope: p.b.clone(),
        }
    };
    let with_values = |f: &dyn Fn(&[f64]) -> Vec<f64>| -> Vec<Piece> {
        (0..ne)
            .map(|e| {
                let c = disc.centroid(e);
                let mut v = p.b.mul_vec(c);
                for (vi, fi) in v.iter_mut().zip(f(c)) {
                    *vi += fi;
                }
                piece(v, c)
            })
            .collect()
    };
    let width = |mdir: &[f64]| {
        if mdir.iter().all(|v| v.abs() > 0.0) {
            h * 0.5f64.sqrt()
        } else {
            h
        }
    };

    let lam = laminate_decomposition(&m, diagonals);
    let decomposition = |x: &[f64]| -> Vec<f64> {
        let mut v = vec![0.0; d];
        for (mdir, a) in &lam {
            let q = strip_coordinate(x, &origin, mdir, width(mdir));
            for i in 0..d {
                v[i] += a[i] * q;
            }
        }
        v
    };

    let mut starts: Vec<Vec<Piece>> = vec![
        with_values(&|_| vec![0.0; d]),
        with_values(&|x| {
            let mut sq = vec![0.0; dim];
            for j in 0..dim {
                sq[j] = strip_coordinate(x, &origin, &unit(dim, j), h);
            }
            m.mul_vec(&sq)
        }),
        with_values(&decomposition),
    ];
    let mut dirs: Vec<Vec<f64>> = (0..dim).map(|j| unit(dim, j)).collect();
    if diagonals {
        let r = 0.5f64.sqrt();
        dirs.push(vec![r, r]);
        dirs.push(vec![r, -r]);
    }
    for mdir in &dirs {
        let amp = m.mul_vec(mdir);
        starts.push(with_values(&|x| {
            let side = if dot(x, mdir) >= 0.0 { 0.5 } else { -0.5 };
            amp.iter().map(|a| a * side).collect()
        }));
    }
    let scale = m.norm() + 0.05;
    let mut k = 0u64;
    while starts.len() < p.options.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(p.options.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k + 1)));
        let mut pieces = with_values(&decomposition);
        for pc in &mut pieces {
            for o in pc.offset.iter_mut() {
                *o += rng.gen_range(-0.5..0.5) * h * scale;
            }
            for s in pc.slope.as_mut_slice() {
                *s += rng.gen_range(-0.1..0.1) * scale;
            }
        }
        starts.push(pieces);
        k += 1;
    }
    starts.truncate(p.options.restarts);
    starts
}

fn unit(dim: usize, j: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    e[j] = 1.0;
    e
}

fn pick_winner(values: &[(f64, f64)]) -> usize {
    let mut best = 0;
    for k in 1..values.len() {
        let (v, tv) = values[k];
        let (bv, btv) = values[best];
        let tie = (v - bv).abs() <= 1e-12 * (1.0 + bv.abs());
        let better = if tie {
            tv.partial_cmp(&btv) == Some(Ordering::Less)
        } else {
            v < bv
        };
        if better {
            best = k;
        }
    }
    best
}

fn run_all(disc: &Discrete, starts: Vec<Vec<f64>>, opts: &SolverOptions) -> Result<Vec<RunOutcome>> {
    if opts.parallel {
        starts.into_par_iter().map(|z| run_start(disc, z, opts)).collect()
    } else {
        starts.into_iter().map(|z| run_start(disc, z, opts)).collect()
    }
}

fn solve_bulk_numeric(p: &BulkProblem, n: usize, warm: Option<&SBVField>) -> Result<SolveResult> {
    let dim = p.x.len();
    let d = p.a.rows();
    let mut grid = Grid::unit_cube(dim, n)?;
    if dim == 2 {
        grid = grid.with_cut(p.options.cut.unwrap_or(Cut::CrissCross))?;
    }
    let pinned = match p.options.slopes {
        SlopeMode::Pinned => true,
        SlopeMode::Free => false,
        SlopeMode::Auto => p.pair.bulk.is_expensive() && p.pair.bulk.is_convex(),
    };
    let slopes = if pinned {
        SlopeSpec::Pinned(p.b.clone())
    } else {
        SlopeSpec::Free { mean: p.b.clone() }
    };
    let trace = (p.options.boundary == BoundaryMode::Trace).then_some(&p.a);
    let exterior = Exterior::affine(&p.a);
    let disc = Discrete::new(grid.clone(), d, &p.pair, &p.x, &exterior, slopes, trace)?;

    let mut starts: Vec<Vec<f64>> = bulk_starts(p, &disc, &grid).iter().map(|s| disc.pack(s)).collect();
    if let Some(w) = warm {
        let embedded = w.embed(&grid)?;
        starts.push(disc.pack(embedded.cells()));
    }
    let outcomes = run_all(&disc, starts, &p.options)?;
    finish(
        &disc,
        outcomes,
        &p.pair,
        &p.energy_options(),
        p.options.tolerance,
        |field| {
            let vol = field.grid().volume();
            let mg = mean_gradient(field);
            let mean = (&(&mg * (1.0 / vol)) - &p.b).max_abs();
            let boundary = if p.options.boundary == BoundaryMode::Trace {
                Some(boundary_mismatch(field, &p.a))
            } else {
                None
            };
            Residuals {
                boundary_trace: boundary,
                mean_gradient: mean,
            }
        },
    )
    .map(|mut r| {
        r.boundary = p.options.boundary;
        r
    })
}

fn boundary_mismatch(field: &SBVField, a: &Matrix) -> f64 {
    let grid = field.grid();
    let mesh = grid.mesh();
    let mut worst = 0.0f64;
    for f in mesh.faces.iter().filter(|f| f.is_boundary()) {
        let e = f.minus.or(f.plus).expect("face has a side");
        for p in [&f.p0, &f.p1] {
            let x = grid.to_physical(p);
            let u = field.cells()[e].eval(&x);
            let t = a.mul_vec(&x);
            for (ui, ti) in u.iter().zip(&t) {
                worst = worst.max((ui - ti).abs());
            }
        }
    }
    worst
}

fn finish(
    disc: &Discrete,
    outcomes: Vec<RunOutcome>,
    pair: &DensityPair,
    energy: &EnergyOptions,
    tolerance: f64,
    residuals: impl Fn(&SBVField) -> Residuals,
) -> Result<SolveResult> {
    let fields = outcomes.iter().map(|o| disc.field(&o.z)).collect::<Result<Vec<_>>>()?;
    let keyed: Vec<(f64, f64)> = outcomes
        .iter()
        .zip(&fields)
        .map(|(o, f)| (o.value, total_variation_with(f, &energy.exterior)))
        .collect();
    let winner = pick_winner(&keyed);
    let minimizer = fields[winner].clone();
    let value = eval_energy_with(&minimizer, pair, energy)?.total;
    let res = residuals(&minimizer);
    if res.mean_gradient > tolerance {
        return Err(Error::Residual {
            what: "mean gradient".into(),
            residual: res.mean_gradient,
            tolerance,
        });
    }
    if let Some(b) = res.boundary_trace {
        if b > tolerance {
            return Err(Error::Residual {
                what: "boundary trace".into(),
                residual: b,
                tolerance,
            });
        }
    }
    let converged = outcomes[winner].converged;
    if !converged {
        warn!("cell solver hit the iteration cap; returning the best competitor found");
    }
    Ok(SolveResult {
        value,
        minimizer,
        residuals: res,
        mode: SolveMode::NumericUpperBound,
        boundary: BoundaryMode::Collar,
        iterations: outcomes.iter().map(|o| o.iterations).sum(),
        restarts_used: outcomes.len(),
        winner,
        restart_values: outcomes.iter().map(|o| o.value).collect(),
        converged,
        planar_value: None,
    })
}

/// Relaxed surface density `h(x, λ, ν)` over piecewise constant competitors.
pub fn solve_surface(problem: &SurfaceProblem) -> Result<SolveResult> {
    problem.validate()?;
    let p = problem;
    let d = p.lambda.len();
    let dim = p.nu.len();
    let grid = p.grid()?;
    let energy = p.energy_options();
    // the surface cell formula has no bulk term
    let pair = DensityPair {
        bulk: Arc::new(FnBulk::new("zero", |_, _| 0.0).convex(true).x_dependent(false)),
        ..p.pair.clone()
    };
    let zero = vec![0.0; d];
    let planar = step_field(&grid, &p.lambda, &zero, &p.nu)?;
    let planar_value = eval_energy_with(&planar, &pair, &energy)?.total;

    let disc = Discrete::new(
        grid.clone(),
        d,
        &pair,
        &p.x,
        &energy.exterior,
        SlopeSpec::Pinned(Matrix::zeros(d, dim)),
        None,
    )?;
    let constant = |v: &[f64]| -> Vec<Piece> {
        vec![
            Piece {
                offset: v.to_vec(),
                slope: Matrix::zeros(d, dim),
            };
            grid.num_elements()
        ]
    };
    let half: Vec<f64> = p.lambda.iter().map(|v| 0.5 * v).collect();
    let mut starts = vec![
        planar.cells().to_vec(),
        constant(&zero),
        constant(&p.lambda),
        constant(&half),
    ];
    let mut k = 0u64;
    while starts.len() < p.options.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(p.options.seed ^ (0xD1B5_4A32_D192_ED03u64.wrapping_mul(k + 1)));
        let labels = k % 2 == 0;
        let pieces = (0..grid.num_elements())
            .map(|_| {
                let t: f64 = if labels {
                    if rng.gen_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    rng.gen_range(0.0..1.0)
                };
                Piece {
                    offset: p.lambda.iter().map(|v| t * v).collect(),
                    slope: Matrix::zeros(d, dim),
                }
            })
            .collect();
        starts.push(pieces);
        k += 1;
    }
    starts.truncate(p.options.restarts.max(1));
    let zs = starts.iter().map(|s| disc.pack(s)).collect();
    let outcomes = run_all(&disc, zs, &p.options)?;
    let mut result = finish(&disc, outcomes, &pair, &energy, p.options.tolerance, |_| Residuals {
        boundary_trace: None,
        mean_gradient: 0.0,
    })?;
    if planar_value <= result.value {
        result.value = planar_value;
        result.minimizer = planar;
    }
    if dim == 1 && pair.surface.is_subadditive_homogeneous() {
        result.mode = SolveMode::Exact1dConvex;
    }
    result.planar_value = Some(planar_value);
    Ok(result)
}

/// Smallest frozen-x energy over a caller-supplied sequence of competitors
/// for `(a_A, B)`. Fields whose mean gradient misses `B` by more than the
/// tolerance are skipped with a warning.
pub fn sequential_upper_bound(problem: &BulkProblem, sequence: &[SBVField]) -> Result<f64> {
    problem.validate()?;
    if sequence.is_empty() {
        return Err(Error::Invalid("sequence of competitors is empty".into()));
    }
    let opts = problem.energy_options();
    let mut best: Option<f64> = None;
    for (k, u) in sequence.iter().enumerate() {
        if u.grid().dim() != problem.x.len() || u.d() != problem.a.rows() {
            return Err(Error::Dimension(format!("competitor {k} does not match the problem")));
        }
        let vol = u.grid().volume();
        let dev = (&(&mean_gradient(u) * (1.0 / vol)) - &problem.b).max_abs();
        if dev > problem.options.tolerance {
            warn!("skipping competitor {k}: mean gradient off by {dev:e}");
            continue;
        }
        let v = eval_energy_with(u, &problem.pair, &opts)?.total;
        best = Some(best.map_or(v, |b: f64| b.min(v)));
    }
    best.ok_or_else(|| Error::Invalid("no competitor satisfies the mean-gradient constraint".into()))
}

/// Norm of λ used by callers comparing surface values.
pub fn jump_norm(lambda: &[f64]) -> f64 {
    norm(lambda)
}
