//! Approximating sequences: primitives of cellwise constant fields,
//! piecewise constant staircases, and the multi-indexed family
//! `u_{n₁…n_L} = g + Σ_ℓ (ū_{n_ℓ} − u_ℓ)` with `∇u_ℓ = G_{ℓ−1} − G_ℓ`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::HierarchicalDeformation;
use crate::linalg::{sub_vec, Matrix};
use crate::quadrature::{abs_affine_integral, gauss_legendre_unit, norm_affine_integral};
use crate::sbvmesh::{element_points, l1_distance, total_variation, Grid, Piece, SBVField};

pub const SBVFAMILY_VERSION: &str = "sbvfamily-v1";

/// Formats a float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Where a staircase samples the field on each cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Lower cell corner (one-sided limit from inside the cell).
    #[default]
    Floor,
    Midpoint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Construction {
    Primitive1d,
    /// `G_{ℓ−1} − G_ℓ` varies only along axis `axes[ℓ−1]`.
    LaminateNd {
        axes: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub field: SBVField,
    /// `|D^j u|(Ω)`.
    pub jump_mass: f64,
    pub f_l1: f64,
    /// `jump_mass / ‖f‖_{L¹}` (0 when f vanishes).
    pub constant: f64,
}

/// A field with `∇u = f` cellwise. In 1D this is the continuous running
/// integral from the left end; for a laminate along `axis` it is the 1D
/// construction in the strip coordinate, extended affinely across strips.
pub fn primitive_field(grid: &Grid, f: &[Matrix], axis: Option<usize>) -> Result<Primitive> {
    let ne = grid.num_elements();
    if f.len() != ne {
        return Err(Error::ShapeMismatch {
            expected: format!("{ne} cells"),
            got: format!("{}", f.len()),
        });
    }
    let dim = grid.dim();
    let axis = match (dim, axis) {
        (1, _) => 0,
        (_, Some(a)) if a < dim => a,
        _ => {
            return Err(Error::Unsupported(
                "primitives in 2D need a declared laminate axis".into(),
            ))
        }
    };
    if grid.rotation() != &Matrix::identity(dim) {
        return Err(Error::Unsupported("laminate primitives need an unrotated grid".into()));
    }
    let d = f[0].rows();
    for (c, m) in f.iter().enumerate() {
        if m.shape() != (d, dim) {
            return Err(Error::AtCell {
                cell: c,
                message: format!("expected a {d}x{dim} matrix"),
            });
        }
    }
    let mesh = grid.mesh();
    let h = grid.spacing(axis);
    let lo = grid.bounds()[axis][0];
    let strip_of = |c: usize| -> usize {
        let s = (mesh.elements[c].centroid[axis] - lo) / h;
        (s.floor().max(0.0) as usize).min(grid.n() - 1)
    };
    let mut strips: Vec<Option<&Matrix>> = vec![None; grid.n()];
    for (c, m) in f.iter().enumerate() {
        let s = strip_of(c);
        match strips[s] {
            None => strips[s] = Some(m),
            Some(prev) => {
                if (prev - m).max_abs() > 1e-12 * (1.0 + prev.max_abs()) {
                    return Err(Error::Unsupported(format!(
                        "field is not a laminate along axis {axis} (cell {c} differs within its strip)"
                    )));
                }
            }
        }
    }
    // V(s_i) = Σ_{j<i} F_j m h
    let mut v_lo = vec![vec![0.0; d]; grid.n()];
    for i in 1..grid.n() {
        let prev = strips[i - 1].expect("every strip has cells");
        v_lo[i] = v_lo[i - 1]
            .iter()
            .zip(prev.column(axis))
            .map(|(a, b)| a + b * h)
            .collect();
    }
    let cells = (0..ne)
        .map(|c| {
            let i = strip_of(c);
            let s_lo = lo + i as f64 * h;
            let col = f[c].column(axis);
            Piece {
                offset: v_lo[i].iter().zip(&col).map(|(v, a)| v - a * s_lo).collect(),
                slope: f[c].clone(),
            }
        })
        .collect();
    let field = SBVField::new(grid.clone(), cells)?;
    let f_l1: f64 = mesh.elements.iter().zip(f).map(|(e, m)| e.measure * m.norm()).sum();
    let jump_mass = (total_variation(&field) - f_l1).max(0.0);
    let constant = if f_l1 > 0.0 { jump_mass / f_l1 } else { 0.0 };
    Ok(Primitive {
        field,
        jump_mass,
        f_l1,
        constant,
    })
}

/// Lower corner of element `e` in reference coordinates, and a point just inside it.
fn sample_point(grid: &Grid, e: usize, sampling: Sampling) -> (Vec<f64>, Vec<f64>) {
    let dim = grid.dim();
    let per = grid.elements_per_square();
    let sq = e / per;
    let idx = if dim == 1 {
        vec![sq]
    } else {
        vec![sq % grid.n(), sq / grid.n()]
    };
    let mut at = Vec::with_capacity(dim);
    let mut inside = Vec::with_capacity(dim);
    for a in 0..dim {
        let h = grid.spacing(a);
        let lo = grid.bounds()[a][0] + idx[a] as f64 * h;
        match sampling {
            Sampling::Floor => {
                at.push(lo);
                inside.push(lo + 1e-9 * h);
            }
            Sampling::Midpoint => {
                at.push(lo + 0.5 * h);
                inside.push(lo + 0.5 * h);
            }
        }
    }
    (at, inside)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Staircase {
    pub field: SBVField,
    pub l1_residual: f64,
    /// `|Dū_n|(Ω) − |Du|(Ω)`.
    pub tv_residual: f64,
}

/// Piecewise constant `ū_n` on an `n`-grid of the same box, sampled per cell.
pub fn staircase(u: &SBVField, n: usize, sampling: Sampling) -> Result<Staircase> {
    let g = u.grid();
    if n == 0 {
        return Err(Error::Invalid("staircase needs n >= 1".into()));
    }
    let target = Grid::unit_cube(g.dim(), n)?
        .with_box(g.bounds().to_vec())?
        .with_rotation(g.rotation().clone())?;
    let zero = Matrix::zeros(u.d(), g.dim());
    let cells = (0..target.num_elements())
        .map(|e| {
            let (at, inside) = sample_point(&target, e, sampling);
            let k = g.locate(&inside)?;
            let x = g.to_physical(&at);
            Ok(Piece {
                offset: u.cells()[k].eval(&x),
                slope: zero.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let field = SBVField::new(target, cells)?;
    Ok(Staircase {
        l1_residual: l1_norm_of_difference(&field, u)?,
        tv_residual: total_variation(&field) - total_variation(u),
        field,
    })
}

/// `∫|u − v|`. Exact in 1D (breakpoints of both grids); 8×8 Gauss points per
/// element of the finer grid in 2D.
pub fn l1_norm_of_difference(u: &SBVField, v: &SBVField) -> Result<f64> {
    if u.grid().dim() != 1 || v.grid().dim() != 1 || u.grid().rotation() != v.grid().rotation() {
        return l1_distance(u, v, 8);
    }
    if u.d() != v.d() {
        return Err(Error::Dimension("fields have different component counts".into()));
    }
    let mut cuts: Vec<f64> = Vec::new();
    for f in [u, v] {
        let g = f.grid();
        let [lo, hi] = g.bounds()[0];
        for i in 0..=g.n() {
            cuts.push(if i == g.n() { hi } else { lo + i as f64 * g.spacing(0) });
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-14);
    let r = u.grid().rotation().get(0, 0);
    let mut acc = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = [0.5 * (a + b)];
        let pu = &u.cells()[u.grid().locate(&mid)?];
        let pv = &v.cells()[v.grid().locate(&mid)?];
        let (xa, xb) = ([r * a], [r * b]);
        let d0 = sub_vec(&pu.eval(&xa), &pv.eval(&xa));
        let d1 = sub_vec(&pu.eval(&xb), &pv.eval(&xb));
        let dd = sub_vec(&d1, &d0);
        let len = b - a;
        acc += len
            * if d0.len() == 1 {
                abs_affine_integral(d0[0], dd[0])
            } else {
                norm_affine_integral(&d0, &dd)
            };
    }
    Ok(acc)
}

/// `‖u‖_{L¹}`.
pub fn l1_norm(u: &SBVField) -> Result<f64> {
    let zero = SBVField::new(
        u.grid().clone(),
        vec![
            Piece {
                offset: vec![0.0; u.d()],
                slope: Matrix::zeros(u.d(), u.grid().dim()),
            };
            u.grid().num_elements()
        ],
    )?;
    l1_norm_of_difference(u, &zero)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproximationPlan {
    pub target: HierarchicalDeformation,
    /// Values of `n_ℓ` for each level; the family is their full product.
    pub indices: Vec<Vec<usize>>,
    pub construction: Construction,
    #[serde(default)]
    pub sampling: Sampling,
}

impl ApproximationPlan {
    pub fn new(target: HierarchicalDeformation, indices: Vec<Vec<usize>>, construction: Construction) -> Result<Self> {
        let plan = ApproximationPlan {
            target,
            indices,
            construction,
            sampling: Sampling::Floor,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.target.depth();
        if self.indices.len() != depth {
            return Err(Error::ShapeMismatch {
                expected: format!("{depth} index lists"),
                got: format!("{}", self.indices.len()),
            });
        }
        if self.indices.iter().any(|l| l.is_empty() || l.contains(&0)) {
            return Err(Error::Invalid("index lists must be nonempty and positive".into()));
        }
        let dim = self.target.g().grid().dim();
        match &self.construction {
            Construction::Primitive1d if dim != 1 => {
                Err(Error::Unsupported("primitive-1d construction on a 2D grid".into()))
            }
            Construction::LaminateNd { axes } if axes.len() != depth || axes.iter().any(|a| *a >= dim) => Err(
                Error::Invalid("laminate construction needs one valid axis per level".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Every index tuple of the family in lexicographic order.
    pub fn index_tuples(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for list in &self.indices {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    list.iter().map(move |n| {
                        let mut t = prefix.clone();
                        t.push(*n);
                        t
                    })
                })
                .collect();
        }
        out
    }

    fn axis(&self, level: usize) -> Option<usize> {
        match &self.construction {
            Construction::Primitive1d => None,
            Construction::LaminateNd { axes } => Some(axes[level - 1]),
        }
    }

    /// `u_ℓ` with `∇u_ℓ = G_{ℓ−1} − G_ℓ` (on the grid of g).
    pub fn corrector(&self, level: usize) -> Result<Primitive> {
        let t = &self.target;
        let grid = t.g().grid();
        let f: Vec<Matrix> = (0..grid.num_elements())
            .map(|c| t.level_at(level - 1, c) - t.level_at(level, c))
            .collect();
        primitive_field(grid, &f, self.axis(level))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// `g_{n₁…n_m} = g + Σ_{ℓ≤m} (ū_{n_ℓ} − u_ℓ)` for `m = indices.len()`, on
/// the common refinement of all grids involved.
pub fn partial_field(plan: &ApproximationPlan, correctors: &[Primitive], indices: &[usize]) -> Result<SBVField> {
    let g = plan.target.g();
    let n_g = g.grid().n();
    let n = indices.iter().fold(n_g, |acc, k| lcm(acc, *k));
    let grid = g.grid().refined(n / n_g)?;
    let mut u = g.embed(&grid)?;
    for (l, &k) in indices.iter().enumerate() {
        let ul = &correctors[l].field;
        let bar = staircase(ul, k, plan.sampling)?.field;
        u = u.try_add(&bar.embed(&grid)?, 1.0)?;
        u = u.try_add(&ul.embed(&grid)?, -1.0)?;
    }
    Ok(u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyMember {
    pub indices: Vec<usize>,
    pub field: SBVField,
}

/// A multi-indexed family of fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FamilyDoc", into = "FamilyDoc")]
pub struct SBVFamily {
    pub members: Vec<FamilyMember>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyDoc {
    version: String,
    members: Vec<FamilyMember>,
}

impl TryFrom<FamilyDoc> for SBVFamily {
    type Error = Error;
    fn try_from(doc: FamilyDoc) -> Result<Self> {
        if doc.version != SBVFAMILY_VERSION {
            return Err(Error::Serde(format!(
                "expected {SBVFAMILY_VERSION}, got {}",
                doc.version
            )));
        }
        Ok(SBVFamily { members: doc.members })
    }
}

impl From<SBVFamily> for FamilyDoc {
    fn from(f: SBVFamily) -> Self {
        FamilyDoc {
            version: SBVFAMILY_VERSION.into(),
            members: f.members,
        }
    }
}

impl SBVFamily {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn get(&self, indices: &[usize]) -> Option<&SBVField> {
        self.members.iter().find(|m| m.indices == indices).map(|m| &m.field)
    }
}

/// Builds `u_{n₁…n_L}` for every index tuple of the plan.
pub fn build_hierarchical_sequence(plan: &ApproximationPlan) -> Result<SBVFamily> {
    plan.validate()?;
    let correctors = (1..=plan.target.depth())
        .map(|l| plan.corrector(l))
        .collect::<Result<Vec<_>>>()?;
    let members = plan
        .index_tuples()
        .into_par_iter()
        .map(|indices| {
            let field = partial_field(plan, &correctors, &indices)?;
            Ok(FamilyMember { indices, field })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SBVFamily { members })
}

/// Test function for weak-* moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFunction {
    /// `Π x_i^{p_i}`.
    Monomial { powers: Vec<u32> },
    /// `exp(1 − 1/(1 − r²))` for `r = |x − c|/radius < 1`, zero outside.
    Bump { center: Vec<f64>, radius: f64 },
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Monomial { powers } => x.iter().zip(powers).map(|(v, p)| v.powi(*p as i32)).product(),
            TestFunction::Bump { center, radius } => {
                let r2 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (radius * radius);
                if r2 < 1.0 {
                    (1.0 - 1.0 / (1.0 - r2)).exp()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            TestFunction::Monomial { powers } => format!("monomial{powers:?}"),
            TestFunction::Bump { center, radius } => format!("bump(c={center:?},r={radius})"),
        }
    }
}

/// Tensor-product monomials of degree ≤ 2 per coordinate and 8 bumps
/// placed inside the box of `grid`.
pub fn default_battery(grid: &Grid, seed: u64) -> Vec<TestFunction> {
    let dim = grid.dim();
    let mut out = Vec::new();
    let powers: Vec<Vec<u32>> = if dim == 1 {
        (0..=2).map(|p| vec![p]).collect()
    } else {
        (0..=2).flat_map(|b| (0..=2).map(move |a| vec![a, b])).collect()
    };
    out.extend(powers.into_iter().map(|powers| TestFunction::Monomial { powers }));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..8 {
        let radius = rng.gen_range(0.1..0.3);
        let center = (0..dim)
            .map(|a| {
                let [lo, hi] = grid.bounds()[a];
                rng.gen_range(lo + radius..hi - radius)
            })
            .collect::<Vec<f64>>();
        let center = grid.to_physical(&center);
        out.push(TestFunction::Bump { center, radius });
    }
    out
}

/// `max_φ |∫ φ (∇u − G)|` (Frobenius norm of the matrix moment).
fn moment_residual(
    u: &SBVField,
    target: &HierarchicalDeformation,
    level: usize,
    battery: &[TestFunction],
) -> Result<f64> {
    let grid = u.grid();
    let tgrid = target.g().grid();
    let mesh = grid.mesh();
    let rule = gauss_legendre_unit(4);
    let mut worst = 0.0f64;
    for phi in battery {
        let mut m = Matrix::zeros(u.d(), grid.dim());
        for (c, e) in mesh.elements.iter().enumerate() {
            let x = grid.to_physical(&e.centroid);
            let tc = tgrid.locate(&tgrid.to_reference(&x))?;
            let diff = &u.cells()[c].slope - target.level_at(level, tc);
            if diff.max_abs() == 0.0 {
                continue;
            }
            let w: f64 = element_points(e, &rule)
                .iter()
                .map(|(y, w)| w * phi.eval(&grid.to_physical(y)))
                .sum();
            m = &m + &(&diff * w);
        }
        worst = worst.max(m.norm());
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub indices: Vec<usize>,
    /// `‖u_{n…} − g‖_{L¹}`.
    pub l1_distance: f64,
    /// `‖g_{n₁…n_ℓ} − g‖_{L¹}` for `ℓ = 1..L` (inner limits taken exactly);
    /// `None` where the intermediate field is unknown.
    pub partial_l1: Vec<Option<f64>>,
    /// Moment residual of `∇g_{n₁…n_ℓ}` against `G_ℓ` for `ℓ = 1..L`.
    pub moment_residuals: Vec<Option<f64>>,
    pub total_variation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub battery: Vec<String>,
    pub rows: Vec<ConvergenceRow>,
    pub l1_tolerance: f64,
    pub moment_tolerance: f64,
    /// L¹ distances decrease along every index (10% slack).
    pub monotone: bool,
    pub l1_pass: bool,
    pub moments_pass: bool,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceOptions {
    pub l1_tolerance: f64,
    pub moment_tolerance: f64,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        ConvergenceOptions {
            l1_tolerance: 0.05,
            moment_tolerance: 1e-10,
        }
    }
}

fn full_grid(family: &SBVFamily) -> Result<Vec<Vec<usize>>> {
    let Some(first) = family.members.first() else {
        return Err(Error::Invalid("family is empty".into()));
    };
    let depth = first.indices.len();
    let mut axes: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); depth];
    let mut seen = BTreeSet::new();
    for m in &family.members {
        if m.indices.len() != depth {
            return Err(Error::Invalid(
                "family members have index tuples of different lengths".into(),
            ));
        }
        for (a, k) in m.indices.iter().enumerate() {
            axes[a].insert(*k);
        }
        if !seen.insert(m.indices.clone()) {
            return Err(Error::Invalid(format!("index tuple {:?} appears twice", m.indices)));
        }
    }
    let expected: usize = axes.iter().map(|a| a.len()).product();
    if expected != seen.len() {
        return Err(Error::Invalid(format!(
            "family is not a full grid of indices ({} of {expected} tuples)",
            seen.len()
        )));
    }
    Ok(axes.into_iter().map(|a| a.into_iter().collect()).collect())
}

/// Iterated-limit diagnostics for a family against its target.
pub fn verify_convergence(
    family: &SBVFamily,
    target: &HierarchicalDeformation,
    battery: &[TestFunction],
    options: ConvergenceOptions,
) -> Result<ConvergenceReport> {
    if battery.is_empty() {
        return Err(Error::Invalid("test-function battery is empty".into()));
    }
    let axes = full_grid(family)?;
    let depth = target.depth();
    if axes.len() != depth {
        return Err(Error::ShapeMismatch {
            expected: format!("{depth} indices per member"),
            got: format!("{}", axes.len()),
        });
    }
    let g = target.g();
    let mut members: Vec<&FamilyMember> = family.members.iter().collect();
    members.sort_by(|a, b| a.indices.cmp(&b.indices));

    // only the last level is known for an arbitrary family
    let rows = members
        .par_iter()
        .map(|m| {
            let u = &m.field;
            let l1_distance = l1_norm_of_difference(u, g)?;
            let mut moment_residuals = vec![None; depth];
            moment_residuals[depth - 1] = Some(moment_residual(u, target, depth, battery)?);
            let mut partial_l1 = vec![None; depth];
            partial_l1[depth - 1] = Some(l1_distance);
            Ok(ConvergenceRow {
                indices: m.indices.clone(),
                l1_distance,
                partial_l1,
                moment_residuals,
                total_variation: total_variation(u),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_report(rows, &axes, battery, options))
}

/// As [`verify_convergence`], with the intermediate fields `g_{n₁…n_ℓ}`
/// rebuilt from the plan so every level is checked.
pub fn verify_plan_convergence(
    plan: &ApproximationPlan,
    family: &SBVFamily,
    battery: &[TestFunction],
    options: ConvergenceOptions,
) -> Result<ConvergenceReport> {
    if battery.is_empty() {
        return Err(Error::Invalid("test-function battery is empty".into()));
    }
    let axes = full_grid(family)?;
    let target = &plan.target;
    let depth = target.depth();
    let correctors = (1..=depth).map(|l| plan.corrector(l)).collect::<Result<Vec<_>>>()?;
    let g = target.g();
    let mut members: Vec<&FamilyMember> = family.members.iter().collect();
    members.sort_by(|a, b| a.indices.cmp(&b.indices));
    let rows = members
        .par_iter()
        .map(|m| {
            let mut partial_l1 = Vec::with_capacity(depth);
            let mut moment_residuals = Vec::with_capacity(depth);
            for l in 1..=depth {
                let gl = if l == depth {
                    m.field.clone()
                } else {
                    partial_field(plan, &correctors, &m.indices[..l])?
                };
                partial_l1.push(Some(l1_norm_of_difference(&gl, g)?));
                moment_residuals.push(Some(moment_residual(&gl, target, l, battery)?));
            }
            Ok(ConvergenceRow {
                indices: m.indices.clone(),
                l1_distance: l1_norm_of_difference(&m.field, g)?,
                partial_l1,
                moment_residuals,
                total_variation: total_variation(&m.field),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_report(rows, &axes, battery, options))
}

fn assemble_report(
    rows: Vec<ConvergenceRow>,
    axes: &[Vec<usize>],
    battery: &[TestFunction],
    options: ConvergenceOptions,
) -> ConvergenceReport {
    let lookup = |idx: &[usize]| rows.iter().find(|r| r.indices == idx).expect("full grid");
    let mut monotone = true;
    for row in &rows {
        for (a, values) in axes.iter().enumerate() {
            let pos = values.iter().position(|v| *v == row.indices[a]).expect("axis value");
            if pos + 1 < values.len() {
                let mut next = row.indices.clone();
                next[a] = values[pos + 1];
                let other = lookup(&next);
                if other.l1_distance > 1.1 * row.l1_distance + 1e-14 {
                    monotone = false;
                }
            }
        }
    }
    let last: Vec<usize> = axes.iter().map(|a| *a.last().expect("nonempty")).collect();
    let l1_pass = lookup(&last).l1_distance <= options.l1_tolerance;
    let moments_pass = rows.iter().all(|r| {
        r.moment_residuals
            .iter()
            .flatten()
            .all(|m| *m <= options.moment_tolerance)
    });
    ConvergenceReport {
        battery: battery.iter().map(TestFunction::describe).collect(),
        l1_tolerance: options.l1_tolerance,
        moment_tolerance: options.moment_tolerance,
        pass: monotone && l1_pass && moments_pass,
        monotone,
        l1_pass,
        moments_pass,
        rows,
    }
}

impl ConvergenceReport {
    /// One row per index tuple.
    pub fn to_csv(&self) -> String {
        let depth = self.rows.first().map_or(0, |r| r.indices.len());
        let mut out = String::new();
        let mut header: Vec<String> = (1..=depth).map(|l| format!("n{l}")).collect();
        header.push("l1_distance".into());
        header.extend((1..=depth).map(|l| format!("partial_l1_{l}")));
        header.extend((1..=depth).map(|l| format!("moment_residual_{l}")));
        header.push("total_variation".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for r in &self.rows {
            let mut cells: Vec<String> = r.indices.iter().map(|k| k.to_string()).collect();
            cells.push(fmt17(r.l1_distance));
            cells.extend(r.partial_l1.iter().map(|v| v.map(fmt17).unwrap_or_default()));
            cells.extend(r.moment_residuals.iter().map(|v| v.map(fmt17).unwrap_or_default()));
            cells.push(fmt17(r.total_variation));
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvBoundRow {
    pub indices: Vec<usize>,
    pub total_variation: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvBoundReport {
    /// `‖(g, G)‖ = ‖g‖_{L¹} + |Dg|(Ω) + ‖G‖_{L¹}`.
    pub sd_norm: f64,
    pub rows: Vec<TvBoundRow>,
    /// `max_n |Du_n|(Ω) / ‖(g, G)‖`.
    pub constant: f64,
    /// Ratio at the smallest index.
    pub first: f64,
    /// Least-squares slope of the ratio against `n`.
    pub slope: f64,
}

impl TvBoundReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,total_variation,ratio\n");
        for r in &self.rows {
            let idx: Vec<String> = r.indices.iter().map(|k| k.to_string()).collect();
            let _ = writeln!(out, "{},{},{}", idx.join(";"), fmt17(r.total_variation), fmt17(r.ratio));
        }
        out
    }
}

/// Measured constant in `|Du_n|(Ω) ≤ C ‖(g, G)‖` for a single-level target.
pub fn verify_tv_bound(family: &SBVFamily, target: &HierarchicalDeformation) -> Result<TvBoundReport> {
    if target.depth() != 1 {
        return Err(Error::Invalid(format!(
            "total-variation bound needs a single-level target, got {} levels",
            target.depth()
        )));
    }
    if family.members.is_empty() {
        return Err(Error::Invalid("family is empty".into()));
    }
    let g = target.g();
    let mesh = g.grid().mesh();
    let g_l1 = l1_norm(g)?;
    let big_g_l1: f64 = mesh
        .elements
        .iter()
        .enumerate()
        .map(|(c, e)| e.measure * target.level_at(1, c).norm())
        .sum();
    let sd_norm = g_l1 + total_variation(g) + big_g_l1;
    if !(sd_norm > 0.0) {
        return Err(Error::Invalid("target has zero norm".into()));
    }
    let mut members: Vec<&FamilyMember> = family.members.iter().collect();
    members.sort_by(|a, b| a.indices.cmp(&b.indices));
    let rows: Vec<TvBoundRow> = members
        .iter()
        .map(|m| {
            let tv = total_variation(&m.field);
            TvBoundRow {
                indices: m.indices.clone(),
                total_variation: tv,
                ratio: tv / sd_norm,
            }
        })
        .collect();
    let constant = rows.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
    let first = rows[0].ratio;
    let xs: Vec<f64> = rows.iter().map(|r| r.indices[0] as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(TvBoundReport {
        sd_norm,
        rows,
        constant,
        first,
        slope,
    })
}

/// Pointwise gradient check: largest `|∇u − G|` over cells (target grid located per cell).
pub fn gradient_defect(u: &SBVField, target: &HierarchicalDeformation, level: usize) -> Result<f64> {
    let grid = u.grid();
    let tgrid = target.g().grid();
    let mesh = grid.mesh();
    let mut worst = 0.0f64;
    for (c, e) in mesh.elements.iter().enumerate() {
        let x = grid.to_physical(&e.centroid);
        let tc = tgrid.locate(&tgrid.to_reference(&x))?;
        worst = worst.max((&u.cells()[c].slope - target.level_at(level, tc)).max_abs());
    }
    Ok(worst)
}
