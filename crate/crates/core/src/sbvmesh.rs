//! Broken piecewise-affine fields on 1D and 2D grids and their energies.
//!
//! A field stores one affine piece `u(x) = c + S x` per element (physical
//! coordinates). Jumps live on element faces and are the trace difference of
//! the two neighbouring pieces, so they vary affinely along each face.

use serde::{Deserialize, Serialize};

use crate::density::{DensityPair, SurfaceKind};
use crate::error::{Error, Result};
use crate::linalg::{check_unit, dot, norm, sub_vec, Matrix, UNIT_TOL};
use crate::quadrature::{abs_affine_integral, gauss_legendre_unit, norm_affine_integral};

pub const SBVFIELD_VERSION: &str = "sbvfield-v1";

/// How each square of a 2D grid is split into elements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cut {
    /// One element per square.
    #[default]
    None,
    /// Four triangles per square, cut along both diagonals.
    CrissCross,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GridDoc {
    dim: usize,
    n: usize,
    #[serde(rename = "box")]
    bounds: Option<Vec<[f64; 2]>>,
    rotation: Option<Matrix>,
    #[serde(default)]
    cut: Cut,
}

/// Uniform grid on an axis-aligned box, optionally rotated.
///
/// Reference coordinates `y` live in the box; physical points are `x = R y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridDoc")]
pub struct Grid {
    dim: usize,
    n: usize,
    #[serde(rename = "box")]
    bounds: Vec<[f64; 2]>,
    rotation: Matrix,
    cut: Cut,
}

impl TryFrom<GridDoc> for Grid {
    type Error = Error;
    fn try_from(doc: GridDoc) -> Result<Self> {
        let mut g = Grid::unit_cube(doc.dim, doc.n)?;
        if let Some(b) = doc.bounds {
            g = g.with_box(b)?;
        }
        if let Some(r) = doc.rotation {
            g = g.with_rotation(r)?;
        }
        g.with_cut(doc.cut)
    }
}

impl Grid {
    /// `n` cells per side on Q = (−½, ½)^dim.
    pub fn unit_cube(dim: usize, n: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Dimension(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if n == 0 {
            return Err(Error::Invalid("grid needs at least one cell per side".into()));
        }
        Ok(Grid {
            dim,
            n,
            bounds: vec![[-0.5, 0.5]; dim],
            rotation: Matrix::identity(dim),
            cut: Cut::None,
        })
    }

    /// Same resolution on an arbitrary box.
    pub fn with_box(mut self, bounds: Vec<[f64; 2]>) -> Result<Self> {
        if bounds.len() != self.dim {
            return Err(Error::Dimension(format!(
                "box has {} axes, grid has {}",
                bounds.len(),
                self.dim
            )));
        }
        if bounds
            .iter()
            .any(|b| !(b[0].is_finite() && b[1].is_finite() && b[1] > b[0]))
        {
            return Err(Error::Invalid(format!("degenerate box {bounds:?}")));
        }
        self.bounds = bounds;
        Ok(self)
    }

    pub fn with_rotation(mut self, rotation: Matrix) -> Result<Self> {
        if rotation.shape() != (self.dim, self.dim) || !rotation.is_orthonormal(UNIT_TOL) {
            return Err(Error::Invalid(format!("rotation is not orthonormal: {rotation:?}")));
        }
        self.rotation = rotation;
        Ok(self)
    }

    pub fn with_cut(mut self, cut: Cut) -> Result<Self> {
        if cut == Cut::CrissCross && self.dim != 2 {
            return Err(Error::Dimension("criss-cross cut needs a 2D grid".into()));
        }
        self.cut = cut;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn bounds(&self) -> &[[f64; 2]] {
        &self.bounds
    }
    pub fn rotation(&self) -> &Matrix {
        &self.rotation
    }
    pub fn cut(&self) -> Cut {
        self.cut
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.bounds[axis][1] - self.bounds[axis][0]) / self.n as f64
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|b| b[1] - b[0]).product()
    }

    /// Same geometry with `n · factor` cells per side.
    pub fn refined(&self, factor: usize) -> Result<Grid> {
        if factor == 0 {
            return Err(Error::Invalid("refinement factor must be positive".into()));
        }
        let mut g = self.clone();
        g.n *= factor;
        Ok(g)
    }

    pub fn elements_per_square(&self) -> usize {
        match self.cut {
            Cut::None => 1,
            Cut::CrissCross => 4,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.n.pow(self.dim as u32) * self.elements_per_square()
    }

    pub fn to_physical(&self, y: &[f64]) -> Vec<f64> {
        self.rotation.mul_vec(y)
    }

    pub fn to_reference(&self, x: &[f64]) -> Vec<f64> {
        self.rotation.transpose().mul_vec(x)
    }

    /// Element containing the reference point `y` (ties resolved towards lower index).
    pub fn locate(&self, y: &[f64]) -> Result<usize> {
        if y.len() != self.dim {
            return Err(Error::Dimension(format!("point has {} coordinates", y.len())));
        }
        let mut idx = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for a in 0..self.dim {
            let s = (y[a] - self.bounds[a][0]) / self.spacing(a);
            if !(s >= -1e-9 && s <= self.n as f64 + 1e-9) {
                return Err(Error::Invalid(format!("point {y:?} outside the grid box")));
            }
            let i = (s.floor().max(0.0) as usize).min(self.n - 1);
            idx[a] = i;
            frac[a] = s - i as f64;
        }
        let square = if self.dim == 1 {
            idx[0]
        } else {
            idx[1] * self.n + idx[0]
        };
        Ok(match self.cut {
            Cut::None => square,
            Cut::CrissCross => {
                let dx = frac[0] - 0.5;
                let dy = frac[1] - 0.5;
                let k = if dy.abs() >= dx.abs() {
                    if dy < 0.0 {
                        0
                    } else {
                        2
                    }
                } else if dx > 0.0 {
                    1
                } else {
                    3
                };
                4 * square + k
            }
        })
    }

    /// Explicit element and face geometry.
    pub fn mesh(&self) -> Mesh {
        Mesh::build(self)
    }
}

/// One element in reference coordinates.
#[derive(Clone, Debug)]
pub struct Element {
    pub vertices: Vec<Vec<f64>>,
    pub centroid: Vec<f64>,
    pub measure: f64,
}

/// A face between elements `minus` and `plus`; `None` marks the outside.
/// `normal` points from `minus` to `plus` (reference coordinates).
#[derive(Clone, Debug)]
pub struct Face {
    pub minus: Option<usize>,
    pub plus: Option<usize>,
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
    pub normal: Vec<f64>,
    /// Length in 2D, 1 in 1D.
    pub measure: f64,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.minus.is_none() || self.plus.is_none()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.p0.iter().zip(&self.p1).map(|(a, b)| 0.5 * (a + b)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub elements: Vec<Element>,
    pub faces: Vec<Face>,
}

impl Mesh {
    fn build(g: &Grid) -> Mesh {
        let n = g.n;
        if g.dim == 1 {
            let [lo, _] = g.bounds[0];
            let h = g.spacing(0);
            let elements = (0..n)
                .map(|i| {
                    let a = lo + i as f64 * h;
                    Element {
                        vertices: vec![vec![a], vec![a + h]],
                        centroid: vec![a + 0.5 * h],
                        measure: h,
                    }
                })
                .collect();
            let faces = (0..=n)
                .map(|i| {
                    let p = vec![lo + i as f64 * h];
                    Face {
                        minus: if i == 0 { None } else { Some(i - 1) },
                        plus: if i == n { None } else { Some(i) },
                        p0: p.clone(),
                        p1: p,
                        normal: vec![1.0],
                        measure: 1.0,
                    }
                })
                .collect();
            return Mesh { elements, faces };
        }

        let (hx, hy) = (g.spacing(0), g.spacing(1));
        let (x0, y0) = (g.bounds[0][0], g.bounds[1][0]);
        let corner = |i: usize, j: usize| vec![x0 + i as f64 * hx, y0 + j as f64 * hy];
        let cc = g.cut == Cut::CrissCross;
        let square = |i: usize, j: usize| j * n + i;
        // element adjacent to a square side: 0 bottom, 1 right, 2 top, 3 left
        let side = |i: usize, j: usize, s: usize| {
            if cc {
                4 * square(i, j) + s
            } else {
                square(i, j)
            }
        };

        let mut elements = Vec::with_capacity(g.num_elements());
        for j in 0..n {
            for i in 0..n {
                let (bl, br, tr, tl) = (corner(i, j), corner(i + 1, j), corner(i + 1, j + 1), corner(i, j + 1));
                if cc {
                    let c = vec![bl[0] + 0.5 * hx, bl[1] + 0.5 * hy];
                    for (a, b) in [(&bl, &br), (&br, &tr), (&tr, &tl), (&tl, &bl)] {
                        let centroid = vec![(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0];
                        elements.push(Element {
                            vertices: vec![a.clone(), b.clone(), c.clone()],
                            centroid,
                            measure: 0.25 * hx * hy,
                        });
                    }
                } else {
                    let centroid = vec![bl[0] + 0.5 * hx, bl[1] + 0.5 * hy];
                    elements.push(Element {
                        vertices: vec![bl, br, tr, tl],
                        centroid,
                        measure: hx * hy,
                    });
                }
            }
        }

        let mut faces = Vec::new();
        // vertical edges x = x0 + i hx, normal e1
        for j in 0..n {
            for i in 0..=n {
                faces.push(Face {
                    minus: (i > 0).then(|| side(i - 1, j, 1)),
                    plus: (i < n).then(|| side(i, j, 3)),
                    p0: corner(i, j),
                    p1: corner(i, j + 1),
                    normal: vec![1.0, 0.0],
                    measure: hy,
                });
            }
        }
        // horizontal edges y = y0 + j hy, normal e2
        for j in 0..=n {
            for i in 0..n {
                faces.push(Face {
                    minus: (j > 0).then(|| side(i, j - 1, 2)),
                    plus: (j < n).then(|| side(i, j, 0)),
                    p0: corner(i, j),
                    p1: corner(i + 1, j),
                    normal: vec![0.0, 1.0],
                    measure: hx,
                });
            }
        }
        if cc {
            for j in 0..n {
                for i in 0..n {
                    let base = 4 * square(i, j);
                    let c = vec![x0 + (i as f64 + 0.5) * hx, y0 + (j as f64 + 0.5) * hy];
                    let corners = [corner(i + 1, j), corner(i + 1, j + 1), corner(i, j + 1), corner(i, j)];
                    for (k, p) in corners.into_iter().enumerate() {
                        // between triangle k and k+1 (S|E, E|N, N|W, W|S)
                        let t = sub_vec(&p, &c);
                        let mut nrm = vec![-t[1], t[0]];
                        let plus_c = &elements[base + (k + 1) % 4].centroid;
                        if dot(&nrm, &sub_vec(plus_c, &c)) < 0.0 {
                            nrm = vec![t[1], -t[0]];
                        }
                        let len = norm(&t);
                        nrm.iter_mut().for_each(|v| *v /= len);
                        faces.push(Face {
                            minus: Some(base + k),
                            plus: Some(base + (k + 1) % 4),
                            p0: c.clone(),
                            p1: p,
                            normal: nrm,
                            measure: len,
                        });
                    }
                }
            }
        }
        Mesh { elements, faces }
    }
}

/// Affine data of one element: `u(x) = offset + slope · x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub offset: Vec<f64>,
    pub slope: Matrix,
}

impl Piece {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut v = self.offset.clone();
        self.slope.mul_vec_add(x, &mut v);
        v
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FieldDoc {
    version: String,
    grid: Grid,
    cells: Vec<Piece>,
}

/// A discretized SBV field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FieldDoc", into = "FieldDoc")]
pub struct SBVField {
    grid: Grid,
    d: usize,
    cells: Vec<Piece>,
}

impl TryFrom<FieldDoc> for SBVField {
    type Error = Error;
    fn try_from(doc: FieldDoc) -> Result<Self> {
        if doc.version != SBVFIELD_VERSION {
            return Err(Error::Serde(format!(
                "expected {SBVFIELD_VERSION}, got {}",
                doc.version
            )));
        }
        SBVField::new(doc.grid, doc.cells)
    }
}

impl From<SBVField> for FieldDoc {
    fn from(f: SBVField) -> Self {
        FieldDoc {
            version: SBVFIELD_VERSION.into(),
            grid: f.grid,
            cells: f.cells,
        }
    }
}

impl SBVField {
    pub fn new(grid: Grid, cells: Vec<Piece>) -> Result<Self> {
        if cells.len() != grid.num_elements() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} cells", grid.num_elements()),
                got: format!("{} cells", cells.len()),
            });
        }
        let d = cells[0].offset.len();
        if d == 0 {
            return Err(Error::Dimension("field values need at least one component".into()));
        }
        for (k, c) in cells.iter().enumerate() {
            if c.offset.len() != d || c.slope.shape() != (d, grid.dim()) {
                return Err(Error::AtCell {
                    cell: k,
                    message: format!("expected offset of length {d} and {d}x{} slope", grid.dim()),
                });
            }
            if !c.offset.iter().all(|v| v.is_finite()) || !c.slope.is_finite() {
                return Err(Error::AtCell {
                    cell: k,
                    message: "non-finite affine data".into(),
                });
            }
        }
        Ok(SBVField { grid, d, cells })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    /// Number of components.
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn cells(&self) -> &[Piece] {
        &self.cells
    }

    pub fn into_cells(self) -> Vec<Piece> {
        self.cells
    }

    /// Value at a physical point (element located by its reference image).
    pub fn value_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let e = self.grid.locate(&self.grid.to_reference(x))?;
        Ok(self.cells[e].eval(x))
    }

    /// Adds a constant vector to every piece.
    pub fn shifted(&self, c: &[f64]) -> Result<SBVField> {
        if c.len() != self.d {
            return Err(Error::Dimension(format!("shift has {} components", c.len())));
        }
        let cells = self
            .cells
            .iter()
            .map(|p| Piece {
                offset: p.offset.iter().zip(c).map(|(a, b)| a + b).collect(),
                slope: p.slope.clone(),
            })
            .collect();
        SBVField::new(self.grid.clone(), cells)
    }

    /// Pointwise sum of two fields on the same grid.
    pub fn try_add(&self, other: &SBVField, sign: f64) -> Result<SBVField> {
        if self.grid != other.grid || self.d != other.d {
            return Err(Error::Dimension("fields live on different grids".into()));
        }
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(a, b)| Piece {
                offset: a.offset.iter().zip(&b.offset).map(|(x, y)| x + sign * y).collect(),
                slope: &a.slope + &(&b.slope * sign),
            })
            .collect();
        SBVField::new(self.grid.clone(), cells)
    }

    /// Re-expresses the field on `target`, taking each target element's piece
    /// from the element of `self` that contains its centroid. Exact when
    /// `target` refines `self.grid`.
    pub fn embed(&self, target: &Grid) -> Result<SBVField> {
        if target.dim() != self.grid.dim() {
            return Err(Error::Dimension("grids of different dimension".into()));
        }
        let mesh = target.mesh();
        let cells = mesh
            .elements
            .iter()
            .map(|e| {
                let x = target.to_physical(&e.centroid);
                let k = self.grid.locate(&self.grid.to_reference(&x))?;
                Ok(self.cells[k].clone())
            })
            .collect::<Result<Vec<_>>>()?;
        SBVField::new(target.clone(), cells)
    }

    pub fn refine(&self, factor: usize) -> Result<SBVField> {
        self.embed(&self.grid.refined(factor)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<SBVField> {
        Ok(serde_json::from_str(s)?)
    }
}

/// The field `x ↦ A x` (zero jumps).
pub fn affine_field(grid: &Grid, a: &Matrix) -> Result<SBVField> {
    if a.cols() != grid.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("d x {}", grid.dim()),
            got: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    let piece = Piece {
        offset: vec![0.0; a.rows()],
        slope: a.clone(),
    };
    SBVField::new(grid.clone(), vec![piece; grid.num_elements()])
}

/// The step `λ` on `{x·ν ≥ 0}`, `μ` elsewhere, sampled at element centroids.
/// The jump is planar when the plane is a union of faces.
pub fn step_field(grid: &Grid, lambda: &[f64], mu: &[f64], nu: &[f64]) -> Result<SBVField> {
    check_unit(nu)?;
    if nu.len() != grid.dim() || lambda.len() != mu.len() || lambda.is_empty() {
        return Err(Error::Dimension("step datum does not match the grid".into()));
    }
    let d = lambda.len();
    let mesh = grid.mesh();
    let cells = mesh
        .elements
        .iter()
        .map(|e| {
            let x = grid.to_physical(&e.centroid);
            Piece {
                offset: if dot(&x, nu) >= 0.0 {
                    lambda.to_vec()
                } else {
                    mu.to_vec()
                },
                slope: Matrix::zeros(d, grid.dim()),
            }
        })
        .collect();
    SBVField::new(grid.clone(), cells)
}

/// Values prescribed outside the grid box. Boundary faces then carry the jump
/// between the exterior datum and the field trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Exterior {
    /// Boundary faces carry no energy.
    #[default]
    None,
    /// `x ↦ offset + A x`.
    Affine { a: Matrix, offset: Vec<f64> },
    /// `λ` on `{x·ν ≥ 0}`, `μ` elsewhere; constant on each boundary face
    /// (sided by the face midpoint).
    Step {
        lambda: Vec<f64>,
        mu: Vec<f64>,
        nu: Vec<f64>,
    },
}

impl Exterior {
    pub fn affine(a: &Matrix) -> Self {
        Exterior::Affine {
            a: a.clone(),
            offset: vec![0.0; a.rows()],
        }
    }

    fn traces(&self, p0: &[f64], p1: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Exterior::None => None,
            Exterior::Affine { a, offset } => {
                let mut v0 = offset.clone();
                a.mul_vec_add(p0, &mut v0);
                let mut v1 = offset.clone();
                a.mul_vec_add(p1, &mut v1);
                Some((v0, v1))
            }
            Exterior::Step { lambda, mu, nu } => {
                let mid: Vec<f64> = p0.iter().zip(p1).map(|(a, b)| 0.5 * (a + b)).collect();
                let v = if dot(&mid, nu) >= 0.0 { lambda } else { mu };
                Some((v.clone(), v.clone()))
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EnergyOptions {
    /// Evaluate both densities at this point (cell-formula mode).
    pub x_frozen: Option<Vec<f64>>,
    pub exterior: Exterior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceContribution {
    pub face: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub bulk_value: f64,
    pub surface_value: f64,
    pub total: f64,
    /// Nonzero face terms in face order.
    pub per_face: Vec<FaceContribution>,
    pub per_cell: Vec<f64>,
}

/// Jump `u⁺ − u⁻` at both endpoints of a face (physical endpoints given).
pub(crate) fn face_jump(
    face: &Face,
    cells: &[Piece],
    exterior: &Exterior,
    x0: &[f64],
    x1: &[f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let side = |e: Option<usize>| -> Option<(Vec<f64>, Vec<f64>)> {
        match e {
            Some(k) => Some((cells[k].eval(x0), cells[k].eval(x1))),
            None => exterior.traces(x0, x1),
        }
    };
    let (m0, m1) = side(face.minus)?;
    let (p0, p1) = side(face.plus)?;
    Some((sub_vec(&p0, &m0), sub_vec(&p1, &m1)))
}

/// Bulk quadrature nodes (reference coordinates) and weights summing to the element measure.
fn element_quadrature(e: &Element) -> Vec<(Vec<f64>, f64)> {
    match e.vertices.len() {
        2 => {
            let (a, b) = (e.vertices[0][0], e.vertices[1][0]);
            gauss_legendre_unit(2)
                .into_iter()
                .map(|(t, w)| (vec![a + (b - a) * t], w * e.measure))
                .collect()
        }
        3 => (0..3)
            .map(|k| {
                let (a, b) = (&e.vertices[k], &e.vertices[(k + 1) % 3]);
                (vec![0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])], e.measure / 3.0)
            })
            .collect(),
        _ => {
            let (lo, hi) = (&e.vertices[0], &e.vertices[2]);
            let g = gauss_legendre_unit(2);
            let mut out = Vec::with_capacity(4);
            for &(s, ws) in &g {
                for &(t, wt) in &g {
                    out.push((
                        vec![lo[0] + (hi[0] - lo[0]) * s, lo[1] + (hi[1] - lo[1]) * t],
                        ws * wt * e.measure,
                    ));
                }
            }
            out
        }
    }
}

/// Energy of `u` with densities evaluated at quadrature points, or at `x_frozen`.
pub fn eval_energy(u: &SBVField, pair: &DensityPair, x_frozen: Option<&[f64]>) -> Result<EnergyBreakdown> {
    eval_energy_with(
        u,
        pair,
        &EnergyOptions {
            x_frozen: x_frozen.map(|x| x.to_vec()),
            exterior: Exterior::None,
        },
    )
}

pub fn eval_energy_with(u: &SBVField, pair: &DensityPair, opts: &EnergyOptions) -> Result<EnergyBreakdown> {
    let grid = u.grid();
    let dim = grid.dim();
    if let Some(x) = &opts.x_frozen {
        if x.len() != dim {
            return Err(Error::Dimension(format!(
                "frozen x has {} coordinates, grid has {dim}",
                x.len()
            )));
        }
    }
    match &opts.exterior {
        Exterior::None => {}
        Exterior::Affine { a, offset } => {
            if a.shape() != (u.d(), dim) || offset.len() != u.d() {
                return Err(Error::Dimension(
                    "exterior affine datum does not match the field".into(),
                ));
            }
        }
        Exterior::Step { lambda, mu, nu } => {
            if lambda.len() != u.d() || mu.len() != u.d() || nu.len() != dim {
                return Err(Error::Dimension("exterior step datum does not match the field".into()));
            }
        }
    }
    let mesh = grid.mesh();
    let frozen = opts.x_frozen.as_deref();

    let mut per_cell = Vec::with_capacity(mesh.elements.len());
    for (k, e) in mesh.elements.iter().enumerate() {
        let s = &u.cells[k].slope;
        let v = match frozen {
            Some(x) => e.measure * pair.bulk_at(x, s)?,
            None if !pair.bulk.depends_on_x() => e.measure * pair.bulk_at(&grid.to_physical(&e.centroid), s)?,
            None => {
                let mut acc = 0.0;
                for (y, w) in element_quadrature(e) {
                    acc += w * pair.bulk_at(&grid.to_physical(&y), s)?;
                }
                acc
            }
        };
        per_cell.push(v);
    }

    let kind = pair.surface.kind();
    let x_free = frozen.is_some() || !pair.surface.depends_on_x();
    let mut per_face = Vec::new();
    for (f, face) in mesh.faces.iter().enumerate() {
        let x0 = grid.to_physical(&face.p0);
        let x1 = grid.to_physical(&face.p1);
        let Some((j0, j1)) = face_jump(face, &u.cells, &opts.exterior, &x0, &x1) else {
            continue;
        };
        let nu = grid.to_physical(&face.normal);
        let v = surface_integral(pair, kind, x_free, frozen, &x0, &x1, &j0, &j1, &nu, face.measure)?;
        if v != 0.0 {
            per_face.push(FaceContribution { face: f, value: v });
        }
    }

    let bulk_value: f64 = per_cell.iter().sum();
    let surface_value: f64 = per_face.iter().map(|c| c.value).sum();
    Ok(EnergyBreakdown {
        bulk_value,
        surface_value,
        total: bulk_value + surface_value,
        per_face,
        per_cell,
    })
}

#[allow(clippy::too_many_arguments)]
fn surface_integral(
    pair: &DensityPair,
    kind: SurfaceKind,
    x_free: bool,
    frozen: Option<&[f64]>,
    x0: &[f64],
    x1: &[f64],
    j0: &[f64],
    j1: &[f64],
    nu: &[f64],
    measure: f64,
) -> Result<f64> {
    if j0.iter().chain(j1).all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let dj = sub_vec(j1, j0);
    if x_free {
        match kind {
            SurfaceKind::Trace { scale } => {
                return Ok(measure * scale * abs_affine_integral(dot(j0, nu), dot(&dj, nu)))
            }
            SurfaceKind::Norm { scale } => return Ok(measure * scale * norm_affine_integral(j0, &dj)),
            SurfaceKind::General => {}
        }
    }
    if x0 == x1 {
        let x = frozen.unwrap_or(x0);
        return Ok(measure * pair.surface_at(x, j0, nu)?);
    }
    let mut acc = 0.0;
    for (t, w) in gauss_legendre_unit(2) {
        let x: Vec<f64> = match frozen {
            Some(x) => x.to_vec(),
            None => x0.iter().zip(x1).map(|(a, b)| a + (b - a) * t).collect(),
        };
        let j: Vec<f64> = j0.iter().zip(&dj).map(|(a, b)| a + b * t).collect();
        acc += w * pair.surface_at(&x, &j, nu)?;
    }
    Ok(measure * acc)
}

/// `|Du|(Q)`: `∫|∇u| + Σ ∫|[u]|` over interior faces.
pub fn total_variation(u: &SBVField) -> f64 {
    total_variation_with(u, &Exterior::None)
}

/// Total variation including the jump against an exterior datum on boundary faces.
pub fn total_variation_with(u: &SBVField, exterior: &Exterior) -> f64 {
    let grid = u.grid();
    let mesh = grid.mesh();
    let bulk: f64 = mesh
        .elements
        .iter()
        .zip(&u.cells)
        .map(|(e, c)| e.measure * c.slope.norm())
        .sum();
    let mut jumps = 0.0;
    for face in &mesh.faces {
        let x0 = grid.to_physical(&face.p0);
        let x1 = grid.to_physical(&face.p1);
        if let Some((j0, j1)) = face_jump(face, &u.cells, exterior, &x0, &x1) {
            jumps += face.measure * norm_affine_integral(&j0, &sub_vec(&j1, &j0));
        }
    }
    bulk + jumps
}

/// `∫_Q ∇u` (absolutely continuous part only).
pub fn mean_gradient(u: &SBVField) -> Matrix {
    let mesh = u.grid().mesh();
    let mut m = Matrix::zeros(u.d(), u.grid().dim());
    for (e, c) in mesh.elements.iter().zip(&u.cells) {
        m = &m + &(&c.slope * e.measure);
    }
    m
}

/// `∫_Q |u − v|` for two fields on grids with a common refinement,
/// using `points` Gauss nodes per axis on every element of the finer grid.
pub fn l1_distance(u: &SBVField, v: &SBVField, points: usize) -> Result<f64> {
    if u.d() != v.d() || u.grid().dim() != v.grid().dim() {
        return Err(Error::Dimension("fields are not comparable".into()));
    }
    let grid = if u.grid().n() >= v.grid().n() {
        u.grid()
    } else {
        v.grid()
    };
    let mesh = grid.mesh();
    let rule = gauss_legendre_unit(points);
    let mut acc = 0.0;
    for e in &mesh.elements {
        for (y, w) in element_points(e, &rule) {
            let x = grid.to_physical(&y);
            let a = u.value_at(&x)?;
            let b = v.value_at(&x)?;
            acc += w * norm(&sub_vec(&a, &b));
        }
    }
    Ok(acc)
}

/// Tensor (or collapsed for triangles) Gauss points of an element.
pub(crate) fn element_points(e: &Element, rule: &[(f64, f64)]) -> Vec<(Vec<f64>, f64)> {
    match e.vertices.len() {
        2 => {
            let (a, b) = (e.vertices[0][0], e.vertices[1][0]);
            rule.iter()
                .map(|&(t, w)| (vec![a + (b - a) * t], w * e.measure))
                .collect()
        }
        3 => {
            // Duffy map of the unit square onto the triangle
            let (a, b, c) = (&e.vertices[0], &e.vertices[1], &e.vertices[2]);
            let mut out = Vec::new();
            for &(s, ws) in rule {
                for &(t, wt) in rule {
                    let (l1, l2) = (s * (1.0 - t), s * t);
                    let l0 = 1.0 - l1 - l2;
                    let y = vec![l0 * a[0] + l1 * b[0] + l2 * c[0], l0 * a[1] + l1 * b[1] + l2 * c[1]];
                    out.push((y, 2.0 * s * ws * wt * e.measure));
                }
            }
            out
        }
        _ => {
            let (lo, hi) = (&e.vertices[0], &e.vertices[2]);
            let mut out = Vec::new();
            for &(s, ws) in rule {
                for &(t, wt) in rule {
                    out.push((
                        vec![lo[0] + (hi[0] - lo[0]) * s, lo[1] + (hi[1] - lo[1]) * t],
                        ws * wt * e.measure,
                    ));
                }
            }
            out
        }
    }
}
