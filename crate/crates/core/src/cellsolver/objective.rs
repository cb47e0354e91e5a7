//! The discrete cell energy as a function of a flat parameter vector.
//!
//! Each element is described by its value at the centroid and its slope.
//! Depending on the constraints some of these are fixed, some free.

use crate::density::{DensityPair, SurfaceKind};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::quadrature::{abs_affine_integral, gauss_legendre_unit, norm_affine_integral};
use crate::sbvmesh::{Exterior, Grid, Piece, SBVField};

#[derive(Clone, Debug)]
pub(crate) enum ElemMap {
    /// Values at `v..v+d`, slope entries (row-major) at `s..s+d·N`.
    Free {
        v: usize,
        s: usize,
    },
    /// Free values, fixed slope.
    Values {
        v: usize,
        slope: Matrix,
    },
    /// Slope `A + s ⊗ normal` with `s` at `s..s+d`; the value is fixed by
    /// matching `x ↦ A x` on the boundary face through `anchor`.
    Boundary {
        s: usize,
        normal: Vec<f64>,
        anchor: Vec<f64>,
    },
    Fixed {
        value: Vec<f64>,
        slope: Matrix,
    },
}

#[derive(Clone, Debug)]
pub(crate) enum SlopeSpec {
    /// Slopes free, with `∫ ∇u = mean · |box|`.
    Free { mean: Matrix },
    /// Every element has this slope.
    Pinned(Matrix),
}

#[derive(Clone, Debug)]
struct FaceGeo {
    minus: Option<usize>,
    plus: Option<usize>,
    x0: Vec<f64>,
    x1: Vec<f64>,
    nu: Vec<f64>,
    measure: f64,
    point: bool,
    /// Exterior traces at x0 and x1 for boundary faces.
    ext: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug)]
struct Group {
    vars: Vec<usize>,
    weights: Vec<f64>,
    target: f64,
    wsq: f64,
}

pub(crate) struct Discrete {
    pub grid: Grid,
    pub d: usize,
    dim: usize,
    centroids: Vec<Vec<f64>>,
    areas: Vec<f64>,
    elems: Vec<ElemMap>,
    pub nvars: usize,
    faces: Vec<FaceGeo>,
    elem_faces: Vec<Vec<usize>>,
    groups: Vec<Group>,
    trace_a: Option<Matrix>,
    pair: DensityPair,
    x: Vec<f64>,
    kind: SurfaceKind,
    bulk_const: f64,
}

fn phi(s: f64, eps: f64) -> f64 {
    (s * s + eps * eps).sqrt()
}

/// `∫₀¹ √((a0 + (a1−a0)t)² + ε²) dt` and its partial derivatives.
fn smooth_abs_integral(a0: f64, a1: f64, eps: f64) -> (f64, f64, f64) {
    let delta = a1 - a0;
    if delta.abs() > 1e-3 * (a0.abs() + a1.abs() + eps) {
        let anti = |s: f64| 0.5 * (s * phi(s, eps) + eps * eps * (s / eps).asinh());
        let i = (anti(a1) - anti(a0)) / delta;
        return (i, (i - phi(a0, eps)) / delta, (phi(a1, eps) - i) / delta);
    }
    let mut out = (0.0, 0.0, 0.0);
    for (t, w) in gauss_legendre_unit(8) {
        let s = a0 + delta * t;
        let p = phi(s, eps);
        out.0 += w * p;
        out.1 += w * (1.0 - t) * s / p;
        out.2 += w * t * s / p;
    }
    out
}

impl Discrete {
    /// `trace`: when set, boundary elements match `x ↦ A x` exactly on their boundary face.
    pub fn new(
        grid: Grid,
        d: usize,
        pair: &DensityPair,
        x: &[f64],
        exterior: &Exterior,
        slopes: SlopeSpec,
        trace: Option<&Matrix>,
    ) -> Result<Discrete> {
        let dim = grid.dim();
        let mesh = grid.mesh();
        let ne = mesh.elements.len();
        let centroids: Vec<Vec<f64>> = mesh.elements.iter().map(|e| grid.to_physical(&e.centroid)).collect();
        let areas: Vec<f64> = mesh.elements.iter().map(|e| e.measure).collect();

        let mut elem_faces = vec![Vec::new(); ne];
        let mut boundary_faces = vec![Vec::new(); ne];
        let mut faces = Vec::with_capacity(mesh.faces.len());
        for (f, face) in mesh.faces.iter().enumerate() {
            let x0 = grid.to_physical(&face.p0);
            let x1 = grid.to_physical(&face.p1);
            let ext = if face.is_boundary() {
                match exterior {
                    Exterior::None => None,
                    Exterior::Affine { a, offset } => {
                        let mut v0 = offset.clone();
                        a.mul_vec_add(&x0, &mut v0);
                        let mut v1 = offset.clone();
                        a.mul_vec_add(&x1, &mut v1);
                        Some((v0, v1))
                    }
                    Exterior::Step { lambda, mu, nu } => {
                        let mid: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| 0.5 * (a + b)).collect();
                        let v = if dot(&mid, nu) >= 0.0 { lambda } else { mu };
                        Some((v.clone(), v.clone()))
                    }
                }
            } else {
                None
            };
            if face.is_boundary() && ext.is_none() {
                continue;
            }
            for e in [face.minus, face.plus].into_iter().flatten() {
                elem_faces[e].push(faces.len());
                if face.is_boundary() {
                    boundary_faces[e].push(f);
                }
            }
            faces.push(FaceGeo {
                minus: face.minus,
                plus: face.plus,
                point: x0 == x1,
                nu: grid.to_physical(&face.normal),
                measure: face.measure,
                x0,
                x1,
                ext,
            });
        }

        let mut elems = Vec::with_capacity(ne);
        let mut nvars = 0;
        let dn = d * dim;
        for e in 0..ne {
            let map = match (&slopes, trace) {
                (SlopeSpec::Pinned(_), Some(_)) => {
                    return Err(Error::Unsupported("exact traces with pinned slopes".into()))
                }
                (SlopeSpec::Pinned(s), None) => {
                    nvars += d;
                    ElemMap::Values {
                        v: nvars - d,
                        slope: s.clone(),
                    }
                }
                (SlopeSpec::Free { .. }, Some(a)) if !boundary_faces[e].is_empty() => {
                    if boundary_faces[e].len() == 1 {
                        let face = &mesh.faces[boundary_faces[e][0]];
                        nvars += d;
                        ElemMap::Boundary {
                            s: nvars - d,
                            normal: grid.to_physical(&face.normal),
                            anchor: grid.to_physical(&face.midpoint()),
                        }
                    } else {
                        ElemMap::Fixed {
                            value: a.mul_vec(&centroids[e]),
                            slope: a.clone(),
                        }
                    }
                }
                (SlopeSpec::Free { .. }, _) => {
                    nvars += d + dn;
                    ElemMap::Free {
                        v: nvars - d - dn,
                        s: nvars - dn,
                    }
                }
            };
            elems.push(map);
        }

        let mut groups = Vec::new();
        if let SlopeSpec::Free { mean } = &slopes {
            let vol = grid.volume();
            let mut seen = vec![0u8; nvars];
            for i in 0..d {
                for j in 0..dim {
                    let mut g = Group {
                        vars: Vec::new(),
                        weights: Vec::new(),
                        target: mean.get(i, j) * vol,
                        wsq: 0.0,
                    };
                    for (e, map) in elems.iter().enumerate() {
                        match map {
                            ElemMap::Free { s, .. } => {
                                g.vars.push(s + i * dim + j);
                                g.weights.push(areas[e]);
                            }
                            ElemMap::Boundary { s, normal, .. } => {
                                let a = trace.expect("boundary maps need a trace");
                                g.target -= areas[e] * a.get(i, j);
                                if normal[j].abs() > 1e-14 {
                                    g.vars.push(s + i);
                                    g.weights.push(areas[e] * normal[j]);
                                }
                            }
                            ElemMap::Fixed { slope, .. } => g.target -= areas[e] * slope.get(i, j),
                            ElemMap::Values { .. } => {}
                        }
                    }
                    for &v in &g.vars {
                        seen[v] += 1;
                        if seen[v] > 1 {
                            return Err(Error::Unsupported(
                                "boundary normals must be axis-aligned for exact traces".into(),
                            ));
                        }
                    }
                    g.wsq = g.weights.iter().map(|w| w * w).sum();
                    if g.wsq == 0.0 && g.target.abs() > 1e-12 {
                        return Err(Error::Infeasible(format!(
                            "mean-gradient entry ({i},{j}) is fixed by the boundary data at n = {}",
                            grid.n()
                        )));
                    }
                    groups.push(g);
                }
            }
        }

        let mut bulk_const = 0.0;
        for (e, map) in elems.iter().enumerate() {
            match map {
                ElemMap::Values { slope, .. } | ElemMap::Fixed { slope, .. } => {
                    bulk_const += areas[e] * pair.bulk_at(x, slope)?;
                }
                _ => {}
            }
        }

        Ok(Discrete {
            grid,
            d,
            dim,
            centroids,
            areas,
            elems,
            nvars,
            faces,
            elem_faces,
            groups,
            trace_a: trace.cloned(),
            kind: pair.surface.kind(),
            pair: pair.clone(),
            x: x.to_vec(),
            bulk_const,
        })
    }

    pub fn num_elements(&self) -> usize {
        self.elems.len()
    }

    pub fn centroid(&self, e: usize) -> &[f64] {
        &self.centroids[e]
    }

    /// Per-element values at centroids and slopes (row-major).
    pub fn unpack(&self, z: &[f64], vals: &mut [f64], slopes: &mut [f64]) {
        let (d, dn) = (self.d, self.d * self.dim);
        for (e, map) in self.elems.iter().enumerate() {
            let val = &mut vals[e * d..(e + 1) * d];
            let sl = &mut slopes[e * dn..(e + 1) * dn];
            match map {
                ElemMap::Free { v, s } => {
                    val.copy_from_slice(&z[*v..v + d]);
                    sl.copy_from_slice(&z[*s..s + dn]);
                }
                ElemMap::Values { v, slope } => {
                    val.copy_from_slice(&z[*v..v + d]);
                    sl.copy_from_slice(slope.as_slice());
                }
                ElemMap::Boundary { s, normal, anchor } => {
                    let a = self.trace_a.as_ref().expect("trace");
                    for i in 0..d {
                        for j in 0..self.dim {
                            sl[i * self.dim + j] = a.get(i, j) + z[s + i] * normal[j];
                        }
                    }
                    let c = &self.centroids[e];
                    for i in 0..d {
                        let mut acc = 0.0;
                        for j in 0..self.dim {
                            acc += a.get(i, j) * anchor[j] + sl[i * self.dim + j] * (c[j] - anchor[j]);
                        }
                        val[i] = acc;
                    }
                }
                ElemMap::Fixed { value, slope } => {
                    val.copy_from_slice(value);
                    sl.copy_from_slice(slope.as_slice());
                }
            }
        }
    }

    /// Parameter vector closest to the given pieces (then projected).
    pub fn pack(&self, pieces: &[Piece]) -> Vec<f64> {
        let (d, dn) = (self.d, self.d * self.dim);
        let mut z = vec![0.0; self.nvars];
        for (e, map) in self.elems.iter().enumerate() {
            let p = &pieces[e];
            let val = p.eval(&self.centroids[e]);
            match map {
                ElemMap::Free { v, s } => {
                    z[*v..v + d].copy_from_slice(&val);
                    z[*s..s + dn].copy_from_slice(p.slope.as_slice());
                }
                ElemMap::Values { v, .. } => z[*v..v + d].copy_from_slice(&val),
                ElemMap::Boundary { s, normal, .. } => {
                    let a = self.trace_a.as_ref().expect("trace");
                    for i in 0..d {
                        z[s + i] = (0..self.dim)
                            .map(|j| (p.slope.get(i, j) - a.get(i, j)) * normal[j])
                            .sum();
                    }
                }
                ElemMap::Fixed { .. } => {}
            }
        }
        self.project_point(&mut z);
        z
    }

    pub fn field(&self, z: &[f64]) -> Result<SBVField> {
        let (d, dn) = (self.d, self.d * self.dim);
        let ne = self.elems.len();
        let mut vals = vec![0.0; ne * d];
        let mut slopes = vec![0.0; ne * dn];
        self.unpack(z, &mut vals, &mut slopes);
        let pieces = (0..ne)
            .map(|e| {
                let slope = Matrix::from_row_major(d, self.dim, slopes[e * dn..(e + 1) * dn].to_vec())?;
                let mut offset = vals[e * d..(e + 1) * d].to_vec();
                for (i, o) in offset.iter_mut().enumerate() {
                    for j in 0..self.dim {
                        *o -= slope.get(i, j) * self.centroids[e][j];
                    }
                }
                Ok(Piece { offset, slope })
            })
            .collect::<Result<Vec<_>>>()?;
        SBVField::new(self.grid.clone(), pieces)
    }

    pub fn project_point(&self, z: &mut [f64]) {
        for g in &self.groups {
            if g.wsq == 0.0 {
                continue;
            }
            let r = g.target - g.vars.iter().zip(&g.weights).map(|(v, w)| w * z[*v]).sum::<f64>();
            for (v, w) in g.vars.iter().zip(&g.weights) {
                z[*v] += w * r / g.wsq;
            }
        }
    }

    pub fn project_gradient(&self, gz: &mut [f64]) {
        for g in &self.groups {
            if g.wsq == 0.0 {
                continue;
            }
            let r = g.vars.iter().zip(&g.weights).map(|(v, w)| w * gz[*v]).sum::<f64>();
            for (v, w) in g.vars.iter().zip(&g.weights) {
                gz[*v] -= w * r / g.wsq;
            }
        }
    }

    /// Largest violation of the mean-gradient constraint, per unit volume.
    #[cfg(test)]
    pub fn mean_residual(&self, z: &[f64]) -> f64 {
        let vol = self.grid.volume();
        self.groups
            .iter()
            .map(|g| (g.target - g.vars.iter().zip(&g.weights).map(|(v, w)| w * z[*v]).sum::<f64>()).abs() / vol)
            .fold(0.0, f64::max)
    }

    fn trace_at(&self, e: usize, vals: &[f64], slopes: &[f64], p: &[f64], out: &mut [f64]) {
        let (d, dim) = (self.d, self.dim);
        let c = &self.centroids[e];
        for i in 0..d {
            let mut acc = vals[e * d + i];
            for j in 0..dim {
                acc += slopes[(e * d + i) * dim + j] * (p[j] - c[j]);
            }
            out[i] = acc;
        }
    }

    /// Face energy and its gradients with respect to the endpoint jumps.
    /// `eps = 0` integrates the unsmoothed density.
    fn face_term(&self, f: &FaceGeo, j0: &[f64], j1: &[f64], eps: f64, g0: &mut [f64], g1: &mut [f64]) -> Result<f64> {
        let m = f.measure;
        let d = self.d;
        g0.iter_mut().for_each(|v| *v = 0.0);
        g1.iter_mut().for_each(|v| *v = 0.0);
        match self.kind {
            SurfaceKind::Trace { scale } => {
                let a0 = dot(j0, &f.nu);
                let a1 = dot(j1, &f.nu);
                if eps == 0.0 {
                    return Ok(m
                        * scale
                        * if f.point {
                            a0.abs()
                        } else {
                            abs_affine_integral(a0, a1 - a0)
                        });
                }
                let (i, d0, d1) = if f.point {
                    (phi(a0, eps), a0 / phi(a0, eps), 0.0)
                } else {
                    smooth_abs_integral(a0, a1, eps)
                };
                for k in 0..d {
                    g0[k] = m * scale * d0 * f.nu[k];
                    g1[k] = m * scale * d1 * f.nu[k];
                }
                Ok(m * scale * i)
            }
            SurfaceKind::Norm { scale } => {
                if eps == 0.0 {
                    let dj: Vec<f64> = j1.iter().zip(j0).map(|(a, b)| a - b).collect();
                    return Ok(m
                        * scale
                        * if f.point {
                            dot(j0, j0).sqrt()
                        } else {
                            norm_affine_integral(j0, &dj)
                        });
                }
                if f.point {
                    let p = (dot(j0, j0) + eps * eps).sqrt();
                    for k in 0..d {
                        g0[k] = m * scale * j0[k] / p;
                    }
                    return Ok(m * scale * p);
                }
                let mut acc = 0.0;
                let mut j = vec![0.0; d];
                for (t, w) in gauss_legendre_unit(8) {
                    for k in 0..d {
                        j[k] = j0[k] + (j1[k] - j0[k]) * t;
                    }
                    let p = (dot(&j, &j) + eps * eps).sqrt();
                    acc += w * p;
                    for k in 0..d {
                        g0[k] += m * scale * w * (1.0 - t) * j[k] / p;
                        g1[k] += m * scale * w * t * j[k] / p;
                    }
                }
                Ok(m * scale * acc)
            }
            SurfaceKind::General => {
                let surface = &self.pair.surface;
                if f.point {
                    if eps == 0.0 {
                        return Ok(m * self.pair.surface_at(&self.x, j0, &f.nu)?);
                    }
                    let (v, g) = surface.smoothed(&self.x, j0, &f.nu, eps)?;
                    for k in 0..d {
                        g0[k] = m * g[k];
                    }
                    return Ok(m * v);
                }
                let rule = gauss_legendre_unit(if eps == 0.0 { 2 } else { 8 });
                let mut acc = 0.0;
                let mut j = vec![0.0; d];
                for (t, w) in rule {
                    for k in 0..d {
                        j[k] = j0[k] + (j1[k] - j0[k]) * t;
                    }
                    if eps == 0.0 {
                        acc += w * self.pair.surface_at(&self.x, &j, &f.nu)?;
                        continue;
                    }
                    let (v, g) = surface.smoothed(&self.x, &j, &f.nu, eps)?;
                    crate::density::check_value(v, &surface.label(), || format!("lambda={j:?}"))?;
                    acc += w * v;
                    for k in 0..d {
                        g0[k] += m * w * (1.0 - t) * g[k];
                        g1[k] += m * w * t * g[k];
                    }
                }
                Ok(m * acc)
            }
        }
    }

    fn face_jumps(&self, f: &FaceGeo, vals: &[f64], slopes: &[f64], j0: &mut [f64], j1: &mut [f64], buf: &mut [f64]) {
        let d = self.d;
        j0.iter_mut().for_each(|v| *v = 0.0);
        j1.iter_mut().for_each(|v| *v = 0.0);
        for (side, sign) in [(f.minus, -1.0), (f.plus, 1.0)] {
            match side {
                Some(e) => {
                    self.trace_at(e, vals, slopes, &f.x0, buf);
                    for k in 0..d {
                        j0[k] += sign * buf[k];
                    }
                    self.trace_at(e, vals, slopes, &f.x1, buf);
                    for k in 0..d {
                        j1[k] += sign * buf[k];
                    }
                }
                None => {
                    let (e0, e1) = f.ext.as_ref().expect("boundary face with exterior");
                    for k in 0..d {
                        j0[k] += sign * e0[k];
                        j1[k] += sign * e1[k];
                    }
                }
            }
        }
    }

    /// Energy at `z` with smoothing `eps` (0 for the exact energy); fills `grad` when given.
    pub fn energy(&self, z: &[f64], eps: f64, grad: Option<&mut [f64]>) -> Result<f64> {
        let (d, dim, dn) = (self.d, self.dim, self.d * self.dim);
        let ne = self.elems.len();
        let mut vals = vec![0.0; ne * d];
        let mut slopes = vec![0.0; ne * dn];
        self.unpack(z, &mut vals, &mut slopes);
        let want = grad.is_some();
        let mut dval = if want { vec![0.0; ne * d] } else { Vec::new() };
        let mut dslope = if want { vec![0.0; ne * dn] } else { Vec::new() };

        let mut total = self.bulk_const;
        for (e, map) in self.elems.iter().enumerate() {
            if matches!(map, ElemMap::Free { .. } | ElemMap::Boundary { .. }) {
                let s = Matrix::from_row_major(d, dim, slopes[e * dn..(e + 1) * dn].to_vec())?;
                total += self.areas[e] * self.pair.bulk_at(&self.x, &s)?;
                if want {
                    let g = self.pair.bulk.gradient(&self.x, &s)?;
                    for (k, v) in g.as_slice().iter().enumerate() {
                        dslope[e * dn + k] += self.areas[e] * v;
                    }
                }
            }
        }

        let mut j0 = vec![0.0; d];
        let mut j1 = vec![0.0; d];
        let mut g0 = vec![0.0; d];
        let mut g1 = vec![0.0; d];
        let mut buf = vec![0.0; d];
        for f in &self.faces {
            self.face_jumps(f, &vals, &slopes, &mut j0, &mut j1, &mut buf);
            total += self.face_term(f, &j0, &j1, eps, &mut g0, &mut g1)?;
            if !want {
                continue;
            }
            for (side, sign) in [(f.minus, -1.0), (f.plus, 1.0)] {
                let Some(e) = side else { continue };
                let c = &self.centroids[e];
                for i in 0..d {
                    dval[e * d + i] += sign * (g0[i] + g1[i]);
                    for j in 0..dim {
                        dslope[e * dn + i * dim + j] += sign * (g0[i] * (f.x0[j] - c[j]) + g1[i] * (f.x1[j] - c[j]));
                    }
                }
            }
        }

        if let Some(gz) = grad {
            gz.iter_mut().for_each(|v| *v = 0.0);
            for (e, map) in self.elems.iter().enumerate() {
                match map {
                    ElemMap::Free { v, s } => {
                        gz[*v..v + d].copy_from_slice(&dval[e * d..(e + 1) * d]);
                        gz[*s..s + dn].copy_from_slice(&dslope[e * dn..(e + 1) * dn]);
                    }
                    ElemMap::Values { v, .. } => gz[*v..v + d].copy_from_slice(&dval[e * d..(e + 1) * d]),
                    ElemMap::Boundary { s, normal, anchor } => {
                        let c = &self.centroids[e];
                        for i in 0..d {
                            let mut acc = 0.0;
                            for j in 0..dim {
                                let ds = dslope[e * dn + i * dim + j] + dval[e * d + i] * (c[j] - anchor[j]);
                                acc += ds * normal[j];
                            }
                            gz[s + i] = acc;
                        }
                    }
                    ElemMap::Fixed { .. } => {}
                }
            }
        }
        Ok(total)
    }

    /// Exact energy of the faces touching element `e`.
    fn local_exact(&self, e: usize, vals: &[f64], slopes: &[f64]) -> Result<f64> {
        let d = self.d;
        let (mut j0, mut j1, mut g0, mut g1, mut buf) =
            (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut acc = 0.0;
        for &fi in &self.elem_faces[e] {
            let f = &self.faces[fi];
            self.face_jumps(f, vals, slopes, &mut j0, &mut j1, &mut buf);
            acc += self.face_term(f, &j0, &j1, 0.0, &mut g0, &mut g1)?;
        }
        Ok(acc)
    }

    /// Coordinate descent on element values with the exact energy. Each
    /// local problem is convex for trace and norm densities; other kinds are
    /// left untouched. Returns the number of accepted moves.
    pub fn polish(&self, z: &mut [f64], sweeps: usize) -> Result<usize> {
        if matches!(self.kind, SurfaceKind::General) {
            return Ok(0);
        }
        let (d, dn) = (self.d, self.d * self.dim);
        let ne = self.elems.len();
        let mut vals = vec![0.0; ne * d];
        let mut slopes = vec![0.0; ne * dn];
        self.unpack(z, &mut vals, &mut slopes);
        let mut moves = 0;
        let mut j0 = vec![0.0; d];
        let mut j1 = vec![0.0; d];
        let mut buf = vec![0.0; d];
        for _ in 0..sweeps {
            let mut changed = false;
            for (e, map) in self.elems.iter().enumerate() {
                let v = match map {
                    ElemMap::Free { v, .. } | ElemMap::Values { v, .. } => *v,
                    _ => continue,
                };
                for i in 0..d {
                    let cur = vals[e * d + i];
                    // values of this component that zero some endpoint jump
                    let mut lo = cur;
                    let mut hi = cur;
                    for &fi in &self.elem_faces[e] {
                        let f = &self.faces[fi];
                        self.face_jumps(f, &vals, &slopes, &mut j0, &mut j1, &mut buf);
                        let sign = if f.plus == Some(e) { 1.0 } else { -1.0 };
                        for j in [&j0, &j1] {
                            let (a, c) = match self.kind {
                                SurfaceKind::Trace { .. } => (dot(j, &f.nu), sign * f.nu[i]),
                                _ => (j[i], sign),
                            };
                            if c.abs() > 1e-14 {
                                let root = cur - a / c;
                                lo = lo.min(root);
                                hi = hi.max(root);
                            }
                        }
                    }
                    if hi - lo <= 1e-15 * (1.0 + cur.abs()) {
                        continue;
                    }
                    let base = self.local_exact(e, &vals, &slopes)?;
                    let eval = |t: f64, vals: &mut [f64]| -> Result<f64> {
                        vals[e * d + i] = t;
                        self.local_exact(e, vals, &slopes)
                    };
                    let gr = 0.5 * (5f64.sqrt() - 1.0);
                    let (mut a, mut b) = (lo, hi);
                    let mut c1 = b - gr * (b - a);
                    let mut c2 = a + gr * (b - a);
                    let mut f1 = eval(c1, &mut vals)?;
                    let mut f2 = eval(c2, &mut vals)?;
                    for _ in 0..60 {
                        if f1 <= f2 {
                            b = c2;
                            c2 = c1;
                            f2 = f1;
                            c1 = b - gr * (b - a);
                            f1 = eval(c1, &mut vals)?;
                        } else {
                            a = c1;
                            c1 = c2;
                            f1 = f2;
                            c2 = a + gr * (b - a);
                            f2 = eval(c2, &mut vals)?;
                        }
                        if b - a <= 1e-14 * (1.0 + a.abs()) {
                            break;
                        }
                    }
                    let (best_t, best_f) = if f1 <= f2 { (c1, f1) } else { (c2, f2) };
                    if best_f < base - 1e-14 * (1.0 + base.abs()) {
                        vals[e * d + i] = best_t;
                        z[v + i] = best_t;
                        moves += 1;
                        changed = true;
                    } else {
                        vals[e * d + i] = cur;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        Ok(moves)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::pair_by_names;
    use crate::sbvmesh::{eval_energy_with, Cut, EnergyOptions};

    fn random_pieces(n: usize, grid: &Grid) -> Vec<Piece> {
        (0..grid.num_elements())
            .map(|k| {
                let t = k as f64 + n as f64;
                Piece {
                    offset: vec![(1.3 * t).sin(), (0.7 * t).cos()],
                    slope: Matrix::from_row_major(2, 2, vec![(t).sin(), (2.0 * t).cos(), 0.3, -(t * 0.5).sin()])
                        .unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn exact_energy_matches_mesh_evaluator() {
        for kind in ["trace-interfacial", "norm-interfacial"] {
            let pair = pair_by_names("quadratic", kind).unwrap();
            let grid = Grid::unit_cube(2, 3).unwrap().with_cut(Cut::CrissCross).unwrap();
            let a = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.2, 0.3]]).unwrap();
            let ext = Exterior::affine(&a);
            let disc = Discrete::new(
                grid.clone(),
                2,
                &pair,
                &[0.0, 0.0],
                &ext,
                SlopeSpec::Free {
                    mean: Matrix::zeros(2, 2),
                },
                None,
            )
            .unwrap();
            let pieces = random_pieces(3, &grid);
            // pack without the projection to compare the raw field
            let mut z = vec![0.0; disc.nvars];
            for (e, map) in disc.elems.iter().enumerate() {
                if let ElemMap::Free { v, s } = map {
                    z[*v..v + 2].copy_from_slice(&pieces[e].eval(disc.centroid(e)));
                    z[*s..s + 4].copy_from_slice(pieces[e].slope.as_slice());
                }
            }
            let field = disc.field(&z).unwrap();
            let reference = eval_energy_with(
                &field,
                &pair,
                &EnergyOptions {
                    x_frozen: Some(vec![0.0, 0.0]),
                    exterior: ext.clone(),
                },
            )
            .unwrap();
            let mine = disc.energy(&z, 0.0, None).unwrap();
            assert!((mine - reference.total).abs() < 1e-12 * reference.total, "{kind}");
            let smooth = disc.energy(&z, 1e-9, None).unwrap();
            assert!((smooth - mine).abs() < 1e-6);
        }
    }

    #[test]
    fn smoothed_gradient_matches_differences() {
        let pair = pair_by_names("quadratic", "trace-interfacial").unwrap();
        let grid = Grid::unit_cube(2, 2).unwrap().with_cut(Cut::CrissCross).unwrap();
        let a = Matrix::identity(2);
        let disc = Discrete::new(
            grid.clone(),
            2,
            &pair,
            &[0.0, 0.0],
            &Exterior::affine(&a),
            SlopeSpec::Free {
                mean: Matrix::zeros(2, 2),
            },
            Some(&a),
        )
        .unwrap();
        let z: Vec<f64> = (0..disc.nvars).map(|k| (k as f64 * 0.77).sin()).collect();
        let mut g = vec![0.0; disc.nvars];
        disc.energy(&z, 0.05, Some(&mut g)).unwrap();
        for k in 0..disc.nvars {
            let h = 1e-6;
            let mut zp = z.clone();
            zp[k] += h;
            let mut zm = z.clone();
            zm[k] -= h;
            let fd = (disc.energy(&zp, 0.05, None).unwrap() - disc.energy(&zm, 0.05, None).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "var {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn smooth_abs_integral_branches_agree() {
        for &(a0, a1) in &[(0.3, 0.3000001), (-1.0, 2.0), (0.0, 1e-9), (5.0, 5.0)] {
            let eps = 0.01;
            let closed = smooth_abs_integral(a0, a1, eps);
            let mut quad = 0.0;
            let m = 200_000;
            for i in 0..m {
                let t = (i as f64 + 0.5) / m as f64;
                quad += phi(a0 + (a1 - a0) * t, eps) / m as f64;
            }
            assert!((closed.0 - quad).abs() < 1e-9, "{a0} {a1}");
        }
    }

    #[test]
    fn exact_traces_are_matched() {
        let pair = pair_by_names("quadratic", "trace-interfacial").unwrap();
        let grid = Grid::unit_cube(2, 3).unwrap().with_cut(Cut::CrissCross).unwrap();
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]]).unwrap();
        let b = Matrix::zeros(2, 2);
        let disc = Discrete::new(
            grid.clone(),
            2,
            &pair,
            &[0.0, 0.0],
            &Exterior::affine(&a),
            SlopeSpec::Free { mean: b },
            Some(&a),
        )
        .unwrap();
        let z = disc.pack(&random_pieces(1, &grid));
        assert!(disc.mean_residual(&z) < 1e-14);
        let field = disc.field(&z).unwrap();
        let mesh = grid.mesh();
        for f in mesh.faces.iter().filter(|f| f.is_boundary()) {
            let e = f.minus.or(f.plus).unwrap();
            for p in [&f.p0, &f.p1] {
                let u = field.cells()[e].eval(p);
                let target = a.mul_vec(p);
                assert!((u[0] - target[0]).abs() < 1e-12 && (u[1] - target[1]).abs() < 1e-12);
            }
        }
    }
}
