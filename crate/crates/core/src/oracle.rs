//! Closed forms for a convex bulk density `W₀` paired with `ψ₀ = |λ·ν|`
//! (square matrices). Every stage keeps `ψ_k = ψ₀` and
//!
//! `W_k(A, B_k, …, B_1) = |tr(A − B_k)| + Σ_{j=2..k} |tr(B_j − B_{j−1})| + W₀(B₁)`.

use std::sync::Arc;

use crate::density::BulkDensity;
use crate::error::{Error, Result};
use crate::hierarchy::HierarchicalDeformation;
use crate::linalg::{check_unit, dot, Matrix};
use crate::quadrature::abs_affine_integral;
use crate::sbvmesh::{face_jump, Exterior};

fn require_square(a: &Matrix) -> Result<()> {
    if a.rows() != a.cols() {
        return Err(Error::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    Ok(())
}

/// `W_k(x, A, 𝐁)` with `tuple = (B_k, …, B_1)`. An empty tuple gives `W₀(x, A)`.
pub fn exact_wk(w0: &dyn BulkDensity, x: &[f64], a: &Matrix, tuple: &[Matrix]) -> Result<f64> {
    require_square(a)?;
    for b in tuple {
        a.check_same_shape(b)?;
    }
    let Some(b1) = tuple.last() else {
        return w0.value(x, a);
    };
    let mut value = (a - &tuple[0]).trace()?.abs();
    for pair in tuple.windows(2) {
        // pair = (B_j, B_{j-1})
        value += (&pair[0] - &pair[1]).trace()?.abs();
    }
    Ok(value + w0.value(x, b1)?)
}

/// `ψ_k(λ, ν) = |λ·ν|` at every stage.
pub fn exact_psi(lambda: &[f64], nu: &[f64]) -> Result<f64> {
    check_unit(nu)?;
    if lambda.len() != nu.len() {
        return Err(Error::Dimension(format!(
            "lambda has {} components, nu has {}",
            lambda.len(),
            nu.len()
        )));
    }
    Ok(dot(lambda, nu).abs())
}

/// `E₁ = ∫ Σ_ℓ |tr(G_ℓ − G_{ℓ−1})| + W₀(G_L) dx + ∫_{S_g} |[g]·ν|`, with
/// `G₀ = ∇g`. Cellwise constant integrands are integrated exactly (W₀ is
/// evaluated at cell centroids); jumps are affine along faces.
pub fn exact_e1(def: &HierarchicalDeformation, w0: &dyn BulkDensity) -> Result<f64> {
    let g = def.g();
    let grid = g.grid();
    if g.d() != grid.dim() {
        return Err(Error::NotSquare {
            rows: g.d(),
            cols: grid.dim(),
        });
    }
    let mesh = grid.mesh();
    let depth = def.depth();
    let mut bulk = 0.0;
    for (c, e) in mesh.elements.iter().enumerate() {
        let mut v = 0.0;
        for l in 1..=depth {
            v += (def.level_at(l, c) - def.level_at(l - 1, c)).trace()?.abs();
        }
        v += w0.value(&grid.to_physical(&e.centroid), def.level_at(depth, c))?;
        bulk += e.measure * v;
    }
    let mut surface = 0.0;
    for face in mesh.faces.iter().filter(|f| !f.is_boundary()) {
        let x0 = grid.to_physical(&face.p0);
        let x1 = grid.to_physical(&face.p1);
        let (j0, j1) = face_jump(face, g.cells(), &Exterior::None, &x0, &x1).expect("interior face");
        let nu = grid.to_physical(&face.normal);
        let (a0, a1) = (dot(&j0, &nu), dot(&j1, &nu));
        surface += face.measure * abs_affine_integral(a0, a1 - a0);
    }
    Ok(bulk + surface)
}

/// The trace example with a given convex `W₀`.
#[derive(Clone, Debug)]
pub struct TraceExampleDensity {
    w0: Arc<dyn BulkDensity>,
    p: f64,
}

impl TraceExampleDensity {
    pub fn new(w0: Arc<dyn BulkDensity>, p: f64) -> Result<Self> {
        if !w0.is_convex() {
            return Err(Error::Invalid(format!("{} is not declared convex", w0.label())));
        }
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::Invalid(format!("exponent p must exceed 1, got {p}")));
        }
        Ok(TraceExampleDensity { w0, p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn w0(&self) -> &Arc<dyn BulkDensity> {
        &self.w0
    }

    pub fn wk(&self, x: &[f64], a: &Matrix, tuple: &[Matrix]) -> Result<f64> {
        exact_wk(self.w0.as_ref(), x, a, tuple)
    }

    pub fn psi(&self, lambda: &[f64], nu: &[f64]) -> Result<f64> {
        exact_psi(lambda, nu)
    }

    pub fn e1(&self, def: &HierarchicalDeformation) -> Result<f64> {
        exact_e1(def, self.w0.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Quadratic;

    fn m(rows: usize, v: &[f64]) -> Matrix {
        Matrix::from_row_major(rows, v.len() / rows, v.to_vec()).unwrap()
    }

    #[test]
    fn stage_one_identity_example() {
        let v = exact_wk(&Quadratic, &[0.0, 0.0], &Matrix::identity(2), &[Matrix::zeros(2, 2)]).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn stage_two_scalar_example() {
        let v = exact_wk(&Quadratic, &[0.0], &m(1, &[3.0]), &[m(1, &[1.0]), m(1, &[0.0])]).unwrap();
        assert_eq!(v, 3.0);
    }

    #[test]
    fn equal_arguments_give_base_density() {
        let a = m(2, &[1.0, -2.0, 0.5, 3.0]);
        let v = exact_wk(&Quadratic, &[0.0, 0.0], &a, &[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(v, a.norm_sq());
    }

    #[test]
    fn rectangular_input_is_rejected() {
        let a = Matrix::zeros(2, 1);
        assert!(matches!(
            exact_wk(&Quadratic, &[0.0], &a, &[a.clone()]),
            Err(Error::NotSquare { .. })
        ));
    }
}
