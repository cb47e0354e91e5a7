//! Bulk and surface energy densities and the class constants attached to a pair.

use std::fmt;
use std::sync::Arc;

use crate::catalog::PairSpec;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Structural form of a surface density, used to pick exact face integrals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SurfaceKind {
    /// `scale · |λ·ν|`
    Trace { scale: f64 },
    /// `scale · |λ|`
    Norm { scale: f64 },
    /// Anything else; integrated by quadrature.
    General,
}

/// Bulk density W(x, A).
pub trait BulkDensity: Send + Sync + fmt::Debug {
    fn value(&self, x: &[f64], a: &Matrix) -> Result<f64>;

    /// ∂W/∂A. The default is a central difference.
    fn gradient(&self, x: &[f64], a: &Matrix) -> Result<Matrix> {
        let mut g = Matrix::zeros(a.rows(), a.cols());
        let mut probe = a.clone();
        for k in 0..a.as_slice().len() {
            let v = a.as_slice()[k];
            let h = 1e-6 * (1.0 + v.abs());
            probe.as_mut_slice()[k] = v + h;
            let fp = self.value(x, &probe)?;
            probe.as_mut_slice()[k] = v - h;
            let fm = self.value(x, &probe)?;
            probe.as_mut_slice()[k] = v;
            g.as_mut_slice()[k] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    }

    /// Declared convexity in A.
    fn is_convex(&self) -> bool {
        false
    }

    fn depends_on_x(&self) -> bool {
        true
    }

    /// Whether one evaluation is itself a minimization.
    fn is_expensive(&self) -> bool {
        false
    }

    /// Stable identity string (used in cache keys and reports).
    fn label(&self) -> String;
}

/// Surface density ψ(x, λ, ν).
pub trait SurfaceDensity: Send + Sync + fmt::Debug {
    fn value(&self, x: &[f64], lambda: &[f64], nu: &[f64]) -> Result<f64>;

    fn kind(&self) -> SurfaceKind {
        SurfaceKind::General
    }

    /// Smoothed value and its gradient in λ, with smoothing scale `eps`.
    /// The default returns the raw value with a central-difference gradient.
    fn smoothed(&self, x: &[f64], lambda: &[f64], nu: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
        let _ = eps;
        let v = self.value(x, lambda, nu)?;
        let mut probe = lambda.to_vec();
        let mut g = vec![0.0; lambda.len()];
        for k in 0..lambda.len() {
            let h = 1e-7 * (1.0 + lambda[k].abs());
            probe[k] = lambda[k] + h;
            let fp = self.value(x, &probe, nu)?;
            probe[k] = lambda[k] - h;
            let fm = self.value(x, &probe, nu)?;
            probe[k] = lambda[k];
            g[k] = (fp - fm) / (2.0 * h);
        }
        Ok((v, g))
    }

    /// Declared sub-additive and positively 1-homogeneous in λ.
    fn is_subadditive_homogeneous(&self) -> bool {
        false
    }

    /// Declared jointly convex (hence BV-elliptic).
    fn is_jointly_convex(&self) -> bool {
        false
    }

    fn depends_on_x(&self) -> bool {
        true
    }

    fn is_expensive(&self) -> bool {
        false
    }

    fn label(&self) -> String;
}

/// A modulus of continuity s ↦ ω(s).
#[derive(Clone)]
pub enum Modulus {
    Zero,
    /// `scale · s^exponent`
    Power {
        scale: f64,
        exponent: f64,
    },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Modulus {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Modulus::Zero => 0.0,
            Modulus::Power { scale, exponent } => scale * s.powf(*exponent),
            Modulus::Custom(f) => f(s),
        }
    }
}

impl fmt::Debug for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modulus::Zero => write!(f, "Zero"),
            Modulus::Power { scale, exponent } => write!(f, "{scale}*s^{exponent}"),
            Modulus::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Declared constants of the density class.
///
/// `c_psi = 0` declares only the upper surface bound `0 ≤ ψ ≤ C_ψ|λ|`.
#[derive(Clone, Debug)]
pub struct ClassConstants {
    pub c_w: f64,
    pub big_c_w: f64,
    pub c_psi: f64,
    pub big_c_psi: f64,
    /// Matrix at which W(·, A₀) is bounded.
    pub a0: Option<Matrix>,
    pub omega_w: Modulus,
    pub omega_psi: Modulus,
    /// Whether the coercivity bound on W is part of the declared class.
    pub coercive: bool,
}

impl ClassConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [("C_W", self.big_c_w), ("C_psi", self.big_c_psi)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.coercive && !(self.c_w > 0.0 && self.c_w.is_finite()) {
            return Err(Error::Invalid(format!("c_W must be positive, got {}", self.c_w)));
        }
        if !(self.c_psi >= 0.0 && self.c_psi <= self.big_c_psi) {
            return Err(Error::Invalid(format!(
                "c_psi must lie in [0, C_psi], got {}",
                self.c_psi
            )));
        }
        Ok(())
    }
}

/// A bulk/surface density pair with its class metadata.
#[derive(Clone, Debug)]
pub struct DensityPair {
    pub bulk: Arc<dyn BulkDensity>,
    pub surface: Arc<dyn SurfaceDensity>,
    pub exponent_q: f64,
    pub constants: ClassConstants,
    /// Catalog provenance, when the pair was built by name.
    pub spec: Option<PairSpec>,
}

impl DensityPair {
    pub fn new(
        bulk: Arc<dyn BulkDensity>,
        surface: Arc<dyn SurfaceDensity>,
        exponent_q: f64,
        constants: ClassConstants,
    ) -> Result<Self> {
        if !(exponent_q >= 1.0) {
            return Err(Error::Invalid(format!("exponent q must be >= 1, got {exponent_q}")));
        }
        constants.validate()?;
        Ok(DensityPair {
            bulk,
            surface,
            exponent_q,
            constants,
            spec: None,
        })
    }

    /// W(x, A), checked finite and nonnegative.
    pub fn bulk_at(&self, x: &[f64], a: &Matrix) -> Result<f64> {
        let v = self.bulk.value(x, a)?;
        check_value(v, &self.bulk.label(), || format!("x={x:?}, A={a:?}"))
    }

    /// ψ(x, λ, ν), checked finite and nonnegative.
    pub fn surface_at(&self, x: &[f64], lambda: &[f64], nu: &[f64]) -> Result<f64> {
        let v = self.surface.value(x, lambda, nu)?;
        check_value(v, &self.surface.label(), || {
            format!("x={x:?}, lambda={lambda:?}, nu={nu:?}")
        })
    }

    pub fn label(&self) -> String {
        format!("{}|{}", self.bulk.label(), self.surface.label())
    }
}

pub(crate) fn check_value(v: f64, name: &str, input: impl FnOnce() -> String) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::NonFinite {
            source_name: name.to_string(),
            input: input(),
            value: v,
        });
    }
    if v < 0.0 {
        return Err(Error::Invalid(format!(
            "{name} returned negative value {v} at {}",
            input()
        )));
    }
    Ok(v)
}

type BulkFn = dyn Fn(&[f64], &Matrix) -> f64 + Send + Sync;
type SurfaceFn = dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync;

/// Bulk density backed by a closure.
#[derive(Clone)]
pub struct FnBulk {
    name: String,
    f: Arc<BulkFn>,
    convex: bool,
    x_dependent: bool,
}

impl FnBulk {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64], &Matrix) -> f64 + Send + Sync + 'static) -> Self {
        FnBulk {
            name: name.into(),
            f: Arc::new(f),
            convex: false,
            x_dependent: true,
        }
    }

    pub fn convex(mut self, yes: bool) -> Self {
        self.convex = yes;
        self
    }

    pub fn x_dependent(mut self, yes: bool) -> Self {
        self.x_dependent = yes;
        self
    }
}

impl fmt::Debug for FnBulk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnBulk({})", self.name)
    }
}

impl BulkDensity for FnBulk {
    fn value(&self, x: &[f64], a: &Matrix) -> Result<f64> {
        Ok((self.f)(x, a))
    }
    fn is_convex(&self) -> bool {
        self.convex
    }
    fn depends_on_x(&self) -> bool {
        self.x_dependent
    }
    fn label(&self) -> String {
        self.name.clone()
    }
}

/// Surface density backed by a closure.
#[derive(Clone)]
pub struct FnSurface {
    name: String,
    f: Arc<SurfaceFn>,
    subadditive_homogeneous: bool,
    jointly_convex: bool,
    x_dependent: bool,
}

impl FnSurface {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        FnSurface {
            name: name.into(),
            f: Arc::new(f),
            subadditive_homogeneous: false,
            jointly_convex: false,
            x_dependent: true,
        }
    }

    pub fn subadditive_homogeneous(mut self, yes: bool) -> Self {
        self.subadditive_homogeneous = yes;
        self
    }

    pub fn jointly_convex(mut self, yes: bool) -> Self {
        self.jointly_convex = yes;
        self
    }

    pub fn x_dependent(mut self, yes: bool) -> Self {
        self.x_dependent = yes;
        self
    }
}

impl fmt::Debug for FnSurface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnSurface({})", self.name)
    }
}

impl SurfaceDensity for FnSurface {
    fn value(&self, x: &[f64], lambda: &[f64], nu: &[f64]) -> Result<f64> {
        Ok((self.f)(x, lambda, nu))
    }
    fn is_subadditive_homogeneous(&self) -> bool {
        self.subadditive_homogeneous
    }
    fn is_jointly_convex(&self) -> bool {
        self.jointly_convex
    }
    fn depends_on_x(&self) -> bool {
        self.x_dependent
    }
    fn label(&self) -> String {
        self.name.clone()
    }
}
