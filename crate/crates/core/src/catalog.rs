//! Built-in densities addressable by name from configuration files.
//!
//! | name                | density      |
//! |---------------------|--------------|
//! | `quadratic`         | `|A|²`       |
//! | `p-power`           | `|A|^p`      |
//! | `trace-interfacial` | `s·|λ·ν|`    |
//! | `norm-interfacial`  | `c·|λ|`      |

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::density::{BulkDensity, ClassConstants, DensityPair, Modulus, SurfaceDensity, SurfaceKind};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BulkSpec {
    Quadratic,
    PPower { p: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SurfaceSpec {
    TraceInterfacial {
        #[serde(default = "one")]
        scale: f64,
    },
    NormInterfacial {
        #[serde(default = "one")]
        c: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub bulk: BulkSpec,
    pub surface: SurfaceSpec,
}

impl PairSpec {
    pub fn new(bulk: BulkSpec, surface: SurfaceSpec) -> Self {
        PairSpec { bulk, surface }
    }

    pub fn build(&self) -> Result<DensityPair> {
        build_pair(self)
    }
}

/// `|A|²` (Frobenius).
#[derive(Clone, Copy, Debug)]
pub struct Quadratic;

impl BulkDensity for Quadratic {
    fn value(&self, _x: &[f64], a: &Matrix) -> Result<f64> {
        Ok(a.norm_sq())
    }
    fn gradient(&self, _x: &[f64], a: &Matrix) -> Result<Matrix> {
        Ok(a.scale(2.0))
    }
    fn is_convex(&self) -> bool {
        true
    }
    fn depends_on_x(&self) -> bool {
        false
    }
    fn label(&self) -> String {
        "quadratic".into()
    }
}

/// `|A|^p`, p > 1.
#[derive(Clone, Copy, Debug)]
pub struct PPower {
    pub p: f64,
}

impl BulkDensity for PPower {
    fn value(&self, _x: &[f64], a: &Matrix) -> Result<f64> {
        Ok(a.norm().powf(self.p))
    }
    fn gradient(&self, _x: &[f64], a: &Matrix) -> Result<Matrix> {
        let n = a.norm();
        if n == 0.0 {
            return Ok(Matrix::zeros(a.rows(), a.cols()));
        }
        Ok(a.scale(self.p * n.powf(self.p - 2.0)))
    }
    fn is_convex(&self) -> bool {
        self.p >= 1.0
    }
    fn depends_on_x(&self) -> bool {
        false
    }
    fn label(&self) -> String {
        format!("p-power({})", self.p)
    }
}

/// `scale · |λ·ν|`.
#[derive(Clone, Copy, Debug)]
pub struct TraceInterfacial {
    pub scale: f64,
}

impl SurfaceDensity for TraceInterfacial {
    fn value(&self, _x: &[f64], lambda: &[f64], nu: &[f64]) -> Result<f64> {
        Ok(self.scale * dot(lambda, nu).abs())
    }
    fn kind(&self) -> SurfaceKind {
        SurfaceKind::Trace { scale: self.scale }
    }
    fn smoothed(&self, _x: &[f64], lambda: &[f64], nu: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
        let s = dot(lambda, nu);
        let r = (s * s + eps * eps).sqrt();
        Ok((self.scale * r, nu.iter().map(|n| self.scale * s / r * n).collect()))
    }
    fn is_subadditive_homogeneous(&self) -> bool {
        true
    }
    fn is_jointly_convex(&self) -> bool {
        true
    }
    fn depends_on_x(&self) -> bool {
        false
    }
    fn label(&self) -> String {
        format!("trace-interfacial({})", self.scale)
    }
}

/// `c · |λ|`.
#[derive(Clone, Copy, Debug)]
pub struct NormInterfacial {
    pub c: f64,
}

impl SurfaceDensity for NormInterfacial {
    fn value(&self, _x: &[f64], lambda: &[f64], _nu: &[f64]) -> Result<f64> {
        Ok(self.c * norm(lambda))
    }
    fn kind(&self) -> SurfaceKind {
        SurfaceKind::Norm { scale: self.c }
    }
    fn smoothed(&self, _x: &[f64], lambda: &[f64], _nu: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
        let r = (dot(lambda, lambda) + eps * eps).sqrt();
        Ok((self.c * r, lambda.iter().map(|l| self.c * l / r).collect()))
    }
    fn is_subadditive_homogeneous(&self) -> bool {
        true
    }
    fn is_jointly_convex(&self) -> bool {
        true
    }
    fn depends_on_x(&self) -> bool {
        false
    }
    fn label(&self) -> String {
        format!("norm-interfacial({})", self.c)
    }
}

pub fn build_bulk(spec: &BulkSpec) -> Result<(Arc<dyn BulkDensity>, f64, f64, f64)> {
    // (density, q, c_W, C_W)
    match *spec {
        BulkSpec::Quadratic => Ok((Arc::new(Quadratic), 2.0, 1.0, 1.0)),
        BulkSpec::PPower { p } => {
            if !(p > 1.0 && p.is_finite()) {
                return Err(Error::Invalid(format!("p-power needs p > 1, got {p}")));
            }
            Ok((Arc::new(PPower { p }), p, 1.0, p))
        }
    }
}

pub fn build_surface(spec: &SurfaceSpec) -> Result<(Arc<dyn SurfaceDensity>, f64, f64)> {
    // (density, c_psi, C_psi)
    match *spec {
        SurfaceSpec::TraceInterfacial { scale } => {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::Invalid(format!(
                    "trace-interfacial scale must be positive, got {scale}"
                )));
            }
            Ok((Arc::new(TraceInterfacial { scale }), 0.0, scale))
        }
        SurfaceSpec::NormInterfacial { c } => {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Invalid(format!("norm-interfacial c must be positive, got {c}")));
            }
            Ok((Arc::new(NormInterfacial { c }), c, c))
        }
    }
}

pub fn build_pair(spec: &PairSpec) -> Result<DensityPair> {
    let (bulk, q, c_w, big_c_w) = build_bulk(&spec.bulk)?;
    let (surface, c_psi, big_c_psi) = build_surface(&spec.surface)?;
    let constants = ClassConstants {
        c_w,
        big_c_w,
        c_psi,
        big_c_psi,
        a0: None,
        omega_w: Modulus::Zero,
        omega_psi: Modulus::Zero,
        coercive: true,
    };
    let mut pair = DensityPair::new(bulk, surface, q, constants)?;
    pair.spec = Some(spec.clone());
    Ok(pair)
}

/// Look a single density up by name with default parameters.
pub fn pair_by_names(bulk: &str, surface: &str) -> Result<DensityPair> {
    let bulk = match bulk {
        "quadratic" => BulkSpec::Quadratic,
        "p-power" => BulkSpec::PPower { p: 2.0 },
        other => return Err(Error::UnknownDensity(other.into())),
    };
    let surface = match surface {
        "trace-interfacial" => SurfaceSpec::TraceInterfacial { scale: 1.0 },
        "norm-interfacial" => SurfaceSpec::NormInterfacial { c: 1.0 },
        other => return Err(Error::UnknownDensity(other.into())),
    };
    build_pair(&PairSpec::new(bulk, surface))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_from_json() {
        let spec: PairSpec =
            serde_json::from_str(r#"{"bulk":{"name":"p-power","p":3},"surface":{"name":"trace-interfacial"}}"#)
                .unwrap();
        assert_eq!(spec.bulk, BulkSpec::PPower { p: 3.0 });
        assert_eq!(spec.surface, SurfaceSpec::TraceInterfacial { scale: 1.0 });
        let pair = spec.build().unwrap();
        assert_eq!(pair.exponent_q, 3.0);
        let v = pair.bulk_at(&[0.0], &Matrix::identity(2)).unwrap();
        assert!((v - 2f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn unknown_names_are_rejected() {
        assert!(serde_json::from_str::<BulkSpec>(r#"{"name":"cubic"}"#).is_err());
        assert!(matches!(
            pair_by_names("cubic", "trace-interfacial"),
            Err(Error::UnknownDensity(_))
        ));
    }

    #[test]
    fn analytic_gradients_match_differences() {
        let a = Matrix::from_rows(&[vec![0.3, -1.2], vec![0.7, 2.0]]).unwrap();
        for bulk in [Arc::new(Quadratic) as Arc<dyn BulkDensity>, Arc::new(PPower { p: 3.5 })] {
            let g = bulk.gradient(&[], &a).unwrap();
            let mut probe = a.clone();
            for k in 0..4 {
                let h = 1e-6;
                probe.as_mut_slice()[k] += h;
                let fp = bulk.value(&[], &probe).unwrap();
                probe.as_mut_slice()[k] -= 2.0 * h;
                let fm = bulk.value(&[], &probe).unwrap();
                probe.as_mut_slice()[k] += h;
                assert!((g.as_slice()[k] - (fp - fm) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn smoothed_surface_converges_to_value() {
        let t = TraceInterfacial { scale: 1.0 };
        let (v, _) = t.smoothed(&[], &[0.4, 0.3], &[1.0, 0.0], 1e-9).unwrap();
        assert!((v - 0.4).abs() < 1e-12);
        let n = NormInterfacial { c: 2.0 };
        let (v, g) = n.smoothed(&[], &[0.3, 0.4], &[1.0, 0.0], 1e-9).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!((g[0] - 1.2).abs() < 1e-9 && (g[1] - 1.6).abs() < 1e-9);
    }
}
