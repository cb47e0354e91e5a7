//! Sampling-based falsification of the density-class properties.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::density::DensityPair;
use crate::error::{Error, Result};
use crate::linalg::{add_vec, norm, Matrix};
use crate::quadrature::halton;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Property {
    #[serde(rename = "pr1")]
    Pr1,
    #[serde(rename = "pr2")]
    Pr2,
    #[serde(rename = "pr3")]
    Pr3,
    #[serde(rename = "pr4")]
    Pr4,
    #[serde(rename = "symmetry")]
    Symmetry,
    #[serde(rename = "homogeneity")]
    Homogeneity,
    #[serde(rename = "subadditivity")]
    Subadditivity,
    #[serde(rename = "pr5")]
    Pr5,
    #[serde(rename = "W3-bounded")]
    W3Bounded,
}

impl Property {
    pub const ALL: [Property; 9] = [
        Property::Pr1,
        Property::Pr2,
        Property::Pr3,
        Property::Pr4,
        Property::Symmetry,
        Property::Homogeneity,
        Property::Subadditivity,
        Property::Pr5,
        Property::W3Bounded,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Property::Pr1 => "pr1",
            Property::Pr2 => "pr2",
            Property::Pr3 => "pr3",
            Property::Pr4 => "pr4",
            Property::Symmetry => "symmetry",
            Property::Homogeneity => "homogeneity",
            Property::Subadditivity => "subadditivity",
            Property::Pr5 => "pr5",
            Property::W3Bounded => "W3-bounded",
        }
    }
}

/// A hand-picked tuple tested before the quasi-random samples.
/// Unset fields take neutral defaults (origin, unit matrices, `e₁`, t = 2).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Probe {
    pub x: Option<Vec<f64>>,
    pub x2: Option<Vec<f64>>,
    pub a: Option<Matrix>,
    pub a2: Option<Matrix>,
    pub lambda: Option<Vec<f64>>,
    pub lambda2: Option<Vec<f64>>,
    pub nu: Option<Vec<f64>>,
    pub t: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPlan {
    /// Target dimension d.
    pub d: usize,
    /// Domain dimension N.
    pub n: usize,
    /// Number of quasi-random tuples per property.
    pub count: usize,
    /// Half-width of the range for matrix and vector entries.
    pub range: f64,
    /// Largest homogeneity factor t.
    pub t_max: f64,
    /// Box for x (per coordinate).
    pub x_lo: f64,
    pub x_hi: f64,
    pub probes: Vec<Probe>,
    pub properties: Vec<Property>,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            d: 2,
            n: 2,
            count: 1000,
            range: 5.0,
            t_max: 5.0,
            x_lo: -0.5,
            x_hi: 0.5,
            probes: Vec::new(),
            properties: Property::ALL.to_vec(),
        }
    }
}

impl SamplingPlan {
    pub fn with_dims(d: usize, n: usize) -> Self {
        SamplingPlan {
            d,
            n,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || !(1..=2).contains(&self.n) {
            return Err(Error::Dimension(format!(
                "sampling plan needs d >= 1 and N in {{1,2}}, got d={}, N={}",
                self.d, self.n
            )));
        }
        if !(self.range > 0.0 && self.t_max > 0.0 && self.x_hi > self.x_lo) {
            return Err(Error::Invalid("sampling plan ranges must be nonempty".into()));
        }
        if self.dim() > 32 {
            return Err(Error::Dimension(format!("sample dimension {} exceeds 32", self.dim())));
        }
        Ok(())
    }

    fn dim(&self) -> usize {
        let dn = self.d * self.n;
        2 * self.n + 2 * dn + 2 * self.d + 2
    }

    fn tuple(&self, index: u64) -> Tuple {
        let h = halton(index, self.dim());
        let mut it = h.into_iter();
        let mut take =
            |k: usize, lo: f64, hi: f64| -> Vec<f64> { (0..k).map(|_| lo + (hi - lo) * it.next().unwrap()).collect() };
        let r = self.range;
        let x = take(self.n, self.x_lo, self.x_hi);
        let x2 = take(self.n, self.x_lo, self.x_hi);
        let a = take(self.d * self.n, -r, r);
        let a2 = take(self.d * self.n, -r, r);
        let lambda = take(self.d, -r, r);
        let lambda2 = take(self.d, -r, r);
        let angle = take(1, 0.0, 2.0 * PI)[0];
        let t = take(1, 0.0, self.t_max)[0].max(1e-3);
        let nu = if self.n == 1 {
            vec![if angle < PI { 1.0 } else { -1.0 }]
        } else {
            vec![angle.cos(), angle.sin()]
        };
        Tuple {
            x,
            x2,
            a: Matrix::from_row_major(self.d, self.n, a).expect("finite"),
            a2: Matrix::from_row_major(self.d, self.n, a2).expect("finite"),
            lambda,
            lambda2,
            nu,
            t,
        }
    }

    fn probe_tuple(&self, p: &Probe) -> Result<Tuple> {
        let mut e1 = vec![0.0; self.n];
        e1[0] = 1.0;
        let mut l1 = vec![0.0; self.d];
        l1[0] = 1.0;
        let eye = Matrix::from_row_major(
            self.d,
            self.n,
            (0..self.d * self.n)
                .map(|k| if k / self.n == k % self.n { 1.0 } else { 0.0 })
                .collect(),
        )?;
        let t = Tuple {
            x: p.x.clone().unwrap_or_else(|| vec![0.0; self.n]),
            x2: p.x2.clone().unwrap_or_else(|| vec![0.25; self.n]),
            a: p.a.clone().unwrap_or_else(|| eye.clone()),
            a2: p.a2.clone().unwrap_or_else(|| Matrix::zeros(self.d, self.n)),
            lambda: p.lambda.clone().unwrap_or_else(|| l1.clone()),
            lambda2: p.lambda2.clone().unwrap_or_else(|| l1.clone()),
            nu: p.nu.clone().unwrap_or(e1),
            t: p.t.unwrap_or(2.0),
        };
        if t.x.len() != self.n
            || t.x2.len() != self.n
            || t.nu.len() != self.n
            || t.lambda.len() != self.d
            || t.lambda2.len() != self.d
            || t.a.shape() != (self.d, self.n)
            || t.a2.shape() != (self.d, self.n)
        {
            return Err(Error::Dimension("probe does not match plan dimensions".into()));
        }
        crate::linalg::check_unit(&t.nu)?;
        Ok(t)
    }
}

#[derive(Clone, Debug)]
struct Tuple {
    x: Vec<f64>,
    x2: Vec<f64>,
    a: Matrix,
    a2: Matrix,
    lambda: Vec<f64>,
    lambda2: Vec<f64>,
    nu: Vec<f64>,
    t: f64,
}

pub type Witness = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotRequired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyVerdict {
    pub verdict: Verdict,
    /// Tuple with the largest violation (or the tightest one on a pass).
    pub witness: Option<Witness>,
    /// First violating tuple in plan order (probes first).
    pub first_violation: Option<Witness>,
    /// Smallest constant that would make the property hold on the samples.
    pub measured: Option<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub pair: String,
    pub properties: BTreeMap<Property, PropertyVerdict>,
}

impl ClassReport {
    pub fn all_pass(&self) -> bool {
        self.properties.values().all(|v| v.verdict != Verdict::Fail)
    }

    pub fn verdict(&self, p: Property) -> Option<Verdict> {
        self.properties.get(&p).map(|v| v.verdict)
    }
}

/// Running state for one property: tracks the worst excess and the measured constant.
struct Tracker {
    worst_excess: f64,
    witness: Option<Witness>,
    first: Option<Witness>,
    measured: Option<f64>,
    maximize: bool,
    samples: usize,
}

impl Tracker {
    fn new(maximize: bool) -> Self {
        Tracker {
            worst_excess: f64::NEG_INFINITY,
            witness: None,
            first: None,
            measured: None,
            maximize,
            samples: 0,
        }
    }

    /// `excess > tol` is a violation; `constant` is the sample's implied constant.
    fn record(&mut self, excess: f64, tol: f64, constant: Option<f64>, w: impl Fn() -> Witness) {
        self.samples += 1;
        let violated = excess > tol;
        if violated && self.first.is_none() {
            self.first = Some(w());
        }
        if excess > self.worst_excess {
            self.worst_excess = excess;
            self.witness = Some(w());
        }
        if let Some(c) = constant.filter(|c| c.is_finite()) {
            self.measured = Some(match self.measured {
                None => c,
                Some(m) if self.maximize => m.max(c),
                Some(m) => m.min(c),
            });
        }
    }

    fn finish(self) -> PropertyVerdict {
        PropertyVerdict {
            verdict: if self.first.is_some() {
                Verdict::Fail
            } else {
                Verdict::Pass
            },
            witness: self.witness,
            first_violation: self.first,
            measured: self.measured,
            samples: self.samples,
        }
    }
}

fn tol_for(a: f64, b: f64) -> f64 {
    1e-12 * (1.0 + a.abs() + b.abs())
}

fn witness(fields: &[(&str, &[f64])]) -> Witness {
    fields.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
}

/// Test every requested property of the pair on the plan's tuples.
pub fn check_density_class(pair: &DensityPair, plan: &SamplingPlan) -> Result<ClassReport> {
    plan.validate()?;
    let mut tuples = Vec::with_capacity(plan.probes.len() + plan.count);
    for p in &plan.probes {
        tuples.push(plan.probe_tuple(p)?);
    }
    for i in 0..plan.count {
        tuples.push(plan.tuple(i as u64 + 1));
    }

    let q = pair.exponent_q;
    let k = &pair.constants;
    let mut out = BTreeMap::new();
    for &prop in &plan.properties {
        if prop == Property::Pr3 && !k.coercive {
            out.insert(
                prop,
                PropertyVerdict {
                    verdict: Verdict::NotRequired,
                    witness: None,
                    first_violation: None,
                    measured: None,
                    samples: 0,
                },
            );
            continue;
        }
        let mut tr = Tracker::new(!matches!(prop, Property::Pr3));
        for s in &tuples {
            match prop {
                Property::Pr1 => {
                    let w0 = pair.bulk_at(&s.x, &s.a)?;
                    let w1 = pair.bulk_at(&s.x2, &s.a)?;
                    let dx = norm(&crate::linalg::sub_vec(&s.x2, &s.x));
                    let scale = 1.0 + s.a.norm().powf(q);
                    let diff = (w1 - w0).abs();
                    let bound = k.omega_w.eval(dx) * scale;
                    let c = if dx > 0.0 { Some(diff / (scale * dx)) } else { None };
                    tr.record(diff - bound, tol_for(w0, w1), c, || {
                        witness(&[("x0", &s.x), ("x1", &s.x2), ("A", s.a.as_slice())])
                    });
                }
                Property::Pr2 => {
                    let w1 = pair.bulk_at(&s.x, &s.a)?;
                    let w2 = pair.bulk_at(&s.x, &s.a2)?;
                    let da = (&s.a - &s.a2).norm();
                    let f = da * (1.0 + s.a.norm().powf(q - 1.0) + s.a2.norm().powf(q - 1.0));
                    let diff = (w1 - w2).abs();
                    let c = if f > 0.0 { Some(diff / f) } else { None };
                    tr.record(diff - k.big_c_w * f, tol_for(w1, w2), c, || {
                        witness(&[("x", &s.x), ("A1", s.a.as_slice()), ("A2", s.a2.as_slice())])
                    });
                }
                Property::Pr3 => {
                    let w = pair.bulk_at(&s.x, &s.a)?;
                    let na = s.a.norm().powf(q);
                    let lower = k.c_w * na - 1.0 / k.c_w;
                    // largest c with c|A|^q - 1/c <= W, via the positive root
                    let c = if na > 0.0 {
                        Some((w + (w * w + 4.0 * na).sqrt()) / (2.0 * na))
                    } else {
                        None
                    };
                    tr.record(lower - w, tol_for(w, lower), c, || {
                        witness(&[("x", &s.x), ("A", s.a.as_slice())])
                    });
                }
                Property::Pr4 => {
                    let v = pair.surface_at(&s.x, &s.lambda, &s.nu)?;
                    let nl = norm(&s.lambda);
                    let excess = (v - k.big_c_psi * nl).max(k.c_psi * nl - v);
                    let c = if nl > 0.0 { Some(v / nl) } else { None };
                    tr.record(excess, tol_for(v, nl), c, || {
                        witness(&[("x", &s.x), ("lambda", &s.lambda), ("nu", &s.nu)])
                    });
                }
                Property::Symmetry => {
                    let v = pair.surface_at(&s.x, &s.lambda, &s.nu)?;
                    let neg_l: Vec<f64> = s.lambda.iter().map(|v| -v).collect();
                    let neg_n: Vec<f64> = s.nu.iter().map(|v| -v).collect();
                    let w = pair.surface_at(&s.x, &neg_l, &neg_n)?;
                    tr.record((v - w).abs(), tol_for(v, w), Some((v - w).abs()), || {
                        witness(&[("x", &s.x), ("lambda", &s.lambda), ("nu", &s.nu)])
                    });
                }
                Property::Homogeneity => {
                    let v = pair.surface_at(&s.x, &s.lambda, &s.nu)?;
                    let scaled: Vec<f64> = s.lambda.iter().map(|l| s.t * l).collect();
                    let w = pair.surface_at(&s.x, &scaled, &s.nu)?;
                    let gap = (w - s.t * v).abs();
                    tr.record(gap, tol_for(w, s.t * v), Some(gap), || {
                        witness(&[("x", &s.x), ("lambda", &s.lambda), ("nu", &s.nu), ("t", &[s.t])])
                    });
                }
                Property::Subadditivity => {
                    let sum = add_vec(&s.lambda, &s.lambda2);
                    let v = pair.surface_at(&s.x, &sum, &s.nu)?;
                    let a = pair.surface_at(&s.x, &s.lambda, &s.nu)?;
                    let b = pair.surface_at(&s.x, &s.lambda2, &s.nu)?;
                    tr.record(v - a - b, tol_for(v, a + b), Some(v - a - b), || {
                        witness(&[
                            ("x", &s.x),
                            ("lambda1", &s.lambda),
                            ("lambda2", &s.lambda2),
                            ("nu", &s.nu),
                        ])
                    });
                }
                Property::Pr5 => {
                    let v0 = pair.surface_at(&s.x, &s.lambda, &s.nu)?;
                    let v1 = pair.surface_at(&s.x2, &s.lambda, &s.nu)?;
                    let dx = norm(&crate::linalg::sub_vec(&s.x2, &s.x));
                    let nl = norm(&s.lambda);
                    let diff = (v1 - v0).abs();
                    let c = if dx > 0.0 && nl > 0.0 {
                        Some(diff / (nl * dx))
                    } else {
                        None
                    };
                    tr.record(diff - k.omega_psi.eval(dx) * nl, tol_for(v0, v1), c, || {
                        witness(&[("x0", &s.x), ("x1", &s.x2), ("lambda", &s.lambda), ("nu", &s.nu)])
                    });
                }
                Property::W3Bounded => {
                    let a0 = k.a0.clone().unwrap_or_else(|| Matrix::zeros(plan.d, plan.n));
                    let v = pair.bulk_at(&s.x, &a0)?;
                    // finite values are bounded on a finite sample; the measured sup is reported
                    let excess = if v.is_finite() {
                        f64::NEG_INFINITY
                    } else {
                        f64::INFINITY
                    };
                    tr.record(excess, 0.0, Some(v), || witness(&[("x", &s.x), ("A0", a0.as_slice())]));
                }
            }
        }
        out.insert(prop, tr.finish());
    }
    Ok(ClassReport {
        pair: pair.label(),
        properties: out,
    })
}
