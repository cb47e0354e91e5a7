//! Quadrature rules, closed-form integrals of |affine| and a Halton sequence.

use crate::linalg::dot;

/// Gauss-Legendre nodes and weights mapped to [0, 1] (weights sum to 1).
pub fn gauss_legendre_unit(points: usize) -> Vec<(f64, f64)> {
    let (nodes, weights): (&[f64], &[f64]) = match points {
        1 => (&[0.0], &[2.0]),
        2 => (&[-0.577_350_269_189_625_8, 0.577_350_269_189_625_8], &[1.0, 1.0]),
        3 => (
            &[-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4],
            &[5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0],
        ),
        4 => (
            &[
                -0.861_136_311_594_052_6,
                -0.339_981_043_584_856_3,
                0.339_981_043_584_856_3,
                0.861_136_311_594_052_6,
            ],
            &[
                0.347_854_845_137_453_9,
                0.652_145_154_862_546_1,
                0.652_145_154_862_546_1,
                0.347_854_845_137_453_9,
            ],
        ),
        8 => (
            &[
                -0.960_289_856_497_536_3,
                -0.796_666_477_413_626_7,
                -0.525_532_409_916_329,
                -0.183_434_642_495_649_8,
                0.183_434_642_495_649_8,
                0.525_532_409_916_329,
                0.796_666_477_413_626_7,
                0.960_289_856_497_536_3,
            ],
            &[
                0.101_228_536_290_376_3,
                0.222_381_034_453_374_5,
                0.313_706_645_877_887_3,
                0.362_683_783_378_362,
                0.362_683_783_378_362,
                0.313_706_645_877_887_3,
                0.222_381_034_453_374_5,
                0.101_228_536_290_376_3,
            ],
        ),
        _ => panic!("unsupported Gauss-Legendre order {points}"),
    };
    nodes
        .iter()
        .zip(weights)
        .map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w))
        .collect()
}

/// ∫₀¹ |a + b t| dt, exact.
pub fn abs_affine_integral(a: f64, b: f64) -> f64 {
    let end = a + b;
    if a * end >= 0.0 {
        (a + 0.5 * b).abs()
    } else {
        (a * a + end * end) / (2.0 * b.abs())
    }
}

/// ∫₀¹ |p + q t| dt for vectors p, q (Euclidean norm).
///
/// Closed form when the segment passes close to the origin, high-order Gauss
/// otherwise (the integrand is then analytic on a wide neighbourhood).
pub fn norm_affine_integral(p: &[f64], q: &[f64]) -> f64 {
    let qq = dot(q, q);
    let pp = dot(p, p);
    if qq == 0.0 {
        return pp.sqrt();
    }
    let pq = dot(p, q);
    // |p + q t| = |q| sqrt((t + s0)^2 + k^2)
    let s0 = pq / qq;
    let k2 = ((pp * qq - pq * pq) / (qq * qq)).max(0.0);
    // branch points at t = -s0 ± ik; far from [0, 1] the closed form cancels
    // badly while Gauss converges geometrically
    let gap = (-s0 - (-s0).clamp(0.0, 1.0)).powi(2) + k2;
    if gap >= 16.0 {
        return gauss_legendre_unit(8)
            .into_iter()
            .map(|(t, w)| {
                let v: f64 = p.iter().zip(q).map(|(a, b)| (a + b * t).powi(2)).sum();
                w * v.sqrt()
            })
            .sum();
    }
    let k = k2.sqrt();
    let anti = |s: f64| -> f64 {
        let r = (s * s + k2).sqrt();
        if k > 0.0 {
            0.5 * (s * r + k2 * (s / k).asinh())
        } else {
            0.5 * s * s.abs()
        }
    };
    qq.sqrt() * (anti(1.0 + s0) - anti(s0))
}

/// Radical inverse of `index` in base `base` (van der Corput).
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    r
}

const PRIMES: [u64; 32] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109,
    113, 127, 131,
];

/// A Halton point in [0,1)^dim; `index` starts at 1 to skip the origin.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "Halton dimension {dim} too large");
    PRIMES[..dim].iter().map(|&b| radical_inverse(index, b)).collect()
}
