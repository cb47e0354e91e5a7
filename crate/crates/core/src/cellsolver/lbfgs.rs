//! Limited-memory BFGS on a linear subspace with Armijo backtracking.

use std::collections::VecDeque;

use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub(crate) struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    pub gtol: f64,
    pub ftol: f64,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LbfgsOutcome {
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` starting from `x`. `f` writes the gradient into its second
/// argument; `project` maps a gradient onto the feasible directions, so
/// every step keeps the linear constraints satisfied by the start point.
pub(crate) fn minimize<F, P>(mut f: F, project: P, x: &mut [f64], opts: LbfgsOptions) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
    P: Fn(&mut [f64]),
{
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut fx = f(x, &mut g)?;
    project(&mut g);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut d = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut alpha_buf = vec![0.0; opts.memory];
    let mut stall = 0;

    for it in 0..opts.max_iter {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax <= opts.gtol {
            return Ok(LbfgsOutcome {
                iterations: it,
                converged: true,
            });
        }

        // two-loop recursion
        d.copy_from_slice(&g);
        for (k, (s, y, rho)) in hist.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alpha_buf[k] = a;
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for (k, (s, y, rho)) in hist.iter().enumerate() {
            let b = rho * dot(y, &d);
            let a = alpha_buf[k];
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        d.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
            slope = -dot(&g, &g);
        }
        let mut step = if hist.is_empty() { (1.0 / gmax).min(1.0) } else { 1.0 };

        let mut accepted = None;
        for _ in 0..50 {
            trial
                .iter_mut()
                .zip(x.iter())
                .zip(&d)
                .for_each(|((t, xi), di)| *t = xi + step * di);
            let ft = f(&trial, &mut g_new)?;
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some(ft);
                break;
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else {
            if hist.is_empty() {
                // steepest descent failed as well: numerically stationary
                return Ok(LbfgsOutcome {
                    iterations: it,
                    converged: true,
                });
            }
            hist.clear();
            continue;
        };
        project(&mut g_new);

        let s: Vec<f64> = trial.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        x.copy_from_slice(&trial);
        std::mem::swap(&mut g, &mut g_new);
        let decrease = fx - f_new;
        fx = f_new;
        if decrease <= opts.ftol * fx.abs().max(1.0) {
            stall += 1;
            if stall >= 5 {
                return Ok(LbfgsOutcome {
                    iterations: it + 1,
                    converged: true,
                });
            }
        } else {
            stall = 0;
        }
    }
    Ok(LbfgsOutcome {
        iterations: opts.max_iter,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let mut x = vec![-1.2, 1.0];
        let out = minimize(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                Ok((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
            },
            |_| {},
            &mut x,
            LbfgsOptions {
                memory: 8,
                max_iter: 500,
                gtol: 1e-10,
                ftol: 0.0,
            },
        )
        .unwrap();
        assert!(out.converged);
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stays_on_constraint() {
        // minimize |x - c|² subject to x₀ + x₁ + x₂ = 1
        let c = [3.0, -1.0, 0.5];
        let mut x = vec![1.0, 0.0, 0.0];
        minimize(
            |x, g| {
                let mut f = 0.0;
                for i in 0..3 {
                    g[i] = 2.0 * (x[i] - c[i]);
                    f += (x[i] - c[i]).powi(2);
                }
                Ok(f)
            },
            |g| {
                let m = g.iter().sum::<f64>() / 3.0;
                g.iter_mut().for_each(|v| *v -= m);
            },
            &mut x,
            LbfgsOptions {
                memory: 5,
                max_iter: 100,
                gtol: 1e-12,
                ftol: 0.0,
            },
        )
        .unwrap();
        assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // projection of c onto the plane
        let shift = (c.iter().sum::<f64>() - 1.0) / 3.0;
        for i in 0..3 {
            assert!((x[i] - (c[i] - shift)).abs() < 1e-8);
        }
    }
}
