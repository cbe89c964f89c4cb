//! Central finite differences against tape gradients.
//!
//! Piecewise-smooth functions (leaky ReLU, |·|, bilinear sampling) have kinks
//! that a stencil of half-width `eps` may straddle, which biases the
//! difference quotient. Each entry is therefore estimated at `h` and `h/2`;
//! a smooth stencil makes the two agree to O(h²) plus rounding noise of
//! order |f|·u/h, and on disagreement `h` shrinks tenfold, down to
//! `eps · 1e-3`, as long as the rounding noise of the smaller step stays
//! well below the tolerance. The comparison against the analytic gradient
//! uses the final estimate with the unchanged tolerance.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms.
const MAGNITUDE_FLOOR: f64 = 1e-4;

const MAX_REFINEMENTS: usize = 3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Number of scalar entries compared.
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
    /// Entries whose step had to shrink because the stencil crossed a kink.
    pub refined: usize,
    pub passed: bool,
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(MAGNITUDE_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.shape().iter().product::<usize>() != 1 {
        return Err(Error::dim("gradcheck", "function must return a single value"));
    }
    Ok(out.scalar())
}

/// Checks every element of every parameter.
pub fn gradcheck<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let all: Vec<Vec<usize>> = params.iter().map(|p| (0..p.len()).collect()).collect();
    check_entries(&f, params, &all, eps, tol)
}

/// Checks at most `per_param` randomly chosen elements of each parameter.
pub fn gradcheck_subset<F>(f: F, params: &[Tensor], per_param: usize, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let k = per_param.min(p.len());
            let mut idx = sample(&mut rng, p.len(), k).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_entries(&f, params, &picks, eps, tol)
}

fn check_entries<F>(f: &F, params: &[Tensor], entries: &[Vec<usize>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let base = evaluate(f, params)?;
    if evaluate(f, params)?.to_bits() != base.to_bits() {
        return Err(Error::GradCheck("function is not deterministic".into()));
    }

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        tol,
        refined: 0,
        passed: true,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, idx) in entries.iter().enumerate() {
        for &ei in idx {
            let orig = params[pi].data()[ei];
            // (difference quotient, its rounding noise)
            let mut central = |h: f64| -> Result<(f64, f64)> {
                work[pi].data_mut()[ei] = orig + h;
                let plus = evaluate(f, &work)?;
                work[pi].data_mut()[ei] = orig - h;
                let minus = evaluate(f, &work)?;
                work[pi].data_mut()[ei] = orig;
                let noise = 4.0 * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * h);
                Ok(((plus - minus) / (2.0 * h), noise))
            };
            let mut h = eps;
            let (mut numeric, _) = central(h)?;
            for round in 0..MAX_REFINEMENTS {
                let (half, noise) = central(h / 2.0)?;
                let scale = numeric.abs().max(half.abs()).max(MAGNITUDE_FLOOR);
                if (numeric - half).abs() <= tol / 2.0 * scale + 2.0 * noise {
                    break;
                }
                // a step whose rounding noise rivals the tolerance is no better
                if 20.0 * noise > tol * scale {
                    break;
                }
                if round == 0 {
                    report.refined += 1;
                }
                h /= 10.0;
                numeric = central(h)?.0;
            }

            let a = analytic[pi].data()[ei];
            let abs = (a - numeric).abs();
            let rel = rel_diff(a, numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((pi, ei));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let rep = gradcheck(|_, p| p[0].square()?.sum(), std::slice::from_ref(&x), GRADCHECK_EPS, GRADCHECK_TOL).unwrap();
        assert!(rep.passed);
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");

        let tape = Tape::new();
        let v = tape.param(x.clone());
        let loss = v.square().unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap().get(&v).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_gradient_is_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_uniform(&[1, 1, 4, 4], -3.0, 3.0, &mut rng);
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let loss = v.sigmoid().unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap().get(&v).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            let s = 1.0 / (1.0 + (-xi).exp());
            assert!((gi - s * (1.0 - s)).abs() < 1e-14);
        }
        let rep = gradcheck(|_, p| p[0].sigmoid()?.sum(), &[x], GRADCHECK_EPS, GRADCHECK_TOL).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn detects_non_determinism() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let counter = AtomicU64::new(0);
        let x = Tensor::ones(&[1, 1, 2, 2]);
        let res = gradcheck(
            |_, p| {
                let k = counter.fetch_add(1, Ordering::SeqCst) as f64;
                p[0].scale(1.0 + k)?.sum()
            },
            &[x],
            GRADCHECK_EPS,
            GRADCHECK_TOL,
        );
        assert!(matches!(res, Err(Error::GradCheck(_))));
    }

    #[test]
    fn flags_a_non_differentiable_point() {
        // exactly on the kink every symmetric stencil sees the mean slope 0.55
        let x = Tensor::zeros(&[1, 1, 1, 1]);
        let rep = gradcheck(|_, p| p[0].leaky_relu(0.1)?.sum(), &[x], GRADCHECK_EPS, GRADCHECK_TOL).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.refined, 0);
    }

    #[test]
    fn shrinks_the_step_near_a_kink() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![2e-6]).unwrap();
        let rep = gradcheck(|_, p| p[0].abs()?.sum(), &[x], GRADCHECK_EPS, GRADCHECK_TOL).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.refined, 1);
    }
}
