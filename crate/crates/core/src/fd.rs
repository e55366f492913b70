//! Central-difference gradient oracle.
//!
//! Entirely independent of the tape's backward pass: it only re-evaluates the
//! supplied closure at perturbed parameter values, which is what makes it
//! usable as a check on that pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// Floor for the denominator of [`relative_error`]: differences smaller than
/// `GRAD_REL_FLOOR * tolerance` in absolute terms are treated as roundoff.
pub const GRAD_REL_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, GRAD_REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(GRAD_REL_FLOOR))
}

/// Central finite differences of `f` over every coordinate of every parameter:
/// `(f(p + step e) - f(p - step e)) / (2 step)`.
pub fn finite_difference_gradient<F>(f: F, params: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    assert!(step > 0.0, "finite differences need a positive step");
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let mut g = vec![0.0; n];
        for (ci, slot) in g.iter_mut().enumerate() {
            *slot = central_difference(&f, &mut work, pi, ci, step)?;
        }
        grads.push(Tensor::new(params[pi].shape().to_vec(), g)?);
    }
    Ok(grads)
}

/// Finite differences over a seeded subset of coordinates per tensor.
///
/// Full-coordinate checks are quadratic in model size; sampling keeps the
/// model-level gradient check inside its runtime budget while still touching
/// every parameter tensor. Tensors with at most `max_coords` elements are
/// checked exhaustively.
pub fn finite_difference_sampled<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<Vec<Vec<(usize, f64)>>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    assert!(step > 0.0, "finite differences need a positive step");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, max_coords).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut checks = Vec::with_capacity(coords.len());
        for ci in coords {
            checks.push((ci, central_difference(&f, &mut work, pi, ci, step)?));
        }
        out.push(checks);
    }
    Ok(out)
}

fn central_difference<F>(
    f: &F,
    work: &mut [Tensor],
    pi: usize,
    ci: usize,
    step: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let original = work[pi].data()[ci];
    work[pi].data_mut()[ci] = original + step;
    let plus = f(work)?;
    work[pi].data_mut()[ci] = original - step;
    let minus = f(work)?;
    work[pi].data_mut()[ci] = original;
    Ok((plus - minus) / (2.0 * step))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let theta = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |p: &[Tensor]| Ok(p[0].iter().map(|v| v * v).sum());
        let g = finite_difference_gradient(f, &[theta], 1e-5).unwrap();
        assert!((g[0].data()[0] - 2.0).abs() < 1e-8);
        assert!((g[0].data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn linear_function_is_exact_for_any_step() {
        let theta = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let f = |p: &[Tensor]| Ok(3.0 * p[0].data()[0] - 2.0 * p[0].data()[1] + p[0].data()[2]);
        for step in [1e-7, 1e-3, 0.5] {
            let g = finite_difference_gradient(f, &[theta.clone()], step).unwrap();
            assert!((g[0].data()[0] - 3.0).abs() < 1e-9, "step {step}");
            assert!((g[0].data()[1] + 2.0).abs() < 1e-9, "step {step}");
            assert!((g[0].data()[2] - 1.0).abs() < 1e-9, "step {step}");
        }
    }

    #[test]
    fn sampled_covers_small_tensors_exhaustively() {
        let theta = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = |p: &[Tensor]| Ok(p[0].iter().map(|v| v * v).sum());
        let checks = finite_difference_sampled(f, &[theta], 1e-5, 16, 0).unwrap();
        let coords: Vec<usize> = checks[0].iter().map(|&(c, _)| c).collect();
        assert_eq!(coords, vec![0, 1, 2, 3]);
    }

    #[test]
    fn sampled_caps_large_tensors() {
        let theta = Tensor::zeros(vec![100]);
        let f = |p: &[Tensor]| Ok(p[0].iter().sum());
        let checks = finite_difference_sampled(f, &[theta], 1e-5, 8, 7).unwrap();
        assert_eq!(checks[0].len(), 8);
        for &(_, g) in &checks[0] {
            assert!((g - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_error_floors_tiny_denominators() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-6);
        assert!(relative_error(1.0, 2.0) > 0.4);
    }
}
