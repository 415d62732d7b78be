use rand::seq::index::sample;

use crate::rng::seeded;

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Number of coordinates checked; all of them when the vector is shorter.
    pub coords: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            coords: 64,
            seed: 0,
        }
    }
}

/// Compares an analytic gradient against central finite differences of
/// `loss` on a random subset of coordinates. Returns the largest
/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn finite_diff_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    opts: &FdOptions,
) -> f64 {
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let n = params.len();
    let coords: Vec<usize> = if n <= opts.coords {
        (0..n).collect()
    } else {
        let mut idx = sample(&mut seeded(opts.seed), n, opts.coords).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut p = params.to_vec();
    let mut worst = 0.0_f64;
    for i in coords {
        let orig = p[i];
        p[i] = orig + opts.step;
        let up = loss(&p);
        p[i] = orig - opts.step;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p: Vec<f64> = (0..100).map(|i| 0.5 + i as f64 / 64.0).collect();
        let grad: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_check(
            |x| x.iter().map(|v| v * v).sum(),
            &p,
            &grad,
            &FdOptions::default(),
        );
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let p = vec![1.0, 2.0];
        let err = finite_diff_check(|x| x[0] * x[1], &p, &[2.0, 2.0], &FdOptions::default());
        assert!(err > 0.5);
    }
}
