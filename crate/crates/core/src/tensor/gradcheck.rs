use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Tensors larger than this are checked on a seeded random subset of coordinates.
    pub max_coords_per_tensor: usize,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are compared in absolute terms.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_tensor: 256,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients against central differences of `loss`.
/// Returns the largest relative error seen over the probed coordinates.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[Tensor],
    analytic: &[Tensor],
    opts: &GradCheckOptions,
) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..params.len() {
        assert_eq!(params[t].dims(), analytic[t].dims(), "gradient {t} shape");
        let n = params[t].len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c =
                rand::seq::index::sample(&mut rng, n, opts.max_coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + opts.eps;
            let plus = loss(&work);
            work[t].data_mut()[i] = orig - opts.eps;
            let minus = loss(&work);
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            worst = worst.max(relative_error(
                analytic[t].data()[i],
                numeric,
                opts.abs_floor,
            ));
        }
    }
    worst
}
