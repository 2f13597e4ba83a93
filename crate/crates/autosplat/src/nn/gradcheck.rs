//! Central finite-difference utilities used as the independent gradient
//! oracle across the test suites.

use super::{Mlp, MlpGrads, Tensor};
use rand::Rng;

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with an absolute floor, the comparison rule used by every
/// gradient suite in the crate.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(abs_floor)
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub worst_rel: f64,
}

/// Spot-checks `n_samples` randomly chosen parameters of `mlp` against
/// central differences of the scalar loss `<d_out, mlp(input)>`.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    mlp: &Mlp,
    input: &Tensor,
    d_out: &Tensor,
    grads: &MlpGrads,
    rng: &mut impl Rng,
    n_samples: usize,
    h: f64,
    abs_floor: f64,
) -> GradReport {
    let loss = |m: &Mlp| -> f64 {
        let (out, _) = m.forward(input).unwrap();
        out.data.iter().zip(d_out.data.iter()).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..n_samples {
        let layer = rng.gen_range(0..mlp.num_layers());
        let use_bias = rng.gen_bool(0.2);
        let (len, analytic, base): (usize, f64, f64);
        let idx;
        if use_bias {
            len = mlp.biases[layer].len();
            idx = rng.gen_range(0..len);
            analytic = grads.d_biases[layer].data[idx];
            base = mlp.biases[layer].data[idx];
        } else {
            len = mlp.weights[layer].len();
            idx = rng.gen_range(0..len);
            analytic = grads.d_weights[layer].data[idx];
            base = mlp.weights[layer].data[idx];
        }
        let mut probe = mlp.clone();
        let numeric = central_difference(
            |v| {
                if use_bias {
                    probe.biases[layer].data[idx] = v;
                } else {
                    probe.weights[layer].data[idx] = v;
                }
                loss(&probe)
            },
            base,
            h,
        );
        worst = worst.max(relative_error(analytic, numeric, abs_floor));
        checked += 1;
    }
    GradReport {
        checked,
        worst_rel: worst,
    }
}
