//! Central finite-difference checks for hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor4;

/// Step used for central differences in `f64`.
pub const FD_STEP: f64 = 1e-6;

pub fn probe_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients from
/// turning round-off into large relative errors.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `grad` with central differences of `f` at `probes` random
/// coordinates of `x`. Returns the largest relative error.
pub fn check_scalar(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    probes: usize,
    seed: u64,
) -> f64 {
    let mut rng = probe_rng(seed);
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.gen_range(0..x.len());
        let orig = xp[i];
        xp[i] = orig + FD_STEP;
        let up = f(&xp);
        xp[i] = orig - FD_STEP;
        let down = f(&xp);
        xp[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        if std::env::var_os("GRADCHECK_TRACE").is_some() && rel_err(grad[i], numeric) > 1e-4 {
            eprintln!("probe {i}: analytic {} numeric {numeric}", grad[i]);
        }
        worst = worst.max(rel_err(grad[i], numeric));
    }
    worst
}

fn projection(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut rng = probe_rng(seed ^ 0xA5A5);
    Tensor4::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn project(y: &Tensor4<f64>, g: &Tensor4<f64>) -> f64 {
    y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}

/// Gradient check of a two-input operator through the scalar loss
/// `sum(g * f(a, b))` with a fixed random projection `g`. `probes` random
/// coordinates are checked in each input.
pub fn check_op(
    a: &Tensor4<f64>,
    b: &Tensor4<f64>,
    fwd: impl Fn(&Tensor4<f64>, &Tensor4<f64>) -> Tensor4<f64>,
    bwd: impl Fn(&Tensor4<f64>, &Tensor4<f64>, &Tensor4<f64>) -> (Tensor4<f64>, Tensor4<f64>),
    probes: usize,
    seed: u64,
) -> f64 {
    let y = fwd(a, b);
    let g = projection(y.shape(), seed);
    let (da, db) = bwd(a, b, &g);
    let fa = |v: &[f64]| project(&fwd(&Tensor4::from_vec(a.shape(), v.to_vec()).unwrap(), b), &g);
    let fb = |v: &[f64]| project(&fwd(a, &Tensor4::from_vec(b.shape(), v.to_vec()).unwrap()), &g);
    let ea = check_scalar(fa, a.data(), da.data(), probes, seed + 1);
    let eb = check_scalar(fb, b.data(), db.data(), probes, seed + 2);
    ea.max(eb)
}

/// Gradient check of a one-input operator.
pub fn check_unary(
    x: &Tensor4<f64>,
    fwd: impl Fn(&Tensor4<f64>) -> Tensor4<f64>,
    bwd: impl Fn(&Tensor4<f64>, &Tensor4<f64>) -> Tensor4<f64>,
    probes: usize,
    seed: u64,
) -> f64 {
    let y = fwd(x);
    let g = projection(y.shape(), seed);
    let dx = bwd(x, &g);
    let f = |v: &[f64]| project(&fwd(&Tensor4::from_vec(x.shape(), v.to_vec()).unwrap()), &g);
    check_scalar(f, x.data(), dx.data(), probes, seed + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensornet::*;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut rng = probe_rng(seed);
        // Keep away from the relu kink so differences never straddle it.
        Tensor4::from_fn(shape, |_| {
            let v: f64 = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    #[test]
    fn activations_pass() {
        let x = rand_tensor([1, 2, 6, 6], 9);
        let e = check_unary(&x, relu, |x, g| relu_backward(x, g).unwrap(), 100, 1);
        assert!(e < 1e-3, "relu {e}");
        let e = check_unary(&x, sigmoid, |x, g| sigmoid_backward(&sigmoid(x), g).unwrap(), 100, 2);
        assert!(e < 1e-3, "sigmoid {e}");
        let e = check_unary(&x, tanh, |x, g| tanh_backward(&tanh(x), g).unwrap(), 100, 3);
        assert!(e < 1e-3, "tanh {e}");
        let z = rand_tensor([1, 16, 2, 3], 4);
        let e = check_unary(
            &z,
            |x| pixel_shuffle(x, 4).unwrap(),
            |_, g| pixel_unshuffle(g, 4).unwrap(),
            100,
            4,
        );
        assert!(e < 1e-3, "shuffle {e}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = rand_tensor([1, 1, 4, 4], 5);
        let e = check_unary(&x, tanh, |_, g| g.clone(), 50, 6);
        assert!(e > 1e-2);
    }
}
