//! Parameter initialization. Values are drawn as `f32` so parameters are
//! exactly representable in checkpoints.

use rand::Rng;

use crate::tensor::Tensor;

/// Centered uniform `U(−b, b)` with `b = sqrt(3·gain / fan_in)`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = (3.0 * gain / fan_in.max(1) as f64).sqrt();
    uniform(rng, shape, bound)
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let b = bound as f32;
    Tensor::from_fn(shape, |_| {
        if b == 0.0 {
            0.0
        } else {
            rng.gen_range(-b..b) as f64
        }
    })
}

/// Conv kernel `[k,k,cin,cout]` with fan-in `k·k·cin`.
pub fn conv_kernel<R: Rng>(rng: &mut R, k: usize, cin: usize, cout: usize, gain: f64) -> Tensor {
    fan_in_uniform(rng, &[k, k, cin, cout], k * k * cin, gain)
}
