use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::fnv_mix;
use crate::tensor::{Real, Tensor};

/// `(fan_in, fan_out)` of a weight tensor.
///
/// Rank 4 is a conv kernel `[kh, kw, a, b]` (either orientation: only the
/// sum matters for Xavier); rank 2 is `[in, out]`; rank 1 is a 1-D kernel.
pub fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [k] => Ok((*k, *k)),
        [i, o] => Ok((*i, *o)),
        [kh, kw, a, b] => Ok((kh * kw * a, kh * kw * b)),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "no fan-in/fan-out interpretation".into(),
        }),
    }
}

/// Xavier (Glorot) uniform initialisation on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<T: Real>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    let (fan_in, fan_out) = fans(shape)?;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::from_fn(shape, |_| {
        T::of(rng.random_range(-bound..bound))
    }))
}

/// Per-parameter seed: a function of the model seed and the parameter name,
/// so initial values do not depend on construction order.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    name.bytes()
        .fold(fnv_mix(0xcbf2_9ce4_8422_2325, seed), |h, b| {
            fnv_mix(h, b as u64)
        })
}
