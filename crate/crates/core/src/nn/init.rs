use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// I.i.d. uniform entries on `[-L, L]`, `L = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Real>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Tensor<T> {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be positive");
    let limit = glorot_limit(fan_in, fan_out);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(limit * (2.0 * rng.gen::<f64>() - 1.0)))
        .collect();
    Tensor::from_vec(shape, data).expect("element count matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    #[test]
    fn first_conv_limit() {
        // conv3d1: fan_in = 27·1, fan_out = 27·32
        let l = glorot_limit(27, 864);
        assert!((l - 0.082_061).abs() < 1e-6, "{l}");
        let mut rng = substream(0, Stream::Init);
        let w: Tensor<f32> = glorot_uniform(&[3, 3, 3, 1, 32], 27, 864, &mut rng);
        assert!(w.data().iter().all(|v| v.abs() as f64 <= l));
    }

    #[test]
    fn symmetric_law() {
        let mut rng = substream(42, Stream::Init);
        let l = glorot_limit(100, 100);
        let w: Tensor<f64> = glorot_uniform(&[100_000], 100, 100, &mut rng);
        let mean = w.data().iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01 * l, "mean {mean}");
        let min = w.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = w.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min > -l - 1e-12 && min < -0.99 * l);
        assert!(max < l + 1e-12 && max > 0.99 * l);
    }
}
