//! Per-channel batch normalization over the batch and spatial axes of a
//! channels-last tensor.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Trainable parameters (gamma and beta).
    pub fn param_count(&self) -> usize {
        2 * self.channels()
    }
}

/// Saved by the training-mode forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T = f32> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn channels_of<T: Real>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<usize> {
    let c = *x.shape().last().unwrap_or(&0);
    if c != p.channels() {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm has {} channels, input {:?}",
            p.channels(),
            x.shape()
        )));
    }
    Ok(c)
}

/// Standardizes with batch statistics. Use [`update_running`] afterwards to
/// fold the statistics into the inference moments.
pub fn batchnorm_forward_train<T: Real>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = channels_of(x, p)?;
    let count = x.len() / c.max(1);
    if count < 2 {
        return Err(Error::DegenerateBatch(format!(
            "{count} value(s) per channel; training mode needs at least 2"
        )));
    }
    let n = T::from_f64(count as f64);
    let mut mean = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s = *s + (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s = *s / n);
    let eps = T::from_f64(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut normalized = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for ((xr, nr), yr) in x
        .data()
        .chunks_exact(c)
        .zip(normalized.data_mut().chunks_exact_mut(c))
        .zip(y.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let xhat = (xr[ch] - mean[ch]) * inv_std[ch];
            nr[ch] = xhat;
            yr[ch] = p.gamma.data()[ch] * xhat + p.beta.data()[ch];
        }
    }
    Ok((
        y,
        BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

pub fn update_running<T: Real>(p: &mut BatchNormParams<T>, cache: &BatchNormCache<T>) {
    let mom = T::from_f64(BN_MOMENTUM);
    let rest = T::one() - mom;
    for (r, &m) in p.running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
        *r = mom * *r + rest * m;
    }
    for (r, &v) in p.running_var.data_mut().iter_mut().zip(&cache.batch_var) {
        *r = mom * *r + rest * v;
    }
}

/// Inference mode: standardizes with the running moments.
pub fn batchnorm_forward_eval<T: Real>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let c = channels_of(x, p)?;
    let eps = T::from_f64(BN_EPS);
    let scale: Vec<T> = (0..c)
        .map(|ch| p.gamma.data()[ch] / (p.running_var.data()[ch] + eps).sqrt())
        .collect();
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            row[ch] = (row[ch] - p.running_mean.data()[ch]) * scale[ch] + p.beta.data()[ch];
        }
    }
    Ok(y)
}

pub fn batchnorm_backward<T: Real>(
    p: &BatchNormParams<T>,
    cache: &BatchNormCache<T>,
    upstream: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let c = p.channels();
    if upstream.shape() != cache.normalized.shape() {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} vs batchnorm output {:?}",
            upstream.shape(),
            cache.normalized.shape()
        )));
    }
    let n = T::from_f64((upstream.len() / c) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (g, xh) in upstream
        .data()
        .chunks_exact(c)
        .zip(cache.normalized.data().chunks_exact(c))
    {
        for ch in 0..c {
            dgamma[ch] = dgamma[ch] + g[ch] * xh[ch];
            dbeta[ch] = dbeta[ch] + g[ch];
        }
    }
    // dx = gamma·inv_std/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
    let mut dx = Tensor::zeros(upstream.shape());
    for ((d, g), xh) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(upstream.data().chunks_exact(c))
        .zip(cache.normalized.data().chunks_exact(c))
    {
        for ch in 0..c {
            let k = p.gamma.data()[ch] * cache.inv_std[ch] / n;
            d[ch] = k * (n * g[ch] - dbeta[ch] - xh[ch] * dgamma[ch]);
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: Tensor::from_vec(&[c], dgamma)?,
        beta: Tensor::from_vec(&[c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut p = BatchNormParams::<f64>::new(2);
        p.beta = Tensor::from_vec(&[2], vec![0.25, -1.0]).unwrap();
        p.gamma = Tensor::from_vec(&[2], vec![3.0, 2.0]).unwrap();
        let x = Tensor::from_vec(&[1, 2, 1, 1, 2], vec![5.0, 1.0, 5.0, 2.0]).unwrap();
        let (y, _) = batchnorm_forward_train(&x, &p).unwrap();
        assert_eq!(y.data()[0], 0.25);
        assert_eq!(y.data()[2], 0.25);
    }

    #[test]
    fn standardizes_each_channel() {
        let p = BatchNormParams::<f64>::new(3);
        let data: Vec<f64> = (0..2 * 4 * 3)
            .map(|i| ((i * 37) % 11) as f64 * 0.7 - 2.0)
            .collect();
        let x = Tensor::from_vec(&[2, 2, 2, 1, 3], data).unwrap();
        let (y, _) = batchnorm_forward_train(&x, &p).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = y.data().iter().skip(ch).step_by(3).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4, "channel {ch}: {var}");
        }
    }

    #[test]
    fn single_value_is_degenerate() {
        let p = BatchNormParams::<f32>::new(1);
        assert!(matches!(
            batchnorm_forward_train(&Tensor::zeros(&[1, 1, 1, 1, 1]), &p),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn running_moments_drive_eval() {
        let mut p = BatchNormParams::<f64>::new(1);
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, cache) = batchnorm_forward_train(&x, &p).unwrap();
        update_running(&mut p, &cache);
        assert!((p.running_mean.data()[0] - 0.025).abs() < 1e-12);
        assert!((p.running_var.data()[0] - (0.99 + 0.01 * 1.25)).abs() < 1e-12);
        let y = batchnorm_forward_eval(&x, &p).unwrap();
        assert!(y.all_finite());
    }
}
