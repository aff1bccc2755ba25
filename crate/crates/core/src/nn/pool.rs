use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Output of a max-pool forward pass. `argmax[i]` is the flat input index
/// that produced output element `i`.
#[derive(Clone, Debug)]
pub struct PoolOutput<T = f32> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Max over disjoint `pool³` blocks (stride = pool). Ties go to the first
/// element in depth, height, width order.
pub fn maxpool3d_forward<T: Real>(x: &Tensor<T>, pool: usize) -> Result<PoolOutput<T>> {
    let (batch, [d, h, w], c) = x.dims5()?;
    if pool == 0 || [d, h, w].iter().any(|s| s % pool != 0) {
        return Err(Error::ShapeMismatch(format!(
            "spatial dims {:?} are not divisible by pool size {pool}",
            [d, h, w]
        )));
    }
    let [od, oh, ow] = [d / pool, h / pool, w / pool];
    let xd = x.data();
    let n = batch * od * oh * ow * c;
    let mut out = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for b in 0..batch {
        for z in 0..od {
            for y in 0..oh {
                for xw in 0..ow {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for pz in 0..pool {
                            for py in 0..pool {
                                for px in 0..pool {
                                    let idx = ((((b * d + z * pool + pz) * h + y * pool + py) * w)
                                        + xw * pool
                                        + px)
                                        * c
                                        + ch;
                                    if best_idx == usize::MAX || xd[idx] > best {
                                        best = xd[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::from_vec(&[batch, od, oh, ow, c], out)?,
        argmax,
    })
}

/// Routes each upstream gradient to the input position that won the max.
pub fn maxpool3d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if upstream.len() != argmax.len() {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {} elements, pool output had {}",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&i, &u) in argmax.iter().zip(upstream.data()) {
        g[i] = g[i] + u;
    }
    Ok(grad)
}
