//! Valid (unpadded), stride-1 3-D convolution on channels-last tensors.
//!
//! Both passes lower to GEMM over one output depth slice at a time: the
//! im2col matrix of a slice has one row per output (h, w) position and one
//! column per `(kd, kh, kw, in_ch)` tap, which is exactly the row order of
//! the `(k, k, k, in, out)` weight tensor viewed as a `(k³·in) × out` matrix.
//! Slices are independent, so they run in parallel while every output value
//! keeps a fixed reduction order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_at_b, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `(k, k, k, in_ch, out_ch)`
    pub weights: Tensor<T>,
    /// `(out_ch)`
    pub bias: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(kernel: usize, in_ch: usize, out_ch: usize) -> Self {
        ConvParams {
            weights: Tensor::zeros(&[kernel, kernel, kernel, in_ch, out_ch]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[4]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

pub fn conv_param_count(kernel: usize, in_ch: usize, out_ch: usize) -> usize {
    kernel.pow(3) * in_ch * out_ch + out_ch
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    /// Present only when requested.
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn output_dims(spatial: [usize; 3], k: usize) -> Result<[usize; 3]> {
    if spatial.iter().any(|&s| s < k) {
        return Err(Error::ShapeMismatch(format!(
            "spatial dims {spatial:?} are smaller than kernel {k}"
        )));
    }
    Ok(spatial.map(|s| s - k + 1))
}

fn check_params<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<(usize, [usize; 3], usize)> {
    let (b, spatial, cin) = x.dims5()?;
    let ws = p.weights.shape();
    if ws.len() != 5 || ws[0] != ws[1] || ws[1] != ws[2] {
        return Err(Error::ShapeMismatch(format!(
            "weights must be (k,k,k,in,out), got {ws:?}"
        )));
    }
    if cin != p.in_channels() {
        return Err(Error::ShapeMismatch(format!(
            "input has {cin} channels, kernel expects {}",
            p.in_channels()
        )));
    }
    if p.bias.shape() != [p.out_channels()] {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {:?} does not match {} output channels",
            p.bias.shape(),
            p.out_channels()
        )));
    }
    Ok((b, spatial, cin))
}

/// Fills `col` with the im2col rows of output depth slice `od` of sample `b`.
#[allow(clippy::too_many_arguments)]
fn im2col_slice<T: Real>(
    x: &[T],
    spatial: [usize; 3],
    cin: usize,
    k: usize,
    b: usize,
    od: usize,
    out_hw: [usize; 2],
    col: &mut Vec<T>,
) {
    let [d, h, w] = spatial;
    let [oh, ow] = out_hw;
    let seg = k * cin;
    let row_len = k * k * seg;
    col.clear();
    col.resize(oh * ow * row_len, T::zero());
    for y in 0..oh {
        for xw in 0..ow {
            let row = &mut col[(y * ow + xw) * row_len..][..row_len];
            for kd in 0..k {
                for kh in 0..k {
                    let src = (((b * d + od + kd) * h + y + kh) * w + xw) * cin;
                    let dst = (kd * k + kh) * seg;
                    row[dst..dst + seg].copy_from_slice(&x[src..src + seg]);
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (batch, spatial, cin) = check_params(x, p)?;
    let k = p.kernel();
    let cout = p.out_channels();
    let [od, oh, ow] = output_dims(spatial, k)?;
    let taps = k * k * k * cin;

    let mut out = Tensor::zeros(&[batch, od, oh, ow, cout]);
    let slice_len = oh * ow * cout;
    let bias = p.bias.data();
    let wmat = p.weights.data();
    let xd = x.data();

    out.data_mut()
        .par_chunks_mut(slice_len)
        .enumerate()
        .for_each_init(Vec::new, |col, (s, out_slice)| {
            let (b, z) = (s / od, s % od);
            im2col_slice(xd, spatial, cin, k, b, z, [oh, ow], col);
            for row in out_slice.chunks_exact_mut(cout) {
                row.copy_from_slice(bias);
            }
            matmul(oh * ow, taps, cout, col, wmat, T::one(), out_slice);
        });
    Ok(out)
}

/// Gradients of [`conv3d_forward`] given the loss gradient w.r.t. its output.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    upstream: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (batch, spatial, cin) = check_params(x, p)?;
    let k = p.kernel();
    let cout = p.out_channels();
    let [od, oh, ow] = output_dims(spatial, k)?;
    if upstream.shape() != [batch, od, oh, ow, cout] {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} does not match output {:?}",
            upstream.shape(),
            [batch, od, oh, ow, cout]
        )));
    }
    let taps = k * k * k * cin;
    let slice_len = oh * ow * cout;
    let xd = x.data();
    let gd = upstream.data();

    // weight gradient: one partial per output slice, summed in slice order
    let partials: Vec<Vec<T>> = (0..batch * od)
        .into_par_iter()
        .map_init(Vec::new, |col, s| {
            let (b, z) = (s / od, s % od);
            im2col_slice(xd, spatial, cin, k, b, z, [oh, ow], col);
            let mut part = vec![T::zero(); taps * cout];
            matmul_at_b(
                taps,
                oh * ow,
                cout,
                col,
                &gd[s * slice_len..][..slice_len],
                T::zero(),
                &mut part,
            );
            part
        })
        .collect();
    let mut grad_w = vec![T::zero(); taps * cout];
    for part in &partials {
        for (acc, v) in grad_w.iter_mut().zip(part) {
            *acc = *acc + *v;
        }
    }
    drop(partials);

    let mut grad_b = vec![T::zero(); cout];
    for row in gd.chunks_exact(cout) {
        for (acc, v) in grad_b.iter_mut().zip(row) {
            *acc = *acc + *v;
        }
    }

    let input = if need_input_grad {
        Some(conv3d_input_grad(upstream, p, spatial)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input,
        weights: Tensor::from_vec(p.weights.shape(), grad_w)?,
        bias: Tensor::from_vec(&[cout], grad_b)?,
    })
}

/// dL/dx is the full correlation of the upstream gradient with the kernel
/// flipped in space and transposed in channels, i.e. a valid convolution of
/// the gradient zero-padded by `k - 1` on every side.
fn conv3d_input_grad<T: Real>(
    upstream: &Tensor<T>,
    p: &ConvParams<T>,
    in_spatial: [usize; 3],
) -> Result<Tensor<T>> {
    let (batch, [od, oh, ow], cout) = upstream.dims5()?;
    let k = p.kernel();
    let cin = p.in_channels();
    let pad = k - 1;
    let [pd, ph, pw] = [od + 2 * pad, oh + 2 * pad, ow + 2 * pad];

    let mut padded = Tensor::zeros(&[batch, pd, ph, pw, cout]);
    {
        let src = upstream.data();
        let dst = padded.data_mut();
        let row = ow * cout;
        for b in 0..batch {
            for z in 0..od {
                for y in 0..oh {
                    let s = ((b * od + z) * oh + y) * row;
                    let d = (((b * pd + z + pad) * ph + y + pad) * pw + pad) * cout;
                    dst[d..d + row].copy_from_slice(&src[s..s + row]);
                }
            }
        }
    }

    let mut flipped = ConvParams::zeros(k, cout, cin);
    {
        let w = p.weights.data();
        let f = flipped.weights.data_mut();
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src_tap = ((kd * k + kh) * k + kw) * cin * cout;
                    let dst_tap =
                        (((k - 1 - kd) * k + (k - 1 - kh)) * k + (k - 1 - kw)) * cout * cin;
                    for ci in 0..cin {
                        for o in 0..cout {
                            f[dst_tap + o * cin + ci] = w[src_tap + ci * cout + o];
                        }
                    }
                }
            }
        }
    }

    let grad = conv3d_forward(&padded, &flipped)?;
    debug_assert_eq!(
        grad.shape(),
        [batch, in_spatial[0], in_spatial[1], in_spatial[2], cin]
    );
    Ok(grad)
}
