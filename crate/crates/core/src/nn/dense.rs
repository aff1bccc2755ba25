use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T = f32> {
    /// `(in_features, out_features)`
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> DenseParams<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        DenseParams {
            weights: Tensor::zeros(&[in_features, out_features]),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn batch_of<T: Real>(x: &Tensor<T>, p: &DenseParams<T>) -> Result<usize> {
    match *x.shape() {
        [b, f] if f == p.in_features() => Ok(b),
        _ => Err(Error::ShapeMismatch(format!(
            "dense layer expects (batch, {}), got {:?}",
            p.in_features(),
            x.shape()
        ))),
    }
}

/// `y = x W + b` for `x: (batch, in)`.
pub fn dense_forward<T: Real>(x: &Tensor<T>, p: &DenseParams<T>) -> Result<Tensor<T>> {
    let batch = batch_of(x, p)?;
    let (nin, nout) = (p.in_features(), p.out_features());
    let mut y = Tensor::zeros(&[batch, nout]);
    for row in y.data_mut().chunks_exact_mut(nout) {
        row.copy_from_slice(p.bias.data());
    }
    matmul(
        batch,
        nin,
        nout,
        x.data(),
        p.weights.data(),
        T::one(),
        y.data_mut(),
    );
    Ok(y)
}

pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    p: &DenseParams<T>,
    upstream: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let batch = batch_of(x, p)?;
    let (nin, nout) = (p.in_features(), p.out_features());
    if upstream.shape() != [batch, nout] {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} does not match output ({batch}, {nout})",
            upstream.shape()
        )));
    }
    let mut gw = Tensor::zeros(&[nin, nout]);
    matmul_at_b(
        nin,
        batch,
        nout,
        x.data(),
        upstream.data(),
        T::zero(),
        gw.data_mut(),
    );
    let mut gb = Tensor::zeros(&[nout]);
    for row in upstream.data().chunks_exact(nout) {
        for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    let mut gx = Tensor::zeros(&[batch, nin]);
    matmul_a_bt(
        batch,
        nout,
        nin,
        upstream.data(),
        p.weights.data(),
        T::zero(),
        gx.data_mut(),
    );
    Ok(DenseGrads {
        input: gx,
        weights: gw,
        bias: gb,
    })
}

/// `(b, d, h, w, c)` → `(b, d·h·w·c)`; the data is untouched.
pub fn flatten<T: Real>(x: Tensor<T>) -> Result<Tensor<T>> {
    let batch = *x
        .shape()
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty shape".into()))?;
    let features = x.len() / batch.max(1);
    x.reshape(&[batch, features])
}

pub fn unflatten<T: Real>(x: Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    x.reshape(shape)
}
