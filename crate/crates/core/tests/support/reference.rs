//! Nested-loop reference versions of the layer kernels, and per-case checks
//! of the optimized kernels against them.
//!
//! With small integer inputs every partial sum is exactly representable in
//! f64, so the optimized kernels must match the loops bit for bit whatever
//! their summation order. Real-valued f32 runs are held to 1e-5 absolute.

use nodule3d::nn::{self, ConvParams, DenseParams};
use nodule3d::optim::{nesterov_step, OptimizerState};
use nodule3d::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: u64 = 120;
pub const F32_TOLERANCE: f64 = 1e-5;
pub const NESTEROV_TOLERANCE: f64 = 1e-12;

pub type Check = Result<(), String>;

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn eq<T: PartialEq>(a: &T, b: &T, what: &str) -> Check {
    ensure(a == b, || format!("{what} differs from the reference"))
}

fn close(reference: &Tensor<f64>, got: &Tensor<f32>, what: &str) -> Check {
    let d = max_abs_diff(reference, got);
    ensure(d <= F32_TOLERANCE, || format!("{what}: max abs diff {d:e}"))
}

fn ints(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.gen_range(-4i32..=4) as f64).collect(),
    )
    .unwrap()
}

fn reals(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
}

struct Shape5 {
    b: usize,
    d: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl Shape5 {
    fn of(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Shape5 {
            b: s[0],
            d: s[1],
            h: s[2],
            w: s[3],
            c: s[4],
        }
    }

    fn at(&self, b: usize, z: usize, y: usize, x: usize, c: usize) -> usize {
        (((b * self.d + z) * self.h + y) * self.w + x) * self.c + c
    }
}

struct ConvRef {
    out: Tensor<f64>,
    gx: Tensor<f64>,
    gw: Tensor<f64>,
    gb: Tensor<f64>,
}

fn conv_reference(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &Tensor<f64>,
    g: &Tensor<f64>,
) -> ConvRef {
    let xs = Shape5::of(x);
    let k = w.shape()[0];
    let cout = w.shape()[4];
    let os = Shape5 {
        b: xs.b,
        d: xs.d - k + 1,
        h: xs.h - k + 1,
        w: xs.w - k + 1,
        c: cout,
    };
    let widx = |kd: usize, kh: usize, kw: usize, i: usize, o: usize| {
        (((kd * k + kh) * k + kw) * xs.c + i) * cout + o
    };
    let mut out = vec![0.0; os.b * os.d * os.h * os.w * cout];
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    for b in 0..os.b {
        for z in 0..os.d {
            for y in 0..os.h {
                for xx in 0..os.w {
                    for o in 0..cout {
                        let oi = os.at(b, z, y, xx, o);
                        let gv = g.data()[oi];
                        let mut acc = bias.data()[o];
                        gb[o] += gv;
                        for kd in 0..k {
                            for kh in 0..k {
                                for kw in 0..k {
                                    for i in 0..xs.c {
                                        let xi = xs.at(b, z + kd, y + kh, xx + kw, i);
                                        let wi = widx(kd, kh, kw, i, o);
                                        acc += x.data()[xi] * w.data()[wi];
                                        gw[wi] += x.data()[xi] * gv;
                                        gx[xi] += w.data()[wi] * gv;
                                    }
                                }
                            }
                        }
                        out[oi] = acc;
                    }
                }
            }
        }
    }
    ConvRef {
        out: Tensor::from_vec(&[os.b, os.d, os.h, os.w, cout], out).unwrap(),
        gx: Tensor::from_vec(x.shape(), gx).unwrap(),
        gw: Tensor::from_vec(w.shape(), gw).unwrap(),
        gb: Tensor::from_vec(&[cout], gb).unwrap(),
    }
}

fn random_conv_case(
    rng: &mut ChaCha8Rng,
    values: fn(&[usize], &mut ChaCha8Rng) -> Tensor<f64>,
    max_extra: usize,
) -> (Tensor<f64>, ConvParams<f64>, Tensor<f64>) {
    let k = rng.gen_range(1..=3);
    let [d, h, w] = std::array::from_fn(|_| k + rng.gen_range(0..=max_extra));
    let (b, cin, cout) = (
        rng.gen_range(1..=2),
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
    );
    let x = values(&[b, d, h, w, cin], rng);
    let p = ConvParams {
        weights: values(&[k, k, k, cin, cout], rng),
        bias: values(&[cout], rng),
    };
    let g = values(&[b, d - k + 1, h - k + 1, w - k + 1, cout], rng);
    (x, p, g)
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, &y)| (x - y as f64).abs())
        .fold(0.0, f64::max)
}

fn to_f32(t: &Tensor<f64>) -> Tensor<f32> {
    t.cast()
}

fn pool_reference(x: &Tensor<f64>, pool: usize, g: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let xs = Shape5::of(x);
    let os = Shape5 {
        b: xs.b,
        d: xs.d / pool,
        h: xs.h / pool,
        w: xs.w / pool,
        c: xs.c,
    };
    let mut out = vec![0.0; os.b * os.d * os.h * os.w * os.c];
    let mut gx = vec![0.0; x.len()];
    for b in 0..os.b {
        for z in 0..os.d {
            for y in 0..os.h {
                for xx in 0..os.w {
                    for c in 0..os.c {
                        let mut best = None::<(f64, usize)>;
                        for pz in 0..pool {
                            for py in 0..pool {
                                for px in 0..pool {
                                    let i =
                                        xs.at(b, z * pool + pz, y * pool + py, xx * pool + px, c);
                                    let v = x.data()[i];
                                    if best.map_or(true, |(bv, _)| v > bv) {
                                        best = Some((v, i));
                                    }
                                }
                            }
                        }
                        let (v, i) = best.unwrap();
                        let oi = os.at(b, z, y, xx, c);
                        out[oi] = v;
                        gx[i] += g.data()[oi];
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(&[os.b, os.d, os.h, os.w, os.c], out).unwrap(),
        Tensor::from_vec(x.shape(), gx).unwrap(),
    )
}

fn dense_reference(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &Tensor<f64>,
    g: &Tensor<f64>,
) -> [Tensor<f64>; 4] {
    let (b, nin, nout) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut y = vec![0.0; b * nout];
    let mut gx = vec![0.0; b * nin];
    let mut gw = vec![0.0; nin * nout];
    let mut gb = vec![0.0; nout];
    for s in 0..b {
        for o in 0..nout {
            let mut acc = bias.data()[o];
            for i in 0..nin {
                acc += xd[s * nin + i] * wd[i * nout + o];
                gw[i * nout + o] += xd[s * nin + i] * gd[s * nout + o];
                gx[s * nin + i] += wd[i * nout + o] * gd[s * nout + o];
            }
            y[s * nout + o] = acc;
            gb[o] += gd[s * nout + o];
        }
    }
    [
        Tensor::from_vec(&[b, nout], y).unwrap(),
        Tensor::from_vec(&[b, nin], gx).unwrap(),
        Tensor::from_vec(&[nin, nout], gw).unwrap(),
        Tensor::from_vec(&[nout], gb).unwrap(),
    ]
}

/// Exact f64 conv forward and backward on random integer data.
pub fn conv_exact(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, p, g) = random_conv_case(&mut rng, ints, 4);
    conv_exact_on(&x, &p, &g)
}

pub fn conv_exact_on(x: &Tensor<f64>, p: &ConvParams<f64>, g: &Tensor<f64>) -> Check {
    let r = conv_reference(x, &p.weights, &p.bias, g);
    eq(
        &nn::conv3d_forward(x, p).map_err(|e| e.to_string())?,
        &r.out,
        "conv forward",
    )?;
    let grads = nn::conv3d_backward(x, p, g, true).map_err(|e| e.to_string())?;
    eq(&grads.input.unwrap(), &r.gx, "conv input gradient")?;
    eq(&grads.weights, &r.gw, "conv weight gradient")?;
    eq(&grads.bias, &r.gb, "conv bias gradient")
}

/// Layer-sized conv, wide enough that the GEMM kernel tiles and the slice
/// loop both engage.
pub fn conv_exact_large() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = ints(&[2, 14, 13, 12, 8], &mut rng);
    let p = ConvParams {
        weights: ints(&[3, 3, 3, 8, 16], &mut rng),
        bias: ints(&[16], &mut rng),
    };
    let g = ints(&[2, 12, 11, 10, 16], &mut rng);
    conv_exact_on(&x, &p, &g)
}

/// f32 conv on real-valued data against the f64 loops.
pub fn conv_f32(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (x, p, g) = random_conv_case(&mut rng, reals, 4);
    let r = conv_reference(&x, &p.weights, &p.bias, &g);
    let p32 = ConvParams {
        weights: to_f32(&p.weights),
        bias: to_f32(&p.bias),
    };
    let (x32, g32) = (to_f32(&x), to_f32(&g));
    close(
        &r.out,
        &nn::conv3d_forward(&x32, &p32).map_err(|e| e.to_string())?,
        "conv forward",
    )?;
    let grads = nn::conv3d_backward(&x32, &p32, &g32, true).map_err(|e| e.to_string())?;
    close(&r.gx, &grads.input.unwrap(), "conv input gradient")?;
    close(&r.gw, &grads.weights, "conv weight gradient")?;
    close(&r.gb, &grads.bias, "conv bias gradient")
}

/// Max pooling, exact on integer data (ties are common) and in f32.
pub fn maxpool(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let pool = rng.gen_range(1..=3);
    let blocks: [usize; 3] = std::array::from_fn(|_| rng.gen_range(1..=3));
    let (b, c) = (rng.gen_range(1..=2), rng.gen_range(1..=4));
    let x = ints(
        &[b, blocks[0] * pool, blocks[1] * pool, blocks[2] * pool, c],
        &mut rng,
    );
    let g = ints(&[b, blocks[0], blocks[1], blocks[2], c], &mut rng);
    let (out, gx) = pool_reference(&x, pool, &g);
    let fwd = nn::maxpool3d_forward(&x, pool).map_err(|e| e.to_string())?;
    eq(&fwd.output, &out, "pool forward")?;
    eq(
        &nn::maxpool3d_backward(x.shape(), &fwd.argmax, &g).map_err(|e| e.to_string())?,
        &gx,
        "pool gradient",
    )?;

    let (x32, g32) = (to_f32(&reals(x.shape(), &mut rng)), to_f32(&g));
    let (out, gx) = pool_reference(&x32.cast(), pool, &g);
    let fwd = nn::maxpool3d_forward(&x32, pool).map_err(|e| e.to_string())?;
    close(&out, &fwd.output, "f32 pool forward")?;
    close(
        &gx,
        &nn::maxpool3d_backward(x32.shape(), &fwd.argmax, &g32).map_err(|e| e.to_string())?,
        "f32 pool gradient",
    )
}

/// Dense layer, exact on integer data and within tolerance in f32.
pub fn dense(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
    let (b, nin, nout) = (
        rng.gen_range(1..=4),
        rng.gen_range(1..=40),
        rng.gen_range(1..=40),
    );
    let x = ints(&[b, nin], &mut rng);
    let p = DenseParams {
        weights: ints(&[nin, nout], &mut rng),
        bias: ints(&[nout], &mut rng),
    };
    let g = ints(&[b, nout], &mut rng);
    let [y, gx, gw, gb] = dense_reference(&x, &p.weights, &p.bias, &g);
    eq(
        &nn::dense_forward(&x, &p).map_err(|e| e.to_string())?,
        &y,
        "dense forward",
    )?;
    let grads = nn::dense_backward(&x, &p, &g).map_err(|e| e.to_string())?;
    eq(
        &(grads.input, grads.weights, grads.bias),
        &(gx, gw, gb),
        "dense gradients",
    )?;

    let x = reals(&[b, nin], &mut rng);
    let p = DenseParams {
        weights: reals(&[nin, nout], &mut rng),
        bias: reals(&[nout], &mut rng),
    };
    let g = reals(&[b, nout], &mut rng);
    let [y, gx, gw, gb] = dense_reference(&x, &p.weights, &p.bias, &g);
    let p32 = DenseParams {
        weights: to_f32(&p.weights),
        bias: to_f32(&p.bias),
    };
    let (x32, g32) = (to_f32(&x), to_f32(&g));
    close(
        &y,
        &nn::dense_forward(&x32, &p32).map_err(|e| e.to_string())?,
        "f32 dense forward",
    )?;
    let grads = nn::dense_backward(&x32, &p32, &g32).map_err(|e| e.to_string())?;
    close(&gx, &grads.input, "f32 dense input gradient")?;
    close(&gw, &grads.weights, "f32 dense weight gradient")?;
    close(&gb, &grads.bias, "f32 dense bias gradient")
}

/// Runs `steps` optimizer steps on ½θ² against the scalar recurrence
/// v ← μv − ηg, θ ← θ + μv − ηg. Returns the largest deviation.
pub fn nesterov_recurrence(steps: usize) -> Result<f64, String> {
    let (lr, mu) = (0.003f64, 0.9f64);
    let mut theta = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
    let mut state = OptimizerState::new(lr, mu, &[&theta]);
    let (mut t_ref, mut v_ref) = (1.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for step in 0..steps {
        let g = Tensor::from_vec(&[1], vec![theta.data()[0]]).unwrap();
        nesterov_step(&mut [&mut theta], &[g], &mut state).map_err(|e| e.to_string())?;
        let grad = t_ref;
        v_ref = mu * v_ref - lr * grad;
        t_ref = t_ref + mu * v_ref - lr * grad;
        let d = (theta.data()[0] - t_ref)
            .abs()
            .max((state.velocity[0].data()[0] - v_ref).abs());
        worst = worst.max(d);
        ensure(d <= NESTEROV_TOLERANCE, || {
            format!("step {step}: deviation {d:e}")
        })?;
    }
    ensure(t_ref > 0.0 && t_ref < 1.0, || {
        "reference did not descend".into()
    })?;
    Ok(worst)
}

/// Zero learning rate leaves parameters untouched for arbitrary gradients.
pub fn zero_lr_identity(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = reals(&[3, 4], &mut rng);
    let before = p.clone();
    let mut state = OptimizerState::new(0.0, 0.9, &[&p]);
    for _ in 0..5 {
        let g = reals(&[3, 4], &mut rng);
        nesterov_step(&mut [&mut p], &[g], &mut state).map_err(|e| e.to_string())?;
        eq(&p, &before, "parameters after a zero-lr step")?;
    }
    Ok(())
}
