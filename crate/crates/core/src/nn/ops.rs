//! Layer kernels. Every routine here runs in a fixed loop order so results
//! are bit-identical between runs.

use crate::tensor::Tensor;

use super::Activation;

/// `out[b, i] = sum_j x[b, j] * w[i, j] + bias[i]`
pub(crate) fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (batch, n_in) = (x.shape()[0], x.shape()[1]);
    let n_out = weight.shape()[0];
    let mut out = vec![0.0; batch * n_out];
    for row in out.chunks_exact_mut(n_out) {
        row.copy_from_slice(bias.data());
    }
    // SAFETY: pointers and strides describe buffers of exactly the sizes
    // above (x: batch*n_in, weight read transposed: n_out*n_in, out: batch*n_out).
    unsafe {
        matrixmultiply::dgemm(
            batch,
            n_in,
            n_out,
            1.0,
            x.data().as_ptr(),
            n_in as isize,
            1,
            weight.data().as_ptr(),
            1,
            n_in as isize,
            1.0,
            out.as_mut_ptr(),
            n_out as isize,
            1,
        );
    }
    Tensor::new(vec![batch, n_out], out).expect("dense output shape")
}

/// Returns `(d_weight, d_bias, d_input)` given the gradient at the layer's
/// pre-activation.
pub(crate) fn dense_backward(
    x: &Tensor,
    weight: &Tensor,
    d_pre: &Tensor,
    need_input_grad: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (batch, n_in) = (x.shape()[0], x.shape()[1]);
    let n_out = weight.shape()[0];

    let mut dw = vec![0.0; n_out * n_in];
    // SAFETY: d_pre is batch*n_out read transposed, x is batch*n_in,
    // dw is n_out*n_in.
    unsafe {
        matrixmultiply::dgemm(
            n_out,
            batch,
            n_in,
            1.0,
            d_pre.data().as_ptr(),
            1,
            n_out as isize,
            x.data().as_ptr(),
            n_in as isize,
            1,
            0.0,
            dw.as_mut_ptr(),
            n_in as isize,
            1,
        );
    }

    let mut db = vec![0.0; n_out];
    for row in d_pre.data().chunks_exact(n_out) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }

    let dx = need_input_grad.then(|| {
        let mut dx = vec![0.0; batch * n_in];
        // SAFETY: d_pre is batch*n_out, weight is n_out*n_in, dx is batch*n_in.
        unsafe {
            matrixmultiply::dgemm(
                batch,
                n_out,
                n_in,
                1.0,
                d_pre.data().as_ptr(),
                n_out as isize,
                1,
                weight.data().as_ptr(),
                n_in as isize,
                1,
                0.0,
                dx.as_mut_ptr(),
                n_in as isize,
                1,
            );
        }
        Tensor::new(vec![batch, n_in], dx).expect("dense input grad shape")
    });

    (
        Tensor::new(vec![n_out, n_in], dw).expect("dense weight grad shape"),
        Tensor::new(vec![n_out], db).expect("dense bias grad shape"),
        dx,
    )
}

pub(crate) fn conv_output_dims(
    input_hw: [usize; 2],
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
) -> Option<[usize; 2]> {
    let mut out = [0; 2];
    for a in 0..2 {
        let padded = input_hw[a] + 2 * padding[a];
        if kernel[a] > padded || stride[a] == 0 {
            return None;
        }
        out[a] = (padded - kernel[a]) / stride[a] + 1;
    }
    Some(out)
}

/// Cross-correlation of `x` `[B, C_in, H, W]` with `weight` `[C_out, C_in, kh, kw]`.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: [usize; 2],
    padding: [usize; 2],
) -> Tensor {
    let [batch, c_in, h, w] = dims4(x.shape());
    let [c_out, _, kh, kw] = dims4(weight.shape());
    let [oh, ow] = conv_output_dims([h, w], [kh, kw], stride, padding).expect("validated conv dims");
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0; batch * c_out * oh * ow];

    for b in 0..batch {
        for o in 0..c_out {
            let plane = &mut out[(b * c_out + o) * oh * ow..(b * c_out + o + 1) * oh * ow];
            plane.fill(bias.data()[o]);
            for c in 0..c_in {
                let xin = &xd[(b * c_in + c) * h * w..(b * c_in + c + 1) * h * w];
                let kern = &wd[(o * c_in + c) * kh * kw..(o * c_in + c + 1) * kh * kw];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let Some(iy) = (oy * stride[0] + ky).checked_sub(padding[0]) else {
                                continue;
                            };
                            if iy >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let Some(ix) = (ox * stride[1] + kx).checked_sub(padding[1]) else {
                                    continue;
                                };
                                if ix >= w {
                                    continue;
                                }
                                acc += kern[ky * kw + kx] * xin[iy * w + ix];
                            }
                        }
                        plane[oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, c_out, oh, ow], out).expect("conv output shape")
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    d_pre: &Tensor,
    stride: [usize; 2],
    padding: [usize; 2],
    need_input_grad: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let [batch, c_in, h, w] = dims4(x.shape());
    let [c_out, _, kh, kw] = dims4(weight.shape());
    let [_, _, oh, ow] = dims4(d_pre.shape());
    let xd = x.data();
    let wd = weight.data();
    let gd = d_pre.data();

    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; c_out];
    let mut dx = if need_input_grad { vec![0.0; x.len()] } else { Vec::new() };

    for b in 0..batch {
        for o in 0..c_out {
            let gplane = &gd[(b * c_out + o) * oh * ow..(b * c_out + o + 1) * oh * ow];
            db[o] += gplane.iter().sum::<f64>();
            for c in 0..c_in {
                let xoff = (b * c_in + c) * h * w;
                let koff = (o * c_in + c) * kh * kw;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gplane[oy * ow + ox];
                        for ky in 0..kh {
                            let Some(iy) = (oy * stride[0] + ky).checked_sub(padding[0]) else {
                                continue;
                            };
                            if iy >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let Some(ix) = (ox * stride[1] + kx).checked_sub(padding[1]) else {
                                    continue;
                                };
                                if ix >= w {
                                    continue;
                                }
                                let xi = xoff + iy * w + ix;
                                let ki = koff + ky * kw + kx;
                                dw[ki] += g * xd[xi];
                                if need_input_grad {
                                    dx[xi] += g * wd[ki];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    (
        Tensor::new(weight.shape().to_vec(), dw).expect("conv weight grad shape"),
        Tensor::new(vec![c_out], db).expect("conv bias grad shape"),
        need_input_grad.then(|| Tensor::new(x.shape().to_vec(), dx).expect("conv input grad shape")),
    )
}

/// Max pooling without padding. Also returns, for each output element, the
/// flat input index of the (first) maximum.
pub(crate) fn maxpool_forward(x: &Tensor, size: [usize; 2], stride: [usize; 2]) -> (Tensor, Vec<usize>) {
    let [batch, c, h, w] = dims4(x.shape());
    let oh = (h - size[0]) / stride[0] + 1;
    let ow = (w - size[1]) / stride[1] + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut argmax = Vec::with_capacity(batch * c * oh * ow);
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride[0] * w + ox * stride[1];
                for ky in 0..size[0] {
                    for kx in 0..size[1] {
                        let idx = base + (oy * stride[0] + ky) * w + ox * stride[1] + kx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    (Tensor::new(vec![batch, c, oh, ow], out).expect("pool output shape"), argmax)
}

pub(crate) fn maxpool_backward(input_shape: &[usize], argmax: &[usize], d_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (&src, &g) in argmax.iter().zip(d_out.data()) {
        dxd[src] += g;
    }
    dx
}

pub(crate) fn activate(pre: &Tensor, activation: Activation) -> Tensor {
    match activation {
        Activation::Identity => pre.clone(),
        Activation::Relu => pre.map(|v| v.max(0.0)),
        Activation::Tanh => pre.map(f64::tanh),
        Activation::Softmax => softmax_rows(pre),
    }
}

/// Multiplies the upstream gradient by the activation derivative. Softmax is
/// handled together with the loss and never reaches here.
pub(crate) fn activation_backward(pre: &Tensor, post: &Tensor, d_post: Tensor, activation: Activation) -> Tensor {
    let mut d = d_post;
    match activation {
        Activation::Identity => {}
        Activation::Relu => {
            for (g, &z) in d.data_mut().iter_mut().zip(pre.data()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::Tanh => {
            for (g, &a) in d.data_mut().iter_mut().zip(post.data()) {
                *g *= 1.0 - a * a;
            }
        }
        Activation::Softmax => unreachable!("softmax is fused with the loss"),
    }
    d
}

fn softmax_rows(pre: &Tensor) -> Tensor {
    let cols = pre.row_len();
    let mut out = pre.clone();
    for row in out.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    shape.try_into().expect("expected a 4-D tensor")
}
