//! Linear and convolution kernels plus their adjoints.
//!
//! Every forward op has an `_accumulate` form that adds into an existing
//! output, which is how dense layers sum one contribution per source.
//! Activations are laid out `[batch, ...]`; linear ops treat everything past
//! the batch axis as one flat feature vector.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `out[b, j] = sum_i weight[j, i] * input[b, i] + bias[j]`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n_out, _] = weight.dims2("linear_forward")?;
    if bias.shape() != [n_out] {
        return Err(mismatch("linear_forward", weight, bias));
    }
    let batch = input.rows();
    let mut out = Tensor::from_fn(&[batch, n_out], |i| bias.data()[i % n_out])?;
    linear_accumulate(&mut out, input, weight)?;
    Ok(out)
}

/// `out += input * weight^T`.
pub fn linear_accumulate<T: Scalar>(
    out: &mut Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<()> {
    let [n_out, n_in] = weight.dims2("linear_forward")?;
    let batch = input.rows();
    if input.row_len() != n_in {
        return Err(mismatch("linear_forward", input, weight));
    }
    if out.rows() != batch || out.row_len() != n_out {
        return Err(mismatch("linear_forward", out, weight));
    }
    T::gemm(
        batch,
        n_in,
        n_out,
        T::one(),
        input.data(),
        (n_in, 1),
        weight.data(),
        (1, n_in),
        T::one(),
        out.data_mut(),
        (n_out, 1),
    );
    Ok(())
}

/// `grad_input += delta * weight`, the transpose-weight transport.
pub fn linear_input_grad_accumulate<T: Scalar>(
    grad_input: &mut Tensor<T>,
    delta: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<()> {
    let [n_out, n_in] = weight.dims2("linear_input_grad")?;
    let batch = delta.rows();
    if delta.row_len() != n_out {
        return Err(mismatch("linear_input_grad", delta, weight));
    }
    if grad_input.rows() != batch || grad_input.row_len() != n_in {
        return Err(mismatch("linear_input_grad", grad_input, weight));
    }
    T::gemm(
        batch,
        n_out,
        n_in,
        T::one(),
        delta.data(),
        (n_out, 1),
        weight.data(),
        (n_in, 1),
        T::one(),
        grad_input.data_mut(),
        (n_in, 1),
    );
    Ok(())
}

/// `grad_input += delta * feedback^T` where `feedback` is `[n_in, n_out]`.
pub fn linear_feedback_accumulate<T: Scalar>(
    grad_input: &mut Tensor<T>,
    delta: &Tensor<T>,
    feedback: &Tensor<T>,
) -> Result<()> {
    let [n_in, n_out] = feedback.dims2("linear_feedback")?;
    let batch = delta.rows();
    if delta.row_len() != n_out {
        return Err(mismatch("linear_feedback", delta, feedback));
    }
    if grad_input.rows() != batch || grad_input.row_len() != n_in {
        return Err(mismatch("linear_feedback", grad_input, feedback));
    }
    T::gemm(
        batch,
        n_out,
        n_in,
        T::one(),
        delta.data(),
        (n_out, 1),
        feedback.data(),
        (1, n_out),
        T::one(),
        grad_input.data_mut(),
        (n_in, 1),
    );
    Ok(())
}

/// `delta^T * input`, shaped like the weight `[n_out, n_in]`.
pub fn linear_weight_grad<T: Scalar>(delta: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let batch = delta.rows();
    if input.rows() != batch {
        return Err(mismatch("linear_weight_grad", delta, input));
    }
    let (n_out, n_in) = (delta.row_len(), input.row_len());
    let mut grad = Tensor::zeros(&[n_out, n_in])?;
    T::gemm(
        n_out,
        batch,
        n_in,
        T::one(),
        delta.data(),
        (1, n_out),
        input.data(),
        (n_in, 1),
        T::zero(),
        grad.data_mut(),
        (n_in, 1),
    );
    Ok(grad)
}

/// Sum over every axis except the feature axis at position 1.
///
/// For `[batch, n]` this is the column sum; for `[batch, c, h, w]` it is the
/// per-channel sum, i.e. the bias gradient of either layer kind.
pub fn bias_grad<T: Scalar>(delta: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = delta.shape();
    if shape.len() < 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "bias gradient needs a batch axis".into(),
        });
    }
    let features = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut out = vec![T::zero(); features];
    for (i, &v) in delta.data().iter().enumerate() {
        out[(i / inner) % features] += v;
    }
    Tensor::new(&[features], out)
}

/// Adds a per-feature bias along axis 1.
pub fn add_bias<T: Scalar>(out: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let shape = out.shape().to_vec();
    if shape.len() < 2 || bias.shape() != [shape[1]] {
        return Err(mismatch("add_bias", out, bias));
    }
    let features = shape[1];
    let inner: usize = shape[2..].iter().product();
    let b = bias.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b[(i / inner) % features];
    }
    Ok(())
}

struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

fn conv_geometry<T: Scalar>(
    op: &'static str,
    input_shape: &[usize],
    kernel: &Tensor<T>,
) -> Result<ConvGeom> {
    let [c_out, c_in, kh, kw] = kernel.dims4(op)?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidShape {
            shape: kernel.shape().to_vec(),
            reason: "kernel must be square with odd size".into(),
        });
    }
    let [batch, c, h, w] = match input_shape {
        &[a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(Error::InvalidShape {
                shape: input_shape.to_vec(),
                reason: format!("{op} expects a 4-d tensor"),
            })
        }
    };
    if c != c_in {
        return Err(Error::ShapeMismatch {
            op,
            left: input_shape.to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    Ok(ConvGeom {
        batch,
        c_in,
        c_out,
        h,
        w,
        k: kh,
    })
}

/// Unfolds one `[c, h, w]` image into `[c*k*k, h*w]` patch columns with zero
/// padding `k/2`.
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[ch * hw + sy as usize * w..ch * hw + (sy as usize + 1) * w];
                    for (x, out) in line.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *out = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back onto the image.
fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ch * hw + sy as usize * w;
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            img[base + sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1, same-padding cross-correlation plus per-channel bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = conv_geometry("conv2d_forward", input.shape(), kernel)?;
    if bias.shape() != [g.c_out] {
        return Err(mismatch("conv2d_forward", kernel, bias));
    }
    let mut out = Tensor::zeros(&[g.batch, g.c_out, g.h, g.w])?;
    conv2d_accumulate(&mut out, input, kernel)?;
    add_bias(&mut out, bias)?;
    Ok(out)
}

/// `out += conv(input, kernel)` without bias.
pub fn conv2d_accumulate<T: Scalar>(
    out: &mut Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<()> {
    let g = conv_geometry("conv2d_forward", input.shape(), kernel)?;
    if out.shape() != [g.batch, g.c_out, g.h, g.w] {
        return Err(mismatch("conv2d_forward", out, kernel));
    }
    let hw = g.h * g.w;
    let patch = g.c_in * g.k * g.k;
    let mut cols = vec![T::zero(); patch * hw];
    for b in 0..g.batch {
        let img = &input.data()[b * g.c_in * hw..(b + 1) * g.c_in * hw];
        im2col(img, g.c_in, g.h, g.w, g.k, &mut cols);
        let dst = &mut out.data_mut()[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        T::gemm(
            g.c_out,
            patch,
            hw,
            T::one(),
            kernel.data(),
            (patch, 1),
            &cols,
            (hw, 1),
            T::one(),
            dst,
            (hw, 1),
        );
    }
    Ok(())
}

/// `grad_input += conv^T(delta, kernel)`, the adjoint of [`conv2d_accumulate`]
/// with respect to its input.
pub fn conv2d_input_grad_accumulate<T: Scalar>(
    grad_input: &mut Tensor<T>,
    delta: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<()> {
    let g = conv_geometry("conv2d_input_grad", grad_input.shape(), kernel)?;
    if delta.shape() != [g.batch, g.c_out, g.h, g.w] {
        return Err(mismatch("conv2d_input_grad", delta, kernel));
    }
    let hw = g.h * g.w;
    let patch = g.c_in * g.k * g.k;
    let mut cols = vec![T::zero(); patch * hw];
    for b in 0..g.batch {
        let d = &delta.data()[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        T::gemm(
            patch,
            g.c_out,
            hw,
            T::one(),
            kernel.data(),
            (1, patch),
            d,
            (hw, 1),
            T::zero(),
            &mut cols,
            (hw, 1),
        );
        let img = &mut grad_input.data_mut()[b * g.c_in * hw..(b + 1) * g.c_in * hw];
        col2im_add(&cols, g.c_in, g.h, g.w, g.k, img);
    }
    Ok(())
}

/// Kernel gradient `sum_b delta_b * cols_b^T`, shaped like `kernel_shape`.
pub fn conv2d_weight_grad<T: Scalar>(
    delta: &Tensor<T>,
    input: &Tensor<T>,
    kernel_shape: &[usize],
) -> Result<Tensor<T>> {
    let template = Tensor::<T>::zeros(kernel_shape)?;
    let g = conv_geometry("conv2d_weight_grad", input.shape(), &template)?;
    if delta.shape() != [g.batch, g.c_out, g.h, g.w] {
        return Err(mismatch("conv2d_weight_grad", delta, input));
    }
    let hw = g.h * g.w;
    let patch = g.c_in * g.k * g.k;
    let mut cols = vec![T::zero(); patch * hw];
    let mut grad = template;
    for b in 0..g.batch {
        let img = &input.data()[b * g.c_in * hw..(b + 1) * g.c_in * hw];
        im2col(img, g.c_in, g.h, g.w, g.k, &mut cols);
        let d = &delta.data()[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        T::gemm(
            g.c_out,
            hw,
            patch,
            T::one(),
            d,
            (hw, 1),
            &cols,
            (1, hw),
            T::one(),
            grad.data_mut(),
            (patch, 1),
        );
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        RngStream::new(seed).normal(shape, 1.0).unwrap()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    // Independent naive oracles.
    fn naive_linear(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (batch, n_in) = (x.shape()[0], x.shape()[1]);
        let n_out = w.shape()[0];
        let mut out = vec![0.0; batch * n_out];
        for r in 0..batch {
            for j in 0..n_out {
                let mut s = b.data()[j];
                for i in 0..n_in {
                    s += w.data()[j * n_in + i] * x.data()[r * n_in + i];
                }
                out[r * n_out + j] = s;
            }
        }
        out
    }

    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
        let [n, c, h, w] = x.dims4("t").unwrap();
        let [o, _, kh, kw] = k.dims4("t").unwrap();
        let mut out = vec![0.0; n * o * h * w];
        for b in 0..n {
            for oc in 0..o {
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = bias.data()[oc];
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    s += k.data()[((oc * c + ic) * kh + ky) * kw + kx]
                                        * x.data()[((b * c + ic) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        out[((b * o + oc) * h + y) * w + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn linear_identity_and_hand_values() {
        let x = Tensor::<f64>::from_f64(&[1, 2], &[1., 2.]).unwrap();
        let eye = Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        let zero = Tensor::zeros(&[2]).unwrap();
        assert_eq!(linear_forward(&x, &eye, &zero).unwrap().data(), &[1., 2.]);

        let x = Tensor::<f64>::from_f64(&[1, 2], &[1., 1.]).unwrap();
        let w = Tensor::from_f64(&[1, 2], &[2., 3.]).unwrap();
        let b = Tensor::from_f64(&[1], &[5.]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[10.]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let x = rand_tensor(&[4, 7], 1);
        let w = rand_tensor(&[5, 7], 2);
        let b = rand_tensor(&[5], 3);
        let out = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(out.shape(), &[4, 5]);
        for (a, e) in out.data().iter().zip(naive_linear(&x, &w, &b)) {
            assert!(rel_close(*a, e, 1e-12), "{a} vs {e}");
        }
    }

    #[test]
    fn linear_mismatch_names_both_shapes() {
        let x = rand_tensor(&[4, 6], 1);
        let w = rand_tensor(&[5, 7], 2);
        let b = rand_tensor(&[5], 3);
        let msg = linear_forward(&x, &w, &b).unwrap_err().to_string();
        assert!(msg.contains("[4, 6]") && msg.contains("[5, 7]"), "{msg}");
    }

    #[test]
    fn linear_adjoints_match_naive() {
        let delta = rand_tensor(&[3, 4], 5);
        let w = rand_tensor(&[4, 6], 6);
        let x = rand_tensor(&[3, 6], 7);
        let mut gi = Tensor::zeros(&[3, 6]).unwrap();
        linear_input_grad_accumulate(&mut gi, &delta, &w).unwrap();
        let wt = w.transpose().unwrap();
        let mut gf = Tensor::zeros(&[3, 6]).unwrap();
        linear_feedback_accumulate(&mut gf, &delta, &wt).unwrap();
        let gw = linear_weight_grad(&delta, &x).unwrap();
        for r in 0..3 {
            for i in 0..6 {
                let e: f64 = (0..4).map(|j| delta.data()[r * 4 + j] * w.data()[j * 6 + i]).sum();
                assert!(rel_close(gi.data()[r * 6 + i], e, 1e-12));
                assert!(rel_close(gf.data()[r * 6 + i], e, 1e-12));
            }
        }
        for j in 0..4 {
            for i in 0..6 {
                let e: f64 = (0..3).map(|r| delta.data()[r * 4 + j] * x.data()[r * 6 + i]).sum();
                assert!(rel_close(gw.data()[j * 6 + i], e, 1e-12));
            }
        }
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros(&[2, 3, 4, 4]).unwrap();
        let k = rand_tensor(&[2, 3, 3, 3], 1);
        let b = Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap();
        let out = conv2d_forward(&x, &k, &b).unwrap();
        assert_eq!(out.shape(), &[2, 2, 4, 4]);
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, if (i / 16) % 2 == 0 { 0.5 } else { -1.5 });
        }
    }

    #[test]
    fn conv_center_delta_is_identity() {
        let x = rand_tensor(&[1, 1, 3, 3], 4);
        let mut k = Tensor::<f64>::zeros(&[1, 1, 3, 3]).unwrap();
        k.data_mut()[4] = 1.0;
        let out = conv2d_forward(&x, &k, &Tensor::zeros(&[1]).unwrap()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let x = rand_tensor(&[2, 3, 5, 5], 8);
        let k = rand_tensor(&[4, 3, 3, 3], 9);
        let b = rand_tensor(&[4], 10);
        let out = conv2d_forward(&x, &k, &b).unwrap();
        for (a, e) in out.data().iter().zip(naive_conv(&x, &k, &b)) {
            assert!(rel_close(*a, e, 1e-12), "{a} vs {e}");
        }
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let x = rand_tensor(&[1, 2, 4, 4], 1);
        let k = rand_tensor(&[3, 3, 3, 3], 2);
        let b = rand_tensor(&[3], 3);
        assert!(matches!(
            conv2d_forward(&x, &k, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_adjoints_satisfy_dot_product_identity() {
        // <conv(x, k), d> = <x, conv^T(d, k)> = <k, dW(d, x)>
        let x = rand_tensor(&[2, 3, 5, 4], 11);
        let k = rand_tensor(&[4, 3, 3, 3], 12);
        let d = rand_tensor(&[2, 4, 5, 4], 13);
        let mut y = Tensor::zeros(&[2, 4, 5, 4]).unwrap();
        conv2d_accumulate(&mut y, &x, &k).unwrap();
        let lhs = y.dot(&d).unwrap();
        let mut gx = Tensor::zeros(&[2, 3, 5, 4]).unwrap();
        conv2d_input_grad_accumulate(&mut gx, &d, &k).unwrap();
        let gk = conv2d_weight_grad(&d, &x, k.shape()).unwrap();
        assert!(rel_close(lhs, x.dot(&gx).unwrap(), 1e-12));
        assert!(rel_close(lhs, k.dot(&gk).unwrap(), 1e-12));
    }

    #[test]
    fn bias_grad_sums_per_feature() {
        let d = Tensor::<f64>::from_fn(&[2, 3, 1, 2], |i| i as f64).unwrap();
        // channel c collects indices {2c, 2c+1, 6+2c, 7+2c}
        assert_eq!(bias_grad(&d).unwrap().data(), &[14., 22., 30.]);
    }
}
