//! Rayon-parallel convolution kernels. Work splits over output rows
//! (forward, input gradient) and over kernel taps (kernel gradient), so
//! every f64 summation happens in the same order as the sequential path
//! and results are bitwise identical for any worker count.

use rayon::prelude::*;

use super::seq;
use crate::tensor::{BiasVec, Tensor3, Tensor4};

/// Parallel same-padded convolution; one rayon task per output row.
pub fn conv2d_same(input: &Tensor3, kernel: &Tensor4, bias: &BiasVec) -> Tensor3 {
    let (h, w, _) = input.shape();
    let q = kernel.out_channels();
    let mut out = Tensor3::zeros(h, w, q);
    out.data_mut()
        .par_chunks_mut(w * q)
        .enumerate()
        .for_each(|(i, row)| seq::conv_forward_row(input, kernel, bias, i, row));
    out
}

/// Parallel gradients of `conv2d_same`.
pub fn conv2d_backward(
    input: &Tensor3,
    kernel: &Tensor4,
    grad_out: &Tensor3,
) -> (Tensor3, Tensor4, BiasVec) {
    let (h, w, cin) = input.shape();
    let (kh, kw, _, q) = kernel.dims();

    let mut gin = Tensor3::zeros(h, w, cin);
    gin.data_mut()
        .par_chunks_mut(w * cin)
        .enumerate()
        .for_each(|(r, row)| seq::conv_backward_input_row(grad_out, kernel, r, row));

    let mut gkernel = Tensor4::zeros(kh, kw, cin, q).expect("kernel dims validated");
    gkernel
        .data_mut()
        .par_chunks_mut(cin * q)
        .enumerate()
        .for_each(|(tap, block)| {
            seq::conv_backward_kernel_tap(input, grad_out, kh, kw, tap, block)
        });

    (gin, gkernel, seq::bias_grad(grad_out))
}
