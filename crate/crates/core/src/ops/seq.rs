//! Sequential convolution kernels. Always compiled; the `parallel` feature
//! only changes which flavor the dispatchers in the parent module pick.

use crate::tensor::{BiasVec, Tensor3, Tensor4};

/// One output row of the same-padded convolution. `out_row` is the `W x Q`
/// slice for row `i`, initialized here with the bias.
pub(crate) fn conv_forward_row(
    input: &Tensor3,
    kernel: &Tensor4,
    bias: &BiasVec,
    i: usize,
    out_row: &mut [f64],
) {
    let (h, w, cin) = input.shape();
    let (kh, kw, _, q) = kernel.dims();
    let (ph, pw) = (kh / 2, kw / 2);

    for j in 0..w {
        out_row[j * q..(j + 1) * q].copy_from_slice(bias.values());
    }

    let u_lo = ph.saturating_sub(i);
    let u_hi = (h + ph - i).min(kh);
    for u in u_lo..u_hi {
        let in_row = input.row(i + u - ph);
        for j in 0..w {
            let v_lo = pw.saturating_sub(j);
            let v_hi = (w + pw - j).min(kw);
            let out_px = &mut out_row[j * q..(j + 1) * q];
            for v in v_lo..v_hi {
                let px = &in_row[(j + v - pw) * cin..(j + v - pw + 1) * cin];
                for (k, &x) in px.iter().enumerate() {
                    let taps = kernel.taps(u, v, k);
                    for (o, t) in out_px.iter_mut().zip(taps) {
                        *o += x * t;
                    }
                }
            }
        }
    }
}

/// One row of the input gradient. `gin_row` is the `W x C` slice for row `r`.
pub(crate) fn conv_backward_input_row(
    grad_out: &Tensor3,
    kernel: &Tensor4,
    r: usize,
    gin_row: &mut [f64],
) {
    let (h, w, q) = grad_out.shape();
    let (kh, kw, cin, _) = kernel.dims();
    let (ph, pw) = (kh / 2, kw / 2);

    gin_row.fill(0.0);
    let u_lo = (r + ph + 1).saturating_sub(h).min(kh);
    let u_hi = (r + ph + 1).min(kh);
    for u in u_lo..u_hi {
        let go_row = grad_out.row(r + ph - u);
        for c in 0..w {
            let v_lo = (c + pw + 1).saturating_sub(w).min(kw);
            let v_hi = (c + pw + 1).min(kw);
            let gin_px = &mut gin_row[c * cin..(c + 1) * cin];
            for v in v_lo..v_hi {
                let j = c + pw - v;
                let go_px = &go_row[j * q..(j + 1) * q];
                for (k, gk) in gin_px.iter_mut().enumerate() {
                    let taps = kernel.taps(u, v, k);
                    let mut acc = 0.0;
                    for (t, g) in taps.iter().zip(go_px) {
                        acc += t * g;
                    }
                    *gk += acc;
                }
            }
        }
    }
}

/// The kernel-gradient block for one spatial tap `(u, v)`: a contiguous
/// `C x Q` slice of the `Tensor4` gradient.
pub(crate) fn conv_backward_kernel_tap(
    input: &Tensor3,
    grad_out: &Tensor3,
    kh: usize,
    kw: usize,
    tap: usize,
    gk_tap: &mut [f64],
) {
    let (h, w, cin) = input.shape();
    let q = grad_out.channels();
    let (ph, pw) = (kh / 2, kw / 2);
    let (u, v) = (tap / kw, tap % kw);

    gk_tap.fill(0.0);
    let i_lo = ph.saturating_sub(u);
    let i_hi = (h + ph).saturating_sub(u).min(h);
    let j_lo = pw.saturating_sub(v);
    let j_hi = (w + pw).saturating_sub(v).min(w);
    for i in i_lo..i_hi {
        let in_row = input.row(i + u - ph);
        let go_row = grad_out.row(i);
        for j in j_lo..j_hi {
            let px = &in_row[(j + v - pw) * cin..(j + v - pw + 1) * cin];
            let go_px = &go_row[j * q..(j + 1) * q];
            for (k, &x) in px.iter().enumerate() {
                let dst = &mut gk_tap[k * q..(k + 1) * q];
                for (d, g) in dst.iter_mut().zip(go_px) {
                    *d += x * g;
                }
            }
        }
    }
}

pub(crate) fn bias_grad(grad_out: &Tensor3) -> BiasVec {
    let (h, w, q) = grad_out.shape();
    let mut gb = vec![0.0; q];
    for r in 0..h {
        let row = grad_out.row(r);
        for j in 0..w {
            for (b, g) in gb.iter_mut().zip(&row[j * q..(j + 1) * q]) {
                *b += g;
            }
        }
    }
    BiasVec::new(gb)
}

/// Sequential same-padded convolution. Preconditions are validated by the
/// dispatcher in the parent module.
pub fn conv2d_same(input: &Tensor3, kernel: &Tensor4, bias: &BiasVec) -> Tensor3 {
    let (h, w, _) = input.shape();
    let q = kernel.out_channels();
    let mut out = Tensor3::zeros(h, w, q);
    for i in 0..h {
        conv_forward_row(input, kernel, bias, i, out.row_mut(i));
    }
    out
}

/// Sequential gradients of `conv2d_same`.
pub fn conv2d_backward(
    input: &Tensor3,
    kernel: &Tensor4,
    grad_out: &Tensor3,
) -> (Tensor3, Tensor4, BiasVec) {
    let (h, w, cin) = input.shape();
    let (kh, kw, _, q) = kernel.dims();

    let mut gin = Tensor3::zeros(h, w, cin);
    for r in 0..h {
        conv_backward_input_row(grad_out, kernel, r, gin.row_mut(r));
    }

    let mut gkernel = Tensor4::zeros(kh, kw, cin, q).expect("kernel dims validated");
    for tap in 0..kh * kw {
        let block = &mut gkernel.data_mut()[tap * cin * q..(tap + 1) * cin * q];
        conv_backward_kernel_tap(input, grad_out, kh, kw, tap, block);
    }

    (gin, gkernel, bias_grad(grad_out))
}
