//! Numeric kernels every layer is built from.
//!
//! Convolution forward/backward are the hot paths and come in two flavors:
//! [`seq`] is always compiled and [`par`] (rayon over output rows / kernel
//! taps) exists behind the `parallel` feature. The top-level functions here
//! dispatch to whichever is enabled; both produce bitwise-identical results
//! because per-row and per-tap summation order is fixed.
//!
//! The cheap elementwise and pooling ops are sequential everywhere.

pub mod seq;

#[cfg(feature = "parallel")]
pub mod par;

use crate::error::{Error, Result};
use crate::tensor::{BiasVec, Tensor3, Tensor4};

pub(crate) fn validate_conv(input: &Tensor3, kernel: &Tensor4, bias: &BiasVec) -> Result<()> {
    if kernel.in_channels() != input.channels() {
        return Err(Error::Config(format!(
            "conv channel mismatch: input has {} channels, kernel expects {}",
            input.channels(),
            kernel.in_channels()
        )));
    }
    if bias.len() != kernel.out_channels() {
        return Err(Error::Config(format!(
            "bias length {} does not match kernel out_channels {}",
            bias.len(),
            kernel.out_channels()
        )));
    }
    Ok(())
}

/// Same-padded cross-correlation: output spatial dims equal input dims,
/// zero padding of `(k-1)/2` per border, plus a per-output-channel bias.
pub fn conv2d_same(input: &Tensor3, kernel: &Tensor4, bias: &BiasVec) -> Result<Tensor3> {
    validate_conv(input, kernel, bias)?;
    #[cfg(feature = "parallel")]
    {
        Ok(par::conv2d_same(input, kernel, bias))
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(seq::conv2d_same(input, kernel, bias))
    }
}

/// Gradients of `conv2d_same` w.r.t. input, kernel, and bias given the
/// gradient at its output.
pub fn conv2d_backward(
    input: &Tensor3,
    kernel: &Tensor4,
    grad_out: &Tensor3,
) -> Result<(Tensor3, Tensor4, BiasVec)> {
    if grad_out.shape() != (input.height(), input.width(), kernel.out_channels()) {
        return Err(Error::Shape(format!(
            "conv backward: grad shape {:?} does not match output {:?}",
            grad_out.shape(),
            (input.height(), input.width(), kernel.out_channels())
        )));
    }
    if kernel.in_channels() != input.channels() {
        return Err(Error::Config(format!(
            "conv backward channel mismatch: input {} vs kernel {}",
            input.channels(),
            kernel.in_channels()
        )));
    }
    #[cfg(feature = "parallel")]
    {
        Ok(par::conv2d_backward(input, kernel, grad_out))
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(seq::conv2d_backward(input, kernel, grad_out))
    }
}

/// Elementwise hyperbolic tangent.
pub fn tanh_map(input: &Tensor3) -> Tensor3 {
    input.map(f64::tanh)
}

/// Non-overlapping 2x2 mean pooling per channel. A trailing odd row or
/// column is pooled over the elements actually present.
pub fn mean_pool2(input: &Tensor3) -> Tensor3 {
    pool2(input, |acc, v| acc + v, |acc, n| acc / n as f64, 0.0)
}

/// Non-overlapping 2x2 max pooling per channel; partial windows take the
/// max of the present elements.
pub fn max_pool2(input: &Tensor3) -> Tensor3 {
    pool2(input, f64::max, |acc, _| acc, f64::NEG_INFINITY)
}

fn pool2(
    input: &Tensor3,
    fold: impl Fn(f64, f64) -> f64,
    finish: impl Fn(f64, usize) -> f64,
    init: f64,
) -> Tensor3 {
    let (h, w, c) = input.shape();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    Tensor3::from_fn(oh, ow, c, |r, col, ch| {
        let mut acc = init;
        let mut n = 0;
        for dr in 0..2 {
            for dc in 0..2 {
                let (ir, ic) = (2 * r + dr, 2 * col + dc);
                if ir < h && ic < w {
                    acc = fold(acc, input.get(ir, ic, ch));
                    n += 1;
                }
            }
        }
        finish(acc, n)
    })
}

/// Nearest-neighbor 2x upsampling: each source element fills its 2x2 block.
pub fn upsample_nn2(input: &Tensor3) -> Tensor3 {
    let (h, w, c) = input.shape();
    Tensor3::from_fn(2 * h, 2 * w, c, |r, col, ch| input.get(r / 2, col / 2, ch))
}

/// Stack channels of equally-sized tensors in argument order.
pub fn concat_channels(parts: &[&Tensor3]) -> Result<Tensor3> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat_channels: empty part list".into()))?;
    let (h, w, _) = first.shape();
    let mut total_c = 0;
    for p in parts {
        if (p.height(), p.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "concat_channels: spatial mismatch {}x{} vs {h}x{w}",
                p.height(),
                p.width()
            )));
        }
        total_c += p.channels();
    }
    let mut out = Tensor3::zeros(h, w, total_c);
    for r in 0..h {
        let out_row = out.row_mut(r);
        for col in 0..w {
            let mut ch = 0;
            for p in parts {
                let pc = p.channels();
                let src = &p.row(r)[col * pc..(col + 1) * pc];
                out_row[col * total_c + ch..col * total_c + ch + pc].copy_from_slice(src);
                ch += pc;
            }
        }
    }
    Ok(out)
}

/// Per-pixel softmax over the channel axis, computed with max subtraction.
pub fn softmax_channels(input: &Tensor3) -> Tensor3 {
    let (h, w, c) = input.shape();
    debug_assert!(c >= 2);
    let mut out = input.clone();
    for r in 0..h {
        let row = out.row_mut(r);
        for col in 0..w {
            let px = &mut row[col * c..(col + 1) * c];
            let m = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in px.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in px.iter_mut() {
                *v /= sum;
            }
        }
    }
    out
}

/// Reverse column order per row and channel.
pub fn flip_horizontal(input: &Tensor3) -> Tensor3 {
    let (h, w, c) = input.shape();
    Tensor3::from_fn(h, w, c, |r, col, ch| input.get(r, w - 1 - col, ch))
}

/// Reverse column order of a label map.
pub fn flip_labels_horizontal(labels: &crate::tensor::LabelMap) -> crate::tensor::LabelMap {
    let (h, w) = (labels.height(), labels.width());
    let mut out = labels.clone();
    for r in 0..h {
        for c in 0..w {
            out.set(r, c, labels.get(r, w - 1 - c));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(h: usize, w: usize, c: usize, data: &[f64]) -> Tensor3 {
        Tensor3::new(h, w, c, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_product() {
        let input = t3(1, 1, 1, &[2.0]);
        let kernel = Tensor4::new(1, 1, 1, 1, vec![3.0]).unwrap();
        let out = conv2d_same(&input, &kernel, &BiasVec::zeros(1)).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn conv_all_ones_3x3() {
        let input = Tensor3::filled(3, 3, 1, 1.0);
        let kernel = Tensor4::new(3, 3, 1, 1, vec![1.0; 9]).unwrap();
        let out = conv2d_same(&input, &kernel, &BiasVec::zeros(1)).unwrap();
        assert_eq!(out.get(1, 1, 0), 9.0);
        for &(r, c) in &[(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.get(r, c, 0), 4.0);
        }
        for &(r, c) in &[(0, 1), (1, 0), (1, 2), (2, 1)] {
            assert_eq!(out.get(r, c, 0), 6.0);
        }
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let input = Tensor3::from_fn(4, 5, 2, |r, c, ch| (r * 31 + c * 7 + ch) as f64 * 0.1);
        let mut kernel = Tensor4::zeros(1, 1, 2, 2).unwrap();
        kernel.set(0, 0, 0, 0, 1.0);
        kernel.set(0, 0, 1, 1, 1.0);
        let out = conv2d_same(&input, &kernel, &BiasVec::zeros(2)).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor3::zeros(2, 2, 3);
        let kernel = Tensor4::zeros(3, 3, 2, 1).unwrap();
        let err = conv2d_same(&input, &kernel, &BiasVec::zeros(1));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn tanh_map_matches_reference_values() {
        let input = t3(1, 3, 1, &[0.0, 1.0, -1.0]);
        let out = tanh_map(&input);
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert!((out.get(0, 1, 0) - 0.7615941559557649).abs() < 1e-15);
        assert_eq!(out.get(0, 1, 0), -out.get(0, 2, 0));
    }

    #[test]
    fn mean_pool_2x2_block() {
        let input = t3(2, 2, 1, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mean_pool2(&input).data(), &[2.5]);
    }

    #[test]
    fn mean_pool_4x4_ramp() {
        let input = Tensor3::from_fn(4, 4, 1, |r, c, _| (r * 4 + c) as f64);
        let out = mean_pool2(&input);
        assert_eq!(out.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn mean_pool_constant_stays_constant() {
        let input = Tensor3::filled(6, 6, 2, 3.25);
        let out = mean_pool2(&input);
        assert!(out.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn mean_pool_partial_window_averages_present() {
        let input = t3(3, 1, 1, &[1.0, 3.0, 7.0]);
        let out = mean_pool2(&input);
        assert_eq!(out.shape(), (2, 1, 1));
        assert_eq!(out.data(), &[2.0, 7.0]);
    }

    #[test]
    fn max_pool_4x4_ramp() {
        let input = Tensor3::from_fn(4, 4, 1, |r, c, _| (r * 4 + c) as f64);
        let out = max_pool2(&input);
        assert_eq!(out.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn upsample_replicates_into_blocks() {
        let input = t3(2, 1, 1, &[5.0, -1.0]);
        let out = upsample_nn2(&input);
        assert_eq!(out.shape(), (4, 2, 1));
        assert_eq!(out.data(), &[5.0, 5.0, 5.0, 5.0, -1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn max_pool_of_upsample_is_identity() {
        let input = Tensor3::from_fn(3, 5, 2, |r, c, ch| (r as f64) - (c as f64) * 0.5 + ch as f64);
        assert_eq!(max_pool2(&upsample_nn2(&input)), input);
    }

    #[test]
    fn concat_stacks_in_order() {
        let a = Tensor3::filled(4, 4, 2, 1.0);
        let b = Tensor3::filled(4, 4, 3, 2.0);
        let out = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(out.shape(), (4, 4, 5));
        assert_eq!(out.get(2, 2, 1), 1.0);
        assert_eq!(out.get(2, 2, 2), 2.0);
        let single = concat_channels(&[&a]).unwrap();
        assert_eq!(single, a);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor3::zeros(4, 4, 1);
        let b = Tensor3::zeros(4, 3, 1);
        assert!(matches!(concat_channels(&[&a, &b]), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_uniform_logits() {
        let input = Tensor3::filled(2, 2, 4, 1.7);
        let out = softmax_channels(&input);
        for &v in out.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let input = t3(1, 1, 2, &[0.0, 1000.0]);
        let out = softmax_channels(&input);
        assert!(out.get(0, 0, 0) < 1e-300);
        assert!((out.get(0, 0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_reference_triplet() {
        let input = t3(1, 1, 3, &[1.0, 2.0, 3.0]);
        let out = softmax_channels(&input);
        assert!((out.get(0, 0, 0) - 0.09003057317038046).abs() < 1e-12);
        assert!((out.get(0, 0, 1) - 0.24472847105479767).abs() < 1e-12);
        assert!((out.get(0, 0, 2) - 0.6652409557748219).abs() < 1e-12);
    }

    #[test]
    fn flip_reverses_columns() {
        let input = t3(1, 2, 1, &[1.0, 2.0]);
        assert_eq!(flip_horizontal(&input).data(), &[2.0, 1.0]);
        let wide = Tensor3::from_fn(3, 7, 2, |r, c, ch| (r * 100 + c * 10 + ch) as f64);
        assert_eq!(flip_horizontal(&flip_horizontal(&wide)), wide);
    }

    #[test]
    fn flip_fixed_point_on_symmetric_input() {
        let sym = Tensor3::from_fn(2, 5, 1, |_, c, _| (c.min(4 - c)) as f64);
        assert_eq!(flip_horizontal(&sym), sym);
    }
}
