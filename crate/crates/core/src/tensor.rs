//! Dense tensor storage.
//!
//! `Tensor3` holds images and feature maps as `H x W x C` in row-major
//! (row, col, channel) order. `Tensor4` holds convolution kernels as
//! `(kh, kw, in_channels, out_channels)`. All arithmetic is f64; the
//! checkpoint format stores f32 (see `checkpoint`).

use crate::error::{Error, Result};

/// A dense `H x W x C` array of f64, row-major by (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("tensor dims must be >= 1, got {h}x{w}x{c}")));
        }
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match {h}x{w}x{c}",
                data.len()
            )));
        }
        Ok(Tensor3 { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        debug_assert!(h >= 1 && w >= 1 && c >= 1);
        Tensor3 { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Tensor3 { h, w, c, data: vec![value; h * w * c] }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    data.push(f(r, col, ch));
                }
            }
        }
        Tensor3 { h, w, c, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn idx(&self, r: usize, col: usize, ch: usize) -> usize {
        debug_assert!(r < self.h && col < self.w && ch < self.c);
        (r * self.w + col) * self.c + ch
    }

    #[inline]
    pub fn get(&self, r: usize, col: usize, ch: usize) -> f64 {
        self.data[self.idx(r, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, col: usize, ch: usize, v: f64) {
        let i = self.idx(r, col, ch);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// One image row as a contiguous `W x C` slice.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        let start = r * self.w * self.c;
        &self.data[start..start + self.w * self.c]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let start = r * self.w * self.c;
        let len = self.w * self.c;
        &mut self.data[start..start + len]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Tensor3 {
        self.map(|v| a * v)
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "add: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor3 { h: self.h, w: self.w, c: self.c, data })
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// A convolution kernel: `(kh, kw, in_channels, out_channels)`, row-major in
/// that order so the `out_channels` axis is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    kh: usize,
    kw: usize,
    in_c: usize,
    out_c: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    /// Spatial kernel dims must be odd so same-padding is symmetric.
    pub fn new(kh: usize, kw: usize, in_c: usize, out_c: usize, data: Vec<f64>) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("kernel dims must be odd, got {kh}x{kw}")));
        }
        if kh == 0 || kw == 0 || in_c == 0 || out_c == 0 {
            return Err(Error::Shape(format!(
                "kernel dims must be >= 1, got {kh}x{kw}x{in_c}x{out_c}"
            )));
        }
        if data.len() != kh * kw * in_c * out_c {
            return Err(Error::Shape(format!(
                "kernel data length {} does not match {kh}x{kw}x{in_c}x{out_c}",
                data.len()
            )));
        }
        Ok(Tensor4 { kh, kw, in_c, out_c, data })
    }

    pub fn zeros(kh: usize, kw: usize, in_c: usize, out_c: usize) -> Result<Self> {
        Tensor4::new(kh, kw, in_c, out_c, vec![0.0; kh * kw * in_c * out_c])
    }

    #[inline]
    pub fn kh(&self) -> usize {
        self.kh
    }

    #[inline]
    pub fn kw(&self) -> usize {
        self.kw
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_c
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.kh, self.kw, self.in_c, self.out_c)
    }

    #[inline]
    pub fn idx(&self, u: usize, v: usize, k: usize, q: usize) -> usize {
        debug_assert!(u < self.kh && v < self.kw && k < self.in_c && q < self.out_c);
        ((u * self.kw + v) * self.in_c + k) * self.out_c + q
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize, k: usize, q: usize) -> f64 {
        self.data[self.idx(u, v, k, q)]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, k: usize, q: usize, val: f64) {
        let i = self.idx(u, v, k, q);
        self.data[i] = val;
    }

    /// The contiguous `out_channels` slice at tap `(u, v, k)`.
    #[inline]
    pub fn taps(&self, u: usize, v: usize, k: usize) -> &[f64] {
        let start = ((u * self.kw + v) * self.in_c + k) * self.out_c;
        &self.data[start..start + self.out_c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// One bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasVec {
    values: Vec<f64>,
}

impl BiasVec {
    pub fn new(values: Vec<f64>) -> Self {
        BiasVec { values }
    }

    pub fn zeros(out_c: usize) -> Self {
        BiasVec { values: vec![0.0; out_c] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Per-pixel class indices with a fixed palette size.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    num_classes: u8,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, num_classes: u8, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("label map dims must be >= 1, got {h}x{w}")));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
        }
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "label data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&b| b >= num_classes) {
            return Err(Error::Data(format!(
                "label byte {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabelMap { h, w, num_classes, data })
    }

    pub fn background(h: usize, w: usize, num_classes: u8) -> Self {
        LabelMap { h, w, num_classes, data: vec![0; h * w] }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        debug_assert!(r < self.h && c < self.w);
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        debug_assert!(v < self.num_classes);
        self.data[r * self.w + c] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Pixel coordinates whose label is in `classes`, in row-major scan order.
    pub fn pixels_of(&self, classes: &[u8]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.h {
            for c in 0..self.w {
                if classes.contains(&self.get(r, c)) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Expand to the one-hot `H x W x L` tensor.
    pub fn one_hot(&self) -> Tensor3 {
        let l = self.num_classes as usize;
        let mut t = Tensor3::zeros(self.h, self.w, l);
        for r in 0..self.h {
            for c in 0..self.w {
                t.set(r, c, self.get(r, c) as usize, 1.0);
            }
        }
        t
    }
}
