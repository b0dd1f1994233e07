//! Direct 2-D convolution with SAME padding, and the split forwards that
//! replace an `F1 x F2` kernel by a vertical `F1 x 1` kernel (strides
//! `[s, 1]`) followed by a horizontal `1 x F2` kernel (strides `[1, s]`).
//!
//! Convolution is correlation (no kernel flip). SAME padding on an axis of
//! extent `n` with kernel `f` and stride `s` produces `ceil(n / s)` outputs and
//! pads `max((ceil(n / s) - 1) * s + f - n, 0)` zeros in total, the smaller
//! half before.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::random;
use crate::tensor::{fold, Matrix, Precision, Shape4, Tensor4};

/// An `(h, w, c)` row-major activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidShape(format!("feature map {h}x{w}x{c} has an empty extent")));
        }
        if data.len() != h * w * c {
            return Err(Error::LengthMismatch {
                expected: h * w * c,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(FeatureMap { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        FeatureMap {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    /// Standard-normal entries drawn from `seed`.
    pub fn random(h: usize, w: usize, c: usize, seed: u64) -> Self {
        let data = random::normal_vec(&mut random::rng(seed), h * w * c);
        FeatureMap { h, w, c, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn to_precision(&self, p: Precision) -> FeatureMap {
        FeatureMap {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&x| p.round(x)).collect(),
        }
    }

    pub fn add(&self, other: &FeatureMap) -> Result<FeatureMap> {
        check_same_dims(self, other)?;
        Ok(FeatureMap {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }
}

fn check_same_dims(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "feature maps {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Output extent and leading pad for one axis under SAME padding.
pub fn same_padding(extent: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(extent);
    (out, total / 2)
}

/// Direct convolution of `x` with `w` under SAME padding.
pub fn conv2d(x: &FeatureMap, w: &Tensor4, stride_h: usize, stride_w: usize) -> Result<FeatureMap> {
    let s = w.shape();
    if x.c != s.i {
        return Err(Error::ChannelMismatch {
            expected: s.i,
            actual: x.c,
        });
    }
    if stride_h == 0 || stride_w == 0 {
        return Err(Error::InvalidParameter("stride must be at least 1".into()));
    }
    let (out_h, pad_top) = same_padding(x.h, s.f1, stride_h);
    let (out_w, pad_left) = same_padding(x.w, s.f2, stride_w);
    let mut data = vec![0.0; out_h * out_w * s.o];
    let kernel = w.data();

    data.par_chunks_mut(out_w * s.o).enumerate().for_each(|(oy, row)| {
        for ox in 0..out_w {
            let acc = &mut row[ox * s.o..(ox + 1) * s.o];
            for f1 in 0..s.f1 {
                let Some(iy) = (oy * stride_h + f1).checked_sub(pad_top).filter(|&y| y < x.h) else {
                    continue;
                };
                for f2 in 0..s.f2 {
                    let Some(ix) = (ox * stride_w + f2).checked_sub(pad_left).filter(|&v| v < x.w) else {
                        continue;
                    };
                    let pixel = &x.data[(iy * x.w + ix) * x.c..(iy * x.w + ix + 1) * x.c];
                    for (ch, &xv) in pixel.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let k = s.offset(f1, f2, ch, 0);
                        for (a, &wv) in acc.iter_mut().zip(&kernel[k..k + s.o]) {
                            *a += wv * xv;
                        }
                    }
                }
            }
        }
    });

    Ok(FeatureMap {
        h: out_h,
        w: out_w,
        c: s.o,
        data,
    })
}

/// Folds an unfolded factor pair `u` (`F1*I x r`) and `v` (`r x F2*O`) of a
/// kernel with `shape` into the vertical `(F1, 1, I, r)` and horizontal
/// `(1, F2, r, O)` kernels.
pub fn factor_kernels(u: &Matrix, v: &Matrix, shape: Shape4) -> Result<(Tensor4, Tensor4)> {
    let r = u.cols();
    if v.rows() != r {
        return Err(Error::ChainMismatch(format!(
            "left factor has {r} columns but right factor has {} rows",
            v.rows()
        )));
    }
    let vertical = fold(u, Shape4::new(shape.f1, 1, shape.i, r)?)?;
    let horizontal = fold(v, Shape4::new(1, shape.f2, r, shape.o)?)?;
    Ok((vertical, horizontal))
}

/// Vertical convolution with strides `[s, 1]` then horizontal with `[1, s]`.
pub fn forward_split(x: &FeatureMap, u: &Tensor4, v: &Tensor4, stride: usize) -> Result<FeatureMap> {
    let (us, vs) = (u.shape(), v.shape());
    if us.f2 != 1 || vs.f1 != 1 {
        return Err(Error::ChainMismatch(format!(
            "expected a vertical (F1, 1, I, r) and a horizontal (1, F2, r, O) kernel, got {us} and {vs}"
        )));
    }
    if us.o != vs.i {
        return Err(Error::ChainMismatch(format!(
            "vertical kernel emits {} channels but horizontal kernel expects {}",
            us.o, vs.i
        )));
    }
    if x.c != us.i {
        return Err(Error::ChainMismatch(format!(
            "input has {} channels but vertical kernel expects {}",
            x.c, us.i
        )));
    }
    let mid = conv2d(x, u, stride, 1)?;
    conv2d(&mid, v, 1, stride)
}

/// Sum of two split forwards: the right-shared path `(Uⁿ, V)` and the
/// left-shared path `(U, Vⁿ)`.
pub fn forward_dual(
    x: &FeatureMap,
    right: (&Tensor4, &Tensor4),
    left: (&Tensor4, &Tensor4),
    stride: usize,
) -> Result<FeatureMap> {
    let a = forward_split(x, right.0, right.1, stride)?;
    let b = forward_split(x, left.0, left.1, stride)?;
    a.add(&b)
}

/// L∞ distance between two maps of equal shape.
pub fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    check_same_dims(a, b)?;
    Ok(a.data.iter().zip(&b.data).fold(0.0, |m, (x, y)| m.max((x - y).abs())))
}
