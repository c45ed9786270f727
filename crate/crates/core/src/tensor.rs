//! Dense `[C][W][H]` tensors and the pad/crop pair used to fit the network grid.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A channel-major 3D tensor. `W` plays the role of image height and `H` of
/// image width for the convolution kernels; both are treated symmetrically.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    pub c: usize,
    pub w: usize,
    pub h: usize,
    pub data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(c: usize, w: usize, h: usize) -> Self {
        Tensor {
            c,
            w,
            h,
            data: vec![R::zero(); c * w * h],
        }
    }

    pub fn from_vec(c: usize, w: usize, h: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), c * w * h, "tensor data length mismatch");
        Tensor { c, w, h, data }
    }

    pub fn plane(&self) -> usize {
        self.w * self.h
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.c == other.c && self.w == other.w && self.h == other.h
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.w, self.h)
    }

    pub fn channel(&self, c: usize) -> &[R] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [R] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            w: self.w,
            h: self.h,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Replicates the last column/row on the high side of each horizontal axis.
    pub fn pad_replicate(&self, w: usize, h: usize) -> Result<Self> {
        if w < self.w || h < self.h {
            return Err(Error::Validation(format!(
                "padded size {w}x{h} is smaller than raw size {}x{}",
                self.w, self.h
            )));
        }
        if self.w == 0 || self.h == 0 {
            return Err(Error::Validation("cannot pad an empty tensor".into()));
        }
        let mut out = Tensor::zeros(self.c, w, h);
        for c in 0..self.c {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for i in 0..w {
                let si = i.min(self.w - 1);
                for j in 0..h {
                    dst[i * h + j] = src[si * self.h + j.min(self.h - 1)];
                }
            }
        }
        Ok(out)
    }

    /// Keeps the low `w x h` corner; the inverse of [`Tensor::pad_replicate`].
    pub fn crop(&self, w: usize, h: usize) -> Result<Self> {
        if w > self.w || h > self.h {
            return Err(Error::Validation(format!(
                "crop size {w}x{h} exceeds tensor size {}x{}",
                self.w, self.h
            )));
        }
        let mut out = Tensor::zeros(self.c, w, h);
        for c in 0..self.c {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for i in 0..w {
                dst[i * h..(i + 1) * h].copy_from_slice(&src[i * self.h..i * self.h + h]);
            }
        }
        Ok(out)
    }
}
