//! Dense `(C, D, H, W)` feature tensor.

use alloc::vec;
use alloc::vec::Vec;

use crate::vol::Volume;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, d: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            d,
            h,
            w,
            data: vec![0.0; c * d * h * w],
        }
    }

    pub fn from_volume(v: &Volume) -> Self {
        let [d, h, w] = v.dims();
        Tensor {
            c: v.channels(),
            d,
            h,
            w,
            data: v.voxels().to_vec(),
        }
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.d + z) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, z, y, x)]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.c == other.c && self.d == other.d && self.h == other.h && self.w == other.w
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }
}
