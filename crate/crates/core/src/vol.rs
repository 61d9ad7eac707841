//! Voxel volumes, axis-aligned 3D boxes, IoU, and resolution scaling.
//!
//! Conventions used throughout the crate:
//!
//! - Volume dims are `(D, H, W)` indexed `(z, y, x)`; the voxel buffer is
//!   channel-major, then z-major/y/x within each channel.
//! - Boxes are half-open in voxel coordinates: voxel `v` is inside iff
//!   `z0 <= v_z < z1` (and likewise for y, x). Coordinates are floats so the
//!   same type carries integer-aligned annotation boxes and regressed boxes.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::mathutil;

/// Foreground class count used by the stock dataset and configs.
pub const DEFAULT_CLASS_COUNT: usize = 5;

/// Stock class names, in class-id order.
pub const CLASS_NAMES: [&str; DEFAULT_CLASS_COUNT] =
    ["bottle", "handgun", "binocular", "glockframe", "ipod"];

/// How a volume came to be.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Generated directly (or scanned); not a composite.
    RealSynthetic,
    /// Produced by projecting a signature into another volume.
    TipComposited,
}

/// Which X-ray energy the intensities represent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnergyTag {
    Low,
    High,
    Dual,
}

/// Identity and provenance carried alongside the voxel payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VolumeMeta {
    pub source_id: String,
    pub provenance: Provenance,
    pub energy: EnergyTag,
}

impl Default for VolumeMeta {
    fn default() -> Self {
        VolumeMeta {
            source_id: String::new(),
            provenance: Provenance::RealSynthetic,
            energy: EnergyTag::Low,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum VolumeError {
    #[error("volume dims must all be >= 1, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("voxel buffer length {got} != channels*D*H*W = {want}")]
    BufferLength { got: usize, want: usize },
    #[error("channel count must be >= 1")]
    NoChannels,
    #[error("voxel intensities must be finite")]
    NonFinite,
}

/// Multi-channel voxel grid with intensity values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    channels: usize,
    voxels: Vec<f32>,
    pub meta: VolumeMeta,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        channels: usize,
        voxels: Vec<f32>,
        meta: VolumeMeta,
    ) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::EmptyDims(dims));
        }
        if channels == 0 {
            return Err(VolumeError::NoChannels);
        }
        let want = channels * dims[0] * dims[1] * dims[2];
        if voxels.len() != want {
            return Err(VolumeError::BufferLength {
                got: voxels.len(),
                want,
            });
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite);
        }
        Ok(Volume {
            dims,
            channels,
            voxels,
            meta,
        })
    }

    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Volume {
            dims,
            channels,
            voxels: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
            meta: VolumeMeta::default(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, z, y, x);
        self.voxels[i] = v;
    }

    /// One channel's `D*H*W` slab.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxel_count();
        &self.voxels[c * n..(c + 1) * n]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum BoxError {
    #[error("box corners must be ordered with positive extent on every axis")]
    Degenerate,
    #[error("box coordinates must be finite")]
    NonFinite,
}

/// Axis-aligned half-open 3D box in voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub z0: f64,
    pub y0: f64,
    pub x0: f64,
    pub z1: f64,
    pub y1: f64,
    pub x1: f64,
}

impl Box3D {
    pub fn new(z0: f64, y0: f64, x0: f64, z1: f64, y1: f64, x1: f64) -> Result<Self, BoxError> {
        let b = Box3D {
            z0,
            y0,
            x0,
            z1,
            y1,
            x1,
        };
        if [z0, y0, x0, z1, y1, x1].iter().any(|c| !c.is_finite()) {
            return Err(BoxError::NonFinite);
        }
        if !(z1 > z0 && y1 > y0 && x1 > x0) {
            return Err(BoxError::Degenerate);
        }
        Ok(b)
    }

    /// Integer-cornered box; panics on out-of-order corners.
    pub fn from_voxels(z0: usize, y0: usize, x0: usize, z1: usize, y1: usize, x1: usize) -> Self {
        Box3D::new(
            z0 as f64, y0 as f64, x0 as f64, z1 as f64, y1 as f64, x1 as f64,
        )
        .expect("voxel box must have positive extent")
    }

    pub fn volume(&self) -> f64 {
        (self.z1 - self.z0) * (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.z0 + self.z1),
            0.5 * (self.y0 + self.y1),
            0.5 * (self.x0 + self.x1),
        ]
    }

    pub fn sides(&self) -> [f64; 3] {
        [self.z1 - self.z0, self.y1 - self.y0, self.x1 - self.x0]
    }

    /// Clips to `[0, dims)`; `None` if nothing is left.
    pub fn clip(&self, dims: [usize; 3]) -> Option<Box3D> {
        let z0 = self.z0.max(0.0);
        let y0 = self.y0.max(0.0);
        let x0 = self.x0.max(0.0);
        let z1 = self.z1.min(dims[0] as f64);
        let y1 = self.y1.min(dims[1] as f64);
        let x1 = self.x1.min(dims[2] as f64);
        Box3D::new(z0, y0, x0, z1, y1, x1).ok()
    }

    /// Corner-wise comparison key; total order for deterministic tie-breaks.
    pub fn lex_key(&self) -> [u64; 6] {
        [
            self.z0.to_bits(),
            self.y0.to_bits(),
            self.x0.to_bits(),
            self.z1.to_bits(),
            self.y1.to_bits(),
            self.x1.to_bits(),
        ]
    }
}

/// Intersection-over-union on box volume. Symmetric, 0 when disjoint,
/// 1 for identical boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let iz = (a.z1.min(b.z1) - a.z0.max(b.z0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let inter = iz * iy * ix;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.volume() + b.volume() - inter)
}

/// Ground-truth instance: box plus class.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub box3: Box3D,
    pub class_id: usize,
    pub instance_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("scaling factor must be in 1..=4, got {0}")]
pub struct ScaleError(pub u32);

/// Integer down-scaling factor applied to all three axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleConfig {
    s: u32,
}

impl ScaleConfig {
    pub fn new(s: u32) -> Result<Self, ScaleError> {
        if (1..=4).contains(&s) {
            Ok(ScaleConfig { s })
        } else {
            Err(ScaleError(s))
        }
    }

    pub fn factor(&self) -> u32 {
        self.s
    }
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig { s: 3 }
    }
}

/// Block-mean down-sampling: each output voxel averages an `s^3` block,
/// edge blocks averaging over whatever voxels exist. Output dims are
/// `ceil(dim / s)` per axis.
pub fn resample(v: &Volume, cfg: ScaleConfig) -> Volume {
    let s = cfg.factor() as usize;
    if s == 1 {
        return v.clone();
    }
    let [d, h, w] = v.dims();
    let od = mathutil::div_ceil(d, s);
    let oh = mathutil::div_ceil(h, s);
    let ow = mathutil::div_ceil(w, s);
    let mut out = Volume::zeros([od, oh, ow], v.channels());
    out.meta = v.meta.clone();
    for c in 0..v.channels() {
        for oz in 0..od {
            let z_end = (oz * s + s).min(d);
            for oy in 0..oh {
                let y_end = (oy * s + s).min(h);
                for ox in 0..ow {
                    let x_end = (ox * s + s).min(w);
                    let mut sum = 0.0f64;
                    let mut n = 0u32;
                    for z in oz * s..z_end {
                        for y in oy * s..y_end {
                            for x in ox * s..x_end {
                                sum += v.get(c, z, y, x) as f64;
                                n += 1;
                            }
                        }
                    }
                    out.set(c, oz, oy, ox, (sum / n as f64) as f32);
                }
            }
        }
    }
    out
}

/// Maps boxes into the coordinate frame of `resample`'s output: coordinates
/// divided by `s`, clamped to the scaled extent of `orig_dims`, and held to a
/// minimum side of one voxel.
pub fn rescale_boxes(boxes: &[Box3D], cfg: ScaleConfig, orig_dims: [usize; 3]) -> Vec<Box3D> {
    let s = cfg.factor() as f64;
    let ext = [
        mathutil::div_ceil(orig_dims[0], cfg.factor() as usize) as f64,
        mathutil::div_ceil(orig_dims[1], cfg.factor() as usize) as f64,
        mathutil::div_ceil(orig_dims[2], cfg.factor() as usize) as f64,
    ];
    boxes
        .iter()
        .map(|b| {
            let lo = [b.z0 / s, b.y0 / s, b.x0 / s];
            let hi = [b.z1 / s, b.y1 / s, b.x1 / s];
            let mut out_lo = [0.0; 3];
            let mut out_hi = [0.0; 3];
            for a in 0..3 {
                let mut l = lo[a].clamp(0.0, ext[a]);
                let mut u = hi[a].clamp(0.0, ext[a]);
                if u - l < 1.0 {
                    // grow symmetrically to one voxel, staying inside the extent
                    let c = 0.5 * (l + u);
                    l = (c - 0.5).max(0.0);
                    u = l + 1.0;
                    if u > ext[a] {
                        u = ext[a];
                        l = (u - 1.0).max(0.0);
                    }
                }
                out_lo[a] = l;
                out_hi[a] = u;
            }
            Box3D::new(
                out_lo[0], out_lo[1], out_lo[2], out_hi[0], out_hi[1], out_hi[2],
            )
            .expect("rescaled box has positive extent")
        })
        .collect()
}

/// Zero-pads at the high end of each axis so every dim is divisible by `m`.
/// The returned offset is always zero: padding never shifts the origin, so
/// boxes stay valid as-is.
pub fn pad_to_multiple(v: &Volume, m: usize) -> (Volume, [usize; 3]) {
    assert!(m >= 1);
    let [d, h, w] = v.dims();
    let pd = mathutil::div_ceil(d, m) * m;
    let ph = mathutil::div_ceil(h, m) * m;
    let pw = mathutil::div_ceil(w, m) * m;
    if [pd, ph, pw] == v.dims() {
        return (v.clone(), [0, 0, 0]);
    }
    let mut out = Volume::zeros([pd, ph, pw], v.channels());
    out.meta = v.meta.clone();
    for c in 0..v.channels() {
        for z in 0..d {
            for y in 0..h {
                let src = v.index(c, z, y, 0);
                let dst = out.index(c, z, y, 0);
                out.voxels[dst..dst + w].copy_from_slice(&v.voxels[src..src + w]);
            }
        }
    }
    (out, [0, 0, 0])
}
