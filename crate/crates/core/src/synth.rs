//! Procedural cluttered-bag volumes and signature projection.
//!
//! Bags are built from clipped Gaussian noise, benign clutter solids
//! (ellipsoids, cuboids, tubes), and five parametric foreground classes:
//!
//! - `bottle`: hollow cylinder with a solid base cap
//! - `handgun`: L-shaped cuboid union, bright
//! - `binocular`: two parallel cylinders joined by a bridge
//! - `glockframe`: L-shape whose intensity sits within one standard
//!   deviation of the clutter mean, so it only stands out by shape
//! - `ipod`: thin cuboid slab
//!
//! Projection composites an extracted signature into a target volume by
//! voxel-wise max under the signature mask, so no voxel ever gets darker.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::{apply_transform, TransformId};
use crate::rng::rng_from_seed;
use crate::vol::{
    Annotation, Box3D, EnergyTag, Provenance, Volume, VolumeMeta, DEFAULT_CLASS_COUNT,
};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid bag spec: {0}")]
    InvalidSpec(&'static str),
    #[error("could not place an instance of class {class_id} in {attempts} attempts")]
    PlacementFailed { class_id: usize, attempts: u32 },
    #[error("no voxel above threshold {tau} inside the seed box")]
    EmptyMask { tau: f32 },
    #[error("seed box exceeds the volume extent")]
    SeedBoxOutOfBounds,
    #[error("signature dims {sig:?} do not fit in target dims {target:?}")]
    SignatureTooLarge { sig: [usize; 3], target: [usize; 3] },
    #[error("signature has {sig} channels but target has {target}")]
    ChannelMismatch { sig: usize, target: usize },
    #[error("signature mask/voxel mismatch: {0}")]
    BadSignature(&'static str),
}

/// Tight masked sub-volume of an isolated object, ready for projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Signature {
    voxels: Volume,
    mask: Vec<bool>,
    class_id: usize,
    source_id: String,
}

impl Signature {
    pub fn new(
        voxels: Volume,
        mask: Vec<bool>,
        class_id: usize,
        source_id: String,
    ) -> Result<Self, SynthError> {
        if mask.len() != voxels.voxel_count() {
            return Err(SynthError::BadSignature("mask length != voxel grid"));
        }
        if !mask.iter().any(|&m| m) {
            return Err(SynthError::BadSignature("mask has no occupied voxel"));
        }
        for c in 0..voxels.channels() {
            let slab = voxels.channel(c);
            for (i, &m) in mask.iter().enumerate() {
                if !m && slab[i] != 0.0 {
                    return Err(SynthError::BadSignature("voxels outside mask must be 0"));
                }
            }
        }
        Ok(Signature {
            voxels,
            mask,
            class_id,
            source_id,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.voxels.dims()
    }

    pub fn voxels(&self) -> &Volume {
        &self.voxels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn occupied(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }
}

/// Recipe for one procedural bag volume.
#[derive(Clone, Debug, PartialEq)]
pub struct BagSpec {
    pub dims: [usize; 3],
    pub channels: usize,
    /// Inclusive range of benign clutter solids.
    pub clutter_count: (u32, u32),
    /// Uniform intensity range for clutter solids.
    pub clutter_intensity: (f32, f32),
    /// Std-dev of the clipped Gaussian background noise.
    pub noise_sigma: f32,
    /// Inclusive instance-count range per foreground class.
    pub class_counts: [(u32, u32); DEFAULT_CLASS_COUNT],
    pub seed: u64,
}

impl Default for BagSpec {
    fn default() -> Self {
        BagSpec {
            dims: [48, 48, 48],
            channels: 1,
            clutter_count: (4, 9),
            clutter_intensity: (0.2, 0.5),
            noise_sigma: 0.02,
            class_counts: [(0, 2); DEFAULT_CLASS_COUNT],
            seed: 0,
        }
    }
}

impl BagSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.dims.iter().any(|&d| d < 32) {
            return Err(SynthError::InvalidSpec("dims must each be >= 32"));
        }
        if !(1..=2).contains(&self.channels) {
            return Err(SynthError::InvalidSpec("channels must be 1 or 2"));
        }
        if self.clutter_count.0 > self.clutter_count.1 {
            return Err(SynthError::InvalidSpec("clutter count range inverted"));
        }
        if self.clutter_intensity.0 > self.clutter_intensity.1
            || self.clutter_intensity.0 < 0.0
            || self.clutter_intensity.1 > 1.0
        {
            return Err(SynthError::InvalidSpec("clutter intensity range invalid"));
        }
        if self.noise_sigma < 0.0 {
            return Err(SynthError::InvalidSpec("noise sigma must be >= 0"));
        }
        if self.class_counts.iter().any(|(lo, hi)| lo > hi) {
            return Err(SynthError::InvalidSpec("class count range inverted"));
        }
        Ok(())
    }
}

/// Local rasterized solid before placement.
struct Piece {
    dims: [usize; 3],
    mask: Vec<bool>,
}

impl Piece {
    fn new(dims: [usize; 3]) -> Self {
        Piece {
            dims,
            mask: vec![false; dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    fn set(&mut self, z: usize, y: usize, x: usize) {
        let i = self.idx(z, y, x);
        self.mask[i] = true;
    }

    /// Crops to the occupied bounds; empty pieces stay as they are.
    fn tighten(self) -> Piece {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for z in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[2] {
                    if self.mask[self.idx(z, y, x)] {
                        lo = [lo[0].min(z), lo[1].min(y), lo[2].min(x)];
                        hi = [hi[0].max(z), hi[1].max(y), hi[2].max(x)];
                    }
                }
            }
        }
        if lo[0] == usize::MAX {
            return self;
        }
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        let mut out = Piece::new(dims);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    if self.mask[self.idx(z + lo[0], y + lo[1], x + lo[2])] {
                        out.set(z, y, x);
                    }
                }
            }
        }
        out
    }

    /// Random one of the 13 axis-aligned orientations (identity plus the 12
    /// flip/rotation transforms), reusing the augmentation machinery.
    fn orient(self, rng: &mut impl Rng) -> Piece {
        let pick = rng.random_range(0..13usize);
        if pick == 0 {
            return self;
        }
        let mut vol = Volume::zeros(self.dims, 1);
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                vol.voxels_mut()[i] = 1.0;
            }
        }
        let (tv, _) = apply_transform(&vol, &[], TransformId::all()[pick - 1]);
        Piece {
            dims: tv.dims(),
            mask: tv.voxels().iter().map(|&v| v > 0.5).collect(),
        }
    }
}

fn ellipsoid(rz: f64, ry: f64, rx: f64) -> Piece {
    let dims = [
        (2.0 * rz) as usize + 1,
        (2.0 * ry) as usize + 1,
        (2.0 * rx) as usize + 1,
    ];
    let c = [dims[0] as f64 / 2.0, dims[1] as f64 / 2.0, dims[2] as f64 / 2.0];
    let mut p = Piece::new(dims);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let dz = (z as f64 + 0.5 - c[0]) / rz;
                let dy = (y as f64 + 0.5 - c[1]) / ry;
                let dx = (x as f64 + 0.5 - c[2]) / rx;
                if dz * dz + dy * dy + dx * dx <= 1.0 {
                    p.set(z, y, x);
                }
            }
        }
    }
    p
}

fn cuboid(dz: usize, dy: usize, dx: usize) -> Piece {
    let mut p = Piece::new([dz.max(1), dy.max(1), dx.max(1)]);
    p.mask.fill(true);
    p
}

/// Solid cylinder along z; callers orient afterwards.
fn cylinder(radius: f64, len: usize) -> Piece {
    let side = (2.0 * radius) as usize + 1;
    let mut p = Piece::new([len.max(1), side, side]);
    let c = side as f64 / 2.0;
    for z in 0..p.dims[0] {
        for y in 0..side {
            for x in 0..side {
                let dy = y as f64 + 0.5 - c;
                let dx = x as f64 + 0.5 - c;
                if dy * dy + dx * dx <= radius * radius {
                    p.set(z, y, x);
                }
            }
        }
    }
    p
}

/// Hollow cylinder with a solid base cap.
fn bottle_piece(outer: f64, wall: f64, len: usize) -> Piece {
    let side = (2.0 * outer) as usize + 1;
    let mut p = Piece::new([len.max(3), side, side]);
    let c = side as f64 / 2.0;
    let inner = (outer - wall).max(0.6);
    for z in 0..p.dims[0] {
        for y in 0..side {
            for x in 0..side {
                let dy = y as f64 + 0.5 - c;
                let dx = x as f64 + 0.5 - c;
                let r2 = dy * dy + dx * dx;
                let in_outer = r2 <= outer * outer;
                let in_inner = r2 <= inner * inner;
                let base_cap = z == 0;
                if in_outer && (!in_inner || base_cap) {
                    p.set(z, y, x);
                }
            }
        }
    }
    p
}

/// Barrel plus perpendicular grip, sharing a corner.
fn lshape_piece(barrel_len: usize, grip_len: usize, thick: usize) -> Piece {
    let t = thick.max(2);
    let dims = [grip_len.max(t) + t, t, barrel_len.max(t)];
    let mut p = Piece::new(dims);
    // barrel along x at the top
    for z in 0..t {
        for y in 0..t {
            for x in 0..dims[2] {
                p.set(z, y, x);
            }
        }
    }
    // grip down along z at one end
    for z in 0..dims[0] {
        for y in 0..t {
            for x in 0..t {
                p.set(z, y, x);
            }
        }
    }
    p
}

/// Two parallel cylinders with a central bridge.
fn binocular_piece(radius: f64, len: usize, gap: usize) -> Piece {
    let side = (2.0 * radius) as usize + 1;
    let dims = [len.max(3), side, 2 * side + gap];
    let mut p = Piece::new(dims);
    let r2 = radius * radius;
    for (cy, cx) in [
        (side as f64 / 2.0, side as f64 / 2.0),
        (side as f64 / 2.0, side as f64 * 1.5 + gap as f64),
    ] {
        for z in 0..dims[0] {
            for y in 0..side {
                for x in 0..dims[2] {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    if dy * dy + dx * dx <= r2 {
                        p.set(z, y, x);
                    }
                }
            }
        }
    }
    // bridge across the middle
    let bz = dims[0] / 2;
    for z in bz.saturating_sub(1)..(bz + 1).min(dims[0]) {
        for y in 0..side {
            for x in side / 2..dims[2] - side / 2 {
                p.set(z, y, x);
            }
        }
    }
    p
}

/// Size unit scaling object dimensions to the volume extent.
fn size_unit(dims: [usize; 3]) -> f64 {
    let min_dim = *dims.iter().min().unwrap() as f64;
    (min_dim / 16.0).max(2.0)
}

fn foreground_piece(class_id: usize, unit: f64, rng: &mut impl Rng) -> Piece {
    let u = unit;
    let piece = match class_id {
        0 => {
            let outer = rng.random_range(0.9 * u..1.4 * u);
            let wall = (outer / 3.0).max(1.0);
            let len = rng.random_range(2.6 * u..4.0 * u) as usize;
            bottle_piece(outer, wall, len)
        }
        1 => {
            let barrel = rng.random_range(2.8 * u..3.8 * u) as usize;
            let grip = rng.random_range(1.6 * u..2.4 * u) as usize;
            let thick = (0.9 * u) as usize;
            lshape_piece(barrel, grip, thick)
        }
        2 => {
            let r = rng.random_range(0.6 * u..0.9 * u);
            let len = rng.random_range(2.2 * u..3.2 * u) as usize;
            let gap = rng.random_range(1..=2usize);
            binocular_piece(r, len, gap)
        }
        3 => {
            let barrel = rng.random_range(2.2 * u..3.2 * u) as usize;
            let grip = rng.random_range(1.4 * u..2.0 * u) as usize;
            let thick = (0.8 * u) as usize;
            lshape_piece(barrel, grip, thick)
        }
        4 => {
            let a = rng.random_range(1.8 * u..2.8 * u) as usize;
            let b = rng.random_range(1.2 * u..1.9 * u) as usize;
            cuboid(a.max(2), b.max(2), rng.random_range(1..=2usize))
        }
        _ => unreachable!("class_id < 5"),
    };
    piece.tighten().orient(rng)
}

fn clutter_piece(unit: f64, rng: &mut impl Rng) -> Piece {
    let u = unit;
    let piece = match rng.random_range(0..3u32) {
        0 => ellipsoid(
            rng.random_range(0.6 * u..1.3 * u),
            rng.random_range(0.6 * u..1.3 * u),
            rng.random_range(0.6 * u..1.3 * u),
        ),
        1 => cuboid(
            rng.random_range(u..2.0 * u) as usize,
            rng.random_range(u..2.0 * u) as usize,
            rng.random_range(u..2.0 * u) as usize,
        ),
        _ => cylinder(
            rng.random_range(0.5 * u..0.9 * u),
            rng.random_range(1.5 * u..3.0 * u) as usize,
        ),
    };
    piece.tighten().orient(rng)
}

struct Canvas {
    dims: [usize; 3],
    channels: usize,
    ch: Vec<Vec<f32>>,
    occupied: Vec<bool>,
}

impl Canvas {
    fn new(dims: [usize; 3], channels: usize) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Canvas {
            dims,
            channels,
            ch: vec![vec![0.0; n]; channels],
            occupied: vec![false; n],
        }
    }

    #[inline]
    fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    /// Max-blend a piece at `off` with intensity `i0` on channel 0 and
    /// `i0 * factor` on channel 1; optionally claims the occupancy grid.
    fn paint(&mut self, piece: &Piece, off: [usize; 3], i0: f32, factor: f32, claim: bool) {
        for z in 0..piece.dims[0] {
            for y in 0..piece.dims[1] {
                for x in 0..piece.dims[2] {
                    if !piece.mask[piece.idx(z, y, x)] {
                        continue;
                    }
                    let gi = self.idx(z + off[0], y + off[1], x + off[2]);
                    self.ch[0][gi] = self.ch[0][gi].max(i0);
                    if self.channels > 1 {
                        self.ch[1][gi] = self.ch[1][gi].max((i0 * factor).clamp(0.0, 1.0));
                    }
                    if claim {
                        self.occupied[gi] = true;
                    }
                }
            }
        }
    }

    fn collides(&self, piece: &Piece, off: [usize; 3]) -> bool {
        for z in 0..piece.dims[0] {
            for y in 0..piece.dims[1] {
                for x in 0..piece.dims[2] {
                    if piece.mask[piece.idx(z, y, x)]
                        && self.occupied[self.idx(z + off[0], y + off[1], x + off[2])]
                    {
                        return true;
                    }
                }
            }
        }
        false
    }
}

const PLACEMENT_ATTEMPTS: u32 = 100;

fn random_offset(
    dims: [usize; 3],
    piece_dims: [usize; 3],
    rng: &mut impl Rng,
) -> Option<[usize; 3]> {
    let mut off = [0usize; 3];
    for a in 0..3 {
        if piece_dims[a] + 2 > dims[a] {
            return None;
        }
        off[a] = rng.random_range(1..=dims[a] - piece_dims[a] - 1);
    }
    Some(off)
}

/// A placed foreground instance's mask, for tests and signature archiving.
#[derive(Clone, Debug)]
pub struct PlacedInstance {
    pub offset: [usize; 3],
    pub dims: [usize; 3],
    pub mask: Vec<bool>,
}

/// [`generate_bag`] plus the per-instance occupancy masks.
pub fn generate_bag_with_masks(
    spec: &BagSpec,
) -> Result<(Volume, Vec<Annotation>, Vec<PlacedInstance>), SynthError> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let dims = spec.dims;
    let unit = size_unit(dims);
    let mut canvas = Canvas::new(dims, spec.channels);

    // background noise, clipped at zero
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sigma).expect("sigma validated");
        for v in canvas.ch[0].iter_mut() {
            *v = normal.sample(&mut rng).clamp(0.0, 1.0);
        }
        if spec.channels > 1 {
            let ch0 = canvas.ch[0].clone();
            canvas.ch[1].copy_from_slice(&ch0);
        }
    }

    // benign clutter, anywhere (clutter may touch foreground later; the
    // foreground is painted over it by max-blend)
    let (clo, chi) = spec.clutter_count;
    let n_clutter = if chi == 0 {
        0
    } else {
        rng.random_range(clo..=chi)
    };
    for _ in 0..n_clutter {
        let piece = clutter_piece(unit, &mut rng);
        let intensity =
            rng.random_range(spec.clutter_intensity.0..=spec.clutter_intensity.1.max(spec.clutter_intensity.0 + f32::EPSILON));
        let factor = rng.random_range(0.9..1.1f32);
        if let Some(off) = random_offset(dims, piece.dims, &mut rng) {
            canvas.paint(&piece, off, intensity, factor, false);
        }
    }

    // foreground instances: collision-free among themselves
    let clutter_mean = 0.5 * (spec.clutter_intensity.0 + spec.clutter_intensity.1);
    let clutter_sd =
        (spec.clutter_intensity.1 - spec.clutter_intensity.0) / (12.0f32).sqrt();
    let mut annotations = Vec::new();
    let mut placed = Vec::new();
    for class_id in 0..DEFAULT_CLASS_COUNT {
        let (lo, hi) = spec.class_counts[class_id];
        let count = if hi == 0 { 0 } else { rng.random_range(lo..=hi) };
        for _ in 0..count {
            let piece = foreground_piece(class_id, unit, &mut rng);
            let intensity = if class_id == 3 {
                // low contrast: inside one sigma of the clutter mean
                (clutter_mean + rng.random_range(-clutter_sd..=clutter_sd.max(1e-6)))
                    .clamp(0.05, 1.0)
            } else {
                rng.random_range(0.7..0.95f32)
            };
            let factor = rng.random_range(0.9..1.1f32);
            let mut done = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let Some(off) = random_offset(dims, piece.dims, &mut rng) else {
                    break;
                };
                if canvas.collides(&piece, off) {
                    continue;
                }
                canvas.paint(&piece, off, intensity, factor, true);
                annotations.push(Annotation {
                    box3: Box3D::from_voxels(
                        off[0],
                        off[1],
                        off[2],
                        off[0] + piece.dims[0],
                        off[1] + piece.dims[1],
                        off[2] + piece.dims[2],
                    ),
                    class_id,
                    instance_id: annotations.len() as u32,
                });
                placed.push(PlacedInstance {
                    offset: off,
                    dims: piece.dims,
                    mask: piece.mask.clone(),
                });
                done = true;
                break;
            }
            if !done {
                return Err(SynthError::PlacementFailed {
                    class_id,
                    attempts: PLACEMENT_ATTEMPTS,
                });
            }
        }
    }

    let mut voxels = Vec::with_capacity(spec.channels * canvas.ch[0].len());
    for c in &canvas.ch {
        voxels.extend_from_slice(c);
    }
    let mut vol = Volume::new(dims, spec.channels, voxels, VolumeMeta::default())
        .expect("canvas buffers are consistent");
    vol.meta = VolumeMeta {
        source_id: String::new(),
        provenance: Provenance::RealSynthetic,
        energy: if spec.channels == 2 {
            EnergyTag::Dual
        } else {
            EnergyTag::Low
        },
    };
    Ok((vol, annotations, placed))
}

/// Deterministically generates one bag volume and its annotations from a
/// spec. Equal specs (including seed) produce bit-identical volumes.
pub fn generate_bag(spec: &BagSpec) -> Result<(Volume, Vec<Annotation>), SynthError> {
    generate_bag_with_masks(spec).map(|(v, a, _)| (v, a))
}

/// Extracts the largest 6-connected component of voxels brighter than `tau`
/// inside `seed_box` (channel 0 decides occupancy; all channels are kept),
/// cropped to the component's tight box.
pub fn extract_signature(
    v: &Volume,
    seed_box: &Box3D,
    tau: f32,
    class_id: usize,
) -> Result<Signature, SynthError> {
    let dims = v.dims();
    let clipped = seed_box.clip(dims).ok_or(SynthError::SeedBoxOutOfBounds)?;
    if clipped != *seed_box {
        return Err(SynthError::SeedBoxOutOfBounds);
    }
    let z_range = seed_box.z0 as usize..seed_box.z1.min(dims[0] as f64) as usize;
    let y_range = seed_box.y0 as usize..seed_box.y1.min(dims[1] as f64) as usize;
    let x_range = seed_box.x0 as usize..seed_box.x1.min(dims[2] as f64) as usize;

    let bd = [
        z_range.end - z_range.start,
        y_range.end - y_range.start,
        x_range.end - x_range.start,
    ];
    let idx = |z: usize, y: usize, x: usize| (z * bd[1] + y) * bd[2] + x;
    let above: Vec<bool> = {
        let mut m = vec![false; bd[0] * bd[1] * bd[2]];
        for (zi, z) in z_range.clone().enumerate() {
            for (yi, y) in y_range.clone().enumerate() {
                for (xi, x) in x_range.clone().enumerate() {
                    m[idx(zi, yi, xi)] = v.get(0, z, y, x) > tau;
                }
            }
        }
        m
    };
    if !above.iter().any(|&b| b) {
        return Err(SynthError::EmptyMask { tau });
    }

    // label components by BFS over 6-neighborhoods, keep the largest
    let mut labels = vec![0u32; above.len()];
    let mut next = 0u32;
    let mut best_label = 0u32;
    let mut best_size = 0usize;
    let mut queue = VecDeque::new();
    for start in 0..above.len() {
        if !above[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        let mut size = 0usize;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let z = i / (bd[1] * bd[2]);
            let y = (i / bd[2]) % bd[1];
            let x = i % bd[2];
            let mut push = |zi: usize, yi: usize, xi: usize| {
                let j = idx(zi, yi, xi);
                if above[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if z > 0 {
                push(z - 1, y, x);
            }
            if z + 1 < bd[0] {
                push(z + 1, y, x);
            }
            if y > 0 {
                push(z, y - 1, x);
            }
            if y + 1 < bd[1] {
                push(z, y + 1, x);
            }
            if x > 0 {
                push(z, y, x - 1);
            }
            if x + 1 < bd[2] {
                push(z, y, x + 1);
            }
        }
        if size > best_size {
            best_size = size;
            best_label = next;
        }
    }

    // tight bounds of the winning component
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..bd[0] {
        for y in 0..bd[1] {
            for x in 0..bd[2] {
                if labels[idx(z, y, x)] == best_label {
                    lo = [lo[0].min(z), lo[1].min(y), lo[2].min(x)];
                    hi = [hi[0].max(z), hi[1].max(y), hi[2].max(x)];
                }
            }
        }
    }
    let sd = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let mut sig_vol = Volume::zeros(sd, v.channels());
    let mut mask = vec![false; sd[0] * sd[1] * sd[2]];
    for z in 0..sd[0] {
        for y in 0..sd[1] {
            for x in 0..sd[2] {
                if labels[idx(z + lo[0], y + lo[1], x + lo[2])] == best_label {
                    mask[(z * sd[1] + y) * sd[2] + x] = true;
                    for c in 0..v.channels() {
                        let val = v.get(
                            c,
                            z + lo[0] + z_range.start,
                            y + lo[1] + y_range.start,
                            x + lo[2] + x_range.start,
                        );
                        sig_vol.set(c, z, y, x, val);
                    }
                }
            }
        }
    }
    Signature::new(sig_vol, mask, class_id, v.meta.source_id.clone())
}

/// Occupancy level above which a target voxel counts as already filled when
/// scoring placement collisions.
const OCCUPANCY_THRESHOLD: f32 = 0.3;
/// Largest tolerated fraction of signature voxels landing on filled space.
const COLLISION_TOLERANCE: f64 = 0.05;

/// Projects a signature into a target volume at a random low-collision
/// placement, blending by voxel-wise max under the mask. The output volume is
/// marked as composited.
pub fn project_signature(
    target: &Volume,
    sig: &Signature,
    rng: &mut impl Rng,
) -> Result<(Volume, Annotation), SynthError> {
    let td = target.dims();
    let sd = sig.dims();
    if sd.iter().zip(td.iter()).any(|(s, t)| s > t) {
        return Err(SynthError::SignatureTooLarge { sig: sd, target: td });
    }
    if sig.voxels().channels() != target.channels() {
        return Err(SynthError::ChannelMismatch {
            sig: sig.voxels().channels(),
            target: target.channels(),
        });
    }
    let occupied_total = sig.occupied() as f64;
    let mut chosen = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut off = [0usize; 3];
        for a in 0..3 {
            off[a] = rng.random_range(0..=td[a] - sd[a]);
        }
        let mut colliding = 0usize;
        for z in 0..sd[0] {
            for y in 0..sd[1] {
                for x in 0..sd[2] {
                    if sig.mask()[(z * sd[1] + y) * sd[2] + x]
                        && target.get(0, z + off[0], y + off[1], x + off[2]) > OCCUPANCY_THRESHOLD
                    {
                        colliding += 1;
                    }
                }
            }
        }
        if colliding as f64 / occupied_total <= COLLISION_TOLERANCE {
            chosen = Some(off);
            break;
        }
    }
    let off = chosen.ok_or(SynthError::PlacementFailed {
        class_id: sig.class_id(),
        attempts: PLACEMENT_ATTEMPTS,
    })?;

    let mut out = target.clone();
    for c in 0..out.channels() {
        for z in 0..sd[0] {
            for y in 0..sd[1] {
                for x in 0..sd[2] {
                    if sig.mask()[(z * sd[1] + y) * sd[2] + x] {
                        let cur = out.get(c, z + off[0], y + off[1], x + off[2]);
                        let sv = sig.voxels().get(c, z, y, x);
                        out.set(c, z + off[0], y + off[1], x + off[2], cur.max(sv));
                    }
                }
            }
        }
    }
    out.meta.provenance = Provenance::TipComposited;
    let ann = Annotation {
        box3: Box3D::from_voxels(
            off[0],
            off[1],
            off[2],
            off[0] + sd[0],
            off[1] + sd[1],
            off[2] + sd[2],
        ),
        class_id: sig.class_id(),
        instance_id: 0,
    };
    Ok((out, ann))
}
