//! Joint volume/box augmentation: 6 flips and 6 axis-aligned 90-degree
//! rotations.
//!
//! The flip set is the three single-axis reflections plus the three two-axis
//! composites; rotations are +-90 degrees about each axis, implemented as an
//! axis swap with one reversal. Every transform is a bijection on voxel
//! coordinates, so the voxel multiset is always preserved. Boxes ride along
//! through the same coordinate map with corners re-normalized.

use alloc::vec::Vec;

use rand::Rng;

use crate::vol::{Box3D, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    Flip,
    Rotation,
}

/// One of the 12 augmentation transforms (6 flips + 6 rotations).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformId {
    pub kind: TransformKind,
    pub index: u8,
}

impl TransformId {
    pub fn new(kind: TransformKind, index: u8) -> Option<Self> {
        (index < 6).then_some(TransformId { kind, index })
    }

    /// All 12 transforms in canonical order: flips 0..5, then rotations 0..5.
    pub fn all() -> [TransformId; 12] {
        let mut out = [TransformId {
            kind: TransformKind::Flip,
            index: 0,
        }; 12];
        for i in 0..6 {
            out[i].index = i as u8;
            out[6 + i] = TransformId {
                kind: TransformKind::Rotation,
                index: i as u8,
            };
        }
        out
    }

    /// Output axis layout: for each output axis, the source axis it reads
    /// from and whether that source coordinate runs reversed.
    ///
    /// Flips 0..5 reverse {z}, {y}, {x}, {z,y}, {z,x}, {y,x}. Rotations 0..5
    /// are +90/-90 about z, then y, then x; +90 about z maps `(y, x)` to
    /// `(W - x, y)`.
    fn axis_map(self) -> [(usize, bool); 3] {
        match (self.kind, self.index) {
            (TransformKind::Flip, 0) => [(0, true), (1, false), (2, false)],
            (TransformKind::Flip, 1) => [(0, false), (1, true), (2, false)],
            (TransformKind::Flip, 2) => [(0, false), (1, false), (2, true)],
            (TransformKind::Flip, 3) => [(0, true), (1, true), (2, false)],
            (TransformKind::Flip, 4) => [(0, true), (1, false), (2, true)],
            (TransformKind::Flip, 5) => [(0, false), (1, true), (2, true)],
            (TransformKind::Rotation, 0) => [(0, false), (2, true), (1, false)],
            (TransformKind::Rotation, 1) => [(0, false), (2, false), (1, true)],
            (TransformKind::Rotation, 2) => [(2, true), (1, false), (0, false)],
            (TransformKind::Rotation, 3) => [(2, false), (1, false), (0, true)],
            (TransformKind::Rotation, 4) => [(1, true), (0, false), (2, false)],
            (TransformKind::Rotation, 5) => [(1, false), (0, true), (2, false)],
            _ => unreachable!("index checked at construction"),
        }
    }
}

/// Per-transform activation settings for random augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Activation probability per transform.
    pub p: f64,
    pub enabled_flips: bool,
    pub enabled_rotations: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p: 0.2,
            enabled_flips: true,
            enabled_rotations: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> bool {
        (0.0..=1.0).contains(&self.p)
    }
}

/// Applies one transform to a volume and its boxes.
///
/// Rotations between axes of unequal extent emit dimension-swapped output;
/// boxes go through the same coordinate map.
pub fn apply_transform(v: &Volume, boxes: &[Box3D], t: TransformId) -> (Volume, Vec<Box3D>) {
    let map = t.axis_map();
    let in_dims = v.dims();
    let out_dims = [
        in_dims[map[0].0],
        in_dims[map[1].0],
        in_dims[map[2].0],
    ];
    let mut out = Volume::zeros(out_dims, v.channels());
    out.meta = v.meta.clone();
    let mut src = [0usize; 3];
    for c in 0..v.channels() {
        for oz in 0..out_dims[0] {
            for oy in 0..out_dims[1] {
                for ox in 0..out_dims[2] {
                    let oc = [oz, oy, ox];
                    for (i, &(a, rev)) in map.iter().enumerate() {
                        src[a] = if rev { in_dims[a] - 1 - oc[i] } else { oc[i] };
                    }
                    out.set(c, oz, oy, ox, v.get(c, src[0], src[1], src[2]));
                }
            }
        }
    }
    let out_boxes = boxes
        .iter()
        .map(|b| {
            let lo = [b.z0, b.y0, b.x0];
            let hi = [b.z1, b.y1, b.x1];
            let mut nlo = [0.0; 3];
            let mut nhi = [0.0; 3];
            for (i, &(a, rev)) in map.iter().enumerate() {
                if rev {
                    nlo[i] = in_dims[a] as f64 - hi[a];
                    nhi[i] = in_dims[a] as f64 - lo[a];
                } else {
                    nlo[i] = lo[a];
                    nhi[i] = hi[a];
                }
            }
            Box3D::new(nlo[0], nlo[1], nlo[2], nhi[0], nhi[1], nhi[2])
                .expect("transformed box keeps positive extent")
        })
        .collect();
    (out, out_boxes)
}

/// Samples each of the 12 transforms independently with probability `p` in
/// canonical order (flips by index, then rotations by index) and composes the
/// active ones left to right. The returned list replays the exact
/// augmentation.
///
/// Twelve uniforms are always drawn, so disabling a transform kind does not
/// shift the random stream of the others.
pub fn random_augment(
    v: &Volume,
    boxes: &[Box3D],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Volume, Vec<Box3D>, Vec<TransformId>) {
    debug_assert!(cfg.validate());
    let mut applied = Vec::new();
    let mut cur_v = None;
    let mut cur_b: Vec<Box3D> = boxes.to_vec();
    for t in TransformId::all() {
        let u: f64 = rng.random();
        let enabled = match t.kind {
            TransformKind::Flip => cfg.enabled_flips,
            TransformKind::Rotation => cfg.enabled_rotations,
        };
        if enabled && u < cfg.p {
            let (nv, nb) = apply_transform(cur_v.as_ref().unwrap_or(v), &cur_b, t);
            cur_v = Some(nv);
            cur_b = nb;
            applied.push(t);
        }
    }
    (cur_v.unwrap_or_else(|| v.clone()), cur_b, applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::vol::VolumeMeta;
    use alloc::vec;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = rng_from_seed(seed);
        let n = dims[0] * dims[1] * dims[2];
        let voxels = (0..n).map(|_| rng.random::<f32>()).collect();
        Volume::new(dims, 1, voxels, VolumeMeta::default()).unwrap()
    }

    /// Rasterizes boxes into an occupancy volume.
    fn rasterize(boxes: &[Box3D], dims: [usize; 3]) -> Volume {
        let mut v = Volume::zeros(dims, 1);
        for b in boxes {
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        let (zf, yf, xf) = (z as f64, y as f64, x as f64);
                        if b.z0 <= zf && zf < b.z1 && b.y0 <= yf && yf < b.y1 && b.x0 <= xf && xf < b.x1
                        {
                            v.set(0, z, y, x, 1.0);
                        }
                    }
                }
            }
        }
        v
    }

    #[test]
    fn flips_are_involutions() {
        let v = random_volume([4, 5, 6], 3);
        let boxes = vec![Box3D::from_voxels(1, 2, 0, 3, 4, 5)];
        for i in 0..6 {
            let t = TransformId::new(TransformKind::Flip, i).unwrap();
            let (v1, b1) = apply_transform(&v, &boxes, t);
            let (v2, b2) = apply_transform(&v1, &b1, t);
            assert_eq!(v2, v, "flip {i}");
            assert_eq!(b2, boxes, "flip {i}");
        }
    }

    #[test]
    fn rotation_inverse_pairs() {
        let v = random_volume([4, 5, 6], 4);
        let boxes = vec![Box3D::from_voxels(0, 1, 2, 3, 4, 5)];
        for axis in 0..3 {
            let plus = TransformId::new(TransformKind::Rotation, axis * 2).unwrap();
            let minus = TransformId::new(TransformKind::Rotation, axis * 2 + 1).unwrap();
            let (v1, b1) = apply_transform(&v, &boxes, plus);
            let (v2, b2) = apply_transform(&v1, &b1, minus);
            assert_eq!(v2, v, "axis {axis}");
            assert_eq!(b2, boxes, "axis {axis}");
            // and the other order
            let (v3, b3) = apply_transform(&v, &boxes, minus);
            let (v4, b4) = apply_transform(&v3, &b3, plus);
            assert_eq!(v4, v);
            assert_eq!(b4, boxes);
        }
    }

    #[test]
    fn z_flip_box_in_10_cube() {
        // corners map through z' = D - z and reorder: [1,4) -> [6,9)
        let v = Volume::zeros([10, 10, 10], 1);
        let b = Box3D::from_voxels(1, 2, 3, 4, 5, 6);
        let t = TransformId::new(TransformKind::Flip, 0).unwrap();
        let (_, out) = apply_transform(&v, &[b], t);
        assert_eq!(out[0], Box3D::from_voxels(6, 2, 3, 9, 5, 6));

        // cross-check with the rasterization oracle: transform the mask and
        // take the occupied bounds
        let mask = rasterize(&[b], [10, 10, 10]);
        let (tmask, _) = apply_transform(&mask, &[], t);
        let om = rasterize(&out, tmask.dims());
        assert_eq!(tmask.voxels(), om.voxels());
    }

    #[test]
    fn boxes_track_voxels_under_every_transform() {
        let dims = [4usize, 5, 6];
        let v = Volume::zeros(dims, 1);
        let boxes = vec![
            Box3D::from_voxels(0, 1, 2, 2, 3, 5),
            Box3D::from_voxels(1, 0, 0, 4, 5, 3),
        ];
        for t in TransformId::all() {
            let (tv, tb) = apply_transform(&v, &boxes, t);
            let before = rasterize(&boxes, dims);
            let (tbefore, _) = apply_transform(&before, &[], t);
            let after = rasterize(&tb, tv.dims());
            assert_eq!(tbefore.voxels(), after.voxels(), "{t:?}");
        }
    }

    #[test]
    fn voxel_multiset_preserved() {
        let v = random_volume([3, 4, 5], 9);
        let mut orig: Vec<u32> = v.voxels().iter().map(|f| f.to_bits()).collect();
        orig.sort_unstable();
        for t in TransformId::all() {
            let (tv, _) = apply_transform(&v, &[], t);
            let mut got: Vec<u32> = tv.voxels().iter().map(|f| f.to_bits()).collect();
            got.sort_unstable();
            assert_eq!(got, orig, "{t:?}");
        }
    }

    #[test]
    fn random_augment_p0_is_identity() {
        let v = random_volume([4, 4, 4], 1);
        let boxes = vec![Box3D::from_voxels(0, 0, 0, 2, 2, 2)];
        let cfg = AugmentConfig {
            p: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = rng_from_seed(5);
        let (ov, ob, applied) = random_augment(&v, &boxes, &cfg, &mut rng);
        assert!(applied.is_empty());
        assert_eq!(ov, v);
        assert_eq!(ob, boxes);
    }

    #[test]
    fn random_augment_p1_applies_all_twelve() {
        let v = random_volume([4, 4, 4], 2);
        let cfg = AugmentConfig {
            p: 1.0,
            ..AugmentConfig::default()
        };
        let mut rng = rng_from_seed(5);
        let (av, _, applied) = random_augment(&v, &[], &cfg, &mut rng);
        assert_eq!(applied.len(), 12);
        assert_eq!(applied.as_slice(), &TransformId::all());
        // deterministic given input: a second run reproduces the output
        let mut rng2 = rng_from_seed(5);
        let (bv, _, _) = random_augment(&v, &[], &cfg, &mut rng2);
        assert_eq!(av, bv);
    }

    #[test]
    fn per_transform_activation_frequency_near_p() {
        let v = Volume::zeros([2, 2, 2], 1);
        let cfg = AugmentConfig {
            p: 0.2,
            ..AugmentConfig::default()
        };
        let mut rng = rng_from_seed(11);
        let trials = 10_000;
        let mut counts = [0u32; 12];
        for _ in 0..trials {
            let (_, _, applied) = random_augment(&v, &[], &cfg, &mut rng);
            for t in applied {
                let slot = match t.kind {
                    TransformKind::Flip => t.index as usize,
                    TransformKind::Rotation => 6 + t.index as usize,
                };
                counts[slot] += 1;
            }
        }
        for (i, c) in counts.iter().enumerate() {
            let f = *c as f64 / trials as f64;
            assert!((0.18..=0.22).contains(&f), "transform {i}: frequency {f}");
        }
    }

    #[test]
    fn disabling_a_kind_suppresses_it_without_shifting_the_stream() {
        let v = random_volume([4, 4, 4], 6);
        let flips_only = AugmentConfig {
            p: 0.5,
            enabled_rotations: false,
            ..AugmentConfig::default()
        };
        let mut rng = rng_from_seed(8);
        let (_, _, applied) = random_augment(&v, &[], &flips_only, &mut rng);
        assert!(applied.iter().all(|t| t.kind == TransformKind::Flip));

        // same seed with everything on: the flip decisions are identical
        let both = AugmentConfig {
            p: 0.5,
            ..AugmentConfig::default()
        };
        let mut rng2 = rng_from_seed(8);
        let (_, _, applied_both) = random_augment(&v, &[], &both, &mut rng2);
        let flips_a: Vec<u8> = applied.iter().map(|t| t.index).collect();
        let flips_b: Vec<u8> = applied_both
            .iter()
            .filter(|t| t.kind == TransformKind::Flip)
            .map(|t| t.index)
            .collect();
        assert_eq!(flips_a, flips_b);
    }

    #[test]
    fn rotations_swap_dims_for_non_cubes() {
        let v = random_volume([2, 3, 4], 7);
        let rot_z = TransformId::new(TransformKind::Rotation, 0).unwrap();
        let (tv, _) = apply_transform(&v, &[], rot_z);
        assert_eq!(tv.dims(), [2, 4, 3]);
        let rot_y = TransformId::new(TransformKind::Rotation, 2).unwrap();
        let (tv, _) = apply_transform(&v, &[], rot_y);
        assert_eq!(tv.dims(), [4, 3, 2]);
        let rot_x = TransformId::new(TransformKind::Rotation, 4).unwrap();
        let (tv, _) = apply_transform(&v, &[], rot_x);
        assert_eq!(tv.dims(), [3, 2, 4]);
    }
}
