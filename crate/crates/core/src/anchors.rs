//! Pyramid anchor grids, anchor/ground-truth matching, and box deltas.
//!
//! Anchors are cubes placed on the stride grid of each pyramid level:
//! center `stride/2 + stride*i` per axis, side `base_size * multiplier`.
//! Matching labels an anchor positive when its best IoU against the ground
//! truth reaches the threshold, and additionally forces each ground truth's
//! single best anchor positive so no instance goes unsupervised.

use alloc::vec;
use alloc::vec::Vec;

use crate::mathutil;
use crate::vol::{iou3d, Annotation, Box3D};

/// Feature pyramid levels and their voxel strides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PyramidLevel {
    P2,
    P3,
    P4,
    P5,
}

impl PyramidLevel {
    pub const ALL: [PyramidLevel; 4] = [
        PyramidLevel::P2,
        PyramidLevel::P3,
        PyramidLevel::P4,
        PyramidLevel::P5,
    ];

    pub fn stride(self) -> usize {
        match self {
            PyramidLevel::P2 => 4,
            PyramidLevel::P3 => 8,
            PyramidLevel::P4 => 16,
            PyramidLevel::P5 => 32,
        }
    }

    pub fn index(self) -> usize {
        match self {
            PyramidLevel::P2 => 0,
            PyramidLevel::P3 => 1,
            PyramidLevel::P4 => 2,
            PyramidLevel::P5 => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum AnchorError {
    #[error("base sizes must ascend with level: {0:?}")]
    SizesNotAscending([f64; 4]),
    #[error("at least one scale multiplier is required")]
    NoMultipliers,
    #[error("at least one pyramid level is required")]
    NoLevels,
    #[error("input dims {0:?} must be divisible by 32")]
    DimsNotDivisible([usize; 3]),
}

/// Anchor layout: one base size per level, optional per-location scale
/// multipliers, and the subset of levels carrying anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub base_sizes: [f64; 4],
    pub scale_multipliers: Vec<f64>,
    pub levels: Vec<PyramidLevel>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            base_sizes: [8.0, 16.0, 32.0, 64.0],
            scale_multipliers: vec![1.0],
            levels: PyramidLevel::ALL.to_vec(),
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<(), AnchorError> {
        if !self.base_sizes.windows(2).all(|w| w[0] < w[1]) {
            return Err(AnchorError::SizesNotAscending(self.base_sizes));
        }
        if self.scale_multipliers.is_empty() {
            return Err(AnchorError::NoMultipliers);
        }
        if self.levels.is_empty() {
            return Err(AnchorError::NoLevels);
        }
        Ok(())
    }

    /// Anchors per grid location.
    pub fn anchors_per_location(&self) -> usize {
        self.scale_multipliers.len()
    }
}

/// One level's grid extent within an [`AnchorSet`].
#[derive(Clone, Debug)]
pub struct LevelGrid {
    pub level: PyramidLevel,
    pub grid: [usize; 3],
    pub base_size: f64,
    /// Linear id of this level's first anchor.
    pub offset: usize,
}

/// Immutable grid of anchors over all configured levels, with a flattened
/// `(level, z, y, x, a) <-> linear id` mapping.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    input_dims: [usize; 3],
    n_a: usize,
    levels: Vec<LevelGrid>,
    boxes: Vec<Box3D>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn anchors_per_location(&self) -> usize {
        self.n_a
    }

    pub fn levels(&self) -> &[LevelGrid] {
        &self.levels
    }

    pub fn boxes(&self) -> &[Box3D] {
        &self.boxes
    }

    /// Linear id for `(level_idx, z, y, x, a)` grid coordinates.
    pub fn linear_id(&self, level_idx: usize, z: usize, y: usize, x: usize, a: usize) -> usize {
        let lg = &self.levels[level_idx];
        lg.offset + (((z * lg.grid[1]) + y) * lg.grid[2] + x) * self.n_a + a
    }

    /// Inverse of [`Self::linear_id`].
    pub fn grid_coords(&self, id: usize) -> (usize, usize, usize, usize, usize) {
        let li = self
            .levels
            .iter()
            .rposition(|lg| id >= lg.offset)
            .expect("id below first level offset");
        let lg = &self.levels[li];
        let rel = id - lg.offset;
        let a = rel % self.n_a;
        let cell = rel / self.n_a;
        let x = cell % lg.grid[2];
        let y = (cell / lg.grid[2]) % lg.grid[1];
        let z = cell / (lg.grid[2] * lg.grid[1]);
        (li, z, y, x, a)
    }
}

/// Builds the deterministic anchor grid for a padded input extent.
pub fn build_anchor_grid(
    input_dims: [usize; 3],
    cfg: &AnchorConfig,
) -> Result<AnchorSet, AnchorError> {
    cfg.validate()?;
    if input_dims.iter().any(|d| d % 32 != 0) {
        return Err(AnchorError::DimsNotDivisible(input_dims));
    }
    let n_a = cfg.anchors_per_location();
    let mut levels = Vec::new();
    let mut boxes = Vec::new();
    let mut sorted_levels = cfg.levels.clone();
    sorted_levels.sort();
    sorted_levels.dedup();
    for level in sorted_levels {
        let stride = level.stride();
        let grid = [
            mathutil::div_ceil(input_dims[0], stride),
            mathutil::div_ceil(input_dims[1], stride),
            mathutil::div_ceil(input_dims[2], stride),
        ];
        let base = cfg.base_sizes[level.index()];
        levels.push(LevelGrid {
            level,
            grid,
            base_size: base,
            offset: boxes.len(),
        });
        let half_stride = stride as f64 / 2.0;
        for z in 0..grid[0] {
            for y in 0..grid[1] {
                for x in 0..grid[2] {
                    let cz = half_stride + (z * stride) as f64;
                    let cy = half_stride + (y * stride) as f64;
                    let cx = half_stride + (x * stride) as f64;
                    for &m in &cfg.scale_multipliers {
                        let half = base * m / 2.0;
                        boxes.push(
                            Box3D::new(
                                cz - half,
                                cy - half,
                                cx - half,
                                cz + half,
                                cy + half,
                                cx + half,
                            )
                            .expect("anchor box has positive extent"),
                        );
                    }
                }
            }
        }
    }
    Ok(AnchorSet {
        input_dims,
        n_a,
        levels,
        boxes,
    })
}

/// Anchor-relative box parameterization: center offsets normalized by the
/// anchor side plus log size ratios, per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Delta6 {
    pub tz: f64,
    pub ty: f64,
    pub tx: f64,
    pub td: f64,
    pub th: f64,
    pub tw: f64,
}

impl Delta6 {
    pub const ZERO: Delta6 = Delta6 {
        tz: 0.0,
        ty: 0.0,
        tx: 0.0,
        td: 0.0,
        th: 0.0,
        tw: 0.0,
    };

    pub fn to_array(self) -> [f64; 6] {
        [self.tz, self.ty, self.tx, self.td, self.th, self.tw]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Delta6 {
            tz: a[0],
            ty: a[1],
            tx: a[2],
            td: a[3],
            th: a[4],
            tw: a[5],
        }
    }
}

/// Encodes `gt` relative to `anchor`.
pub fn encode_deltas(anchor: &Box3D, gt: &Box3D) -> Delta6 {
    let ac = anchor.center();
    let asz = anchor.sides();
    let gc = gt.center();
    let gsz = gt.sides();
    Delta6 {
        tz: (gc[0] - ac[0]) / asz[0],
        ty: (gc[1] - ac[1]) / asz[1],
        tx: (gc[2] - ac[2]) / asz[2],
        td: mathutil::ln(gsz[0] / asz[0]),
        th: mathutil::ln(gsz[1] / asz[1]),
        tw: mathutil::ln(gsz[2] / asz[2]),
    }
}

/// Inverse of [`encode_deltas`]. Log size ratios are clamped to `[-4, 4]`
/// before exponentiation so wild regression outputs stay finite.
pub fn decode_deltas(anchor: &Box3D, d: &Delta6) -> Box3D {
    let ac = anchor.center();
    let asz = anchor.sides();
    let cz = ac[0] + d.tz * asz[0];
    let cy = ac[1] + d.ty * asz[1];
    let cx = ac[2] + d.tx * asz[2];
    let sd = asz[0] * mathutil::exp(d.td.clamp(-4.0, 4.0));
    let sh = asz[1] * mathutil::exp(d.th.clamp(-4.0, 4.0));
    let sw = asz[2] * mathutil::exp(d.tw.clamp(-4.0, 4.0));
    Box3D {
        z0: cz - sd / 2.0,
        y0: cy - sh / 2.0,
        x0: cx - sw / 2.0,
        z1: cz + sd / 2.0,
        y1: cy + sh / 2.0,
        x1: cx + sw / 2.0,
    }
}

/// Per-anchor assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Negative,
    Positive { class_id: usize, gt_index: usize },
}

/// Result of matching an anchor set against one scene's ground truth.
#[derive(Clone, Debug)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    /// Regression target for each positive anchor, `None` for negatives.
    pub deltas: Vec<Option<Delta6>>,
}

impl MatchResult {
    pub fn positive_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
            .count()
    }
}

/// Tie-break key for competing ground truths: higher IoU wins; exact ties
/// resolve by box corners then class so the outcome does not depend on the
/// order ground truths are listed in.
fn gt_beats(iou_a: f64, a: &Annotation, iou_b: f64, b: &Annotation) -> bool {
    if iou_a != iou_b {
        return iou_a > iou_b;
    }
    (a.box3.lex_key(), a.class_id) < (b.box3.lex_key(), b.class_id)
}

/// Labels every anchor against `gts` at IoU threshold `iou_t`.
///
/// An anchor is positive iff its max IoU over ground truths reaches `iou_t`
/// (taking the argmax ground truth's class). On top of that, each ground
/// truth's single best anchor is forced positive for it - ties between
/// anchors break toward the lowest linear id - so even instances below the
/// threshold everywhere keep one positive anchor. Empty `gts` labels
/// everything negative.
pub fn match_anchors(anchors: &AnchorSet, gts: &[Annotation], iou_t: f64) -> MatchResult {
    debug_assert!(iou_t > 0.0 && iou_t < 1.0);
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut deltas = vec![None; n];
    if gts.is_empty() {
        return MatchResult { labels, deltas };
    }

    // per-anchor argmax over gts
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    // per-gt argmax over anchors
    let mut gt_best_iou = vec![-1.0f64; gts.len()];
    let mut gt_best_anchor = vec![usize::MAX; gts.len()];

    for (ai, abox) in anchors.boxes().iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            let iou = iou3d(abox, &gt.box3);
            if best_gt[ai] == usize::MAX || gt_beats(iou, gt, best_iou[ai], &gts[best_gt[ai]]) {
                best_iou[ai] = iou;
                best_gt[ai] = gi;
            }
            if iou > gt_best_iou[gi] {
                // lowest anchor id wins ties because we only replace on strictly-greater
                gt_best_iou[gi] = iou;
                gt_best_anchor[gi] = ai;
            }
        }
    }

    for ai in 0..n {
        if best_iou[ai] >= iou_t {
            labels[ai] = AnchorLabel::Positive {
                class_id: gts[best_gt[ai]].class_id,
                gt_index: best_gt[ai],
            };
        }
    }

    // Force each gt's best anchor. When several gts claim the same anchor the
    // stronger claim wins; the forced assignment overrides a threshold
    // assignment so the per-gt guarantee holds.
    let mut forced: Vec<Option<usize>> = vec![None; n];
    for (gi, &ai) in gt_best_anchor.iter().enumerate() {
        if ai == usize::MAX {
            continue;
        }
        match forced[ai] {
            None => forced[ai] = Some(gi),
            Some(prev) => {
                if gt_beats(gt_best_iou[gi], &gts[gi], gt_best_iou[prev], &gts[prev]) {
                    forced[ai] = Some(gi);
                }
            }
        }
    }
    for (ai, f) in forced.iter().enumerate() {
        if let Some(gi) = *f {
            labels[ai] = AnchorLabel::Positive {
                class_id: gts[gi].class_id,
                gt_index: gi,
            };
        }
    }

    for ai in 0..n {
        if let AnchorLabel::Positive { gt_index, .. } = labels[ai] {
            deltas[ai] = Some(encode_deltas(&anchors.boxes()[ai], &gts[gt_index].box3));
        }
    }

    MatchResult { labels, deltas }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid64() -> AnchorSet {
        build_anchor_grid([64, 64, 64], &AnchorConfig::default()).unwrap()
    }

    #[test]
    fn level_counts_on_64_cube() {
        let set = grid64();
        let counts: Vec<usize> = set
            .levels()
            .iter()
            .map(|lg| lg.grid.iter().product::<usize>() * set.anchors_per_location())
            .collect();
        assert_eq!(counts, vec![4096, 512, 64, 8]);
        assert_eq!(set.len(), 4680);
    }

    #[test]
    fn multipliers_replicate_per_location() {
        let cfg = AnchorConfig {
            scale_multipliers: vec![0.5, 1.0, 2.0],
            ..AnchorConfig::default()
        };
        let set = build_anchor_grid([64, 64, 64], &cfg).unwrap();
        assert_eq!(set.len(), 3 * 4680);
    }

    #[test]
    fn p5_origin_anchor_center_and_side() {
        let set = grid64();
        let p5_offset = set.levels()[3].offset;
        let b = set.boxes()[p5_offset];
        assert_eq!(b.center(), [16.0, 16.0, 16.0]);
        assert_eq!(b.sides(), [64.0, 64.0, 64.0]);
    }

    #[test]
    fn linear_id_roundtrip() {
        let set = grid64();
        for &id in &[0usize, 1, 4095, 4096, 4607, 4608, 4671, 4672, 4679] {
            let (li, z, y, x, a) = set.grid_coords(id);
            assert_eq!(set.linear_id(li, z, y, x, a), id);
        }
    }

    #[test]
    fn rejects_unpadded_dims() {
        let err = build_anchor_grid([48, 64, 64], &AnchorConfig::default()).unwrap_err();
        assert_eq!(err, AnchorError::DimsNotDivisible([48, 64, 64]));
    }

    #[test]
    fn delta_identity_and_hand_example() {
        let anchor = Box3D::new(4.0, 4.0, 4.0, 12.0, 12.0, 12.0).unwrap(); // side 8 at (8,8,8)
        assert_eq!(encode_deltas(&anchor, &anchor), Delta6::ZERO);

        // gt side 16 centered (12,8,8): offset 4/8 on z, size ratio 2 on all axes
        let gt = Box3D::new(4.0, 0.0, 0.0, 20.0, 16.0, 16.0).unwrap();
        let d = encode_deltas(&anchor, &gt);
        assert!((d.tz - 0.5).abs() < 1e-12);
        assert_eq!((d.ty, d.tx), (0.0, 0.0));
        let ln2 = core::f64::consts::LN_2;
        assert!((d.td - ln2).abs() < 1e-12);
        assert!((d.th - ln2).abs() < 1e-12);
        assert!((d.tw - ln2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            az in 0.0f64..40.0, ay in 0.0f64..40.0, ax in 0.0f64..40.0,
            asz in 2.0f64..32.0,
            gz in 0.0f64..40.0, gy in 0.0f64..40.0, gx in 0.0f64..40.0,
            gd in 1.0f64..50.0, gh in 1.0f64..50.0, gw in 1.0f64..50.0,
        ) {
            let anchor = Box3D::new(az, ay, ax, az + asz, ay + asz, ax + asz).unwrap();
            let gt = Box3D::new(gz, gy, gx, gz + gd, gy + gh, gx + gw).unwrap();
            let rt = decode_deltas(&anchor, &encode_deltas(&anchor, &gt));
            for (a, b) in rt.lex_key().iter().zip(gt.lex_key()) {
                let (a, b) = (f64::from_bits(*a), f64::from_bits(b));
                prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn decode_clamps_log_ratios() {
        let anchor = Box3D::new(0.0, 0.0, 0.0, 8.0, 8.0, 8.0).unwrap();
        let d = Delta6 {
            td: 100.0,
            ..Delta6::ZERO
        };
        let b = decode_deltas(&anchor, &d);
        assert!((b.sides()[0] - 8.0 * mathutil::exp(4.0)).abs() < 1e-9);
    }

    /// O(A*G) reference matcher: recomputes every pairwise IoU and applies
    /// the documented assignment rules directly.
    fn brute_force_match(anchors: &AnchorSet, gts: &[Annotation], iou_t: f64) -> Vec<AnchorLabel> {
        let mut labels = vec![AnchorLabel::Negative; anchors.len()];
        for (ai, ab) in anchors.boxes().iter().enumerate() {
            let mut best: Option<(f64, usize)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                let iou = iou3d(ab, &gt.box3);
                let replace = match best {
                    None => true,
                    Some((bi, bg)) => gt_beats(iou, gt, bi, &gts[bg]),
                };
                if replace {
                    best = Some((iou, gi));
                }
            }
            if let Some((iou, gi)) = best {
                if iou >= iou_t {
                    labels[ai] = AnchorLabel::Positive {
                        class_id: gts[gi].class_id,
                        gt_index: gi,
                    };
                }
            }
        }
        // forced positives: each gt claims its best anchor (lowest id on
        // ties); contested anchors go to the stronger claim
        let mut claims: Vec<Option<(f64, usize)>> = vec![None; anchors.len()];
        for (gi, gt) in gts.iter().enumerate() {
            let mut best_iou = -1.0;
            let mut best_ai = usize::MAX;
            for (ai, ab) in anchors.boxes().iter().enumerate() {
                let iou = iou3d(ab, &gt.box3);
                if iou > best_iou {
                    best_iou = iou;
                    best_ai = ai;
                }
            }
            let replace = match claims[best_ai] {
                None => true,
                Some((iou, prev)) => gt_beats(best_iou, gt, iou, &gts[prev]),
            };
            if replace {
                claims[best_ai] = Some((best_iou, gi));
            }
        }
        for (ai, claim) in claims.iter().enumerate() {
            if let Some((_, gi)) = *claim {
                labels[ai] = AnchorLabel::Positive {
                    class_id: gts[gi].class_id,
                    gt_index: gi,
                };
            }
        }
        labels
    }

    fn random_scene(seed: u64, n: usize, dims: [usize; 3]) -> Vec<Annotation> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|i| {
                let z0 = rng.random_range(0..dims[0] - 8);
                let y0 = rng.random_range(0..dims[1] - 8);
                let x0 = rng.random_range(0..dims[2] - 8);
                let dz = rng.random_range(3..=16).min(dims[0] - z0);
                let dy = rng.random_range(3..=16).min(dims[1] - y0);
                let dx = rng.random_range(3..=16).min(dims[2] - x0);
                Annotation {
                    box3: Box3D::from_voxels(z0, y0, x0, z0 + dz, y0 + dy, x0 + dx),
                    class_id: rng.random_range(0..5),
                    instance_id: i as u32,
                }
            })
            .collect()
    }

    #[test]
    fn empty_ground_truth_labels_all_negative() {
        let set = grid64();
        let m = match_anchors(&set, &[], 0.1);
        assert_eq!(m.positive_count(), 0);
    }

    #[test]
    fn identity_anchor_matches_with_zero_delta() {
        let set = grid64();
        let p5 = set.levels()[3].offset;
        let gt = Annotation {
            box3: set.boxes()[p5],
            class_id: 2,
            instance_id: 0,
        };
        let m = match_anchors(&set, &[gt], 0.1);
        assert_eq!(
            m.labels[p5],
            AnchorLabel::Positive {
                class_id: 2,
                gt_index: 0
            }
        );
        assert_eq!(m.deltas[p5], Some(Delta6::ZERO));
    }

    #[test]
    fn matches_brute_force_on_random_scenes() {
        let set = grid64();
        for seed in 0..8 {
            let gts = random_scene(seed, 5, [64, 64, 64]);
            let fast = match_anchors(&set, &gts, 0.1);
            let slow = brute_force_match(&set, &gts, 0.1);
            assert_eq!(fast.labels, slow, "seed {seed}");
        }
    }

    #[test]
    fn every_gt_gets_a_positive_even_below_threshold() {
        let set = grid64();
        // 1-voxel box: IoU with every anchor is far below 0.1
        let gts = vec![Annotation {
            box3: Box3D::from_voxels(30, 30, 30, 31, 31, 31),
            class_id: 4,
            instance_id: 0,
        }];
        let m = match_anchors(&set, &gts, 0.1);
        assert_eq!(m.positive_count(), 1);
    }

    #[test]
    fn permutation_invariant_up_to_gt_relabeling() {
        let set = grid64();
        let gts = random_scene(99, 4, [64, 64, 64]);
        let mut rev = gts.clone();
        rev.reverse();
        let a = match_anchors(&set, &gts, 0.1);
        let b = match_anchors(&set, &rev, 0.1);
        for ai in 0..set.len() {
            match (a.labels[ai], b.labels[ai]) {
                (AnchorLabel::Negative, AnchorLabel::Negative) => {}
                (
                    AnchorLabel::Positive {
                        class_id: ca,
                        gt_index: ga,
                    },
                    AnchorLabel::Positive {
                        class_id: cb,
                        gt_index: gb,
                    },
                ) => {
                    assert_eq!(ca, cb);
                    assert_eq!(gts[ga].box3, rev[gb].box3);
                }
                (x, y) => panic!("anchor {ai}: {x:?} vs {y:?}"),
            }
        }
    }

    #[test]
    fn grid_counts_match_closed_form_for_divisible_dims() {
        for dims in [[32usize, 64, 96], [64, 64, 64], [96, 32, 32]] {
            let set = build_anchor_grid(dims, &AnchorConfig::default()).unwrap();
            let expect: usize = [4usize, 8, 16, 32]
                .iter()
                .map(|s| (dims[0] / s) * (dims[1] / s) * (dims[2] / s))
                .sum();
            assert_eq!(set.len(), expect);
        }
    }
}
