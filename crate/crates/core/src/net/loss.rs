//! Classification and regression losses over matched anchors.
//!
//! Classification is softmax cross-entropy over `1 + K` classes (channel 0
//! is background), averaged over the positive anchors plus the hardest
//! negatives at a fixed ratio. Regression is smooth-L1 on the anchor deltas
//! of positive anchors. A focal variant over all anchors is available behind
//! a config flag.

use alloc::vec::Vec;

use super::model::{HeadOutputs, LevelOutput};
use super::tensor::Tensor;
use crate::anchors::{AnchorLabel, AnchorSet, MatchResult};
use crate::mathutil;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("head outputs missing pyramid level {0:?}")]
    MissingLevel(crate::anchors::PyramidLevel),
    #[error("anchor grid {grid:?} does not match head output dims {out:?}")]
    GridMismatch { grid: [usize; 3], out: [usize; 3] },
    #[error("match result covers {got} anchors, anchor set has {want}")]
    AnchorCountMismatch { got: usize, want: usize },
    #[error("head outputs have {got} channels, expected {want}")]
    ChannelMismatch { got: usize, want: usize },
}

/// Loss decomposition; `total = cls + reg` exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.cls.is_finite() && self.reg.is_finite() && self.total.is_finite()
    }
}

/// Optimizer and loss settings for a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// `(learning rate, epochs)` per stage; rates must strictly decrease.
    pub lr_stages: [(f64, usize); 3],
    pub batch_size: usize,
    /// Hard negatives mined per positive anchor.
    pub neg_ratio: usize,
    pub seed: u64,
    /// Use the focal classification loss over all anchors instead of
    /// hard-negative mining.
    pub focal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_stages: [(1e-3, 20), (1e-4, 20), (1e-5, 20)],
            batch_size: 2,
            neg_ratio: 3,
            seed: 0,
            focal: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> bool {
        self.lr_stages.windows(2).all(|w| w[0].0 > w[1].0)
            && self.lr_stages.iter().all(|&(lr, e)| lr > 0.0 && e >= 1)
            && self.batch_size >= 1
    }

    pub fn total_epochs(&self) -> usize {
        self.lr_stages.iter().map(|&(_, e)| e).sum()
    }
}

const FOCAL_GAMMA: f64 = 2.0;

struct LevelView<'a> {
    out: &'a LevelOutput,
    offset: usize,
    n_a: usize,
    classes: usize,
    spatial: usize,
}

/// Resolves the per-level anchor-id layout against the head output tensors.
fn level_views<'a>(
    outputs: &'a HeadOutputs,
    anchors: &AnchorSet,
) -> Result<Vec<LevelView<'a>>, LossError> {
    let n_a = anchors.anchors_per_location();
    let mut views = Vec::new();
    for lg in anchors.levels() {
        let out = outputs
            .level(lg.level)
            .ok_or(LossError::MissingLevel(lg.level))?;
        let odims = [out.cls.d, out.cls.h, out.cls.w];
        if odims != lg.grid {
            return Err(LossError::GridMismatch {
                grid: lg.grid,
                out: odims,
            });
        }
        if out.cls.c % n_a != 0 || out.reg.c != 6 * n_a {
            return Err(LossError::ChannelMismatch {
                got: out.cls.c,
                want: out.reg.c,
            });
        }
        views.push(LevelView {
            out,
            offset: lg.offset,
            n_a,
            classes: out.cls.c / n_a,
            spatial: lg.grid.iter().product(),
        });
    }
    Ok(views)
}

/// Softmax probabilities of one anchor's class block.
fn softmax_at(cls: &Tensor, cell: usize, a: usize, classes: usize, spatial: usize) -> Vec<f64> {
    let mut logits = Vec::with_capacity(classes);
    for k in 0..classes {
        logits.push(cls.data[(a * classes + k) * spatial + cell] as f64);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits.iter().map(|&l| mathutil::exp(l - m)).collect();
    let sum: f64 = exps.iter().sum();
    for e in exps.iter_mut() {
        *e /= sum;
    }
    exps
}

/// Computes [`LossParts`] together with the head-output gradients (one
/// cls/reg tensor pair per pyramid level, in anchor-set level order).
pub fn loss_and_grads(
    outputs: &HeadOutputs,
    anchors: &AnchorSet,
    matches: &MatchResult,
    cfg: &TrainConfig,
) -> Result<(LossParts, Vec<Tensor>, Vec<Tensor>), LossError> {
    if matches.labels.len() != anchors.len() {
        return Err(LossError::AnchorCountMismatch {
            got: matches.labels.len(),
            want: anchors.len(),
        });
    }
    let views = level_views(outputs, anchors)?;
    let mut dcls: Vec<Tensor> = views
        .iter()
        .map(|v| Tensor::zeros(v.out.cls.c, v.out.cls.d, v.out.cls.h, v.out.cls.w))
        .collect();
    let mut dreg: Vec<Tensor> = views
        .iter()
        .map(|v| Tensor::zeros(v.out.reg.c, v.out.reg.d, v.out.reg.h, v.out.reg.w))
        .collect();

    // anchor id -> (view index, cell, a)
    let locate = |views: &[LevelView], id: usize| -> (usize, usize, usize) {
        let vi = views
            .iter()
            .rposition(|v| id >= v.offset)
            .expect("id within first level");
        let rel = id - views[vi].offset;
        (vi, rel / views[vi].n_a, rel % views[vi].n_a)
    };

    let positives: Vec<usize> = matches
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| matches!(l, AnchorLabel::Positive { .. }).then_some(i))
        .collect();
    let n_pos = positives.len();

    let mut cls_loss = 0.0f64;
    if cfg.focal {
        // focal loss over every anchor, normalized by positives
        let norm = n_pos.max(1) as f64;
        for id in 0..anchors.len() {
            let (vi, cell, a) = locate(&views, id);
            let v = &views[vi];
            let p = softmax_at(&v.out.cls, cell, a, v.classes, v.spatial);
            let target = match matches.labels[id] {
                AnchorLabel::Positive { class_id, .. } => 1 + class_id,
                AnchorLabel::Negative => 0,
            };
            let pt = p[target].max(1e-12);
            let one_minus = 1.0 - pt;
            cls_loss += -mathutil::ln(pt) * one_minus.powi(FOCAL_GAMMA as i32) / norm;
            let dfl_dpt = (FOCAL_GAMMA * one_minus.powi(FOCAL_GAMMA as i32 - 1) * mathutil::ln(pt)
                - one_minus.powi(FOCAL_GAMMA as i32) / pt)
                / norm;
            for k in 0..v.classes {
                let dpt_dlk = pt * ((k == target) as u8 as f64 - p[k]);
                dcls[vi].data[(a * v.classes + k) * v.spatial + cell] +=
                    (dfl_dpt * dpt_dlk) as f32;
            }
        }
    } else {
        // hard-negative mining: rank negatives by foreground probability
        let n_neg_target = if n_pos > 0 { cfg.neg_ratio * n_pos } else { 1 };
        let mut neg_scores: Vec<(f64, usize)> = Vec::new();
        for id in 0..anchors.len() {
            if matches!(matches.labels[id], AnchorLabel::Negative) {
                let (vi, cell, a) = locate(&views, id);
                let v = &views[vi];
                let p = softmax_at(&v.out.cls, cell, a, v.classes, v.spatial);
                neg_scores.push((1.0 - p[0], id));
            }
        }
        neg_scores.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        neg_scores.truncate(n_neg_target);

        let selected: Vec<(usize, usize)> = positives
            .iter()
            .map(|&id| {
                let target = match matches.labels[id] {
                    AnchorLabel::Positive { class_id, .. } => 1 + class_id,
                    AnchorLabel::Negative => unreachable!(),
                };
                (id, target)
            })
            .chain(neg_scores.iter().map(|&(_, id)| (id, 0usize)))
            .collect();
        let n_sel = selected.len().max(1) as f64;
        for (id, target) in selected {
            let (vi, cell, a) = locate(&views, id);
            let v = &views[vi];
            let p = softmax_at(&v.out.cls, cell, a, v.classes, v.spatial);
            cls_loss += -mathutil::ln(p[target].max(1e-12)) / n_sel;
            for k in 0..v.classes {
                let g = (p[k] - (k == target) as u8 as f64) / n_sel;
                dcls[vi].data[(a * v.classes + k) * v.spatial + cell] += g as f32;
            }
        }
    }

    // smooth-L1 on positive anchor deltas, averaged over positives
    let mut reg_loss = 0.0f64;
    if n_pos > 0 {
        let inv = 1.0 / n_pos as f64;
        for &id in &positives {
            let target = matches.deltas[id].expect("positive anchors carry deltas");
            let (vi, cell, a) = locate(&views, id);
            let v = &views[vi];
            let t = target.to_array();
            for j in 0..6 {
                let pred = v.out.reg.data[(a * 6 + j) * v.spatial + cell] as f64;
                let diff = pred - t[j];
                let (l, g) = if diff.abs() < 1.0 {
                    (0.5 * diff * diff, diff)
                } else {
                    (diff.abs() - 0.5, diff.signum())
                };
                reg_loss += l * inv;
                dreg[vi].data[(a * 6 + j) * v.spatial + cell] += (g * inv) as f32;
            }
        }
    }

    let parts = LossParts {
        cls: cls_loss,
        reg: reg_loss,
        total: cls_loss + reg_loss,
    };
    Ok((parts, dcls, dreg))
}

/// Loss without gradient tensors.
pub fn compute_loss(
    outputs: &HeadOutputs,
    anchors: &AnchorSet,
    matches: &MatchResult,
    cfg: &TrainConfig,
) -> Result<LossParts, LossError> {
    loss_and_grads(outputs, anchors, matches, cfg).map(|(parts, _, _)| parts)
}
