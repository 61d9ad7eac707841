//! The training loop: per-epoch shuffled passes of resample, pad, augment,
//! match, forward, loss, and an Adam step, under a three-stage learning-rate
//! schedule. Fully deterministic given the config seeds.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::loss::{loss_and_grads, LossError, LossParts, TrainConfig};
use super::model::{DetectorModel, Grads, NetError};
use super::optim::AdamState;
use super::tensor::Tensor;
use crate::anchors::{build_anchor_grid, match_anchors, AnchorConfig, AnchorError, AnchorSet};
use crate::augment::{random_augment, AugmentConfig};
use crate::rng::sample_rng;
use crate::vol::{pad_to_multiple, resample, rescale_boxes, Annotation, ScaleConfig, Volume};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptySplit,
    #[error("non-finite loss at epoch {epoch}, sample {sample}: cls {cls}, reg {reg}")]
    NonFiniteLoss {
        epoch: usize,
        sample: usize,
        cls: f64,
        reg: f64,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error("invalid train config")]
    BadConfig,
}

/// One training example: a volume and its ground truth.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub volume: Volume,
    pub annotations: Vec<Annotation>,
}

/// Everything the loop needs besides the model and data.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub scale: ScaleConfig,
    pub anchors: AnchorConfig,
    pub match_iou: f64,
    pub aug: AugmentConfig,
    pub train: TrainConfig,
}

impl Default for TrainSetup {
    fn default() -> Self {
        TrainSetup {
            scale: ScaleConfig::default(),
            anchors: AnchorConfig::default(),
            match_iou: 0.1,
            aug: AugmentConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

/// Per-epoch mean losses and learning rates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    /// `epoch,lr,cls_loss,reg_loss,total` lines.
    pub fn to_lines(&self) -> String {
        let mut s = String::from("epoch,lr,cls_loss,reg_loss,total\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:e},{:.6},{:.6},{:.6}\n",
                e.epoch, e.lr, e.cls_loss, e.reg_loss, e.total
            ));
        }
        s
    }
}

/// Snapshot handed to the stage-boundary callback.
pub struct StageCheckpoint<'a> {
    /// Zero-based stage index that just finished.
    pub stage: usize,
    /// One-based epoch the stage ended on.
    pub epoch: usize,
    pub model: &'a DetectorModel,
    pub adam: &'a AdamState,
}

/// Prepares one sample for the network: resample, pad to the stride
/// multiple, then (optionally) augment.
pub fn prepare_sample(
    sample: &TrainSample,
    scale: ScaleConfig,
    aug: Option<(&AugmentConfig, &mut rand_chacha::ChaCha8Rng)>,
) -> (Volume, Vec<Annotation>) {
    let orig_dims = sample.volume.dims();
    let (mut vol, mut boxes) = if scale.factor() > 1 {
        let v = resample(&sample.volume, scale);
        let b = rescale_boxes(
            &sample
                .annotations
                .iter()
                .map(|a| a.box3)
                .collect::<Vec<_>>(),
            scale,
            orig_dims,
        );
        (v, b)
    } else {
        (
            sample.volume.clone(),
            sample.annotations.iter().map(|a| a.box3).collect(),
        )
    };
    let (padded, _) = pad_to_multiple(&vol, 32);
    vol = padded;
    if let Some((cfg, rng)) = aug {
        let (av, ab, _) = random_augment(&vol, &boxes, cfg, rng);
        vol = av;
        boxes = ab;
    }
    let anns = sample
        .annotations
        .iter()
        .zip(boxes)
        .map(|(a, box3)| Annotation { box3, ..a.clone() })
        .collect();
    (vol, anns)
}

/// Learning rate and stage for a zero-based epoch index.
fn stage_of(cfg: &TrainConfig, epoch: usize) -> (usize, f64) {
    let mut e = epoch;
    for (i, &(lr, n)) in cfg.lr_stages.iter().enumerate() {
        if e < n {
            return (i, lr);
        }
        e -= n;
    }
    let last = cfg.lr_stages.len() - 1;
    (last, cfg.lr_stages[last].0)
}

/// Runs the staged training loop. `on_stage` fires after the last epoch of
/// each learning-rate stage with the current model and optimizer state.
pub fn train(
    model: &mut DetectorModel,
    data: &[TrainSample],
    setup: &TrainSetup,
    mut on_stage: impl FnMut(StageCheckpoint<'_>),
) -> Result<TrainLog, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if !setup.train.validate() || !setup.aug.validate() {
        return Err(TrainError::BadConfig);
    }
    let n = data.len();
    let total_epochs = setup.train.total_epochs();
    let mut adam = AdamState::new(model.params());
    let mut grads = Grads::zeros_like(model.params());
    let mut anchor_cache: BTreeMap<[usize; 3], AnchorSet> = BTreeMap::new();
    let mut log = TrainLog::default();

    // distinct stream spaces: shuffling draws from the train seed high up,
    // per-sample augmentation from (aug seed, epoch * n + index)
    const SHUFFLE_STREAM_BASE: u64 = 1 << 40;

    for epoch in 0..total_epochs {
        let (stage, lr) = stage_of(&setup.train, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = sample_rng(setup.train.seed, SHUFFLE_STREAM_BASE + epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = LossParts {
            cls: 0.0,
            reg: 0.0,
            total: 0.0,
        };
        for chunk in order.chunks(setup.train.batch_size) {
            grads.zero();
            let inv_batch = 1.0 / chunk.len() as f32;
            for &si in chunk {
                let mut aug_rng =
                    sample_rng(setup.aug.seed, (epoch * n + si) as u64);
                let (vol, anns) =
                    prepare_sample(&data[si], setup.scale, Some((&setup.aug, &mut aug_rng)));
                let dims = vol.dims();
                let anchors = match anchor_cache.get(&dims) {
                    Some(a) => a,
                    None => {
                        let built = build_anchor_grid(dims, &setup.anchors)?;
                        anchor_cache.insert(dims, built);
                        anchor_cache.get(&dims).expect("just inserted")
                    }
                };
                let matches = match_anchors(anchors, &anns, setup.match_iou);
                let (outputs, cache) = model.forward_cached(Tensor::from_volume(&vol))?;
                let (parts, mut dcls, mut dreg) =
                    loss_and_grads(&outputs, anchors, &matches, &setup.train)?;
                if !parts.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch: epoch + 1,
                        sample: si,
                        cls: parts.cls,
                        reg: parts.reg,
                    });
                }
                epoch_loss.cls += parts.cls;
                epoch_loss.reg += parts.reg;
                epoch_loss.total += parts.total;
                for t in dcls.iter_mut().chain(dreg.iter_mut()) {
                    t.scale(inv_batch);
                }
                model.backward(&cache, &dcls, &dreg, &mut grads);
            }
            adam.step(model.params_mut(), &grads, lr);
        }

        let inv = 1.0 / n as f64;
        log.epochs.push(EpochStats {
            epoch: epoch + 1,
            lr,
            cls_loss: epoch_loss.cls * inv,
            reg_loss: epoch_loss.reg * inv,
            total: epoch_loss.total * inv,
        });

        let stage_end = {
            let done: usize = setup.train.lr_stages[..=stage].iter().map(|&(_, e)| e).sum();
            epoch + 1 == done
        };
        if stage_end {
            on_stage(StageCheckpoint {
                stage,
                epoch: epoch + 1,
                model,
                adam: &adam,
            });
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::NetConfig;
    use crate::synth::{generate_bag, BagSpec};
    use crate::vol::DEFAULT_CLASS_COUNT;

    fn tiny_setup() -> TrainSetup {
        TrainSetup {
            scale: ScaleConfig::new(1).unwrap(),
            train: TrainConfig {
                lr_stages: [(1e-3, 1), (1e-4, 1), (1e-5, 1)],
                batch_size: 2,
                ..TrainConfig::default()
            },
            ..TrainSetup::default()
        }
    }

    fn tiny_model(seed: u64) -> DetectorModel {
        DetectorModel::new(
            NetConfig {
                backbone: crate::net::model::BackboneConfig {
                    depth: 10,
                    widths: [4, 4, 8, 8],
                    in_channels: 1,
                },
                fpn_width: 8,
                head_depth: 2,
                ..NetConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_data(n: usize) -> Vec<TrainSample> {
        (0..n)
            .map(|i| {
                let spec = BagSpec {
                    dims: [32, 32, 32],
                    clutter_count: (1, 3),
                    class_counts: [(1, 1), (0, 0), (0, 0), (0, 0), (0, 0)],
                    seed: 1000 + i as u64,
                    ..BagSpec::default()
                };
                let (volume, annotations) = generate_bag(&spec).unwrap();
                TrainSample {
                    volume,
                    annotations,
                }
            })
            .collect()
    }

    #[test]
    fn log_has_one_entry_per_epoch_with_staged_lrs() {
        let mut model = tiny_model(1);
        let data = tiny_data(2);
        let mut stages = Vec::new();
        let log = train(&mut model, &data, &tiny_setup(), |cp| {
            stages.push((cp.stage, cp.epoch));
        })
        .unwrap();
        assert_eq!(log.epochs.len(), 3);
        let lrs: Vec<f64> = log.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(lrs, vec![1e-3, 1e-4, 1e-5]);
        assert_eq!(stages, vec![(0, 1), (1, 2), (2, 3)]);
        let lines = log.to_lines();
        assert!(lines.starts_with("epoch,lr,cls_loss,reg_loss,total\n"));
        assert_eq!(lines.lines().count(), 4);
    }

    #[test]
    fn same_seed_reproduces_parameters_bit_for_bit() {
        let data = tiny_data(3);
        let mut run = || {
            let mut model = tiny_model(7);
            train(&mut model, &data, &tiny_setup(), |_| {}).unwrap();
            let store = model.params();
            (0..store.entry_count())
                .flat_map(|i| store.values(i).iter().map(|f| f.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_split_is_an_error() {
        let mut model = tiny_model(1);
        assert_eq!(
            train(&mut model, &[], &tiny_setup(), |_| {}).unwrap_err(),
            TrainError::EmptySplit
        );
    }

    #[test]
    fn padded_dims_reach_the_anchor_grid() {
        // 48^3 volumes pad to 64^3 before matching; this must not error
        let spec = BagSpec {
            dims: [48, 48, 48],
            class_counts: [(1, 1), (0, 0), (0, 0), (0, 0), (0, 0)],
            seed: 3,
            ..BagSpec::default()
        };
        let (volume, annotations) = generate_bag(&spec).unwrap();
        let sample = TrainSample {
            volume,
            annotations,
        };
        let (vol, anns) = prepare_sample(&sample, ScaleConfig::new(1).unwrap(), None);
        assert_eq!(vol.dims(), [64, 64, 64]);
        assert_eq!(anns.len(), sample.annotations.len());
    }

    #[test]
    fn resample_path_scales_boxes() {
        let spec = BagSpec {
            dims: [48, 48, 48],
            class_counts: [(0, 0), (1, 1), (0, 0), (0, 0), (0, 0)],
            seed: 4,
            ..BagSpec::default()
        };
        let (volume, annotations) = generate_bag(&spec).unwrap();
        let orig_box = annotations[0].box3;
        let sample = TrainSample {
            volume,
            annotations,
        };
        let (vol, anns) = prepare_sample(&sample, ScaleConfig::new(2).unwrap(), None);
        // 48/2 = 24, padded to 32
        assert_eq!(vol.dims(), [32, 32, 32]);
        let scaled = anns[0].box3;
        assert!((scaled.z0 - orig_box.z0 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn loss_decreases_when_overfitting_few_volumes() {
        let mut model = tiny_model(11);
        let data = tiny_data(2);
        let setup = TrainSetup {
            train: TrainConfig {
                lr_stages: [(1e-3, 8), (1e-4, 1), (1e-5, 1)],
                batch_size: 2,
                ..TrainConfig::default()
            },
            aug: AugmentConfig {
                p: 0.0,
                ..AugmentConfig::default()
            },
            scale: ScaleConfig::new(1).unwrap(),
            ..TrainSetup::default()
        };
        let log = train(&mut model, &data, &setup, |_| {}).unwrap();
        let first = log.epochs.first().unwrap().total;
        let last = log.epochs.last().unwrap().total;
        assert!(
            last < first,
            "loss should fall while overfitting: {first} -> {last}"
        );
    }

    #[test]
    fn all_class_counts_zero_still_trains_on_negatives() {
        let mut model = tiny_model(2);
        let spec = BagSpec {
            dims: [32, 32, 32],
            class_counts: [(0, 0); DEFAULT_CLASS_COUNT],
            seed: 9,
            ..BagSpec::default()
        };
        let (volume, annotations) = generate_bag(&spec).unwrap();
        let data = vec![TrainSample {
            volume,
            annotations,
        }];
        let log = train(&mut model, &data, &tiny_setup(), |_| {}).unwrap();
        assert!(log.epochs.iter().all(|e| e.reg_loss == 0.0));
        assert!(log.epochs.iter().all(|e| e.cls_loss.is_finite()));
    }
}
