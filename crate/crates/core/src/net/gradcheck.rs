//! Central finite-difference check of the analytic gradients through the
//! whole model and loss.


use super::loss::{compute_loss, loss_and_grads, TrainConfig};
use super::model::{DetectorModel, Grads};
use super::tensor::Tensor;
use super::train::{prepare_sample, TrainError, TrainSample};
use crate::anchors::{build_anchor_grid, match_anchors, AnchorConfig};
use crate::vol::ScaleConfig;

/// Relative-error noise floor: differences below this magnitude are compared
/// against it rather than against each other, since central differences on
/// f32 forwards cannot resolve them.
const REL_FLOOR: f64 = 1e-3;

/// Compares analytic parameter gradients against central differences at
/// step `eps` and returns the maximum relative error over every parameter.
///
/// Intended for tiny configurations (a few thousand parameters); cost is two
/// forward passes per parameter.
pub fn grad_check(
    model: &mut DetectorModel,
    sample: &TrainSample,
    anchor_cfg: &AnchorConfig,
    match_iou: f64,
    train_cfg: &TrainConfig,
    eps: f32,
) -> Result<f64, TrainError> {
    let (vol, anns) = prepare_sample(sample, ScaleConfig::new(1).expect("s=1"), None);
    let anchors = build_anchor_grid(vol.dims(), anchor_cfg)?;
    let matches = match_anchors(&anchors, &anns, match_iou);
    let x = Tensor::from_volume(&vol);

    // analytic gradients
    let mut grads = Grads::zeros_like(model.params());
    let (outputs, cache) = model.forward_cached(x.clone())?;
    let (_, dcls, dreg) = loss_and_grads(&outputs, &anchors, &matches, train_cfg)?;
    model.backward(&cache, &dcls, &dreg, &mut grads);

    let eval = |model: &DetectorModel| -> Result<f64, TrainError> {
        let (outputs, _) = model.forward_cached(x.clone())?;
        Ok(compute_loss(&outputs, &anchors, &matches, train_cfg)?.total)
    };

    let mut max_rel = 0.0f64;
    let entries = model.params().entry_count();
    for e in 0..entries {
        let len = model.params().values(e).len();
        for j in 0..len {
            let orig = model.params().values(e)[j];
            model.params_mut().values_mut(e)[j] = orig + eps;
            let lp = eval(model)?;
            model.params_mut().values_mut(e)[j] = orig - eps;
            let lm = eval(model)?;
            model.params_mut().values_mut(e)[j] = orig;
            let numeric = (lp - lm) / (2.0 * eps as f64);
            let analytic = grads.buf(e)[j] as f64;
            let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Total number of scalar parameters; small models keep the check fast.
pub fn parameter_count(model: &DetectorModel) -> usize {
    model.params().scalar_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::{BackboneConfig, NetConfig};
    use crate::synth::{generate_bag, BagSpec};
    use alloc::vec;

    pub(crate) fn tiny_model_and_sample() -> (DetectorModel, TrainSample) {
        let model = DetectorModel::new(
            NetConfig {
                backbone: BackboneConfig {
                    depth: 10,
                    widths: [2, 2, 2, 2],
                    in_channels: 1,
                },
                fpn_width: 2,
                head_depth: 4,
                class_count: 5,
                anchors_per_location: 1,
                norm_groups: 8,
            },
            42,
        )
        .unwrap();
        let spec = BagSpec {
            dims: [32, 32, 32],
            clutter_count: (2, 4),
            class_counts: [(0, 0), (1, 1), (0, 0), (0, 0), (0, 0)],
            seed: 5,
            ..BagSpec::default()
        };
        let (volume, annotations) = generate_bag(&spec).unwrap();
        (
            model,
            TrainSample {
                volume,
                annotations,
            },
        )
    }

    #[test]
    fn tiny_model_stays_under_budget() {
        let (model, _) = tiny_model_and_sample();
        assert!(
            parameter_count(&model) <= 5000,
            "{} params",
            parameter_count(&model)
        );
    }

    #[test]
    fn analytic_matches_central_differences() {
        let (mut model, sample) = tiny_model_and_sample();
        let max_rel = grad_check(
            &mut model,
            &sample,
            &AnchorConfig::default(),
            0.1,
            &TrainConfig::default(),
            1e-3,
        )
        .unwrap();
        assert!(max_rel < 1e-2, "max relative error {max_rel}");
    }

    #[test]
    fn focal_path_gradients_also_check_out() {
        let (mut model, sample) = tiny_model_and_sample();
        let cfg = TrainConfig {
            focal: true,
            ..TrainConfig::default()
        };
        let max_rel = grad_check(
            &mut model,
            &sample,
            &AnchorConfig::default(),
            0.1,
            &cfg,
            1e-3,
        )
        .unwrap();
        assert!(max_rel < 1e-2, "max relative error {max_rel}");
    }

    #[test]
    fn background_loss_is_flip_invariant_for_constant_models() {
        // with all parameters zeroed the network output is spatially
        // constant, so an input and its z-flip see identical background-only
        // classification losses
        let (mut model, sample) = tiny_model_and_sample();
        for e in 0..model.params().entry_count() {
            model.params_mut().values_mut(e).fill(0.0);
        }
        let (vol, _) = prepare_sample(&sample, ScaleConfig::new(1).unwrap(), None);
        let anchors = build_anchor_grid(vol.dims(), &AnchorConfig::default()).unwrap();
        let empty = match_anchors(&anchors, &[], 0.1);
        let cfg = TrainConfig::default();

        let (out_a, _) = model.forward_cached(Tensor::from_volume(&vol)).unwrap();
        let loss_a = compute_loss(&out_a, &anchors, &empty, &cfg).unwrap();

        let flip = crate::augment::TransformId::new(crate::augment::TransformKind::Flip, 0).unwrap();
        let (flipped, _) = crate::augment::apply_transform(&vol, &[], flip);
        let (out_b, _) = model.forward_cached(Tensor::from_volume(&flipped)).unwrap();
        let loss_b = compute_loss(&out_b, &anchors, &empty, &cfg).unwrap();

        assert_eq!(loss_a.cls.to_bits(), loss_b.cls.to_bits());
        assert_eq!(vec![loss_a.reg, loss_b.reg], vec![0.0, 0.0]);
    }
}
