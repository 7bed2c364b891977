use edgeformer::groundtruth::{synth_shape_with_points, ShapeKind};
use edgeformer::model::{init_params, Ablation, EdgeFormerConfig, EdgeFormerParams};
use edgeformer::training::{balanced_indices, predict, probabilities_for_rows, train, LabeledPatchSet, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(ablation: Ablation) -> EdgeFormerConfig {
    EdgeFormerConfig {
        k: 8,
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        ffn_width: 16,
        decoder_widths: vec![16, 8],
        ablation,
        input_scale: 50.0,
        ..Default::default()
    }
}

fn patches(kind: ShapeKind, seed: u64) -> LabeledPatchSet {
    let cloud = synth_shape_with_points(kind, 500, seed).unwrap().cloud;
    LabeledPatchSet::from_cloud(&cloud, 8, seed as u32).unwrap()
}

proptest! {
    #[test]
    fn balancing_gives_equal_classes_from_the_input(
        labels in prop::collection::vec(any::<bool>(), 2..400),
        seed in any::<u64>(),
    ) {
        let pos = labels.iter().filter(|&&l| l).count();
        prop_assume!(pos > 0 && pos < labels.len());
        let idx = balanced_indices(&labels, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < labels.len()));
        let picked_pos = idx.iter().filter(|&&i| labels[i]).count();
        prop_assert_eq!(2 * picked_pos, idx.len());
        prop_assert_eq!(picked_pos, pos.min(labels.len() - pos));
    }
}

#[test]
fn single_class_cannot_be_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(balanced_indices(&[true, true], &mut rng).is_err());
    assert!(balanced_indices(&[false; 5], &mut rng).is_err());
}

#[test]
fn logits_shape_and_probabilities_for_every_ablation() {
    let set = patches(ShapeKind::Cube, 1);
    let rows = 13;
    let (d1, d2) = (&set.d1[..rows * 8], &set.d2[..rows * 8]);
    for ablation in Ablation::ALL {
        let params = init_params(&tiny(ablation), 3).unwrap();
        let logits = params.logits(d1, d2).unwrap();
        assert_eq!(logits.len(), rows * 2, "{ablation:?}");
        assert_eq!(logits, params.logits(d1, d2).unwrap());
        let p = params.edge_probabilities(d1, d2).unwrap();
        assert!(p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!(params.logits(&d1[..8 * rows - 1], &d2[..8 * rows - 1]).is_err());
    }
}

#[test]
fn dropped_branch_ignores_its_input() {
    let set = patches(ShapeKind::Cylinder, 2);
    let rows = 10;
    let (d1, d2) = (&set.d1[..rows * 8], &set.d2[..rows * 8]);
    let junk: Vec<f32> = (0..rows * 8).map(|i| (i % 7) as f32 * 0.3).collect();
    let p = init_params(&tiny(Ablation::DropD2), 5).unwrap();
    assert_eq!(p.logits(d1, d2).unwrap(), p.logits(d1, &junk).unwrap());
    let p = init_params(&tiny(Ablation::DropD1), 5).unwrap();
    assert_eq!(p.logits(d1, d2).unwrap(), p.logits(&junk, d2).unwrap());
    let p = init_params(&tiny(Ablation::Full), 5).unwrap();
    assert_ne!(p.logits(d1, d2).unwrap(), p.logits(d1, &junk).unwrap());
}

fn short_run(seed: u64) -> EdgeFormerParams {
    let data = [patches(ShapeKind::Cube, 1), patches(ShapeKind::wedge(90.0), 2)];
    let config = TrainConfig {
        epochs: 2,
        batch_size: 32,
        seed,
        model: tiny(Ablation::Full),
        ..TrainConfig::desk()
    };
    let out = train(&data, &config, None, |_| {}).unwrap();
    assert_eq!(out.log.len(), 2);
    out.params
}

#[test]
fn training_is_reproducible_and_prediction_batch_invariant() {
    let a = short_run(9);
    let b = short_run(9);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.to_bytes(), short_run(10).to_bytes());
    assert!(a.all_finite());

    let cloud = synth_shape_with_points(ShapeKind::FusedBoxes, 600, 4).unwrap().cloud;
    let whole = predict(&cloud, &a, cloud.len()).unwrap();
    assert!(whole.probabilities.iter().all(|p| p.is_finite()));
    for bs in [1, 5, 64] {
        assert_eq!(predict(&cloud, &a, bs).unwrap().probabilities, whole.probabilities, "batch {bs}");
    }
    let back = EdgeFormerParams::from_bytes(&a.to_bytes()).unwrap();
    let set = patches(ShapeKind::Cube, 3);
    assert_eq!(
        probabilities_for_rows(&back, &set.d1, &set.d2, set.len(), 50).unwrap(),
        probabilities_for_rows(&a, &set.d1, &set.d2, set.len(), 50).unwrap()
    );
}
