use edgeformer::cloud::{Point3, PointCloud};
use edgeformer::evalmetrics::{
    chamfer, confusion_metrics, directed_hausdorff, evaluate, hausdorff, icp_align, IcpParams, Protocol,
};
use edgeformer::groundtruth::{synth_shape_with_points, EdgeLabelSet, ShapeKind};
use edgeformer::perturb::{add_gaussian_noise, random_downsample, sampling_density};
use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;

fn point_set(max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..max)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect())
}

fn rotate(r: &Rotation3<f64>, p: Point3) -> Point3 {
    let v = r * Vector3::new(p.x, p.y, p.z);
    Point3::new(v.x, v.y, v.z)
}

proptest! {
    #[test]
    fn distance_metric_properties(a in point_set(60), b in point_set(60)) {
        let h = hausdorff(&a, &b).unwrap();
        let c = chamfer(&a, &b).unwrap();
        prop_assert_eq!(h, hausdorff(&b, &a).unwrap());
        prop_assert!((c - chamfer(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!(h >= directed_hausdorff(&a, &b).unwrap());
        prop_assert!(h >= directed_hausdorff(&b, &a).unwrap());
        prop_assert!(c <= 2.0 * h + 1e-12);
        prop_assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        // Duplicates and reordering do not change set distances.
        let mut dup = a.clone();
        dup.extend(a.iter().rev().copied());
        prop_assert_eq!(hausdorff(&a, &dup).unwrap(), 0.0);
    }

    #[test]
    fn confusion_metric_bounds(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let m = confusion_metrics(tp, fp, tn, fn_).unwrap();
        prop_assert!((-1.0..=1.0).contains(&m.mcc));
        for v in [m.precision, m.recall, m.iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if tp > 0 {
            prop_assert!(m.iou <= m.precision + 1e-15 && m.iou <= m.recall + 1e-15);
        }
    }

    #[test]
    fn density_is_rigid_motion_invariant(
        seed in 0u64..20,
        angles in (-3.0f64..3.0, -1.5f64..1.5, -3.0f64..3.0),
        t in (-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0),
        s in 0.1f64..10.0,
    ) {
        let cloud = synth_shape_with_points(ShapeKind::FusedBoxes, 600, seed).unwrap().cloud;
        let r = Rotation3::from_euler_angles(angles.0, angles.1, angles.2);
        let shift = Point3::new(t.0, t.1, t.2);
        let moved = cloud.with_points(cloud.points().iter().map(|&p| rotate(&r, p) + shift).collect()).unwrap();
        let scaled = cloud.with_points(cloud.points().iter().map(|&p| p * s).collect()).unwrap();
        let base = sampling_density(&cloud, 3).unwrap().s_density;
        prop_assert!((sampling_density(&moved, 3).unwrap().s_density - base).abs() < 1e-9);
        prop_assert!((sampling_density(&scaled, 3).unwrap().s_density - s * base).abs() < 1e-9 * s);
    }

    #[test]
    fn downsampled_labels_are_a_restriction(seed in 0u64..1000, ratio in 0.05f64..=1.0) {
        let cloud = synth_shape_with_points(ShapeKind::Cube, 400, 5).unwrap().cloud;
        let (out, kept) = random_downsample(&cloud, ratio, seed).unwrap();
        prop_assert_eq!(out.len(), (ratio * cloud.len() as f64).floor() as usize);
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let labels = cloud.labels().unwrap();
        let want: Vec<bool> = kept.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(out.labels().unwrap(), &want[..]);
        for (j, &i) in kept.iter().enumerate() {
            prop_assert_eq!(out.points()[j], cloud.points()[i]);
        }
    }
}

#[test]
fn noise_is_reproducible_and_unbiased() {
    let n = 100_000;
    let cloud = PointCloud::new(vec![Point3::new(1.0, -2.0, 3.0); n]).unwrap();
    let sigma = 0.5;
    let a = add_gaussian_noise(&cloud, 0.25, 2.0, 42).unwrap();
    let b = add_gaussian_noise(&cloud, 0.25, 2.0, 42).unwrap();
    assert_eq!(a.points(), b.points());
    assert_ne!(a.points(), add_gaussian_noise(&cloud, 0.25, 2.0, 43).unwrap().points());
    let bound = 3.0 * sigma / (n as f64).sqrt();
    for axis in 0..3 {
        let mean = a
            .points()
            .iter()
            .zip(cloud.points())
            .map(|(p, q)| p.to_array()[axis] - q.to_array()[axis])
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < bound, "axis {axis}: mean displacement {mean}");
    }
    assert!(add_gaussian_noise(&cloud, -0.1, 2.0, 1).is_err());
    assert!(add_gaussian_noise(&cloud, f64::NAN, 2.0, 1).is_err());
}

#[test]
fn icp_on_identical_sets_stops_at_identity() {
    let pts = synth_shape_with_points(ShapeKind::Cube, 800, 6).unwrap().cloud.points().to_vec();
    let c = icp_align(&pts, &pts, &IcpParams::default()).unwrap();
    assert!(c.iterations <= 2, "{} iterations", c.iterations);
    assert!((c.transform.rotation - Matrix3::identity()).abs().max() < 1e-12);
    assert!(c.transform.translation.norm() < 1e-12);
    assert_eq!(c.pairs.len(), pts.len());
    assert!(c.pairs.iter().all(|&(p, g)| p == g));
}

#[test]
fn icp_recovers_a_small_rigid_motion() {
    let gt = synth_shape_with_points(ShapeKind::FusedBoxes, 1500, 8).unwrap().cloud.points().to_vec();
    let r = Rotation3::from_euler_angles(0.01, -0.008, 0.012);
    let shift = Point3::new(0.004, -0.003, 0.002);
    let pred: Vec<Point3> = gt.iter().map(|&p| rotate(&r, p) + shift).collect();
    let params = IcpParams { match_threshold: 0.2, ..IcpParams::default() };
    let c = icp_align(&pred, &gt, &params).unwrap();
    let worst = pred
        .iter()
        .zip(&gt)
        .map(|(p, g)| c.transform.apply(p).distance(g))
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "residual {worst}");
    assert_eq!(c.pairs.len(), gt.len());
}

#[test]
fn evaluate_with_identical_labels() {
    let cloud = synth_shape_with_points(ShapeKind::Cylinder, 1200, 9).unwrap().cloud;
    let gt = EdgeLabelSet::from_mask(cloud.labels().unwrap());
    for protocol in [Protocol::LabelDirect, Protocol::IcpMatched] {
        let r = evaluate(&gt, &gt, &cloud, protocol, &IcpParams::default()).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (gt.len() as u64, 0, 0), "{protocol:?}");
        assert_eq!(r.tn, (cloud.len() - gt.len()) as u64);
        assert_eq!((r.precision, r.recall, r.iou, r.mcc), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.chamfer, Some(0.0));
    }
}
