//! Set distances, ICP correspondence and confusion-matrix scores.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::cloud::{centroid, NormalizationTransform, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::groundtruth::EdgeLabelSet;
use crate::spatial::KdTree;

/// Distance from every point of `from` to its nearest point of `to`.
pub fn nearest_distances(from: &[Point3], to: &[Point3]) -> Result<Vec<f64>> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::EmptySet);
    }
    let tree = KdTree::build(to);
    Ok(from
        .par_iter()
        .map(|p| tree.nearest(p).expect("non-empty tree").1)
        .collect())
}

pub fn directed_hausdorff(from: &[Point3], to: &[Point3]) -> Result<f64> {
    Ok(nearest_distances(from, to)?.into_iter().fold(0.0, f64::max))
}

/// Larger of the two directed Hausdorff distances.
pub fn hausdorff(a: &[Point3], b: &[Point3]) -> Result<f64> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

/// Mean nearest-neighbor distance from `a` to `b` plus the mean from `b` to `a`.
pub fn chamfer(a: &[Point3], b: &[Point3]) -> Result<f64> {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(nearest_distances(a, b)?) + mean(nearest_distances(b, a)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IcpParams {
    pub max_iter: usize,
    pub tolerance: f64,
    pub match_threshold: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        IcpParams {
            max_iter: 50,
            tolerance: 1e-8,
            match_threshold: 0.02,
        }
    }
}

/// Rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let v = self.rotation * Vector3::new(p.x, p.y, p.z) + self.translation;
        Point3::new(v.x, v.y, v.z)
    }
}

fn vec3(p: &Point3) -> Vector3<f64> {
    Vector3::new(p.x, p.y, p.z)
}

/// Least-squares rigid fit mapping `src[i]` onto `dst[i]` via SVD of the
/// cross-covariance. A rank-deficient (collinear or coincident) source falls back
/// to a translation-only fit.
pub fn fit_rigid(src: &[Point3], dst: &[Point3]) -> RigidTransform {
    let (cs, cd) = (vec3(&centroid(src)), vec3(&centroid(dst)));
    let mut h = Matrix3::<f64>::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (vec3(s) - cs) * (vec3(d) - cd).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[0].is_nan() || sorted[0] <= 0.0 || sorted[1] <= 1e-12 * sorted[0] {
        return RigidTransform {
            rotation: Matrix3::identity(),
            translation: cd - cs,
        };
    }
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        // Flip the axis of the smallest singular value to exclude reflections.
        let smallest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).expect("three values");
        let mut d = Matrix3::identity();
        d[(smallest, smallest)] = -1.0;
        r = v * d * u.transpose();
    }
    RigidTransform {
        rotation: r,
        translation: cd - r * cs,
    }
}

#[derive(Debug, Clone)]
pub struct Correspondences {
    /// `(pred index, gt index)` mutual nearest neighbors within the match threshold.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
    pub transform: RigidTransform,
    pub iterations: usize,
    pub mse: f64,
}

/// Point-to-point ICP moving `pred` onto `gt`.
pub fn icp_align(pred: &[Point3], gt: &[Point3], params: &IcpParams) -> Result<Correspondences> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptySet);
    }
    let gt_tree = KdTree::build(gt);
    let mut transform = RigidTransform::identity();
    let mut prev_mse = f64::INFINITY;
    let mut mse = f64::INFINITY;
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let matches: Vec<(usize, f64)> = pred
            .par_iter()
            .map(|p| gt_tree.nearest(&transform.apply(p)).expect("non-empty"))
            .collect();
        mse = matches.iter().map(|m| m.1 * m.1).sum::<f64>() / pred.len() as f64;
        if prev_mse - mse < params.tolerance {
            break;
        }
        prev_mse = mse;
        let targets: Vec<Point3> = matches.iter().map(|m| gt[m.0]).collect();
        transform = fit_rigid(pred, &targets);
    }
    let moved: Vec<Point3> = pred.iter().map(|p| transform.apply(p)).collect();
    let pred_tree = KdTree::build(&moved);
    let forward: Vec<(usize, f64)> = moved
        .par_iter()
        .map(|p| gt_tree.nearest(p).expect("non-empty"))
        .collect();
    let backward: Vec<usize> = gt
        .par_iter()
        .map(|g| pred_tree.nearest(g).expect("non-empty").0)
        .collect();
    let mut pairs = Vec::new();
    let mut matched_gt = vec![false; gt.len()];
    let mut unmatched_pred = Vec::new();
    for (i, &(j, d)) in forward.iter().enumerate() {
        if backward[j] == i && d <= params.match_threshold {
            pairs.push((i, j));
            matched_gt[j] = true;
        } else {
            unmatched_pred.push(i);
        }
    }
    let unmatched_gt = (0..gt.len()).filter(|&j| !matched_gt[j]).collect();
    Ok(Correspondences {
        pairs,
        unmatched_pred,
        unmatched_gt,
        transform,
        iterations,
        mse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfusionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub mcc: f64,
    pub iou: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Precision, recall, MCC and IoU; a zero denominator yields 0 for that score.
pub fn confusion_metrics(tp: u64, fp: u64, tn: u64, fn_: u64) -> Result<ConfusionMetrics> {
    if tp + fp + tn + fn_ == 0 {
        return Err(Error::AllZeroCounts);
    }
    let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    Ok(ConfusionMetrics {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        mcc: ratio(tp * tn - fp * fn_, den),
        iou: ratio(tp, tp + fp + fn_),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    LabelDirect,
    IcpMatched,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label_direct" | "direct" => Ok(Protocol::LabelDirect),
            "icp_matched" | "icp" => Ok(Protocol::IcpMatched),
            _ => Err(Error::InvalidArgument(format!("unknown protocol '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    /// ICP settings; absent for the direct protocol.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub icp: Option<IcpParams>,
    pub normalization: NormalizationTransform,
    pub n: usize,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub mcc: f64,
    /// Absent when either edge set is empty.
    pub hausdorff: Option<f64>,
    pub chamfer: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

fn report(
    protocol: Protocol,
    icp: Option<IcpParams>,
    normalization: NormalizationTransform,
    n: usize,
    counts: (u64, u64, u64, u64),
    pred_pts: &[Point3],
    gt_pts: &[Point3],
) -> Result<MetricsReport> {
    let (tp, fp, tn, fn_) = counts;
    let m = confusion_metrics(tp, fp, tn, fn_)?;
    let both = !pred_pts.is_empty() && !gt_pts.is_empty();
    Ok(MetricsReport {
        protocol,
        icp,
        normalization,
        n,
        tp,
        fp,
        tn,
        fn_,
        precision: m.precision,
        recall: m.recall,
        iou: m.iou,
        mcc: m.mcc,
        hausdorff: if both { Some(hausdorff(pred_pts, gt_pts)?) } else { None },
        chamfer: if both { Some(chamfer(pred_pts, gt_pts)?) } else { None },
    })
}

/// Scores a predicted label set against ground truth over `cloud`.
///
/// Both edge sets are mapped into the cloud's unit-radius frame before distances
/// are measured. Under [`Protocol::IcpMatched`] the predicted edge points are
/// aligned to the ground-truth edge points and counted by correspondence, with
/// TN taken as the residual `N - TP - FP - FN`.
pub fn evaluate(
    pred: &EdgeLabelSet,
    gt: &EdgeLabelSet,
    cloud: &PointCloud,
    protocol: Protocol,
    icp: &IcpParams,
) -> Result<MetricsReport> {
    let n = cloud.len();
    if pred.n() != n || gt.n() != n {
        return Err(Error::ShapeMismatch(format!(
            "label sets over {} and {} points for a cloud of {n}",
            pred.n(),
            gt.n()
        )));
    }
    let norm = NormalizationTransform::fit(cloud.points());
    let pick = |l: &EdgeLabelSet| -> Vec<Point3> {
        l.indices().iter().map(|&i| norm.apply(cloud.points()[i])).collect()
    };
    let (pred_pts, gt_pts) = (pick(pred), pick(gt));
    match protocol {
        Protocol::LabelDirect => {
            let (pm, gm) = (pred.to_mask(), gt.to_mask());
            let mut c = (0u64, 0u64, 0u64, 0u64);
            for (&p, &g) in pm.iter().zip(&gm) {
                match (p, g) {
                    (true, true) => c.0 += 1,
                    (true, false) => c.1 += 1,
                    (false, false) => c.2 += 1,
                    (false, true) => c.3 += 1,
                }
            }
            report(protocol, None, norm, n, c, &pred_pts, &gt_pts)
        }
        Protocol::IcpMatched => evaluate_point_sets(&pred_pts, &gt_pts, n, norm, icp),
    }
}

/// ICP-protocol scoring of two point sets already in a common normalized frame.
pub fn evaluate_point_sets(
    pred: &[Point3],
    gt: &[Point3],
    n: usize,
    normalization: NormalizationTransform,
    icp: &IcpParams,
) -> Result<MetricsReport> {
    let (tp, fp, fn_) = if pred.is_empty() || gt.is_empty() {
        (0, pred.len() as u64, gt.len() as u64)
    } else {
        let c = icp_align(pred, gt, icp)?;
        (
            c.pairs.len() as u64,
            c.unmatched_pred.len() as u64,
            c.unmatched_gt.len() as u64,
        )
    };
    let tn = (n as u64).saturating_sub(tp + fp + fn_);
    report(Protocol::IcpMatched, Some(*icp), normalization, n, (tp, fp, tn, fn_), pred, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 3]]) -> Vec<Point3> {
        v.iter().map(|&a| Point3::from(a)).collect()
    }

    #[test]
    fn distance_examples() {
        let a = pts(&[[0.0, 0.0, 0.0]]);
        assert_eq!(hausdorff(&a, &pts(&[[3.0, 4.0, 0.0]])).unwrap(), 5.0);
        assert_eq!(hausdorff(&pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), &a).unwrap(), 1.0);
        assert_eq!(chamfer(&a, &pts(&[[1.0, 0.0, 0.0]])).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(matches!(hausdorff(&a, &[]), Err(Error::EmptySet)));
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_metrics(2, 0, 2, 0).unwrap();
        assert_eq!((m.precision, m.recall, m.mcc, m.iou), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(confusion_metrics(1, 1, 1, 1).unwrap().mcc, 0.0);
        assert!((confusion_metrics(3, 1, 0, 1).unwrap().iou - 0.6).abs() < 1e-15);
        assert!(matches!(confusion_metrics(0, 0, 0, 0), Err(Error::AllZeroCounts)));
        assert_eq!(confusion_metrics(0, 0, 5, 0).unwrap().precision, 0.0);
    }

    #[test]
    fn icp_translation() {
        let gt: Vec<Point3> = (0..50)
            .map(|i| {
                let t = i as f64 * 0.37;
                Point3::new(t.cos() * 0.5, t.sin() * 0.3, (i as f64 * 0.02) - 0.5)
            })
            .collect();
        let pred: Vec<Point3> = gt.iter().map(|p| *p + Point3::new(0.01, 0.0, 0.0)).collect();
        let c = icp_align(&pred, &gt, &IcpParams::default()).unwrap();
        assert!((c.transform.translation - Vector3::new(-0.01, 0.0, 0.0)).norm() < 1e-6);
        assert_eq!(c.pairs.len(), 50);
        let same = icp_align(&gt, &gt, &IcpParams::default()).unwrap();
        assert!(same.iterations <= 2);
        assert!((same.transform.rotation - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn collinear_falls_back_to_translation() {
        let src = pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let dst: Vec<Point3> = src.iter().map(|p| *p + Point3::new(0.0, 1.0, 0.0)).collect();
        let t = fit_rigid(&src, &dst);
        assert_eq!(t.rotation, Matrix3::identity());
        assert!((t.translation - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }
}
