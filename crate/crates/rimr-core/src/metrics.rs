//! Scalar evaluation and loss quantities for point clouds: Chamfer distance,
//! voxel IoU, F-score, and the oriented-box geometric error suite, plus the
//! differentiable graph ops used in training.

use crate::geometry::{voxelize, PointCloud, Vec3, VoxelGrid};
use crate::graph::{CustomOp, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};
use thiserror::Error;

/// Denominator guard for IoU ratios.
pub const IOU_EPS: f64 = 1e-6;

/// Default coverage threshold (and voxel size) for desk-scale scenes, meters.
pub const TAU_DESK_M: f64 = 0.05;

/// Default coverage threshold (and voxel size) for car-scale scenes, meters.
pub const TAU_CAR_M: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{op}: empty point cloud")]
    Empty { op: &'static str },
    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("voxel grids have different layouts (origin/size/dims)")]
    GridMismatch,
}

pub type MetricsResult<T> = Result<T, MetricsError>;

/// Index of the nearest point of `cloud` to `q`; ties keep the lowest index.
fn nearest_index(q: Vec3, cloud: &[Vec3]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, &p) in cloud.iter().enumerate() {
        let d = (q - p).norm();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Symmetric averaged nearest-neighbour distance, with unsquared Euclidean
/// terms:
/// `mean_{x in a} min_{y in b} |x-y| + mean_{y in b} min_{x in a} |x-y|`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> MetricsResult<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty { op: "chamfer" });
    }
    let forward: f64 =
        a.points.iter().map(|&x| nearest_index(x, &b.points).1).sum::<f64>() / a.len() as f64;
    let backward: f64 =
        b.points.iter().map(|&y| nearest_index(y, &a.points).1).sum::<f64>() / b.len() as f64;
    Ok(forward + backward)
}

/// `|a intersect b| / (|a union b| + eps)` over occupied voxels.
pub fn voxel_iou(a: &VoxelGrid, b: &VoxelGrid, eps: f64) -> MetricsResult<f64> {
    if !a.same_layout(b) {
        return Err(MetricsError::GridMismatch);
    }
    let shared = a.occupied.intersection(&b.occupied).count();
    let union = a.occupied.len() + b.occupied.len() - shared;
    Ok(shared as f64 / (union as f64 + eps))
}

/// Standard point-cloud F-score at threshold `tau`: harmonic mean of the
/// fraction of predictions near truth (precision) and truth near predictions
/// (recall).
pub fn fscore(pred: &PointCloud, truth: &PointCloud, tau: f64) -> MetricsResult<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(MetricsError::Empty { op: "fscore" });
    }
    if tau <= 0.0 {
        return Err(MetricsError::InvalidArgument {
            op: "fscore",
            message: format!("tau must be positive, got {tau}"),
        });
    }
    let precision = pred
        .points
        .iter()
        .filter(|&&p| nearest_index(p, &truth.points).1 <= tau)
        .count() as f64
        / pred.len() as f64;
    let recall = truth
        .points
        .iter()
        .filter(|&&t| nearest_index(t, &pred.points).1 <= tau)
        .count() as f64
        / truth.len() as f64;
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Geometric error suite comparing a predicted cloud to truth: ranging,
/// oriented-box extents, orientation, and coverage percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricErrors {
    pub ranging_error_m: f64,
    pub length_error_m: f64,
    pub width_error_m: f64,
    pub height_error_m: f64,
    /// Absent when a cloud's planar spread is degenerate (collinear points).
    pub orientation_error_deg: Option<f64>,
    pub pct_fictitious: f64,
    pub pct_surface_missed: f64,
}

/// Oriented planar box summary of one cloud.
struct PlanarBox {
    /// Angle of the dominant variance axis in the xy-plane, radians, or None
    /// when degenerate.
    angle: Option<f64>,
    length: f64,
    width: f64,
    height: f64,
    median_range: f64,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn planar_box(cloud: &PointCloud) -> PlanarBox {
    let n = cloud.len() as f64;
    let c = cloud.centroid().expect("non-empty checked by caller");
    // 2x2 covariance in the xy-plane.
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &p in &cloud.points {
        let (dx, dy) = (p.x - c.x, p.y - c.y);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    sxx /= n;
    sxy /= n;
    syy /= n;
    // Eigen-decomposition of [[sxx, sxy], [sxy, syy]].
    let trace = sxx + syy;
    let diff = sxx - syy;
    let disc = (diff * diff + 4.0 * sxy * sxy).sqrt();
    let lambda1 = 0.5 * (trace + disc);
    let lambda2 = 0.5 * (trace - disc);
    // Orientation is undefined for collinear clouds (rank-deficient planar
    // covariance) and for isotropic spreads with no dominant axis.
    let scale = lambda1.max(1e-300);
    let angle = if lambda1 <= 1e-15 || lambda2 / scale <= 1e-9 || disc / scale <= 1e-9 {
        None
    } else {
        // Major-axis angle of the 2x2 symmetric covariance.
        Some((2.0 * sxy).atan2(diff) / 2.0)
    };
    let (e1, e2) = match angle {
        Some(a) => (Vec3::new(a.cos(), a.sin(), 0.0), Vec3::new(-a.sin(), a.cos(), 0.0)),
        None => (Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)),
    };
    let extent = |axis: Vec3| {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &p in &cloud.points {
            let v = (p - c).dot(axis);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        hi - lo
    };
    let length = extent(e1);
    let width = extent(e2);
    let height = extent(Vec3::new(0.0, 0.0, 1.0));
    let ranges = cloud.points.iter().map(|p| p.norm()).collect();
    PlanarBox { angle, length, width, height, median_range: median(ranges) }
}

/// Compares clouds by median range from the coordinate origin, oriented-box
/// extents (dominant PCA axis in the xy-plane, z for height), orientation
/// angle folded to [0, 90] degrees, and tau-thresholded coverage fractions.
/// Express both clouds in the sensor frame first if sensor-relative ranging
/// is wanted.
pub fn geometric_errors(pred: &PointCloud, truth: &PointCloud, tau: f64) -> MetricsResult<GeometricErrors> {
    if pred.is_empty() || truth.is_empty() {
        return Err(MetricsError::Empty { op: "geometric_errors" });
    }
    let pb = planar_box(pred);
    let tb = planar_box(truth);
    let orientation_error_deg = match (pb.angle, tb.angle) {
        (Some(a), Some(b)) => {
            let diff = (a - b).rem_euclid(std::f64::consts::PI);
            let folded = diff.min(std::f64::consts::PI - diff);
            Some(folded.to_degrees())
        }
        _ => None,
    };
    let fictitious = pred
        .points
        .iter()
        .filter(|&&p| nearest_index(p, &truth.points).1 > tau)
        .count() as f64;
    let missed = truth
        .points
        .iter()
        .filter(|&&t| nearest_index(t, &pred.points).1 > tau)
        .count() as f64;
    Ok(GeometricErrors {
        ranging_error_m: (pb.median_range - tb.median_range).abs(),
        length_error_m: (pb.length - tb.length).abs(),
        width_error_m: (pb.width - tb.width).abs(),
        height_error_m: (pb.height - tb.height).abs(),
        orientation_error_deg,
        pct_fictitious: 100.0 * fictitious / pred.len() as f64,
        pct_surface_missed: 100.0 * missed / truth.len() as f64,
    })
}

/// Full per-sample evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub chamfer: f64,
    pub iou: f64,
    pub fscore: f64,
    pub geometric: GeometricErrors,
}

impl MetricReport {
    /// Field names in serialization order.
    pub const FIELDS: [&'static str; 10] = [
        "chamfer",
        "iou",
        "fscore",
        "ranging_error_m",
        "length_error_m",
        "width_error_m",
        "height_error_m",
        "orientation_error_deg",
        "pct_fictitious",
        "pct_surface_missed",
    ];

    pub fn values(&self) -> [Option<f64>; 10] {
        let g = &self.geometric;
        [
            Some(self.chamfer),
            Some(self.iou),
            Some(self.fscore),
            Some(g.ranging_error_m),
            Some(g.length_error_m),
            Some(g.width_error_m),
            Some(g.height_error_m),
            g.orientation_error_deg,
            Some(g.pct_fictitious),
            Some(g.pct_surface_missed),
        ]
    }

    /// One `key=value` line per field; absent values serialize as `absent`.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (name, value) in Self::FIELDS.iter().zip(self.values()) {
            match value {
                Some(v) => out.push_str(&format!("{name}={v:.6}\n")),
                None => out.push_str(&format!("{name}=absent\n")),
            }
        }
        out
    }
}

/// Shared voxel layout for comparing two clouds: cubic voxels over the union
/// bounding box, padded by one voxel on every side.
pub fn union_grid_layout(a: &PointCloud, b: &PointCloud, voxel_size: f64) -> MetricsResult<(Vec3, [usize; 3])> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty { op: "union_grid_layout" });
    }
    if voxel_size <= 0.0 {
        return Err(MetricsError::InvalidArgument {
            op: "union_grid_layout",
            message: format!("voxel size must be positive, got {voxel_size}"),
        });
    }
    let (alo, ahi) = a.bounds().expect("non-empty");
    let (blo, bhi) = b.bounds().expect("non-empty");
    let lo = Vec3::new(alo.x.min(blo.x), alo.y.min(blo.y), alo.z.min(blo.z));
    let hi = Vec3::new(ahi.x.max(bhi.x), ahi.y.max(bhi.y), ahi.z.max(bhi.z));
    // Snap to the voxel lattice so the layout is piecewise constant in the
    // point coordinates; sub-voxel motion then cannot reshuffle the grid.
    let cell = |v: f64| (v / voxel_size).floor() as i64;
    let origin = Vec3::new(
        (cell(lo.x) - 1) as f64 * voxel_size,
        (cell(lo.y) - 1) as f64 * voxel_size,
        (cell(lo.z) - 1) as f64 * voxel_size,
    );
    let dims = [
        (cell(hi.x) - cell(lo.x) + 3) as usize,
        (cell(hi.y) - cell(lo.y) + 3) as usize,
        (cell(hi.z) - cell(lo.z) + 3) as usize,
    ];
    Ok((origin, dims))
}

/// Hard voxel IoU of two clouds on the shared union-bounds grid.
pub fn cloud_iou(pred: &PointCloud, truth: &PointCloud, voxel_size: f64) -> MetricsResult<f64> {
    let (origin, dims) = union_grid_layout(pred, truth, voxel_size)?;
    let vp = voxelize(pred, origin, voxel_size, dims)
        .map_err(|e| MetricsError::InvalidArgument { op: "cloud_iou", message: e.to_string() })?;
    let vt = voxelize(truth, origin, voxel_size, dims)
        .map_err(|e| MetricsError::InvalidArgument { op: "cloud_iou", message: e.to_string() })?;
    voxel_iou(&vp, &vt, IOU_EPS)
}

/// Evaluates every metric of one prediction against truth.
pub fn evaluate_pair(
    pred: &PointCloud,
    truth: &PointCloud,
    tau: f64,
    voxel_size: f64,
) -> MetricsResult<MetricReport> {
    Ok(MetricReport {
        chamfer: chamfer(pred, truth)?,
        iou: cloud_iou(pred, truth, voxel_size)?,
        fscore: fscore(pred, truth, tau)?,
        geometric: geometric_errors(pred, truth, tau)?,
    })
}

/// Aggregate block matching the per-column mean/std/median layout.
pub fn aggregate_reports(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    for (col, name) in MetricReport::FIELDS.iter().enumerate() {
        let values: Vec<f64> = reports.iter().filter_map(|r| r.values()[col]).collect();
        if values.is_empty() {
            out.push_str(&format!("{name}.mean=absent\n{name}.std=absent\n{name}.median=absent\n"));
            continue;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        out.push_str(&format!("{name}.mean={mean:.6}\n"));
        out.push_str(&format!("{name}.std={:.6}\n", var.sqrt()));
        out.push_str(&format!("{name}.median={:.6}\n", median(values)));
    }
    out
}

fn cloud_from_tensor<E: Scalar>(t: &Tensor<E>) -> TensorResult<Vec<Vec3>> {
    if t.rank() != 2 || t.shape()[1] != 3 {
        return Err(TensorError::RankMismatch { op: "point_cloud_tensor", expected: 2, shape: t.shape().to_vec() });
    }
    Ok(t
        .data()
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0].to_f64(), c[1].to_f64(), c[2].to_f64()))
        .collect())
}

pub fn tensor_from_cloud<E: Scalar>(cloud: &PointCloud) -> Tensor<E> {
    let data = cloud
        .points
        .iter()
        .flat_map(|p| [E::from_f64(p.x), E::from_f64(p.y), E::from_f64(p.z)])
        .collect();
    Tensor::new(vec![cloud.len(), 3], data).expect("cloud tensor shape")
}

pub fn cloud_from_tensor_pub<E: Scalar>(t: &Tensor<E>) -> TensorResult<PointCloud> {
    Ok(PointCloud::new(cloud_from_tensor(t)?))
}

/// Differentiable Chamfer term: gradients flow to the argmin pairs of both
/// directions; coincident pairs contribute zero gradient.
#[derive(Debug)]
struct ChamferLossOp {
    truth: Vec<Vec3>,
    /// For each predicted point, index of its nearest truth point.
    nn_pred: Vec<usize>,
    /// For each truth point, index of its nearest predicted point.
    nn_truth: Vec<usize>,
}

const DEGENERATE_DIST: f64 = 1e-12;

impl<E: Scalar> CustomOp<E> for ChamferLossOp {
    fn name(&self) -> &'static str {
        "chamfer_loss"
    }

    fn backward(&self, inputs: &[&Tensor<E>], grad_out: &Tensor<E>) -> Vec<Option<Tensor<E>>> {
        let pred = cloud_from_tensor(inputs[0]).expect("validated at insertion");
        let g = grad_out.item().expect("scalar upstream").to_f64();
        let n = pred.len() as f64;
        let m = self.truth.len() as f64;
        let mut dx = vec![0.0f64; pred.len() * 3];
        for (i, (&p, &j)) in pred.iter().zip(&self.nn_pred).enumerate() {
            let d = p - self.truth[j];
            let dist = d.norm();
            if dist > DEGENERATE_DIST {
                let s = g / (n * dist);
                dx[3 * i] += s * d.x;
                dx[3 * i + 1] += s * d.y;
                dx[3 * i + 2] += s * d.z;
            }
        }
        for (&t, &i) in self.truth.iter().zip(&self.nn_truth) {
            let d = pred[i] - t;
            let dist = d.norm();
            if dist > DEGENERATE_DIST {
                let s = g / (m * dist);
                dx[3 * i] += s * d.x;
                dx[3 * i + 1] += s * d.y;
                dx[3 * i + 2] += s * d.z;
            }
        }
        let grad = Tensor::new(vec![pred.len(), 3], dx.into_iter().map(E::from_f64).collect())
            .expect("gradient shape");
        vec![Some(grad)]
    }
}

/// Inserts the Chamfer distance between the predicted cloud tensor `[n, 3]`
/// and a fixed truth cloud as a differentiable scalar node.
pub fn chamfer_loss<E: Scalar>(g: &mut Graph<E>, pred: Var, truth: &PointCloud) -> TensorResult<Var> {
    let pred_points = cloud_from_tensor(g.value(pred))?;
    if pred_points.is_empty() || truth.is_empty() {
        return Err(TensorError::Empty { op: "chamfer_loss" });
    }
    let nn_pred: Vec<usize> = pred_points.iter().map(|&p| nearest_index(p, &truth.points).0).collect();
    let nn_truth: Vec<usize> = truth.points.iter().map(|&t| nearest_index(t, &pred_points).0).collect();
    let n = pred_points.len() as f64;
    let m = truth.points.len() as f64;
    let forward: f64 = pred_points
        .iter()
        .zip(&nn_pred)
        .map(|(&p, &j)| (p - truth.points[j]).norm())
        .sum::<f64>()
        / n;
    let backward: f64 = truth
        .points
        .iter()
        .zip(&nn_truth)
        .map(|(&t, &i)| (t - pred_points[i]).norm())
        .sum::<f64>()
        / m;
    let value = Tensor::scalar(E::from_f64(forward + backward));
    let op = ChamferLossOp { truth: truth.points.clone(), nn_pred, nn_truth };
    Ok(g.custom(vec![pred], value, Box::new(op)))
}

/// Soft companion of the voxel IoU: mean over truth-occupied voxel centers of
/// the distance to the nearest predicted point.
fn surrogate_terms(pred: &[Vec3], centers: &[Vec3]) -> (f64, Vec<usize>) {
    let mut total = 0.0;
    let mut argmins = Vec::with_capacity(centers.len());
    for &c in centers {
        let (i, d) = nearest_index(c, pred);
        total += d;
        argmins.push(i);
    }
    (total / centers.len() as f64, argmins)
}

#[derive(Debug)]
struct IouSurrogateGradOp {
    centers: Vec<Vec3>,
    argmin: Vec<usize>,
}

impl<E: Scalar> CustomOp<E> for IouSurrogateGradOp {
    fn name(&self) -> &'static str {
        "iou_loss"
    }

    fn backward(&self, inputs: &[&Tensor<E>], grad_out: &Tensor<E>) -> Vec<Option<Tensor<E>>> {
        let pred = cloud_from_tensor(inputs[0]).expect("validated at insertion");
        let g = grad_out.item().expect("scalar upstream").to_f64();
        let v = self.centers.len() as f64;
        let mut dx = vec![0.0f64; pred.len() * 3];
        for (&c, &i) in self.centers.iter().zip(&self.argmin) {
            let d = pred[i] - c;
            let dist = d.norm();
            if dist > DEGENERATE_DIST {
                let s = g / (v * dist);
                dx[3 * i] += s * d.x;
                dx[3 * i + 1] += s * d.y;
                dx[3 * i + 2] += s * d.z;
            }
        }
        let grad = Tensor::new(vec![pred.len(), 3], dx.into_iter().map(E::from_f64).collect())
            .expect("gradient shape");
        vec![Some(grad)]
    }
}

fn iou_loss_inner<E: Scalar>(
    g: &mut Graph<E>,
    pred: Var,
    truth: &PointCloud,
    voxel_size: f64,
    surrogate_value: bool,
) -> TensorResult<Var> {
    let pred_points = cloud_from_tensor(g.value(pred))?;
    if pred_points.is_empty() || truth.is_empty() {
        return Err(TensorError::Empty { op: "iou_loss" });
    }
    let pred_cloud = PointCloud::new(pred_points.clone());
    let (origin, dims) = union_grid_layout(&pred_cloud, truth, voxel_size)
        .map_err(|e| TensorError::InvalidArgument { op: "iou_loss", message: e.to_string() })?;
    let vt = voxelize(truth, origin, voxel_size, dims)
        .map_err(|e| TensorError::InvalidArgument { op: "iou_loss", message: e.to_string() })?;
    let centers: Vec<Vec3> = vt.occupied.iter().map(|&idx| vt.voxel_center(idx)).collect();
    let (surrogate, argmin) = surrogate_terms(&pred_points, &centers);
    let value = if surrogate_value {
        surrogate
    } else {
        let vp = voxelize(&pred_cloud, origin, voxel_size, dims)
            .map_err(|e| TensorError::InvalidArgument { op: "iou_loss", message: e.to_string() })?;
        1.0 - voxel_iou(&vp, &vt, IOU_EPS)
            .map_err(|e| TensorError::InvalidArgument { op: "iou_loss", message: e.to_string() })?
    };
    let op = IouSurrogateGradOp { centers, argmin };
    Ok(g.custom(vec![pred], Tensor::scalar(E::from_f64(value)), Box::new(op)))
}

/// `1 - IoU` of the voxelized clouds. The scalar is the hard set ratio; the
/// gradient is that of the soft surrogate (straight-through), pulling
/// predictions toward truth-occupied space.
pub fn iou_loss<E: Scalar>(g: &mut Graph<E>, pred: Var, truth: &PointCloud, voxel_size: f64) -> TensorResult<Var> {
    iou_loss_inner(g, pred, truth, voxel_size, false)
}

/// Same gradient as [`iou_loss`] but the node's value is the surrogate
/// itself, making the pair finite-difference checkable.
pub fn iou_surrogate<E: Scalar>(
    g: &mut Graph<E>,
    pred: Var,
    truth: &PointCloud,
    voxel_size: f64,
) -> TensorResult<Var> {
    iou_loss_inner(g, pred, truth, voxel_size, true)
}
