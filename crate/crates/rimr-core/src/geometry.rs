//! Geometry between depth images and point clouds: procedural shapes, pinhole
//! rendering and back-projection, multi-view fusion, voxelization, resampling,
//! and rigid transforms.
//!
//! Frames, right-handed throughout:
//!   world:  z up.
//!   sensor: y boresight (forward), x right, z up.
//!   camera: z forward, x right, y down (image v grows downward).

use crate::rng::stream;
use rand::Rng;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("transform: matrix is not a rigid rotation (orthonormality/det error {error:.3e})")]
    NotRigid { error: f64 },
}

pub type GeoResult<T> = Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        Vec3::new(self.x / n, self.y / n, self.z / n)
    }

    pub fn scaled(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn as_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub rows: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 { rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Self {
        Self { rows: [r0.as_array(), r1.as_array(), r2.as_array()] }
    }

    pub fn rotation_z(angle_rad: f64) -> Self {
        let (s, c) = angle_rad.sin_cos();
        Self { rows: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.rows[0][0] * v.x + self.rows[0][1] * v.y + self.rows[0][2] * v.z,
            self.rows[1][0] * v.x + self.rows[1][1] * v.y + self.rows[1][2] * v.z,
            self.rows[2][0] * v.x + self.rows[2][1] * v.y + self.rows[2][2] * v.z,
        )
    }

    pub fn matmul(&self, o: &Mat3) -> Mat3 {
        let mut rows = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rows[i][j] = (0..3).map(|k| self.rows[i][k] * o.rows[k][j]).sum();
            }
        }
        Mat3 { rows }
    }

    pub fn transpose(&self) -> Mat3 {
        let r = &self.rows;
        Mat3 { rows: [[r[0][0], r[1][0], r[2][0]], [r[0][1], r[1][1], r[2][1]], [r[0][2], r[1][2], r[2][2]]] }
    }

    pub fn det(&self) -> f64 {
        let r = &self.rows;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    /// Largest deviation from R^T R = I and det = 1.
    pub fn rigidity_error(&self) -> f64 {
        let gram = self.transpose().matmul(self);
        let mut err: f64 = (self.det() - 1.0).abs();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((gram.rows[i][j] - target).abs());
            }
        }
        err
    }
}

/// Rigid transform mapping world coordinates into a local frame:
/// `p_local = rot * p_world + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rot: Mat3::IDENTITY, trans: Vec3::ZERO };

    pub fn new(rot: Mat3, trans: Vec3) -> Self {
        Self { rot, trans }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rot.apply(p) + self.trans
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rot.transpose();
        Pose { rot: rt, trans: -rt.apply(self.trans) }
    }

    /// Frame origin expressed in world coordinates.
    pub fn origin_in_world(&self) -> Vec3 {
        -self.rot.transpose().apply(self.trans)
    }

    pub fn check_rigid(&self, tol: f64) -> GeoResult<()> {
        let err = self.rot.rigidity_error();
        if err > tol {
            Err(GeometryError::NotRigid { error: err })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::ZERO, |acc, &p| acc + p);
        Some(sum.scaled(1.0 / self.points.len() as f64))
    }

    /// Axis-aligned bounds as (min, max), if non-empty.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for &p in &self.points {
            lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        Some((lo, hi))
    }

    /// Lexicographic (x, y, z) order; canonicalizes a cloud so permutations
    /// of the same point set compare equal.
    pub fn sorted_lexicographic(&self) -> PointCloud {
        let mut points = self.points.clone();
        points.sort_by(|a, b| {
            a.x.partial_cmp(&b.x)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.y.partial_cmp(&b.y).unwrap_or(std::cmp::Ordering::Equal))
                .then(a.z.partial_cmp(&b.z).unwrap_or(std::cmp::Ordering::Equal))
        });
        PointCloud::new(points)
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().all(|p| p.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World to camera frame.
    pub pose: Pose,
}

impl CameraModel {
    pub fn new(focal_px: f64, width: usize, height: usize, pose: Pose) -> GeoResult<Self> {
        if focal_px <= 0.0 {
            return Err(GeometryError::InvalidArgument {
                op: "camera",
                message: format!("focal length must be positive, got {focal_px}"),
            });
        }
        Ok(Self { focal_px, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height, pose })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major per-pixel camera-frame depth in meters; 0 means no return.
    pub depth: Vec<f64>,
    pub camera: CameraModel,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, camera: CameraModel) -> GeoResult<Self> {
        if depth.len() != width * height || camera.width != width || camera.height != height {
            return Err(GeometryError::InvalidArgument {
                op: "depth_image",
                message: format!(
                    "{} depth samples for {width}x{height} raster (camera {}x{})",
                    depth.len(),
                    camera.width,
                    camera.height
                ),
            });
        }
        Ok(Self { width, height, depth, camera })
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    /// Ordered for deterministic iteration and serialization.
    pub occupied: BTreeSet<[usize; 3]>,
}

impl VoxelGrid {
    pub fn new(origin: Vec3, voxel_size: f64, dims: [usize; 3]) -> Self {
        VoxelGrid { origin, voxel_size, dims, occupied: BTreeSet::new() }
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Vec3 {
        self.origin
            + Vec3::new(
                (idx[0] as f64 + 0.5) * self.voxel_size,
                (idx[1] as f64 + 0.5) * self.voxel_size,
                (idx[2] as f64 + 0.5) * self.voxel_size,
            )
    }

    pub fn same_layout(&self, other: &VoxelGrid) -> bool {
        self.origin == other.origin && self.voxel_size == other.voxel_size && self.dims == other.dims
    }
}

/// Views paired with the rigid transform that carries each into the shared
/// world frame.
#[derive(Debug, Clone, Default)]
pub struct ViewSet {
    pub views: Vec<(PointCloud, Pose)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Box,
    LBox,
    CarLike,
}

impl std::str::FromStr for ShapeKind {
    type Err = GeometryError;
    fn from_str(s: &str) -> GeoResult<Self> {
        match s {
            "box" => Ok(ShapeKind::Box),
            "lbox" => Ok(ShapeKind::LBox),
            "carlike" => Ok(ShapeKind::CarLike),
            other => Err(GeometryError::InvalidArgument {
                op: "shape_kind",
                message: format!("unknown shape {other:?}, expected box|lbox|carlike"),
            }),
        }
    }
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapeKind::Box => "box",
            ShapeKind::LBox => "lbox",
            ShapeKind::CarLike => "carlike",
        })
    }
}

/// Planar rectangle `origin + a*edge_u + b*edge_v`, `a, b` in [0, 1).
struct Rect {
    origin: Vec3,
    edge_u: Vec3,
    edge_v: Vec3,
}

impl Rect {
    fn area(&self) -> f64 {
        self.edge_u.cross(self.edge_v).norm()
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        let a: f64 = rng.gen::<f64>();
        let b: f64 = rng.gen::<f64>();
        self.origin + self.edge_u.scaled(a) + self.edge_v.scaled(b)
    }
}

/// Six faces of an axis-aligned box centered at `center` with full extents
/// `size`.
fn box_faces(center: Vec3, size: Vec3) -> Vec<Rect> {
    let h = size.scaled(0.5);
    let c = center;
    vec![
        // x = +-hx
        Rect {
            origin: Vec3::new(c.x + h.x, c.y - h.y, c.z - h.z),
            edge_u: Vec3::new(0.0, size.y, 0.0),
            edge_v: Vec3::new(0.0, 0.0, size.z),
        },
        Rect {
            origin: Vec3::new(c.x - h.x, c.y - h.y, c.z - h.z),
            edge_u: Vec3::new(0.0, size.y, 0.0),
            edge_v: Vec3::new(0.0, 0.0, size.z),
        },
        // y = +-hy
        Rect {
            origin: Vec3::new(c.x - h.x, c.y + h.y, c.z - h.z),
            edge_u: Vec3::new(size.x, 0.0, 0.0),
            edge_v: Vec3::new(0.0, 0.0, size.z),
        },
        Rect {
            origin: Vec3::new(c.x - h.x, c.y - h.y, c.z - h.z),
            edge_u: Vec3::new(size.x, 0.0, 0.0),
            edge_v: Vec3::new(0.0, 0.0, size.z),
        },
        // z = +-hz
        Rect {
            origin: Vec3::new(c.x - h.x, c.y - h.y, c.z + h.z),
            edge_u: Vec3::new(size.x, 0.0, 0.0),
            edge_v: Vec3::new(0.0, size.y, 0.0),
        },
        Rect {
            origin: Vec3::new(c.x - h.x, c.y - h.y, c.z - h.z),
            edge_u: Vec3::new(size.x, 0.0, 0.0),
            edge_v: Vec3::new(0.0, size.y, 0.0),
        },
    ]
}

/// Faces of the L-section prism: the full box minus the corner block spanning
/// the positive-x, positive-z quadrant of the cross-section, full y extent.
fn lbox_faces(size: Vec3) -> Vec<Rect> {
    let h = size.scaled(0.5);
    let ey = Vec3::new(0.0, size.y, 0.0);
    let mut faces = Vec::new();
    // End caps at y = +-hy, decomposed as two rectangles each.
    for y in [h.y, -h.y] {
        faces.push(Rect {
            origin: Vec3::new(-h.x, y, -h.z),
            edge_u: Vec3::new(h.x, 0.0, 0.0),
            edge_v: Vec3::new(0.0, 0.0, size.z),
        });
        faces.push(Rect {
            origin: Vec3::new(0.0, y, -h.z),
            edge_u: Vec3::new(h.x, 0.0, 0.0),
            edge_v: Vec3::new(0.0, 0.0, h.z),
        });
    }
    // Perimeter walls of the L cross-section, swept along y.
    let corners = [
        (Vec3::new(-h.x, -h.y, -h.z), Vec3::new(size.x, 0.0, 0.0)),
        (Vec3::new(h.x, -h.y, -h.z), Vec3::new(0.0, 0.0, h.z)),
        (Vec3::new(0.0, -h.y, 0.0), Vec3::new(h.x, 0.0, 0.0)),
        (Vec3::new(0.0, -h.y, 0.0), Vec3::new(0.0, 0.0, h.z)),
        (Vec3::new(-h.x, -h.y, h.z), Vec3::new(h.x, 0.0, 0.0)),
        (Vec3::new(-h.x, -h.y, -h.z), Vec3::new(0.0, 0.0, size.z)),
    ];
    for (origin, edge) in corners {
        faces.push(Rect { origin, edge_u: edge, edge_v: ey });
    }
    faces
}

/// Body and cabin blocks of the car-like shape, within an overall bounding
/// box of `size`. The cabin is embedded slightly into the body so the contact
/// plane lies strictly inside the union and rejection sampling removes it.
fn carlike_blocks(size: Vec3) -> [(Vec3, Vec3); 2] {
    let body_height = 0.55 * size.z;
    let overlap = 0.05 * size.z;
    let body_center = Vec3::new(0.0, 0.0, -0.5 * size.z + 0.5 * body_height);
    let body_size = Vec3::new(size.x, size.y, body_height);
    let cabin_height = size.z - body_height + overlap;
    let cabin_center = Vec3::new(-0.1 * size.x, 0.0, 0.5 * size.z - 0.5 * cabin_height);
    let cabin_size = Vec3::new(0.5 * size.x, 0.8 * size.y, cabin_height);
    [(body_center, body_size), (cabin_center, cabin_size)]
}

fn strictly_inside(p: Vec3, center: Vec3, size: Vec3, margin: f64) -> bool {
    let h = size.scaled(0.5);
    let d = p - center;
    d.x.abs() < h.x - margin && d.y.abs() < h.y - margin && d.z.abs() < h.z - margin
}

/// Uniform-random samples of the solid's boundary surface, centered at the
/// origin with overall bounding box `size`. Identical seeds give identical
/// clouds.
pub fn generate_shape(kind: ShapeKind, size: Vec3, surface_density: f64, seed: u64) -> GeoResult<PointCloud> {
    if size.x <= 0.0 || size.y <= 0.0 || size.z <= 0.0 {
        return Err(GeometryError::InvalidArgument {
            op: "generate_shape",
            message: format!("size must be positive, got ({}, {}, {})", size.x, size.y, size.z),
        });
    }
    if surface_density <= 0.0 {
        return Err(GeometryError::InvalidArgument {
            op: "generate_shape",
            message: format!("surface density must be positive, got {surface_density}"),
        });
    }
    let mut rng = stream(seed, "shape-surface", 0);
    let sample_faces = |faces: &[Rect], count: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec3> {
        let areas: Vec<f64> = faces.iter().map(Rect::area).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut pick = rng.gen::<f64>() * total;
            let mut face = &faces[faces.len() - 1];
            for (f, a) in faces.iter().zip(&areas) {
                if pick < *a {
                    face = f;
                    break;
                }
                pick -= a;
            }
            out.push(face.sample(rng));
        }
        out
    };
    let points = match kind {
        ShapeKind::Box => {
            let faces = box_faces(Vec3::ZERO, size);
            let area: f64 = faces.iter().map(Rect::area).sum();
            sample_faces(&faces, (area * surface_density).round() as usize, &mut rng)
        }
        ShapeKind::LBox => {
            let faces = lbox_faces(size);
            let area: f64 = faces.iter().map(Rect::area).sum();
            sample_faces(&faces, (area * surface_density).round() as usize, &mut rng)
        }
        ShapeKind::CarLike => {
            let [(bc, bs), (cc, cs)] = carlike_blocks(size);
            let mut faces = box_faces(bc, bs);
            faces.extend(box_faces(cc, cs));
            let area: f64 = faces.iter().map(Rect::area).sum();
            let candidates = sample_faces(&faces, (area * surface_density).round() as usize, &mut rng);
            candidates
                .into_iter()
                .filter(|&p| !strictly_inside(p, bc, bs, 0.0) && !strictly_inside(p, cc, cs, 0.0))
                .collect()
        }
    };
    Ok(PointCloud::new(points))
}

/// True when `p` lies on the boundary of the generated solid, within `tol`.
pub fn on_shape_surface(kind: ShapeKind, size: Vec3, p: Vec3, tol: f64) -> bool {
    let on_box = |center: Vec3, bsize: Vec3| {
        let h = bsize.scaled(0.5);
        let d = p - center;
        let ratios = [d.x.abs() / h.x, d.y.abs() / h.y, d.z.abs() / h.z];
        let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
        (max - 1.0).abs() <= tol
    };
    match kind {
        ShapeKind::Box => on_box(Vec3::ZERO, size),
        ShapeKind::LBox => {
            // Solid: axis box minus the open corner block {x > 0, z > 0}.
            let h = size.scaled(0.5);
            let in_y = p.y.abs() <= h.y + tol;
            let in_cross_section =
                p.x.abs() <= h.x + tol && p.z.abs() <= h.z + tol && !(p.x > tol && p.z > tol);
            let on_cap = (p.y.abs() - h.y).abs() <= tol && in_cross_section;
            let on_outer_wall = in_y
                && (((p.x + h.x).abs() <= tol && p.z.abs() <= h.z + tol)
                    || ((p.x - h.x).abs() <= tol && p.z <= tol && p.z >= -h.z - tol)
                    || ((p.z + h.z).abs() <= tol && p.x.abs() <= h.x + tol)
                    || ((p.z - h.z).abs() <= tol && p.x <= tol && p.x >= -h.x - tol));
            let on_cut_face = in_y
                && ((p.x.abs() <= tol && p.z >= -tol && p.z <= h.z + tol)
                    || (p.z.abs() <= tol && p.x >= -tol && p.x <= h.x + tol));
            on_cap || on_outer_wall || on_cut_face
        }
        ShapeKind::CarLike => {
            let [(bc, bs), (cc, cs)] = carlike_blocks(size);
            let on_union_boundary = |center: Vec3, bsize: Vec3, other_c: Vec3, other_s: Vec3| {
                let h = bsize.scaled(0.5);
                let d = p - center;
                let ratios = [d.x.abs() / h.x, d.y.abs() / h.y, d.z.abs() / h.z];
                let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
                (max - 1.0).abs() <= tol && !strictly_inside(p, other_c, other_s, tol)
            };
            on_union_boundary(bc, bs, cc, cs) || on_union_boundary(cc, cs, bc, bs)
        }
    }
}

/// Splats each point onto one pixel, keeping the minimum camera-frame depth.
/// Points behind the camera or outside the frame are skipped.
pub fn render_depth(cloud: &PointCloud, camera: &CameraModel) -> GeoResult<DepthImage> {
    if cloud.is_empty() {
        return Err(GeometryError::Empty { op: "render_depth" });
    }
    let mut depth = vec![0.0f64; camera.width * camera.height];
    for &p in &cloud.points {
        let pc = camera.pose.apply(p);
        if pc.z <= 1e-9 {
            continue;
        }
        let u = camera.focal_px * pc.x / pc.z + camera.cx;
        let v = camera.focal_px * pc.y / pc.z + camera.cy;
        let (ui, vi) = (u.round(), v.round());
        if ui < 0.0 || vi < 0.0 || ui >= camera.width as f64 || vi >= camera.height as f64 {
            continue;
        }
        let idx = vi as usize * camera.width + ui as usize;
        if depth[idx] == 0.0 || pc.z < depth[idx] {
            depth[idx] = pc.z;
        }
    }
    Ok(DepthImage { width: camera.width, height: camera.height, depth, camera: camera.clone() })
}

/// Lifts every non-zero pixel back to a world-frame point along its ray.
pub fn backproject(img: &DepthImage) -> PointCloud {
    let cam = &img.camera;
    let inv = cam.pose.inverse();
    let mut points = Vec::new();
    for v in 0..img.height {
        for u in 0..img.width {
            let d = img.depth[v * img.width + u];
            if d <= 0.0 {
                continue;
            }
            let pc = Vec3::new(
                d * (u as f64 - cam.cx) / cam.focal_px,
                d * (v as f64 - cam.cy) / cam.focal_px,
                d,
            );
            points.push(inv.apply(pc));
        }
    }
    PointCloud::new(points)
}

/// Concatenates the views after carrying each into the world frame. No
/// deduplication: downstream stages must cope with redundancy.
pub fn union_views(views: &ViewSet) -> GeoResult<PointCloud> {
    if views.views.is_empty() {
        return Err(GeometryError::Empty { op: "union_views" });
    }
    let mut points = Vec::new();
    for (cloud, pose) in &views.views {
        pose.check_rigid(1e-6)?;
        points.extend(cloud.points.iter().map(|&p| pose.apply(p)));
    }
    Ok(PointCloud::new(points))
}

/// Half-open voxel binning: `index = floor((p - origin)/voxel_size)`, so a
/// point exactly on a face lands in the higher-index voxel. Points outside
/// `dims` are dropped.
pub fn voxelize(cloud: &PointCloud, origin: Vec3, voxel_size: f64, dims: [usize; 3]) -> GeoResult<VoxelGrid> {
    if voxel_size <= 0.0 {
        return Err(GeometryError::InvalidArgument {
            op: "voxelize",
            message: format!("voxel size must be positive, got {voxel_size}"),
        });
    }
    let mut occupied = BTreeSet::new();
    for &p in &cloud.points {
        let rel = p - origin;
        let ix = (rel.x / voxel_size).floor();
        let iy = (rel.y / voxel_size).floor();
        let iz = (rel.z / voxel_size).floor();
        if ix < 0.0 || iy < 0.0 || iz < 0.0 {
            continue;
        }
        let idx = [ix as usize, iy as usize, iz as usize];
        if idx[0] < dims[0] && idx[1] < dims[1] && idx[2] < dims[2] {
            occupied.insert(idx);
        }
    }
    Ok(VoxelGrid { origin, voxel_size, dims, occupied })
}

/// Fixed-size draw: a uniform subset without replacement when the cloud has
/// at least `n` points; otherwise every point is kept and the remainder is
/// drawn with replacement.
pub fn resample(cloud: &PointCloud, n: usize, seed: u64) -> GeoResult<PointCloud> {
    if cloud.is_empty() {
        return Err(GeometryError::Empty { op: "resample" });
    }
    if n == 0 {
        return Err(GeometryError::InvalidArgument { op: "resample", message: "n must be positive".into() });
    }
    let mut rng = stream(seed, "resample", 0);
    let len = cloud.len();
    let points = if len >= n {
        // Partial Fisher-Yates: the first n slots end up a uniform
        // without-replacement draw (a full permutation when n == len).
        let mut indices: Vec<usize> = (0..len).collect();
        for i in 0..n {
            let j = rng.gen_range(i..len);
            indices.swap(i, j);
        }
        indices[..n].iter().map(|&i| cloud.points[i]).collect()
    } else {
        let mut out = cloud.points.clone();
        out.extend((len..n).map(|_| cloud.points[rng.gen_range(0..len)]));
        out
    };
    Ok(PointCloud::new(points))
}

/// Applies `p -> R p + t` after validating that `R` is a rotation.
pub fn transform(cloud: &PointCloud, pose: &Pose) -> GeoResult<PointCloud> {
    pose.check_rigid(1e-6)?;
    Ok(PointCloud::new(cloud.points.iter().map(|&p| pose.apply(p)).collect()))
}

/// World-to-sensor pose for a sensor at `position` whose boresight (+y) aims
/// at `target`; +z stays as close to world-up as the boresight allows.
pub fn look_at_sensor(position: Vec3, target: Vec3) -> GeoResult<Pose> {
    let forward = target - position;
    if forward.norm() < 1e-12 {
        return Err(GeometryError::InvalidArgument {
            op: "look_at_sensor",
            message: "sensor position coincides with target".into(),
        });
    }
    let fwd = forward.normalized();
    let up_ref = Vec3::new(0.0, 0.0, 1.0);
    let right = fwd.cross(up_ref);
    if right.norm() < 1e-9 {
        return Err(GeometryError::InvalidArgument {
            op: "look_at_sensor",
            message: "boresight parallel to world up".into(),
        });
    }
    let right = right.normalized();
    let up = right.cross(fwd);
    let rot = Mat3::from_rows(right, fwd, up);
    let trans = -rot.apply(position);
    Ok(Pose::new(rot, trans))
}

/// Camera pose colocated with a sensor pose: camera x = sensor x (right),
/// camera y = -sensor z (down), camera z = sensor y (forward).
pub fn camera_from_sensor(sensor: &Pose) -> Pose {
    let remap = Mat3 { rows: [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]] };
    Pose { rot: remap.matmul(&sensor.rot), trans: remap.apply(sensor.trans) }
}

/// Sensor poses on a circle of `radius` at `height`, at equally spaced
/// azimuths starting from +x, all aimed at `target`.
pub fn orbit_sensor_poses(count: usize, radius: f64, height: f64, target: Vec3) -> GeoResult<Vec<Pose>> {
    (0..count)
        .map(|i| {
            let angle = i as f64 * std::f64::consts::TAU / count as f64;
            let position = Vec3::new(
                target.x + radius * angle.cos(),
                target.y + radius * angle.sin(),
                target.z + height,
            );
            look_at_sensor(position, target)
        })
        .collect()
}
