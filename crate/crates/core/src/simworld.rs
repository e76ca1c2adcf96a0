//! Deterministic geometric world: depth rendering, depth noise, instant grasp
//! rejection and a five-clause grasp-success oracle.
//!
//! Gripper frame: `x` is the closing axis, `y` spans the finger width and `z`
//! points from the fingertips toward the palm. The gripper approaches along `-z`.

use std::io::{Read, Write};

use nalgebra::Rotation3;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::geometry::{line_spans, ypr_rotation, Aabb, ColumnGrid, Solid, P3, V3};
use crate::graspspace::{debucketize, ContinuousPose, Grasp, GraspSpec};
use crate::objectgen::CompositeObject;

/// A single object resting on the table plane `z = 0`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub object_id: String,
    /// Yaw applied when the object was placed.
    pub yaw: f64,
    pub table_extent: f64,
    solids: Vec<Solid>,
    bbox: Aabb,
    com: P3,
    grid: Option<ColumnGrid>,
}

pub const GRID_RESOLUTION: usize = 128;

impl Scene {
    /// Rotates the object about `z` by `yaw`, centers its bounding box over the
    /// origin and drops it onto the table.
    pub fn place(object: &CompositeObject, yaw: f64) -> Scene {
        let rot = Rotation3::from_axis_angle(&V3::z_axis(), yaw);
        let rotated: Vec<Solid> = object
            .parts
            .iter()
            .map(|p| p.solid.transformed(|v| rot * v))
            .collect();
        let b = rotated.iter().fold(Aabb::empty(), |acc, s| acc.union(s.aabb()));
        let c = b.center();
        let shift = V3::new(-c.x, -c.y, -b.min.z);
        let solids: Vec<Solid> = rotated
            .iter()
            .map(|s| s.transformed(|v| v + shift))
            .collect();
        let com = rot * object.com + shift;
        let mut scene = Scene::from_solids(object.id.clone(), solids, com);
        scene.yaw = yaw;
        scene
    }

    /// Scene from solids already posed in the world frame.
    pub fn from_solids(object_id: String, solids: Vec<Solid>, com: P3) -> Scene {
        let bbox = solids.iter().fold(Aabb::empty(), |acc, s| acc.union(s.aabb()));
        let grid = (!solids.is_empty()).then(|| {
            ColumnGrid::build(&solids, bbox, GRID_RESOLUTION, GRID_RESOLUTION, GRID_RESOLUTION)
        });
        Scene {
            object_id,
            yaw: 0.0,
            table_extent: 0.6,
            solids,
            bbox,
            com,
            grid,
        }
    }

    pub fn empty() -> Scene {
        Scene {
            object_id: String::new(),
            yaw: 0.0,
            table_extent: 0.6,
            solids: Vec::new(),
            bbox: Aabb::new(P3::origin(), P3::origin()),
            com: P3::origin(),
            grid: None,
        }
    }

    pub fn solids(&self) -> &[Solid] {
        &self.solids
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn com(&self) -> P3 {
        self.com
    }

    pub fn grid(&self) -> Option<&ColumnGrid> {
        self.grid.as_ref()
    }

    /// Nearest non-negative hit distance along a ray, including the table plane.
    pub fn cast(&self, origin: &P3, dir: &V3, far: f64) -> f64 {
        let mut best = far;
        if origin.z <= 0.0 {
            return 0.0;
        }
        if dir.z < 0.0 {
            best = best.min(origin.z / -dir.z);
        }
        for s in &self.solids {
            let mut spans = Vec::new();
            s.ray_spans(origin, dir, &mut spans);
            for sp in spans {
                if sp.t_out >= 0.0 {
                    best = best.min(sp.t_in.max(0.0));
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraKind {
    SceneTopDown,
    HandAligned,
}

/// Orthographic depth camera. Image columns follow the frame's `x` axis, rows its
/// `y` axis, and rays travel along the frame's `-z` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSpec {
    pub kind: CameraKind,
    pub height: usize,
    pub width: usize,
    pub extent: f64,
    pub origin: P3,
    pub frame: Rotation3<f64>,
}

/// Maximum reported depth for rays that never meet a surface.
pub const FAR_DEPTH: f64 = 2.0;

impl CameraSpec {
    pub fn scene_topdown(resolution: usize, extent: f64, height: f64) -> Self {
        Self {
            kind: CameraKind::SceneTopDown,
            height: resolution,
            width: resolution,
            extent,
            origin: P3::new(0.0, 0.0, height),
            frame: Rotation3::identity(),
        }
    }

    /// Camera on the approach axis, `standoff` behind the grasp center, image plane
    /// spanned by the closing axis and the finger-width axis.
    pub fn hand_aligned(pose: &ContinuousPose, resolution: usize, extent: f64, standoff: f64) -> Self {
        let frame = ypr_rotation(pose.yaw, pose.pitch, pose.roll);
        Self {
            kind: CameraKind::HandAligned,
            height: resolution,
            width: resolution,
            extent,
            origin: pose.position + frame * V3::z() * standoff,
            frame,
        }
    }
}

/// Row-major depth image in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// `GFDI` blob: 16-byte little-endian header then `H·W` f32 values, row-major.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b"GFDI")?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ImageFormatError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| ImageFormatError::Truncated)?;
        if &header[0..4] != b"GFDI" {
            return Err(ImageFormatError::BadMagic);
        }
        let u = |k: usize| u32::from_le_bytes(header[k..k + 4].try_into().unwrap()) as usize;
        let (height, width) = (u(4), u(8));
        if height == 0 || width == 0 || height.saturating_mul(width) > 1 << 26 {
            return Err(ImageFormatError::BadShape(height, width));
        }
        let mut raw = vec![0u8; 4 * height * width];
        r.read_exact(&mut raw).map_err(|_| ImageFormatError::Truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ImageFormatError {
    #[error("bad image magic (expected GFDI)")]
    BadMagic,
    #[error("truncated image blob")]
    Truncated,
    #[error("invalid image shape {0}x{1}")]
    BadShape(usize, usize),
}

pub fn render_depth(scene: &Scene, camera: &CameraSpec) -> DepthImage {
    let u = camera.frame * V3::x();
    let v = camera.frame * V3::y();
    let dir = -(camera.frame * V3::z());
    let mut img = DepthImage::filled(camera.height, camera.width, 0.0);
    let px = camera.extent / camera.width as f64;
    let py = camera.extent / camera.height as f64;
    for r in 0..camera.height {
        for c in 0..camera.width {
            let du = (c as f64 + 0.5) * px - camera.extent / 2.0;
            let dv = (r as f64 + 0.5) * py - camera.extent / 2.0;
            let o = camera.origin + u * du + v * dv;
            img.data[r * camera.width + c] = scene.cast(&o, &dir, FAR_DEPTH) as f32;
        }
    }
    img
}

/// Multiplicative Gamma bias (one draw per image) plus per-pixel Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub gamma_shape: f64,
    pub gamma_scale: f64,
    pub gaussian_sigma: f64,
    pub enabled: bool,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            gamma_shape: 1000.0,
            gamma_scale: 1.0 / 1000.0,
            gaussian_sigma: 0.002,
            enabled: true,
        }
    }
}

impl NoiseParams {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn with_shape(shape: f64, sigma: f64) -> Self {
        Self {
            gamma_shape: shape,
            gamma_scale: 1.0 / shape,
            gaussian_sigma: sigma,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma_shape > 0.0 && self.gamma_scale > 0.0) {
            return Err("gamma shape and scale must be positive".into());
        }
        if !(self.gaussian_sigma >= 0.0) {
            return Err("gaussian sigma must be non-negative".into());
        }
        if ((self.gamma_shape * self.gamma_scale) - 1.0).abs() > 1e-12 {
            return Err("gamma mean must be 1".into());
        }
        Ok(())
    }

    /// Analytic per-pixel mean and variance for a rendered depth `d`.
    pub fn moments(&self, d: f64) -> (f64, f64) {
        let mean_a = self.gamma_shape * self.gamma_scale;
        let var_a = self.gamma_shape * self.gamma_scale * self.gamma_scale;
        (mean_a * d, d * d * var_a + self.gaussian_sigma * self.gaussian_sigma)
    }
}

pub fn apply_depth_noise<R: Rng + ?Sized>(img: &DepthImage, p: &NoiseParams, rng: &mut R) -> DepthImage {
    if !p.enabled {
        return img.clone();
    }
    let alpha = Gamma::new(p.gamma_shape, p.gamma_scale)
        .expect("validated gamma parameters")
        .sample(rng);
    let normal = Normal::new(0.0, p.gaussian_sigma).expect("validated sigma");
    let data = img
        .data
        .iter()
        .map(|&d| {
            let eps = if p.gaussian_sigma > 0.0 {
                normal.sample(rng)
            } else {
                0.0
            };
            (alpha * d as f64 + eps).max(0.0) as f32
        })
        .collect();
    DepthImage {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Parallel-jaw gripper geometry, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperSpec {
    pub max_opening: f64,
    /// Finger extent along the gripper `y` axis.
    pub finger_width: f64,
    /// Finger extent along the closing axis.
    pub finger_thickness: f64,
    /// Height of the contact pad, centered on the grasp point.
    pub pad_height: f64,
    /// Distance from the grasp point to the palm along the approach axis.
    pub finger_length: f64,
}

impl Default for GripperSpec {
    fn default() -> Self {
        Self {
            max_opening: 0.10,
            finger_width: 0.02,
            finger_thickness: 0.01,
            pad_height: 0.02,
            finger_length: 0.04,
        }
    }
}

/// Oracle thresholds and sampling density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub gripper: GripperSpec,
    /// Half-angle of the cone around the grasp axis that contact normals must fall in.
    pub antipodal_cone_deg: f64,
    /// Contact line must pass within this fraction of the contact separation from the com.
    pub stability_factor: f64,
    /// Contact lines within this distance of the first touch form the contact patch.
    pub contact_tolerance: f64,
    /// Pad sample lines per pad side.
    pub pad_samples: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            gripper: GripperSpec::default(),
            antipodal_cone_deg: 30.0,
            stability_factor: 0.35,
            contact_tolerance: 0.0015,
            pad_samples: 9,
        }
    }
}

/// Camera, noise and oracle settings for one simulated world.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub grasp: GraspSpec,
    pub oracle: OracleConfig,
    pub scene_resolution: usize,
    pub scene_extent: f64,
    pub scene_camera_height: f64,
    pub hand_resolution: usize,
    pub hand_extent: f64,
    pub hand_standoff: f64,
    pub noise: NoiseParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grasp: GraspSpec::default(),
            oracle: OracleConfig::default(),
            scene_resolution: 64,
            scene_extent: 0.30,
            scene_camera_height: 0.5,
            hand_resolution: 32,
            hand_extent: 0.15,
            hand_standoff: 0.10,
            noise: NoiseParams::default(),
        }
    }
}

impl SimConfig {
    pub fn scene_camera(&self) -> CameraSpec {
        CameraSpec::scene_topdown(self.scene_resolution, self.scene_extent, self.scene_camera_height)
    }

    pub fn pose_of(&self, scene: &Scene, g: &Grasp) -> ContinuousPose {
        debucketize(g, scene.bbox(), &self.grasp)
    }

    pub fn hand_camera(&self, pose: &ContinuousPose) -> CameraSpec {
        CameraSpec::hand_aligned(pose, self.hand_resolution, self.hand_extent, self.hand_standoff)
    }

    /// Clean top-down observation of the scene.
    pub fn render_scene(&self, scene: &Scene) -> DepthImage {
        render_depth(scene, &self.scene_camera())
    }

    /// Clean hand-camera image for a candidate grasp.
    pub fn render_hand(&self, scene: &Scene, g: &Grasp) -> DepthImage {
        render_depth(scene, &self.hand_camera(&self.pose_of(scene, g)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutcomeReason {
    Ok,
    Penetration,
    NoContact,
    ExceedsOpening,
    NotAntipodal,
    Unstable,
}

impl OutcomeReason {
    pub fn name(self) -> &'static str {
        match self {
            OutcomeReason::Ok => "ok",
            OutcomeReason::Penetration => "penetration",
            OutcomeReason::NoContact => "no_contact",
            OutcomeReason::ExceedsOpening => "exceeds_opening",
            OutcomeReason::NotAntipodal => "not_antipodal",
            OutcomeReason::Unstable => "unstable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraspOutcome {
    pub success: bool,
    pub reason: OutcomeReason,
}

impl GraspOutcome {
    fn from_reason(reason: OutcomeReason) -> Self {
        Self {
            success: reason == OutcomeReason::Ok,
            reason,
        }
    }
}

/// Contact patches found by closing both fingers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contacts {
    pub left_centroid: P3,
    pub right_centroid: P3,
    pub left_normal: V3,
    pub right_normal: V3,
    /// Extent along the closing axis of the object material inside the closing stroke.
    pub gripped_width: f64,
    /// The object occupies a finger's open position.
    pub blocked: bool,
}

/// Every clause evaluated independently where it can be.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspDiagnostics {
    pub outcome: GraspOutcome,
    pub penetration: bool,
    pub closing_region_occupied: bool,
    pub contacts: Option<Contacts>,
    pub within_opening: Option<bool>,
    pub antipodal: Option<bool>,
    /// Distance from the projected com to the contact line, and the allowed maximum.
    pub stability: Option<(f64, f64)>,
}

impl GraspDiagnostics {
    pub fn stable(&self) -> Option<bool> {
        self.stability.map(|(d, lim)| d <= lim)
    }
}

/// Axis-aligned box in the gripper frame; `hi.z` may be infinite for swept volumes.
#[derive(Debug, Clone, Copy)]
struct FrameBox {
    lo: V3,
    hi: V3,
}

struct GripperFrame {
    origin: P3,
    rot: Rotation3<f64>,
    upright: bool,
}

impl GripperFrame {
    fn new(pose: &ContinuousPose) -> Self {
        let rot = ypr_rotation(pose.yaw, pose.pitch, pose.roll);
        let upright = pose.pitch == 0.0 && pose.roll == 0.0;
        Self {
            origin: pose.position,
            rot,
            upright,
        }
    }

    fn to_world(&self, local: &V3) -> P3 {
        self.origin + self.rot * local
    }

    fn axis(&self, k: usize) -> V3 {
        self.rot * V3::ith(k, 1.0)
    }
}

fn gripper_boxes(g: &GripperSpec) -> [FrameBox; 3] {
    let (o, th, w) = (g.max_opening / 2.0, g.finger_thickness, g.finger_width / 2.0);
    let zb = -g.pad_height / 2.0;
    [
        FrameBox {
            lo: V3::new(-o - th, -w, zb),
            hi: V3::new(-o, w, f64::INFINITY),
        },
        FrameBox {
            lo: V3::new(o, -w, zb),
            hi: V3::new(o + th, w, f64::INFINITY),
        },
        FrameBox {
            lo: V3::new(-o - th, -w, g.finger_length),
            hi: V3::new(o + th, w, f64::INFINITY),
        },
    ]
}

fn closing_box(g: &GripperSpec) -> FrameBox {
    FrameBox {
        lo: V3::new(-g.max_opening / 2.0, -g.finger_width / 2.0, -g.pad_height / 2.0),
        hi: V3::new(g.max_opening / 2.0, g.finger_width / 2.0, g.pad_height / 2.0),
    }
}

/// Whether the voxelized object has material inside the box.
fn box_occupied(grid: &ColumnGrid, frame: &GripperFrame, b: &FrameBox) -> bool {
    let bounds = grid.bounds();
    if frame.upright {
        // Vertical boxes reduce to z-interval queries on the footprint's columns.
        let (zlo, zhi) = (frame.origin.z + b.lo.z, frame.origin.z + b.hi.z);
        if zlo > bounds.max.z || zhi < bounds.min.z {
            return false;
        }
        let corners = [
            frame.to_world(&V3::new(b.lo.x, b.lo.y, 0.0)),
            frame.to_world(&V3::new(b.hi.x, b.lo.y, 0.0)),
            frame.to_world(&V3::new(b.lo.x, b.hi.y, 0.0)),
            frame.to_world(&V3::new(b.hi.x, b.hi.y, 0.0)),
        ];
        let fp = Aabb::from_points(&corners);
        let cell = grid.cell_size();
        let (nx, ny, _) = grid.dims();
        let idx = |v: f64, lo: f64, d: f64, n: usize| -> (isize, isize) {
            let a = ((v - lo) / d - 0.5).floor() as isize;
            (a.max(0), a.min(n as isize - 1))
        };
        let (i0, _) = idx(fp.min.x, bounds.min.x, cell.x, nx);
        let (_, i1) = idx(fp.max.x + cell.x, bounds.min.x, cell.x, nx);
        let (j0, _) = idx(fp.min.y, bounds.min.y, cell.y, ny);
        let (_, j1) = idx(fp.max.y + cell.y, bounds.min.y, cell.y, ny);
        let (ax, ay) = (frame.axis(0), frame.axis(1));
        for j in j0.max(0)..=j1 {
            for i in i0.max(0)..=i1 {
                let (cx, cy) = grid.column_center(i as usize, j as usize);
                let d = V3::new(cx - frame.origin.x, cy - frame.origin.y, 0.0);
                let (lx, ly) = (d.dot(&ax), d.dot(&ay));
                if lx < b.lo.x || lx > b.hi.x || ly < b.lo.y || ly > b.hi.y {
                    continue;
                }
                if grid.top(i as usize, j as usize) < zlo {
                    continue;
                }
                if grid
                    .column(i as usize, j as usize)
                    .iter()
                    .any(|&(a, bz)| a <= zhi && bz >= zlo)
                {
                    return true;
                }
            }
        }
        false
    } else {
        // General orientation: sample the box on a lattice at voxel spacing.
        let c = grid.cell_size();
        let h = c.x.min(c.y).min(c.z).max(1e-4);
        let reach = (bounds.extents().norm() + (frame.origin - bounds.center()).norm()).max(h);
        let zhi = b.hi.z.min(b.lo.z + 2.0 * reach);
        let steps = |lo: f64, hi: f64| ((hi - lo) / h).ceil().max(1.0) as usize;
        let (sx, sy, sz) = (steps(b.lo.x, b.hi.x), steps(b.lo.y, b.hi.y), steps(b.lo.z, zhi));
        for kz in 0..=sz {
            let z = b.lo.z + (zhi - b.lo.z) * kz as f64 / sz as f64;
            for ky in 0..=sy {
                let y = b.lo.y + (b.hi.y - b.lo.y) * ky as f64 / sy as f64;
                for kx in 0..=sx {
                    let x = b.lo.x + (b.hi.x - b.lo.x) * kx as f64 / sx as f64;
                    let p = frame.to_world(&V3::new(x, y, z));
                    if bounds.contains(&p, 0.0) && grid.occupied(&p) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

fn below_table(frame: &GripperFrame, g: &GripperSpec) -> bool {
    let (o, th, w) = (g.max_opening / 2.0, g.finger_thickness, g.finger_width / 2.0);
    let zb = -g.pad_height / 2.0;
    [-o - th, o + th]
        .iter()
        .flat_map(|&x| [-w, w].map(move |y| V3::new(x, y, zb)))
        .any(|p| frame.to_world(&p).z < 0.0)
}

struct QuickCheck {
    penetration: bool,
    occupied: bool,
}

fn quick_check(scene: &Scene, pose: &ContinuousPose, cfg: &OracleConfig) -> QuickCheck {
    let frame = GripperFrame::new(pose);
    let Some(grid) = scene.grid() else {
        return QuickCheck {
            penetration: below_table(&frame, &cfg.gripper),
            occupied: false,
        };
    };
    let penetration = below_table(&frame, &cfg.gripper)
        || gripper_boxes(&cfg.gripper)
            .iter()
            .any(|b| box_occupied(grid, &frame, b));
    let occupied = box_occupied(grid, &frame, &closing_box(&cfg.gripper));
    QuickCheck {
        penetration,
        occupied,
    }
}

/// Instant rejection: the open gripper's swept body hits the object or table, or the
/// closing stroke holds no object material.
pub fn quick_reject_pose(scene: &Scene, pose: &ContinuousPose, cfg: &OracleConfig) -> bool {
    let q = quick_check(scene, pose, cfg);
    q.penetration || !q.occupied
}

pub fn quick_reject(scene: &Scene, g: &Grasp, sim: &SimConfig) -> bool {
    quick_reject_pose(scene, &sim.pose_of(scene, g), &sim.oracle)
}

fn find_contacts(scene: &Scene, pose: &ContinuousPose, cfg: &OracleConfig) -> Option<Contacts> {
    let frame = GripperFrame::new(pose);
    let g = &cfg.gripper;
    let half = g.max_opening / 2.0;
    let (ax, ay, az) = (frame.axis(0), frame.axis(1), frame.axis(2));
    let n = cfg.pad_samples.max(1);
    let sample = |k: usize, extent: f64| (k as f64 + 0.5) / n as f64 * extent - extent / 2.0;
    // Per line: (y, z, left t, left normal, right t, right normal).
    let mut lines = Vec::with_capacity(n * n);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut blocked = false;
    for ky in 0..n {
        let y = sample(ky, g.finger_width);
        for kz in 0..n {
            let z = sample(kz, g.pad_height);
            let origin = frame.to_world(&V3::new(0.0, y, z));
            let spans = line_spans(scene.solids(), &origin, &ax);
            let inside: Vec<_> = spans
                .iter()
                .filter(|s| s.t_out >= -half && s.t_in <= half)
                .collect();
            let (Some(first), Some(last)) = (inside.first(), inside.last()) else {
                continue;
            };
            lo = lo.min(first.t_in);
            hi = hi.max(last.t_out);
            blocked |= first.t_in < -half || last.t_out > half;
            lines.push((y, z, first.t_in.max(-half), first.n_in, last.t_out.min(half), last.n_out));
        }
    }
    if lines.is_empty() {
        return None;
    }
    let t_left = lines.iter().map(|l| l.2).fold(f64::INFINITY, f64::min);
    let t_right = lines.iter().map(|l| l.4).fold(f64::NEG_INFINITY, f64::max);
    let patch = |left: bool| {
        let mut p = V3::zeros();
        let mut nrm = V3::zeros();
        let mut count = 0.0;
        for &(y, z, tl, nl, tr, nr) in &lines {
            let (t, nv, keep) = if left {
                (tl, nl, tl <= t_left + cfg.contact_tolerance)
            } else {
                (tr, nr, tr >= t_right - cfg.contact_tolerance)
            };
            if keep {
                p += ax * t + ay * y + az * z;
                nrm += nv;
                count += 1.0;
            }
        }
        (frame.origin + p / count, nrm.try_normalize(1e-12).unwrap_or(nrm))
    };
    let (left_centroid, left_normal) = patch(true);
    let (right_centroid, right_normal) = patch(false);
    Some(Contacts {
        left_centroid,
        right_centroid,
        left_normal,
        right_normal,
        gripped_width: hi - lo,
        blocked,
    })
}

/// Full oracle with per-clause diagnostics; the first failing clause sets the reason.
pub fn evaluate_pose(scene: &Scene, pose: &ContinuousPose, cfg: &OracleConfig) -> GraspDiagnostics {
    let q = quick_check(scene, pose, cfg);
    let contacts = if q.occupied {
        find_contacts(scene, pose, cfg)
    } else {
        None
    };
    let frame = GripperFrame::new(pose);
    let axis = frame.axis(0);
    let within_opening = contacts.map(|c| c.gripped_width <= cfg.gripper.max_opening);
    let cos_cone = cfg.antipodal_cone_deg.to_radians().cos();
    let antipodal = contacts.map(|c| {
        (-c.left_normal).dot(&axis) >= cos_cone && c.right_normal.dot(&axis) >= cos_cone
    });
    let stability = contacts.map(|c| {
        let approach = frame.axis(2);
        let mid = nalgebra::center(&c.left_centroid, &c.right_centroid);
        let com = scene.com();
        let com_plane = com - approach * (com - mid).dot(&approach);
        let span = c.right_centroid - c.left_centroid;
        let width = span.norm();
        let rel = com_plane - c.left_centroid;
        let dist = match span.try_normalize(1e-12) {
            Some(u) => (rel - u * rel.dot(&u)).norm(),
            None => rel.norm(),
        };
        (dist, cfg.stability_factor * width)
    });

    let reason = if !q.occupied {
        OutcomeReason::NoContact
    } else if q.penetration {
        match within_opening {
            Some(false) => OutcomeReason::ExceedsOpening,
            _ => OutcomeReason::Penetration,
        }
    } else if contacts.is_none() {
        OutcomeReason::NoContact
    } else if within_opening == Some(false) {
        OutcomeReason::ExceedsOpening
    } else if contacts.is_some_and(|c| c.blocked) {
        OutcomeReason::Penetration
    } else if antipodal == Some(false) {
        OutcomeReason::NotAntipodal
    } else if stability.is_some_and(|(d, lim)| d > lim) {
        OutcomeReason::Unstable
    } else {
        OutcomeReason::Ok
    };
    GraspDiagnostics {
        outcome: GraspOutcome::from_reason(reason),
        penetration: q.penetration,
        closing_region_occupied: q.occupied,
        contacts,
        within_opening,
        antipodal,
        stability,
    }
}

pub fn evaluate_grasp_detailed(scene: &Scene, g: &Grasp, sim: &SimConfig) -> GraspDiagnostics {
    evaluate_pose(scene, &sim.pose_of(scene, g), &sim.oracle)
}

pub fn evaluate_grasp(scene: &Scene, g: &Grasp, sim: &SimConfig) -> GraspOutcome {
    evaluate_grasp_detailed(scene, g, sim).outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graspspace::bucketize;
    use crate::objectgen::{box_mesh, ellipsoid_mesh, object_from_mesh, TargetSize};
    use rand::SeedableRng;

    fn scene_of(mesh: crate::geometry::TriMesh) -> Scene {
        let obj = object_from_mesh(&mesh, "t".into(), TargetSize::Keep, 64);
        Scene::place(&obj, 0.0)
    }

    fn cube(side: f64) -> Scene {
        scene_of(box_mesh([side; 3]))
    }

    fn sphere(d: f64) -> Scene {
        scene_of(ellipsoid_mesh([d; 3], 32, 64))
    }

    #[test]
    fn empty_table_renders_background() {
        let sim = SimConfig::default();
        let img = sim.render_scene(&Scene::empty());
        assert!(img.data.iter().all(|&d| (d - 0.5).abs() < 1e-7));
    }

    #[test]
    fn cube_under_topdown_camera() {
        let sim = SimConfig::default();
        let img = sim.render_scene(&cube(0.05));
        assert!((img.at(32, 32) - 0.45).abs() < 1e-6);
        assert!((img.at(31, 31) - 0.45).abs() < 1e-6);
        assert!((img.at(0, 0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn one_pixel_shift_moves_footprint() {
        let sim = SimConfig::default();
        let base = cube(0.043);
        let px = sim.scene_extent / sim.scene_resolution as f64;
        let shifted_solids: Vec<Solid> = base
            .solids()
            .iter()
            .map(|s| s.transformed(|v| v + V3::new(px, 0.0, 0.0)))
            .collect();
        let shifted = Scene::from_solids("s".into(), shifted_solids, base.com() + V3::new(px, 0.0, 0.0));
        let a = sim.render_scene(&base);
        let b = sim.render_scene(&shifted);
        for r in 0..64 {
            for c in 1..64 {
                assert!((b.at(r, c) - a.at(r, c - 1)).abs() < 1e-6, "{r} {c}");
            }
        }
    }

    #[test]
    fn gfdi_round_trip_and_bad_magic() {
        let img = DepthImage {
            height: 2,
            width: 3,
            data: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        };
        let bytes = img.to_bytes();
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(&bytes[..4], b"GFDI");
        assert_eq!(DepthImage::read_from(&mut bytes.as_slice()).unwrap(), img);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(DepthImage::read_from(&mut bad.as_slice()), Err(ImageFormatError::BadMagic));
        assert_eq!(
            DepthImage::read_from(&mut &bytes[..20]),
            Err(ImageFormatError::Truncated)
        );
    }

    #[test]
    fn disabled_noise_is_identity() {
        let sim = SimConfig::default();
        let img = sim.render_scene(&cube(0.05));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(apply_depth_noise(&img, &NoiseParams::disabled(), &mut rng), img);
    }

    #[test]
    fn noise_defaults_are_valid() {
        assert!(NoiseParams::default().validate().is_ok());
        assert!(NoiseParams::with_shape(-1.0, 0.0).validate().is_err());
    }

    fn flat_image(d: f32, n: usize) -> DepthImage {
        DepthImage {
            height: 1,
            width: n,
            data: vec![d; n],
        }
    }

    #[test]
    fn tight_gamma_barely_moves_depth() {
        let p = NoiseParams::with_shape(1e6, 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let d = 0.4f32;
        let mad: f64 = (0..10_000)
            .map(|_| (apply_depth_noise(&flat_image(d, 1), &p, &mut rng).data[0] - d).abs() as f64)
            .sum::<f64>()
            / 10_000.0;
        assert!(mad < 1e-3 * d as f64, "{mad}");
    }

    #[test]
    fn gamma_noise_is_mean_preserving() {
        // Var(alpha) = shape * scale^2 = 1/shape for unit mean.
        let p = NoiseParams::with_shape(50.0, 0.0);
        let d = 0.3f64;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| apply_depth_noise(&flat_image(d as f32, 1), &p, &mut rng).data[0] as f64)
            .sum::<f64>()
            / n as f64;
        let se = d * (1.0f64 / 50.0).sqrt() / (n as f64).sqrt();
        assert!((mean - d).abs() < 3.0 * se, "{mean} vs {d} (se {se})");
    }

    #[test]
    fn one_gamma_draw_per_image() {
        // Without pixel noise every pixel shares the same multiplier.
        let p = NoiseParams::with_shape(20.0, 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let out = apply_depth_noise(&flat_image(0.25, 16), &p, &mut rng);
        assert!(out.data.iter().all(|&v| v == out.data[0]));
        assert_ne!(out.data[0], 0.25);
    }

    #[test]
    fn rejection_is_sound_on_a_coarse_grid() {
        let sim = SimConfig {
            grasp: GraspSpec::new(4, 5).unwrap(),
            ..SimConfig::default()
        };
        let scenes = [cube(0.05), cube(0.09), sphere(0.06), scene_of(box_mesh([0.08, 0.02, 0.05]))];
        let mut rejected = 0;
        for scene in &scenes {
            for i in 0..sim.grasp.grasp_count() {
                let g = sim.grasp.grasp_at(i);
                if quick_reject(scene, &g, &sim) {
                    rejected += 1;
                    assert!(!evaluate_grasp(scene, &g, &sim).success, "{g}");
                }
            }
        }
        assert!(rejected > 0);
    }

    #[test]
    fn far_grasp_has_no_contact() {
        let scene = cube(0.05);
        let pose = ContinuousPose::upright(P3::new(1.0, 0.0, 0.025), 0.0);
        let cfg = OracleConfig::default();
        assert!(quick_reject_pose(&scene, &pose, &cfg));
        assert_eq!(evaluate_pose(&scene, &pose, &cfg).outcome.reason, OutcomeReason::NoContact);
    }

    #[test]
    fn palm_overlap_is_penetration() {
        // Palm bottom at 0.005 + 0.04 sits inside a 5 cm cube.
        let scene = cube(0.05);
        let pose = ContinuousPose::upright(P3::new(0.0, 0.0, 0.005), 0.05);
        let cfg = OracleConfig::default();
        assert!(quick_reject_pose(&scene, &pose, &cfg));
        assert_eq!(evaluate_pose(&scene, &pose, &cfg).outcome.reason, OutcomeReason::Penetration);
        // Finger swept volume through the top face, table clear.
        let pose = ContinuousPose::upright(P3::new(0.05, 0.0, 0.02), 0.0);
        assert!(quick_reject_pose(&scene, &pose, &cfg));
    }

    #[test]
    fn centered_cube_grasp_succeeds() {
        let sim = SimConfig::default();
        let scene = cube(0.05);
        let pose = ContinuousPose::upright(P3::new(0.0, 0.0, 0.025), 0.0);
        let g = bucketize(&pose, scene.bbox(), &sim.grasp).unwrap();
        assert_eq!(g.0[3], 0);
        let d = evaluate_grasp_detailed(&scene, &g, &sim);
        assert_eq!(d.outcome, GraspOutcome { success: true, reason: OutcomeReason::Ok }, "{d:?}");
    }

    #[test]
    fn oversized_cube_exceeds_opening() {
        let sim = SimConfig::default();
        let scene = cube(0.12);
        for yaw_bucket in [0u8, 10] {
            let pose = sim.pose_of(&scene, &Grasp(vec![10, 10, 10, yaw_bucket]));
            let out = evaluate_pose(&scene, &pose, &sim.oracle);
            assert_eq!(out.outcome.reason, OutcomeReason::ExceedsOpening);
        }
    }

    #[test]
    fn sphere_stability_threshold() {
        let cfg = OracleConfig::default();
        let scene = sphere(0.06);
        let c = scene.com();
        let centered = ContinuousPose::upright(c, 0.0);
        let d = evaluate_pose(&scene, &centered, &cfg);
        assert!(d.outcome.success, "{d:?}");
        // Offset the grasp axis sideways, perpendicular to the closing direction.
        let offset = ContinuousPose::upright(c + V3::new(0.0, 0.028, 0.0), 0.0);
        let d = evaluate_pose(&scene, &offset, &cfg);
        assert!(!d.outcome.success);
        assert_eq!(d.stable(), Some(false), "{d:?}");
    }

    #[test]
    fn quarter_turn_equivariance() {
        let sim = SimConfig::default();
        let a = box_mesh([0.07, 0.03, 0.04]);
        let b = box_mesh([0.02, 0.05, 0.06]).map_vertices(|p| p + V3::new(0.03, 0.02, 0.01));
        let mesh = crate::geometry::TriMesh::concat([&a, &b]);
        let scene = scene_of(mesh.clone());
        let rot = |p: &P3| P3::new(-p.y, p.x, p.z);
        let rotated_solids: Vec<Solid> = scene.solids().iter().map(|s| s.transformed(rot)).collect();
        let rotated = Scene::from_solids("r".into(), rotated_solids, rot(&scene.com()));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut successes = 0;
        for _ in 0..400 {
            let g = sim.grasp.sample_uniform(&mut rng);
            let d = &g.0;
            let mapped = Grasp(vec![19 - d[1], d[0], d[2], (d[3] + 10) % 20]);
            let o1 = evaluate_grasp(&scene, &g, &sim);
            let o2 = evaluate_grasp(&rotated, &mapped, &sim);
            assert_eq!(o1, o2, "{g} vs {mapped}");
            successes += o1.success as usize;
        }
        assert!(successes > 0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(200))]
        #[test]
        fn rejection_sound_and_outcomes_deterministic(idx in 0u64..160_000) {
            use std::sync::OnceLock;
            static SCENE: OnceLock<Scene> = OnceLock::new();
            let scene = SCENE.get_or_init(|| {
                let obj = crate::objectgen::generate_indexed(11, 3, &crate::objectgen::GenParams::default()).unwrap();
                Scene::place(&obj, 0.7)
            });
            let sim = SimConfig::default();
            let g = sim.grasp.grasp_at(idx);
            let a = evaluate_grasp(scene, &g, &sim);
            proptest::prop_assert_eq!(a, evaluate_grasp(scene, &g, &sim));
            proptest::prop_assert_eq!(a.success, a.reason == OutcomeReason::Ok);
            if quick_reject(scene, &g, &sim) {
                proptest::prop_assert!(!a.success);
            }
        }
    }
}
