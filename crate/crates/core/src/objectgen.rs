//! Procedural composite objects built from randomly scaled and posed convex primitives.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geometry::{convex_hull, Aabb, ColumnGrid, Solid, TriMesh, P3, V3};
use crate::rng::stream_rng;

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("object {id}: failed to place part {part} after {resamples} re-samples")]
    Placement {
        id: String,
        part: usize,
        resamples: usize,
    },
    #[error("mesh parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Box,
    Cylinder,
    Ellipsoid,
    RandomHull,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 4] = [
        PrimitiveKind::Box,
        PrimitiveKind::Cylinder,
        PrimitiveKind::Ellipsoid,
        PrimitiveKind::RandomHull,
    ];
}

/// A convex primitive centered on its bounding box.
#[derive(Debug, Clone)]
pub struct PrimitiveMesh {
    pub kind: PrimitiveKind,
    pub mesh: TriMesh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    /// Inclusive range for the number of parts.
    pub n_parts: (usize, usize),
    /// Per-axis primitive dimensions, meters.
    pub prim_scale: (f64, f64),
    /// Longest dimension of the final object, meters.
    pub final_size: (f64, f64),
    pub max_placement_attempts: usize,
    pub max_resamples: usize,
    /// Voxel lattice resolution for intersection tests and center of mass.
    pub voxel_resolution: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            n_parts: (1, 15),
            prim_scale: (0.01, 0.15),
            final_size: (0.05, 0.12),
            max_placement_attempts: 1000,
            max_resamples: 10,
            voxel_resolution: 64,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InvalidParams(m.to_string()));
        if self.n_parts.0 < 1 || self.n_parts.0 > self.n_parts.1 {
            return bad("n_parts must satisfy 1 <= lo <= hi");
        }
        if !(self.prim_scale.0 > 0.0 && self.prim_scale.0 <= self.prim_scale.1) {
            return bad("prim_scale must be a positive, nonempty interval");
        }
        if !(self.final_size.0 > 0.0 && self.final_size.0 <= self.final_size.1) {
            return bad("final_size must be a positive, nonempty interval");
        }
        if self.max_placement_attempts == 0 || self.voxel_resolution < 2 {
            return bad("placement attempts and voxel resolution must be positive");
        }
        Ok(())
    }
}

/// A primitive placed in the object frame.
#[derive(Debug, Clone)]
pub struct Part {
    pub kind: Option<PrimitiveKind>,
    pub solid: Solid,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenDiagnostics {
    pub placement_attempts: usize,
    pub resamples: usize,
    pub non_watertight: bool,
}

#[derive(Debug, Clone)]
pub struct CompositeObject {
    pub id: String,
    pub seed: u64,
    pub index: u64,
    pub parts: Vec<Part>,
    pub bbox: Aabb,
    pub com: P3,
    /// Imported meshes waive the convex-part invariant.
    pub imported: bool,
    pub diagnostics: GenDiagnostics,
}

impl CompositeObject {
    pub fn solids(&self) -> Vec<Solid> {
        self.parts.iter().map(|p| p.solid.clone()).collect()
    }

    pub fn merged_mesh(&self) -> TriMesh {
        TriMesh::concat(self.parts.iter().map(|p| p.solid.mesh()))
    }

    fn from_parts(id: String, seed: u64, index: u64, parts: Vec<Part>, res: usize) -> Self {
        let bbox = parts
            .iter()
            .fold(Aabb::empty(), |b, p| b.union(p.solid.aabb()));
        let solids: Vec<Solid> = parts.iter().map(|p| p.solid.clone()).collect();
        let (_, com) = ColumnGrid::build(&solids, bbox, res, res, res).volume_centroid();
        Self {
            id,
            seed,
            index,
            parts,
            bbox,
            com,
            imported: false,
            diagnostics: GenDiagnostics::default(),
        }
    }

    /// Applies `p -> scale * (p - center)` to every part.
    fn rescaled(self, center: P3, scale: f64, res: usize) -> Self {
        let parts = self
            .parts
            .iter()
            .map(|p| Part {
                kind: p.kind,
                solid: p
                    .solid
                    .transformed(|v| P3::from((v - center) * scale)),
            })
            .collect();
        let mut out = Self::from_parts(self.id, self.seed, self.index, parts, res);
        out.imported = self.imported;
        out.diagnostics = self.diagnostics;
        out
    }
}

fn box_triangles() -> Vec<[u32; 3]> {
    // Vertex k has coordinates (bit0, bit1, bit2).
    vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ]
}

pub fn box_mesh(dims: [f64; 3]) -> TriMesh {
    let v = (0..8)
        .map(|k| {
            let s = |bit: usize, d: f64| if (k >> bit) & 1 == 1 { d / 2.0 } else { -d / 2.0 };
            P3::new(s(0, dims[0]), s(1, dims[1]), s(2, dims[2]))
        })
        .collect();
    TriMesh::new(v, box_triangles())
}

pub fn cylinder_mesh(diameter: f64, height: f64, segments: usize) -> TriMesh {
    let r = diameter / 2.0;
    let mut v = Vec::with_capacity(2 * segments);
    for z in [-height / 2.0, height / 2.0] {
        for k in 0..segments {
            let a = 2.0 * PI * k as f64 / segments as f64;
            v.push(P3::new(r * a.cos(), r * a.sin(), z));
        }
    }
    let s = segments as u32;
    let mut t = Vec::new();
    for k in 0..s {
        let k1 = (k + 1) % s;
        t.push([k, k1, s + k1]);
        t.push([k, s + k1, s + k]);
    }
    for k in 1..s - 1 {
        t.push([0, k + 1, k]);
        t.push([s, s + k, s + k + 1]);
    }
    TriMesh::new(v, t)
}

/// Latitude-longitude ellipsoid; `lat` must be even so the equator is a ring.
pub fn ellipsoid_mesh(dims: [f64; 3], lat: usize, lon: usize) -> TriMesh {
    let mut v = vec![P3::new(0.0, 0.0, -dims[2] / 2.0)];
    for i in 1..lat {
        let phi = -PI / 2.0 + PI * i as f64 / lat as f64;
        for k in 0..lon {
            let th = 2.0 * PI * k as f64 / lon as f64;
            v.push(P3::new(
                dims[0] / 2.0 * phi.cos() * th.cos(),
                dims[1] / 2.0 * phi.cos() * th.sin(),
                dims[2] / 2.0 * phi.sin(),
            ));
        }
    }
    v.push(P3::new(0.0, 0.0, dims[2] / 2.0));
    let top = (v.len() - 1) as u32;
    let lon32 = lon as u32;
    let ring = |i: u32, k: u32| 1 + i * lon32 + (k % lon32);
    let mut t = Vec::new();
    for k in 0..lon32 {
        t.push([0, ring(0, k + 1), ring(0, k)]);
        t.push([top, ring(lat as u32 - 2, k), ring(lat as u32 - 2, k + 1)]);
    }
    for i in 0..(lat as u32 - 2) {
        for k in 0..lon32 {
            t.push([ring(i, k), ring(i, k + 1), ring(i + 1, k + 1)]);
            t.push([ring(i, k), ring(i + 1, k + 1), ring(i + 1, k)]);
        }
    }
    TriMesh::new(v, t)
}

/// Maps each axis of the mesh onto `[-d/2, d/2]` exactly.
fn normalize_extents(mesh: &TriMesh, dims: [f64; 3]) -> TriMesh {
    let b = mesh.aabb();
    let e = b.extents();
    mesh.map_vertices(|p| {
        let f = |k: usize| (p[k] - b.min[k]) / e[k] * dims[k] - dims[k] / 2.0;
        P3::new(f(0), f(1), f(2))
    })
}

pub fn sample_primitive<R: Rng + ?Sized>(rng: &mut R, params: &GenParams) -> PrimitiveMesh {
    let kind = PrimitiveKind::ALL[rng.random_range(0..PrimitiveKind::ALL.len())];
    let (lo, hi) = params.prim_scale;
    let mut dim = || {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    let dims = [dim(), dim(), dim()];
    let raw = match kind {
        PrimitiveKind::Box => box_mesh(dims),
        PrimitiveKind::Cylinder => cylinder_mesh(dims[0], dims[2], 16),
        PrimitiveKind::Ellipsoid => ellipsoid_mesh(dims, 8, 16),
        PrimitiveKind::RandomHull => loop {
            let count = rng.random_range(12..=40);
            let pts: Vec<P3> = (0..count)
                .map(|_| P3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            if let Some(h) = convex_hull(&pts) {
                break h;
            }
        },
    };
    let dims = match kind {
        PrimitiveKind::Cylinder => [dims[0], dims[0], dims[2]],
        _ => dims,
    };
    PrimitiveMesh {
        kind,
        mesh: normalize_extents(&raw, dims),
    }
}

pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion<f64> {
    loop {
        let q = Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if q.norm() > 1e-6 {
            return UnitQuaternion::from_quaternion(q);
        }
    }
}

/// Whether solid `b` and the union `a` share a voxel of the lattice spanning both.
pub fn volumes_intersect(a: &[Solid], b: &Solid, res: usize) -> bool {
    let ua = a.iter().fold(Aabb::empty(), |acc, s| acc.union(s.aabb()));
    let bb = b.aabb();
    if ua.is_empty() || !ua.intersects(bb) {
        return false;
    }
    let bounds = ua.union(bb);
    let cell = bounds.extents() / res as f64;
    let dir = V3::new(0.0, 0.0, 1.0);
    let z0 = bounds.min.z - 1.0;
    let range = |k: usize| {
        let lo = ua.min[k].max(bb.min[k]);
        let hi = ua.max[k].min(bb.max[k]);
        let i0 = (((lo - bounds.min[k]) / cell[k]) - 0.5).ceil().max(0.0) as usize;
        let i1 = (((hi - bounds.min[k]) / cell[k]) - 0.5).floor().min(res as f64 - 1.0);
        (i0, i1)
    };
    let (ix0, ix1) = range(0);
    let (iy0, iy1) = range(1);
    if ix1 < 0.0 || iy1 < 0.0 {
        return false;
    }
    let mut sa = Vec::new();
    let mut sb = Vec::new();
    for j in iy0..=(iy1 as usize) {
        let y = bounds.min.y + (j as f64 + 0.5) * cell.y;
        for i in ix0..=(ix1 as usize) {
            let x = bounds.min.x + (i as f64 + 0.5) * cell.x;
            let origin = P3::new(x, y, z0);
            sb.clear();
            b.ray_spans(&origin, &dir, &mut sb);
            if sb.is_empty() {
                continue;
            }
            sa.clear();
            for s in a {
                s.ray_spans(&origin, &dir, &mut sa);
            }
            for p in &sb {
                for q in &sa {
                    let lo = z0 + p.t_in.max(q.t_in);
                    let hi = z0 + p.t_out.min(q.t_out);
                    if lo > hi {
                        continue;
                    }
                    let k = ((lo - bounds.min.z) / cell.z - 0.5).ceil();
                    if bounds.min.z + (k + 0.5) * cell.z <= hi {
                        return true;
                    }
                }
            }
        }
    }
    false
}

pub fn object_id(seed: u64, index: u64) -> String {
    format!("r{seed}-{index:06}")
}

/// Generates the object with the given index from a global seed.
pub fn generate_indexed(seed: u64, index: u64, params: &GenParams) -> Result<CompositeObject, GenError> {
    let mut rng = stream_rng(seed, index);
    let mut obj = generate_object(&mut rng, params, object_id(seed, index))?;
    obj.seed = seed;
    obj.index = index;
    Ok(obj)
}

pub fn generate_object(
    rng: &mut ChaCha8Rng,
    params: &GenParams,
    id: String,
) -> Result<CompositeObject, GenError> {
    params.validate()?;
    let n_parts = rng.random_range(params.n_parts.0..=params.n_parts.1);
    let mut diag = GenDiagnostics::default();
    let mut parts: Vec<Part> = Vec::with_capacity(n_parts);
    let mut solids: Vec<Solid> = Vec::with_capacity(n_parts);
    for k in 0..n_parts {
        let mut placed = None;
        'resample: for resample in 0..=params.max_resamples {
            if resample > 0 {
                diag.resamples += 1;
            }
            let prim = sample_primitive(rng, params);
            if k == 0 {
                let rot = random_rotation(rng);
                placed = Some((prim.kind, prim.mesh.map_vertices(|p| rot * p)));
                break;
            }
            let region = solids
                .iter()
                .fold(Aabb::empty(), |b, s| b.union(s.aabb()))
                .inflated(1.2);
            for _ in 0..params.max_placement_attempts {
                diag.placement_attempts += 1;
                let rot = random_rotation(rng);
                let t = V3::new(
                    rng.random_range(region.min.x..=region.max.x),
                    rng.random_range(region.min.y..=region.max.y),
                    rng.random_range(region.min.z..=region.max.z),
                );
                let mesh = prim.mesh.map_vertices(|p| rot * p + t);
                let candidate = Solid::convex(mesh.clone(), 1e-9).expect("primitive is convex");
                if volumes_intersect(&solids, &candidate, params.voxel_resolution) {
                    placed = Some((prim.kind, mesh));
                    break 'resample;
                }
            }
        }
        let Some((kind, mesh)) = placed else {
            return Err(GenError::Placement {
                id,
                part: k,
                resamples: params.max_resamples,
            });
        };
        let solid = Solid::convex(mesh, 1e-9).expect("primitive is convex");
        solids.push(solid.clone());
        parts.push(Part {
            kind: Some(kind),
            solid,
        });
    }
    let res = params.voxel_resolution;
    let mut obj = CompositeObject::from_parts(id, 0, 0, parts, res);
    let (lo, hi) = params.final_size;
    let target = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let scale = target / obj.bbox.longest();
    let center = obj.bbox.center();
    obj.diagnostics = diag;
    Ok(obj.rescaled(center, scale, res))
}

/// Plain-text OFF serialization of the merged mesh; coordinates use shortest round-trip formatting.
pub fn to_off(mesh: &TriMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "OFF");
    let _ = writeln!(s, "{} {} 0", mesh.vertices.len(), mesh.triangles.len());
    for v in &mesh.vertices {
        let _ = writeln!(s, "{:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

pub fn parse_off(text: &str, path: &str) -> Result<TriMesh, GenError> {
    let err = |msg: String| GenError::Parse {
        path: path.to_string(),
        msg,
    };
    let mut lines = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| err("empty file".into()))?;
    let counts_line = if header == "OFF" {
        lines.next().ok_or_else(|| err("missing counts line".into()))?
    } else if let Some(rest) = header.strip_prefix("OFF") {
        rest.trim()
    } else {
        return Err(err(format!("expected OFF header, found {header:?}")));
    };
    let counts: Vec<usize> = counts_line
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| err(format!("bad count {t:?}"))))
        .collect::<Result<_, _>>()?;
    if counts.len() < 2 {
        return Err(err("counts line needs vertex and face counts".into()));
    }
    let (nv, nf) = (counts[0], counts[1]);
    let mut vertices = Vec::with_capacity(nv);
    for i in 0..nv {
        let line = lines.next().ok_or_else(|| err(format!("missing vertex {i}")))?;
        let c: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse().map_err(|_| err(format!("bad coordinate {t:?}"))))
            .collect::<Result<_, _>>()?;
        if c.len() != 3 || c.iter().any(|x| !x.is_finite()) {
            return Err(err(format!("vertex {i} needs three finite coordinates")));
        }
        vertices.push(P3::new(c[0], c[1], c[2]));
    }
    let mut triangles = Vec::with_capacity(nf);
    for f in 0..nf {
        let line = lines.next().ok_or_else(|| err(format!("missing face {f}")))?;
        let idx: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(format!("bad index {t:?}"))))
            .collect::<Result<_, _>>()?;
        let k = *idx.first().ok_or_else(|| err(format!("empty face {f}")))?;
        if k < 3 || idx.len() < k + 1 {
            return Err(err(format!("face {f} is malformed")));
        }
        let poly = &idx[1..=k];
        if poly.iter().any(|&v| v >= nv) {
            return Err(err(format!("face {f} references a missing vertex")));
        }
        for j in 1..k - 1 {
            triangles.push([poly[0] as u32, poly[j] as u32, poly[j + 1] as u32]);
        }
    }
    if triangles.is_empty() {
        return Err(err("mesh has no faces".into()));
    }
    Ok(TriMesh::new(vertices, triangles))
}

/// Size applied to an imported mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetSize {
    Keep,
    Longest(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
}

/// Builds an object from a mesh; each connected component becomes one part
/// (convex when it is, general otherwise).
pub fn object_from_mesh(mesh: &TriMesh, id: String, target: TargetSize, res: usize) -> CompositeObject {
    let comps = mesh.components();
    let non_watertight = comps.iter().any(|c| !c.is_closed());
    if non_watertight {
        log::warn!("{id}: mesh is not watertight; volume queries use the voxel fallback");
    }
    let parts = comps
        .into_iter()
        .map(|c| Part {
            kind: None,
            solid: Solid::from_mesh(c),
        })
        .collect();
    let mut obj = CompositeObject::from_parts(id, 0, 0, parts, res);
    obj.imported = true;
    obj.diagnostics.non_watertight = non_watertight;
    let longest = match target {
        TargetSize::Keep => return obj,
        TargetSize::Longest(l) => l,
        TargetSize::Uniform { lo, hi, seed } => {
            let mut rng = stream_rng(seed, 0);
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        }
    };
    let scale = longest / obj.bbox.longest();
    let center = obj.bbox.center();
    obj.rescaled(center, scale, res)
}

pub fn import_mesh(path: &Path, target: TargetSize) -> Result<CompositeObject, GenError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| GenError::Io {
        path: p.clone(),
        source,
    })?;
    let mesh = parse_off(&text, &p)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "imported".into());
    Ok(object_from_mesh(&mesh, id, target, GenParams::default().voxel_resolution))
}

pub fn export_mesh(obj: &CompositeObject, path: &Path) -> Result<(), GenError> {
    std::fs::write(path, to_off(&obj.merged_mesh())).map_err(|source| GenError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn dims_of(m: &TriMesh) -> V3 {
        m.aabb().extents()
    }

    #[test]
    fn primitive_dims_within_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = GenParams::default();
        for _ in 0..500 {
            let p = sample_primitive(&mut rng, &params);
            let d = dims_of(&p.mesh);
            for k in 0..3 {
                assert!(d[k] >= 0.01 - 1e-12 && d[k] <= 0.15 + 1e-12, "{:?} {d:?}", p.kind);
            }
            assert!(p.mesh.is_closed(), "{:?}", p.kind);
            assert!(p.mesh.signed_volume() > 0.0, "{:?}", p.kind);
        }
    }

    #[test]
    fn point_scale_range_gives_exact_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = GenParams {
            prim_scale: (0.05, 0.05),
            ..GenParams::default()
        };
        for _ in 0..100 {
            let d = dims_of(&sample_primitive(&mut rng, &params).mesh);
            assert_eq!([d.x, d.y, d.z], [0.05, 0.05, 0.05]);
        }
    }

    #[test]
    fn single_part_object() {
        let params = GenParams {
            n_parts: (1, 1),
            ..GenParams::default()
        };
        let obj = generate_indexed(5, 0, &params).unwrap();
        assert_eq!(obj.parts.len(), 1);
        let l = obj.bbox.longest();
        assert!((0.05..=0.12 + 1e-12).contains(&l));
    }

    #[test]
    fn generation_is_deterministic() {
        let params = GenParams::default();
        let a = generate_indexed(11, 3, &params).unwrap();
        let b = generate_indexed(11, 3, &params).unwrap();
        assert_eq!(a.merged_mesh(), b.merged_mesh());
        assert_eq!(a.com, b.com);
        let c = generate_indexed(11, 4, &params).unwrap();
        assert_ne!(a.merged_mesh(), c.merged_mesh());
    }

    #[test]
    fn box_com_is_center() {
        let mesh = box_mesh([0.04, 0.06, 0.03]).map_vertices(|p| p + V3::new(0.1, -0.2, 0.3));
        let obj = object_from_mesh(&mesh, "box".into(), TargetSize::Keep, 64);
        assert!((obj.com - P3::new(0.1, -0.2, 0.3)).norm() < 1e-9);
    }

    #[test]
    fn off_round_trip_and_errors() {
        let obj = generate_indexed(3, 1, &GenParams::default()).unwrap();
        let text = to_off(&obj.merged_mesh());
        let back = parse_off(&text, "x").unwrap();
        assert_eq!(back, obj.merged_mesh());
        assert!(parse_off("", "empty").is_err());
        assert!(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n", "short").is_err());
        assert!(parse_off("PLY\n", "bad").is_err());
    }

    #[test]
    fn unit_cube_import_scales_uniformly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.off");
        std::fs::write(&path, to_off(&box_mesh([1.0, 1.0, 1.0]))).unwrap();
        let obj = import_mesh(&path, TargetSize::Longest(0.08)).unwrap();
        let e = obj.bbox.extents();
        for k in 0..3 {
            assert!((e[k] - 0.08).abs() < 1e-12);
        }
        assert!(obj.imported);
        let empty = dir.path().join("empty.off");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(import_mesh(&empty, TargetSize::Keep), Err(GenError::Parse { .. })));
    }

    #[test]
    fn exported_object_reimports_with_same_bbox() {
        let dir = tempfile::tempdir().unwrap();
        let obj = generate_indexed(9, 2, &GenParams::default()).unwrap();
        let path = dir.path().join("o.off");
        export_mesh(&obj, &path).unwrap();
        let back = import_mesh(&path, TargetSize::Keep).unwrap();
        assert!((back.bbox.min - obj.bbox.min).norm() < 1e-6);
        assert!((back.bbox.max - obj.bbox.max).norm() < 1e-6);
        assert_eq!(back.parts.len(), obj.parts.len());
        assert!(back.parts.iter().all(|p| p.solid.is_convex()));
    }
}
