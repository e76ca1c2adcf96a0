//! Solid geometry shared by the object generator and the simulated world.
//!
//! Objects are unions of closed triangle meshes ("solids"). Convex solids carry
//! a half-space representation and are ray-cast by slab clipping; general
//! solids fall back to per-triangle intersection with parity pairing.

use nalgebra::{Point3, Rotation3, Vector3};

pub type P3 = Point3<f64>;
pub type V3 = Vector3<f64>;

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: P3,
    pub max: P3,
}

impl Aabb {
    pub fn new(min: P3, max: P3) -> Self {
        Self { min, max }
    }

    pub fn empty() -> Self {
        Self {
            min: P3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            max: P3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a P3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &P3) {
        for k in 0..3 {
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut b = *self;
        b.grow(&other.min);
        b.grow(&other.max);
        b
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|k| self.min[k] > self.max[k])
    }

    pub fn extents(&self) -> V3 {
        self.max - self.min
    }

    pub fn center(&self) -> P3 {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn longest(&self) -> f64 {
        self.extents().max()
    }

    /// Scales the extents about the center by `factor`.
    pub fn inflated(&self, factor: f64) -> Aabb {
        let c = self.center();
        let h = self.extents() * (0.5 * factor);
        Aabb::new(c - h, c + h)
    }

    pub fn contains(&self, p: &P3, tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.max[k] && other.min[k] <= self.max[k])
    }

    /// Parameter range over which the ray `origin + t·dir` lies inside the box.
    pub fn ray_range(&self, origin: &P3, dir: &V3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-300 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[k];
                let (a, b) = {
                    let a = (self.min[k] - origin[k]) * inv;
                    let b = (self.max[k] - origin[k]) * inv;
                    if a < b {
                        (a, b)
                    } else {
                        (b, a)
                    }
                };
                t0 = t0.max(a);
                t1 = t1.min(b);
            }
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// Indexed triangle mesh with counter-clockwise (outward) winding.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<P3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<P3>, triangles: Vec<[u32; 3]>) -> Self {
        Self {
            vertices,
            triangles,
        }
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    pub fn triangle(&self, t: usize) -> [P3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Signed volume via the divergence theorem; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                a.coords.dot(&b.coords.cross(&c.coords)) / 6.0
            })
            .sum()
    }

    /// Every edge is shared by exactly two triangles with opposite orientation.
    pub fn is_closed(&self) -> bool {
        use std::collections::HashMap;
        let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                if a == b {
                    return false;
                }
                *edges.entry((a, b)).or_default() += 1;
            }
        }
        edges
            .iter()
            .all(|(&(a, b), &n)| n == 1 && edges.get(&(b, a)) == Some(&1))
    }

    pub fn map_vertices(&self, f: impl Fn(&P3) -> P3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(f).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Splits the mesh into vertex-connected components, preserving vertex order.
    pub fn components(&self) -> Vec<TriMesh> {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for tri in &self.triangles {
            let r0 = find(&mut parent, tri[0] as usize);
            for &v in &tri[1..] {
                let r = find(&mut parent, v as usize);
                if r != r0 {
                    let (lo, hi) = if r < r0 { (r, r0) } else { (r0, r) };
                    parent[hi] = lo;
                }
            }
        }
        let mut root_to_comp = vec![usize::MAX; n];
        let mut comps: Vec<(Vec<P3>, Vec<[u32; 3]>)> = Vec::new();
        let mut local = vec![u32::MAX; n];
        for v in 0..n {
            let r = find(&mut parent, v);
            if root_to_comp[r] == usize::MAX {
                root_to_comp[r] = comps.len();
                comps.push((Vec::new(), Vec::new()));
            }
            let c = &mut comps[root_to_comp[r]];
            local[v] = c.0.len() as u32;
            c.0.push(self.vertices[v]);
        }
        for tri in &self.triangles {
            let r = find(&mut parent, tri[0] as usize);
            comps[root_to_comp[r]]
                .1
                .push(tri.map(|v| local[v as usize]));
        }
        comps
            .into_iter()
            .filter(|(_, t)| !t.is_empty())
            .map(|(v, t)| TriMesh::new(v, t))
            .collect()
    }

    /// Concatenates meshes without sharing vertices.
    pub fn concat<'a>(meshes: impl IntoIterator<Item = &'a TriMesh>) -> TriMesh {
        let mut out = TriMesh::new(Vec::new(), Vec::new());
        for m in meshes {
            let base = out.vertices.len() as u32;
            out.vertices.extend_from_slice(&m.vertices);
            out.triangles
                .extend(m.triangles.iter().map(|t| t.map(|v| v + base)));
        }
        out
    }
}

/// Closed half-space `normal · x <= offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: V3,
    pub offset: f64,
}

/// Portion of a ray inside a solid, with outward surface normals at both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub t_in: f64,
    pub t_out: f64,
    pub n_in: V3,
    pub n_out: V3,
}

/// A closed mesh usable for ray casting and point membership.
#[derive(Debug, Clone)]
pub struct Solid {
    mesh: TriMesh,
    planes: Option<Vec<Plane>>,
    aabb: Aabb,
}

impl Solid {
    /// Builds a convex solid; returns `None` if the mesh is not convex within `tol`.
    pub fn convex(mesh: TriMesh, tol: f64) -> Option<Solid> {
        let planes = planes_of(&mesh);
        let convex = planes.iter().all(|pl| {
            mesh.vertices
                .iter()
                .all(|v| pl.normal.dot(&v.coords) <= pl.offset + tol)
        });
        convex.then(|| Solid {
            aabb: mesh.aabb(),
            mesh,
            planes: Some(planes),
        })
    }

    /// General (possibly non-convex) solid, ray-cast triangle by triangle.
    pub fn general(mesh: TriMesh) -> Solid {
        Solid {
            aabb: mesh.aabb(),
            mesh,
            planes: None,
        }
    }

    /// Convex when possible, general otherwise.
    pub fn from_mesh(mesh: TriMesh) -> Solid {
        let tol = 1e-9 * mesh.aabb().longest().max(1e-12);
        match Solid::convex(mesh.clone(), tol) {
            Some(s) => s,
            None => Solid::general(mesh),
        }
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn aabb(&self) -> &Aabb {
        &self.aabb
    }

    pub fn is_convex(&self) -> bool {
        self.planes.is_some()
    }

    pub fn transformed(&self, f: impl Fn(&P3) -> P3) -> Solid {
        let mesh = self.mesh.map_vertices(f);
        if self.planes.is_some() {
            let planes = planes_of(&mesh);
            Solid {
                aabb: mesh.aabb(),
                mesh,
                planes: Some(planes),
            }
        } else {
            Solid::general(mesh)
        }
    }

    pub fn contains(&self, p: &P3) -> bool {
        if !self.aabb.contains(p, 0.0) {
            return false;
        }
        match &self.planes {
            Some(planes) => planes.iter().all(|pl| pl.normal.dot(&p.coords) <= pl.offset),
            None => {
                let mut spans = Vec::new();
                self.ray_spans(p, &V3::new(0.0, 0.0, 1.0), &mut spans);
                spans.iter().any(|s| s.t_in <= 0.0 && s.t_out >= 0.0)
            }
        }
    }

    /// Appends the spans of the line `origin + t·dir` (all t) lying inside the solid.
    pub fn ray_spans(&self, origin: &P3, dir: &V3, out: &mut Vec<Span>) {
        if self.aabb.ray_range(origin, dir).is_none() {
            return;
        }
        match &self.planes {
            Some(planes) => {
                if let Some(s) = clip_convex(planes, origin, dir) {
                    out.push(s);
                }
            }
            None => self.mesh_spans(origin, dir, out),
        }
    }

    fn mesh_spans(&self, origin: &P3, dir: &V3, out: &mut Vec<Span>) {
        let mut hits: Vec<(f64, V3)> = Vec::new();
        for t in 0..self.mesh.triangles.len() {
            let [a, b, c] = self.mesh.triangle(t);
            if let Some(th) = ray_triangle(origin, dir, &a, &b, &c) {
                let n = (b - a).cross(&(c - a));
                let norm = n.norm();
                if norm > 0.0 {
                    hits.push((th, n / norm));
                }
            }
        }
        hits.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut open: Option<(f64, V3)> = None;
        for (t, n) in hits {
            let entering = n.dot(dir) < 0.0;
            match (entering, open) {
                (true, None) => open = Some((t, n)),
                (false, Some((t0, n0))) => {
                    out.push(Span {
                        t_in: t0,
                        t_out: t,
                        n_in: n0,
                        n_out: n,
                    });
                    open = None;
                }
                (false, None) => out.push(Span {
                    t_in: f64::NEG_INFINITY,
                    t_out: t,
                    n_in: -*dir,
                    n_out: n,
                }),
                (true, Some(_)) => {}
            }
        }
    }
}

fn planes_of(mesh: &TriMesh) -> Vec<Plane> {
    let mut planes: Vec<Plane> = Vec::with_capacity(mesh.triangles.len());
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangle(t);
        let n = (b - a).cross(&(c - a));
        let norm = n.norm();
        if norm <= 1e-300 {
            continue;
        }
        let normal = n / norm;
        let offset = normal.dot(&a.coords);
        let dup = planes
            .iter()
            .any(|p| (p.normal - normal).norm() < 1e-10 && (p.offset - offset).abs() < 1e-12);
        if !dup {
            planes.push(Plane { normal, offset });
        }
    }
    planes
}

fn clip_convex(planes: &[Plane], origin: &P3, dir: &V3) -> Option<Span> {
    let mut t_in = f64::NEG_INFINITY;
    let mut t_out = f64::INFINITY;
    let mut n_in = -*dir;
    let mut n_out = *dir;
    for pl in planes {
        let denom = pl.normal.dot(dir);
        let num = pl.offset - pl.normal.dot(&origin.coords);
        if denom.abs() < 1e-15 {
            if num < 0.0 {
                return None;
            }
            continue;
        }
        let t = num / denom;
        if denom < 0.0 {
            if t > t_in {
                t_in = t;
                n_in = pl.normal;
            }
        } else if t < t_out {
            t_out = t;
            n_out = pl.normal;
        }
        if t_in > t_out {
            return None;
        }
    }
    Some(Span {
        t_in,
        t_out,
        n_in,
        n_out,
    })
}

/// Möller–Trumbore intersection along the full line; returns the line parameter.
fn ray_triangle(origin: &P3, dir: &V3, a: &P3, b: &P3, c: &P3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-18 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

/// Merges overlapping spans (sorted by entry) into disjoint spans.
pub fn merge_spans(spans: &mut Vec<Span>) {
    spans.sort_by(|a, b| a.t_in.total_cmp(&b.t_in));
    let mut merged: Vec<Span> = Vec::with_capacity(spans.len());
    for s in spans.drain(..) {
        match merged.last_mut() {
            Some(last) if s.t_in <= last.t_out => {
                if s.t_out > last.t_out {
                    last.t_out = s.t_out;
                    last.n_out = s.n_out;
                }
            }
            _ => merged.push(s),
        }
    }
    *spans = merged;
}

/// Union of the spans of a line through a set of solids, merged.
pub fn line_spans(solids: &[Solid], origin: &P3, dir: &V3) -> Vec<Span> {
    let mut spans = Vec::new();
    for s in solids {
        s.ray_spans(origin, dir, &mut spans);
    }
    merge_spans(&mut spans);
    spans
}

/// Brute-force convex hull of a small point set in general position.
///
/// Returns `None` when the points are (numerically) degenerate.
pub fn convex_hull(points: &[P3]) -> Option<TriMesh> {
    let n = points.len();
    if n < 4 {
        return None;
    }
    let scale = Aabb::from_points(points).longest();
    let tol = 1e-12 * scale.max(1e-12);
    let mut tris: Vec<[u32; 3]> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                let nrm = (points[j] - points[i]).cross(&(points[k] - points[i]));
                if nrm.norm() < tol * scale {
                    continue;
                }
                let d = nrm.dot(&points[i].coords);
                let (mut pos, mut neg) = (false, false);
                for (l, p) in points.iter().enumerate() {
                    if l == i || l == j || l == k {
                        continue;
                    }
                    let s = nrm.dot(&p.coords) - d;
                    if s > tol * scale {
                        pos = true;
                    } else if s < -tol * scale {
                        neg = true;
                    }
                    if pos && neg {
                        break;
                    }
                }
                match (pos, neg) {
                    (false, true) => tris.push([i as u32, j as u32, k as u32]),
                    (true, false) => tris.push([i as u32, k as u32, j as u32]),
                    _ => {}
                }
            }
        }
    }
    if tris.len() < 4 {
        return None;
    }
    // Compact to hull vertices only.
    let mut remap = vec![u32::MAX; n];
    let mut verts = Vec::new();
    for t in &tris {
        for &v in t {
            if remap[v as usize] == u32::MAX {
                remap[v as usize] = verts.len() as u32;
                verts.push(points[v as usize]);
            }
        }
    }
    let tris = tris.iter().map(|t| t.map(|v| remap[v as usize])).collect();
    let mesh = TriMesh::new(verts, tris);
    mesh.is_closed().then_some(mesh)
}

/// Rotation with intrinsic z-y-x (yaw, pitch, roll) convention.
pub fn ypr_rotation(yaw: f64, pitch: f64, roll: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&V3::z_axis(), yaw)
        * Rotation3::from_axis_angle(&V3::y_axis(), pitch)
        * Rotation3::from_axis_angle(&V3::x_axis(), roll)
}

/// Vertical-column voxelization: a regular grid of (x, y) columns, each holding the
/// exact merged z-intervals of the solids along the column's center line.
#[derive(Debug, Clone)]
pub struct ColumnGrid {
    bounds: Aabb,
    nx: usize,
    ny: usize,
    nz: usize,
    offsets: Vec<u32>,
    spans: Vec<(f64, f64)>,
    top: Vec<f64>,
}

impl ColumnGrid {
    /// `nz` only defines the z lattice used for voxel-center queries.
    pub fn build(solids: &[Solid], bounds: Aabb, nx: usize, ny: usize, nz: usize) -> Self {
        let ext = bounds.extents();
        let (dx, dy) = (ext.x / nx as f64, ext.y / ny as f64);
        let mut offsets = Vec::with_capacity(nx * ny + 1);
        let mut spans = Vec::new();
        let mut top = Vec::with_capacity(nx * ny);
        let dir = V3::new(0.0, 0.0, 1.0);
        let z0 = bounds.min.z - 1.0;
        let mut buf = Vec::new();
        offsets.push(0);
        for j in 0..ny {
            let y = bounds.min.y + (j as f64 + 0.5) * dy;
            for i in 0..nx {
                let x = bounds.min.x + (i as f64 + 0.5) * dx;
                let origin = P3::new(x, y, z0);
                buf.clear();
                for s in solids {
                    s.ray_spans(&origin, &dir, &mut buf);
                }
                merge_spans(&mut buf);
                let mut t = f64::NEG_INFINITY;
                for s in &buf {
                    spans.push((z0 + s.t_in, z0 + s.t_out));
                    t = z0 + s.t_out;
                }
                top.push(t);
                offsets.push(spans.len() as u32);
            }
        }
        Self {
            bounds,
            nx,
            ny,
            nz,
            offsets,
            spans,
            top,
        }
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn cell_size(&self) -> V3 {
        let e = self.bounds.extents();
        V3::new(
            e.x / self.nx as f64,
            e.y / self.ny as f64,
            e.z / self.nz as f64,
        )
    }

    pub fn column_center(&self, i: usize, j: usize) -> (f64, f64) {
        let c = self.cell_size();
        (
            self.bounds.min.x + (i as f64 + 0.5) * c.x,
            self.bounds.min.y + (j as f64 + 0.5) * c.y,
        )
    }

    pub fn column(&self, i: usize, j: usize) -> &[(f64, f64)] {
        let k = j * self.nx + i;
        &self.spans[self.offsets[k] as usize..self.offsets[k + 1] as usize]
    }

    /// Highest occupied z in the column, `-inf` if empty.
    pub fn top(&self, i: usize, j: usize) -> f64 {
        self.top[j * self.nx + i]
    }

    fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = self.cell_size();
        let fi = ((x - self.bounds.min.x) / c.x).floor();
        let fj = ((y - self.bounds.min.y) / c.y).floor();
        if fi < 0.0 || fj < 0.0 || fi >= self.nx as f64 || fj >= self.ny as f64 {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    pub fn occupied(&self, p: &P3) -> bool {
        match self.cell_of(p.x, p.y) {
            Some((i, j)) => self.column(i, j).iter().any(|&(a, b)| p.z >= a && p.z <= b),
            None => false,
        }
    }

    /// Whether the z-interval `[lo, hi]` of a column contains a voxel-center of the z lattice
    /// inside some occupied span.
    pub fn column_hits_lattice(&self, i: usize, j: usize, lo: f64, hi: f64) -> bool {
        let dz = self.cell_size().z;
        let z0 = self.bounds.min.z;
        self.column(i, j).iter().any(|&(a, b)| {
            let (a, b) = (a.max(lo), b.min(hi));
            if a > b {
                return false;
            }
            let k = ((a - z0) / dz - 0.5).ceil();
            let zc = z0 + (k + 0.5) * dz;
            zc <= b
        })
    }

    /// Occupied volume and its centroid (uniform density), integrating exact spans per column.
    pub fn volume_centroid(&self) -> (f64, P3) {
        let c = self.cell_size();
        let area = c.x * c.y;
        let (mut vol, mut mx, mut my, mut mz) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..self.ny {
            for i in 0..self.nx {
                let (x, y) = self.column_center(i, j);
                for &(a, b) in self.column(i, j) {
                    let len = b - a;
                    vol += len;
                    mx += len * x;
                    my += len * y;
                    mz += 0.5 * (b * b - a * a);
                }
            }
        }
        if vol <= 0.0 {
            return (0.0, self.bounds.center());
        }
        (vol * area, P3::new(mx / vol, my / vol, mz / vol))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cube() -> TriMesh {
        let v = (0..8)
            .map(|k| {
                P3::new(
                    (k & 1) as f64 - 0.5,
                    ((k >> 1) & 1) as f64 - 0.5,
                    ((k >> 2) & 1) as f64 - 0.5,
                )
            })
            .collect::<Vec<_>>();
        convex_hull(&v).unwrap_or_else(|| {
            // Cube corners are coplanar in fours; triangulate explicitly.
            let t = vec![
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
            ];
            TriMesh::new(v, t)
        })
    }

    #[test]
    fn cube_is_closed_with_unit_volume() {
        let m = unit_cube();
        assert!(m.is_closed());
        assert!((m.signed_volume() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn convex_and_general_ray_casts_agree() {
        let m = unit_cube();
        let convex = Solid::convex(m.clone(), 1e-12).unwrap();
        let general = Solid::general(m);
        let origin = P3::new(-3.0, 0.1, 0.2);
        let dir = V3::new(1.0, 0.05, -0.02).normalize();
        let mut a = Vec::new();
        let mut b = Vec::new();
        convex.ray_spans(&origin, &dir, &mut a);
        general.ray_spans(&origin, &dir, &mut b);
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 1);
        assert!((a[0].t_in - b[0].t_in).abs() < 1e-12);
        assert!((a[0].t_out - b[0].t_out).abs() < 1e-12);
        assert!((a[0].n_in - V3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn hull_of_random_points_contains_them() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<P3> = (0..30)
            .map(|_| P3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let hull = convex_hull(&pts).unwrap();
        let solid = Solid::convex(hull, 1e-12).unwrap();
        for p in &pts {
            let inside = solid
                .planes
                .as_ref()
                .unwrap()
                .iter()
                .all(|pl| pl.normal.dot(&p.coords) <= pl.offset + 1e-12);
            assert!(inside);
        }
    }

    #[test]
    fn column_grid_cube_centroid_is_center() {
        let m = unit_cube().map_vertices(|p| P3::new(p.x * 0.05 + 0.3, p.y * 0.05, p.z * 0.05 + 0.025));
        let s = Solid::convex(m, 1e-12).unwrap();
        let b = *s.aabb();
        let g = ColumnGrid::build(&[s], b, 64, 64, 64);
        let (vol, c) = g.volume_centroid();
        assert!((vol - 0.05f64.powi(3)).abs() < 1e-12);
        assert!((c - P3::new(0.3, 0.0, 0.025)).norm() < 1e-9);
    }

    #[test]
    fn components_split_disjoint_meshes() {
        let a = unit_cube();
        let b = a.map_vertices(|p| p + V3::new(3.0, 0.0, 0.0));
        let both = TriMesh::concat([&a, &b]);
        let comps = both.components();
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0], a);
        assert_eq!(comps[1], b);
    }
}
