//! Indexed triangle meshes, OFF I/O and the procedural CAD stand-ins.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::Se3Pose;

pub const DEFAULT_ALBEDO: f32 = 0.8;

/// Triangle mesh in the object frame (meters) with per-face albedo and
/// optional named sub-parts given as triangle index ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    albedo: Vec<f32>,
    parts: BTreeMap<String, Range<usize>>,
}

impl TriMesh {
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[u32; 3]>,
        albedo: Vec<f32>,
        parts: BTreeMap<String, Range<usize>>,
    ) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::InvalidMesh("mesh has no triangles".into()));
        }
        if albedo.len() != triangles.len() {
            return Err(Error::InvalidMesh(format!(
                "{} albedo values for {} triangles",
                albedo.len(),
                triangles.len()
            )));
        }
        if let Some(t) = triangles
            .iter()
            .find(|t| t.iter().any(|&i| i as usize >= vertices.len()))
        {
            return Err(Error::InvalidMesh(format!(
                "triangle {t:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        if !vertices.iter().all(|v| v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex".into()));
        }
        if let Some(a) = albedo.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidMesh(format!("albedo {a} outside [0, 1]")));
        }
        for (name, r) in &parts {
            if r.start >= r.end || r.end > triangles.len() {
                return Err(Error::InvalidMesh(format!("part `{name}` has invalid range {r:?}")));
            }
        }
        let mesh = Self {
            vertices,
            triangles,
            albedo,
            parts,
        };
        if !(mesh.bounding_sphere().1 > 0.0) {
            return Err(Error::InvalidMesh("bounding-sphere radius must be positive".into()));
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn albedo(&self) -> &[f32] {
        &self.albedo
    }

    pub fn parts(&self) -> &BTreeMap<String, Range<usize>> {
        &self.parts
    }

    pub fn has_parts(&self) -> bool {
        !self.parts.is_empty()
    }

    /// Center of the axis-aligned bounding box and the largest vertex distance from it.
    pub fn bounding_sphere(&self) -> (Vector3<f64>, f64) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        let c = (lo + hi) * 0.5;
        let r = self
            .vertices
            .iter()
            .map(|v| (v - c).norm())
            .fold(0.0, f64::max);
        (c, r)
    }

    /// Vertex indices used by the triangles of a part.
    pub fn part_vertices(&self, name: &str) -> Option<Vec<usize>> {
        let range = self.parts.get(name)?;
        let mut idx: Vec<usize> = self.triangles[range.clone()]
            .iter()
            .flat_map(|t| t.iter().map(|&i| i as usize))
            .collect();
        idx.sort_unstable();
        idx.dedup();
        Some(idx)
    }

    /// Mesh containing only the triangles of one part.
    pub fn part_mesh(&self, name: &str) -> Option<TriMesh> {
        let range = self.parts.get(name)?.clone();
        Some(TriMesh {
            vertices: self.vertices.clone(),
            triangles: self.triangles[range.clone()].to_vec(),
            albedo: self.albedo[range].to_vec(),
            parts: BTreeMap::new(),
        })
    }

    /// Copy with every vertex of `part` displaced by `offset`.
    ///
    /// Parts are expected to own their vertices; vertices shared with other
    /// parts move as well.
    pub fn with_part_translated(&self, part: &str, offset: &Vector3<f64>) -> Result<TriMesh> {
        let idx = self.part_vertices(part).ok_or(Error::PartRequired)?;
        let mut out = self.clone();
        for i in idx {
            out.vertices[i] += offset;
        }
        Ok(out)
    }

    pub fn transformed(&self, pose: &Se3Pose) -> TriMesh {
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v = pose.transform_point(v);
        }
        out
    }

    /// ASCII OFF; each face line carries its albedo as a trailing value.
    pub fn to_off(&self) -> String {
        let mut s = String::new();
        writeln!(s, "OFF").unwrap();
        writeln!(s, "{} {} 0", self.vertices.len(), self.triangles.len()).unwrap();
        for v in &self.vertices {
            writeln!(s, "{} {} {}", v.x, v.y, v.z).unwrap();
        }
        for (t, a) in self.triangles.iter().zip(&self.albedo) {
            writeln!(s, "3 {} {} {} {}", t[0], t[1], t[2], a).unwrap();
        }
        s
    }

    /// Parses ASCII OFF. Polygons with more than three vertices are fanned.
    /// An optional single trailing value on a face line is read as albedo.
    pub fn from_off(text: &str) -> Result<TriMesh> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());

        let err = |line: usize, reason: &str| Error::MeshParse {
            line,
            reason: reason.to_string(),
        };

        let (mut ln, mut first) = lines.next().ok_or_else(|| err(0, "empty file"))?;
        if first.starts_with("OFF") {
            let rest = first[3..].trim();
            if rest.is_empty() {
                (ln, first) = lines.next().ok_or_else(|| err(ln, "missing counts"))?;
            } else {
                first = rest;
            }
        }
        let counts: Vec<usize> = first
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(ln, "bad count")))
            .collect::<Result<_>>()?;
        if counts.len() < 2 {
            return Err(err(ln, "expected vertex and face counts"));
        }
        let (nv, nf) = (counts[0], counts[1]);

        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, l) = lines.next().ok_or_else(|| err(ln, "missing vertex line"))?;
            let c: Vec<f64> = l
                .split_whitespace()
                .take(3)
                .map(|t| t.parse().map_err(|_| err(ln, "bad vertex coordinate")))
                .collect::<Result<_>>()?;
            if c.len() != 3 {
                return Err(err(ln, "vertex needs three coordinates"));
            }
            vertices.push(Vector3::new(c[0], c[1], c[2]));
        }

        let mut triangles = Vec::new();
        let mut albedo = Vec::new();
        for _ in 0..nf {
            let (ln, l) = lines.next().ok_or_else(|| err(ln, "missing face line"))?;
            let tok: Vec<&str> = l.split_whitespace().collect();
            let n: usize = tok
                .first()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err(ln, "bad face arity"))?;
            if n < 3 || tok.len() < 1 + n {
                return Err(err(ln, "face needs at least three indices"));
            }
            let idx: Vec<u32> = tok[1..=n]
                .iter()
                .map(|t| t.parse().map_err(|_| err(ln, "bad face index")))
                .collect::<Result<_>>()?;
            let a = match tok.len() - 1 - n {
                0 => DEFAULT_ALBEDO,
                1 => tok[1 + n]
                    .parse()
                    .map_err(|_| err(ln, "bad albedo value"))?,
                _ => DEFAULT_ALBEDO, // rgb(a) colors are ignored
            };
            for k in 1..n - 1 {
                triangles.push([idx[0], idx[k], idx[k + 1]]);
                albedo.push(a);
            }
        }
        TriMesh::new(vertices, triangles, albedo, BTreeMap::new())
    }

    /// Sidecar part map: one `name start end` line per part (end exclusive).
    pub fn parts_to_text(&self) -> String {
        self.parts
            .iter()
            .map(|(n, r)| format!("{n} {} {}\n", r.start, r.end))
            .collect()
    }

    pub fn with_parts_from_text(mut self, text: &str) -> Result<TriMesh> {
        let mut parts = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            let parse = |t: &str| {
                t.parse::<usize>().map_err(|_| Error::MeshParse {
                    line: i + 1,
                    reason: "bad part range".into(),
                })
            };
            if tok.len() != 3 {
                return Err(Error::MeshParse {
                    line: i + 1,
                    reason: "expected `name start end`".into(),
                });
            }
            parts.insert(tok[0].to_string(), parse(tok[1])?..parse(tok[2])?);
        }
        self.parts = parts;
        TriMesh::new(self.vertices, self.triangles, self.albedo, self.parts)
    }

    /// Loads an OFF file and, when present, the `<path>.parts` sidecar.
    pub fn load(path: &Path) -> Result<TriMesh> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mesh = TriMesh::from_off(&text)?;
        let sidecar = path.with_extension("parts");
        if sidecar.exists() {
            let parts = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            return mesh.with_parts_from_text(&parts);
        }
        Ok(mesh)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::image::write_file(path, self.to_off().as_bytes())?;
        if self.has_parts() {
            crate::image::write_file(&path.with_extension("parts"), self.parts_to_text().as_bytes())?;
        }
        Ok(())
    }
}

/// Incremental builder that tracks part ranges.
#[derive(Debug, Default)]
pub struct MeshBuilder {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    albedo: Vec<f32>,
    parts: BTreeMap<String, Range<usize>>,
}

impl MeshBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_vertex(&mut self, v: Vector3<f64>) -> u32 {
        self.vertices.push(v);
        (self.vertices.len() - 1) as u32
    }

    fn push_tri(&mut self, t: [u32; 3], a: f32) {
        self.triangles.push(t);
        self.albedo.push(a);
    }

    /// Axis-aligned box, optionally transformed; faces get slightly
    /// different albedo so edges stay visible under flat lighting.
    pub fn add_box(&mut self, center: Vector3<f64>, half: Vector3<f64>, pose: &Se3Pose, albedo: f32) -> &mut Self {
        let base = self.vertices.len() as u32;
        for i in 0..8 {
            let s = Vector3::new(
                if i & 1 == 0 { -1.0 } else { 1.0 },
                if i & 2 == 0 { -1.0 } else { 1.0 },
                if i & 4 == 0 { -1.0 } else { 1.0 },
            );
            self.push_vertex(pose.transform_point(&(center + half.component_mul(&s))));
        }
        // quads as (a, b, c, d) in vertex bit order
        const QUADS: [[u32; 4]; 6] = [
            [0, 2, 3, 1], // -z
            [4, 5, 7, 6], // +z
            [0, 1, 5, 4], // -y
            [2, 6, 7, 3], // +y
            [0, 4, 6, 2], // -x
            [1, 3, 7, 5], // +x
        ];
        for (f, q) in QUADS.iter().enumerate() {
            let a = (albedo * (1.0 - 0.04 * f as f32)).clamp(0.0, 1.0);
            self.push_tri([base + q[0], base + q[1], base + q[2]], a);
            self.push_tri([base + q[0], base + q[2], base + q[3]], a);
        }
        self
    }

    /// Closed cylinder along the local z axis from `z0` to `z1`.
    pub fn add_cylinder(
        &mut self,
        center: Vector3<f64>,
        radius: f64,
        z0: f64,
        z1: f64,
        segments: usize,
        pose: &Se3Pose,
        albedo: f32,
    ) -> &mut Self {
        let base = self.vertices.len() as u32;
        let n = segments as u32;
        for k in 0..segments {
            let a = std::f64::consts::TAU * k as f64 / segments as f64;
            let (s, c) = a.sin_cos();
            for z in [z0, z1] {
                let v = center + Vector3::new(radius * c, radius * s, z);
                self.push_vertex(pose.transform_point(&v));
            }
        }
        let bottom = self.push_vertex(pose.transform_point(&(center + Vector3::new(0.0, 0.0, z0))));
        let top = self.push_vertex(pose.transform_point(&(center + Vector3::new(0.0, 0.0, z1))));
        for k in 0..n {
            let j = (k + 1) % n;
            let (b0, t0, b1, t1) = (base + 2 * k, base + 2 * k + 1, base + 2 * j, base + 2 * j + 1);
            let side = albedo * (0.92 + 0.08 * ((k % 2) as f32));
            self.push_tri([b0, b1, t1], side);
            self.push_tri([b0, t1, t0], side);
            self.push_tri([bottom, b1, b0], albedo * 0.9);
            self.push_tri([top, t0, t1], albedo);
        }
        self
    }

    /// Subsequent primitives (until the next call) belong to `name`.
    pub fn part<F: FnOnce(&mut Self)>(&mut self, name: &str, f: F) -> &mut Self {
        let start = self.triangles.len();
        f(self);
        let end = self.triangles.len();
        self.parts.insert(name.to_string(), start..end);
        self
    }

    pub fn build(self) -> Result<TriMesh> {
        TriMesh::new(self.vertices, self.triangles, self.albedo, self.parts)
    }
}

/// Geodesic sphere from a subdivided icosahedron.
pub fn icosphere(radius: f64, subdivisions: usize, albedo: f32) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache = std::collections::HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vector3<f64>>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let n = faces.len();
    TriMesh::new(
        verts.into_iter().map(|v| v * radius).collect(),
        faces,
        vec![albedo; n],
        BTreeMap::new(),
    )
    .expect("icosphere is well formed")
}

/// Unit cube centered at the origin (side 1).
pub fn unit_cube(albedo: f32) -> TriMesh {
    let mut b = MeshBuilder::new();
    b.add_box(Vector3::zeros(), Vector3::repeat(0.5), &Se3Pose::identity(), albedo);
    b.build().expect("cube is well formed")
}

/// Base-category object: a flanged bearing seat. A rectangular foot plate
/// with an off-center bearing housing, a stiffening rib and a mounting lug,
/// deliberately asymmetric so silhouettes pin down all six pose DoF.
pub fn flanged_block() -> TriMesh {
    let id = Se3Pose::identity();
    let mut b = MeshBuilder::new();
    b.part("plate", |b| {
        b.add_box(Vector3::new(0.0, 0.0, 0.01), Vector3::new(0.08, 0.05, 0.01), &id, 0.75);
    });
    b.part("housing", |b| {
        b.add_cylinder(Vector3::new(-0.025, 0.005, 0.0), 0.032, 0.02, 0.07, 24, &id, 0.85);
    });
    b.part("bore", |b| {
        b.add_cylinder(Vector3::new(-0.025, 0.005, 0.0), 0.016, 0.07, 0.074, 16, &id, 0.35);
    });
    b.part("rib", |b| {
        b.add_box(Vector3::new(0.03, 0.005, 0.035), Vector3::new(0.028, 0.006, 0.015), &id, 0.65);
    });
    b.part("lug", |b| {
        b.add_box(Vector3::new(0.065, -0.032, 0.028), Vector3::new(0.012, 0.012, 0.008), &id, 0.9);
    });
    b.build().expect("flanged block is well formed")
}

/// Novel-category object: a robot wrist joint bracket with a rotary housing,
/// an angled arm, a flange cap and a bolt head. `cap` and `bolt` are the
/// movable sub-parts used for logical (layout) defects.
pub fn joint_bracket() -> TriMesh {
    let id = Se3Pose::identity();
    let tilt = Se3Pose::from_axis_angle(Vector3::new(0.0, 0.35, 0.0), Vector3::zeros());
    let mut b = MeshBuilder::new();
    b.part("base", |b| {
        b.add_box(Vector3::new(0.0, 0.0, 0.012), Vector3::new(0.07, 0.06, 0.012), &id, 0.7);
    });
    b.part("housing", |b| {
        b.add_cylinder(Vector3::new(0.02, 0.015, 0.0), 0.036, 0.024, 0.075, 28, &id, 0.8);
    });
    b.part("arm", |b| {
        b.add_box(Vector3::new(-0.035, -0.02, 0.045), Vector3::new(0.03, 0.014, 0.02), &tilt, 0.6);
    });
    b.part("cap", |b| {
        b.add_cylinder(Vector3::new(0.02, 0.015, 0.0), 0.02, 0.075, 0.087, 20, &id, 0.95);
    });
    b.part("bolt", |b| {
        b.add_box(Vector3::new(-0.045, 0.035, 0.03), Vector3::new(0.009, 0.009, 0.006), &id, 0.45);
    });
    b.build().expect("joint bracket is well formed")
}

/// Built-in meshes by name.
pub fn builtin(name: &str) -> Option<TriMesh> {
    match name {
        "flanged_block" => Some(flanged_block()),
        "joint_bracket" => Some(joint_bracket()),
        "unit_cube" => Some(unit_cube(DEFAULT_ALBEDO)),
        "sphere" => Some(icosphere(0.05, 3, DEFAULT_ALBEDO)),
        _ => None,
    }
}
