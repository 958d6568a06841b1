//! Software rasterizer for digital-twin images and silhouettes.
//!
//! Triangles are projected with the pinhole model, tested at pixel centers
//! `(x + 0.5, y + 0.5)` with inclusive edge functions and resolved with a
//! perspective-correct z-buffer. Triangles with a vertex at or behind the
//! near plane are dropped. Back faces are not culled and shading is two-sided
//! Lambertian with an ambient floor.

use nalgebra::{Vector2, Vector3};

use crate::geometry::{CameraIntrinsics, Se3Pose};
use crate::image::{ImageF32, Mask};
use crate::mesh::TriMesh;

pub const NEAR_PLANE: f64 = 1e-4;
pub const AMBIENT_FLOOR: f32 = 0.05;

/// Default light: from the camera, slightly above and to the left.
pub fn default_light() -> Vector3<f64> {
    Vector3::new(-0.3, -0.5, -1.0).normalize()
}

/// Shaded image, silhouette and depth of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterOutput {
    pub image: ImageF32,
    pub mask: Mask,
    /// Camera-frame z in meters; `+inf` where nothing was drawn.
    pub depth: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
struct ScreenTri {
    p: [Vector2<f64>; 3],
    inv_z: [f64; 3],
    area: f64,
    face: usize,
}

struct Projection {
    tris: Vec<ScreenTri>,
    cam_vertices: Vec<Vector3<f64>>,
}

fn project(mesh: &TriMesh, t_obj_cam: &Se3Pose, k: &CameraIntrinsics) -> Projection {
    let cam_vertices: Vec<Vector3<f64>> = mesh
        .vertices()
        .iter()
        .map(|v| t_obj_cam.transform_point(v))
        .collect();
    let tris = mesh
        .triangles()
        .iter()
        .enumerate()
        .filter_map(|(face, t)| {
            let v = t.map(|i| cam_vertices[i as usize]);
            if v.iter().any(|p| p.z <= NEAR_PLANE) {
                return None;
            }
            let p = v.map(|c| Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy));
            let area = edge(&p[0], &p[1], &p[2]);
            (area.abs() > 1e-12).then(|| ScreenTri {
                p,
                inv_z: v.map(|c| 1.0 / c.z),
                area,
                face,
            })
        })
        .collect();
    Projection { tris, cam_vertices }
}

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Calls `f(x, y, b0, b1, b2)` for every pixel center covered by `tri`.
#[inline]
fn for_each_covered(tri: &ScreenTri, w: usize, h: usize, mut f: impl FnMut(usize, usize, f64, f64, f64)) {
    let [a, b, c] = &tri.p;
    let min_x = a.x.min(b.x).min(c.x);
    let max_x = a.x.max(b.x).max(c.x);
    let min_y = a.y.min(b.y).min(c.y);
    let max_y = a.y.max(b.y).max(c.y);
    if max_x < 0.0 || max_y < 0.0 || min_x > w as f64 || min_y > h as f64 {
        return;
    }
    let x0 = ((min_x - 0.5).ceil().max(0.0)) as usize;
    let y0 = ((min_y - 0.5).ceil().max(0.0)) as usize;
    let x1 = ((max_x - 0.5).floor().min(w as f64 - 1.0)) as isize;
    let y1 = ((max_y - 0.5).floor().min(h as f64 - 1.0)) as isize;
    if x1 < x0 as isize || y1 < y0 as isize {
        return;
    }
    let s = tri.area.signum();
    let inv_area = 1.0 / tri.area;
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let w0 = edge(b, c, &p);
            let w1 = edge(c, a, &p);
            let w2 = edge(a, b, &p);
            if s * w0 >= 0.0 && s * w1 >= 0.0 && s * w2 >= 0.0 {
                f(x, y, w0 * inv_area, w1 * inv_area, w2 * inv_area);
            }
        }
    }
}

/// Z-buffered render of `mesh` placed at `t_obj_base`, seen from `t_cam_base`.
///
/// `light_dir` points from the surface toward the light in the camera frame
/// and is normalized internally.
pub fn rasterize(
    mesh: &TriMesh,
    t_obj_base: &Se3Pose,
    t_cam_base: &Se3Pose,
    k: &CameraIntrinsics,
    light_dir: &Vector3<f64>,
) -> RasterOutput {
    let t_obj_cam = t_cam_base.inverse().compose(t_obj_base);
    rasterize_cam(mesh, &t_obj_cam, k, light_dir)
}

/// As [`rasterize`] with the object pose given directly in the camera frame.
pub fn rasterize_cam(
    mesh: &TriMesh,
    t_obj_cam: &Se3Pose,
    k: &CameraIntrinsics,
    light_dir: &Vector3<f64>,
) -> RasterOutput {
    let (w, h) = (k.width, k.height);
    let light = light_dir.normalize();
    let proj = project(mesh, t_obj_cam, k);
    let mut depth = vec![f32::INFINITY; w * h];
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut image = ImageF32::new(w, h);
    let mut mask = Mask::new(w, h);
    for tri in &proj.tris {
        let [i0, i1, i2] = mesh.triangles()[tri.face].map(|i| i as usize);
        let (v0, v1, v2) = (
            proj.cam_vertices[i0],
            proj.cam_vertices[i1],
            proj.cam_vertices[i2],
        );
        let n = (v1 - v0).cross(&(v2 - v0));
        let lambert = if n.norm() > 0.0 {
            n.normalize().dot(&light).abs()
        } else {
            0.0
        };
        let shade = (mesh.albedo()[tri.face] * lambert as f32).clamp(AMBIENT_FLOOR, 1.0);
        for_each_covered(tri, w, h, |x, y, b0, b1, b2| {
            let z = 1.0 / (b0 * tri.inv_z[0] + b1 * tri.inv_z[1] + b2 * tri.inv_z[2]);
            let i = y * w + x;
            if z < zbuf[i] {
                zbuf[i] = z;
                depth[i] = z as f32;
                image.data[i] = shade;
                mask.data[i] = true;
            }
        });
    }
    RasterOutput { image, mask, depth }
}

/// Silhouette only; identical to `rasterize(..).mask` on the same inputs.
pub fn render_mask(mesh: &TriMesh, t_obj_base: &Se3Pose, t_cam_base: &Se3Pose, k: &CameraIntrinsics) -> Mask {
    render_mask_cam(mesh, &t_cam_base.inverse().compose(t_obj_base), k)
}

pub fn render_mask_cam(mesh: &TriMesh, t_obj_cam: &Se3Pose, k: &CameraIntrinsics) -> Mask {
    let proj = project(mesh, t_obj_cam, k);
    coverage(&proj.tris, k.width, k.height)
}

fn coverage(tris: &[ScreenTri], w: usize, h: usize) -> Mask {
    let mut mask = Mask::new(w, h);
    for tri in tris {
        for_each_covered(tri, w, h, |x, y, _, _, _| mask.data[y * w + x] = true);
    }
    mask
}

/// Smooth silhouette: `σ(sharpness · d)` where `d` is the signed pixel
/// distance to the silhouette boundary (positive inside).
pub fn soft_mask(
    mesh: &TriMesh,
    t_obj_base: &Se3Pose,
    t_cam_base: &Se3Pose,
    k: &CameraIntrinsics,
    sharpness: f64,
) -> ImageF32 {
    soft_mask_cam(mesh, &t_cam_base.inverse().compose(t_obj_base), k, sharpness)
}

pub fn soft_mask_cam(mesh: &TriMesh, t_obj_cam: &Se3Pose, k: &CameraIntrinsics, sharpness: f64) -> ImageF32 {
    assert!(sharpness > 0.0, "sharpness must be positive");
    let (w, h) = (k.width, k.height);
    let proj = project(mesh, t_obj_cam, k);
    let inside = coverage(&proj.tris, w, h);

    // beyond this distance the sigmoid is within 1e-5 of its limit
    let band = (12.0 / sharpness).clamp(0.75, 256.0);
    let mut dist = vec![band; w * h];
    for (a, b) in silhouette_segments(&proj.tris) {
        let x0 = ((a.x.min(b.x) - band - 0.5).floor().max(0.0)) as usize;
        let y0 = ((a.y.min(b.y) - band - 0.5).floor().max(0.0)) as usize;
        let x1 = (a.x.max(b.x) + band - 0.5).ceil().min(w as f64 - 1.0);
        let y1 = (a.y.max(b.y) + band - 0.5).ceil().min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let d = point_segment_distance(&p, &a, &b);
                let slot = &mut dist[y * w + x];
                if d < *slot {
                    *slot = d;
                }
            }
        }
    }
    let data = dist
        .iter()
        .zip(&inside.data)
        .map(|(&d, &ins)| {
            let signed = if ins { d } else { -d };
            (1.0 / (1.0 + (-sharpness * signed).exp())) as f32
        })
        .collect();
    ImageF32 {
        width: w,
        height: h,
        data,
    }
}

fn point_segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

/// Portions of projected triangle edges that lie on the boundary of the
/// union of all triangles. An edge point is on the boundary when the point
/// just outside its own triangle is not covered by any other triangle.
fn silhouette_segments(tris: &[ScreenTri]) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    const OFFSET: f64 = 1e-7;
    let boxes: Vec<[f64; 4]> = tris
        .iter()
        .map(|t| {
            [
                t.p[0].x.min(t.p[1].x).min(t.p[2].x),
                t.p[0].y.min(t.p[1].y).min(t.p[2].y),
                t.p[0].x.max(t.p[1].x).max(t.p[2].x),
                t.p[0].y.max(t.p[1].y).max(t.p[2].y),
            ]
        })
        .collect();

    let mut out = Vec::new();
    let mut covered: Vec<(f64, f64)> = Vec::new();
    for (ti, tri) in tris.iter().enumerate() {
        let s = tri.area.signum();
        for e in 0..3 {
            let a = tri.p[e];
            let b = tri.p[(e + 1) % 3];
            let dir = b - a;
            let len = dir.norm();
            if len == 0.0 {
                continue;
            }
            // left of a→b is inside when the triangle is counter-clockwise (s > 0)
            let left = Vector2::new(-dir.y, dir.x) / len;
            let off = -left * s * OFFSET;
            let (a2, b2) = (a + off, b + off);
            let seg_box = [
                a2.x.min(b2.x),
                a2.y.min(b2.y),
                a2.x.max(b2.x),
                a2.y.max(b2.y),
            ];
            covered.clear();
            for (ui, other) in tris.iter().enumerate() {
                let bb = &boxes[ui];
                if ui == ti
                    || bb[0] > seg_box[2]
                    || bb[2] < seg_box[0]
                    || bb[1] > seg_box[3]
                    || bb[3] < seg_box[1]
                {
                    continue;
                }
                if let Some(iv) = clip_segment(&a2, &b2, other) {
                    covered.push(iv);
                }
            }
            for (t0, t1) in uncovered(&mut covered) {
                out.push((a + dir * t0, a + dir * t1));
            }
        }
    }
    out
}

/// Parameter interval of `a + t (b - a)`, `t ∈ [0, 1]`, strictly inside `tri`.
fn clip_segment(a: &Vector2<f64>, b: &Vector2<f64>, tri: &ScreenTri) -> Option<(f64, f64)> {
    let s = tri.area.signum();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for e in 0..3 {
        let c = &tri.p[e];
        let d = &tri.p[(e + 1) % 3];
        let f0 = s * edge(c, d, a);
        let f1 = s * edge(c, d, b);
        // f(t) = f0 + t (f1 - f0) > 0
        let df = f1 - f0;
        if df == 0.0 {
            if f0 <= 0.0 {
                return None;
            }
        } else {
            let t = -f0 / df;
            if df > 0.0 {
                lo = lo.max(t);
            } else {
                hi = hi.min(t);
            }
        }
        if hi <= lo {
            return None;
        }
    }
    Some((lo, hi))
}

/// Complement of the union of `intervals` within `[0, 1]`.
fn uncovered(intervals: &mut [(f64, f64)]) -> Vec<(f64, f64)> {
    intervals.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out = Vec::new();
    let mut cursor = 0.0;
    for &(lo, hi) in intervals.iter() {
        if lo > cursor {
            out.push((cursor, lo));
        }
        cursor = f64::max(cursor, hi);
        if cursor >= 1.0 {
            break;
        }
    }
    if cursor < 1.0 {
        out.push((cursor, 1.0));
    }
    out.retain(|(lo, hi)| hi - lo > 1e-12);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{icosphere, unit_cube, MeshBuilder};

    fn k(size: usize, f: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(f, f, size as f64 / 2.0, size as f64 / 2.0, size, size).unwrap()
    }

    fn at(z: f64) -> Se3Pose {
        Se3Pose::from_translation(Vector3::new(0.0, 0.0, z))
    }

    #[test]
    fn cube_silhouette_is_mirror_symmetric() {
        let cam = k(64, 60.0);
        let out = rasterize(&unit_cube(0.8), &at(3.3), &Se3Pose::identity(), &cam, &default_light());
        assert!(out.mask.count() > 0);
        for y in 0..64 {
            for x in 0..32 {
                assert_eq!(out.mask.get(x, y), out.mask.get(63 - x, y), "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn object_behind_camera_renders_nothing() {
        let cam = k(32, 30.0);
        let out = rasterize(&unit_cube(0.8), &at(-3.0), &Se3Pose::identity(), &cam, &default_light());
        assert_eq!(out.mask.count(), 0);
        assert!(out.image.data.iter().all(|&v| v == 0.0));
        assert!(out.depth.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn raster_invariants_hold() {
        let cam = k(48, 40.0);
        let out = rasterize(&unit_cube(0.8), &at(2.5), &Se3Pose::identity(), &cam, &default_light());
        for i in 0..out.mask.data.len() {
            assert_eq!(out.mask.data[i], out.depth[i].is_finite());
            if !out.mask.data[i] {
                assert_eq!(out.image.data[i], 0.0);
            } else {
                assert!((AMBIENT_FLOOR..=1.0).contains(&out.image.data[i]));
            }
        }
        assert_eq!(
            render_mask(&unit_cube(0.8), &at(2.5), &Se3Pose::identity(), &cam),
            out.mask
        );
    }

    #[test]
    fn nearer_triangle_wins() {
        let mut b = MeshBuilder::new();
        let id = Se3Pose::identity();
        b.add_box(Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.5, 0.5, 0.01), &id, 0.3);
        b.add_box(Vector3::new(0.1, 0.0, -0.5), Vector3::new(0.2, 0.2, 0.01), &id, 0.9);
        let mesh = b.build().unwrap();
        let cam = k(64, 50.0);
        let light = Vector3::new(0.0, 0.0, -1.0);
        let out = rasterize(&mesh, &at(3.0), &Se3Pose::identity(), &cam, &light);
        // center pixel sees the small front box (albedo 0.9 on its -z face)
        let c = out.image.get(33, 32);
        assert!((c - 0.9).abs() < 1e-6, "got {c}");
        // corner of the big plate is only covered by the back box
        assert!((out.image.get(26, 26) - 0.3).abs() < 1e-6);
    }

    #[test]
    fn sphere_mask_matches_projected_disk() {
        let cam = k(256, 200.0);
        let (r, dist) = (0.3, 2.0);
        let mask = render_mask(&icosphere(r, 4, 0.5), &at(dist), &Se3Pose::identity(), &cam);
        let alpha = (r / dist as f64).asin();
        let disk = std::f64::consts::PI * (200.0 * alpha.tan()).powi(2);
        let rel = (mask.count() as f64 - disk).abs() / disk;
        assert!(rel < 0.02, "relative area error {rel}");
    }

    #[test]
    fn doubling_distance_quarters_area() {
        let cam = k(256, 200.0);
        let s = icosphere(0.3, 3, 0.5);
        let a1 = render_mask(&s, &at(2.0), &Se3Pose::identity(), &cam).count() as f64;
        let a2 = render_mask(&s, &at(4.0), &Se3Pose::identity(), &cam).count() as f64;
        let ratio = a2 / a1;
        assert!((0.22..=0.28).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rigid_motion_of_scene_leaves_render_unchanged() {
        let cam = k(64, 60.0);
        let mesh = crate::mesh::flanged_block();
        let obj = Se3Pose::from_axis_angle(Vector3::new(0.2, -0.1, 0.4), Vector3::new(0.0, 0.01, 0.0));
        let eye = Vector3::new(0.2, -0.15, 0.18);
        let camp = crate::geometry::look_at(&eye, &Vector3::zeros(), &Vector3::z());
        let g = Se3Pose::from_axis_angle(Vector3::new(0.7, 0.3, -1.2), Vector3::new(1.5, -2.0, 0.3));
        let a = rasterize(&mesh, &obj, &camp, &cam, &default_light());
        let b = rasterize(&mesh, &g.compose(&obj), &g.compose(&camp), &cam, &default_light());
        assert_eq!(a.mask, b.mask);
        let max = a
            .image
            .data
            .iter()
            .zip(&b.image.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 1e-6, "max image diff {max}");
    }

    #[test]
    fn soft_mask_limits_and_midpoint() {
        let cam = k(64, 60.0);
        let mesh = crate::mesh::flanged_block();
        let pose = Se3Pose::from_axis_angle(Vector3::new(1.0, 0.2, 0.1), Vector3::new(0.01, 0.0, 0.35));
        let hard = render_mask_cam(&mesh, &pose, &cam);
        let soft = soft_mask_cam(&mesh, &pose, &cam, 1e6);
        let agree = soft
            .data
            .iter()
            .zip(&hard.data)
            .filter(|(&s, &h)| (s > 0.5) == h)
            .count();
        assert!(agree as f64 >= 0.999 * hard.data.len() as f64);
        assert!(hard.count() > 50);
    }

    #[test]
    fn soft_mask_is_half_on_boundary() {
        // a 10x10 px square whose left edge passes exactly through pixel centers
        let cam = CameraIntrinsics::new(100.0, 100.0, 16.0, 16.0, 32, 32).unwrap();
        let v = vec![
            Vector3::new(-0.055, -0.05, 1.0),
            Vector3::new(0.045, -0.05, 1.0),
            Vector3::new(0.045, 0.05, 1.0),
            Vector3::new(-0.055, 0.05, 1.0),
        ];
        let mesh = TriMesh::new(v, vec![[0, 1, 2], [0, 2, 3]], vec![0.5; 2], Default::default()).unwrap();
        let soft = soft_mask_cam(&mesh, &Se3Pose::identity(), &cam, 5.0);
        // x = -0.055 projects to 10.5, the center of pixel column 10
        let v = soft.get(10, 16);
        assert!((v - 0.5).abs() < 0.01, "boundary value {v}");
        // the interior diagonal shared by both triangles is not a boundary
        assert!(soft.get(15, 15) > 0.999);
        assert!(soft.get(2, 16) < 1e-3);
    }
}
