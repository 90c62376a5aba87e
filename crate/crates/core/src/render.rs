//! Z-buffer rasterization of triangle meshes into depth and semantic images.
//!
//! Each pixel is sampled at its center. Depth is the camera-frame `z` of the
//! intersection between the pixel ray `r` and the plane of the winning face, which is
//! the same as perspective-correct interpolation of inverse depth. With
//! `N = r · ((v1−v0) × (v2−v0))` the hit depth is `det(v0, v1, v2) / N` and the
//! perspective-correct barycentric weight of corner `k` is `r · (v_{k+1} × v_{k+2}) / N`.
//! Both are rational in the vertex positions, which gives closed-form derivatives
//! under a frozen pixel-to-face assignment.
//!
//! Coverage is inclusive (pixel centers on an edge count as inside); overlapping
//! candidates are resolved by smaller depth, then lower face index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::geom::{self, orient2d, Vec2, Vec3};
use crate::mesh::TriMesh;
use crate::raster::{DepthRaster, Raster, SemanticRaster};
use crate::scalar::Real;

pub const NO_FACE: usize = usize::MAX;

/// Per-pixel winning face and depth.
#[derive(Debug, Clone)]
pub struct FaceBuffer<T> {
    pub width: usize,
    pub height: usize,
    pub face: Vec<usize>,
    pub depth: Vec<T>,
}

impl<T: Real> FaceBuffer<T> {
    pub fn covered(&self, idx: usize) -> bool {
        self.face[idx] != NO_FACE
    }

    pub fn covered_count(&self) -> usize {
        self.face.iter().filter(|&&f| f != NO_FACE).count()
    }

    pub fn depth_raster(&self) -> DepthRaster<T> {
        Raster::from_vec(self.width, self.height, 1, self.depth.clone()).expect("buffer size")
    }
}

/// Geometry of one pixel ray against one face, in camera coordinates.
#[derive(Debug, Clone, Copy)]
pub struct RayHit<T> {
    pub ray: Vec3<T>,
    pub corners: [Vec3<T>; 3],
    /// `r · n`
    pub denom: T,
    /// Hit depth.
    pub depth: T,
    /// Perspective-correct barycentric weights.
    pub weights: [T; 3],
}

impl<T: Real> RayHit<T> {
    pub fn new(ray: Vec3<T>, corners: [Vec3<T>; 3]) -> Self {
        let [v0, v1, v2] = corners;
        let a = [geom::triple(ray, v1, v2), geom::triple(ray, v2, v0), geom::triple(ray, v0, v1)];
        let denom = a[0] + a[1] + a[2];
        let det = geom::triple(v0, v1, v2);
        Self { ray, corners, denom, depth: det / denom, weights: [a[0] / denom, a[1] / denom, a[2] / denom] }
    }

    /// `∂N/∂v_k`
    fn d_denom(&self, k: usize) -> Vec3<T> {
        let v = self.corners;
        let (next, prev) = (v[(k + 1) % 3], v[(k + 2) % 3]);
        geom::cross(self.ray, geom::sub(prev, next))
    }

    /// `∂depth/∂v_k` in camera coordinates.
    pub fn d_depth(&self) -> [Vec3<T>; 3] {
        let v = self.corners;
        let mut out = [[T::zero(); 3]; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let d_det = geom::cross(v[(k + 1) % 3], v[(k + 2) % 3]);
            let d_n = self.d_denom(k);
            *o = geom::scale(geom::sub(d_det, geom::scale(d_n, self.depth)), T::one() / self.denom);
        }
        out
    }

    /// `∂weight_k/∂v_j`, indexed `[k][j]`.
    pub fn d_weights(&self) -> [[Vec3<T>; 3]; 3] {
        let v = self.corners;
        let r = self.ray;
        let inv = T::one() / self.denom;
        let d_n = [self.d_denom(0), self.d_denom(1), self.d_denom(2)];
        let mut out = [[[T::zero(); 3]; 3]; 3];
        for k in 0..3 {
            let (p, q) = ((k + 1) % 3, (k + 2) % 3);
            // A_k = r · (v_p × v_q)
            let mut d_a = [[T::zero(); 3]; 3];
            d_a[p] = geom::cross(v[q], r);
            d_a[q] = geom::cross(r, v[p]);
            for j in 0..3 {
                out[k][j] = geom::scale(geom::sub(d_a[j], geom::scale(d_n[j], self.weights[k])), inv);
            }
        }
        out
    }
}

/// Projected face in pixel space plus camera-frame corners.
struct ProjectedFace<T> {
    idx: [usize; 3],
    px: [Vec2<T>; 3],
    sign: T,
    /// Edge-function slack of each edge: a pixel-space distance of a few ulps of the
    /// coordinates, so points on an edge stay covered after projection rounding.
    slack: [T; 3],
    tol: T,
}

impl<T: Real> ProjectedFace<T> {
    /// Edge function of edge `(a, b)` evaluated with a canonical endpoint order so that
    /// the two faces sharing an edge compute bitwise-opposite values.
    #[inline]
    fn edge(&self, a: usize, b: usize, q: Vec2<T>) -> T {
        if self.idx[a] < self.idx[b] {
            orient2d(self.px[a], self.px[b], q)
        } else {
            -orient2d(self.px[b], self.px[a], q)
        }
    }

    /// Signed edge values, all `>= 0` inside for either winding.
    #[inline]
    fn edges(&self, q: Vec2<T>) -> [T; 3] {
        [self.edge(1, 2, q) * self.sign, self.edge(2, 0, q) * self.sign, self.edge(0, 1, q) * self.sign]
    }

    /// Inclusive coverage: every edge value is at least minus its slack.
    #[inline]
    fn covers(&self, q: Vec2<T>) -> bool {
        let e = self.edges(q);
        (0..3).all(|k| e[k] >= -self.slack[k])
    }

    fn pixel_range(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let half = T::lit(0.5);
        let tol = self.tol;
        let (mut x0, mut x1, mut y0, mut y1) = (T::infinity(), T::neg_infinity(), T::infinity(), T::neg_infinity());
        for p in &self.px {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let lo_x = (x0 - half - tol).ceil().max(T::zero());
        let lo_y = (y0 - half - tol).ceil().max(T::zero());
        let hi_x = (x1 - half + tol).floor().min(T::from_usize_lossy(width) - T::one());
        let hi_y = (y1 - half + tol).floor().min(T::from_usize_lossy(height) - T::one());
        if !(lo_x <= hi_x && lo_y <= hi_y) {
            return None;
        }
        Some((lo_x.to_usize()?, hi_x.to_usize()?, lo_y.to_usize()?, hi_y.to_usize()?))
    }
}

fn camera_vertices<T: Real>(mesh: &TriMesh<T>, camera: &CameraModel<T>) -> Vec<Vec3<T>> {
    mesh.vertices.iter().map(|&v| camera.world_to_camera(v)).collect()
}

fn project_faces<T: Real>(
    mesh: &TriMesh<T>,
    cam_vertices: &[Vec3<T>],
    camera: &CameraModel<T>,
) -> Result<Vec<Option<ProjectedFace<T>>>> {
    mesh.faces()
        .iter()
        .enumerate()
        .map(|(fi, &idx)| {
            let zs = idx.map(|v| cam_vertices[v][2]);
            let in_front = zs.iter().filter(|&&z| z > T::zero()).count();
            if in_front == 0 {
                return Ok(None);
            }
            if in_front < 3 {
                return Err(Error::BehindCamera { face: fi });
            }
            let px = idx.map(|v| camera.project(cam_vertices[v]));
            let area = orient2d(px[0], px[1], px[2]);
            if area == T::zero() || !area.is_finite() {
                return Ok(None);
            }
            let magnitude = px.iter().flatten().fold(T::one(), |m, &c| m.max(c.abs()));
            let tol = T::lit(64.0) * T::epsilon() * magnitude;
            let length = |a: usize, b: usize| (px[a][0] - px[b][0]).hypot(px[a][1] - px[b][1]);
            Ok(Some(ProjectedFace {
                idx,
                px,
                sign: area.signum(),
                slack: [tol * length(1, 2), tol * length(2, 0), tol * length(0, 1)],
                tol,
            }))
        })
        .collect()
}

/// Winning face and depth for every pixel.
pub fn rasterize<T: Real>(mesh: &TriMesh<T>, camera: &CameraModel<T>) -> Result<FaceBuffer<T>> {
    let (w, h) = (camera.width, camera.height);
    let cam_v = camera_vertices(mesh, camera);
    let projected = project_faces(mesh, &cam_v, camera)?;
    let mut buf = FaceBuffer { width: w, height: h, face: vec![NO_FACE; w * h], depth: vec![T::zero(); w * h] };
    for (fi, pf) in projected.iter().enumerate() {
        let Some(pf) = pf else { continue };
        let Some((x0, x1, y0, y1)) = pf.pixel_range(w, h) else { continue };
        let corners = pf.idx.map(|v| cam_v[v]);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let q = CameraModel::<T>::pixel_center(x, y);
                if !pf.covers(q) {
                    continue;
                }
                let hit = RayHit::new(camera.pixel_ray(q), corners);
                let z = hit.depth;
                if !(z > T::zero()) || !z.is_finite() {
                    continue;
                }
                let i = y * w + x;
                if buf.face[i] == NO_FACE || z < buf.depth[i] {
                    buf.face[i] = fi;
                    buf.depth[i] = z;
                }
            }
        }
    }
    Ok(buf)
}

pub fn render_depth<T: Real>(mesh: &TriMesh<T>, camera: &CameraModel<T>) -> Result<DepthRaster<T>> {
    Ok(rasterize(mesh, camera)?.depth_raster())
}

/// Ray hit of pixel `idx` against its winning face, in camera coordinates.
pub fn pixel_hit<T: Real>(
    mesh: &TriMesh<T>,
    camera: &CameraModel<T>,
    buf: &FaceBuffer<T>,
    idx: usize,
) -> Option<RayHit<T>> {
    let f = buf.face[idx];
    if f == NO_FACE {
        return None;
    }
    let (x, y) = (idx % buf.width, idx / buf.width);
    let corners = mesh.faces()[f].map(|v| camera.world_to_camera(mesh.vertices[v]));
    Some(RayHit::new(camera.pixel_ray(CameraModel::<T>::pixel_center(x, y)), corners))
}

/// Rendered class scores: perspective-correct interpolation of the winning face's
/// vertex scores. Uncovered pixels are all-zero.
pub fn render_semantics<T: Real>(mesh: &TriMesh<T>, camera: &CameraModel<T>) -> Result<SemanticRaster<T>> {
    let buf = rasterize(mesh, camera)?;
    Ok(semantics_from_buffer(mesh, camera, &buf))
}

pub fn semantics_from_buffer<T: Real>(
    mesh: &TriMesh<T>,
    camera: &CameraModel<T>,
    buf: &FaceBuffer<T>,
) -> SemanticRaster<T> {
    let s = mesh.classes();
    let mut out = Raster::zeros(buf.width, buf.height, s);
    for idx in 0..buf.face.len() {
        let Some(hit) = pixel_hit(mesh, camera, buf, idx) else { continue };
        let face = mesh.faces()[buf.face[idx]];
        let (x, y) = (idx % buf.width, idx / buf.width);
        let px = out.pixel_mut(x, y);
        for (k, &v) in face.iter().enumerate() {
            for (c, p) in px.iter_mut().enumerate() {
                *p += hit.weights[k] * mesh.semantics[(v, c)];
            }
        }
    }
    out
}

/// `∂(pixel depth)/∂(vertex xyz)` for one covered pixel, in the mesh's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelJacobian<T> {
    pub pixel: usize,
    pub face: usize,
    pub vertices: [usize; 3],
    pub d_depth: [Vec3<T>; 3],
}

/// Depth derivatives of every covered pixel under frozen visibility.
#[derive(Debug, Clone, Default)]
pub struct RenderJacobian<T> {
    pub entries: Vec<PixelJacobian<T>>,
}

impl<T: Real> RenderJacobian<T> {
    /// Predicted per-pixel depth change for a vertex displacement field.
    pub fn directional(&self, pixel_count: usize, delta: &[Vec3<T>]) -> Vec<T> {
        let mut out = vec![T::zero(); pixel_count];
        for e in &self.entries {
            out[e.pixel] = (0..3).map(|k| geom::dot(e.d_depth[k], delta[e.vertices[k]])).sum();
        }
        out
    }
}

pub fn render_depth_with_jacobian<T: Real>(
    mesh: &TriMesh<T>,
    camera: &CameraModel<T>,
) -> Result<(DepthRaster<T>, RenderJacobian<T>)> {
    let buf = rasterize(mesh, camera)?;
    let jac = jacobian_from_buffer(mesh, camera, &buf);
    Ok((buf.depth_raster(), jac))
}

pub fn jacobian_from_buffer<T: Real>(
    mesh: &TriMesh<T>,
    camera: &CameraModel<T>,
    buf: &FaceBuffer<T>,
) -> RenderJacobian<T> {
    let mut entries = Vec::with_capacity(buf.covered_count());
    for idx in 0..buf.face.len() {
        let Some(hit) = pixel_hit(mesh, camera, buf, idx) else { continue };
        let d = hit.d_depth();
        entries.push(PixelJacobian {
            pixel: idx,
            face: buf.face[idx],
            vertices: mesh.faces()[buf.face[idx]],
            // camera-frame gradient pulled back through x_cam = R x + t
            d_depth: d.map(|g| geom::mat_t_vec(&camera.rotation, g)),
        });
    }
    RenderJacobian { entries }
}

/// Pseudo ground-truth mesh: back-projected pixel samples every `stride` pixels,
/// triangulated as an image-plane grid. Cells with an invalid corner are dropped.
pub fn depth_to_pseudo_mesh<T: Real>(
    depth: &DepthRaster<T>,
    camera: &CameraModel<T>,
    stride: usize,
    classes: usize,
) -> Result<TriMesh<T>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let xs: Vec<usize> = (0..depth.width()).step_by(stride).collect();
    let ys: Vec<usize> = (0..depth.height()).step_by(stride).collect();
    let mut index = vec![usize::MAX; xs.len() * ys.len()];
    let mut vertices = Vec::new();
    for (r, &y) in ys.iter().enumerate() {
        for (c, &x) in xs.iter().enumerate() {
            let i = y * depth.width() + x;
            if depth.is_valid_depth(i) {
                index[r * xs.len() + c] = vertices.len();
                vertices.push(backproject_pixel(camera, x, y, depth.at(i)));
            }
        }
    }
    if vertices.is_empty() {
        return Err(Error::EmptyInput("no valid depth sample".into()));
    }
    let mut faces = Vec::new();
    for r in 0..ys.len().saturating_sub(1) {
        for c in 0..xs.len().saturating_sub(1) {
            let v00 = index[r * xs.len() + c];
            let v01 = index[r * xs.len() + c + 1];
            let v10 = index[(r + 1) * xs.len() + c];
            let v11 = index[(r + 1) * xs.len() + c + 1];
            if v00 != usize::MAX && v01 != usize::MAX && v11 != usize::MAX {
                faces.push([v00, v01, v11]);
            }
            if v00 != usize::MAX && v11 != usize::MAX && v10 != usize::MAX {
                faces.push([v00, v11, v10]);
            }
        }
    }
    if faces.is_empty() {
        return Err(Error::EmptyInput("valid samples do not form any face".into()));
    }
    // vertices not used by any face are dropped
    let mesh = TriMesh::new(vertices, faces, classes)?;
    let all: Vec<usize> = (0..mesh.face_count()).collect();
    Ok(mesh.submesh(&all).0)
}

/// 3D point (mesh frame) seen at the center of pixel `(x, y)` with depth `d`.
pub fn backproject_pixel<T: Real>(camera: &CameraModel<T>, x: usize, y: usize, d: T) -> Vec3<T> {
    let ray = camera.pixel_ray(CameraModel::<T>::pixel_center(x, y));
    camera.camera_to_world(geom::scale(ray, d))
}

/// Back-projects `count` pixels drawn uniformly (with replacement) from the valid set.
pub fn backproject<T: Real>(
    depth: &DepthRaster<T>,
    camera: &CameraModel<T>,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec3<T>>> {
    let valid: Vec<usize> = (0..depth.pixel_count()).filter(|&i| depth.is_valid_depth(i)).collect();
    if valid.is_empty() {
        return Err(Error::EmptyInput("depth raster has no valid pixel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let i = valid[rng.random_range(0..valid.len())];
            backproject_pixel(camera, i % depth.width(), i / depth.width(), depth.at(i))
        })
        .collect())
}

/// Depths of every face whose projection strictly contains each pixel center.
pub fn strict_layers<T: Real>(mesh: &TriMesh<T>, camera: &CameraModel<T>) -> Result<Vec<Vec<(usize, T)>>> {
    let (w, h) = (camera.width, camera.height);
    let cam_v = camera_vertices(mesh, camera);
    let projected = project_faces(mesh, &cam_v, camera)?;
    let mut layers = vec![Vec::new(); w * h];
    for (fi, pf) in projected.iter().enumerate() {
        let Some(pf) = pf else { continue };
        let Some((x0, x1, y0, y1)) = pf.pixel_range(w, h) else { continue };
        let corners = pf.idx.map(|v| cam_v[v]);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let q = CameraModel::<T>::pixel_center(x, y);
                if pf.edges(q).iter().any(|&v| v <= T::zero()) {
                    continue;
                }
                let z = RayHit::new(camera.pixel_ray(q), corners).depth;
                if z > T::zero() && z.is_finite() {
                    layers[y * w + x].push((fi, z));
                }
            }
        }
    }
    Ok(layers)
}

/// Number of pixels where two distinct faces cover the pixel at depths within `band`.
pub fn double_layer_pixels<T: Real>(mesh: &TriMesh<T>, camera: &CameraModel<T>, band: T) -> Result<usize> {
    let layers = strict_layers(mesh, camera)?;
    Ok(layers
        .iter()
        .filter(|l| l.iter().enumerate().any(|(i, a)| l[i + 1..].iter().any(|b| (a.1 - b.1).abs() <= band)))
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::make_grid_mesh;

    fn cam() -> CameraModel<f64> {
        CameraModel::centered(16, 12, 14.0)
    }

    fn scaled(m: &TriMesh<f64>, d: f64) -> TriMesh<f64> {
        m.with_vertices(m.vertices.iter().map(|v| geom::scale(*v, d)).collect())
    }

    #[test]
    fn flat_mesh_renders_constant_depth_everywhere() {
        let c = cam();
        let m = scaled(&make_grid_mesh(5, &c).unwrap(), 3.5);
        let d = render_depth(&m, &c).unwrap();
        for i in 0..d.pixel_count() {
            assert!((d.at(i) - 3.5).abs() < 1e-12, "pixel {i}: {}", d.at(i));
        }
    }

    #[test]
    fn nearest_face_wins() {
        let c = cam();
        let tri = |z: f64| vec![[-2.0 * z, -2.0 * z, z], [2.0 * z, -2.0 * z, z], [0.0, 2.0 * z, z]];
        let mut v = tri(5.0);
        v.extend(tri(3.0));
        let m = TriMesh::new(v, vec![[0, 1, 2], [3, 4, 5]], 1).unwrap();
        let d = render_depth(&m, &c).unwrap();
        let center = 6 * 16 + 8;
        assert!((d.at(center) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_reported() {
        let c = cam();
        let m = TriMesh::new(vec![[0.0, 0.0, 1.0], [1.0, 0.0, -1.0], [0.0, 1.0, 2.0]], vec![[0, 1, 2]], 1).unwrap();
        assert!(matches!(render_depth(&m, &c), Err(Error::BehindCamera { face: 0 })));
    }

    #[test]
    fn semantics_at_vertex_and_argmax() {
        let c = CameraModel::centered(9, 9, 9.0);
        let mut m = scaled(&make_grid_mesh(3, &c).unwrap(), 2.0);
        // make every vertex score class 2 highest
        m.semantics = crate::linalg::Matrix::from_fn(9, 4, |_, k| if k == 2 { 10.0 } else { 0.0 });
        let s = render_semantics(&m, &c).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                assert_eq!(s.argmax(x, y), 2);
            }
        }
        // center pixel (4,4) sits exactly on the center vertex
        let mut m2 = m.clone();
        m2.semantics = crate::linalg::Matrix::from_fn(9, 4, |v, k| (v * 4 + k) as f64);
        let s = render_semantics(&m2, &c).unwrap();
        for k in 0..4 {
            assert!((s.get(4, 4, k) - (16 + k) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_mesh_counts_and_round_trip() {
        let c = CameraModel::<f64>::centered(4, 4, 4.0);
        let d = Raster::filled(4, 4, 1, 6.0);
        let m = depth_to_pseudo_mesh(&d, &c, 1, 1).unwrap();
        assert_eq!((m.vertex_count(), m.face_count()), (16, 18));
        let r = render_depth(&m, &c).unwrap();
        for i in 0..16 {
            assert!((r.at(i) - 6.0).abs() < 1e-12);
        }
        assert!(matches!(depth_to_pseudo_mesh(&Raster::<f64>::zeros(4, 4, 1), &c, 1, 1), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn backprojection_of_principal_point_and_corner() {
        let c = CameraModel { cx: 2.5, cy: 2.5, ..CameraModel::<f64>::centered(5, 5, 10.0) };
        assert_eq!(backproject_pixel(&c, 2, 2, 7.0), [0.0, 0.0, 7.0]);
        let p = backproject_pixel(&c, 0, 0, 2.0);
        assert!((p[0] - 2.0 * (0.5 - 2.5) / 10.0).abs() < 1e-15);
        assert!((p[1] - 2.0 * (0.5 - 2.5) / 10.0).abs() < 1e-15);
        let d = Raster::filled(5, 5, 1, 4.0);
        let pts = backproject(&d, &c, 100, 3).unwrap();
        assert!(pts.iter().all(|p| p[2] == 4.0));
        assert_eq!(pts, backproject(&d, &c, 100, 3).unwrap());
        assert!(backproject(&Raster::<f64>::zeros(5, 5, 1), &c, 3, 0).is_err());
    }

    #[test]
    fn jacobian_at_vertex_touches_only_that_vertex() {
        let c = CameraModel::centered(9, 9, 9.0);
        let m = scaled(&make_grid_mesh(3, &c).unwrap(), 2.0);
        let (_, jac) = render_depth_with_jacobian(&m, &c).unwrap();
        let e = jac.entries.iter().find(|e| e.pixel == 4 * 9 + 4).unwrap();
        for k in 0..3 {
            let nz = e.d_depth[k].iter().any(|&g| g.abs() > 1e-12);
            assert_eq!(nz, e.vertices[k] == 4);
        }
    }

    #[test]
    fn double_layer_detection() {
        let c = cam();
        let base = make_grid_mesh(3, &c).unwrap();
        let a = scaled(&base, 4.0);
        assert_eq!(double_layer_pixels(&a, &c, 0.5).unwrap(), 0);
        let mut v = a.vertices.clone();
        v.extend(scaled(&base, 4.2).vertices);
        let mut faces = a.faces().to_vec();
        faces.extend(base.faces().iter().map(|f| f.map(|i| i + 9)));
        let stacked = TriMesh::new(v, faces, 1).unwrap();
        assert!(double_layer_pixels(&stacked, &c, 0.5).unwrap() > 0);
        assert_eq!(double_layer_pixels(&stacked, &c, 0.1).unwrap(), 0);
    }
}
