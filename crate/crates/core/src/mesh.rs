//! Fixed-topology semantic triangle mesh and the operators defined on it.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{CameraModel, Pose};
use crate::error::{Error, Result};
use crate::geom::{self, Vec2, Vec3};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Number of semantic classes used throughout: ground, vegetation, building, road.
pub const DEFAULT_CLASSES: usize = 4;

/// Default number of surface samples per point cloud.
pub const DEFAULT_SAMPLE_COUNT: usize = 10_000;

/// Faces, undirected edges and vertex adjacency. Shared between meshes that only
/// differ in vertex positions or semantics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    vertex_count: usize,
    faces: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
    adj_offsets: Vec<usize>,
    adj: Vec<usize>,
}

impl Topology {
    pub fn new(vertex_count: usize, faces: Vec<[usize; 3]>) -> Result<Self> {
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= vertex_count) {
                return Err(Error::InvalidTopology(format!("face {fi} references a vertex >= {vertex_count}")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidTopology(format!("face {fi} repeats a vertex")));
            }
        }
        let mut edges: Vec<[usize; 2]> = faces
            .iter()
            .flat_map(|f| [[f[0], f[1]], [f[1], f[2]], [f[2], f[0]]])
            .map(|[a, b]| if a < b { [a, b] } else { [b, a] })
            .collect();
        edges.sort_unstable();
        edges.dedup();

        let mut degree = vec![0usize; vertex_count];
        for &[a, b] in &edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut adj_offsets = Vec::with_capacity(vertex_count + 1);
        adj_offsets.push(0);
        for d in &degree {
            adj_offsets.push(adj_offsets.last().unwrap() + d);
        }
        let mut fill = adj_offsets.clone();
        let mut adj = vec![0usize; *adj_offsets.last().unwrap()];
        for &[a, b] in &edges {
            adj[fill[a]] = b;
            fill[a] += 1;
            adj[fill[b]] = a;
            fill[b] += 1;
        }
        for v in 0..vertex_count {
            adj[adj_offsets[v]..adj_offsets[v + 1]].sort_unstable();
        }
        Ok(Self { vertex_count, faces, edges, adj_offsets, adj })
    }

    #[inline]
    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    #[inline]
    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    #[inline]
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    #[inline]
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[self.adj_offsets[v]..self.adj_offsets[v + 1]]
    }

    #[inline]
    pub fn degree(&self, v: usize) -> usize {
        self.adj_offsets[v + 1] - self.adj_offsets[v]
    }

    /// Edges used by exactly one face.
    pub fn boundary_edges(&self) -> Vec<[usize; 2]> {
        let mut all: Vec<[usize; 2]> = self
            .faces
            .iter()
            .flat_map(|f| [[f[0], f[1]], [f[1], f[2]], [f[2], f[0]]])
            .map(|[a, b]| if a < b { [a, b] } else { [b, a] })
            .collect();
        all.sort_unstable();
        let mut out = Vec::new();
        let mut i = 0;
        while i < all.len() {
            let mut j = i + 1;
            while j < all.len() && all[j] == all[i] {
                j += 1;
            }
            if j - i == 1 {
                out.push(all[i]);
            }
            i = j;
        }
        out
    }
}

/// Semantic triangle mesh: positions `V` (n×3), class scores `C` (n×s), and a fixed
/// face/edge topology.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh<T> {
    pub vertices: Vec<Vec3<T>>,
    pub semantics: Matrix<T>,
    topology: Arc<Topology>,
}

impl<T: Real> TriMesh<T> {
    pub fn new(vertices: Vec<Vec3<T>>, faces: Vec<[usize; 3]>, classes: usize) -> Result<Self> {
        let topology = Arc::new(Topology::new(vertices.len(), faces)?);
        let n = vertices.len();
        Ok(Self { vertices, semantics: Matrix::zeros(n, classes), topology })
    }

    pub fn with_topology(vertices: Vec<Vec3<T>>, semantics: Matrix<T>, topology: Arc<Topology>) -> Result<Self> {
        if vertices.len() != topology.vertex_count() || semantics.rows() != vertices.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} vertices, {} semantic rows, topology over {} vertices",
                vertices.len(),
                semantics.rows(),
                topology.vertex_count()
            )));
        }
        Ok(Self { vertices, semantics, topology })
    }

    pub fn empty(classes: usize) -> Self {
        Self {
            vertices: Vec::new(),
            semantics: Matrix::zeros(0, classes),
            topology: Arc::new(Topology::new(0, Vec::new()).expect("empty topology")),
        }
    }

    #[inline]
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    #[inline]
    pub fn face_count(&self) -> usize {
        self.topology.faces().len()
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.semantics.cols()
    }

    #[inline]
    pub fn faces(&self) -> &[[usize; 3]] {
        self.topology.faces()
    }

    #[inline]
    pub fn edges(&self) -> &[[usize; 2]] {
        self.topology.edges()
    }

    #[inline]
    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    #[inline]
    pub fn face_vertices(&self, f: usize) -> [Vec3<T>; 3] {
        let [a, b, c] = self.topology.faces()[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Same topology and semantics with new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3<T>>) -> Self {
        assert_eq!(vertices.len(), self.vertices.len(), "vertex count");
        Self { vertices, semantics: self.semantics.clone(), topology: Arc::clone(&self.topology) }
    }

    pub fn with_semantics(&self, semantics: Matrix<T>) -> Self {
        assert_eq!(semantics.rows(), self.vertices.len(), "semantic rows");
        Self { vertices: self.vertices.clone(), semantics, topology: Arc::clone(&self.topology) }
    }

    /// Vertex positions as an n×3 matrix.
    pub fn vertex_matrix(&self) -> Matrix<T> {
        Matrix::from_rows(&self.vertices)
    }

    pub fn surface_area(&self) -> T {
        (0..self.face_count())
            .map(|f| {
                let [a, b, c] = self.face_vertices(f);
                geom::triangle_area(a, b, c)
            })
            .sum()
    }

    /// Per-vertex argmax of the semantic scores.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.vertex_count()).map(|v| argmax(self.semantics.row(v))).collect()
    }

    pub fn median_edge_length(&self) -> T {
        let mut lens: Vec<T> =
            self.edges().iter().map(|&[a, b]| geom::norm(geom::sub(self.vertices[a], self.vertices[b]))).collect();
        if lens.is_empty() {
            return T::zero();
        }
        lens.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        lens[lens.len() / 2]
    }

    /// Keeps the listed faces and the vertices they use, re-indexed in ascending order.
    /// Returns the new mesh and the old index of each kept vertex.
    pub fn submesh(&self, faces: &[usize]) -> (Self, Vec<usize>) {
        let mut map = vec![usize::MAX; self.vertex_count()];
        let mut kept = Vec::new();
        let mut used: Vec<usize> = faces.iter().flat_map(|&f| self.faces()[f]).collect();
        used.sort_unstable();
        used.dedup();
        for v in used {
            map[v] = kept.len();
            kept.push(v);
        }
        let new_faces: Vec<[usize; 3]> = faces.iter().map(|&f| self.faces()[f].map(|v| map[v])).collect();
        let vertices = kept.iter().map(|&v| self.vertices[v]).collect();
        let semantics = Matrix::from_fn(kept.len(), self.classes(), |r, c| self.semantics[(kept[r], c)]);
        let topology = Arc::new(Topology::new(kept.len(), new_faces).expect("subset of valid faces"));
        (Self { vertices, semantics, topology }, kept)
    }

    pub fn cast<U: Real>(&self) -> TriMesh<U> {
        let c = crate::scalar::cast::<T, U>;
        TriMesh {
            vertices: self.vertices.iter().map(|v| v.map(c)).collect(),
            semantics: Matrix::from_vec(
                self.semantics.rows(),
                self.semantics.cols(),
                self.semantics.as_slice().iter().map(|&x| c(x)).collect(),
            ),
            topology: Arc::clone(&self.topology),
        }
    }
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Regular vertex grid over the full image plane `[0,1]²` (borders included).
/// Vertex `(col, row)` has index `row * side + col`; each cell is split by the
/// diagonal from `(col, row)` to `(col + 1, row + 1)`.
#[derive(Debug, Clone)]
pub struct GridTopology<T> {
    pub side: usize,
    pub uv: Vec<Vec2<T>>,
    pub topology: Arc<Topology>,
}

impl<T: Real> GridTopology<T> {
    pub fn new(side: usize) -> Result<Self> {
        if side < 2 {
            return Err(Error::InvalidArgument(format!("grid side must be >= 2, got {side}")));
        }
        let step = T::one() / T::from_usize_lossy(side - 1);
        let mut uv = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                uv.push([T::from_usize_lossy(col) * step, T::from_usize_lossy(row) * step]);
            }
        }
        let mut faces = Vec::with_capacity(2 * (side - 1) * (side - 1));
        for row in 0..side - 1 {
            for col in 0..side - 1 {
                let v00 = row * side + col;
                let v01 = v00 + 1;
                let v10 = v00 + side;
                let v11 = v10 + 1;
                faces.push([v00, v01, v11]);
                faces.push([v00, v11, v10]);
            }
        }
        Ok(Self { side, uv, topology: Arc::new(Topology::new(side * side, faces)?) })
    }

    pub fn vertex_count(&self) -> usize {
        self.side * self.side
    }

    /// Locates a normalized image point; see [`locate_pixel`].
    pub fn locate_uv(&self, uv: Vec2<T>) -> Option<BarycentricHit<T>> {
        let (o, z) = (T::one(), T::zero());
        if !(uv[0] >= z && uv[0] <= o && uv[1] >= z && uv[1] <= o) {
            return None;
        }
        let cells = self.side - 1;
        let scale = T::from_usize_lossy(cells);
        let a = uv[0] * scale;
        let b = uv[1] * scale;
        let col = a.floor().to_usize().unwrap_or(0).min(cells - 1);
        let row = b.floor().to_usize().unwrap_or(0).min(cells - 1);
        let fa = a - T::from_usize_lossy(col);
        let fb = b - T::from_usize_lossy(row);
        let base = 2 * (row * cells + col);
        if fa >= fb {
            Some(BarycentricHit { face: base, weights: [o - fa, fa - fb, fb] })
        } else {
            Some(BarycentricHit { face: base + 1, weights: [o - fb, fa, fb - fa] })
        }
    }
}

/// A face index plus barycentric weights of a point inside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarycentricHit<T> {
    pub face: usize,
    pub weights: [T; 3],
}

/// Flat grid mesh on the unit-depth image plane with [`DEFAULT_CLASSES`] zero scores.
pub fn make_grid_mesh<T: Real>(side: usize, camera: &CameraModel<T>) -> Result<TriMesh<T>> {
    let grid = GridTopology::new(side)?;
    Ok(flat_mesh(&grid, camera, DEFAULT_CLASSES))
}

/// Flat mesh for an existing grid: vertex `i` is `[v_x, v_y, 1]`, the ray through its uv point.
pub fn flat_mesh<T: Real>(grid: &GridTopology<T>, camera: &CameraModel<T>, classes: usize) -> TriMesh<T> {
    let vertices = grid.uv.iter().map(|&uv| camera.pixel_ray(camera.uv_to_pixel(uv))).collect();
    TriMesh { vertices, semantics: Matrix::zeros(grid.vertex_count(), classes), topology: Arc::clone(&grid.topology) }
}

/// Face and barycentric weights of a continuous pixel location on the flat grid.
pub fn locate_pixel<T: Real>(
    grid: &GridTopology<T>,
    pixel: Vec2<T>,
    camera: &CameraModel<T>,
) -> Result<BarycentricHit<T>> {
    grid.locate_uv(camera.pixel_to_uv(pixel)).ok_or_else(|| Error::OutOfDomain {
        index: 0,
        detail: format!("pixel ({}, {}) is outside the grid footprint", pixel[0], pixel[1]),
    })
}

/// Sparse `L_n = I − G⁻¹A` in compressed rows; each row lists the diagonal first.
#[derive(Debug, Clone)]
pub struct LaplacianOperator<T> {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Real> LaplacianOperator<T> {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn apply_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.n).map(|i| self.row(i).map(|(j, a)| a * x[j]).sum()).collect()
    }

    /// `L_n X` for an n×k matrix.
    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let k = x.cols();
        let mut out = Matrix::zeros(self.n, k);
        for i in 0..self.n {
            for (j, a) in self.row(i) {
                for c in 0..k {
                    out[(i, c)] += a * x[(j, c)];
                }
            }
        }
        out
    }

    /// `L_nᵀ X` for an n×k matrix.
    pub fn apply_t(&self, x: &Matrix<T>) -> Matrix<T> {
        let k = x.cols();
        let mut out = Matrix::zeros(self.n, k);
        for i in 0..self.n {
            for (j, a) in self.row(i) {
                for c in 0..k {
                    out[(j, c)] += a * x[(i, c)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, a) in self.row(i) {
                m[(i, j)] += a;
            }
        }
        m
    }
}

pub fn normalized_laplacian<T: Real>(mesh: &TriMesh<T>) -> Result<LaplacianOperator<T>> {
    laplacian_of(mesh.topology())
}

pub fn laplacian_of<T: Real>(topo: &Topology) -> Result<LaplacianOperator<T>> {
    let n = topo.vertex_count();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    offsets.push(0);
    for v in 0..n {
        let nb = topo.neighbors(v);
        if nb.is_empty() {
            return Err(Error::InvalidTopology(format!("vertex {v} is isolated")));
        }
        let w = -T::one() / T::from_usize_lossy(nb.len());
        cols.push(v);
        vals.push(T::one());
        for &u in nb {
            cols.push(u);
            vals.push(w);
        }
        offsets.push(cols.len());
    }
    Ok(LaplacianOperator { n, offsets, cols, vals })
}

/// Points sampled uniformly on a mesh surface, with their face and barycentric weights.
#[derive(Debug, Clone)]
pub struct SurfaceSamples<T> {
    pub points: Vec<Vec3<T>>,
    pub faces: Vec<usize>,
    pub weights: Vec<[T; 3]>,
}

impl<T: Real> SurfaceSamples<T> {
    /// The same (face, barycentric) provenance evaluated on another mesh of this topology.
    pub fn relocated(&self, mesh: &TriMesh<T>) -> Self {
        let points = self
            .faces
            .iter()
            .zip(&self.weights)
            .map(|(&f, w)| {
                let [a, b, c] = mesh.face_vertices(f);
                geom::add(geom::add(geom::scale(a, w[0]), geom::scale(b, w[1])), geom::scale(c, w[2]))
            })
            .collect();
        Self { points, faces: self.faces.clone(), weights: self.weights.clone() }
    }
}

/// Area-proportional face choice plus uniform barycentric weights (square-root warp).
pub fn sample_surface<T: Real>(mesh: &TriMesh<T>, count: usize, seed: u64) -> Result<SurfaceSamples<T>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    if mesh.face_count() == 0 {
        return Err(Error::DegenerateMesh("mesh has no faces".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.face_count());
    let mut total = T::zero();
    for f in 0..mesh.face_count() {
        let [a, b, c] = mesh.face_vertices(f);
        total += geom::triangle_area(a, b, c);
        cumulative.push(total);
    }
    if !(total > T::zero()) || !total.is_finite() {
        return Err(Error::DegenerateMesh("total surface area is zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SurfaceSamples {
        points: Vec::with_capacity(count),
        faces: Vec::with_capacity(count),
        weights: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let pick = T::lit(rng.random::<f64>()) * total;
        let f = cumulative.partition_point(|&c| c <= pick).min(mesh.face_count() - 1);
        let r1 = T::lit(rng.random::<f64>()).sqrt();
        let r2 = T::lit(rng.random::<f64>());
        let w = [T::one() - r1, r1 * (T::one() - r2), r1 * r2];
        let [a, b, c] = mesh.face_vertices(f);
        let p = geom::add(geom::add(geom::scale(a, w[0]), geom::scale(b, w[1])), geom::scale(c, w[2]));
        out.points.push(p);
        out.faces.push(f);
        out.weights.push(w);
    }
    Ok(out)
}

/// Applies a camera-to-world pose: `V Rᵀ + 1 pᵀ`.
pub fn to_global<T: Real>(mesh: &TriMesh<T>, pose: &Pose<T>) -> Result<TriMesh<T>> {
    if !geom::is_rotation(&pose.rotation, T::lit(1e-6)) {
        return Err(Error::InvalidArgument("pose rotation is not orthonormal".into()));
    }
    Ok(mesh.with_vertices(mesh.vertices.iter().map(|&v| pose.apply(v)).collect()))
}

/// Inverse of [`to_global`].
pub fn to_local<T: Real>(mesh: &TriMesh<T>, pose: &Pose<T>) -> Result<TriMesh<T>> {
    to_global(mesh, &pose.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel<f64> {
        CameraModel::centered(64, 64, 64.0)
    }

    #[test]
    fn grid_counts() {
        let m = make_grid_mesh(2, &cam()).unwrap();
        assert_eq!((m.vertex_count(), m.face_count(), m.edges().len()), (4, 2, 5));
        let m = make_grid_mesh(32, &cam()).unwrap();
        assert_eq!((m.vertex_count(), m.face_count()), (1024, 1922));
        assert!(matches!(make_grid_mesh(1, &cam()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn grid_center_projects_to_image_center() {
        let c = cam();
        let m = make_grid_mesh(3, &c).unwrap();
        let p = c.project(m.vertices[4]);
        assert_eq!(p, [32.0, 32.0]);
        assert!(m.vertices.iter().all(|v| v[2] == 1.0));
        assert!(m.semantics.as_slice().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn laplacian_of_single_triangle() {
        let m = TriMesh::<f64>::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]], 1).unwrap();
        let l = normalized_laplacian(&m).unwrap().to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { -0.5 };
                assert_eq!(l[(i, j)], e);
            }
        }
    }

    #[test]
    fn laplacian_rejects_isolated_vertex() {
        let m = TriMesh::<f64>::new(vec![[0.0; 3]; 4], vec![[0, 1, 2]], 1).unwrap();
        assert!(matches!(normalized_laplacian(&m), Err(Error::InvalidTopology(_))));
    }

    #[test]
    fn laplacian_matches_dense_formula_on_grid() {
        let m = make_grid_mesh(4, &cam()).unwrap();
        let l = normalized_laplacian(&m).unwrap().to_dense();
        let n = m.vertex_count();
        let mut adj = vec![vec![0.0; n]; n];
        for f in m.faces() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                adj[a][b] = 1.0;
                adj[b][a] = 1.0;
            }
        }
        for i in 0..n {
            let deg: f64 = adj[i].iter().sum();
            for j in 0..n {
                let e = if i == j { 1.0 } else { 0.0 } - adj[i][j] / deg;
                assert!((l[(i, j)] - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn locate_vertex_and_diagonal_midpoint() {
        let c = cam();
        let g = GridTopology::<f64>::new(5).unwrap();
        // vertex (col 1, row 2) sits at uv (0.25, 0.5) → pixel (16, 32)
        let hit = locate_pixel(&g, [16.0, 32.0], &c).unwrap();
        let face = g.topology.faces()[hit.face];
        let vid = 2 * 5 + 1;
        let k = face.iter().position(|&v| v == vid).unwrap();
        assert_eq!(hit.weights[k], 1.0);
        assert_eq!(hit.weights.iter().filter(|&&w| w == 0.0).count(), 2);

        // midpoint of the diagonal of cell (0,0): uv (0.125, 0.125)
        let hit = locate_pixel(&g, [8.0, 8.0], &c).unwrap();
        let face = g.topology.faces()[hit.face];
        for (k, &v) in face.iter().enumerate() {
            let expect = if v == 0 || v == 6 { 0.5 } else { 0.0 };
            assert_eq!(hit.weights[k], expect);
        }
        assert!(locate_pixel(&g, [-0.5, 3.0], &c).is_err());
        assert!(locate_pixel(&g, [64.5, 3.0], &c).is_err());
    }

    #[test]
    fn sampling_centroid_and_provenance() {
        let m =
            TriMesh::<f64>::new(vec![[0.0, 0.0, 1.0], [3.0, 0.0, 1.0], [0.0, 3.0, 1.0]], vec![[0, 1, 2]], 1).unwrap();
        let s = sample_surface(&m, 50, 7).unwrap();
        for (p, w) in s.points.iter().zip(&s.weights) {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let q = [3.0 * w[1], 3.0 * w[2], 1.0];
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-12);
            }
        }
        // equal weights reproduce the centroid
        let w = [1.0 / 3.0; 3];
        let [a, b, c] = m.face_vertices(0);
        let centroid = geom::add(geom::add(geom::scale(a, w[0]), geom::scale(b, w[1])), geom::scale(c, w[2]));
        assert!((centroid[0] - 1.0).abs() < 1e-12 && (centroid[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_area_proportional() {
        // faces of area 1 and 3
        let m = TriMesh::<f64>::new(
            vec![
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [10.0, 0.0, 0.0],
                [16.0, 0.0, 0.0],
                [10.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [3, 4, 5]],
            1,
        )
        .unwrap();
        let s = sample_surface(&m, 40_000, 11).unwrap();
        let frac = s.faces.iter().filter(|&&f| f == 1).count() as f64 / 40_000.0;
        assert!((frac - 0.75).abs() < 0.01, "fraction {frac}");
        let again = sample_surface(&m, 40_000, 11).unwrap();
        assert_eq!(s.points, again.points);
    }

    #[test]
    fn sampling_rejects_zero_area() {
        let m = TriMesh::<f64>::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]], 1).unwrap();
        assert!(matches!(sample_surface(&m, 3, 0), Err(Error::DegenerateMesh(_))));
    }

    #[test]
    fn to_global_identity_translation_and_inverse() {
        let m = make_grid_mesh(3, &cam()).unwrap();
        let same = to_global(&m, &Pose::identity()).unwrap();
        assert_eq!(same.vertices, m.vertices);
        let t = to_global(&m, &Pose::translation([1.0, 2.0, 3.0])).unwrap();
        for (a, b) in t.vertices.iter().zip(&m.vertices) {
            assert_eq!(*a, [b[0] + 1.0, b[1] + 2.0, b[2] + 3.0]);
        }
        let pose = Pose { rotation: geom::mat_mul(&geom::rot_z(0.7), &geom::rot_x(0.2)), position: [5.0, -1.0, 2.0] };
        let back = to_global(&to_global(&m, &pose).unwrap(), &pose.inverse()).unwrap();
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        assert_eq!(back.faces(), m.faces());
        let bad = Pose { rotation: [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], position: [0.0; 3] };
        assert!(to_global(&m, &bad).is_err());
    }

    #[test]
    fn boundary_edges_of_grid() {
        let g = GridTopology::<f64>::new(4).unwrap();
        assert_eq!(g.topology.boundary_edges().len(), 12);
    }
}
