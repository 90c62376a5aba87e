//! Incremental global mesh construction from posed local meshes.
//!
//! A local mesh whose view is already mostly covered is skipped. Otherwise the
//! overlapped part of the global mesh is registered non-rigidly (CPD) onto the
//! local surface, overlapping local faces are dropped, and the remaining local mesh
//! is stitched to the global one by a constrained Delaunay triangulation of the gap
//! between their image-plane boundaries.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::mesh::{sample_surface, TriMesh};
use crate::render::{double_layer_pixels, rasterize, strict_layers};
use crate::scalar::Real;

pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.7;
/// Stitch triangles longer than this multiple of the median local edge are dropped.
pub const DEFAULT_STITCH_RATIO: f64 = 3.0;

type P2 = [f64; 2];

// ---------------------------------------------------------------- 2D predicates

fn orient(a: P2, b: P2, c: P2) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// True when segments `ab` and `cd` cross at a point interior to both.
fn segments_cross(a: P2, b: P2, c: P2, d: P2) -> bool {
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

/// True when `p` lies on the open segment `ab`.
fn on_open_segment(p: P2, a: P2, b: P2) -> bool {
    if orient(a, b, p) != 0.0 {
        return false;
    }
    let t = (p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1]);
    let len = (b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2);
    t > 0.0 && t < len
}

/// Positive when `d` lies strictly inside the circumcircle of the ccw triangle `abc`.
pub fn incircle(a: P2, b: P2, c: P2, d: P2) -> f64 {
    let (adx, ady) = (a[0] - d[0], a[1] - d[1]);
    let (bdx, bdy) = (b[0] - d[0], b[1] - d[1]);
    let (cdx, cdy) = (c[0] - d[0], c[1] - d[1]);
    let ad = adx * adx + ady * ady;
    let bd = bdx * bdx + bdy * bdy;
    let cd = cdx * cdx + cdy * cdy;
    adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx)
}

/// True when the open interiors of two triangles intersect (separating-axis test).
/// Triangles that only share edges or vertices do not intersect.
fn triangles_overlap(t: &[P2; 3], u: &[P2; 3], eps: f64) -> bool {
    for tri in [t, u] {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let n = [a[1] - b[1], b[0] - a[0]];
            let proj = |p: P2| n[0] * p[0] + n[1] * p[1];
            let (mut t0, mut t1) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut u0, mut u1) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in t {
                t0 = t0.min(proj(*p));
                t1 = t1.max(proj(*p));
            }
            for p in u {
                u0 = u0.min(proj(*p));
                u1 = u1.max(proj(*p));
            }
            let tol = eps * (n[0].abs() + n[1].abs());
            if t1 <= u0 + tol || u1 <= t0 + tol {
                return false;
            }
        }
    }
    true
}

fn point_in_triangle(p: P2, t: &[P2; 3]) -> bool {
    let (a, b, c) = (orient(t[0], t[1], p), orient(t[1], t[2], p), orient(t[2], t[0], p));
    (a > 0.0 && b > 0.0 && c > 0.0) || (a < 0.0 && b < 0.0 && c < 0.0)
}

fn bbox(t: &[P2; 3]) -> [f64; 4] {
    [
        t[0][0].min(t[1][0]).min(t[2][0]),
        t[0][1].min(t[1][1]).min(t[2][1]),
        t[0][0].max(t[1][0]).max(t[2][0]),
        t[0][1].max(t[1][1]).max(t[2][1]),
    ]
}

/// Uniform-grid index of 2D triangles for overlap queries.
struct TriangleIndex {
    tris: Vec<[P2; 3]>,
    origin: P2,
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl TriangleIndex {
    fn new(tris: Vec<[P2; 3]>, cell: f64) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for t in &tris {
            let b = bbox(t);
            lo = [lo[0].min(b[0]), lo[1].min(b[1])];
            hi = [hi[0].max(b[2]), hi[1].max(b[3])];
        }
        if tris.is_empty() {
            lo = [0.0; 2];
            hi = [0.0; 2];
        }
        let cell = cell.max(1e-9);
        let cols = (((hi[0] - lo[0]) / cell).floor() as usize + 1).min(4096);
        let rows = (((hi[1] - lo[1]) / cell).floor() as usize + 1).min(4096);
        let mut idx = Self {
            tris,
            origin: lo,
            cell: cell.max((hi[0] - lo[0]).max(hi[1] - lo[1]) / 4095.0),
            cols,
            rows,
            buckets: vec![Vec::new(); cols * rows],
        };
        for i in 0..idx.tris.len() {
            let (c0, r0, c1, r1) = idx.cells(bbox(&idx.tris[i]));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    idx.buckets[r * cols + c].push(i);
                }
            }
        }
        idx
    }

    fn cells(&self, b: [f64; 4]) -> (usize, usize, usize, usize) {
        let clamp = |v: f64, o: f64, n: usize| (((v - o) / self.cell).floor().max(0.0) as usize).min(n - 1);
        (
            clamp(b[0], self.origin[0], self.cols),
            clamp(b[1], self.origin[1], self.rows),
            clamp(b[2], self.origin[0], self.cols),
            clamp(b[3], self.origin[1], self.rows),
        )
    }

    fn candidates(&self, b: [f64; 4]) -> Vec<usize> {
        if self.tris.is_empty()
            || b[2] < self.origin[0]
            || b[3] < self.origin[1]
            || b[0] > self.origin[0] + self.cell * self.cols as f64
            || b[1] > self.origin[1] + self.cell * self.rows as f64
        {
            return Vec::new();
        }
        let (c0, r0, c1, r1) = self.cells(b);
        let mut out = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                out.extend_from_slice(&self.buckets[r * self.cols + c]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    fn overlaps(&self, t: &[P2; 3], eps: f64) -> bool {
        self.candidates(bbox(t)).into_iter().any(|i| triangles_overlap(&self.tris[i], t, eps))
    }

    fn contains(&self, p: P2) -> bool {
        self.candidates([p[0], p[1], p[0], p[1]]).into_iter().any(|i| point_in_triangle(p, &self.tris[i]))
    }
}

// ---------------------------------------------------------------- CDT

/// A constrained triangulation of 2D points.
#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation2D {
    pub points: Vec<P2>,
    pub constraints: Vec<[usize; 2]>,
    /// Counter-clockwise triangles over indices into `points`.
    pub triangles: Vec<[usize; 3]>,
}

fn check_constraints(points: &[P2], constraints: &[[usize; 2]]) -> Result<()> {
    for (k, &[a, b]) in constraints.iter().enumerate() {
        if a >= points.len() || b >= points.len() || points[a] == points[b] {
            return Err(Error::InvalidConstraints(format!("constraint {k} is degenerate or out of range")));
        }
        if let Some(p) = points.iter().position(|&p| on_open_segment(p, points[a], points[b])) {
            return Err(Error::InvalidConstraints(format!("point {p} lies inside constraint {k}")));
        }
        for (j, &[c, d]) in constraints[..k].iter().enumerate() {
            if segments_cross(points[a], points[b], points[c], points[d]) {
                return Err(Error::InvalidConstraints(format!("constraints {j} and {k} cross")));
            }
        }
    }
    Ok(())
}

/// Constrained Delaunay triangulation without Steiner points. Coincident input points
/// are merged into their first occurrence.
pub fn constrained_delaunay(points: &[P2], constraints: &[[usize; 2]]) -> Result<Triangulation2D> {
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::InvalidArgument("non-finite point".into()));
    }
    check_constraints(points, constraints)?;
    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> = ConstrainedDelaunayTriangulation::new();
    let mut handles = Vec::with_capacity(points.len());
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        let h = cdt.insert(Point2::new(p[0], p[1])).map_err(|e| Error::InvalidArgument(format!("point {i}: {e:?}")))?;
        owner.entry(h.index()).or_insert(i);
        handles.push(h);
    }
    for (k, &[a, b]) in constraints.iter().enumerate() {
        if !cdt.can_add_constraint(handles[a], handles[b]) {
            return Err(Error::InvalidConstraints(format!("constraint {k} intersects another")));
        }
        cdt.add_constraint(handles[a], handles[b]);
    }
    let triangles = cdt.inner_faces().map(|f| f.vertices().map(|v| owner[&v.fix().index()])).collect();
    Ok(Triangulation2D { points: points.to_vec(), constraints: constraints.to_vec(), triangles })
}

impl Triangulation2D {
    fn edge_key(a: usize, b: usize) -> (usize, usize) {
        (a.min(b), a.max(b))
    }

    /// Constraints that are not a triangle side.
    pub fn missing_constraints(&self) -> Vec<[usize; 2]> {
        let mut sides = std::collections::HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                sides.insert(Self::edge_key(t[k], t[(k + 1) % 3]));
            }
        }
        self.constraints.iter().copied().filter(|&[a, b]| !sides.contains(&Self::edge_key(a, b))).collect()
    }

    /// Unconstrained edges that fail the exhaustive empty-circumcircle test: some
    /// point visible from an adjacent triangle lies strictly inside its circumcircle.
    pub fn non_delaunay_edges(&self) -> Vec<[usize; 2]> {
        let constrained: std::collections::HashSet<_> =
            self.constraints.iter().map(|&[a, b]| Self::edge_key(a, b)).collect();
        let p = &self.points;
        let visible = |q: P2, from: P2| !self.constraints.iter().any(|&[a, b]| segments_cross(q, from, p[a], p[b]));
        let mut bad = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for t in &self.triangles {
            let (a, b, c) = (p[t[0]], p[t[1]], p[t[2]]);
            let centroid = [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0];
            let scale = [a, b, c].iter().flat_map(|q| [q[0].abs(), q[1].abs()]).fold(1.0f64, f64::max);
            let tol = 1e-9 * scale.powi(4);
            for k in 0..3 {
                let key = Self::edge_key(t[k], t[(k + 1) % 3]);
                if constrained.contains(&key) {
                    continue;
                }
                let offending = p
                    .iter()
                    .enumerate()
                    .any(|(i, &q)| !t.contains(&i) && incircle(a, b, c, q) > tol && visible(q, centroid));
                if offending && seen.insert(key) {
                    bad.push([key.0, key.1]);
                }
            }
        }
        bad
    }
}

// ---------------------------------------------------------------- CPD

#[derive(Debug, Clone, PartialEq)]
pub struct CpdConfig<T> {
    pub beta: T,
    pub lambda_reg: T,
    pub outlier_w: T,
    pub max_iters: usize,
    pub tol: T,
}

impl<T: Real> CpdConfig<T> {
    /// Defaults scaled to a mesh with the given median edge length.
    pub fn for_edge_length(edge: T) -> Self {
        Self {
            beta: T::lit(2.0) * edge,
            lambda_reg: T::lit(3.0),
            outlier_w: T::lit(0.1),
            max_iters: 100,
            tol: T::lit(1e-5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > T::zero()) || !(self.lambda_reg > T::zero()) {
            return Err(Error::InvalidConfig("CPD beta and lambda must be positive".into()));
        }
        if !(self.outlier_w >= T::zero() && self.outlier_w < T::one()) {
            return Err(Error::InvalidConfig("CPD outlier weight must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CpdResult<T> {
    pub displaced: Vec<Vec3<T>>,
    pub displacement: Vec<Vec3<T>>,
    pub sigma2: T,
    pub iterations: usize,
}

const CG_MAX_ITERS: usize = 50;

/// Hash grid over 3D points; a query visits the 27 cells around its own.
struct PointGrid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl PointGrid {
    fn new<T: Real>(points: &[Vec3<T>], cell: T) -> Self {
        let cell = cell.to_f64_lossy();
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, &p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key<T: Real>(p: Vec3<T>, cell: f64) -> [i64; 3] {
        p.map(|c| (c.to_f64_lossy() / cell).floor() as i64)
    }

    fn around<T: Real>(&self, p: Vec3<T>) -> impl Iterator<Item = usize> + '_ {
        let k = Self::key(p, self.cell);
        (0..27).flat_map(move |n| {
            let off = [n % 3 - 1, n / 3 % 3 - 1, n / 9 - 1];
            self.cells.get(&[k[0] + off[0], k[1] + off[1], k[2] + off[2]]).into_iter().flatten().copied()
        })
    }
}

/// Gaussian values below this are dropped from kernels and posteriors.
const GAUSS_CUTOFF: f64 = 1e-10;

/// Squared distance beyond which `exp(-d² / (2 s²))` falls under [`GAUSS_CUTOFF`].
fn cutoff_sq<T: Real>(s2: T) -> T {
    T::lit(-2.0 * GAUSS_CUTOFF.ln()) * s2
}

/// Gaussian kernel among source points, truncated at [`GAUSS_CUTOFF`].
struct SparseKernel<T> {
    rows: Vec<Vec<(usize, T)>>,
}

impl<T: Real> SparseKernel<T> {
    fn new(y: &[Vec3<T>], beta: T) -> Self {
        let cut2 = cutoff_sq(beta * beta);
        let grid = PointGrid::new(y, cut2.sqrt());
        let two_b2 = T::lit(2.0) * beta * beta;
        let rows = y
            .par_iter()
            .map(|&p| {
                let mut row: Vec<(usize, T)> = grid
                    .around(p)
                    .filter_map(|j| {
                        let d2 = geom::sq_dist(p, y[j]);
                        (d2 <= cut2).then(|| (j, (-d2 / two_b2).exp()))
                    })
                    .collect();
                row.sort_unstable_by_key(|e| e.0);
                row
            })
            .collect();
        Self { rows }
    }

    fn apply(&self, w: &[Vec3<T>]) -> Vec<Vec3<T>> {
        self.rows
            .par_iter()
            .map(|row| {
                let mut acc = [T::zero(); 3];
                for &(j, g) in row {
                    for c in 0..3 {
                        acc[c] += g * w[j][c];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Approximately solves `(S G S + a I) z = r` by conjugate gradients, warm-started at
/// `z`. Every CG step lowers the quadratic energy, so a truncated solve still improves
/// the EM objective.
/// `noise` is the squared magnitude of the terms that cancel in `r`; residuals below
/// its rounding level count as converged.
fn cg_solve<T: Real>(g: &SparseKernel<T>, s: &[T], a: T, r: &[Vec3<T>], noise: T, z: &mut [Vec3<T>]) -> Result<()> {
    let op = |x: &[Vec3<T>]| -> Vec<Vec3<T>> {
        let sx: Vec<Vec3<T>> = x.iter().zip(s).map(|(v, &si)| geom::scale(*v, si)).collect();
        g.apply(&sx)
            .into_iter()
            .zip(s)
            .zip(x)
            .map(|((gv, &si), xv)| geom::add(geom::scale(gv, si), geom::scale(*xv, a)))
            .collect()
    };
    let dot = |u: &[Vec3<T>], v: &[Vec3<T>]| -> [T; 3] {
        let mut d = [T::zero(); 3];
        for (p, q) in u.iter().zip(v) {
            for c in 0..3 {
                d[c] += p[c] * q[c];
            }
        }
        d
    };
    let rhs_norm = dot(r, r);
    let total = rhs_norm[0] + rhs_norm[1] + rhs_norm[2];
    let az = op(z);
    let mut res: Vec<Vec3<T>> = r.iter().zip(&az).map(|(a, b)| geom::sub(*a, *b)).collect();
    let mut rr = dot(&res, &res);
    if rr[0] + rr[1] + rr[2] > total {
        z.iter_mut().for_each(|v| *v = [T::zero(); 3]);
        res = r.to_vec();
        rr = rhs_norm;
    }
    let mut dir = res.clone();
    let rel2 = T::lit(1e-16).max((T::lit(100.0) * T::epsilon()).powi(2));
    let floor = (T::lit(100.0) * T::epsilon()).powi(2) * noise;
    let target = [rel2 * total + floor; 3];
    for _ in 0..CG_MAX_ITERS.min(4 * r.len()).max(50) {
        if (0..3).all(|c| rr[c] <= target[c]) {
            return Ok(());
        }
        let ad = op(&dir);
        let dad = dot(&dir, &ad);
        let mut alpha = [T::zero(); 3];
        for c in 0..3 {
            if dad[c] > T::zero() && rr[c] > target[c] {
                alpha[c] = rr[c] / dad[c];
            }
        }
        for i in 0..z.len() {
            for c in 0..3 {
                z[i][c] += alpha[c] * dir[i][c];
                res[i][c] -= alpha[c] * ad[i][c];
            }
        }
        let rr_new = dot(&res, &res);
        if !(0..3).all(|c| rr_new[c].is_finite()) {
            return Err(Error::RegistrationFailed("conjugate gradients diverged".into()));
        }
        for c in 0..3 {
            let b = if rr[c] > T::zero() { rr_new[c] / rr[c] } else { T::zero() };
            for i in 0..dir.len() {
                dir[i][c] = res[i][c] + b * dir[i][c];
            }
        }
        rr = rr_new;
    }
    Ok(())
}

/// Non-rigid Coherent Point Drift of `source` onto `target`.
pub fn cpd_register<T: Real>(source: &[Vec3<T>], target: &[Vec3<T>], cfg: &CpdConfig<T>) -> Result<CpdResult<T>> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyInput("CPD needs non-empty point sets".into()));
    }
    let (m, n) = (source.len(), target.len());
    let (mf, nf) = (T::from_usize_lossy(m), T::from_usize_lossy(n));
    let d = T::lit(3.0);
    let mut sigma2 = {
        let sum_y = source.iter().fold([T::zero(); 3], |a, b| geom::add(a, *b));
        let sum_x = target.iter().fold([T::zero(); 3], |a, b| geom::add(a, *b));
        let sq_y: T = source.iter().map(|p| geom::dot(*p, *p)).sum();
        let sq_x: T = target.iter().map(|p| geom::dot(*p, *p)).sum();
        (nf * sq_y + mf * sq_x - T::lit(2.0) * geom::dot(sum_y, sum_x)) / (mf * nf * d)
    };
    let scale2 = source.iter().chain(target).map(|p| geom::dot(*p, *p)).fold(T::one(), T::max);
    let floor = (T::epsilon() * scale2).max((T::lit(1e-4) * cfg.beta).powi(2));
    let kernel = SparseKernel::new(source, cfg.beta);
    let mut z = vec![[T::zero(); 3]; m];
    let mut w = vec![[T::zero(); 3]; m];
    let mut moved = source.to_vec();
    let two_pi = T::lit(2.0 * std::f64::consts::PI);
    let mut iterations = 0;
    let mut prev_q = T::infinity();
    while iterations < cfg.max_iters && sigma2 > floor {
        iterations += 1;
        // E-step: posterior columns normalized over sources plus the outlier term.
        let c = (two_pi * sigma2).powf(d / T::lit(2.0)) * cfg.outlier_w / (T::one() - cfg.outlier_w) * mf / nf;
        let inv = T::one() / (T::lit(2.0) * sigma2);
        let cut2 = cutoff_sq(sigma2);
        let grid = PointGrid::new(&moved, cut2.sqrt());
        let cols: Vec<Vec<(usize, T)>> = target
            .par_iter()
            .map(|&x| {
                let mut col: Vec<(usize, T)> = grid
                    .around(x)
                    .filter_map(|i| {
                        let d2 = geom::sq_dist(x, moved[i]);
                        (d2 <= cut2).then(|| (i, (-d2 * inv).exp()))
                    })
                    .collect();
                let den = col.iter().map(|e| e.1).sum::<T>() + c;
                if den > T::zero() {
                    for e in &mut col {
                        e.1 /= den;
                    }
                }
                col
            })
            .collect();
        let mut p1 = vec![T::zero(); m];
        let mut px = vec![[T::zero(); 3]; m];
        let mut pt1 = vec![T::zero(); n];
        for (j, col) in cols.iter().enumerate() {
            for &(i, p) in col {
                p1[i] += p;
                pt1[j] += p;
                px[i] = geom::add(px[i], geom::scale(target[j], p));
            }
        }
        let np: T = p1.iter().copied().sum();
        if !(np > T::zero()) {
            return Err(Error::RegistrationFailed("all target points classified as outliers".into()));
        }
        // M-step on the symmetrized system with W = S z, S = diag(sqrt(P1)).
        let s: Vec<T> = p1.iter().map(|&v| v.sqrt()).collect();
        let rhs: Vec<Vec3<T>> = (0..m)
            .map(|i| {
                if s[i] > T::zero() {
                    geom::sub(geom::scale(px[i], T::one() / s[i]), geom::scale(source[i], s[i]))
                } else {
                    [T::zero(); 3]
                }
            })
            .collect();
        let noise: T = source.iter().zip(&p1).map(|(y, &p)| p * geom::dot(*y, *y)).sum();
        cg_solve(&kernel, &s, cfg.lambda_reg * sigma2, &rhs, noise, &mut z)?;
        w = z.iter().zip(&s).map(|(v, &si)| geom::scale(*v, si)).collect();
        let gw = kernel.apply(&w);
        moved = source.iter().zip(&gw).map(|(y, g)| geom::add(*y, *g)).collect();
        // variance update
        let xpx: T = target.iter().zip(&pt1).map(|(x, &p)| p * geom::dot(*x, *x)).sum();
        let tpx: T = moved.iter().zip(&px).map(|(t, q)| geom::dot(*t, *q)).sum();
        let tpt: T = moved.iter().zip(&p1).map(|(t, &p)| p * geom::dot(*t, *t)).sum();
        let new_sigma2 = ((xpx - T::lit(2.0) * tpx + tpt) / (np * d)).max(T::zero());
        if !new_sigma2.is_finite() || moved.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::RegistrationFailed("non-finite CPD update".into()));
        }
        let q = (xpx - T::lit(2.0) * tpx + tpt) / (T::lit(2.0) * sigma2.max(floor))
            + np * d / T::lit(2.0) * sigma2.max(floor).ln();
        sigma2 = new_sigma2;
        if (prev_q - q).abs() <= cfg.tol * q.abs().max(T::one()) {
            break;
        }
        prev_q = q;
    }
    let _ = w;
    let displacement = moved.iter().zip(source).map(|(a, b)| geom::sub(*a, *b)).collect();
    Ok(CpdResult { displaced: moved, displacement, sigma2, iterations })
}

// ---------------------------------------------------------------- global mesh

/// World-frame mesh assembled from keyframes, with the source frame of each vertex
/// and the cameras of the keyframes that contributed faces.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMesh<T> {
    pub mesh: TriMesh<T>,
    pub provenance: Vec<usize>,
    pub views: Vec<CameraModel<T>>,
}

impl<T: Real> GlobalMesh<T> {
    pub fn empty(classes: usize) -> Self {
        Self { mesh: TriMesh::empty(classes), provenance: Vec::new(), views: Vec::new() }
    }

    /// Keeps the listed faces and the vertices they use.
    fn retain_faces(&mut self, faces: &[usize]) {
        let (mesh, kept) = self.mesh.submesh(faces);
        self.provenance = kept.iter().map(|&v| self.provenance[v]).collect();
        self.mesh = mesh;
    }

    pub fn is_empty(&self) -> bool {
        self.mesh.face_count() == 0
    }
}

/// Projection of a camera-frame mesh through `camera` (pixel coordinates); `None`
/// for vertices at or behind the camera plane.
fn project_vertices<T: Real>(cam_vertices: &[Vec3<T>], camera: &CameraModel<T>) -> Vec<Option<P2>> {
    cam_vertices
        .iter()
        .map(|&v| {
            (v[2] > T::zero()).then(|| {
                let p = camera.project(v);
                [p[0].to_f64_lossy(), p[1].to_f64_lossy()]
            })
        })
        .collect()
}

fn projected_faces(faces: &[[usize; 3]], proj: &[Option<P2>]) -> Vec<Option<[P2; 3]>> {
    faces.iter().map(|f| Some([proj[f[0]]?, proj[f[1]]?, proj[f[2]]?])).collect()
}

fn image_rect(camera: &CameraModel<impl Real>, margin: f64) -> [P2; 4] {
    let (w, h) = (camera.width as f64, camera.height as f64);
    [[-margin, -margin], [w + margin, -margin], [w + margin, h + margin], [-margin, h + margin]]
}

fn touches_rect(t: &[P2; 3], rect: &[P2; 4]) -> bool {
    triangles_overlap(t, &[rect[0], rect[1], rect[2]], 0.0) || triangles_overlap(t, &[rect[0], rect[2], rect[3]], 0.0)
}

/// Coverage of a view by the global mesh and the faces involved in the overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage<T> {
    /// Fraction of image pixels covered by the projected global mesh.
    pub fraction: T,
    /// Global faces whose projections meet the image.
    pub global_faces: Vec<usize>,
    /// Local faces whose projections overlap the global footprint.
    pub local_faces: Vec<usize>,
}

/// `local` is in the camera frame; the global mesh is in the world frame.
pub fn coverage_fraction<T: Real>(
    global: &GlobalMesh<T>,
    local: &TriMesh<T>,
    camera: &CameraModel<T>,
) -> Result<Coverage<T>> {
    if global.is_empty() {
        return Ok(Coverage { fraction: T::zero(), global_faces: Vec::new(), local_faces: Vec::new() });
    }
    let buf = rasterize(&global.mesh, camera)?;
    let fraction = T::from_usize_lossy(buf.covered_count()) / T::from_usize_lossy(camera.pixel_count());
    let (global_faces, footprint) = global_footprint(global, camera);
    let local_faces = overlapping_local_faces(local, camera, &footprint);
    Ok(Coverage { fraction, global_faces, local_faces })
}

/// Global faces meeting the image and the index of their projections.
fn global_footprint<T: Real>(global: &GlobalMesh<T>, camera: &CameraModel<T>) -> (Vec<usize>, TriangleIndex) {
    let cam_v: Vec<Vec3<T>> = global.mesh.vertices.iter().map(|&v| camera.world_to_camera(v)).collect();
    let proj = project_vertices(&cam_v, camera);
    let rect = image_rect(camera, 0.0);
    let mut ids = Vec::new();
    let mut tris = Vec::new();
    for (f, t) in projected_faces(global.mesh.faces(), &proj).into_iter().enumerate() {
        if let Some(t) = t {
            if touches_rect(&t, &rect) {
                ids.push(f);
                tris.push(t);
            }
        }
    }
    let cell = (camera.width.max(camera.height) as f64 / 32.0).max(1.0);
    (ids, TriangleIndex::new(tris, cell))
}

fn overlapping_local_faces<T: Real>(
    local: &TriMesh<T>,
    camera: &CameraModel<T>,
    footprint: &TriangleIndex,
) -> Vec<usize> {
    let proj = project_vertices(&local.vertices, camera);
    projected_faces(local.faces(), &proj)
        .into_iter()
        .enumerate()
        .filter(|(_, t)| t.is_some_and(|t| footprint.overlaps(&t, 1e-9)))
        .map(|(f, _)| f)
        .collect()
}

fn projected_orientation<T: Real>(v: &[Vec3<T>], f: [usize; 3], camera: &CameraModel<T>) -> Option<f64> {
    let p = f.map(|i| camera.world_to_camera(v[i]));
    if p.iter().any(|q| !(q[2] > T::zero())) {
        return None;
    }
    let q = p.map(|x| {
        let uv = camera.project(x);
        [uv[0].to_f64_lossy(), uv[1].to_f64_lossy()]
    });
    Some(orient(q[0], q[1], q[2]))
}

/// Reverts displaced vertices of `faces` until no face has flipped or lost its
/// projected orientation in `camera`.
fn unfold<T: Real>(mesh: &TriMesh<T>, moved: &mut [Vec3<T>], faces: &[usize], camera: &CameraModel<T>) {
    let before: Vec<Option<f64>> =
        faces.iter().map(|&f| projected_orientation(&mesh.vertices, mesh.faces()[f], camera)).collect();
    loop {
        let mut reverted = false;
        for (&f, o) in faces.iter().zip(&before) {
            let fv = mesh.faces()[f];
            let folded = match (o, projected_orientation(moved, fv, camera)) {
                (Some(a), Some(b)) => a * b <= 0.0 && *a != 0.0,
                (Some(_), None) => true,
                _ => false,
            };
            if folded {
                for i in fv {
                    if moved[i] != mesh.vertices[i] {
                        moved[i] = mesh.vertices[i];
                        reverted = true;
                    }
                }
            }
        }
        if !reverted {
            break;
        }
    }
}

/// Local mesh without the faces whose projections overlap the global footprint.
pub fn remove_overlap_faces<T: Real>(
    global: &GlobalMesh<T>,
    local: &TriMesh<T>,
    camera: &CameraModel<T>,
) -> (TriMesh<T>, Vec<usize>) {
    if global.is_empty() {
        return (local.clone(), (0..local.vertex_count()).collect());
    }
    let (_, footprint) = global_footprint(global, camera);
    let remove = overlapping_local_faces(local, camera, &footprint);
    let mut drop = vec![false; local.face_count()];
    for f in remove {
        drop[f] = true;
    }
    let keep: Vec<usize> = (0..local.face_count()).filter(|&f| !drop[f]).collect();
    local.submesh(&keep)
}

#[derive(Debug, Clone)]
pub struct MergeConfig<T> {
    pub threshold: T,
    /// `None` derives the CPD parameters from the local mesh's median edge length.
    pub cpd: Option<CpdConfig<T>>,
    pub stitch_ratio: T,
    pub seed: u64,
}

impl<T: Real> Default for MergeConfig<T> {
    fn default() -> Self {
        Self {
            threshold: T::lit(DEFAULT_COVERAGE_THRESHOLD),
            cpd: None,
            stitch_ratio: T::lit(DEFAULT_STITCH_RATIO),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MergeAction {
    /// The global mesh was empty and now holds the local mesh.
    Init,
    SkipDuplicate,
    /// Counts of removed local faces, added local faces, stitch faces, and faces
    /// dropped to clear double layers.
    Merged {
        removed: usize,
        added: usize,
        stitched: usize,
        dropped: usize,
    },
    /// Stitching failed; the global mesh is unchanged.
    CdtFailed(String),
}

impl fmt::Display for MergeAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergeAction::Init => write!(f, "init"),
            MergeAction::SkipDuplicate => write!(f, "skip-duplicate"),
            MergeAction::Merged { .. } => write!(f, "merged"),
            MergeAction::CdtFailed(_) => write!(f, "cdt-failed"),
        }
    }
}

/// One decision of [`merge_local`], printed as `frame_id coverage action`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeReport<T> {
    pub frame_id: usize,
    pub coverage: T,
    pub action: MergeAction,
}

impl<T: Real> fmt::Display for MergeReport<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.4} {}", self.frame_id, self.coverage.to_f64_lossy(), self.action)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Merges a local mesh (camera frame of `camera`) into `global`.
pub fn merge_local<T: Real>(
    global: &mut GlobalMesh<T>,
    frame_id: usize,
    local: &TriMesh<T>,
    camera: &CameraModel<T>,
    cfg: &MergeConfig<T>,
) -> Result<MergeReport<T>> {
    let pose = camera.pose();
    let to_world = |v: &Vec3<T>| pose.apply(*v);
    if global.is_empty() {
        global.mesh = local.with_vertices(local.vertices.iter().map(to_world).collect());
        global.provenance = vec![frame_id; local.vertex_count()];
        global.views = vec![*camera];
        return Ok(MergeReport { frame_id, coverage: T::zero(), action: MergeAction::Init });
    }
    if global.mesh.classes() != local.classes() {
        return Err(Error::DimensionMismatch("global and local class counts differ".into()));
    }
    let cov = coverage_fraction(global, local, camera)?;
    let report = |action| MergeReport { frame_id, coverage: cov.fraction, action };
    if cov.fraction >= cfg.threshold {
        return Ok(report(MergeAction::SkipDuplicate));
    }
    let edge = local.median_edge_length();
    let mut updated = global.clone();

    // (1) register the overlapped global vertices onto the overlapped local surface
    if !cov.global_faces.is_empty() && !cov.local_faces.is_empty() {
        let mut src_ids: Vec<usize> = cov.global_faces.iter().flat_map(|&f| global.mesh.faces()[f]).collect();
        src_ids.sort_unstable();
        src_ids.dedup();
        let (overlap, _) = local.submesh(&cov.local_faces);
        let overlap = overlap.with_vertices(overlap.vertices.iter().map(to_world).collect());
        let count = (4 * src_ids.len()).min(5000);
        let target = sample_surface(&overlap, count, cfg.seed ^ frame_id as u64)?.points;
        let source: Vec<Vec3<T>> = src_ids.iter().map(|&i| global.mesh.vertices[i]).collect();
        let cpd_cfg = cfg.cpd.clone().unwrap_or_else(|| CpdConfig::for_edge_length(edge));
        let reg = cpd_register(&source, &target, &cpd_cfg)?;
        let mut v = global.mesh.vertices.clone();
        for (&i, p) in src_ids.iter().zip(reg.displaced) {
            v[i] = p;
        }
        unfold(&global.mesh, &mut v, &cov.global_faces, camera);
        updated.mesh = global.mesh.with_vertices(v);
    }

    // (2) drop local faces overlapping the registered global footprint
    let (_, footprint) = global_footprint(&updated, camera);
    let removed = overlapping_local_faces(local, camera, &footprint);
    let mut drop = vec![false; local.face_count()];
    for &f in &removed {
        drop[f] = true;
    }
    let keep: Vec<usize> = (0..local.face_count()).filter(|&f| !drop[f]).collect();
    let (rest, _) = local.submesh(&keep);
    if rest.face_count() == 0 {
        *global = updated;
        return Ok(report(MergeAction::Merged { removed: removed.len(), added: 0, stitched: 0, dropped: 0 }));
    }

    // (3) stitch the gap between the two footprints
    let g_cam: Vec<Vec3<T>> = updated.mesh.vertices.iter().map(|&v| camera.world_to_camera(v)).collect();
    let g_proj = project_vertices(&g_cam, camera);
    let l_proj = project_vertices(&rest.vertices, camera);
    let local_edges: Vec<f64> = rest
        .edges()
        .iter()
        .filter_map(|&[a, b]| {
            let (p, q) = (l_proj[a]?, l_proj[b]?);
            Some(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        })
        .collect();
    let edge_2d = median(local_edges);
    let max_len = cfg.stitch_ratio.to_f64_lossy() * edge_2d;
    let near = image_rect(camera, 2.0 * edge_2d);
    let inside = |p: P2| p[0] >= near[0][0] && p[0] <= near[2][0] && p[1] >= near[0][1] && p[1] <= near[2][1];

    let n_global = updated.mesh.vertex_count();
    // stitch vertex id: global index, or n_global + local (rest) index
    let mut ids: Vec<usize> = Vec::new();
    let mut points: Vec<P2> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut constraints: Vec<[usize; 2]> = Vec::new();
    let mut add_point = |id: usize, p: P2, ids: &mut Vec<usize>, points: &mut Vec<P2>| -> usize {
        *slot.entry(id).or_insert_with(|| {
            ids.push(id);
            points.push(p);
            points.len() - 1
        })
    };
    let mut edge_list: Vec<(usize, usize, P2, P2)> = Vec::new();
    for [a, b] in updated.mesh.topology().boundary_edges() {
        if let (Some(p), Some(q)) = (g_proj[a], g_proj[b]) {
            if inside(p) && inside(q) {
                edge_list.push((a, b, p, q));
            }
        }
    }
    for [a, b] in rest.topology().boundary_edges() {
        if let (Some(p), Some(q)) = (l_proj[a], l_proj[b]) {
            edge_list.push((n_global + a, n_global + b, p, q));
        }
    }
    for &(a, b, p, q) in &edge_list {
        let i = add_point(a, p, &mut ids, &mut points);
        let j = add_point(b, q, &mut ids, &mut points);
        if points[i] != points[j] {
            constraints.push([i, j]);
        }
    }
    // greedy constraint set: drop edges that would cross accepted ones
    let mut accepted: Vec<[usize; 2]> = Vec::new();
    for &[a, b] in &constraints {
        let clash = accepted.iter().any(|&[c, d]| segments_cross(points[a], points[b], points[c], points[d]))
            || points.iter().any(|&p| on_open_segment(p, points[a], points[b]));
        if !clash {
            accepted.push([a, b]);
        }
    }
    let tri = match constrained_delaunay(&points, &accepted) {
        Ok(t) => t,
        Err(e) => return Ok(report(MergeAction::CdtFailed(e.to_string()))),
    };

    let mut occupied: Vec<[P2; 3]> = projected_faces(updated.mesh.faces(), &g_proj).into_iter().flatten().collect();
    occupied.extend(projected_faces(rest.faces(), &l_proj).into_iter().flatten());
    let occupied = TriangleIndex::new(occupied, edge_2d.max(1.0));
    let mut stitch: Vec<[usize; 3]> = Vec::new();
    for t in &tri.triangles {
        let vid = t.map(|k| ids[k]);
        let from_global = vid.iter().filter(|&&v| v < n_global).count();
        if from_global == 0 || from_global == 3 {
            continue;
        }
        let pts = t.map(|k| tri.points[k]);
        let longest = (0..3)
            .map(|k| {
                let (p, q) = (pts[k], pts[(k + 1) % 3]);
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max);
        let centroid = [(pts[0][0] + pts[1][0] + pts[2][0]) / 3.0, (pts[0][1] + pts[1][1] + pts[2][1]) / 3.0];
        if longest > max_len || occupied.contains(centroid) || occupied.overlaps(&pts, 1e-9) {
            continue;
        }
        stitch.push(vid);
    }

    // (4) assemble: stitched faces reuse 3D vertices of either mesh
    let mut vertices = updated.mesh.vertices.clone();
    vertices.extend(rest.vertices.iter().map(to_world));
    let mut faces = updated.mesh.faces().to_vec();
    faces.extend(rest.faces().iter().map(|f| f.map(|v| v + n_global)));
    let added = rest.face_count();
    let stitched = stitch.len();
    faces.extend(stitch);
    let s = local.classes();
    let mut scores = Vec::with_capacity(vertices.len() * s);
    scores.extend_from_slice(updated.mesh.semantics.as_slice());
    scores.extend_from_slice(rest.semantics.as_slice());
    let mesh = TriMesh::new(vertices, faces, s)?.with_semantics(crate::linalg::Matrix::from_vec(
        n_global + rest.vertex_count(),
        s,
        scores,
    ));
    updated.provenance.extend(std::iter::repeat_n(frame_id, rest.vertex_count()));
    updated.mesh = mesh;
    updated.views.push(*camera);
    let dropped = resolve_double_layers(&mut updated, T::lit(2.0) * edge)?;
    *global = updated;
    Ok(report(MergeAction::Merged { removed: removed.len(), added, stitched, dropped }))
}

/// Drops faces until no contributing view sees two faces within `band` at one pixel.
/// Of each conflicting pair the later-added face goes. Returns the number dropped.
fn resolve_double_layers<T: Real>(global: &mut GlobalMesh<T>, band: T) -> Result<usize> {
    let mut dropped = 0;
    loop {
        let mut drop = vec![false; global.mesh.face_count()];
        for view in &global.views {
            for layer in strict_layers(&global.mesh, view)? {
                for (i, a) in layer.iter().enumerate() {
                    for b in &layer[i + 1..] {
                        if (a.1 - b.1).abs() <= band && !drop[a.0] && !drop[b.0] {
                            drop[a.0.max(b.0)] = true;
                        }
                    }
                }
            }
        }
        let n = drop.iter().filter(|&&d| d).count();
        if n == 0 {
            return Ok(dropped);
        }
        dropped += n;
        let keep: Vec<usize> = (0..drop.len()).filter(|&f| !drop[f]).collect();
        global.retain_faces(&keep);
    }
}

/// Concatenation of posed local meshes without stitching.
pub fn stack_baseline<T: Real>(meshes: &[(usize, TriMesh<T>, CameraModel<T>)]) -> Result<GlobalMesh<T>> {
    let classes = meshes.first().map_or(crate::mesh::DEFAULT_CLASSES, |m| m.1.classes());
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut scores = Vec::new();
    let mut provenance = Vec::new();
    let mut views = Vec::new();
    for (id, m, cam) in meshes {
        views.push(*cam);
        if m.classes() != classes {
            return Err(Error::DimensionMismatch("meshes disagree on class count".into()));
        }
        let pose = cam.pose();
        let base = vertices.len();
        vertices.extend(m.vertices.iter().map(|&v| pose.apply(v)));
        faces.extend(m.faces().iter().map(|f| f.map(|v| v + base)));
        scores.extend_from_slice(m.semantics.as_slice());
        provenance.extend(std::iter::repeat_n(*id, m.vertex_count()));
    }
    let n = vertices.len();
    let mesh =
        TriMesh::new(vertices, faces, classes)?.with_semantics(crate::linalg::Matrix::from_vec(n, classes, scores));
    Ok(GlobalMesh { mesh, provenance, views })
}

/// Double-layer pixels of a global mesh seen from `camera`, with the band derived
/// from a local mesh's median edge length.
pub fn double_layers<T: Real>(global: &GlobalMesh<T>, camera: &CameraModel<T>, local_edge: T) -> Result<usize> {
    double_layer_pixels(&global.mesh, camera, T::lit(2.0) * local_edge)
}
