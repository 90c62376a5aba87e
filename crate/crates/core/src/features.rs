//! Refinement inputs: the 5-channel image stack, a deterministic feature pyramid and
//! bilinear vertex–feature association.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::linalg::Matrix;
use crate::mesh::TriMesh;
use crate::raster::Raster;
use crate::render::render_depth;
use crate::scalar::Real;
use crate::sparse::SparseDepthSet;

pub const DEFAULT_LEVEL_CHANNELS: [usize; 4] = [16, 16, 32, 32];
pub const STACK_CHANNELS: usize = 5;
/// Divisor applied to the EDT channel before feature extraction (pixels).
pub const EDT_SCALE: f64 = 16.0;

const UNREACHED: i64 = i64::MAX;

/// Squared 1D distance transform of `f` (entries `UNREACHED` carry no seed) by lower
/// envelope of parabolas. Parabola crossings are compared as exact rationals.
fn edt_1d(f: &[i64], out: &mut [i64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    // z[k] = crossing between parabola k−1 and k as (numerator, denominator > 0)
    let mut z: Vec<(i128, i128)> = Vec::with_capacity(n);
    let cross = |p: usize, q: usize| -> (i128, i128) {
        let (p_, q_) = (p as i128, q as i128);
        ((f[q] as i128 + q_ * q_) - (f[p] as i128 + p_ * p_), 2 * (q_ - p_))
    };
    // a/b <= c/d with b, d > 0
    let le = |a: (i128, i128), c: (i128, i128)| a.0 * c.1 <= c.0 * a.1;
    for q in 0..n {
        if f[q] == UNREACHED {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push((-1, 0));
                    break;
                }
                Some(&top) => {
                    let s = cross(top, q);
                    let k = v.len() - 1;
                    if k > 0 && le(s, z[k]) {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(UNREACHED);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        // advance while the next crossing lies strictly left of q
        while k + 1 < v.len() && z[k + 1].0 < q as i128 * z[k + 1].1 {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance in pixels from each pixel to the nearest seed pixel.
pub fn edt_squared(seeds: &[(usize, usize)], width: usize, height: usize) -> Result<Vec<i64>> {
    if seeds.is_empty() {
        return Err(Error::EmptyInput("distance transform needs at least one seed".into()));
    }
    let mut g = vec![UNREACHED; width * height];
    for &(x, y) in seeds {
        if x >= width || y >= height {
            return Err(Error::InvalidArgument(format!("seed ({x}, {y}) is outside the raster")));
        }
        g[y * width + x] = 0;
    }
    let mut col = vec![0; height];
    let mut res = vec![0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = g[y * width + x];
        }
        edt_1d(&col, &mut res);
        for y in 0..height {
            g[y * width + x] = res[y];
        }
    }
    let mut out = vec![0; width * height];
    for y in 0..height {
        edt_1d(&g[y * width..(y + 1) * width], &mut out[y * width..(y + 1) * width]);
    }
    Ok(out)
}

/// Euclidean distance transform of the measurement pixels, in pixels.
pub fn edt<T: Real>(sparse: &SparseDepthSet<T>, width: usize, height: usize) -> Result<Raster<T>> {
    let seeds: Vec<(usize, usize)> = sparse.records().iter().map(|r| r.pixel()).collect();
    let sq = edt_squared(&seeds, width, height)?;
    Raster::from_vec(width, height, 1, sq.into_iter().map(|d| T::lit((d as f64).sqrt())).collect())
}

/// `[R, G, B, rendered depth, EDT]`; RGB is zeroed when `with_rgb` is false.
pub fn assemble_input<T: Real>(
    rgb: &Raster<T>,
    init_mesh: &TriMesh<T>,
    sparse: &SparseDepthSet<T>,
    camera: &CameraModel<T>,
    with_rgb: bool,
) -> Result<Raster<T>> {
    let (w, h) = (camera.width, camera.height);
    if rgb.dims() != (w, h, 3) {
        return Err(Error::DimensionMismatch(format!("rgb raster is {:?}, expected ({w}, {h}, 3)", rgb.dims())));
    }
    if (sparse.width(), sparse.height()) != (w, h) {
        return Err(Error::DimensionMismatch("sparse set image size differs from the camera".into()));
    }
    let depth = render_depth(init_mesh, camera)?;
    let dist = edt(sparse, w, h)?;
    Ok(Raster::from_fn(w, h, STACK_CHANNELS, |x, y, c| match c {
        0..=2 if with_rgb => rgb.get(x, y, c),
        0..=2 => T::zero(),
        3 => depth.get(x, y, 0),
        _ => dist.get(x, y, 0),
    }))
}

/// Input stack with depth divided by `depth_scale` and EDT by [`EDT_SCALE`].
pub fn normalize_stack<T: Real>(stack: &Raster<T>, depth_scale: T) -> Raster<T> {
    let (w, h, c) = stack.dims();
    Raster::from_fn(w, h, c, |x, y, k| match k {
        3 => stack.get(x, y, k) / depth_scale,
        4 => stack.get(x, y, k) / T::lit(EDT_SCALE),
        _ => stack.get(x, y, k),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    levels: Vec<Raster<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    /// Wraps externally computed levels; each level must halve the previous one.
    pub fn from_levels(levels: Vec<Raster<T>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::EmptyInput("feature pyramid has no level".into()));
        }
        for l in &levels {
            if l.channels() == 0 || l.width() == 0 || l.height() == 0 {
                return Err(Error::InvalidArgument("empty feature level".into()));
            }
            if l.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("feature level contains non-finite values".into()));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Raster<T>] {
        &self.levels
    }

    pub fn total_channels(&self) -> usize {
        self.levels.iter().map(|l| l.channels()).sum()
    }

    pub fn scale(&self, s: T) -> Self {
        Self { levels: self.levels.iter().map(|l| l.map(|v| v * s)).collect() }
    }
}

/// Average pooling over `f×f` blocks; edge blocks average the pixels they contain.
pub fn average_pool<T: Real>(src: &Raster<T>, f: usize) -> Raster<T> {
    let (w, h, c) = src.dims();
    let (ow, oh) = (w.div_ceil(f), h.div_ceil(f));
    let mut out = Raster::zeros(ow, oh, c);
    for oy in 0..oh {
        for ox in 0..ow {
            let (x1, y1) = (((ox + 1) * f).min(w), ((oy + 1) * f).min(h));
            let count = T::from_usize_lossy((x1 - ox * f) * (y1 - oy * f));
            let px = out.pixel_mut(ox, oy);
            for y in oy * f..y1 {
                for x in ox * f..x1 {
                    for (o, &v) in px.iter_mut().zip(src.pixel(x, y)) {
                        *o += v;
                    }
                }
            }
            for o in px.iter_mut() {
                *o /= count;
            }
        }
    }
    out
}

/// 3×3 convolution with clamp-to-edge padding; `filters[o][i][ky][kx]`.
fn conv3x3<T: Real>(src: &Raster<T>, filters: &[Vec<[[T; 3]; 3]>]) -> Raster<T> {
    let (w, h, _) = src.dims();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    Raster::from_fn(w, h, filters.len(), |x, y, o| {
        let mut acc = T::zero();
        for (i, k) in filters[o].iter().enumerate() {
            for (dy, row) in k.iter().enumerate() {
                for (dx, &wgt) in row.iter().enumerate() {
                    let sx = clamp(x as isize + dx as isize - 1, w);
                    let sy = clamp(y as isize + dy as isize - 1, h);
                    acc += wgt * src.get(sx, sy, i);
                }
            }
        }
        acc
    })
}

/// Level `r` (1-based) is the stack average-pooled by `2^r` and passed through a
/// seeded 3×3 filter bank. The first `min(5, l_r)` filters copy the input channels.
pub fn toy_feature_pyramid<T: Real>(stack: &Raster<T>, channels: [usize; 4], seed: u64) -> Result<FeaturePyramid<T>> {
    if channels.contains(&0) {
        return Err(Error::InvalidArgument("channel counts must be positive".into()));
    }
    let cin = stack.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels = Vec::with_capacity(4);
    for (r, &cout) in channels.iter().enumerate() {
        let bound = (6.0 / (9.0 * (cin + cout) as f64)).sqrt();
        let filters: Vec<Vec<[[T; 3]; 3]>> = (0..cout)
            .map(|o| {
                (0..cin)
                    .map(|i| {
                        let mut k = [[T::zero(); 3]; 3];
                        if o < cin {
                            if o == i {
                                k[1][1] = T::one();
                            }
                        } else {
                            for row in &mut k {
                                for v in row.iter_mut() {
                                    *v = T::lit(rng.random_range(-bound..bound));
                                }
                            }
                        }
                        k
                    })
                    .collect()
            })
            .collect();
        levels.push(conv3x3(&average_pool(stack, 1 << (r + 1)), &filters));
    }
    FeaturePyramid::from_levels(levels)
}

/// Bilinear sample of `level` at texel coordinates `(tx, ty)` (texel centers at integers),
/// clamped to the border. Also returns the derivative with respect to `(tx, ty)`,
/// zero along a clamped axis.
fn bilinear<T: Real>(level: &Raster<T>, tx: T, ty: T, out: &mut [T], dx: &mut [T], dy: &mut [T]) {
    let (w, h) = (level.width(), level.height());
    let axis = |t: T, n: usize| -> (usize, usize, T, bool) {
        let hi = T::from_usize_lossy(n - 1);
        if !(t > T::zero()) {
            return (0, 0, T::zero(), true);
        }
        if !(t < hi) {
            return (n - 1, n - 1, T::zero(), true);
        }
        let i0 = t.floor();
        let i = i0.to_usize().unwrap_or(0);
        (i, (i + 1).min(n - 1), t - i0, false)
    };
    let (x0, x1, fx, cx) = axis(tx, w);
    let (y0, y1, fy, cy) = axis(ty, h);
    let one = T::one();
    let (a, b, c, d) = (level.pixel(x0, y0), level.pixel(x1, y0), level.pixel(x0, y1), level.pixel(x1, y1));
    for k in 0..out.len() {
        let top = a[k] + (b[k] - a[k]) * fx;
        let bot = c[k] + (d[k] - c[k]) * fx;
        out[k] = top + (bot - top) * fy;
        dx[k] = if cx { T::zero() } else { (b[k] - a[k]) * (one - fy) + (d[k] - c[k]) * fy };
        dy[k] = if cy { T::zero() } else { bot - top };
    }
}

/// Per-vertex features and, for each vertex, the derivative of its feature row with
/// respect to the vertex position (`n × width` blocks of 3-vectors, row-major).
#[derive(Debug, Clone)]
pub struct Association<T> {
    pub features: Matrix<T>,
    /// Vertices whose projection fell outside `[0, 1]²` and were clamped.
    pub clamped: usize,
    jacobian: Option<Vec<Vec3<T>>>,
}

impl<T: Real> Association<T> {
    /// `∂L/∂V` given `∂L/∂features`.
    pub fn pull_back(&self, grad: &Matrix<T>) -> Vec<Vec3<T>> {
        let jac = self.jacobian.as_ref().expect("association computed without jacobian");
        let (n, k) = self.features.shape();
        (0..n)
            .map(|v| {
                let mut g = [T::zero(); 3];
                for c in 0..k {
                    g = geom::add(g, geom::scale(jac[v * k + c], grad[(v, c)]));
                }
                g
            })
            .collect()
    }
}

fn associate_impl<T: Real>(
    mesh: &TriMesh<T>,
    levels: &[Raster<T>],
    camera: &CameraModel<T>,
    with_jacobian: bool,
) -> Association<T> {
    let n = mesh.vertex_count();
    let width: usize = levels.iter().map(|l| l.channels()).sum();
    let mut features = Matrix::zeros(n, width);
    let mut jacobian = with_jacobian.then(|| vec![[T::zero(); 3]; n * width]);
    let mut clamped = 0;
    let (fw, fh) = (T::from_usize_lossy(camera.width), T::from_usize_lossy(camera.height));
    let tol = T::lit(1e-9);
    let half = T::lit(0.5);
    let maxc = levels.iter().map(|l| l.channels()).max().unwrap_or(0);
    let (mut dx, mut dy) = (vec![T::zero(); maxc], vec![T::zero(); maxc]);
    for v in 0..n {
        let pc = camera.world_to_camera(mesh.vertices[v]);
        let px = camera.project(pc);
        let uv = [px[0] / fw, px[1] / fh];
        if uv.iter().any(|&u| !(u >= -tol && u <= T::one() + tol)) {
            clamped += 1;
        }
        // ∂uv/∂x_cam
        let iz = T::one() / pc[2];
        let du = [camera.fx * iz / fw, T::zero(), -camera.fx * pc[0] * iz * iz / fw];
        let dv = [T::zero(), camera.fy * iz / fh, -camera.fy * pc[1] * iz * iz / fh];
        let mut col = 0;
        for level in levels {
            let k = level.channels();
            let (lw, lh) = (T::from_usize_lossy(level.width()), T::from_usize_lossy(level.height()));
            let row = &mut features.row_mut(v)[col..col + k];
            bilinear(level, uv[0] * lw - half, uv[1] * lh - half, row, &mut dx[..k], &mut dy[..k]);
            if let Some(jac) = jacobian.as_mut() {
                for c in 0..k {
                    let g_cam = geom::add(geom::scale(du, dx[c] * lw), geom::scale(dv, dy[c] * lh));
                    jac[v * width + col + c] = geom::mat_t_vec(&camera.rotation, g_cam);
                }
            }
            col += k;
        }
    }
    Association { features, clamped, jacobian }
}

/// Concatenated per-level bilinear features at each vertex projection.
pub fn associate<T: Real>(mesh: &TriMesh<T>, pyramid: &FeaturePyramid<T>, camera: &CameraModel<T>) -> Association<T> {
    associate_impl(mesh, &pyramid.levels, camera, false)
}

pub fn associate_with_jacobian<T: Real>(
    mesh: &TriMesh<T>,
    pyramid: &FeaturePyramid<T>,
    camera: &CameraModel<T>,
) -> Association<T> {
    associate_impl(mesh, &pyramid.levels, camera, true)
}

/// Samples a single full-resolution raster (e.g. segmentation scores) at the vertices.
pub fn associate_raster<T: Real>(
    mesh: &TriMesh<T>,
    raster: &Raster<T>,
    camera: &CameraModel<T>,
    with_jacobian: bool,
) -> Association<T> {
    associate_impl(mesh, std::slice::from_ref(raster), camera, with_jacobian)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::make_grid_mesh;
    use crate::sparse::SparseDepth;

    fn brute(seeds: &[(usize, usize)], w: usize, h: usize) -> Vec<i64> {
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as i64, (i / w) as i64);
                seeds.iter().map(|&(a, b)| (x - a as i64).pow(2) + (y - b as i64).pow(2)).min().unwrap()
            })
            .collect()
    }

    #[test]
    fn edt_small_cases() {
        let d = edt_squared(&[(0, 0)], 3, 3).unwrap();
        assert_eq!(d, vec![0, 1, 4, 1, 2, 5, 4, 5, 8]);
        let all: Vec<_> = (0..4).flat_map(|y| (0..5).map(move |x| (x, y))).collect();
        assert!(edt_squared(&all, 5, 4).unwrap().iter().all(|&v| v == 0));
        assert!(edt_squared(&[], 3, 3).is_err());
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
            let k = rng.random_range(1..12);
            let seeds: Vec<_> = (0..k).map(|_| (rng.random_range(0..w), rng.random_range(0..h))).collect();
            assert_eq!(edt_squared(&seeds, w, h).unwrap(), brute(&seeds, w, h));
        }
    }

    #[test]
    fn edt_raster_from_sparse_set() {
        let s = SparseDepthSet::new(vec![SparseDepth { u: 0.5, v: 0.5, depth: 3.0 }], 3, 3).unwrap();
        let r: Raster<f64> = edt(&s, 3, 3).unwrap();
        assert_eq!(r.get(1, 1, 0), 2f64.sqrt());
        assert_eq!(r.get(2, 2, 0), 2.0 * 2f64.sqrt());
    }

    #[test]
    fn pooling_shapes_and_constants() {
        let stack = Raster::filled(512, 512, 5, 0.25);
        let p = toy_feature_pyramid(&stack, DEFAULT_LEVEL_CHANNELS, 1).unwrap();
        let dims: Vec<_> = p.levels().iter().map(|l| (l.width(), l.channels())).collect();
        assert_eq!(dims, vec![(256, 16), (128, 16), (64, 32), (32, 32)]);
        for l in p.levels() {
            for c in 0..l.channels() {
                let v0 = l.get(0, 0, c);
                assert!(l.channel(c).as_slice().iter().all(|&v| v == v0));
            }
        }
        assert_eq!(p, toy_feature_pyramid(&stack, DEFAULT_LEVEL_CHANNELS, 1).unwrap());
        let odd = average_pool(&Raster::from_fn(5, 3, 1, |x, _, _| x as f64), 2);
        assert_eq!((odd.width(), odd.height()), (3, 2));
        assert_eq!(odd.get(2, 1, 0), 4.0);
    }

    #[test]
    fn bilinear_texel_center_and_midpoint() {
        let level = Raster::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let (mut o, mut dx, mut dy) = ([0.0], [0.0], [0.0]);
        bilinear(&level, 0.0, 0.0, &mut o, &mut dx, &mut dy);
        assert_eq!(o[0], 1.0);
        bilinear(&level, 0.5, 0.5, &mut o, &mut dx, &mut dy);
        assert_eq!(o[0], 11.0 / 4.0);
        bilinear(&level, 1.0, 1.0, &mut o, &mut dx, &mut dy);
        assert_eq!(o[0], 5.0);
    }

    #[test]
    fn association_of_constant_map_and_linearity() {
        let cam = CameraModel::<f64>::centered(32, 32, 30.0);
        let mesh = make_grid_mesh(5, &cam).unwrap();
        let stack = Raster::from_fn(32, 32, 5, |x, y, c| (x * 3 + y + c) as f64 * 0.1);
        let p = toy_feature_pyramid(&stack, [4, 4, 6, 6], 2).unwrap();
        let a = associate(&mesh, &p, &cam);
        assert_eq!(a.features.shape(), (25, 20));
        assert_eq!(a.clamped, 0);
        let b = associate(&mesh, &p.scale(2.0), &cam);
        for (x, y) in a.features.as_slice().iter().zip(b.features.as_slice()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        let flat = Raster::filled(8, 8, 3, 0.7);
        let c = associate_raster(&mesh, &flat, &cam, false);
        assert!(c.features.as_slice().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn association_jacobian_matches_finite_differences() {
        let cam = CameraModel::<f64>::centered(16, 16, 16.0);
        let mesh = make_grid_mesh(3, &cam).unwrap();
        let mesh = mesh.with_vertices(
            mesh.vertices
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    geom::scale(geom::add(*v, [0.013 * i as f64, -0.007 * i as f64, 0.0]), 4.0 + i as f64 * 0.1)
                })
                .collect(),
        );
        let level = Raster::from_fn(8, 8, 2, |x, y, c| ((x * x + 3 * y + c * 5) % 7) as f64);
        let a = associate_raster(&mesh, &level, &cam, true);
        let g = Matrix::from_fn(9, 2, |v, c| (v as f64 - 4.0) * 0.3 + c as f64);
        let analytic = a.pull_back(&g);
        let eps = 1e-7;
        for v in [0usize, 4, 7] {
            for k in 0..3 {
                let shift = |s: f64| {
                    let mut verts = mesh.vertices.clone();
                    verts[v][k] += s;
                    let f = associate_raster(&mesh.with_vertices(verts), &level, &cam, false).features;
                    f.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum::<f64>()
                };
                let fd = (shift(eps) - shift(-eps)) / (2.0 * eps);
                assert!((fd - analytic[v][k]).abs() < 1e-5, "v{v} k{k}: {fd} vs {}", analytic[v][k]);
            }
        }
    }
}
