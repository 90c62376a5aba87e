//! Depth, Chamfer, regularization and semantic losses, their analytic gradients, and
//! evaluation metrics.
//!
//! Gradients hold visibility (pixel-to-face assignment), surface-sample provenance and
//! Chamfer nearest-neighbour choices fixed at the evaluation point.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::linalg::Matrix;
use crate::mesh::{normalized_laplacian, sample_surface, SurfaceSamples, TriMesh, DEFAULT_SAMPLE_COUNT};
use crate::raster::{DepthRaster, SemanticRaster};
use crate::render::{depth_to_pseudo_mesh, pixel_hit, rasterize, FaceBuffer};
use crate::scalar::Real;
use crate::spatial::KdTree;

/// Per-class weights for [ground, vegetation, building, road].
pub const DEFAULT_CLASS_WEIGHTS: [f64; 4] = [1.0, 2.0, 3.0, 3.0];
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub w2: T,
    pub w3: T,
    pub wv: T,
    pub we: T,
    pub ws: T,
    pub wc: T,
}

impl<T: Real> LossWeights<T> {
    pub fn new(w: [T; 6]) -> Result<Self> {
        if w.iter().any(|x| !x.is_finite() || *x < T::zero()) {
            return Err(Error::InvalidArgument("loss weights must be finite and >= 0".into()));
        }
        Ok(Self { w2: w[0], w3: w[1], wv: w[2], we: w[3], ws: w[4], wc: w[5] })
    }

    pub fn geometric() -> Self {
        Self::new([3.0, 1.0, 0.5, 0.01, 0.0, 0.0].map(T::lit)).expect("valid preset")
    }

    pub fn metric_semantic() -> Self {
        Self::new([5.0, 1.0, 0.5, 0.01, 5.0, 0.5].map(T::lit)).expect("valid preset")
    }

    pub fn zero() -> Self {
        Self::new([T::zero(); 6]).expect("valid preset")
    }

    pub fn as_array(&self) -> [T; 6] {
        [self.w2, self.w3, self.wv, self.we, self.ws, self.wc]
    }

    pub fn uses_semantics(&self) -> bool {
        self.ws > T::zero() || self.wc > T::zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemanticVariant {
    Dice,
    CrossEntropy,
    Focal,
    Jaccard,
}

impl std::str::FromStr for SemanticVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(Self::Dice),
            "ce" => Ok(Self::CrossEntropy),
            "focal" => Ok(Self::Focal),
            "jaccard" => Ok(Self::Jaccard),
            other => Err(Error::InvalidArgument(format!("unknown semantic loss '{other}'"))),
        }
    }
}

/// Everything about a loss evaluation except the mesh and the weights.
#[derive(Debug, Clone)]
pub struct LossConfig<T> {
    pub weights: LossWeights<T>,
    pub samples: usize,
    pub variant: SemanticVariant,
    /// `None` aggregates all classes into a single score.
    pub class_weights: Option<Vec<T>>,
}

impl<T: Real> LossConfig<T> {
    pub fn new(weights: LossWeights<T>) -> Self {
        Self {
            weights,
            samples: DEFAULT_SAMPLE_COUNT,
            variant: SemanticVariant::Dice,
            class_weights: Some(DEFAULT_CLASS_WEIGHTS.map(T::lit).to_vec()),
        }
    }
}

/// Ground truth of one frame plus its precomputed surface cloud.
#[derive(Debug, Clone)]
pub struct FrameTarget<T> {
    pub camera: CameraModel<T>,
    pub depth: DepthRaster<T>,
    pub semantics: Option<SemanticRaster<T>>,
    cloud: KdTree<T>,
}

impl<T: Real> FrameTarget<T> {
    /// Samples `samples` points on the stride-1 pseudo ground-truth mesh of `depth`.
    pub fn new(
        camera: CameraModel<T>,
        depth: DepthRaster<T>,
        semantics: Option<SemanticRaster<T>>,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if depth.dims() != (camera.width, camera.height, 1) {
            return Err(Error::DimensionMismatch("depth raster does not match the camera".into()));
        }
        if let Some(s) = &semantics {
            if (s.width(), s.height()) != (camera.width, camera.height) {
                return Err(Error::DimensionMismatch("semantic raster does not match the camera".into()));
            }
            if !s.is_one_hot() {
                return Err(Error::Validation("ground-truth semantics are not one-hot".into()));
            }
        }
        let pseudo = depth_to_pseudo_mesh(&depth, &camera, 1, 1)?;
        let cloud = KdTree::new(sample_surface(&pseudo, samples, seed)?.points);
        Ok(Self { camera, depth, semantics, cloud })
    }

    pub fn cloud(&self) -> &[Vec3<T>] {
        self.cloud.points()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<T> {
    pub l2: T,
    pub l3: T,
    pub lv: T,
    pub le: T,
    pub ls: Option<T>,
    pub lc: Option<T>,
    pub total: T,
    pub valid_pixels: usize,
    pub mesh_samples: usize,
    pub truth_samples: usize,
}

impl<T: Real> LossReport<T> {
    pub fn to_kv(&self) -> String {
        let opt = |x: Option<T>| x.map_or("nan".to_string(), |v| format!("{v}"));
        let mut s = String::new();
        let _ = writeln!(s, "l2 {}", self.l2);
        let _ = writeln!(s, "l3 {}", self.l3);
        let _ = writeln!(s, "lv {}", self.lv);
        let _ = writeln!(s, "le {}", self.le);
        let _ = writeln!(s, "ls {}", opt(self.ls));
        let _ = writeln!(s, "lc {}", opt(self.lc));
        let _ = writeln!(s, "total {}", self.total);
        let _ = writeln!(s, "valid_pixels {}", self.valid_pixels);
        let _ = writeln!(s, "mesh_samples {}", self.mesh_samples);
        let _ = writeln!(s, "truth_samples {}", self.truth_samples);
        s
    }
}

/// `∂total/∂V` and `∂total/∂C`.
#[derive(Debug, Clone)]
pub struct LossGradient<T> {
    pub vertices: Vec<Vec3<T>>,
    pub semantics: Matrix<T>,
}

// ---------------------------------------------------------------- depth

pub fn loss_l2<T: Real>(rendered: &DepthRaster<T>, truth: &DepthRaster<T>) -> Result<T> {
    if !rendered.same_size(truth) {
        return Err(Error::DimensionMismatch("rasters differ in size".into()));
    }
    let (sum, n) = (0..truth.pixel_count())
        .filter(|&i| rendered.is_valid_depth(i) && truth.is_valid_depth(i))
        .fold((T::zero(), 0usize), |(s, n), i| (s + (rendered.at(i) - truth.at(i)).abs(), n + 1));
    if n == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(sum / T::from_usize_lossy(n))
}

// ---------------------------------------------------------------- chamfer

/// Nearest neighbour in `tree` of every point, computed in parallel, in input order.
fn nearest_all<T: Real>(tree: &KdTree<T>, points: &[Vec3<T>]) -> Vec<(usize, T)> {
    points.par_iter().map(|&p| tree.nearest(p).expect("non-empty tree")).collect()
}

fn mean<T: Real>(it: impl Iterator<Item = T>, n: usize) -> T {
    it.fold(T::zero(), |a, b| a + b) / T::from_usize_lossy(n)
}

/// `d(P, Q)`: mean over `P` of the squared distance to the nearest point of `Q`.
pub fn chamfer_directed<T: Real>(p: &[Vec3<T>], q: &[Vec3<T>]) -> Result<T> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyInput("chamfer of an empty point set".into()));
    }
    let tree = KdTree::new(q.to_vec());
    Ok(mean(nearest_all(&tree, p).into_iter().map(|x| x.1), p.len()))
}

/// `½ d(P, Q) + ½ d(Q, P)` with squared distances.
pub fn chamfer<T: Real>(p: &[Vec3<T>], q: &[Vec3<T>]) -> Result<T> {
    let half = T::lit(0.5);
    Ok(half * chamfer_directed(p, q)? + half * chamfer_directed(q, p)?)
}

pub fn loss_l3<T: Real>(
    mesh: &TriMesh<T>,
    truth_depth: &DepthRaster<T>,
    camera: &CameraModel<T>,
    samples: usize,
    seed: u64,
) -> Result<T> {
    let pseudo = depth_to_pseudo_mesh(truth_depth, camera, 1, 1)?;
    let q = sample_surface(&pseudo, samples, seed.wrapping_add(1))?.points;
    let p = sample_surface(mesh, samples, seed)?.points;
    chamfer(&p, &q)
}

// ---------------------------------------------------------------- regularizers

/// `(1/n) Σ_rows ‖row‖₂` and the matching subgradient rows (zero rows give zero).
fn l21<T: Real>(x: &Matrix<T>) -> (T, Matrix<T>) {
    let n = T::from_usize_lossy(x.rows().max(1));
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut total = T::zero();
    for i in 0..x.rows() {
        let r = x.row(i);
        let norm = r.iter().map(|&v| v * v).sum::<T>().sqrt();
        total += norm;
        if norm > T::zero() {
            for (o, &v) in g.row_mut(i).iter_mut().zip(r) {
                *o = v / norm / n;
            }
        }
    }
    (total / n, g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularizers<T> {
    pub lv: T,
    pub le: T,
    pub lc: T,
}

pub fn loss_regularizers<T: Real>(mesh: &TriMesh<T>) -> Result<Regularizers<T>> {
    let lap = normalized_laplacian(mesh)?;
    Ok(Regularizers {
        lv: l21(&lap.apply(&mesh.vertex_matrix())).0,
        le: edge_loss(mesh).0,
        lc: l21(&lap.apply(&mesh.semantics)).0,
    })
}

fn edge_loss<T: Real>(mesh: &TriMesh<T>) -> (T, Vec<Vec3<T>>) {
    let edges = mesh.edges();
    let mut g = vec![[T::zero(); 3]; mesh.vertex_count()];
    if edges.is_empty() {
        return (T::zero(), g);
    }
    let m = T::from_usize_lossy(edges.len());
    let mut total = T::zero();
    for &[a, b] in edges {
        let d = geom::sub(mesh.vertices[a], mesh.vertices[b]);
        let len = geom::norm(d);
        total += len;
        if len > T::zero() {
            let u = geom::scale(d, T::one() / (len * m));
            g[a] = geom::add(g[a], u);
            g[b] = geom::sub(g[b], u);
        }
    }
    (total / m, g)
}

// ---------------------------------------------------------------- semantics

fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - mx).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax<T: Real>(z: &[T]) -> Vec<T> {
    let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
    z.iter().map(|&v| v - lse).collect()
}

/// Semantic loss over `rows` pixels of `s` classes (row-major) and its gradient with
/// respect to the raw scores.
fn semantic_loss_grad<T: Real>(
    scores: &[T],
    truth: &[T],
    s: usize,
    variant: SemanticVariant,
    class_weights: Option<&[T]>,
) -> (T, Vec<T>) {
    let rows = scores.len() / s;
    let sig: Vec<T> = scores.chunks(s).flat_map(softmax).collect();
    // h = (∂L/∂σ) ⊙ σ, turned into ∂L/∂z by the softmax backward pass below
    let mut h = vec![T::zero(); scores.len()];
    let two = T::lit(2.0);
    let value = match variant {
        SemanticVariant::Dice | SemanticVariant::Jaccard => {
            let groups: Vec<(Vec<usize>, T)> = match class_weights {
                None => vec![((0..s).collect(), T::one())],
                Some(w) => {
                    let total: T = w.iter().copied().sum();
                    (0..s).map(|c| (vec![c], w[c] / total)).collect()
                }
            };
            let mut value = T::zero();
            for (classes, wc) in groups {
                let (mut i_, mut a, mut b) = (T::zero(), T::zero(), T::zero());
                for p in 0..rows {
                    for &c in &classes {
                        let k = p * s + c;
                        i_ += sig[k] * truth[k];
                        a += sig[k];
                        b += truth[k];
                    }
                }
                if variant == SemanticVariant::Dice {
                    let den = a + b;
                    value += wc * (-two * i_ / den);
                    for p in 0..rows {
                        for &c in &classes {
                            let k = p * s + c;
                            let g = wc * (-two * truth[k] / den + two * i_ / (den * den));
                            h[k] = g * sig[k];
                        }
                    }
                } else {
                    let u = a + b - i_;
                    value += wc * (-i_ / u);
                    for p in 0..rows {
                        for &c in &classes {
                            let k = p * s + c;
                            let g = -wc * (truth[k] * u - i_ * (T::one() - truth[k])) / (u * u);
                            h[k] = g * sig[k];
                        }
                    }
                }
            }
            value
        }
        SemanticVariant::CrossEntropy | SemanticVariant::Focal => {
            let omega: Vec<T> = truth
                .chunks(s)
                .map(|t| match class_weights {
                    None => T::one(),
                    Some(w) => t.iter().zip(w).map(|(&a, &b)| a * b).sum(),
                })
                .collect();
            let total: T = omega.iter().copied().sum();
            let mut value = T::zero();
            for p in 0..rows {
                let ls = log_softmax(&scores[p * s..(p + 1) * s]);
                let scale = omega[p] / total;
                for c in 0..s {
                    let k = p * s + c;
                    let t = truth[k];
                    if t == T::zero() {
                        continue;
                    }
                    if variant == SemanticVariant::CrossEntropy {
                        value += -scale * t * ls[c];
                        h[k] = -scale * t;
                    } else {
                        let one_m = T::one() - sig[k];
                        value += -scale * t * one_m * ls[c];
                        h[k] = scale * t * (sig[k] * ls[c] - one_m);
                    }
                }
            }
            value
        }
    };
    let mut grad = vec![T::zero(); scores.len()];
    for p in 0..rows {
        let r = p * s..(p + 1) * s;
        let hs: T = h[r.clone()].iter().copied().sum();
        for k in r {
            grad[k] = h[k] - sig[k] * hs;
        }
    }
    (value, grad)
}

fn check_semantic_pair<T: Real>(rendered: &SemanticRaster<T>, truth: &SemanticRaster<T>) -> Result<()> {
    if rendered.dims() != truth.dims() {
        return Err(Error::DimensionMismatch("semantic rasters differ in shape".into()));
    }
    if !truth.is_one_hot() {
        return Err(Error::Validation("ground-truth semantics are not one-hot".into()));
    }
    Ok(())
}

/// Semantic loss of rendered scores against one-hot truth over every pixel.
pub fn loss_semantic<T: Real>(
    rendered: &SemanticRaster<T>,
    truth: &SemanticRaster<T>,
    variant: SemanticVariant,
    class_weights: Option<&[T]>,
) -> Result<T> {
    check_semantic_pair(rendered, truth)?;
    if let Some(w) = class_weights {
        if w.len() != truth.channels() {
            return Err(Error::DimensionMismatch("class weight count".into()));
        }
    }
    Ok(semantic_loss_grad(rendered.as_slice(), truth.as_slice(), truth.channels(), variant, class_weights).0)
}

/// Per-pixel cross entropy and focal terms; used to compare them pointwise.
pub fn pixel_ce_focal<T: Real>(scores: &[T], truth: &[T]) -> (T, T) {
    let ls = log_softmax(scores);
    let (mut ce, mut fl) = (T::zero(), T::zero());
    for c in 0..scores.len() {
        ce += -truth[c] * ls[c];
        fl += -truth[c] * (T::one() - ls[c].exp()) * ls[c];
    }
    (ce, fl)
}

// ---------------------------------------------------------------- total

struct Evaluation<T> {
    report: LossReport<T>,
    grad: Option<LossGradient<T>>,
}

fn common_pixels<T: Real>(buf: &FaceBuffer<T>, truth: &DepthRaster<T>) -> Vec<usize> {
    (0..truth.pixel_count()).filter(|&i| buf.covered(i) && truth.is_valid_depth(i)).collect()
}

/// Source of the mesh-side Chamfer samples.
#[derive(Debug, Clone, Copy)]
pub enum Sampling<'a, T> {
    /// Fresh area-proportional samples drawn with this seed.
    Seed(u64),
    /// Fixed (face, barycentric) provenance; the loss is then continuous in the vertices.
    Fixed(&'a SurfaceSamples<T>),
}

impl<T: Real> Sampling<'_, T> {
    fn draw(&self, mesh: &TriMesh<T>, count: usize) -> Result<SurfaceSamples<T>> {
        match self {
            Sampling::Seed(seed) => sample_surface(mesh, count, *seed),
            Sampling::Fixed(prov) => {
                if prov.faces.iter().any(|&f| f >= mesh.face_count()) {
                    return Err(Error::DimensionMismatch("sample provenance refers to a missing face".into()));
                }
                Ok(prov.relocated(mesh))
            }
        }
    }
}

fn evaluate<T: Real>(
    mesh: &TriMesh<T>,
    target: &FrameTarget<T>,
    cfg: &LossConfig<T>,
    sampling: Sampling<'_, T>,
    want_grad: bool,
) -> Result<Evaluation<T>> {
    let w = &cfg.weights;
    let cam = &target.camera;
    let n = mesh.vertex_count();
    let s = mesh.classes();
    let mut gv = vec![[T::zero(); 3]; n];
    let mut gc = Matrix::zeros(n, s);
    let back = |g: Vec3<T>| geom::mat_t_vec(&cam.rotation, g);

    let buf = rasterize(mesh, cam)?;
    let common = common_pixels(&buf, &target.depth);
    if common.is_empty() {
        return Err(Error::NoOverlap);
    }
    let np = T::from_usize_lossy(common.len());

    // depth
    let mut l2 = T::zero();
    for &i in &common {
        let r = buf.depth[i] - target.depth.at(i);
        l2 += r.abs();
        if want_grad && w.w2 > T::zero() && r != T::zero() {
            let hit = pixel_hit(mesh, cam, &buf, i).expect("covered pixel");
            let coef = w.w2 * r.signum() / np;
            for (k, d) in hit.d_depth().into_iter().enumerate() {
                let v = mesh.faces()[buf.face[i]][k];
                gv[v] = geom::add(gv[v], geom::scale(back(d), coef));
            }
        }
    }
    l2 /= np;

    // chamfer
    let samples = sampling.draw(mesh, cfg.samples)?;
    let q = target.cloud();
    let p_tree = KdTree::new(samples.points.clone());
    let pq = nearest_all(&target.cloud, &samples.points);
    let qp = nearest_all(&p_tree, q);
    let half = T::lit(0.5);
    let (npt, nqt) = (T::from_usize_lossy(samples.points.len()), T::from_usize_lossy(q.len()));
    let l3 = half * mean(pq.iter().map(|x| x.1), pq.len()) + half * mean(qp.iter().map(|x| x.1), qp.len());
    if want_grad && w.w3 > T::zero() {
        let mut gp = vec![[T::zero(); 3]; samples.points.len()];
        for (i, &(j, _)) in pq.iter().enumerate() {
            let d = geom::sub(samples.points[i], q[j]);
            gp[i] = geom::add(gp[i], geom::scale(d, w.w3 / npt));
        }
        for (j, &(i, _)) in qp.iter().enumerate() {
            let d = geom::sub(samples.points[i], q[j]);
            gp[i] = geom::add(gp[i], geom::scale(d, w.w3 / nqt));
        }
        for (i, g) in gp.iter().enumerate() {
            let face = mesh.faces()[samples.faces[i]];
            for k in 0..3 {
                gv[face[k]] = geom::add(gv[face[k]], geom::scale(*g, samples.weights[i][k]));
            }
        }
    }

    // regularizers
    let lap = normalized_laplacian(mesh)?;
    let (lv, glv) = l21(&lap.apply(&mesh.vertex_matrix()));
    let (le, gle) = edge_loss(mesh);
    if want_grad {
        let glv = lap.apply_t(&glv);
        for (v, g) in gv.iter_mut().enumerate() {
            for c in 0..3 {
                g[c] += w.wv * glv[(v, c)] + w.we * gle[v][c];
            }
        }
    }

    let mut ls = None;
    let mut lc = None;
    if let (true, Some(truth)) = (w.uses_semantics(), &target.semantics) {
        if truth.channels() != s {
            return Err(Error::DimensionMismatch("class count of mesh and truth differ".into()));
        }
        let hits: Vec<_> = common.iter().map(|&i| pixel_hit(mesh, cam, &buf, i).expect("covered pixel")).collect();
        let mut scores = vec![T::zero(); common.len() * s];
        let mut truth_rows = vec![T::zero(); common.len() * s];
        for (r, (&i, hit)) in common.iter().zip(&hits).enumerate() {
            let face = mesh.faces()[buf.face[i]];
            for k in 0..3 {
                for c in 0..s {
                    scores[r * s + c] += hit.weights[k] * mesh.semantics[(face[k], c)];
                }
            }
            truth_rows[r * s..(r + 1) * s].copy_from_slice(&truth.as_slice()[i * s..(i + 1) * s]);
        }
        let (value, gz) = semantic_loss_grad(&scores, &truth_rows, s, cfg.variant, cfg.class_weights.as_deref());
        ls = Some(value);
        let (lcv, glc) = l21(&lap.apply(&mesh.semantics));
        lc = Some(lcv);
        if want_grad {
            let mut glc = lap.apply_t(&glc);
            glc.scale(w.wc);
            gc.add_assign(&glc);
            if w.ws > T::zero() {
                for (r, (&i, hit)) in common.iter().zip(&hits).enumerate() {
                    let face = mesh.faces()[buf.face[i]];
                    let g = &gz[r * s..(r + 1) * s];
                    let dw = hit.d_weights();
                    for k in 0..3 {
                        let mut gk = T::zero();
                        for c in 0..s {
                            gc[(face[k], c)] += w.ws * hit.weights[k] * g[c];
                            gk += g[c] * mesh.semantics[(face[k], c)];
                        }
                        for j in 0..3 {
                            let d = back(dw[k][j]);
                            gv[face[j]] = geom::add(gv[face[j]], geom::scale(d, w.ws * gk));
                        }
                    }
                }
            }
        }
    }

    let total = w.w2 * l2
        + w.w3 * l3
        + w.wv * lv
        + w.we * le
        + ls.map_or(T::zero(), |v| w.ws * v)
        + lc.map_or(T::zero(), |v| w.wc * v);
    Ok(Evaluation {
        report: LossReport {
            l2,
            l3,
            lv,
            le,
            ls,
            lc,
            total,
            valid_pixels: common.len(),
            mesh_samples: samples.points.len(),
            truth_samples: q.len(),
        },
        grad: want_grad.then_some(LossGradient { vertices: gv, semantics: gc }),
    })
}

pub fn total_loss<T: Real>(
    mesh: &TriMesh<T>,
    target: &FrameTarget<T>,
    cfg: &LossConfig<T>,
    seed: u64,
) -> Result<LossReport<T>> {
    total_loss_with(mesh, target, cfg, Sampling::Seed(seed))
}

pub fn grad_total<T: Real>(
    mesh: &TriMesh<T>,
    target: &FrameTarget<T>,
    cfg: &LossConfig<T>,
    seed: u64,
) -> Result<(LossReport<T>, LossGradient<T>)> {
    grad_total_with(mesh, target, cfg, Sampling::Seed(seed))
}

pub fn total_loss_with<T: Real>(
    mesh: &TriMesh<T>,
    target: &FrameTarget<T>,
    cfg: &LossConfig<T>,
    sampling: Sampling<'_, T>,
) -> Result<LossReport<T>> {
    Ok(evaluate(mesh, target, cfg, sampling, false)?.report)
}

pub fn grad_total_with<T: Real>(
    mesh: &TriMesh<T>,
    target: &FrameTarget<T>,
    cfg: &LossConfig<T>,
    sampling: Sampling<'_, T>,
) -> Result<(LossReport<T>, LossGradient<T>)> {
    let e = evaluate(mesh, target, cfg, sampling, true)?;
    Ok((e.report, e.grad.expect("gradient requested")))
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics<T> {
    pub abs_diff: T,
    pub rmse: T,
    pub abs_rel: T,
    pub sq_rel: T,
    pub chamfer: T,
    pub accuracy: T,
    pub completeness: T,
    pub precision: T,
    pub recall: T,
    pub fscore: T,
    /// Per-class IoU; NaN for classes absent from both prediction and truth.
    pub iou: Vec<T>,
    pub coverage: T,
}

impl<T: Real> EvalMetrics<T> {
    pub fn mean_iou(&self) -> T {
        let present: Vec<T> = self.iou.iter().copied().filter(|v| !v.is_nan()).collect();
        if present.is_empty() {
            return T::nan();
        }
        mean(present.iter().copied(), present.len())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("abs_diff", self.abs_diff),
            ("rmse", self.rmse),
            ("abs_rel", self.abs_rel),
            ("sq_rel", self.sq_rel),
            ("chamfer", self.chamfer),
            ("accuracy", self.accuracy),
            ("completeness", self.completeness),
            ("precision", self.precision),
            ("recall", self.recall),
            ("fscore", self.fscore),
            ("coverage", self.coverage),
        ] {
            let _ = writeln!(s, "{k} {v:?}");
        }
        for (c, v) in self.iou.iter().enumerate() {
            let _ = writeln!(s, "iou_{c} {v:?}");
        }
        let _ = writeln!(s, "miou {:?}", self.mean_iou());
        s
    }
}

/// Fraction of distances strictly below `threshold`.
pub fn within_fraction<T: Real>(distances: &[T], threshold: T) -> T {
    let hits = distances.iter().filter(|&&d| d < threshold).count();
    T::from_usize_lossy(hits) / T::from_usize_lossy(distances.len().max(1))
}

pub fn fscore<T: Real>(precision: T, recall: T) -> T {
    if precision + recall > T::zero() {
        T::lit(2.0) * precision * recall / (precision + recall)
    } else {
        T::zero()
    }
}

/// Accuracy, completeness, precision, recall between a predicted and a truth cloud
/// (Euclidean distances), plus the squared Chamfer loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudMetrics<T> {
    pub chamfer: T,
    pub accuracy: T,
    pub completeness: T,
    pub precision: T,
    pub recall: T,
}

pub fn cloud_metrics<T: Real>(pred: &[Vec3<T>], truth: &[Vec3<T>], threshold: T) -> Result<CloudMetrics<T>> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::EmptyInput("metric of an empty point set".into()));
    }
    let pt = KdTree::new(pred.to_vec());
    let tt = KdTree::new(truth.to_vec());
    let a: Vec<T> = nearest_all(&tt, pred).into_iter().map(|x| x.1).collect();
    let b: Vec<T> = nearest_all(&pt, truth).into_iter().map(|x| x.1).collect();
    let half = T::lit(0.5);
    let ad: Vec<T> = a.iter().map(|v| v.sqrt()).collect();
    let bd: Vec<T> = b.iter().map(|v| v.sqrt()).collect();
    Ok(CloudMetrics {
        chamfer: half * mean(a.iter().copied(), a.len()) + half * mean(b.iter().copied(), b.len()),
        accuracy: mean(ad.iter().copied(), ad.len()),
        completeness: mean(bd.iter().copied(), bd.len()),
        precision: within_fraction(&ad, threshold),
        recall: within_fraction(&bd, threshold),
    })
}

pub fn eval_metrics<T: Real>(
    mesh: &TriMesh<T>,
    target: &FrameTarget<T>,
    threshold: T,
    samples: usize,
    seed: u64,
) -> Result<EvalMetrics<T>> {
    let cam = &target.camera;
    let buf = rasterize(mesh, cam)?;
    let common = common_pixels(&buf, &target.depth);
    if common.is_empty() {
        return Err(Error::NoOverlap);
    }
    let n = common.len();
    let (mut ad, mut sq, mut ar, mut sr) = (T::zero(), T::zero(), T::zero(), T::zero());
    for &i in &common {
        let t = target.depth.at(i);
        let e = buf.depth[i] - t;
        ad += e.abs();
        sq += e * e;
        ar += e.abs() / t;
        sr += e * e / t;
    }
    let nn = T::from_usize_lossy(n);
    let cloud = cloud_metrics(&sample_surface(mesh, samples, seed)?.points, target.cloud(), threshold)?;
    let s = mesh.classes();
    let iou = match &target.semantics {
        Some(truth) if truth.channels() == s => {
            let scores = crate::render::semantics_from_buffer(mesh, cam, &buf);
            let (mut inter, mut union) = (vec![0usize; s], vec![0usize; s]);
            for &i in &common {
                let (x, y) = (i % cam.width, i / cam.width);
                let (p, t) = (scores.argmax(x, y), truth.argmax(x, y));
                if p == t {
                    inter[p] += 1;
                    union[p] += 1;
                } else {
                    union[p] += 1;
                    union[t] += 1;
                }
            }
            (0..s)
                .map(|c| {
                    if union[c] == 0 {
                        T::nan()
                    } else {
                        T::from_usize_lossy(inter[c]) / T::from_usize_lossy(union[c])
                    }
                })
                .collect()
        }
        _ => Vec::new(),
    };
    Ok(EvalMetrics {
        abs_diff: ad / nn,
        rmse: (sq / nn).sqrt(),
        abs_rel: ar / nn,
        sq_rel: sr / nn,
        chamfer: cloud.chamfer,
        accuracy: cloud.accuracy,
        completeness: cloud.completeness,
        precision: cloud.precision,
        recall: cloud.recall,
        fscore: fscore(cloud.precision, cloud.recall),
        iou,
        coverage: T::from_usize_lossy(buf.covered_count()) / T::from_usize_lossy(cam.pixel_count()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::make_grid_mesh;
    use crate::raster::{one_hot, Raster};

    #[test]
    fn l2_closed_forms() {
        let a = Raster::filled(4, 2, 1, 2.0);
        assert_eq!(loss_l2(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_l2(&a, &a.map(|v| v + 0.5)).unwrap(), 0.5);
        let half = Raster::from_fn(4, 2, 1, |x, _, _| if x < 2 { 3.0 } else { 2.0 });
        assert_eq!(loss_l2(&a, &half).unwrap(), 0.5);
        assert!(matches!(loss_l2(&a, &Raster::zeros(4, 2, 1)), Err(Error::NoOverlap)));
    }

    #[test]
    fn chamfer_closed_forms() {
        assert_eq!(chamfer(&[[0.0, 0.0, 0.0]], &[[0.0, 0.0, 1.0]]).unwrap(), 1.0);
        let p = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 0.5]];
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        let q = vec![[0.0, 0.0, 0.0]];
        let pq = chamfer_directed(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], &q).unwrap();
        let qp = chamfer_directed(&q, &[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!((pq, qp), (2.0, 0.0));
        assert!(chamfer::<f64>(&[], &q).is_err());
    }

    #[test]
    fn regularizers_basic() {
        let m = TriMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.75f64.sqrt(), 0.0]], vec![[0, 1, 2]], 4)
            .unwrap();
        let r = loss_regularizers(&m).unwrap();
        assert!((r.le - 1.0).abs() < 1e-12);
        assert_eq!(r.lc, 0.0);
        let moved = m.with_vertices(m.vertices.iter().map(|v| geom::add(*v, [3.0, -1.0, 2.0])).collect());
        let r2 = loss_regularizers(&moved).unwrap();
        assert!((r.lv - r2.lv).abs() < 1e-12 && (r.le - r2.le).abs() < 1e-12);
    }

    #[test]
    fn edge_gradient_single_edge() {
        let m =
            TriMesh::<f64>::new(vec![[0.0, 0.0, 0.0], [3.0, 4.0, 0.0], [0.0, 0.0, 1.0]], vec![[0, 1, 2]], 1).unwrap();
        let (_, g) = edge_loss(&m);
        // edge (0,1) contributes ±(v0−v1)/5/3
        let e01 = [-0.6 / 3.0, -0.8 / 3.0, 0.0];
        let e02 = [0.0, 0.0, -1.0 / 3.0];
        for c in 0..3 {
            assert!((g[0][c] - (e01[c] + e02[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn semantic_closed_forms() {
        let truth: Raster<f64> = one_hot(3, 2, 4, &[0, 1, 2, 3, 0, 1]);
        let uniform = Raster::zeros(3, 2, 4);
        let d = loss_semantic(&uniform, &truth, SemanticVariant::Dice, None).unwrap();
        assert!((d + 0.25).abs() < 1e-12);
        let perfect = truth.map(|v| v * 50.0);
        assert!((loss_semantic(&perfect, &truth, SemanticVariant::Dice, None).unwrap() + 1.0).abs() < 1e-9);
        assert!((loss_semantic(&perfect, &truth, SemanticVariant::Jaccard, None).unwrap() + 1.0).abs() < 1e-9);
        assert!(loss_semantic(&perfect, &truth, SemanticVariant::CrossEntropy, None).unwrap() < 1e-9);
        let w = DEFAULT_CLASS_WEIGHTS;
        let wd = loss_semantic(&perfect, &truth, SemanticVariant::Dice, Some(&w)).unwrap();
        assert!((wd + 1.0).abs() < 1e-9);
    }

    #[test]
    fn dice_jaccard_identity() {
        let truth: Raster<f64> = one_hot(4, 3, 4, &[0, 1, 2, 3, 0, 1, 2, 3, 3, 3, 1, 0]);
        let scores = Raster::from_fn(4, 3, 4, |x, y, c| ((x * 7 + y * 3 + c * 5) % 11) as f64 * 0.3 - 1.0);
        let d = loss_semantic(&scores, &truth, SemanticVariant::Dice, None).unwrap().abs();
        let j = loss_semantic(&scores, &truth, SemanticVariant::Jaccard, None).unwrap().abs();
        assert!((j - d / (2.0 - d)).abs() < 1e-9);
    }

    #[test]
    fn semantic_gradients_match_finite_differences() {
        let truth: Vec<f64> = one_hot::<f64>(5, 1, 3, &[0, 2, 1, 1, 0]).into_vec();
        let scores: Vec<f64> = (0..15).map(|i| ((i * 37) % 13) as f64 * 0.2 - 1.1).collect();
        let cw = [1.0, 2.0, 3.0];
        for variant in
            [SemanticVariant::Dice, SemanticVariant::Jaccard, SemanticVariant::CrossEntropy, SemanticVariant::Focal]
        {
            for weights in [None, Some(&cw[..])] {
                let (_, g) = semantic_loss_grad(&scores, &truth, 3, variant, weights);
                for k in 0..15 {
                    let eps = 1e-6;
                    let mut a = scores.clone();
                    a[k] += eps;
                    let mut b = scores.clone();
                    b[k] -= eps;
                    let fd = (semantic_loss_grad(&a, &truth, 3, variant, weights).0
                        - semantic_loss_grad(&b, &truth, 3, variant, weights).0)
                        / (2.0 * eps);
                    assert!((fd - g[k]).abs() < 1e-7, "{variant:?} {k}: {fd} vs {}", g[k]);
                }
            }
        }
    }

    #[test]
    fn focal_never_exceeds_cross_entropy() {
        for i in 0..50 {
            let z: Vec<f64> = (0..4).map(|c| ((i * 13 + c * 7) % 17) as f64 * 0.4 - 3.0).collect();
            let mut t = vec![0.0; 4];
            t[i % 4] = 1.0;
            let (ce, fl) = pixel_ce_focal(&z, &t);
            assert!(fl <= ce && fl >= 0.0);
        }
    }

    #[test]
    fn total_loss_respects_weights() {
        let cam = CameraModel::<f64>::centered(12, 12, 12.0);
        let depth = Raster::filled(12, 12, 1, 5.0);
        let sem = one_hot(12, 12, 4, &vec![1; 144]);
        let target = FrameTarget::new(cam, depth, Some(sem), 500, 1).unwrap();
        let m = make_grid_mesh(4, &cam).unwrap();
        let m = m.with_vertices(m.vertices.iter().map(|v| geom::scale(*v, 4.0)).collect());
        let mut cfg = LossConfig::new(LossWeights::zero());
        cfg.samples = 500;
        assert_eq!(total_loss(&m, &target, &cfg, 3).unwrap().total, 0.0);
        cfg.weights = LossWeights::geometric();
        let r = total_loss(&m, &target, &cfg, 3).unwrap();
        assert!(r.ls.is_none() && r.lc.is_none());
        assert!((r.l2 - 1.0).abs() < 1e-9);
        cfg.weights = LossWeights::metric_semantic();
        let r = total_loss(&m, &target, &cfg, 3).unwrap();
        assert!(r.ls.is_some() && r.lc.is_some());
        let w = cfg.weights;
        let sum = w.w2 * r.l2 + w.w3 * r.l3 + w.wv * r.lv + w.we * r.le + w.ws * r.ls.unwrap() + w.wc * r.lc.unwrap();
        assert!((r.total - sum).abs() < 1e-12);
        assert!(r.to_kv().contains("total "));
    }

    #[test]
    fn cloud_metric_closed_forms() {
        let p: Vec<Vec3<f64>> = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let q: Vec<Vec3<f64>> = vec![[0.0, 0.0, 0.3], [5.0, 0.0, 0.0]];
        let m = cloud_metrics(&p, &q, 0.5).unwrap();
        assert!((m.precision - 0.5).abs() < 1e-12);
        assert!((m.recall - 0.5).abs() < 1e-12);
        assert!((m.accuracy - (0.3 + 1.0f64.hypot(0.3)) / 2.0).abs() < 1e-12);
        assert!((fscore(m.precision, m.recall) - 0.5).abs() < 1e-12);
        assert_eq!(fscore(0.0, 0.0), 0.0);
    }
}
