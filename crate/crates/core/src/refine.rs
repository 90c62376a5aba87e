//! Graph-convolutional residual refinement of vertex positions and semantic scores.
//!
//! A head maps per-vertex image features `F` and per-vertex context `K` (normalized
//! coordinates, plus scores for the semantic head) to a residual:
//!
//! ```text
//! h0 = ReLU(F W1)
//! hi = ReLU(Â [h(i-1); K] Wn + [h(i-1); K] Ws + b)      i = 1..3
//! Δ  = [h3; K] W2
//! ```
//!
//! with `Â = D̂^{-1/2}(A + I)D̂^{-1/2}`. Features are rows and weights multiply on the
//! right. Vertex coordinates enter the network divided by a fixed depth scale and
//! residuals leave it multiplied by a fixed step scale. Refinement runs in the camera
//! frame of the keyframe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::features::{
    assemble_input, associate_raster, associate_with_jacobian, normalize_stack, toy_feature_pyramid, Association,
    FeaturePyramid, DEFAULT_LEVEL_CHANNELS,
};
use crate::geom::{self, Vec3};
use crate::linalg::Matrix;
use crate::losses::{
    grad_total_with, total_loss, total_loss_with, FrameTarget, LossConfig, LossReport, LossWeights, Sampling,
};
use crate::mesh::{sample_surface, SurfaceSamples, Topology, TriMesh};
use crate::raster::{DepthRaster, Raster, SemanticRaster};
use crate::scalar::Real;
use crate::sparse::SparseDepthSet;

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_DEPTH_SCALE: f64 = 100.0;
pub const DEFAULT_STEP_SCALE: f64 = 1.0;
pub const CONV_LAYERS: usize = 3;

/// `Â` in compressed rows.
#[derive(Debug, Clone)]
pub struct GraphOperator<T> {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Real> GraphOperator<T> {
    pub fn new(topo: &Topology) -> Self {
        let n = topo.vertex_count();
        let inv_sqrt: Vec<T> = (0..n).map(|v| T::one() / T::from_usize_lossy(topo.degree(v) + 1).sqrt()).collect();
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for v in 0..n {
            cols.push(v);
            vals.push(inv_sqrt[v] * inv_sqrt[v]);
            for &u in topo.neighbors(v) {
                cols.push(u);
                vals.push(inv_sqrt[v] * inv_sqrt[u]);
            }
            offsets.push(cols.len());
        }
        Self { offsets, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `Â X`; `Â` is symmetric so this is also the transpose product.
    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let k = x.cols();
        let mut out = Matrix::zeros(self.dim(), k);
        for i in 0..self.dim() {
            let o = out.row_mut(i);
            for e in self.offsets[i]..self.offsets[i + 1] {
                let (j, a) = (self.cols[e], self.vals[e]);
                for (oc, &xc) in o.iter_mut().zip(x.row(j)) {
                    *oc += a * xc;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.dim(), self.dim());
        for i in 0..self.dim() {
            for e in self.offsets[i]..self.offsets[i + 1] {
                m[(i, self.cols[e])] = self.vals[e];
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wn: Matrix<T>,
    pub ws: Matrix<T>,
    /// `1 × out`
    pub b: Matrix<T>,
}

impl<T: Real> LayerParams<T> {
    fn zeros(din: usize, dout: usize) -> Self {
        Self { wn: Matrix::zeros(din, dout), ws: Matrix::zeros(din, dout), b: Matrix::zeros(1, dout) }
    }
}

fn relu<T: Real>(z: &Matrix<T>) -> Matrix<T> {
    z.map(|v| v.max(T::zero()))
}

fn pre_activation<T: Real>(x: &Matrix<T>, adj: &GraphOperator<T>, p: &LayerParams<T>) -> Result<Matrix<T>> {
    if x.cols() != p.wn.rows() || x.rows() != adj.dim() {
        return Err(Error::DimensionMismatch(format!(
            "layer expects {}×{} input, got {}×{}",
            adj.dim(),
            p.wn.rows(),
            x.rows(),
            x.cols()
        )));
    }
    let mut z = adj.apply(x).matmul(&p.wn);
    z.add_assign(&x.matmul(&p.ws));
    for i in 0..z.rows() {
        for (v, &b) in z.row_mut(i).iter_mut().zip(p.b.row(0)) {
            *v += b;
        }
    }
    Ok(z)
}

/// `ReLU(Â X Wn + X Ws + b)` over the mesh graph.
pub fn gcn_layer<T: Real>(x: &Matrix<T>, mesh: &TriMesh<T>, params: &LayerParams<T>) -> Result<Matrix<T>> {
    Ok(relu(&pre_activation(x, &GraphOperator::new(mesh.topology()), params)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub w1: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub w2: Matrix<T>,
}

impl<T: Real> Head<T> {
    pub fn zeros(features: usize, hidden: usize, context: usize, out: usize) -> Self {
        Self {
            w1: Matrix::zeros(features, hidden),
            layers: (0..CONV_LAYERS).map(|_| LayerParams::zeros(hidden + context, hidden)).collect(),
            w2: Matrix::zeros(hidden + context, out),
        }
    }

    /// Glorot-uniform weights, zero biases and a zero output projection.
    pub fn glorot(features: usize, hidden: usize, context: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut h = Self::zeros(features, hidden, context, out);
        let mut fill = |m: &mut Matrix<T>| {
            let bound = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
            for v in m.as_mut_slice() {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        };
        fill(&mut h.w1);
        for l in &mut h.layers {
            fill(&mut l.wn);
            fill(&mut l.ws);
        }
        h
    }

    pub fn feature_width(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn context_width(&self) -> usize {
        self.w2.rows() - self.hidden()
    }

    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut t = vec![("w1".to_string(), &self.w1)];
        for (i, l) in self.layers.iter().enumerate() {
            t.push((format!("conv{}.wn", i + 1), &l.wn));
            t.push((format!("conv{}.ws", i + 1), &l.ws));
            t.push((format!("conv{}.b", i + 1), &l.b));
        }
        t.push(("w2".to_string(), &self.w2));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut t = vec![&mut self.w1];
        for l in &mut self.layers {
            t.push(&mut l.wn);
            t.push(&mut l.ws);
            t.push(&mut l.b);
        }
        t.push(&mut self.w2);
        t
    }

    fn check(&self) -> Result<()> {
        let (h, k) = (self.hidden(), self.context_width());
        let ok = self.w2.rows() >= h
            && self
                .layers
                .iter()
                .all(|l| l.wn.shape() == (h + k, h) && l.ws.shape() == (h + k, h) && l.b.shape() == (1, h));
        if !ok {
            return Err(Error::DimensionMismatch("head tensors do not chain".into()));
        }
        Ok(())
    }

    fn forward(&self, f: &Matrix<T>, ctx: &Matrix<T>, adj: &GraphOperator<T>) -> Result<HeadCache<T>> {
        if f.cols() != self.feature_width() {
            return Err(Error::DimensionMismatch(format!(
                "head expects {} feature columns, got {}",
                self.feature_width(),
                f.cols()
            )));
        }
        if ctx.cols() != self.context_width() || ctx.rows() != f.rows() {
            return Err(Error::DimensionMismatch("context width".into()));
        }
        let z0 = f.matmul(&self.w1);
        let mut h = relu(&z0);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let x = h.hcat(ctx);
            let z = pre_activation(&x, adj, l)?;
            h = relu(&z);
            inputs.push(x);
            pre.push(z);
        }
        let last = h.hcat(ctx);
        let out = last.matmul(&self.w2);
        Ok(HeadCache { z0, inputs, pre, last, out })
    }

    /// Accumulates parameter gradients into `grad` and returns `(∂/∂F, ∂/∂ctx)`.
    fn backward(
        &self,
        f: &Matrix<T>,
        cache: &HeadCache<T>,
        d_out: &Matrix<T>,
        adj: &GraphOperator<T>,
        grad: &mut Head<T>,
    ) -> (Matrix<T>, Matrix<T>) {
        let h = self.hidden();
        let k = self.context_width();
        grad.w2.add_assign(&cache.last.t_matmul(d_out));
        let d_last = d_out.matmul_t(&self.w2);
        let mut dh = d_last.columns(0, h);
        let mut d_ctx = d_last.columns(h, h + k);
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let x = &cache.inputs[i];
            let mut dz = dh;
            for (d, &z) in dz.as_mut_slice().iter_mut().zip(cache.pre[i].as_slice()) {
                if z <= T::zero() {
                    *d = T::zero();
                }
            }
            let g = &mut grad.layers[i];
            g.wn.add_assign(&adj.apply(x).t_matmul(&dz));
            g.ws.add_assign(&x.t_matmul(&dz));
            for r in 0..dz.rows() {
                for (b, &d) in g.b.row_mut(0).iter_mut().zip(dz.row(r)) {
                    *b += d;
                }
            }
            let mut dx = adj.apply(&dz.matmul_t(&l.wn));
            dx.add_assign(&dz.matmul_t(&l.ws));
            dh = dx.columns(0, h);
            d_ctx.add_assign(&dx.columns(h, h + k));
        }
        for (d, &z) in dh.as_mut_slice().iter_mut().zip(cache.z0.as_slice()) {
            if z <= T::zero() {
                *d = T::zero();
            }
        }
        grad.w1.add_assign(&f.t_matmul(&dh));
        (dh.matmul_t(&self.w1), d_ctx)
    }
}

struct HeadCache<T> {
    z0: Matrix<T>,
    inputs: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
    last: Matrix<T>,
    out: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageWeights<T> {
    pub geometric: Head<T>,
    pub semantic: Option<Head<T>>,
}

/// Fixed affine standardization of head inputs: `(x - shift) / scale` per column.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm<T> {
    pub feature_shift: Matrix<T>,
    pub feature_scale: Matrix<T>,
    pub vertex_shift: Matrix<T>,
    pub vertex_scale: Matrix<T>,
}

impl<T: Real> InputNorm<T> {
    /// Features unchanged; vertex coordinates divided by `depth_scale`.
    pub fn identity(features: usize, depth_scale: T) -> Self {
        Self {
            feature_shift: Matrix::zeros(1, features),
            feature_scale: Matrix::from_fn(1, features, |_, _| T::one()),
            vertex_shift: Matrix::zeros(1, 3),
            vertex_scale: Matrix::from_fn(1, 3, |_, _| depth_scale),
        }
    }

    /// Mean and standard deviation of the associated features and vertices of the
    /// initial meshes; near-constant columns keep unit scale.
    pub fn fit(frames: &[&FrameInputs<T>]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::EmptyInput("no frame to fit".into()))?;
        let c = first.pyramid.total_channels();
        let mut feats = Vec::with_capacity(frames.len());
        for f in frames {
            let a = crate::features::associate(&f.init, &f.pyramid, &f.camera).features;
            if a.cols() != c {
                return Err(Error::DimensionMismatch("frames disagree on feature width".into()));
            }
            feats.push((a, f.init.vertex_matrix()));
        }
        #[allow(clippy::type_complexity)]
        let stats = |pick: &dyn Fn(&(Matrix<T>, Matrix<T>)) -> &Matrix<T>, cols: usize| {
            let n = T::from_usize_lossy(feats.iter().map(|x| pick(x).rows()).sum());
            let mut mean = Matrix::zeros(1, cols);
            let mut sq: Matrix<T> = Matrix::zeros(1, cols);
            for x in &feats {
                let m = pick(x);
                for r in 0..m.rows() {
                    for (j, &v) in m.row(r).iter().enumerate() {
                        mean.as_mut_slice()[j] += v / n;
                    }
                }
            }
            for x in &feats {
                let m = pick(x);
                for r in 0..m.rows() {
                    for (j, &v) in m.row(r).iter().enumerate() {
                        let d = v - mean.as_slice()[j];
                        sq.as_mut_slice()[j] += d * d / n;
                    }
                }
            }
            let floor = T::lit(1e-6) * (T::one() + mean.max_abs());
            let scale = sq.map(|v: T| if v.sqrt() > floor { v.sqrt() } else { T::one() });
            (mean, scale)
        };
        let (feature_shift, feature_scale) = stats(&|x| &x.0, c);
        let (vertex_shift, vertex_scale) = stats(&|x| &x.1, 3);
        Ok(Self { feature_shift, feature_scale, vertex_shift, vertex_scale })
    }

    fn features(&self, f: &Matrix<T>) -> Matrix<T> {
        let (s, k) = (self.feature_shift.as_slice(), self.feature_scale.as_slice());
        Matrix::from_fn(f.rows(), f.cols(), |i, j| (f[(i, j)] - s[j]) / k[j])
    }

    fn vertices(&self, v: &[Vec3<T>]) -> Matrix<T> {
        let (s, k) = (self.vertex_shift.as_slice(), self.vertex_scale.as_slice());
        Matrix::from_fn(v.len(), 3, |i, c| (v[i][c] - s[c]) / k[c])
    }

    fn tensors(&self) -> [(&'static str, &Matrix<T>); 4] {
        [
            ("norm.feature_shift", &self.feature_shift),
            ("norm.feature_scale", &self.feature_scale),
            ("norm.vertex_shift", &self.vertex_shift),
            ("norm.vertex_scale", &self.vertex_scale),
        ]
    }

    fn check(&self, features: usize) -> Result<()> {
        let shapes_ok = self.feature_shift.shape() == (1, features)
            && self.feature_scale.shape() == (1, features)
            && self.vertex_shift.shape() == (1, 3)
            && self.vertex_scale.shape() == (1, 3);
        if !shapes_ok {
            return Err(Error::DimensionMismatch("input normalization does not match the heads".into()));
        }
        if !self.feature_scale.as_slice().iter().chain(self.vertex_scale.as_slice()).all(|&v| v > T::zero()) {
            return Err(Error::Validation("normalization scales must be positive".into()));
        }
        Ok(())
    }
}

/// All refinement parameters; the semantic head, when present, lives in the last stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnWeights<T> {
    /// Not trained; fitted to the training frames before optimization.
    pub norm: InputNorm<T>,
    pub stages: Vec<StageWeights<T>>,
}

impl<T: Real> GcnWeights<T> {
    fn build(
        features: usize,
        classes: usize,
        cfg: &RefineConfig<T>,
        mut head: impl FnMut(usize, usize) -> Head<T>,
    ) -> Self {
        let stages = (0..cfg.stages)
            .map(|k| StageWeights {
                geometric: head(3, 3),
                semantic: (cfg.semantic && cfg.stages >= 2 && k + 1 == cfg.stages).then(|| head(3 + classes, classes)),
            })
            .collect();
        Self { norm: InputNorm::identity(features, cfg.depth_scale), stages }
    }

    pub fn zeros(features: usize, classes: usize, cfg: &RefineConfig<T>) -> Self {
        Self::build(features, classes, cfg, |ctx, out| Head::zeros(features, cfg.hidden, ctx, out))
    }

    pub fn glorot(features: usize, classes: usize, cfg: &RefineConfig<T>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::build(features, classes, cfg, |ctx, out| Head::glorot(features, cfg.hidden, ctx, out, &mut rng))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for m in z.tensors_mut() {
            m.as_mut_slice().fill(T::zero());
        }
        z
    }

    pub fn feature_width(&self) -> usize {
        self.stages[0].geometric.feature_width()
    }

    pub fn has_semantic_head(&self) -> bool {
        self.stages.iter().any(|s| s.semantic.is_some())
    }

    /// Every stored tensor, normalization first, in serialization order.
    pub fn serialized_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out: Vec<(String, &Matrix<T>)> =
            self.norm.tensors().into_iter().map(|(n, m)| (n.to_string(), m)).collect();
        out.extend(self.named_tensors());
        out
    }

    /// Trainable tensors with their names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        for (k, s) in self.stages.iter().enumerate() {
            for (name, m) in s.geometric.tensors() {
                out.push((format!("stage{}.geo.{name}", k + 1), m));
            }
            if let Some(h) = &s.semantic {
                for (name, m) in h.tensors() {
                    out.push((format!("stage{}.sem.{name}", k + 1), m));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.extend(s.geometric.tensors_mut());
            if let Some(h) = &mut s.semantic {
                out.extend(h.tensors_mut());
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }

    /// Rebuilds weights from named tensors as produced by [`Self::serialized_tensors`].
    pub fn from_named(tensors: Vec<(String, Matrix<T>)>) -> Result<Self> {
        let mut stages: Vec<StageWeights<T>> = Vec::new();
        let mut it = tensors.into_iter().peekable();
        let bad = |name: &str| Error::Validation(format!("unexpected tensor '{name}'"));
        let mut norm_part = |name: &str| -> Result<Matrix<T>> {
            match it.next() {
                Some((n, m)) if n == name => Ok(m),
                Some((n, _)) => Err(bad(&n)),
                None => Err(Error::Validation(format!("missing tensor {name}"))),
            }
        };
        let norm = InputNorm {
            feature_shift: norm_part("norm.feature_shift")?,
            feature_scale: norm_part("norm.feature_scale")?,
            vertex_shift: norm_part("norm.vertex_shift")?,
            vertex_scale: norm_part("norm.vertex_scale")?,
        };
        while let Some((name, _)) = it.peek() {
            let mut parts = name.splitn(3, '.');
            let stage = parts
                .next()
                .and_then(|s| s.strip_prefix("stage"))
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| bad(name))?;
            let kind = parts.next().ok_or_else(|| bad(name))?.to_string();
            let prefix = format!("stage{stage}.{kind}.");
            let mut take = |suffix: &str| -> Result<Matrix<T>> {
                match it.next() {
                    Some((n, m)) if n == format!("{prefix}{suffix}") => Ok(m),
                    Some((n, _)) => Err(bad(&n)),
                    None => Err(Error::Validation(format!("missing tensor {prefix}{suffix}"))),
                }
            };
            let w1 = take("w1")?;
            let mut layers = Vec::new();
            for i in 1..=CONV_LAYERS {
                layers.push(LayerParams {
                    wn: take(&format!("conv{i}.wn"))?,
                    ws: take(&format!("conv{i}.ws"))?,
                    b: take(&format!("conv{i}.b"))?,
                });
            }
            let head = Head { w1, layers, w2: take("w2")? };
            head.check()?;
            match kind.as_str() {
                "geo" if stage == stages.len() + 1 => stages.push(StageWeights { geometric: head, semantic: None }),
                "sem" if stage == stages.len() && stages[stage - 1].semantic.is_none() => {
                    stages[stage - 1].semantic = Some(head)
                }
                _ => return Err(Error::Validation(format!("unexpected head {prefix}"))),
            }
        }
        if stages.is_empty() {
            return Err(Error::Validation("weights contain no stage".into()));
        }
        let fw = stages[0].geometric.feature_width();
        let consistent = stages.iter().all(|s| {
            s.geometric.feature_width() == fw
                && s.geometric.context_width() == 3
                && s.semantic.as_ref().is_none_or(|h| h.feature_width() == fw)
        });
        if !consistent {
            return Err(Error::DimensionMismatch("stages disagree on feature width".into()));
        }
        norm.check(fw)?;
        Ok(Self { norm, stages })
    }

    pub fn axpy(&mut self, a: T, other: &Self) {
        for (m, o) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            for (x, &y) in m.as_mut_slice().iter_mut().zip(o.1.as_slice()) {
                *x += a * y;
            }
        }
    }

    pub fn dot(&self, other: &Self) -> T {
        self.named_tensors()
            .iter()
            .zip(other.named_tensors())
            .map(|((_, a), (_, b))| a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| x * y).sum::<T>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.is_finite())
    }
}

/// Update rule of [`train_toy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Gradient,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Self::Gradient),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::InvalidConfig(format!("unknown optimizer '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineConfig<T> {
    pub stages: usize,
    pub optimizer: Optimizer,
    pub hidden: usize,
    pub learning_rate: T,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig<T>,
    pub semantic: bool,
    /// Meters per unit of normalized depth and context coordinate.
    pub depth_scale: T,
    /// Meters per unit of geometric head output.
    pub step_scale: T,
    pub level_channels: [usize; 4],
    /// Keep RGB in the input stack; `false` zeroes it.
    pub with_rgb: bool,
}

impl<T: Real> Default for RefineConfig<T> {
    fn default() -> Self {
        Self {
            stages: 2,
            optimizer: Optimizer::Adam,
            hidden: DEFAULT_HIDDEN,
            learning_rate: T::lit(1e-2),
            epochs: 100,
            seed: 0,
            loss: LossConfig::new(LossWeights::geometric()),
            semantic: false,
            depth_scale: T::lit(DEFAULT_DEPTH_SCALE),
            step_scale: T::lit(DEFAULT_STEP_SCALE),
            level_channels: DEFAULT_LEVEL_CHANNELS,
            with_rgb: true,
        }
    }
}

impl<T: Real> RefineConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("stages and hidden width must be >= 1".into()));
        }
        if !(self.learning_rate > T::zero()) || !(self.depth_scale > T::zero()) || !(self.step_scale > T::zero()) {
            return Err(Error::InvalidConfig("learning rate and scales must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        self.level_channels.iter().sum()
    }
}

/// Refinement inputs of one keyframe, in its camera frame.
#[derive(Debug, Clone)]
pub struct FrameInputs<T> {
    pub camera: CameraModel<T>,
    pub init: TriMesh<T>,
    pub pyramid: FeaturePyramid<T>,
    /// Segmentation scores with one channel per class.
    pub seg: Option<Raster<T>>,
}

impl<T: Real> FrameInputs<T> {
    /// Builds the input stack and toy pyramid of a keyframe.
    pub fn prepare(
        init: TriMesh<T>,
        rgb: &Raster<T>,
        sparse: &SparseDepthSet<T>,
        seg: Option<Raster<T>>,
        camera: &CameraModel<T>,
        cfg: &RefineConfig<T>,
    ) -> Result<Self> {
        let local = camera.local();
        let init = init.with_vertices(init.vertices.iter().map(|&v| camera.world_to_camera(v)).collect());
        let stack = normalize_stack(&assemble_input(rgb, &init, sparse, &local, cfg.with_rgb)?, cfg.depth_scale);
        let pyramid = toy_feature_pyramid(&stack, cfg.level_channels, cfg.seed)?;
        Self::with_pyramid(init, pyramid, seg, local)
    }

    /// Uses externally supplied feature levels; `init` is in the frame of `camera`.
    pub fn with_pyramid(
        init: TriMesh<T>,
        pyramid: FeaturePyramid<T>,
        seg: Option<Raster<T>>,
        camera: CameraModel<T>,
    ) -> Result<Self> {
        if let Some(s) = &seg {
            if s.channels() != init.classes() {
                return Err(Error::DimensionMismatch(format!(
                    "segmentation has {} channels, mesh has {} classes",
                    s.channels(),
                    init.classes()
                )));
            }
        }
        Ok(Self { camera, init, pyramid, seg })
    }
}

struct StageCache<T> {
    assoc: Association<T>,
    /// Normalized features.
    feats: Matrix<T>,
    geo: HeadCache<T>,
}

struct SemCache<T> {
    assoc: Association<T>,
    head: HeadCache<T>,
    features: Matrix<T>,
}

struct Forward<T> {
    /// Segmentation association that directly sets the scores when no semantic head runs.
    passthrough: Option<Association<T>>,
    mesh: TriMesh<T>,
    stages: Vec<StageCache<T>>,
    sem: Option<SemCache<T>>,
}

fn forward<T: Real>(
    frame: &FrameInputs<T>,
    weights: &GcnWeights<T>,
    adj: &GraphOperator<T>,
    step_scale: T,
    want_jacobian: bool,
) -> Result<Forward<T>> {
    let cam = &frame.camera;
    let mut mesh = frame.init.clone();
    let mut stages = Vec::with_capacity(weights.stages.len());
    let mut sem = None;
    let mut passthrough = None;
    for (k, sw) in weights.stages.iter().enumerate() {
        let assoc = if want_jacobian && k > 0 {
            associate_with_jacobian(&mesh, &frame.pyramid, cam)
        } else {
            crate::features::associate(&mesh, &frame.pyramid, cam)
        };
        let feats = weights.norm.features(&assoc.features);
        let ctx = weights.norm.vertices(&mesh.vertices);
        let geo = sw.geometric.forward(&feats, &ctx, adj)?;
        let step = step_scale;
        let moved: Vec<Vec3<T>> = mesh
            .vertices
            .iter()
            .enumerate()
            .map(|(i, &v)| geom::add(v, [geo.out[(i, 0)] * step, geo.out[(i, 1)] * step, geo.out[(i, 2)] * step]))
            .collect();
        mesh = mesh.with_vertices(moved);
        if let Some(head) = &sw.semantic {
            let seg = frame
                .seg
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("semantic refinement needs segmentation scores".into()))?;
            let init_scores = associate_raster(&mesh, seg, cam, want_jacobian);
            let ctx = weights.norm.vertices(&mesh.vertices).hcat(&init_scores.features);
            let hc = head.forward(&feats, &ctx, adj)?;
            let mut c = init_scores.features.clone();
            c.add_assign(&hc.out);
            mesh = mesh.with_semantics(c);
            sem = Some(SemCache { assoc: init_scores, head: hc, features: feats.clone() });
        } else if k + 1 == weights.stages.len() {
            if let Some(seg) = &frame.seg {
                // no semantic head: scores are the associated segmentation
                let init_scores = associate_raster(&mesh, seg, cam, want_jacobian);
                mesh = mesh.with_semantics(init_scores.features.clone());
                passthrough = Some(init_scores);
            }
        }
        stages.push(StageCache { assoc, feats, geo });
    }
    Ok(Forward { passthrough, mesh, stages, sem })
}

/// Parameter gradient given `∂L/∂V` and `∂L/∂C` of the refined mesh.
fn backward<T: Real>(
    weights: &GcnWeights<T>,
    fw: &Forward<T>,
    adj: &GraphOperator<T>,
    step_scale: T,
    grad_v: &[Vec3<T>],
    grad_c: &Matrix<T>,
) -> GcnWeights<T> {
    let mut g = weights.zeros_like();
    let n = grad_v.len();
    let vscale = weights.norm.vertex_scale.as_slice();
    let fscale = weights.norm.feature_scale.as_slice();
    let mut gv: Vec<Vec3<T>> = grad_v.to_vec();
    let last = weights.stages.len() - 1;
    let mut d_feat_last: Option<Matrix<T>> = None;
    if let (Some(head), Some(sc)) = (&weights.stages[last].semantic, &fw.sem) {
        let gh = g.stages[last].semantic.as_mut().expect("matching structure");
        let (d_feat, d_ctx) = head.backward(&sc.features, &sc.head, grad_c, adj, gh);
        let mut d_scores = d_ctx.columns(3, d_ctx.cols());
        d_scores.add_assign(grad_c);
        let through_seg = sc.assoc.pull_back(&d_scores);
        for i in 0..n {
            for c in 0..3 {
                gv[i][c] += d_ctx[(i, c)] / vscale[c] + through_seg[i][c];
            }
        }
        d_feat_last = Some(d_feat);
    } else if let Some(assoc) = &fw.passthrough {
        for (g, d) in gv.iter_mut().zip(assoc.pull_back(grad_c)) {
            *g = geom::add(*g, d);
        }
    }
    for k in (0..weights.stages.len()).rev() {
        let sc = &fw.stages[k];
        let d_out = Matrix::from_fn(n, 3, |i, c| gv[i][c] * step_scale);
        let (mut d_feat, d_ctx) =
            weights.stages[k].geometric.backward(&sc.feats, &sc.geo, &d_out, adj, &mut g.stages[k].geometric);
        if k == 0 {
            break;
        }
        if k == last {
            if let Some(extra) = d_feat_last.take() {
                d_feat.add_assign(&extra);
            }
        }
        let d_raw = Matrix::from_fn(n, d_feat.cols(), |i, j| d_feat[(i, j)] / fscale[j]);
        let through_feat = sc.assoc.pull_back(&d_raw);
        for i in 0..n {
            for c in 0..3 {
                gv[i][c] += d_ctx[(i, c)] / vscale[c] + through_feat[i][c];
            }
        }
    }
    g
}

/// Refines the initialized mesh of one keyframe. The result is in the same frame as
/// the input mesh (world frame of `camera`).
pub fn run_refinement<T: Real>(
    init_mesh: &TriMesh<T>,
    rgb: &Raster<T>,
    sparse: &SparseDepthSet<T>,
    seg_features: Option<&Raster<T>>,
    camera: &CameraModel<T>,
    weights: &GcnWeights<T>,
    cfg: &RefineConfig<T>,
) -> Result<TriMesh<T>> {
    cfg.validate()?;
    let frame = FrameInputs::prepare(init_mesh.clone(), rgb, sparse, seg_features.cloned(), camera, cfg)?;
    let local = refine_frame(&frame, weights, cfg.step_scale)?;
    Ok(local.with_vertices(local.vertices.iter().map(|&v| camera.camera_to_world(v)).collect()))
}

/// Refined mesh of a prepared frame, in its camera frame.
pub fn refine_frame<T: Real>(frame: &FrameInputs<T>, weights: &GcnWeights<T>, step_scale: T) -> Result<TriMesh<T>> {
    if weights.feature_width() != frame.pyramid.total_channels() {
        return Err(Error::DimensionMismatch(format!(
            "weights expect {} feature channels, pyramid has {}",
            weights.feature_width(),
            frame.pyramid.total_channels()
        )));
    }
    let adj = GraphOperator::new(frame.init.topology());
    Ok(forward(frame, weights, &adj, step_scale, false)?.mesh)
}

/// `ΔV` of a single geometric head on raw vertex features `vfeat`.
pub fn geometric_refine<T: Real>(
    mesh: &TriMesh<T>,
    vfeat: &Matrix<T>,
    head: &Head<T>,
    norm: &InputNorm<T>,
    step_scale: T,
) -> Result<Vec<Vec3<T>>> {
    let adj = GraphOperator::new(mesh.topology());
    let out = head.forward(&norm.features(vfeat), &norm.vertices(&mesh.vertices), &adj)?.out;
    let s = step_scale;
    Ok((0..mesh.vertex_count()).map(|i| [out[(i, 0)] * s, out[(i, 1)] * s, out[(i, 2)] * s]).collect())
}

/// Initial vertex scores: the segmentation scores sampled at the vertex projections.
pub fn semantic_init<T: Real>(mesh: &TriMesh<T>, seg: &Raster<T>, camera: &CameraModel<T>) -> Result<Matrix<T>> {
    if seg.channels() != mesh.classes() {
        return Err(Error::DimensionMismatch(format!(
            "segmentation has {} channels, mesh has {} classes",
            seg.channels(),
            mesh.classes()
        )));
    }
    Ok(associate_raster(mesh, seg, camera, false).features)
}

/// `ΔC` of a semantic head on raw vertex features `vfeat` with the mesh's scores as context.
pub fn semantic_refine<T: Real>(
    mesh: &TriMesh<T>,
    vfeat: &Matrix<T>,
    head: &Head<T>,
    norm: &InputNorm<T>,
) -> Result<Matrix<T>> {
    let adj = GraphOperator::new(mesh.topology());
    let ctx = norm.vertices(&mesh.vertices).hcat(&mesh.semantics);
    Ok(head.forward(&norm.features(vfeat), &ctx, &adj)?.out)
}

/// A keyframe with ground truth for training.
#[derive(Debug, Clone)]
pub struct TrainingFrame<T> {
    pub inputs: FrameInputs<T>,
    pub target: FrameTarget<T>,
    /// Chamfer sample provenance drawn once on the initial mesh.
    pub provenance: SurfaceSamples<T>,
}

impl<T: Real> TrainingFrame<T> {
    pub fn new(
        inputs: FrameInputs<T>,
        truth_depth: DepthRaster<T>,
        truth_sem: Option<SemanticRaster<T>>,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let target = FrameTarget::new(inputs.camera, truth_depth, truth_sem, samples, seed)?;
        let provenance = sample_surface(&inputs.init, samples, seed.wrapping_add(1))?;
        Ok(Self { inputs, target, provenance })
    }
}

/// Training loss of the refined mesh, with the frame's fixed sample provenance.
pub fn training_loss<T: Real>(
    frame: &TrainingFrame<T>,
    weights: &GcnWeights<T>,
    cfg: &RefineConfig<T>,
) -> Result<LossReport<T>> {
    let mesh = refine_frame(&frame.inputs, weights, cfg.step_scale)?;
    total_loss_with(&mesh, &frame.target, &cfg.loss, Sampling::Fixed(&frame.provenance))
}

/// Training loss of the refined mesh and its gradient with respect to every weight.
pub fn loss_and_weight_gradient<T: Real>(
    frame: &TrainingFrame<T>,
    weights: &GcnWeights<T>,
    cfg: &RefineConfig<T>,
) -> Result<(LossReport<T>, GcnWeights<T>)> {
    let adj = GraphOperator::new(frame.inputs.init.topology());
    let fw = forward(&frame.inputs, weights, &adj, cfg.step_scale, true)?;
    let (report, g) = grad_total_with(&fw.mesh, &frame.target, &cfg.loss, Sampling::Fixed(&frame.provenance))?;
    let wg = backward(weights, &fw, &adj, cfg.step_scale, &g.vertices, &g.semantics);
    Ok((report, wg))
}

/// Gradient of `Σ gv·V + Σ gc·C` of the refined mesh; exposes backpropagation alone.
pub fn linear_functional_gradient<T: Real>(
    frame: &FrameInputs<T>,
    weights: &GcnWeights<T>,
    step_scale: T,
    gv: &[Vec3<T>],
    gc: &Matrix<T>,
) -> Result<(T, GcnWeights<T>)> {
    let adj = GraphOperator::new(frame.init.topology());
    let fw = forward(frame, weights, &adj, step_scale, true)?;
    let value = fw.mesh.vertices.iter().zip(gv).map(|(a, b)| geom::dot(*a, *b)).sum::<T>()
        + fw.mesh.semantics.as_slice().iter().zip(gc.as_slice()).map(|(&a, &b)| a * b).sum::<T>();
    Ok((value, backward(weights, &fw, &adj, step_scale, gv, gc)))
}

#[derive(Debug, Clone)]
pub struct TrainingResult<T> {
    pub weights: GcnWeights<T>,
    /// Mean training loss at the start of every epoch, then after the last one.
    pub history: Vec<LossReport<T>>,
}

fn mean_report<T: Real>(reports: &[LossReport<T>]) -> LossReport<T> {
    let n = T::from_usize_lossy(reports.len());
    let avg = |f: &dyn Fn(&LossReport<T>) -> T| reports.iter().map(f).sum::<T>() / n;
    let avg_opt = |f: &dyn Fn(&LossReport<T>) -> Option<T>| {
        reports.iter().map(f).collect::<Option<Vec<T>>>().map(|v| v.into_iter().sum::<T>() / n)
    };
    LossReport {
        l2: avg(&|r| r.l2),
        l3: avg(&|r| r.l3),
        lv: avg(&|r| r.lv),
        le: avg(&|r| r.le),
        ls: avg_opt(&|r| r.ls),
        lc: avg_opt(&|r| r.lc),
        total: avg(&|r| r.total),
        valid_pixels: reports.iter().map(|r| r.valid_pixels).sum(),
        mesh_samples: reports.first().map_or(0, |r| r.mesh_samples),
        truth_samples: reports.first().map_or(0, |r| r.truth_samples),
    }
}

fn frame_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// Mean loss over frames and the mean weight gradient, summed in frame order.
fn batch<T: Real>(
    frames: &[TrainingFrame<T>],
    weights: &GcnWeights<T>,
    cfg: &RefineConfig<T>,
) -> Result<(LossReport<T>, GcnWeights<T>)> {
    let results: Vec<Result<(LossReport<T>, GcnWeights<T>)>> =
        frames.par_iter().map(|f| loss_and_weight_gradient(f, weights, cfg)).collect();
    let mut reports = Vec::with_capacity(frames.len());
    let mut grad = weights.zeros_like();
    let inv = T::one() / T::from_usize_lossy(frames.len());
    for r in results {
        let (rep, g) = r?;
        grad.axpy(inv, &g);
        reports.push(rep);
    }
    Ok((mean_report(&reports), grad))
}

/// Mean loss of the refined meshes of `frames` with freshly drawn Chamfer samples.
pub fn evaluate_frames<T: Real>(
    frames: &[TrainingFrame<T>],
    weights: &GcnWeights<T>,
    cfg: &RefineConfig<T>,
) -> Result<LossReport<T>> {
    let reports: Vec<Result<LossReport<T>>> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let mesh = refine_frame(&f.inputs, weights, cfg.step_scale)?;
            total_loss(&mesh, &f.target, &cfg.loss, frame_seed(cfg.seed, i))
        })
        .collect();
    Ok(mean_report(&reports.into_iter().collect::<Result<Vec<_>>>()?))
}

const MAX_HALVINGS: usize = 20;

/// Failures of a trial step that are answered by a smaller step.
fn rejects_step(e: &Error) -> bool {
    e.is_numerical() || matches!(e, Error::BehindCamera { .. } | Error::NoOverlap)
}

/// Moment estimates of Adam.
#[derive(Clone)]
struct Adam<T> {
    m: GcnWeights<T>,
    v: GcnWeights<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    fn new(like: &GcnWeights<T>) -> Self {
        Self { m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    /// Applies one update to `w` and returns the advanced state.
    fn step(&self, w: &mut GcnWeights<T>, grad: &GcnWeights<T>, lr: T) -> Self {
        let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
        let mut next = self.clone();
        next.t += 1;
        let (c1, c2) = (T::one() - b1.powi(next.t), T::one() - b2.powi(next.t));
        for (((w, m), v), g) in
            w.tensors_mut().into_iter().zip(next.m.tensors_mut()).zip(next.v.tensors_mut()).zip(grad.named_tensors())
        {
            for (((wi, mi), vi), &gi) in
                w.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()).zip(g.1.as_slice())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        next
    }
}

/// Full-batch descent on the mean training loss. A step that raises the loss is undone and
/// the step size halved, so the recorded training loss never increases.
pub fn train_toy<T: Real>(frames: &[TrainingFrame<T>], cfg: &RefineConfig<T>) -> Result<TrainingResult<T>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyInput("no training frame".into()));
    }
    let features = frames[0].inputs.pyramid.total_channels();
    let classes = frames[0].inputs.init.classes();
    let mut weights = GcnWeights::glorot(features, classes, cfg);
    weights.norm = InputNorm::fit(&frames.iter().map(|f| &f.inputs).collect::<Vec<_>>())?;
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    if cfg.epochs == 0 {
        let reports: Vec<_> = frames.iter().map(|f| training_loss(f, &weights, cfg)).collect::<Result<_>>()?;
        history.push(mean_report(&reports));
        return Ok(TrainingResult { weights, history });
    }
    let mut adam = Adam::new(&weights);
    let mut lr = cfg.learning_rate;
    let (mut report, mut grad) = batch(frames, &weights, cfg)?;
    if !report.total.is_finite() {
        return Err(Error::TrainingDiverged { epoch: 0 });
    }
    for _epoch in 0..cfg.epochs {
        history.push(report.clone());
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let mut trial = weights.clone();
            let next = match cfg.optimizer {
                Optimizer::Gradient => {
                    trial.axpy(-lr, &grad);
                    None
                }
                Optimizer::Adam => Some(adam.step(&mut trial, &grad, lr)),
            };
            let (r2, g2) = match batch(frames, &trial, cfg) {
                Ok(x) => x,
                Err(e) if rejects_step(&e) => {
                    lr *= T::lit(0.5);
                    continue;
                }
                Err(e) => return Err(e),
            };
            if r2.total.is_finite() && r2.total <= report.total {
                weights = trial;
                if let Some(state) = next {
                    adam = state;
                }
                report = r2;
                grad = g2;
                accepted = true;
                break;
            }
            lr *= T::lit(0.5);
        }
        if !accepted {
            break;
        }
    }
    history.push(report);
    if !weights.is_finite() {
        return Err(Error::TrainingDiverged { epoch: history.len() });
    }
    Ok(TrainingResult { weights, history })
}
