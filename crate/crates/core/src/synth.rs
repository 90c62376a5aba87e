//! Synthetic 2.5-D terrain scenes and their ground-truth renderings.
//!
//! A scene is a heightfield of square cells, each a vertical prism with a class label.
//! Depth and labels come from exact ray/prism intersection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::camera::{CameraModel, Pose};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::init::initialize_mesh;
use crate::mesh::{make_grid_mesh, to_global, TriMesh};
use crate::raster::{DepthRaster, Raster, SemanticRaster};
use crate::refine::{FrameInputs, RefineConfig, TrainingFrame};
use crate::sparse::{SparseDepth, SparseDepthSet};

pub const GROUND: u8 = 0;
pub const VEGETATION: u8 = 1;
pub const BUILDING: u8 = 2;
pub const ROAD: u8 = 3;
pub const CLASS_COUNT: usize = 4;

/// Base colors; every row sums to the same value so channel sums depend on height only.
pub const BASE_COLORS: [[f64; 3]; 4] = [[0.5, 0.4, 0.3], [0.2, 0.7, 0.3], [0.4, 0.4, 0.4], [0.3, 0.3, 0.6]];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Side length of the square scene (meters).
    pub extent: f64,
    /// Cell size (meters).
    pub cell: f64,
    pub relief_amplitude: f64,
    pub relief_wavelength: f64,
    pub buildings: usize,
    pub building_size: (f64, f64),
    pub building_height: (f64, f64),
    /// Upper bound on the fraction of cells labelled building.
    pub max_building_fraction: f64,
    pub roads: usize,
    pub road_width: f64,
    pub vegetation_blobs: usize,
    pub blob_radius: (f64, f64),
    pub canopy_height: f64,
    /// Heights mapped to the darkest and brightest shading.
    pub shade_range: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 300.0,
            cell: 0.5,
            relief_amplitude: 6.0,
            relief_wavelength: 60.0,
            buildings: 25,
            building_size: (10.0, 25.0),
            building_height: (3.0, 10.0),
            max_building_fraction: 0.2,
            roads: 3,
            road_width: 6.0,
            vegetation_blobs: 30,
            blob_radius: (3.0, 8.0),
            canopy_height: 2.0,
            shade_range: (-10.0, 25.0),
        }
    }
}

impl SceneConfig {
    /// Flat, all-ground scene.
    pub fn flat(extent: f64, cell: f64) -> Self {
        Self { extent, cell, relief_amplitude: 0.0, buildings: 0, roads: 0, vegetation_blobs: 0, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cells: usize,
    pub cell: f64,
    pub heights: Vec<f64>,
    pub labels: Vec<u8>,
    pub shade_range: (f64, f64),
}

impl Scene {
    pub fn extent(&self) -> f64 {
        self.cells as f64 * self.cell
    }

    pub fn height(&self, i: usize, j: usize) -> f64 {
        self.heights[j * self.cells + i]
    }

    pub fn label(&self, i: usize, j: usize) -> u8 {
        self.labels[j * self.cells + i]
    }

    pub fn max_height(&self) -> f64 {
        self.heights.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn fraction(&self, label: u8) -> f64 {
        self.labels.iter().filter(|&&l| l == label).count() as f64 / self.labels.len() as f64
    }

    fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (i, j) = ((x / self.cell).floor(), (y / self.cell).floor());
        let n = self.cells as f64;
        (i >= 0.0 && j >= 0.0 && i < n && j < n).then_some((i as usize, j as usize))
    }

    /// Shading in `[0, 1]`, affine in height within the shade range.
    pub fn shade(&self, h: f64) -> f64 {
        let (lo, hi) = self.shade_range;
        ((h - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    /// First intersection of `origin + t·dir` (t > 0) with the prisms as `(t, cell)`.
    pub fn cast(&self, origin: Vec3<f64>, dir: Vec3<f64>) -> Option<(f64, (usize, usize))> {
        let (mut i, mut j) = self.cell_of(origin[0], origin[1])?;
        let c = self.cell;
        let step = |d: f64| if d > 0.0 { 1isize } else { -1 };
        let (sx, sy) = (step(dir[0]), step(dir[1]));
        let next_boundary = |k: usize, s: isize, o: f64, d: f64| -> f64 {
            if d == 0.0 {
                return f64::INFINITY;
            }
            let edge = if s > 0 { (k + 1) as f64 * c } else { k as f64 * c };
            (edge - o) / d
        };
        let mut tx = next_boundary(i, sx, origin[0], dir[0]);
        let mut ty = next_boundary(j, sy, origin[1], dir[1]);
        let dtx = if dir[0] == 0.0 { f64::INFINITY } else { c / dir[0].abs() };
        let dty = if dir[1] == 0.0 { f64::INFINITY } else { c / dir[1].abs() };
        let mut t_in = 0.0;
        loop {
            let t_out = tx.min(ty);
            let h = self.height(i, j);
            let z_in = origin[2] + t_in * dir[2];
            if z_in <= h {
                // entered through the prism wall
                return Some((t_in, (i, j)));
            }
            if dir[2] < 0.0 {
                let t_top = (h - origin[2]) / dir[2];
                if t_top <= t_out {
                    return Some((t_top.max(t_in), (i, j)));
                }
            }
            if !t_out.is_finite() {
                return None;
            }
            t_in = t_out;
            if tx < ty {
                let ni = i as isize + sx;
                if ni < 0 || ni >= self.cells as isize {
                    return None;
                }
                i = ni as usize;
                tx += dtx;
            } else {
                let nj = j as isize + sy;
                if nj < 0 || nj >= self.cells as isize {
                    return None;
                }
                j = nj as usize;
                ty += dty;
            }
        }
    }
}

fn value_noise(rng: &mut ChaCha8Rng, cells: usize, cell: f64, wavelength: f64) -> impl Fn(f64, f64) -> f64 {
    let lattice = ((cells as f64 * cell / wavelength).ceil() as usize + 2).max(2);
    let values: Vec<f64> = (0..lattice * lattice).map(|_| rng.random_range(-1.0..1.0)).collect();
    move |x: f64, y: f64| {
        let (u, v) = (x / wavelength, y / wavelength);
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        let (fx, fy) = (u - u.floor(), v - v.floor());
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let at = |a: usize, b: usize| values[b.min(lattice - 1) * lattice + a.min(lattice - 1)];
        let top = at(i, j) + (at(i + 1, j) - at(i, j)) * s(fx);
        let bot = at(i, j + 1) + (at(i + 1, j + 1) - at(i, j + 1)) * s(fx);
        top + (bot - top) * s(fy)
    }
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    if !(cfg.extent > 0.0 && cfg.cell > 0.0) {
        return Err(Error::InvalidConfig("scene extent and cell size must be positive".into()));
    }
    let n = (cfg.extent / cfg.cell).round().max(1.0) as usize;
    let c = cfg.cell;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = value_noise(&mut rng, n, c, cfg.relief_wavelength.max(c));
    let mut heights: Vec<f64> = (0..n * n)
        .map(|k| cfg.relief_amplitude * noise(((k % n) as f64 + 0.5) * c, ((k / n) as f64 + 0.5) * c))
        .collect();
    let mut labels = vec![GROUND; n * n];
    let cells_of = |m: f64| ((m / c).round() as usize).max(1);

    for r in 0..cfg.roads {
        let w = cells_of(cfg.road_width).min(n);
        let start = rng.random_range(0..=n - w);
        for a in start..start + w {
            for b in 0..n {
                let k = if r % 2 == 0 { a * n + b } else { b * n + a };
                labels[k] = ROAD;
            }
        }
    }

    let max_buildings = (cfg.max_building_fraction * (n * n) as f64) as usize;
    let mut building_cells = 0;
    for _ in 0..cfg.buildings {
        let (lo, hi) = cfg.building_size;
        let w = cells_of(rng.random_range(lo..=hi)).min(n);
        let h = cells_of(rng.random_range(lo..=hi)).min(n);
        let height = rng.random_range(cfg.building_height.0..=cfg.building_height.1);
        let (x0, y0) = (rng.random_range(0..=n - w), rng.random_range(0..=n - h));
        let free = (y0..y0 + h).all(|y| (x0..x0 + w).all(|x| labels[y * n + x] == GROUND));
        if !free || building_cells + w * h > max_buildings {
            continue;
        }
        let base =
            (y0..y0 + h).flat_map(|y| (x0..x0 + w).map(move |x| (x, y))).map(|(x, y)| heights[y * n + x]).sum::<f64>()
                / (w * h) as f64;
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                labels[y * n + x] = BUILDING;
                heights[y * n + x] = base + height;
            }
        }
        building_cells += w * h;
    }

    for _ in 0..cfg.vegetation_blobs {
        let r = rng.random_range(cfg.blob_radius.0..=cfg.blob_radius.1);
        let (cx, cy) = (rng.random_range(0.0..cfg.extent), rng.random_range(0.0..cfg.extent));
        let rc = (r / c).ceil() as isize;
        let (ci, cj) = ((cx / c) as isize, (cy / c) as isize);
        for j in (cj - rc).max(0)..(cj + rc + 1).min(n as isize) {
            for i in (ci - rc).max(0)..(ci + rc + 1).min(n as isize) {
                let (x, y) = ((i as f64 + 0.5) * c, (j as f64 + 0.5) * c);
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                let k = j as usize * n + i as usize;
                if d < r && labels[k] == GROUND {
                    labels[k] = VEGETATION;
                    heights[k] += cfg.canopy_height * (1.0 - (d / r).powi(2));
                }
            }
        }
    }
    Ok(Scene { cells: n, cell: c, heights, labels, shade_range: cfg.shade_range })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    pub altitude: f64,
    pub row_spacing: f64,
    pub along_spacing: f64,
    pub rows: usize,
    pub frames_per_row: usize,
    /// World xy of the first frame.
    pub start: [f64; 2],
}

/// Fraction of a nadir footprint of side `footprint` shared with one shifted by `offset`.
pub fn footprint_overlap(footprint: f64, offset: f64) -> f64 {
    (1.0 - offset.abs() / footprint).max(0.0)
}

/// Ground footprint side lengths (meters) of a nadir camera at `altitude` above z = 0.
pub fn footprint(camera: &CameraModel<f64>, altitude: f64) -> (f64, f64) {
    (altitude * camera.width as f64 / camera.fx, altitude * camera.height as f64 / camera.fy)
}

/// Nadir poses along boustrophedon rows (x along-track, rows stepping in +y).
pub fn sweep_trajectory(cfg: &TrajectoryConfig, camera: &CameraModel<f64>) -> Result<Vec<Pose<f64>>> {
    if cfg.rows == 0 || cfg.frames_per_row == 0 || !(cfg.altitude > 0.0) {
        return Err(Error::InvalidConfig("trajectory needs rows, frames and a positive altitude".into()));
    }
    let (fw, fh) = footprint(camera, cfg.altitude);
    if cfg.frames_per_row > 1 && footprint_overlap(fw, cfg.along_spacing) < 0.6 {
        return Err(Error::InvalidConfig("along-track spacing leaves less than 60% overlap".into()));
    }
    if cfg.rows > 1 && footprint_overlap(fh, cfg.row_spacing) < 0.6 {
        return Err(Error::InvalidConfig("row spacing leaves less than 60% overlap".into()));
    }
    let mut poses = Vec::with_capacity(cfg.rows * cfg.frames_per_row);
    for r in 0..cfg.rows {
        for k in 0..cfg.frames_per_row {
            let k = if r % 2 == 0 { k } else { cfg.frames_per_row - 1 - k };
            poses.push(Pose::nadir([
                cfg.start[0] + k as f64 * cfg.along_spacing,
                cfg.start[1] + r as f64 * cfg.row_spacing,
                cfg.altitude,
            ]));
        }
    }
    Ok(poses)
}

#[derive(Debug, Clone)]
pub struct FrameTruth {
    pub rgb: Raster<f64>,
    pub depth: DepthRaster<f64>,
    pub semantics: SemanticRaster<f64>,
}

/// Ray-casts every pixel center. `camera` carries the pose.
pub fn render_frame_truth(scene: &Scene, camera: &CameraModel<f64>) -> Result<FrameTruth> {
    let (w, h) = (camera.width, camera.height);
    let pose = camera.pose();
    let rows: Vec<Result<Vec<(f64, u8, f64)>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = camera.pixel_ray(CameraModel::<f64>::pixel_center(x, y));
                    let dir = geom::mat_vec(&pose.rotation, ray);
                    let (t, (i, j)) = scene
                        .cast(pose.position, dir)
                        .ok_or_else(|| Error::OutOfScene(format!("pixel ({x}, {y}) leaves the scene")))?;
                    let p = geom::add(pose.position, geom::scale(dir, t));
                    let label = scene.label(i, j);
                    Ok((t, label, scene.shade(p[2].min(scene.height(i, j)))))
                })
                .collect()
        })
        .collect();
    let mut depth = Raster::zeros(w, h, 1);
    let mut semantics = Raster::zeros(w, h, CLASS_COUNT);
    let mut rgb = Raster::zeros(w, h, 3);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (t, label, shade)) in row?.into_iter().enumerate() {
            depth.set(x, y, 0, t);
            semantics.set(x, y, label as usize, 1.0);
            for c in 0..3 {
                rgb.set(x, y, c, 0.5 * BASE_COLORS[label as usize][c] + 0.5 * shade);
            }
        }
    }
    Ok(FrameTruth { rgb, depth, semantics })
}

/// `count` distinct valid pixels with Gaussian depth noise; non-positive draws are redrawn.
pub fn sample_sparse_depth(
    depth: &DepthRaster<f64>,
    count: usize,
    sigma: f64,
    seed: u64,
) -> Result<SparseDepthSet<f64>> {
    let mut valid: Vec<usize> = (0..depth.pixel_count()).filter(|&i| depth.is_valid_depth(i)).collect();
    if count > valid.len() {
        return Err(Error::InvalidArgument(format!("requested {count} samples but only {} valid pixels", valid.len())));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise sigma must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let w = depth.width();
    let mut records = Vec::with_capacity(count);
    for k in 0..count {
        let pick = rng.random_range(k..valid.len());
        valid.swap(k, pick);
        let i = valid[k];
        let d = loop {
            let d = depth.at(i) + normal.sample(&mut rng);
            if d > 0.0 {
                break d;
            }
        };
        records.push(SparseDepth { u: (i % w) as f64 + 0.5, v: (i / w) as f64 + 0.5, depth: d });
    }
    SparseDepthSet::new(records, depth.width(), depth.height())
}

/// Stand-in segmentation scores: one-hot truth plus Gaussian noise, box-blurred 3×3.
pub fn segmentation_scores(truth: &SemanticRaster<f64>, noise: f64, seed: u64) -> Raster<f64> {
    let (w, h, s) = truth.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite sigma");
    let noisy = Raster::from_fn(w, h, s, |x, y, c| truth.get(x, y, c) + normal.sample(&mut rng));
    Raster::from_fn(w, h, s, |x, y, c| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                acc += noisy.get(xx, yy, c);
                n += 1.0;
            }
        }
        acc / n
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub sparse_count: usize,
    pub sparse_sigma: f64,
    pub seg_noise: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self { sparse_count: 1000, sparse_sigma: 1.0, seg_noise: 0.35 }
    }
}

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub id: usize,
    pub camera: CameraModel<f64>,
    pub truth: FrameTruth,
    pub sparse: SparseDepthSet<f64>,
    pub seg_scores: Raster<f64>,
}

/// Renders and samples one frame per pose; frame `k` uses seeds derived from `seed + k`.
pub fn generate_frames(
    scene: &Scene,
    poses: &[Pose<f64>],
    intrinsics: &CameraModel<f64>,
    cfg: &FrameConfig,
    seed: u64,
) -> Result<Vec<SynthFrame>> {
    poses
        .par_iter()
        .enumerate()
        .map(|(k, pose)| {
            let camera = intrinsics.with_pose(pose);
            let truth = render_frame_truth(scene, &camera)?;
            let fs = seed.wrapping_add(k as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
            let sparse = sample_sparse_depth(&truth.depth, cfg.sparse_count, cfg.sparse_sigma, fs)?;
            let seg_scores = segmentation_scores(&truth.semantics, cfg.seg_noise, fs ^ 0x5EED);
            Ok(SynthFrame { id: k, camera, truth, sparse, seg_scores })
        })
        .collect()
}

/// Closed-form initial mesh of a frame in world coordinates.
pub fn initial_mesh(frame: &SynthFrame, side: usize, w_reg: f64) -> Result<TriMesh<f64>> {
    let local = frame.camera.local();
    let flat = make_grid_mesh(side, &local)?;
    let mesh = initialize_mesh(&flat, &frame.sparse, &local, w_reg)?;
    to_global(&mesh, &frame.camera.pose())
}

/// Inputs and truth of a frame for training or evaluation of the refiner.
pub fn training_frame(
    frame: &SynthFrame,
    side: usize,
    w_reg: f64,
    cfg: &RefineConfig<f64>,
    seed: u64,
) -> Result<TrainingFrame<f64>> {
    let init = initial_mesh(frame, side, w_reg)?;
    let seg = cfg.semantic.then(|| frame.seg_scores.clone());
    let inputs = FrameInputs::prepare(init, &frame.truth.rgb, &frame.sparse, seg, &frame.camera, cfg)?;
    let sem = cfg.semantic.then(|| frame.truth.semantics.clone());
    TrainingFrame::new(inputs, frame.truth.depth.clone(), sem, cfg.loss.samples, seed)
}

/// Desk-scale camera intrinsics: 128×128 pixels, focal 128.
pub fn desk_camera() -> CameraModel<f64> {
    CameraModel::centered(128, 128, 128.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_scene_renders_altitude() {
        let scene = generate_scene(1, &SceneConfig::flat(200.0, 1.0)).unwrap();
        assert!(scene.heights.iter().all(|&h| h == 0.0) && scene.labels.iter().all(|&l| l == GROUND));
        let cam = CameraModel::centered(32, 32, 32.0).with_pose(&Pose::nadir([100.0, 100.0, 50.0]));
        let t = render_frame_truth(&scene, &cam).unwrap();
        for i in 0..t.depth.pixel_count() {
            assert!((t.depth.at(i) - 50.0).abs() < 1e-9);
        }
        assert!(t.semantics.is_one_hot());
    }

    #[test]
    fn roof_depth_and_label() {
        let mut scene = generate_scene(1, &SceneConfig::flat(100.0, 1.0)).unwrap();
        for j in 40..60 {
            for i in 40..60 {
                scene.heights[j * 100 + i] = 8.0;
                scene.labels[j * 100 + i] = BUILDING;
            }
        }
        let cam = CameraModel::centered(16, 16, 16.0).with_pose(&Pose::nadir([50.0, 50.0, 30.0]));
        let t = render_frame_truth(&scene, &cam).unwrap();
        assert!((t.depth.get(8, 8, 0) - 22.0).abs() < 1e-9);
        assert_eq!(t.semantics.argmax(8, 8), BUILDING as usize);
        assert_eq!(t.semantics.argmax(0, 0), GROUND as usize);
        assert!(t.depth.get(0, 0, 0) > 29.0);
    }

    #[test]
    fn wall_hits_are_exact() {
        let mut scene = generate_scene(1, &SceneConfig::flat(20.0, 1.0)).unwrap();
        for j in 0..20 {
            for i in 10..20 {
                scene.heights[j * 20 + i] = 5.0;
            }
        }
        let hit = scene.cast([8.0, 5.5, 6.0], [1.0, 0.0, -0.6]).unwrap();
        assert!((hit.0 - 2.0).abs() < 1e-12);
        assert_eq!(hit.1, (10, 5));
        let roof = scene.cast([8.0, 5.5, 6.0], [1.0, 0.0, -0.1]).unwrap();
        assert!((roof.0 - 10.0).abs() < 1e-12);
    }

    #[test]
    fn scene_is_deterministic_and_bounded() {
        let cfg = SceneConfig { extent: 120.0, ..SceneConfig::default() };
        let a = generate_scene(7, &cfg).unwrap();
        assert_eq!(a, generate_scene(7, &cfg).unwrap());
        let f = a.fraction(BUILDING);
        assert!(f > 0.0 && f <= cfg.max_building_fraction);
        assert!(a.fraction(ROAD) > 0.0 && a.fraction(VEGETATION) > 0.0);
    }

    #[test]
    fn trajectory_shapes_and_overlap() {
        let cam = desk_camera();
        let cfg = TrajectoryConfig {
            altitude: 100.0,
            row_spacing: 30.0,
            along_spacing: 30.0,
            rows: 1,
            frames_per_row: 3,
            start: [60.0, 60.0],
        };
        let p = sweep_trajectory(&cfg, &cam).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|q| q.position[1] == 60.0 && q.position[2] == 100.0));
        let p2 = sweep_trajectory(&TrajectoryConfig { rows: 2, ..cfg.clone() }, &cam).unwrap();
        assert!(p2[3].position[0] > p2[4].position[0]);
        assert_eq!(p2[2].position[0], p2[3].position[0]);
        let (fw, _) = footprint(&cam, 100.0);
        for w in p2.windows(2) {
            let d = geom::sub(w[0].position, w[1].position);
            assert!(footprint_overlap(fw, d[0].abs() + d[1].abs()) >= 0.6);
        }
        assert!(sweep_trajectory(&TrajectoryConfig { along_spacing: 50.0, ..cfg }, &cam).is_err());
    }

    #[test]
    fn sparse_sampling_properties() {
        let d = Raster::filled(40, 40, 1, 20.0);
        let exact = sample_sparse_depth(&d, 300, 0.0, 3).unwrap();
        assert!(exact.records().iter().all(|r| r.depth == 20.0));
        assert!(sample_sparse_depth(&d, 1601, 0.0, 3).is_err());
        let big = Raster::filled(400, 250, 1, 50.0);
        let s = sample_sparse_depth(&big, 100_000, 1.0, 4).unwrap();
        let n = s.len() as f64;
        let mean = s.records().iter().map(|r| r.depth).sum::<f64>() / n;
        let var = s.records().iter().map(|r| (r.depth - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 1.0).abs() < 0.02);
    }
}
