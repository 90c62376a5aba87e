//! Acceptance suite: every criterion prints one PASS/FAIL line; any failure exits nonzero.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use terramesh::features::edt_squared;
use terramesh::geom::{self, Vec3};
use terramesh::init::{build_system, grid_of, initialize_mesh, solve_inverse_depths};
use terramesh::losses::{
    chamfer, grad_total_with, loss_semantic, pixel_ce_focal, total_loss, total_loss_with, FrameTarget, LossConfig,
    LossWeights, Sampling, SemanticVariant,
};
use terramesh::merge::{
    constrained_delaunay, cpd_register, double_layers, merge_local, stack_baseline, CpdConfig, GlobalMesh, MergeAction,
    MergeConfig,
};
use terramesh::mesh::{
    make_grid_mesh, normalized_laplacian, sample_surface, to_local, SurfaceSamples, DEFAULT_SAMPLE_COUNT,
};
use terramesh::raster::one_hot;
use terramesh::refine::{
    evaluate_frames, loss_and_weight_gradient, train_toy, training_loss, FrameInputs, GcnWeights, InputNorm,
    RefineConfig, TrainingFrame,
};
use terramesh::render::{backproject, depth_to_pseudo_mesh, rasterize, render_depth};
use terramesh::spatial::KdTree;
use terramesh::synth::{
    desk_camera, generate_frames, generate_scene, initial_mesh, sweep_trajectory, training_frame, FrameConfig,
    SceneConfig, SynthFrame, TrajectoryConfig,
};
use terramesh::{CameraModel, Matrix, Pose, Raster, SparseDepth, SparseDepthSet, TriMesh};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

// 1 ------------------------------------------------------------------------------------

fn random_sparse(
    rng: &mut ChaCha8Rng,
    count: usize,
    w: usize,
    h: usize,
    depth: impl Fn(f64, f64) -> f64,
) -> SparseDepthSet<f64> {
    let mut seen = std::collections::HashSet::new();
    let mut records = Vec::with_capacity(count);
    while records.len() < count {
        let (u, v) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        if seen.insert((u as usize, v as usize)) {
            records.push(SparseDepth { u, v, depth: depth(u, v) });
        }
    }
    SparseDepthSet::new(records, w, h).expect("distinct pixels")
}

fn initialization_oracle() -> Outcome {
    let cam = CameraModel::<f64>::centered(96, 96, 96.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sparse = random_sparse(&mut rng, 200, 96, 96, |u, v| 20.0 + 5.0 * (u / 17.0).sin() + 0.05 * v);
    let flat = make_grid_mesh(24, &cam).map_err(fail)?;
    let start = Instant::now();
    let grid = grid_of(&flat).map_err(fail)?;
    let system = build_system(&grid, &sparse, &cam).map_err(fail)?;
    let lap = normalized_laplacian(&flat).map_err(fail)?;
    let fast = solve_inverse_depths(&system, &lap, 1.0).map_err(fail)?;
    let elapsed = start.elapsed();

    let n = system.vertex_count;
    let k = system.len();
    let mut a = DMatrix::<f64>::zeros(k + n, n);
    let mut b = DVector::<f64>::zeros(k + n);
    for (r, ((idx, w), &rho)) in system.rows.iter().zip(&system.rho).enumerate() {
        for j in 0..3 {
            a[(r, idx[j])] += w[j];
        }
        b[r] = rho;
    }
    for i in 0..n {
        for (j, v) in lap.row(i) {
            a[(k + i, j)] += v;
        }
    }
    let dense = a.pseudo_inverse(1e-13).map_err(fail)? * b;
    let diff = fast.lambda.iter().zip(dense.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    check(
        diff < 1e-8 && elapsed < Duration::from_millis(500),
        format!("max |Δλ| {diff:.2e}, solve {:.1} ms (576 vertices, 200 measurements)", elapsed.as_secs_f64() * 1e3),
    )
}

// 2 ------------------------------------------------------------------------------------

fn planar_recovery() -> Outcome {
    let cam = CameraModel::<f64>::centered(64, 48, 60.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (a, bu, bv) = (rng.random_range(0.04..0.06), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
        let lambda = |uv: [f64; 2]| a + bu * uv[0] + bv * uv[1];
        let records = (0..cam.height)
            .flat_map(|y| (0..cam.width).map(move |x| (x, y)))
            .map(|(x, y)| {
                let px = CameraModel::<f64>::pixel_center(x, y);
                SparseDepth { u: px[0], v: px[1], depth: 1.0 / lambda(cam.pixel_to_uv(px)) }
            })
            .collect();
        let sparse = SparseDepthSet::new(records, cam.width, cam.height).map_err(fail)?;
        let flat = make_grid_mesh(16, &cam).map_err(fail)?;
        let mesh = initialize_mesh(&flat, &sparse, &cam, 0.0).map_err(fail)?;
        let depth = render_depth(&mesh, &cam).map_err(fail)?;
        for y in 0..cam.height {
            for x in 0..cam.width {
                let truth = 1.0 / lambda(cam.pixel_to_uv(CameraModel::<f64>::pixel_center(x, y)));
                worst = worst.max((depth.get(x, y, 0) - truth).abs());
            }
        }
    }
    check(worst < 1e-6, format!("max rendered-depth error {worst:.2e} m over 10 planes"))
}

// 3 ------------------------------------------------------------------------------------

fn sweep_frames(
    seed: u64,
    rows: usize,
    per_row: usize,
    start: [f64; 2],
    extent: f64,
) -> terramesh::Result<Vec<SynthFrame>> {
    let cam = desk_camera();
    let scene = generate_scene(seed, &SceneConfig { extent, ..SceneConfig::default() })?;
    let traj = TrajectoryConfig {
        altitude: 100.0,
        row_spacing: 35.0,
        along_spacing: 35.0,
        rows,
        frames_per_row: per_row,
        start,
    };
    generate_frames(&scene, &sweep_trajectory(&traj, &cam)?, &cam, &FrameConfig::default(), 100 * seed)
}

fn renderer_round_trip() -> Outcome {
    let mut frames = sweep_frames(5, 1, 5, [80.0, 150.0], 300.0).map_err(fail)?;
    frames.extend(sweep_frames(6, 1, 5, [80.0, 150.0], 300.0).map_err(fail)?);
    let mut worst = 0.0f64;
    let mut pixels = 0;
    for f in &frames {
        let local = f.camera.local();
        let pseudo = depth_to_pseudo_mesh(&f.truth.depth, &local, 1, 1).map_err(fail)?;
        let back = render_depth(&pseudo, &local).map_err(fail)?;
        for i in 0..back.pixel_count() {
            if f.truth.depth.is_valid_depth(i) {
                let d = f.truth.depth.at(i);
                worst = worst.max((back.at(i) - d).abs() / d);
                pixels += 1;
            }
        }
    }
    check(worst < 1e-6, format!("max relative error {worst:.2e} over {pixels} pixels of {} frames", frames.len()))
}

// 4 ------------------------------------------------------------------------------------

fn chamfer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud = |rng: &mut ChaCha8Rng| -> Vec<Vec3<f64>> {
        (0..50)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect()
    };
    let directed = |p: &[Vec3<f64>], q: &[Vec3<f64>]| {
        let mut sum = 0.0;
        for &a in p {
            let mut best = f64::INFINITY;
            for &b in q {
                best = best.min(geom::sq_dist(a, b));
            }
            sum += best;
        }
        sum / p.len() as f64
    };
    let mut mismatches = 0;
    for _ in 0..20 {
        let (p, q) = (cloud(&mut rng), cloud(&mut rng));
        let oracle = 0.5 * directed(&p, &q) + 0.5 * directed(&q, &p);
        if chamfer(&p, &q).map_err(fail)? != oracle {
            mismatches += 1;
        }
    }
    let p = cloud(&mut rng);
    let self_distance = chamfer(&p, &p).map_err(fail)?;
    let cfg = LossConfig::<f64>::new(LossWeights::geometric());
    let cam = CameraModel::<f64>::centered(16, 16, 16.0);
    let target = FrameTarget::new(cam, Raster::filled(16, 16, 1, 5.0), None, cfg.samples, 0).map_err(fail)?;
    let mesh = make_grid_mesh(4, &cam).map_err(fail)?;
    let mesh = mesh.with_vertices(mesh.vertices.iter().map(|v| geom::scale(*v, 5.0)).collect());
    let report = total_loss(&mesh, &target, &cfg, 1).map_err(fail)?;
    check(
        mismatches == 0
            && self_distance == 0.0
            && DEFAULT_SAMPLE_COUNT == 10_000
            && report.mesh_samples == 10_000
            && report.truth_samples == 10_000,
        format!(
            "{mismatches}/20 mismatches vs double loop, l3(P,P) = {self_distance}, samples {}/{}",
            report.mesh_samples, report.truth_samples
        ),
    )
}

// 5 ------------------------------------------------------------------------------------

fn relative_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12)
}

fn gradient_suite() -> Outcome {
    let cam = CameraModel::<f64>::centered(24, 24, 24.0);
    let labels: Vec<usize> = (0..24 * 24).map(|i| ((i % 24) / 7 + (i / 24) / 9) % 4).collect();
    let depth = Raster::from_fn(24, 24, 1, |x, y, _| 10.0 + 0.8 * (x as f64 / 5.0).sin() + 0.05 * y as f64);
    let target = FrameTarget::new(cam, depth, Some(one_hot(24, 24, 4, &labels)), 3000, 7).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let side = 7;
    let flat = make_grid_mesh(side, &cam).map_err(fail)?;
    let vertices = flat
        .vertices
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (r, c) = (i / side, i % side);
            let inner = |k: usize| k > 0 && k + 1 < side;
            let (jx, jy) = (if inner(c) { 0.04 } else { 0.0 }, if inner(r) { 0.04 } else { 0.0 });
            let ray = [v[0] + rng.random_range(-jx..=jx), v[1] + rng.random_range(-jy..=jy), 1.0];
            geom::scale(ray, rng.random_range(9.5..11.0))
        })
        .collect();
    let scores = Matrix::from_fn(flat.vertex_count(), 4, |_, _| rng.random_range(-1.0..1.0));
    let mesh = flat.with_vertices(vertices).with_semantics(scores);
    let provenance = sample_surface(&mesh, 3000, 3).map_err(fail)?;
    let eps = 1e-5;
    let names = ["l2", "l3", "lV", "lE", "lS", "lC"];
    let mut worst = [0.0f64; 6];
    let base_faces = rasterize(&mesh, &cam).map_err(fail)?.face;
    let (mut unstable, mut nn_switches) = (0, 0);
    for (term, worst_term) in worst.iter_mut().enumerate() {
        let mut w = [0.0; 6];
        w[term] = 1.0;
        let mut cfg = LossConfig::new(LossWeights::new(w).map_err(fail)?);
        cfg.samples = 3000;
        let (_, g) = grad_total_with(&mesh, &target, &cfg, Sampling::Fixed(&provenance)).map_err(fail)?;
        let mut stable = 0;
        while stable < 20 {
            let dv: Vec<Vec3<f64>> = (0..mesh.vertex_count())
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let dc = Matrix::from_fn(mesh.vertex_count(), 4, |_, _| rng.random_range(-1.0..1.0));
            let shifted = |s: f64| {
                let v = mesh.vertices.iter().zip(&dv).map(|(a, d)| geom::add(*a, geom::scale(*d, s))).collect();
                let c = Matrix::from_fn(mesh.vertex_count(), 4, |i, k| mesh.semantics[(i, k)] + s * dc[(i, k)]);
                mesh.with_vertices(v).with_semantics(c)
            };
            let (plus, minus) = (shifted(eps), shifted(-eps));
            for m in [&plus, &minus] {
                if rasterize(m, &cam).map_err(fail)?.face != base_faces {
                    unstable += 1;
                }
            }
            if term == 1 && assignments(&plus, &provenance, &target) != assignments(&minus, &provenance, &target) {
                nn_switches += 1;
                continue;
            }
            stable += 1;
            let loss =
                |m: &TriMesh<f64>| total_loss_with(m, &target, &cfg, Sampling::Fixed(&provenance)).map(|r| r.total);
            let fd = (loss(&plus).map_err(fail)? - loss(&minus).map_err(fail)?) / (2.0 * eps);
            let an = g.vertices.iter().zip(&dv).map(|(a, b)| geom::dot(*a, *b)).sum::<f64>()
                + g.semantics.as_slice().iter().zip(dc.as_slice()).map(|(a, b)| a * b).sum::<f64>();
            *worst_term = worst_term.max(relative_error(fd, an));
        }
    }
    let gcn = gcn_weight_gradient()?;
    let summary: Vec<String> = names.iter().zip(&worst).map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(
        unstable == 0 && nn_switches < 20 && worst.iter().all(|&e| e < 1e-3) && gcn < 1e-3,
        format!(
            "max rel. err: {}, GCN weights {gcn:.1e}; visibility changes {unstable}, l3 directions redrawn for a nearest-neighbour switch {nn_switches}",
            summary.join(", ")
        ),
    )
}

/// Nearest-neighbour assignments of the Chamfer term in both directions.
fn assignments(
    mesh: &TriMesh<f64>,
    provenance: &SurfaceSamples<f64>,
    target: &FrameTarget<f64>,
) -> (Vec<usize>, Vec<usize>) {
    let points = provenance.relocated(mesh).points;
    let truth = KdTree::new(target.cloud().to_vec());
    let samples = KdTree::new(points.clone());
    let nearest =
        |tree: &KdTree<f64>, q: &[Vec3<f64>]| q.iter().map(|p| tree.nearest(*p).map_or(usize::MAX, |n| n.0)).collect();
    (nearest(&truth, &points), nearest(&samples, target.cloud()))
}

/// Largest relative error of the weight gradient of the training loss on a single triangle.
fn gcn_weight_gradient() -> Result<f64, String> {
    let cam = CameraModel::<f64>::centered(16, 16, 16.0);
    let tri = TriMesh::new(vec![[-0.45, -0.4, 1.0], [0.5, -0.35, 1.0], [-0.1, 0.45, 1.0]], vec![[0, 1, 2]], 4)
        .map_err(fail)?;
    let tri = tri.with_vertices(tri.vertices.iter().zip([9.0, 10.0, 11.0]).map(|(v, d)| geom::scale(*v, d)).collect());
    let levels = vec![
        Raster::from_fn(8, 8, 3, |x, y, c| ((x * 3 + y * 5 + c) % 7) as f64 * 0.2),
        Raster::from_fn(4, 4, 2, |x, y, c| ((x + y * 2 + c * 3) % 5) as f64 * 0.3),
    ];
    let seg = Raster::from_fn(16, 16, 4, |x, y, c| ((x + 2 * y + 3 * c) % 6) as f64 / 6.0);
    let pyramid = terramesh::features::FeaturePyramid::from_levels(levels).map_err(fail)?;
    let inputs = FrameInputs::with_pyramid(tri, pyramid, Some(seg), cam).map_err(fail)?;
    let labels: Vec<usize> = (0..256).map(|i| (i % 16) / 5).collect();
    let depth = Raster::from_fn(16, 16, 1, |x, _, _| 9.5 + 0.1 * x as f64);
    let mut cfg = RefineConfig::<f64> {
        hidden: 4,
        semantic: true,
        depth_scale: 10.0,
        step_scale: 0.5,
        loss: LossConfig::new(LossWeights::metric_semantic()),
        ..RefineConfig::default()
    };
    cfg.loss.samples = 500;
    let frame =
        TrainingFrame::new(inputs, depth, Some(one_hot(16, 16, 4, &labels)), cfg.loss.samples, 1).map_err(fail)?;
    let mut w = GcnWeights::glorot(5, 4, &cfg);
    w.norm = InputNorm::fit(&[&frame.inputs]).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for m in w.tensors_mut() {
        for v in m.as_mut_slice() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let (_, g) = loss_and_weight_gradient(&frame, &w, &cfg).map_err(fail)?;
    let grads: Vec<Vec<f64>> = g.named_tensors().iter().map(|(_, m)| m.as_slice().to_vec()).collect();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let dir: Vec<Vec<f64>> =
            grads.iter().map(|t| t.iter().map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let eps = 1e-5;
        let shifted = |s: f64| {
            let mut w2 = w.clone();
            for (m, d) in w2.tensors_mut().into_iter().zip(&dir) {
                for (v, dv) in m.as_mut_slice().iter_mut().zip(d) {
                    *v += s * dv;
                }
            }
            training_loss(&frame, &w2, &cfg).map(|r| r.total)
        };
        let fd = (shifted(eps).map_err(fail)? - shifted(-eps).map_err(fail)?) / (2.0 * eps);
        let an: f64 = grads.iter().zip(&dir).flat_map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b)).sum();
        worst = worst.max(relative_error(fd, an));
    }
    Ok(worst)
}

// 6 ------------------------------------------------------------------------------------

fn semantic_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let labels: Vec<usize> = (0..32 * 32).map(|_| rng.random_range(0..4)).collect();
    let truth: Raster<f64> = one_hot(32, 32, 4, &labels);
    let saturated = truth.map(|v| 30.0 * v);
    let dice = loss_semantic(&saturated, &truth, SemanticVariant::Dice, None).map_err(fail)?;
    let ce = loss_semantic(&saturated, &truth, SemanticVariant::CrossEntropy, None).map_err(fail)?;
    let mut identity = 0.0f64;
    let mut focal_violations = 0;
    for _ in 0..20 {
        let scores = Raster::from_fn(32, 32, 4, |_, _, _| rng.random_range(-3.0..3.0));
        let d = loss_semantic(&scores, &truth, SemanticVariant::Dice, None).map_err(fail)?.abs();
        let j = loss_semantic(&scores, &truth, SemanticVariant::Jaccard, None).map_err(fail)?.abs();
        identity = identity.max((j - d / (2.0 - d)).abs());
        for y in 0..32 {
            for x in 0..32 {
                let (c, f) = pixel_ce_focal(scores.pixel(x, y), truth.pixel(x, y));
                if f > c {
                    focal_violations += 1;
                }
            }
        }
    }
    check(
        (dice + 1.0).abs() < 1e-3 && ce.abs() < 1e-3 && identity < 1e-9 && focal_violations == 0,
        format!(
            "dice {dice:.6}, ce {ce:.2e}, Dice-Jaccard gap {identity:.1e}, focal > ce at {focal_violations} pixels"
        ),
    )
}

// 7 ------------------------------------------------------------------------------------

fn edt_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..50 {
        let k = rng.random_range(1..40);
        let seeds: Vec<(usize, usize)> = (0..k).map(|_| (rng.random_range(0..64), rng.random_range(0..64))).collect();
        let fast = edt_squared(&seeds, 64, 64).map_err(fail)?;
        let brute: Vec<i64> = (0..64 * 64)
            .map(|i| {
                let (x, y) = ((i % 64) as i64, (i / 64) as i64);
                seeds.iter().map(|&(sx, sy)| (x - sx as i64).pow(2) + (y - sy as i64).pow(2)).min().unwrap()
            })
            .collect();
        if fast != brute {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches}/50 seed sets differ from brute force"))
}

// 8, 9 ---------------------------------------------------------------------------------

struct TrainingRuns {
    init_l2: f64,
    init_l3: f64,
    geo_l2: f64,
    geo_l3: f64,
    sem_l2: f64,
    elapsed: Duration,
}

fn training_runs() -> Result<TrainingRuns, String> {
    let start = Instant::now();
    let mut frames = Vec::new();
    for seed in 0..4 {
        frames.extend(sweep_frames(seed, 2, 4, [60.0, 60.0], 260.0).map_err(fail)?);
    }
    let run = |cfg: &RefineConfig<f64>| -> terramesh::Result<(f64, f64, f64, f64)> {
        let prepared = frames
            .iter()
            .enumerate()
            .map(|(i, f)| training_frame(f, 32, 1.0, cfg, i as u64))
            .collect::<terramesh::Result<Vec<_>>>()?;
        let (train, test) = prepared.split_at(20);
        let zero = GcnWeights::zeros(train[0].inputs.pyramid.total_channels(), 4, cfg);
        let before = evaluate_frames(test, &zero, cfg)?;
        let trained = train_toy(train, cfg)?;
        let after = evaluate_frames(test, &trained.weights, cfg)?;
        Ok((before.l2, before.l3, after.l2, after.l3))
    };
    let geometric = RefineConfig::<f64>::default();
    let (init_l2, init_l3, geo_l2, geo_l3) = run(&geometric).map_err(fail)?;
    let semantic = RefineConfig::<f64> {
        semantic: true,
        loss: LossConfig::new(LossWeights::metric_semantic()),
        ..RefineConfig::default()
    };
    let (_, _, sem_l2, _) = run(&semantic).map_err(fail)?;
    Ok(TrainingRuns { init_l2, init_l3, geo_l2, geo_l3, sem_l2, elapsed: start.elapsed() })
}

fn refinement_improves(runs: &Result<TrainingRuns, String>) -> Outcome {
    let r = runs.as_ref().map_err(Clone::clone)?;
    let (a, b) = (r.geo_l2 / r.init_l2, r.geo_l3 / r.init_l3);
    check(
        a <= 0.8 && b <= 0.8 && r.elapsed < Duration::from_secs(600),
        format!(
            "held-out l2 {:.3} -> {:.3} ({a:.3}x), l3 {:.3} -> {:.3} ({b:.3}x); both runs {:.0} s",
            r.init_l2,
            r.geo_l2,
            r.init_l3,
            r.geo_l3,
            r.elapsed.as_secs_f64()
        ),
    )
}

fn semantic_training_keeps_geometry(runs: &Result<TrainingRuns, String>) -> Outcome {
    let r = runs.as_ref().map_err(Clone::clone)?;
    let ratio = r.sem_l2 / r.geo_l2;
    check(ratio <= 1.05, format!("held-out l2 joint {:.4} vs geometric {:.4} ({ratio:.3}x)", r.sem_l2, r.geo_l2))
}

// 10 -----------------------------------------------------------------------------------

fn cpd_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let src: Vec<Vec3<f64>> = (0..300)
        .map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), rng.random_range(0.0..1.0)])
        .collect();
    let cfg = CpdConfig::for_edge_length(1.0);
    let t = [0.5, -0.3, 0.2];
    let tgt: Vec<Vec3<f64>> = src.iter().map(|p| geom::add(*p, t)).collect();
    let r = cpd_register(&src, &tgt, &cfg).map_err(fail)?;
    let mean = r.displacement.iter().fold([0.0; 3], |a, b| geom::add(a, *b)).map(|c| c / src.len() as f64);
    let terr = geom::norm(geom::sub(mean, t)) / geom::norm(t);

    let side = 15;
    let grid: Vec<Vec3<f64>> = (0..side * side).map(|k| [(k % side) as f64, (k / side) as f64, 0.0]).collect();
    let warped: Vec<Vec3<f64>> =
        grid.iter().map(|p| [p[0], p[1], 0.4 * (p[0] / 5.0).sin() + 0.3 * (p[1] / 7.0).cos()]).collect();
    let rmse = |a: &[Vec3<f64>]| {
        (a.iter().zip(&warped).map(|(p, q)| geom::sq_dist(*p, *q)).sum::<f64>() / a.len() as f64).sqrt()
    };
    let w = cpd_register(&grid, &warped, &cfg).map_err(fail)?;
    let reduction = rmse(&grid) / rmse(&w.displaced);
    check(
        terr <= 0.05 && reduction >= 10.0,
        format!("translation error {:.2}%, smooth-warp RMSE reduced {reduction:.1}x", 100.0 * terr),
    )
}

// 11 -----------------------------------------------------------------------------------

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let o = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
    let (d1, d2, d3, d4) = (o(a, b, c), o(a, b, d), o(c, d, a), o(c, d, b));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn near_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let t = ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy);
    if !(0.0..=1.0).contains(&t) {
        return false;
    }
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    ex * ex + ey * ey < 1e-6
}

fn cdt_validity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut missing, mut violations, mut constraints_total) = (0, 0, 0);
    for _ in 0..100 {
        let n = rng.random_range(10..80);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
        let mut cons: Vec<[usize; 2]> = Vec::new();
        for _ in 0..n / 3 {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            let blocked = a == b
                || cons.iter().any(|&[c, d]| {
                    let shares = c == a || c == b || d == a || d == b;
                    !shares && segments_cross(pts[a], pts[b], pts[c], pts[d])
                        || (c == a && d == b)
                        || (c == b && d == a)
                })
                || (0..n).any(|k| k != a && k != b && near_segment(pts[k], pts[a], pts[b]));
            if !blocked {
                cons.push([a, b]);
            }
        }
        constraints_total += cons.len();
        let t = constrained_delaunay(&pts, &cons).map_err(fail)?;
        missing += t.missing_constraints().len();
        violations += t.non_delaunay_edges().len();
    }
    check(
        missing == 0 && violations == 0,
        format!("100 instances, {constraints_total} constraints: {missing} missing, {violations} non-Delaunay edges"),
    )
}

// 12 -----------------------------------------------------------------------------------

fn merge_beats_stack() -> Outcome {
    let frames = sweep_frames(0, 1, 5, [80.0, 150.0], 300.0).map_err(fail)?;
    let locals = frames
        .iter()
        .map(|f| to_local(&initial_mesh(f, 32, 1.0)?, &f.camera.pose()))
        .collect::<terramesh::Result<Vec<_>>>()
        .map_err(fail)?;
    let cfg = MergeConfig::default();
    let mut global = GlobalMesh::empty(4);
    for (f, l) in frames.iter().zip(&locals) {
        merge_local(&mut global, f.id, l, &f.camera, &cfg).map_err(fail)?;
    }
    let mut again = global.clone();
    let remerge = merge_local(&mut again, 2, &locals[2], &frames[2].camera, &cfg).map_err(fail)?;
    let noop = remerge.action == MergeAction::SkipDuplicate && again.mesh.vertices == global.mesh.vertices;
    let stacked =
        stack_baseline(&frames.iter().zip(&locals).map(|(f, l)| (f.id, l.clone(), f.camera)).collect::<Vec<_>>())
            .map_err(fail)?;
    let (mut dl_merged, mut dl_stacked) = (0, 0);
    for (f, l) in frames.iter().zip(&locals) {
        dl_merged += double_layers(&global, &f.camera, l.median_edge_length()).map_err(fail)?;
        dl_stacked += double_layers(&stacked, &f.camera, l.median_edge_length()).map_err(fail)?;
    }
    let rendered_l3 = |g: &GlobalMesh<f64>| -> terramesh::Result<f64> {
        let mut total = 0.0;
        for f in &frames {
            let d = render_depth(&g.mesh, &f.camera)?;
            let p = backproject(&d, &f.camera, 10_000, 11)?;
            let q = backproject(&f.truth.depth, &f.camera, 10_000, 13)?;
            total += chamfer(&p, &q)?;
        }
        Ok(total / frames.len() as f64)
    };
    let (lm, ls) = (rendered_l3(&global).map_err(fail)?, rendered_l3(&stacked).map_err(fail)?);
    check(
        lm <= ls && dl_merged == 0 && dl_stacked > 0 && noop,
        format!(
            "l3 merged {lm:.3} vs stacked {ls:.3}; double-layer pixels merged {dl_merged}, stacked {dl_stacked}; re-merge {} (coverage {:.3})",
            remerge.action, remerge.coverage
        ),
    )
}

// 13 -----------------------------------------------------------------------------------

fn storage_claim() -> Outcome {
    let cam = CameraModel::<f64>::centered(512, 512, 512.0).with_pose(&Pose::nadir([0.0, 0.0, 100.0]));
    let mesh = make_grid_mesh(32, &cam.local()).map_err(fail)?;
    let mesh_params = mesh.vertex_count() * (3 + mesh.classes());
    let image_params = cam.width * cam.height * (1 + mesh.classes());
    let ratio = mesh_params as f64 / image_params as f64;
    check(
        mesh_params == 1024 * 7 && image_params == 512 * 512 * 5 && 50 * mesh_params <= image_params,
        format!("{mesh_params} mesh floats vs {image_params} image floats = {:.3}%", 100.0 * ratio),
    )
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let started = Instant::now();
    let runs = training_runs();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("initialization oracle", Box::new(initialization_oracle)),
        ("exact planar recovery", Box::new(planar_recovery)),
        ("renderer round trip", Box::new(renderer_round_trip)),
        ("chamfer oracle", Box::new(chamfer_oracle)),
        ("gradient suite", Box::new(gradient_suite)),
        ("semantic-loss identities", Box::new(semantic_identities)),
        ("EDT exactness", Box::new(edt_exactness)),
        ("refinement improves initialization", Box::new(|| refinement_improves(&runs))),
        ("joint semantic training keeps geometry", Box::new(|| semantic_training_keeps_geometry(&runs))),
        ("CPD recovery", Box::new(cpd_recovery)),
        ("CDT validity", Box::new(cdt_validity)),
        ("merge beats stack", Box::new(merge_beats_stack)),
        ("storage claim", Box::new(storage_claim)),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failures} failed in {:.0} s",
        criteria.len() - failures,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
