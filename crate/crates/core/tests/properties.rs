use approx::assert_relative_eq;
use proptest::prelude::*;

use terramesh::geom;
use terramesh::io::{decode_raster, encode_raster, format_ply, format_sparse, parse_ply, parse_sparse};
use terramesh::mesh::{make_grid_mesh, normalized_laplacian};
use terramesh::render::{rasterize, render_depth, render_depth_with_jacobian};
use terramesh::{CameraModel, Matrix, Raster, SparseDepth, SparseDepthSet, TriMesh};

fn tilted_grid(side: usize, depths: &[f64]) -> (TriMesh<f64>, CameraModel<f64>) {
    let cam = CameraModel::centered(20, 16, 18.0);
    let flat = make_grid_mesh(side, &cam).unwrap();
    let vertices = flat.vertices.iter().zip(depths.iter().cycle()).map(|(v, d)| geom::scale(*v, *d)).collect();
    (flat.with_vertices(vertices), cam)
}

proptest! {
    #[test]
    fn raster_bytes_round_trip(w in 1usize..9, h in 1usize..9, c in 1usize..4, seed in any::<u32>()) {
        let r = Raster::<f32>::from_fn(w, h, c, |x, y, k| ((x * 31 + y * 17 + k * 7) as u32 ^ seed) as f32 * 1e-3);
        prop_assert_eq!(decode_raster::<f32>(&encode_raster(&r)).unwrap(), r);
    }

    #[test]
    fn sparse_text_round_trip(points in prop::collection::btree_map((0usize..32, 0usize..24), (0.0f64..1.0, 0.0f64..1.0, 0.5f64..500.0), 0..40)) {
        let records = points
            .iter()
            .map(|(&(x, y), &(fu, fv, depth))| SparseDepth { u: x as f64 + fu * 0.999, v: y as f64 + fv * 0.999, depth })
            .collect();
        let set = SparseDepthSet::new(records, 32, 24).unwrap();
        prop_assert_eq!(parse_sparse::<f64>(&format_sparse(&set), 32, 24).unwrap(), set);
    }

    #[test]
    fn ply_round_trip_is_bit_exact(depths in prop::collection::vec(1.0f64..50.0, 16), scores in prop::collection::vec(-3.0f64..3.0, 64)) {
        let (mesh, _) = tilted_grid(4, &depths);
        let mesh = mesh.with_semantics(Matrix::from_fn(16, 4, |i, k| scores[i * 4 + k]));
        prop_assert_eq!(parse_ply::<f64>(&format_ply(&mesh)).unwrap(), mesh);
    }

    #[test]
    fn laplacian_rows_annihilate_constants(side in 2usize..12) {
        let cam = CameraModel::<f64>::centered(8, 8, 8.0);
        let mesh = make_grid_mesh(side, &cam).unwrap();
        let lap = normalized_laplacian(&mesh).unwrap();
        for v in lap.apply_vec(&vec![2.5; mesh.vertex_count()]) {
            prop_assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn every_pixel_of_a_full_grid_is_covered(side in 2usize..10, depths in prop::collection::vec(5.0f64..20.0, 1..8)) {
        let (mesh, cam) = tilted_grid(side, &depths);
        prop_assert_eq!(rasterize(&mesh, &cam).unwrap().covered_count(), cam.pixel_count());
    }
}

#[test]
fn render_jacobian_matches_finite_differences() {
    let (mesh, cam) = tilted_grid(5, &[10.0, 10.3, 9.8, 10.1, 9.9, 10.2, 10.05]);
    let (depth, jac) = render_depth_with_jacobian(&mesh, &cam).unwrap();
    let delta: Vec<_> = (0..mesh.vertex_count()).map(|i| [0.0, 0.0, ((i * 7) % 5) as f64 * 0.2 - 0.4]).collect();
    let eps = 1e-6;
    let moved = |s: f64| {
        let v = mesh.vertices.iter().zip(&delta).map(|(a, d)| geom::add(*a, geom::scale(*d, s))).collect();
        render_depth(&mesh.with_vertices(v), &cam).unwrap()
    };
    let (plus, minus) = (moved(eps), moved(-eps));
    let predicted = jac.directional(cam.pixel_count(), &delta);
    for (i, p) in predicted.iter().enumerate() {
        let (x, y) = (i % depth.width(), i / depth.width());
        let fd = (plus.get(x, y, 0) - minus.get(x, y, 0)) / (2.0 * eps);
        assert_relative_eq!(fd, *p, epsilon = 1e-6, max_relative = 1e-5);
    }
}
