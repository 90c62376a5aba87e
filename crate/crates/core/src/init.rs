//! Closed-form mesh initialization from sparse depth.
//!
//! Inverse depth is affine under barycentric interpolation on the image plane, so each
//! measurement gives one linear equation `b_ijᵀ λ = 1 / D_ij` in the vertex inverse
//! depths. Those equations plus a Laplacian smoothness prior are solved in the
//! least-squares sense through the SPD normal matrix `BᵀB + w·L_nᵀL_n`.

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::linalg::BandedSymmetric;
use crate::mesh::{GridTopology, LaplacianOperator, TriMesh};
use crate::scalar::Real;
use crate::sparse::SparseDepthSet;

/// Default Laplacian weight for the initialization solve.
pub const DEFAULT_W_REG: f64 = 1.0;

/// Barycentric measurement rows `B` (k×n, at most three nonzeros per row) and inverse
/// depths `ρ`.
#[derive(Debug, Clone)]
pub struct MeasurementSystem<T> {
    pub vertex_count: usize,
    pub rows: Vec<([usize; 3], [T; 3])>,
    pub rho: Vec<T>,
}

impl<T: Real> MeasurementSystem<T> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `B x`
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        self.rows.iter().map(|(idx, w)| w[0] * x[idx[0]] + w[1] * x[idx[1]] + w[2] * x[idx[2]]).collect()
    }

    /// Objective `‖Bλ − ρ‖² + w‖L_nλ‖²`.
    pub fn objective(&self, laplacian: &LaplacianOperator<T>, w_reg: T, lambda: &[T]) -> T {
        let data: T = self.apply(lambda).iter().zip(&self.rho).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let reg: T = laplacian.apply_vec(lambda).iter().map(|&x| x * x).sum();
        data + w_reg * reg
    }
}

/// Inverse depth per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDepthVector<T> {
    pub lambda: Vec<T>,
}

pub fn build_system<T: Real>(
    grid: &GridTopology<T>,
    sparse: &SparseDepthSet<T>,
    camera: &CameraModel<T>,
) -> Result<MeasurementSystem<T>> {
    let faces = grid.topology.faces();
    let mut rows = Vec::with_capacity(sparse.len());
    let mut rho = Vec::with_capacity(sparse.len());
    for (i, r) in sparse.records().iter().enumerate() {
        let hit = grid.locate_uv(camera.pixel_to_uv([r.u, r.v])).ok_or_else(|| Error::OutOfDomain {
            index: i,
            detail: format!("measurement at ({}, {}) is outside the grid", r.u, r.v),
        })?;
        rows.push((faces[hit.face], hit.weights));
        rho.push(T::one() / r.depth);
    }
    Ok(MeasurementSystem { vertex_count: grid.vertex_count(), rows, rho })
}

/// Assembles `BᵀB + w·L_nᵀL_n` in banded form together with `Bᵀρ`.
pub fn normal_equations<T: Real>(
    system: &MeasurementSystem<T>,
    laplacian: &LaplacianOperator<T>,
    w_reg: T,
) -> (BandedSymmetric<T>, Vec<T>) {
    let n = system.vertex_count;
    let mut band = 0usize;
    for (idx, _) in &system.rows {
        let lo = idx.iter().min().unwrap();
        let hi = idx.iter().max().unwrap();
        band = band.max(hi - lo);
    }
    if w_reg != T::zero() {
        for i in 0..n {
            let (lo, hi) = laplacian.row(i).fold((usize::MAX, 0), |(lo, hi), (j, _)| (lo.min(j), hi.max(j)));
            band = band.max(hi - lo);
        }
    }
    let mut normal = BandedSymmetric::zeros(n, band);
    let mut rhs = vec![T::zero(); n];
    for ((idx, w), &r) in system.rows.iter().zip(&system.rho) {
        for a in 0..3 {
            rhs[idx[a]] += w[a] * r;
            for b in 0..3 {
                if idx[a] >= idx[b] {
                    normal.add(idx[a], idx[b], w[a] * w[b]);
                }
            }
        }
    }
    if w_reg != T::zero() {
        let mut entries: Vec<(usize, T)> = Vec::new();
        for i in 0..n {
            entries.clear();
            entries.extend(laplacian.row(i));
            for &(j, a) in &entries {
                for &(k, b) in &entries {
                    if j >= k {
                        normal.add(j, k, w_reg * a * b);
                    }
                }
            }
        }
    }
    (normal, rhs)
}

/// `λ* = (BᵀB + w·L_nᵀL_n)⁻¹ Bᵀρ` via banded Cholesky.
pub fn solve_inverse_depths<T: Real>(
    system: &MeasurementSystem<T>,
    laplacian: &LaplacianOperator<T>,
    w_reg: T,
) -> Result<InverseDepthVector<T>> {
    if !(w_reg >= T::zero()) || !w_reg.is_finite() {
        return Err(Error::InvalidArgument(format!("w_reg must be finite and >= 0, got {w_reg}")));
    }
    if laplacian.dim() != system.vertex_count {
        return Err(Error::DimensionMismatch(format!(
            "laplacian is {}x{}, system has {} vertices",
            laplacian.dim(),
            laplacian.dim(),
            system.vertex_count
        )));
    }
    if system.is_empty() {
        return Err(Error::SingularSystem("no measurements".into()));
    }
    let (normal, rhs) = normal_equations(system, laplacian, w_reg);
    let chol = normal.cholesky().map_err(|e| match e {
        Error::SingularSystem(m) => Error::SingularSystem(format!("normal matrix is not positive definite: {m}")),
        other => other,
    })?;
    Ok(InverseDepthVector { lambda: chol.solve(&rhs) })
}

/// Relative residual `‖N λ − Bᵀρ‖ / ‖Bᵀρ‖` of the normal equations.
pub fn normal_residual<T: Real>(
    system: &MeasurementSystem<T>,
    laplacian: &LaplacianOperator<T>,
    w_reg: T,
    lambda: &[T],
) -> T {
    let (normal, rhs) = normal_equations(system, laplacian, w_reg);
    let nl = normal.mul_vec(lambda);
    let num: T = nl.iter().zip(&rhs).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let den: T = rhs.iter().map(|&b| b * b).sum();
    (num / den).sqrt()
}

/// Lifts a flat grid mesh along its camera rays to `[v_x/λ, v_y/λ, 1/λ]`.
pub fn initialize_mesh<T: Real>(
    flat: &TriMesh<T>,
    sparse: &SparseDepthSet<T>,
    camera: &CameraModel<T>,
    w_reg: T,
) -> Result<TriMesh<T>> {
    let grid = grid_of(flat)?;
    let system = build_system(&grid, sparse, camera)?;
    let laplacian = crate::mesh::normalized_laplacian(flat)?;
    let solution = solve_inverse_depths(&system, &laplacian, w_reg)?;
    lift(flat, &solution)
}

/// Applies inverse depths to a flat mesh.
pub fn lift<T: Real>(flat: &TriMesh<T>, solution: &InverseDepthVector<T>) -> Result<TriMesh<T>> {
    let mut vertices = Vec::with_capacity(flat.vertex_count());
    for (i, (&v, &l)) in flat.vertices.iter().zip(&solution.lambda).enumerate() {
        if !(l > T::zero()) || !l.is_finite() {
            return Err(Error::NonPositiveDepth { vertex: i, value: l.to_f64_lossy() });
        }
        vertices.push([v[0] / l, v[1] / l, v[2] / l]);
    }
    Ok(flat.with_vertices(vertices))
}

/// Recovers the grid layout of a mesh built by [`crate::mesh::make_grid_mesh`].
pub fn grid_of<T: Real>(flat: &TriMesh<T>) -> Result<GridTopology<T>> {
    let n = flat.vertex_count();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::InvalidArgument(format!("{n} vertices do not form a square grid")));
    }
    let grid = GridTopology::new(side)?;
    if grid.topology.faces() != flat.faces() {
        return Err(Error::InvalidArgument("mesh topology is not a regular grid".into()));
    }
    Ok(grid)
}
