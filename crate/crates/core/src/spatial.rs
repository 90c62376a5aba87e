//! Static 3D kd-tree for exact nearest-neighbour queries.
//!
//! Results are identical to an exhaustive scan: the reported neighbour minimizes
//! `(squared distance, index)` lexicographically.

use crate::geom::{sq_dist, Vec3};
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct KdTree<T> {
    points: Vec<Vec3<T>>,
    /// Permuted point indices; each subrange `[lo, hi)` stores its splitting point at
    /// the midpoint, smaller coordinates to the left.
    order: Vec<usize>,
    axis: Vec<u8>,
}

impl<T: Real> KdTree<T> {
    pub fn new(points: Vec<Vec3<T>>) -> Self {
        let n = points.len();
        let mut tree = Self { points, order: (0..n).collect(), axis: vec![0; n] };
        tree.build(0, n);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        let mut axis = 0;
        let mut best = T::neg_infinity();
        for a in 0..3 {
            let (mut mn, mut mx) = (T::infinity(), T::neg_infinity());
            for &i in &self.order[lo..hi] {
                mn = mn.min(self.points[i][a]);
                mx = mx.max(self.points[i][a]);
            }
            if mx - mn > best {
                best = mx - mn;
                axis = a;
            }
        }
        let mid = (lo + hi) / 2;
        let pts = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a][axis].partial_cmp(&pts[b][axis]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        self.axis[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// Nearest point to `q` as `(index, squared distance)`; `None` for an empty tree.
    pub fn nearest(&self, q: Vec3<T>) -> Option<(usize, T)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, T::infinity());
        self.search(q, 0, self.points.len(), &mut best);
        Some(best)
    }

    fn search(&self, q: Vec3<T>, lo: usize, hi: usize, best: &mut (usize, T)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid];
        let p = self.points[i];
        let d = sq_dist(q, p);
        if d < best.1 || (d == best.1 && i < best.0) {
            *best = (i, d);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < T::zero() { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

/// Exhaustive nearest neighbour with the same tie rule as [`KdTree::nearest`].
pub fn brute_nearest<T: Real>(points: &[Vec3<T>], q: Vec3<T>) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, &p) in points.iter().enumerate() {
        let d = sq_dist(q, p);
        if best.is_none_or(|b| d < b.1) {
            best = Some((i, d));
        }
    }
    best
}
