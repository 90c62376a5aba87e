//! Sparse depth measurements `(pixel, depth)`.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// One measurement at continuous pixel coordinates `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseDepth<T> {
    pub u: T,
    pub v: T,
    pub depth: T,
}

impl<T: Real> SparseDepth<T> {
    /// Integer pixel containing the measurement.
    pub fn pixel(&self) -> (usize, usize) {
        (self.u.floor().to_usize().unwrap_or(0), self.v.floor().to_usize().unwrap_or(0))
    }
}

/// Validated measurement set: finite positive depths, in-bounds pixels, at most one
/// measurement per integer pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepthSet<T> {
    width: usize,
    height: usize,
    records: Vec<SparseDepth<T>>,
}

impl<T: Real> SparseDepthSet<T> {
    pub fn new(records: Vec<SparseDepth<T>>, width: usize, height: usize) -> Result<Self> {
        let w = T::from_usize_lossy(width);
        let h = T::from_usize_lossy(height);
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !(r.depth > T::zero()) || !r.depth.is_finite() {
                return Err(Error::Validation(format!("record {i}: depth {} is not positive and finite", r.depth)));
            }
            if !(r.u >= T::zero() && r.u < w && r.v >= T::zero() && r.v < h) {
                return Err(Error::Validation(format!(
                    "record {i}: pixel ({}, {}) outside {width}x{height}",
                    r.u, r.v
                )));
            }
            if !seen.insert(r.pixel()) {
                return Err(Error::Validation(format!("record {i}: duplicate measurement on pixel {:?}", r.pixel())));
            }
        }
        Ok(Self { width, height, records })
    }

    pub fn records(&self) -> &[SparseDepth<T>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cast<U: Real>(&self) -> SparseDepthSet<U> {
        let c = crate::scalar::cast::<T, U>;
        SparseDepthSet {
            width: self.width,
            height: self.height,
            records: self.records.iter().map(|r| SparseDepth { u: c(r.u), v: c(r.v), depth: c(r.depth) }).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: f64, v: f64, depth: f64) -> SparseDepth<f64> {
        SparseDepth { u, v, depth }
    }

    #[test]
    fn validation() {
        assert!(SparseDepthSet::new(vec![rec(0.5, 0.5, 2.0), rec(1.5, 0.5, 3.0)], 4, 4).is_ok());
        assert!(SparseDepthSet::new(vec![rec(0.5, 0.5, 0.0)], 4, 4).is_err());
        assert!(SparseDepthSet::new(vec![rec(0.5, 0.5, f64::NAN)], 4, 4).is_err());
        assert!(SparseDepthSet::new(vec![rec(4.0, 0.5, 1.0)], 4, 4).is_err());
        let dup = SparseDepthSet::new(vec![rec(0.5, 0.5, 2.0), rec(0.7, 0.2, 3.0)], 4, 4);
        match dup {
            Err(Error::Validation(m)) => assert!(m.contains("record 1")),
            other => panic!("{other:?}"),
        }
    }
}
