//! Pinhole camera with a world-to-camera pose.
//!
//! Pixel coordinates are continuous: pixel `(i, j)` covers `[i, i+1) × [j, j+1)`
//! and is sampled at its center `(i + 0.5, j + 0.5)`.

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec2, Vec3};
use crate::scalar::Real;

/// Camera-to-world rigid transform: `x_world = R x_cam + p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T> {
    pub rotation: Mat3<T>,
    pub position: Vec3<T>,
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self { rotation: geom::identity(), position: [T::zero(); 3] }
    }

    pub fn translation(p: Vec3<T>) -> Self {
        Self { rotation: geom::identity(), position: p }
    }

    pub fn apply(&self, x: Vec3<T>) -> Vec3<T> {
        geom::add(geom::mat_vec(&self.rotation, x), self.position)
    }

    pub fn inverse(&self) -> Self {
        let rt = geom::transpose(&self.rotation);
        let p = geom::mat_vec(&rt, self.position);
        Self { rotation: rt, position: [-p[0], -p[1], -p[2]] }
    }

    /// Downward-looking pose at `position`: camera x = world x, camera y = world −y,
    /// camera z (viewing direction) = world −z.
    pub fn nadir(position: Vec3<T>) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { rotation: [[o, z, z], [z, -o, z], [z, z, -o]], position }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Mat3<T>,
    /// World-to-camera translation (meters).
    pub translation: Vec3<T>,
}

impl<T: Real> CameraModel<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        width: usize,
        height: usize,
        rotation: Mat3<T>,
        translation: Vec3<T>,
    ) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height, rotation, translation };
        cam.validate(T::lit(1e-6))?;
        Ok(cam)
    }

    /// Camera at the origin looking down +z with the principal point at the image center.
    pub fn centered(width: usize, height: usize, focal: T) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: T::from_usize_lossy(width) * T::lit(0.5),
            cy: T::from_usize_lossy(height) * T::lit(0.5),
            width,
            height,
            rotation: geom::identity(),
            translation: [T::zero(); 3],
        }
    }

    pub fn validate(&self, tol: T) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if !geom::is_rotation(&self.rotation, tol) {
            return Err(Error::InvalidArgument("camera rotation is not orthonormal with det +1".into()));
        }
        Ok(())
    }

    /// Replaces the extrinsics so that the camera sits at `pose` (camera-to-world).
    pub fn with_pose(mut self, pose: &Pose<T>) -> Self {
        let inv = pose.inverse();
        self.rotation = inv.rotation;
        self.translation = inv.position;
        self
    }

    /// Camera-to-world pose of this camera.
    pub fn pose(&self) -> Pose<T> {
        Pose { rotation: self.rotation, position: self.translation }.inverse()
    }

    /// Same intrinsics, identity extrinsics.
    pub fn local(&self) -> Self {
        let mut c = *self;
        c.rotation = geom::identity();
        c.translation = [T::zero(); 3];
        c
    }

    #[inline]
    pub fn world_to_camera(&self, x: Vec3<T>) -> Vec3<T> {
        geom::add(geom::mat_vec(&self.rotation, x), self.translation)
    }

    #[inline]
    pub fn camera_to_world(&self, x: Vec3<T>) -> Vec3<T> {
        geom::mat_t_vec(&self.rotation, geom::sub(x, self.translation))
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    #[inline]
    pub fn project(&self, x: Vec3<T>) -> Vec2<T> {
        [self.fx * x[0] / x[2] + self.cx, self.fy * x[1] / x[2] + self.cy]
    }

    /// Ray direction (camera frame, unit z) through continuous pixel coordinates.
    #[inline]
    pub fn pixel_ray(&self, px: Vec2<T>) -> Vec3<T> {
        [(px[0] - self.cx) / self.fx, (px[1] - self.cy) / self.fy, T::one()]
    }

    /// Center of pixel `(i, j)`.
    #[inline]
    pub fn pixel_center(i: usize, j: usize) -> Vec2<T> {
        [T::from_usize_lossy(i) + T::lit(0.5), T::from_usize_lossy(j) + T::lit(0.5)]
    }

    /// Continuous pixel coordinates → normalized image coordinates in `[0, 1]²`.
    #[inline]
    pub fn pixel_to_uv(&self, px: Vec2<T>) -> Vec2<T> {
        [px[0] / T::from_usize_lossy(self.width), px[1] / T::from_usize_lossy(self.height)]
    }

    #[inline]
    pub fn uv_to_pixel(&self, uv: Vec2<T>) -> Vec2<T> {
        [uv[0] * T::from_usize_lossy(self.width), uv[1] * T::from_usize_lossy(self.height)]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn cast<U: Real>(&self) -> CameraModel<U> {
        let c = |x: T| crate::scalar::cast::<T, U>(x);
        CameraModel {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            width: self.width,
            height: self.height,
            rotation: self.rotation.map(|r| r.map(c)),
            translation: self.translation.map(c),
        }
    }
}
