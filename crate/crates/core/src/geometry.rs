//! Pinhole cameras, rays and fronto-parallel plane warps.
//!
//! Conventions: right-handed frames, +z forward in camera space, image
//! origin at the top-left, pixel centers at integer coordinates. A pose maps
//! world coordinates into the camera frame: `x_cam = R x_world + T`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{domain, Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.abs().max() > ORTHONORMAL_TOL {
            return domain("rotation is not orthonormal");
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return domain("rotation determinant is not +1");
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return domain("translation is not finite");
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Pose of a camera with orientation `rotation` whose center sits at
    /// `center` in world coordinates.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        Self::new(rotation, -(rotation * center))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (cam - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: Pose,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        pose: Pose,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return domain(format!("focal lengths must be positive, got ({fx}, {fy})"));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return domain(format!(
                "principal point ({cx}, {cy}) outside the {width}x{height} image"
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
        })
    }

    /// Same intrinsics with a different pose.
    pub fn with_pose(&self, pose: Pose) -> Self {
        Self { pose, ..*self }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unnormalized camera-frame direction through pixel `(x, y)`.
    fn camera_direction(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Back-projects a pixel into a world-space ray from the camera center.
pub fn make_ray(cam: &Camera, px: (f64, f64)) -> Result<Ray> {
    let (x, y) = px;
    if !(x >= 0.0 && x < cam.width as f64 && y >= 0.0 && y < cam.height as f64) {
        return domain(format!(
            "pixel ({x}, {y}) outside the {}x{} image",
            cam.width, cam.height
        ));
    }
    let d_cam = cam.camera_direction(x, y).normalize();
    let direction = (cam.pose.rotation().transpose() * d_cam).normalize();
    Ok(Ray {
        origin: cam.pose.center(),
        direction,
        t_near: f64::MIN_POSITIVE,
        t_far: f64::INFINITY,
    })
}

/// Pinhole projection. Returns the pixel and the camera-frame depth.
pub fn project(cam: &Camera, world: &Vector3<f64>) -> Result<(f64, f64, f64)> {
    let p = cam.pose.to_camera(world);
    if p.z <= 0.0 {
        return Err(Error::BehindCamera(p.z));
    }
    Ok((
        cam.fx * p.x / p.z + cam.cx,
        cam.fy * p.y / p.z + cam.cy,
        p.z,
    ))
}

/// Where a target ray meets a source-frame plane `z = depth`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneHit {
    /// Source-image pixel coordinates.
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Intersection point in the source camera frame.
    pub point: Vector3<f64>,
    /// Parameter along the target ray in source-frame units.
    pub ray_param: f64,
}

/// A target pixel's ray expressed in the source camera frame.
///
/// Intersecting it with each fronto-parallel plane realizes the
/// plane-induced homography between the two views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceRay {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl SourceRay {
    pub fn new(src: &Camera, tgt: &Camera, px: (f64, f64)) -> Result<Self> {
        let ray = make_ray(tgt, px)?;
        Ok(Self::from_world_ray(src, &ray))
    }

    pub fn from_world_ray(src: &Camera, ray: &Ray) -> Self {
        Self {
            origin: src.pose.to_camera(&ray.origin),
            direction: src.pose.rotation() * ray.direction,
            fx: src.fx,
            fy: src.fy,
            cx: src.cx,
            cy: src.cy,
        }
    }

    /// Intersection with the plane `z = depth`; `None` when the ray is
    /// parallel to the plane or meets it at a non-positive parameter.
    pub fn intersect(&self, depth: f64) -> Option<PlaneHit> {
        let dz = self.direction.z;
        if dz.abs() < 1e-12 || depth <= 0.0 {
            return None;
        }
        let s = (depth - self.origin.z) / dz;
        if !(s > 0.0) {
            return None;
        }
        let mut point = self.origin + self.direction * s;
        point.z = depth;
        Some(PlaneHit {
            x: self.fx * point.x / depth + self.cx,
            y: self.fy * point.y / depth + self.cy,
            z: depth,
            point,
            ray_param: s,
        })
    }

    /// Derivative of the intersection point with respect to plane depth.
    pub fn point_rate(&self) -> Vector3<f64> {
        self.direction / self.direction.z
    }

    /// Derivative of the projected source pixel with respect to plane depth,
    /// for a hit produced by [`SourceRay::intersect`].
    pub fn pixel_rate(&self, hit: &PlaneHit) -> (f64, f64) {
        let dp = self.point_rate();
        let z = hit.z;
        (
            self.fx * (dp.x * z - hit.point.x) / (z * z),
            self.fy * (dp.y * z - hit.point.y) / (z * z),
        )
    }
}

/// Maps a target pixel onto the source plane at depth `z`.
pub fn warp_to_plane(
    src: &Camera,
    tgt: &Camera,
    z: f64,
    px: (f64, f64),
) -> Result<Option<PlaneHit>> {
    if !(z > 0.0) {
        return domain(format!("plane depth must be positive, got {z}"));
    }
    Ok(SourceRay::new(src, tgt, px)?.intersect(z))
}
