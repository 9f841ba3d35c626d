//! Pinhole cameras, ray generation and the lift / transform / project chain used
//! to warp pixels between views.
//!
//! Conventions: OpenCV camera axes (+X right, +Y down, +Z forward), rotation is
//! world-from-camera, translation is the camera center in world units. Integer
//! pixel coordinates address pixel centers, so the ray for pixel `(u, v)` passes
//! through the image-plane point `(u + 0.5, v + 0.5)`. Depth along a ray is the
//! Euclidean distance from the camera center, not the camera-frame z.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{FrugalError, Result};

pub type Point3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-9;
const MIN_Z: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-from-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub translation: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`. `up` is the world up direction; the
    /// camera +Y axis points away from it.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Point3,
        target: Point3,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let rotation = look_at_rotation(eye, target, up)?;
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            eye,
            near,
            far,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(FrugalError::Domain(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(FrugalError::Domain(format!(
                "need 0 < near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(FrugalError::Domain("image dimensions must be nonzero".into()));
        }
        let r = &self.rotation;
        let gram = r.transpose() * r;
        if (gram - Matrix3::identity()).abs().max() > ORTHO_TOL
            || (r.determinant() - 1.0).abs() > ORTHO_TOL
        {
            return Err(FrugalError::Domain(
                "rotation must be orthonormal with determinant 1".into(),
            ));
        }
        let finite = [self.cx, self.cy, self.near, self.far]
            .iter()
            .chain(self.translation.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(FrugalError::Domain("camera parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Point3 {
        self.translation
    }

    /// Row-major 4x4 camera-to-world matrix.
    pub fn c2w(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn split_c2w(m: &[f64; 16]) -> (Matrix3<f64>, Vector3<f64>) {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        (rotation, translation)
    }

    pub fn contains(&self, px: PixelCoord) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }

    /// Unit world-space direction through `px` without a bounds check.
    pub fn pixel_direction(&self, px: PixelCoord) -> Vector3<f64> {
        let local = Vector3::new(
            (px.u + 0.5 - self.cx) / self.fx,
            (px.v + 0.5 - self.cy) / self.fy,
            1.0,
        );
        (self.rotation * local).normalize()
    }

    pub fn with_pose(&self, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Self::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            rotation,
            translation,
            self.near,
            self.far,
        )
    }
}

/// OpenCV-convention world-from-camera rotation looking from `eye` to `target`.
pub fn look_at_rotation(eye: Point3, target: Point3, up: Vector3<f64>) -> Result<Matrix3<f64>> {
    let forward = target - eye;
    if forward.norm() < 1e-12 {
        return Err(FrugalError::Domain("look-at target coincides with eye".into()));
    }
    let z = forward.normalize();
    let x = (-up).cross(&z);
    if x.norm() < 1e-12 {
        return Err(FrugalError::Domain("up vector parallel to viewing direction".into()));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Ok(Matrix3::from_columns(&[x, y, z]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub dir: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.dir * t
    }
}

pub fn ray_for_pixel(cam: &Camera, px: PixelCoord) -> Result<Ray> {
    if !cam.contains(px) {
        return Err(FrugalError::OutOfBounds {
            u: px.u,
            v: px.v,
            width: cam.width,
            height: cam.height,
        });
    }
    Ok(Ray {
        origin: cam.translation,
        dir: cam.pixel_direction(px),
        near: cam.near,
        far: cam.far,
    })
}

/// World point at distance `depth` along the ray through `px`.
pub fn lift_to_world(px: PixelCoord, depth: f64, cam: &Camera) -> Result<Point3> {
    if !(depth > 0.0) {
        return Err(FrugalError::Domain(format!("depth must be positive, got {depth}")));
    }
    let ray = ray_for_pixel(cam, px)?;
    Ok(ray.at(depth))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: PixelCoord,
    /// Camera-frame z of the point.
    pub z: f64,
    /// Set when the point is at or behind the image plane origin; `pixel` is
    /// meaningless in that case.
    pub behind: bool,
}

pub fn project_to_camera(x: &Point3, cam: &Camera) -> Projection {
    let local = cam.rotation.transpose() * (x - cam.translation);
    let z = local.z;
    if z <= MIN_Z {
        return Projection {
            pixel: PixelCoord::new(f64::NAN, f64::NAN),
            z,
            behind: true,
        };
    }
    let u = cam.fx * local.x / z + cam.cx - 0.5;
    let v = cam.fy * local.y / z + cam.cy - 0.5;
    Projection {
        pixel: PixelCoord::new(u, v),
        z,
        behind: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reprojection {
    pub pixel: PixelCoord,
    pub valid: bool,
}

/// Warp `px` of `cam_i` at along-ray `depth` into `cam_j`. The result is valid
/// when the point lies in front of `cam_j` and `pixel ± margin` stays inside the
/// interpolable region `[0, width - 1] x [0, height - 1]`.
pub fn reproject(
    px: PixelCoord,
    depth: f64,
    cam_i: &Camera,
    cam_j: &Camera,
    margin: f64,
) -> Reprojection {
    let invalid = Reprojection {
        pixel: PixelCoord::new(f64::NAN, f64::NAN),
        valid: false,
    };
    if !(depth > 0.0) || !depth.is_finite() {
        return invalid;
    }
    let world = cam_i.translation + cam_i.pixel_direction(px) * depth;
    let proj = project_to_camera(&world, cam_j);
    if proj.behind {
        return invalid;
    }
    let p = proj.pixel;
    let max_u = cam_j.width as f64 - 1.0 - margin;
    let max_v = cam_j.height as f64 - 1.0 - margin;
    let valid = p.u >= margin && p.v >= margin && p.u <= max_u && p.v <= max_v;
    Reprojection { pixel: p, valid }
}
