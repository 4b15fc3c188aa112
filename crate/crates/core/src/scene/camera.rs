use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};

pub const DEFAULT_FOV_DEG: f64 = 40.0;

/// Pinhole camera. The rotation maps camera axes (x right, y down, z along
/// the optical axis) to world space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Mat3,
    pub position: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

impl Camera {
    /// Camera at `position` whose optical axis passes through `target`, with
    /// world +y as the up hint.
    pub fn look_at(position: Vec3, target: Vec3, width: usize, height: usize, fov_deg: f64) -> Result<Self> {
        let forward = (target - position).normalized();
        let right = forward.cross(Vec3::new(0.0, 1.0, 0.0));
        if !(right.norm() > 1e-9) {
            return Err(Error::invalid("camera looks straight along the up axis"));
        }
        let right = right.normalized();
        let down = forward.cross(right);
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        let cam = Camera {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation: Mat3::from_cols(right, down, forward),
            position,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera resolution must be nonzero"));
        }
        if self.rotation.orthonormality_error() > 1e-9 {
            return Err(Error::invalid("camera rotation is not orthonormal"));
        }
        Ok(())
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.cols[2]
    }

    /// The same camera after `x ↦ rigid·x + translation`.
    pub fn transformed(&self, rigid: &Mat3, translation: Vec3) -> Camera {
        Camera {
            rotation: rigid.compose(&self.rotation),
            position: rigid.apply(self.position) + translation,
            ..*self
        }
    }
}

/// Ray through the center of pixel `(px, py)`.
pub fn cast_ray(camera: &Camera, px: usize, py: usize) -> Result<Ray> {
    if px >= camera.width || py >= camera.height {
        return Err(Error::invalid(format!(
            "pixel ({px}, {py}) outside {}×{}",
            camera.width, camera.height
        )));
    }
    let local = Vec3::new(
        (px as f64 + 0.5 - camera.cx) / camera.fx,
        (py as f64 + 0.5 - camera.cy) / camera.fy,
        1.0,
    );
    Ok(Ray {
        origin: camera.position,
        direction: camera.rotation.apply(local).normalized(),
    })
}

pub fn make_camera_ring(n_views: usize, radius: f64, target: Vec3, resolution: (usize, usize)) -> Result<Vec<Camera>> {
    make_camera_ring_at(n_views, radius, target, resolution, 0.0, DEFAULT_FOV_DEG)
}

/// `n_views` cameras at equal azimuth spacing on a circle about `target`,
/// raised by `elevation` radians, all looking at `target`.
pub fn make_camera_ring_at(
    n_views: usize,
    radius: f64,
    target: Vec3,
    (width, height): (usize, usize),
    elevation: f64,
    fov_deg: f64,
) -> Result<Vec<Camera>> {
    if n_views == 0 {
        return Err(Error::invalid("camera ring needs at least one view"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("camera ring radius must be positive"));
    }
    (0..n_views)
        .map(|i| {
            let phi = std::f64::consts::TAU * i as f64 / n_views as f64;
            let offset = Vec3::new(
                elevation.cos() * phi.sin(),
                elevation.sin(),
                elevation.cos() * phi.cos(),
            ) * radius;
            Camera::look_at(target + offset, target, width, height, fov_deg)
        })
        .collect()
}
