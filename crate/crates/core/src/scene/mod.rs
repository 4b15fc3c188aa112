//! Procedural ground-truth worlds: constant-density spheres and boxes, a
//! pinhole camera model, a quadrature reference renderer and surface
//! point sampling.

mod camera;
mod image;
mod io;
mod oracle;
mod pointcloud;

pub use camera::{cast_ray, make_camera_ring, make_camera_ring_at, Camera, Ray, DEFAULT_FOV_DEG};
pub use image::Image;
pub use io::{load_scene, parse_scene, save_scene, write_scene};
pub use oracle::{oracle_render, RenderSpan};
pub use pointcloud::{sample_point_cloud, PointCloud};

use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::numerics::PrngState;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: Vec3 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    /// Extinction coefficient, per unit length.
    pub density: f64,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn sphere(center: Vec3, radius: f64, density: f64, albedo: [f64; 3]) -> Self {
        Self {
            shape: Shape::Sphere { radius },
            center,
            density,
            albedo,
        }
    }

    pub fn cuboid(center: Vec3, half: Vec3, density: f64, albedo: [f64; 3]) -> Self {
        Self {
            shape: Shape::Box { half },
            center,
            density,
            albedo,
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let d = p - self.center;
        match self.shape {
            Shape::Sphere { radius } => d.dot(d) <= radius * radius,
            Shape::Box { half } => d.x.abs() <= half.x && d.y.abs() <= half.y && d.z.abs() <= half.z,
        }
    }

    pub fn surface_area(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => 4.0 * std::f64::consts::PI * radius * radius,
            Shape::Box { half } => 8.0 * (half.x * half.y + half.y * half.z + half.x * half.z),
        }
    }

    fn validate(&self) -> Result<()> {
        let size_ok = match self.shape {
            Shape::Sphere { radius } => radius > 0.0 && radius.is_finite(),
            Shape::Box { half } => half.is_finite() && half.x > 0.0 && half.y > 0.0 && half.z > 0.0,
        };
        if !size_ok || !self.center.is_finite() {
            return Err(Error::invalid(format!("degenerate primitive {self:?}")));
        }
        if !(self.density >= 0.0 && self.density.is_finite()) {
            return Err(Error::invalid(format!("density must be ≥ 0, got {}", self.density)));
        }
        if !in_unit_cube(self.albedo) {
            return Err(Error::invalid(format!("albedo {:?} outside [0,1]³", self.albedo)));
        }
        Ok(())
    }
}

fn in_unit_cube(c: [f64; 3]) -> bool {
    c.iter().all(|v| (0.0..=1.0).contains(v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

impl SyntheticScene {
    pub fn new(primitives: Vec<Primitive>, background: [f64; 3]) -> Result<Self> {
        let scene = Self { primitives, background };
        scene.validate()?;
        Ok(scene)
    }

    pub fn empty(background: [f64; 3]) -> Self {
        Self {
            primitives: Vec::new(),
            background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !in_unit_cube(self.background) {
            return Err(Error::invalid(format!(
                "background {:?} outside [0,1]³",
                self.background
            )));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    /// Total extinction and the extinction-weighted emission `Σ σₖ cₖ` at `p`.
    pub fn field_at(&self, p: Vec3) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut emit = [0.0; 3];
        for prim in &self.primitives {
            if prim.density > 0.0 && prim.contains(p) {
                sigma += prim.density;
                for (e, a) in emit.iter_mut().zip(prim.albedo) {
                    *e += prim.density * a;
                }
            }
        }
        (sigma, emit)
    }

    /// Applies `x ↦ rotation·x + translation` to every primitive. Boxes stay
    /// axis-aligned only under rotations that permute axes.
    pub fn transformed(&self, quarter_turns_y: i32, translation: Vec3) -> SyntheticScene {
        let r = Mat3::quarter_turns_y(quarter_turns_y);
        let primitives = self
            .primitives
            .iter()
            .map(|p| {
                let shape = match p.shape {
                    Shape::Sphere { radius } => Shape::Sphere { radius },
                    Shape::Box { half } if quarter_turns_y.rem_euclid(2) == 1 => Shape::Box {
                        half: Vec3::new(half.z, half.y, half.x),
                    },
                    s => s,
                };
                Primitive {
                    shape,
                    center: r.apply(p.center) + translation,
                    ..*p
                }
            })
            .collect();
        SyntheticScene {
            primitives,
            background: self.background,
        }
    }

    /// Two spheres and a box with seeded jitter, laid out around the origin
    /// so that a ring of cameras sees mutual occlusion.
    pub fn generate(seed: u64) -> SyntheticScene {
        let mut rng = PrngState::derive(seed, 0x5CE7E);
        let mut j = |scale: f64| (2.0 * rng.uniform() - 1.0) * scale;
        let mut tint = |base: [f64; 3]| base.map(|c| (c + j(0.1)).clamp(0.05, 0.95));
        let albedos = [tint([0.85, 0.25, 0.2]), tint([0.2, 0.45, 0.85]), tint([0.9, 0.8, 0.25])];
        let mut j = |scale: f64| (2.0 * rng.uniform() - 1.0) * scale;
        SyntheticScene {
            primitives: vec![
                Primitive::sphere(
                    Vec3::new(-0.55 + j(0.1), 0.1 + j(0.1), 0.2 + j(0.1)),
                    0.5 + j(0.05),
                    12.0,
                    albedos[0],
                ),
                Primitive::sphere(
                    Vec3::new(0.6 + j(0.1), 0.2 + j(0.1), -0.3 + j(0.1)),
                    0.4 + j(0.05),
                    12.0,
                    albedos[1],
                ),
                Primitive::cuboid(
                    Vec3::new(0.1 + j(0.1), -0.45 + j(0.05), 0.45 + j(0.1)),
                    Vec3::new(0.35 + j(0.05), 0.3 + j(0.05), 0.3 + j(0.05)),
                    12.0,
                    albedos[2],
                ),
            ],
            background: [0.1, 0.1, 0.12],
        }
    }
}
