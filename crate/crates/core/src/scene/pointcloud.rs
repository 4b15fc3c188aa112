use std::fmt::Write as _;
use std::path::Path;

use super::{Shape, SyntheticScene};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::numerics::PrngState;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// ASCII, one `x y z` line per point.
    pub fn to_xyz(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            writeln!(s, "{} {} {}", p.x, p.y, p.z).unwrap();
        }
        s
    }

    pub fn parse_xyz(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    field: "xyz".into(),
                    msg: format!("{e}"),
                })?;
            if vals.len() != 3 {
                return Err(Error::Parse {
                    line: i + 1,
                    field: "xyz".into(),
                    msg: format!("expected 3 values, found {}", vals.len()),
                });
            }
            points.push(Vec3::new(vals[0], vals[1], vals[2]));
        }
        Ok(Self { points })
    }

    pub fn write_xyz(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_xyz()).map_err(|e| Error::io(path, e))
    }

    pub fn read_xyz(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_xyz(&text)
    }
}

/// `n` points uniformly distributed over the union of primitive surfaces
/// (each primitive chosen proportionally to its area).
pub fn sample_point_cloud(scene: &SyntheticScene, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("point cloud size must be ≥ 1"));
    }
    if scene.primitives.is_empty() {
        return Err(Error::invalid("cannot sample an empty scene"));
    }
    let areas: Vec<f64> = scene.primitives.iter().map(|p| p.surface_area()).collect();
    let total: f64 = areas.iter().sum();
    let mut rng = PrngState::new(seed);
    let mut points = Vec::with_capacity(n);
    let mut normal = [0.0; 3];
    for _ in 0..n {
        let pick = pick_weighted(&areas, total, rng.uniform());
        let prim = &scene.primitives[pick];
        let p = match prim.shape {
            Shape::Sphere { radius } => loop {
                rng.fill_normal(&mut normal);
                let v = Vec3::from_array(normal);
                let len = v.norm();
                if len > 1e-12 {
                    break prim.center + v * (radius / len);
                }
            },
            Shape::Box { half } => {
                let h = half.to_array();
                // Face pairs normal to x, y, z have areas 4·h_y·h_z etc.
                let faces = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let axis = pick_weighted(&faces, faces.iter().sum(), rng.uniform());
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let mut local = [0.0; 3];
                for k in 0..3 {
                    local[k] = if k == axis {
                        sign * h[k]
                    } else {
                        (2.0 * rng.uniform() - 1.0) * h[k]
                    };
                }
                prim.center + Vec3::from_array(local)
            }
        };
        points.push(p);
    }
    Ok(PointCloud { points })
}

fn pick_weighted(weights: &[f64], total: f64, u: f64) -> usize {
    let mut target = u * total;
    for (i, w) in weights.iter().enumerate() {
        if target < *w {
            return i;
        }
        target -= w;
    }
    weights.len() - 1
}
