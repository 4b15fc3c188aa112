use super::camera::{cast_ray, Camera};
use super::image::Image;
use super::SyntheticScene;
use crate::error::{Error, Result};

/// Ray-parameter interval integrated by renderers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSpan {
    pub near: f64,
    pub far: f64,
}

impl RenderSpan {
    pub fn new(near: f64, far: f64) -> Result<Self> {
        if !(near < far) || !near.is_finite() || !far.is_finite() {
            return Err(Error::invalid(format!("degenerate span: near {near} ≥ far {far}")));
        }
        Ok(Self { near, far })
    }
}

/// Ground-truth emission–absorption rendering: midpoint quadrature over
/// `samples_per_ray` equal segments of `[near, far]`, each treated as having
/// the field value at its midpoint, plus transmittance-weighted background.
pub fn oracle_render(
    scene: &SyntheticScene,
    camera: &Camera,
    span: RenderSpan,
    samples_per_ray: usize,
) -> Result<Image> {
    if samples_per_ray < 2 {
        return Err(Error::invalid("oracle needs at least 2 samples per ray"));
    }
    let span = RenderSpan::new(span.near, span.far)?;
    let delta = (span.far - span.near) / samples_per_ray as f64;
    let mut image = Image::new(camera.width, camera.height);
    for py in 0..camera.height {
        for px in 0..camera.width {
            let ray = cast_ray(camera, px, py)?;
            let mut transmittance = 1.0;
            let mut rgb = [0.0; 3];
            for i in 0..samples_per_ray {
                let t = span.near + (i as f64 + 0.5) * delta;
                let (sigma, emit) = scene.field_at(ray.at(t));
                if sigma == 0.0 {
                    continue;
                }
                let alpha = 1.0 - (-sigma * delta).exp();
                let w = transmittance * alpha;
                for c in 0..3 {
                    rgb[c] += w * emit[c] / sigma;
                }
                transmittance *= 1.0 - alpha;
            }
            for (out, bg) in rgb.iter_mut().zip(scene.background) {
                *out += transmittance * bg;
            }
            image.set(px, py, rgb);
        }
    }
    Ok(image)
}
