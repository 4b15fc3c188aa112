//! Three operations on the bundled benchmark scene, callable from a web page.

use wasm_bindgen::prelude::*;

use dtnerf::diffusion::{forward_diffuse, NoiseSchedule};
use dtnerf::geom::Vec3;
use dtnerf::numerics::{Graph, PrngState, Tensor};
use dtnerf::renderer::{composite, RaySampleBatch, RenderConfig};
use dtnerf::scene::{cast_ray, oracle_render, parse_scene, Camera, Image, RenderSpan, SyntheticScene};

pub const BENCHMARK_SCENE: &str = include_str!("../../core/assets/benchmark.scene");
pub const RADIUS: f64 = 4.0;
pub const FOV_DEG: f64 = 40.0;
pub const NEAR: f64 = 2.0;
pub const FAR: f64 = 6.0;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

pub fn scene() -> dtnerf::Result<SyntheticScene> {
    parse_scene(BENCHMARK_SCENE)
}

/// Camera on the ring around the origin, azimuth in degrees.
pub fn ring_camera(azimuth_deg: f64, size: usize) -> dtnerf::Result<Camera> {
    let phi = azimuth_deg.to_radians();
    let pos = Vec3::new(RADIUS * phi.sin(), 0.0, RADIUS * phi.cos());
    Camera::look_at(pos, Vec3::new(0.0, 0.0, 0.0), size, size, FOV_DEG)
}

/// Interleaved RGBA bytes for a `canvas` `ImageData`.
pub fn rgba(image: &Image) -> Vec<u8> {
    image
        .to_bytes()
        .chunks(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

pub fn render(azimuth_deg: f64, size: usize, samples: usize) -> dtnerf::Result<Image> {
    let cam = ring_camera(azimuth_deg, size)?;
    oracle_render(&scene()?, &cam, RenderSpan::new(NEAR, FAR)?, samples)
}

/// `√ᾱ_t·x + √(1−ᾱ_t)·ε` applied to the view's pixel values, with `ᾱ_t`.
pub fn noised(azimuth_deg: f64, size: usize, t: usize, seed: u64) -> dtnerf::Result<(Image, f64)> {
    let image = render(azimuth_deg, size, 256)?;
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02)?;
    let x0 = Tensor::new([image.data().len()], image.data().to_vec())?;
    let (xt, _) = forward_diffuse(&x0, t, &schedule, &mut PrngState::new(seed))?;
    Ok((Image::from_data(size, size, xt.data().to_vec())?, schedule.alpha(t)))
}

/// Compositing weights `Tᵢ·αᵢ` at `samples` midpoints along the ray through
/// pixel `(px, py)`, followed by the residual transmittance.
pub fn ray_weights(azimuth_deg: f64, size: usize, px: usize, py: usize, samples: usize) -> dtnerf::Result<Vec<f64>> {
    let scene = scene()?;
    let cam = ring_camera(azimuth_deg, size)?;
    let ray = cast_ray(&cam, px, py)?;
    let cfg = RenderConfig::new(NEAR, FAR, samples, scene.background)?;
    let mut sigma = Vec::with_capacity(samples);
    let mut rgb = [vec![], vec![], vec![]];
    for t in cfg.sample_depths(None) {
        let (s, emit) = scene.field_at(ray.at(t));
        sigma.push(s);
        for c in 0..3 {
            rgb[c].push(if s > 0.0 { emit[c] / s } else { 0.0 });
        }
    }
    let row = |v: Vec<f64>| Tensor::new([1, samples], v);
    let [r, gr, b] = rgb;
    let mut g = Graph::new();
    let deltas = Tensor::full([1, samples], cfg.bin_width());
    let batch = RaySampleBatch::from_values(&mut g, row(sigma)?, [row(r)?, row(gr)?, row(b)?], deltas)?;
    let comp = composite(&mut g, &batch, scene.background)?;
    let mut out = g.value(comp.weights).data().to_vec();
    out.push(1.0 - g.value(comp.opacity).item());
    Ok(out)
}

/// Ground-truth view as RGBA.
#[wasm_bindgen(js_name = renderView)]
pub fn render_view(azimuth_deg: f64, size: usize, samples: usize) -> Result<Vec<u8>, JsError> {
    render(azimuth_deg, size, samples).map(|i| rgba(&i)).map_err(err)
}

/// Noised view as RGBA; the last four bytes are not pixels but `ᾱ_t` as a
/// little-endian `f32`.
#[wasm_bindgen(js_name = noiseView)]
pub fn noise_view(azimuth_deg: f64, size: usize, t: usize, seed: u32) -> Result<Vec<u8>, JsError> {
    let (image, alpha) = noised(azimuth_deg, size, t, seed as u64).map_err(err)?;
    let mut out = rgba(&image);
    out.extend_from_slice(&(alpha as f32).to_le_bytes());
    Ok(out)
}

#[wasm_bindgen(js_name = rayWeights)]
pub fn ray_weights_js(
    azimuth_deg: f64,
    size: usize,
    px: usize,
    py: usize,
    samples: usize,
) -> Result<Vec<f64>, JsError> {
    ray_weights(azimuth_deg, size, px, py, samples).map_err(err)
}
