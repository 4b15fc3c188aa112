//! Scene files are line-oriented UTF-8. Blank lines and lines starting with
//! `#` are ignored. Every other line is a record:
//!
//! ```text
//! background <r> <g> <b>
//! sphere center <x> <y> <z> radius <r> density <σ> albedo <r> <g> <b>
//! box center <x> <y> <z> half <hx> <hy> <hz> density <σ> albedo <r> <g> <b>
//! ```
//!
//! Keys within a record may appear in any order; each must appear exactly
//! once. Exactly one `background` record is required.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Primitive, Shape, SyntheticScene};
use crate::error::{Error, Result};
use crate::geom::Vec3;

pub fn write_scene(scene: &SyntheticScene) -> String {
    let mut s = String::new();
    let [r, g, b] = scene.background;
    writeln!(s, "background {r} {g} {b}").unwrap();
    for p in &scene.primitives {
        let c = p.center;
        let [ar, ag, ab] = p.albedo;
        match p.shape {
            Shape::Sphere { radius } => write!(s, "sphere center {} {} {} radius {radius}", c.x, c.y, c.z),
            Shape::Box { half } => write!(
                s,
                "box center {} {} {} half {} {} {}",
                c.x, c.y, c.z, half.x, half.y, half.z
            ),
        }
        .unwrap();
        writeln!(s, " density {} albedo {ar} {ag} {ab}", p.density).unwrap();
    }
    s
}

fn perr(line: usize, field: &str, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn parse_numbers<'a>(
    line: usize,
    field: &str,
    tokens: &mut impl Iterator<Item = &'a str>,
    n: usize,
) -> Result<Vec<f64>> {
    (0..n)
        .map(|_| {
            let tok = tokens
                .next()
                .ok_or_else(|| perr(line, field, format!("expected {n} numbers")))?;
            tok.parse::<f64>()
                .map_err(|_| perr(line, field, format!("`{tok}` is not a number")))
        })
        .collect()
}

pub fn parse_scene(text: &str) -> Result<SyntheticScene> {
    let mut background = None;
    let mut primitives = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let kind = tokens.next().unwrap();
        let arity: &[(&str, usize)] = match kind {
            "background" => {
                if background.is_some() {
                    return Err(perr(line, "background", "duplicate background record"));
                }
                let v = parse_numbers(line, "background", &mut tokens, 3)?;
                if tokens.next().is_some() {
                    return Err(perr(line, "background", "trailing tokens"));
                }
                background = Some([v[0], v[1], v[2]]);
                continue;
            }
            "sphere" => &[("center", 3), ("radius", 1), ("density", 1), ("albedo", 3)],
            "box" => &[("center", 3), ("half", 3), ("density", 1), ("albedo", 3)],
            other => return Err(perr(line, "kind", format!("unknown primitive kind `{other}`"))),
        };
        let mut fields: HashMap<&str, Vec<f64>> = HashMap::new();
        while let Some(key) = tokens.next() {
            let (name, n) = arity
                .iter()
                .find(|(k, _)| *k == key)
                .ok_or_else(|| perr(line, key, format!("unknown key for {kind}")))?;
            if fields.contains_key(name) {
                return Err(perr(line, key, "duplicate key"));
            }
            fields.insert(name, parse_numbers(line, key, &mut tokens, *n)?);
        }
        for (k, _) in arity {
            if !fields.contains_key(k) {
                return Err(perr(line, k, "missing key"));
            }
        }
        let center = Vec3::from_array(fields["center"][..3].try_into().unwrap());
        let density = fields["density"][0];
        let albedo: [f64; 3] = fields["albedo"][..3].try_into().unwrap();
        let prim = if kind == "sphere" {
            Primitive::sphere(center, fields["radius"][0], density, albedo)
        } else {
            Primitive::cuboid(
                center,
                Vec3::from_array(fields["half"][..3].try_into().unwrap()),
                density,
                albedo,
            )
        };
        prim.validate().map_err(|e| perr(line, kind, e.to_string()))?;
        primitives.push(prim);
    }
    let background = background.ok_or_else(|| perr(0, "background", "missing background record"))?;
    let scene = SyntheticScene { primitives, background };
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(path: &Path, scene: &SyntheticScene) -> Result<()> {
    std::fs::write(path, write_scene(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<SyntheticScene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text)
}
