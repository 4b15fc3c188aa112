//! Image and geometry quality metrics.
//!
//! All image metrics accumulate in flat row-major order so that results are
//! reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::PointCloud;

/// Two equal-length images plus their dynamic range.
#[derive(Clone, Copy, Debug)]
pub struct ImagePair<'a> {
    pub pred: &'a [f64],
    pub truth: &'a [f64],
    pub max: f64,
}

impl<'a> ImagePair<'a> {
    pub fn new(pred: &'a [f64], truth: &'a [f64], max: f64) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::shape("image pair", &[pred.len()], &[truth.len()]));
        }
        if pred.is_empty() {
            return Err(Error::invalid("empty images"));
        }
        if !(max > 0.0) {
            return Err(Error::invalid(format!("MAX must be positive, got {max}")));
        }
        Ok(Self { pred, truth, max })
    }

    /// Float images in `[0, 1]`.
    pub fn unit(pred: &'a [f64], truth: &'a [f64]) -> Result<Self> {
        Self::new(pred, truth, 1.0)
    }
}

pub fn mse(pair: &ImagePair) -> f64 {
    let n = pair.pred.len() as f64;
    pair.pred
        .iter()
        .zip(pair.truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio in dB; `+∞` for identical images.
pub fn psnr(pair: &ImagePair) -> f64 {
    psnr_from_mse(mse(pair), pair.max)
}

pub fn psnr_from_mse(mse: f64, max: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max * max / mse).log10()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    pub fn for_range(max: f64) -> Self {
        Self {
            c1: (0.01 * max).powi(2),
            c2: (0.03 * max).powi(2),
        }
    }
}

/// Structural similarity computed once over the whole image (no window).
pub fn ssim(pair: &ImagePair, constants: Option<SsimConstants>) -> f64 {
    let SsimConstants { c1, c2 } = constants.unwrap_or_else(|| SsimConstants::for_range(pair.max));
    let n = pair.pred.len() as f64;
    let mx = pair.pred.iter().sum::<f64>() / n;
    let my = pair.truth.iter().sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (a, b) in pair.pred.iter().zip(pair.truth) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    let (vx, vy, cov) = (vx / n, vy / n, cov / n);
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn nearest(p: &crate::geom::Vec3, cloud: &[crate::geom::Vec3]) -> f64 {
    cloud
        .iter()
        .map(|q| (*p - *q).dot(*p - *q))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

fn one_sided(from: &PointCloud, to: &PointCloud) -> f64 {
    from.points.iter().map(|p| nearest(p, &to.points)).sum::<f64>() / from.len() as f64
}

/// Symmetric mean nearest-neighbour distance (unsquared Euclidean).
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::invalid("chamfer distance of an empty cloud"));
    }
    Ok(one_sided(p, q) + one_sided(q, p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// Mean absolute error; lower is better.
    pub mae: f64,
    /// `1 − mae / MAX`; higher is better.
    pub sim: f64,
}

pub fn fidelity(pair: &ImagePair) -> Fidelity {
    let n = pair.pred.len() as f64;
    let mae = pair
        .pred
        .iter()
        .zip(pair.truth)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    Fidelity {
        mae,
        sim: 1.0 - mae / pair.max,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run: String,
    pub variant: String,
    pub view: String,
    #[serde(with = "json_float")]
    pub mse: f64,
    #[serde(with = "json_float")]
    pub psnr_db: f64,
    #[serde(with = "json_float")]
    pub ssim: f64,
    #[serde(with = "json_float")]
    pub chamfer: f64,
    #[serde(with = "json_float")]
    pub fidelity_mae: f64,
    #[serde(with = "json_float")]
    pub fidelity_sim: f64,
}

/// JSON has no `inf` or `nan`; those travel as the strings used in CSV.
mod json_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::fmt_value(*v))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => super::parse_value(&t).map_err(de::Error::custom),
        }
    }
}

impl MetricsReport {
    pub fn compute(
        run: &str,
        variant: &str,
        view: &str,
        pair: &ImagePair,
        predicted: &PointCloud,
        truth: &PointCloud,
    ) -> Self {
        let m = mse(pair);
        let f = fidelity(pair);
        Self {
            run: run.into(),
            variant: variant.into(),
            view: view.into(),
            mse: m,
            psnr_db: psnr_from_mse(m, pair.max),
            ssim: ssim(pair, None),
            // Nothing to compare when no ray reached the opacity threshold.
            chamfer: chamfer(predicted, truth).unwrap_or(f64::NAN),
            fidelity_mae: f.mae,
            fidelity_sim: f.sim,
        }
    }

    /// Column-wise arithmetic mean, labelled `MEAN`.
    pub fn mean(rows: &[MetricsReport]) -> Option<MetricsReport> {
        let first = rows.first()?;
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            run: first.run.clone(),
            variant: first.variant.clone(),
            view: "MEAN".into(),
            mse: avg(|r| r.mse),
            psnr_db: avg(|r| r.psnr_db),
            ssim: avg(|r| r.ssim),
            chamfer: avg(|r| r.chamfer),
            fidelity_mae: avg(|r| r.fidelity_mae),
            fidelity_sim: avg(|r| r.fidelity_sim),
        })
    }
}

pub const CSV_HEADER: &str = "run,variant,view,mse,psnr_db,ssim,chamfer,fidelity_mae,fidelity_sim";

fn fmt_value(v: f64) -> String {
    // `Display` for f64 is shortest round-trip and prints `inf` / `NaN`.
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

fn parse_value(s: &str) -> std::result::Result<f64, std::num::ParseFloatError> {
    s.parse()
}

pub fn write_csv(rows: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let vals = [r.mse, r.psnr_db, r.ssim, r.chamfer, r.fidelity_mae, r.fidelity_sim];
        let vals: Vec<String> = vals.iter().map(|&v| fmt_value(v)).collect();
        out.push_str(&format!("{},{},{},{}\n", r.run, r.variant, r.view, vals.join(",")));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                field: "header".into(),
                msg: format!("expected `{CSV_HEADER}`"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(Error::Parse {
                line: i + 1,
                field: "row".into(),
                msg: format!("expected 9 columns, found {}", cols.len()),
            });
        }
        let mut vals = [0.0; 6];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = parse_value(cols[3 + k]).map_err(|e| Error::Parse {
                line: i + 1,
                field: CSV_HEADER.split(',').nth(3 + k).unwrap().into(),
                msg: e.to_string(),
            })?;
        }
        rows.push(MetricsReport {
            run: cols[0].into(),
            variant: cols[1].into(),
            view: cols[2].into(),
            mse: vals[0],
            psnr_db: vals[1],
            ssim: vals[2],
            chamfer: vals[3],
            fidelity_mae: vals[4],
            fidelity_sim: vals[5],
        });
    }
    Ok(rows)
}
