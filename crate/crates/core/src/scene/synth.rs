//! Procedural scenes for desk-scale experiments.
//!
//! `HeadLike` puts flat splats on the front of an ellipsoid and labels the
//! eye, forehead, nose and lip patches. Each seed gets its own face shape,
//! skin tone and per-region colors, so seeds act as distinct identities.

use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::renderer::SH_C0;
use crate::rng::{substream, Rng};

use super::{GaussianPrimitive, Region, Scene};

pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Blob,
    HeadLike,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blob" => Ok(Layout::Blob),
            "head_like" => Ok(Layout::HeadLike),
            _ => Err(Error::invalid(format!("unknown layout `{s}`"))),
        }
    }
}

pub fn synth_scene(seed: u64, n_primitives: usize, layout: Layout) -> Result<Scene> {
    if n_primitives == 0 {
        return Err(Error::invalid("n_primitives must be at least 1"));
    }
    let mut rng = substream(seed, layout as u64, n_primitives as u64);
    let primitives = match layout {
        Layout::Blob => blob(&mut rng, n_primitives),
        Layout::HeadLike => head(&mut rng, n_primitives),
    };
    Scene::new(primitives, 1, BACKGROUND)
}

fn color_to_dc(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

fn random_unit_quaternion(rng: &mut Rng) -> [f64; 4] {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| normal.sample(rng));
        let n = super::quat_norm(&q);
        if n > 1e-6 {
            return q.map(|v| v / n);
        }
    }
}

fn blob(rng: &mut Rng, n: usize) -> Vec<GaussianPrimitive> {
    let color = Normal::new(0.0, 0.6).unwrap();
    (0..n)
        .map(|_| {
            let mean = loop {
                let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.7..0.7));
                if p.iter().map(|v| v * v).sum::<f64>() <= 0.49 {
                    break p;
                }
            };
            GaussianPrimitive {
                mean,
                rotation: random_unit_quaternion(rng),
                scale: std::array::from_fn(|_| rng.random_range(0.06..0.2)),
                opacity: rng.random_range(0.4..0.9),
                sh_dc: std::array::from_fn(|_| color.sample(rng)),
                sh_rest: Vec::new(),
                region: Region::Other,
            }
        })
        .collect()
}

/// Share of primitives per labeled patch; the rest are `Other`.
const QUOTAS: [(Region, f64); 4] = [
    (Region::Eyes, 0.07),
    (Region::Forehead, 0.14),
    (Region::Nose, 0.06),
    (Region::Lips, 0.07),
];

/// Per-identity skin tone spread around mid grey.
const SKIN_STD: f64 = 0.03;
/// Per-identity color of each labeled patch, on top of the skin.
const FEATURE_STD: f64 = 0.02;
/// Per-primitive color noise.
const TEXTURE_STD: f64 = 0.008;
/// Per-identity linear color field over the head, which keeps distinct
/// identities apart under rotation.
const GRADIENT_STD: f64 = 0.025;

/// Identity-independent color offsets per region, relative to skin.
fn region_offset(region: Region) -> [f64; 3] {
    match region {
        Region::Eyes => [-0.018, -0.018, -0.015],
        Region::Forehead => [0.0, 0.0, 0.0],
        Region::Nose => [0.003, 0.0, 0.0],
        Region::Lips => [0.012, -0.006, -0.006],
        Region::Other => [0.0, 0.0, 0.0],
    }
}

/// Whether a point on the unit sphere (front is +z) lies in a patch.
fn in_patch(region: Region, p: &Vector3<f64>) -> bool {
    match region {
        Region::Eyes => {
            p.z > 0.6
                && [-0.34, 0.34]
                    .iter()
                    .any(|cx| (p.x - cx).powi(2) + (p.y - 0.22).powi(2) < 0.16f64.powi(2))
        }
        Region::Forehead => p.y > 0.48 && p.z > 0.3,
        Region::Nose => p.z > 0.8 && p.x.abs() < 0.13 && p.y > -0.25 && p.y < 0.12,
        Region::Lips => p.z > 0.55 && p.x.abs() < 0.3 && p.y > -0.58 && p.y < -0.38,
        Region::Other => !QUOTAS.iter().any(|(r, _)| in_patch(*r, p)),
    }
}

fn head(rng: &mut Rng, n: usize) -> Vec<GaussianPrimitive> {
    let axes: Vector3<f64> = Vector3::new(
        0.78 * rng.random_range(0.92..1.08),
        1.0 * rng.random_range(0.94..1.06),
        0.8 * rng.random_range(0.94..1.06),
    );
    // Identity contrast is kept near the scale of the masking budgets in use
    // (SH_C0 * 0.2 is about 0.056 per channel).
    let skin_var = Normal::new(0.0, SKIN_STD).unwrap();
    let feature_var = Normal::new(0.0, FEATURE_STD).unwrap();
    let texture = Normal::new(0.0, TEXTURE_STD).unwrap();
    let grad_var = Normal::new(0.0, GRADIENT_STD).unwrap();
    let skin: [f64; 3] = std::array::from_fn(|_| 0.5 + skin_var.sample(rng));
    let gradient: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| grad_var.sample(rng)));
    let palette: Vec<(Region, [f64; 3])> = Region::ALL
        .into_iter()
        .map(|r| {
            let off = region_offset(r);
            let color = std::array::from_fn(|c| {
                let own = if r == Region::Other {
                    0.0
                } else {
                    feature_var.sample(rng)
                };
                skin[c] + off[c] + own
            });
            (r, color)
        })
        .collect();

    let mut labels = Vec::with_capacity(n);
    for (region, share) in QUOTAS {
        let count = ((n as f64 * share).round() as usize).max(usize::from(n >= 5));
        labels.extend(std::iter::repeat_n(region, count));
    }
    labels.truncate(n);
    labels.resize(n, Region::Other);

    let tangent = (1.9 / (n as f64).sqrt()).clamp(0.02, 0.35);
    labels
        .into_iter()
        .map(|region| {
            let unit = loop {
                let v: Vector3<f64> = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let len = v.norm();
                if !(1e-3..=1.0).contains(&len) {
                    continue;
                }
                let v = v / len;
                if v.z >= -0.25 && in_patch(region, &v) {
                    break v;
                }
            };
            let bump = if region == Region::Nose { 1.12 } else { 1.0 };
            let pos = unit.component_mul(&axes) * bump;
            let normal = Vector3::new(
                pos.x / axes.x.powi(2),
                pos.y / axes.y.powi(2),
                pos.z / axes.z.powi(2),
            )
            .normalize();
            let align = UnitQuaternion::rotation_between(&Vector3::z(), &normal)
                .unwrap_or_else(UnitQuaternion::identity);
            let spin = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.random_range(0.0..std::f64::consts::TAU));
            let q = (align * spin).into_inner();
            let qn = (q.w * q.w + q.i * q.i + q.j * q.j + q.k * q.k).sqrt();
            let t = tangent * rng.random_range(0.85..1.15);
            let mut base = palette.iter().find(|(r, _)| *r == region).unwrap().1;
            for c in 0..3 {
                base[c] += gradient[c][0] * unit.x + gradient[c][1] * unit.y + gradient[c][2] * unit.z;
            }
            GaussianPrimitive {
                mean: [pos.x, pos.y, pos.z],
                rotation: [q.w / qn, q.i / qn, q.j / qn, q.k / qn],
                scale: [t, t * rng.random_range(0.8..1.0), 0.25 * t],
                opacity: rng.random_range(0.85..0.98),
                sh_dc: std::array::from_fn(|c| color_to_dc(base[c] + texture.sample(rng))),
                sh_rest: Vec::new(),
                region,
            }
        })
        .collect()
}
