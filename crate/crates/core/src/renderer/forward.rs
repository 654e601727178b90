use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::camera::{quat_mul, quat_to_matrix, CameraView, Pose};
use crate::error::{Error, Result};
use crate::scene::{GaussianPrimitive, Scene};

use super::geometry::{
    band1_basis, build_covariance, clamp_color, dc_color_raw, project_covariance, projection_jacobian,
};
use super::{Image, RenderOptions};

/// One primitive after posing and projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSplat {
    /// Posed world-space mean.
    pub world_mean: Vector3<f64>,
    /// Posed, unnormalized orientation `pose ⊗ q`.
    pub world_rotation: [f64; 4],
    pub cov3d: Matrix3<f64>,
    pub mean_cam: Vector3<f64>,
    /// `J · W`, the linear map taking world offsets to pixel offsets.
    pub transform: Matrix2x3<f64>,
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// Unit direction from the camera center, set only when band 1 is used.
    pub view_dir: Option<(Vector3<f64>, f64)>,
    pub color: [f64; 3],
    pub clamped: [bool; 3],
    pub opacity: f64,
    /// Half extents of the support box, in pixels.
    pub radius: [f64; 2],
}

impl ProjectedSplat {
    pub fn depth(&self) -> f64 {
        self.mean_cam.z
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub prim: u32,
    pub alpha: f64,
    /// Gaussian falloff `exp(-½ dᵀ Σ'⁻¹ d)` before opacity scaling.
    pub falloff: f64,
    /// Transmittance in front of this contribution.
    pub transmittance: f64,
    pub capped: bool,
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct SplatIntermediate {
    pub width: usize,
    pub height: usize,
    pub options: RenderOptions,
    pub background: [f64; 3],
    /// Indexed by primitive; `None` for culled primitives.
    pub splats: Vec<Option<ProjectedSplat>>,
    /// Visible primitives in blending order.
    pub order: Vec<usize>,
    /// `records[offsets[p]..offsets[p + 1]]` belong to pixel `p`, front to back.
    pub offsets: Vec<usize>,
    pub records: Vec<Contribution>,
    pub final_transmittance: Vec<f64>,
}

impl SplatIntermediate {
    pub fn pixel_records(&self, pixel: usize) -> &[Contribution] {
        &self.records[self.offsets[pixel]..self.offsets[pixel + 1]]
    }

    /// Opacity mass deposited before background compositing.
    pub fn accumulated_opacity(&self, pixel: usize) -> f64 {
        1.0 - self.final_transmittance[pixel]
    }

    /// Hash of every discrete decision the forward pass made: culling, the
    /// active contribution lists with their cap flags, and color clamps. Two
    /// renders with equal signatures lie on the same smooth branch.
    pub fn signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.splats {
            match s {
                None => 0u8.hash(&mut h),
                Some(s) => {
                    1u8.hash(&mut h);
                    s.clamped.hash(&mut h);
                }
            }
        }
        self.offsets.hash(&mut h);
        for r in &self.records {
            r.prim.hash(&mut h);
            r.capped.hash(&mut h);
        }
        h.finish()
    }
}

fn check_finite(index: usize, p: &GaussianPrimitive) -> Result<()> {
    let finite = p
        .mean
        .iter()
        .chain(&p.rotation)
        .chain(&p.scale)
        .chain(&p.sh_dc)
        .chain(p.sh_rest.iter().flatten())
        .chain(std::iter::once(&p.opacity))
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Render {
            index,
            message: "non-finite parameter".into(),
        });
    }
    if crate::scene::quat_norm(&p.rotation) == 0.0 {
        return Err(Error::Render {
            index,
            message: "zero quaternion".into(),
        });
    }
    Ok(())
}

fn project(
    p: &GaussianPrimitive,
    scene: &Scene,
    view: &CameraView,
    pose_r: &Matrix3<f64>,
    pose: &Pose,
    opts: &RenderOptions,
) -> Option<ProjectedSplat> {
    let world_mean = pose_r * Vector3::from(p.mean) + Vector3::from(pose.translation);
    let mean_cam = view.to_camera(&world_mean);
    let world_rotation = quat_mul(&pose.rotation, &p.rotation);
    let cov3d = build_covariance(&world_rotation, &p.scale);
    let cov2d = project_covariance(&cov3d, &mean_cam, &view.rotation, view.focal, opts.dilation, opts.near)?;
    let conic = cov2d.try_inverse()?;
    if !(cov2d.determinant() > 0.0) {
        return None;
    }
    let z = mean_cam.z;
    let mean2d = [
        view.focal * mean_cam.x / z + view.principal_point[0],
        view.focal * mean_cam.y / z + view.principal_point[1],
    ];
    let mut raw = dc_color_raw(&p.sh_dc);
    let view_dir = if opts.view_dependent && scene.sh_bands >= 2 {
        let v = world_mean - view.position();
        let len = v.norm();
        let dir = v / len;
        let basis = band1_basis(&dir);
        for (k, b) in basis.iter().enumerate() {
            for c in 0..3 {
                raw[c] += b * p.sh_rest[k][c];
            }
        }
        Some((dir, len))
    } else {
        None
    };
    let (color, clamped) = clamp_color(raw);
    let k = opts.support_sigma;
    Some(ProjectedSplat {
        world_mean,
        world_rotation,
        cov3d,
        mean_cam,
        transform: projection_jacobian(&mean_cam, view.focal) * view.rotation,
        mean2d,
        cov2d,
        conic,
        view_dir,
        color,
        clamped,
        opacity: p.opacity,
        radius: [k * cov2d[(0, 0)].sqrt(), k * cov2d[(1, 1)].sqrt()],
    })
}

/// Inclusive pixel index range whose centers lie within `r` of `c`.
pub(super) fn pixel_span(c: f64, r: f64, len: usize) -> Option<(usize, usize)> {
    let lo = (c - r - 0.5).ceil().max(0.0);
    let hi = (c + r - 0.5).floor().min(len as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

struct RowOutput {
    pixels: Vec<f64>,
    counts: Vec<usize>,
    records: Vec<Contribution>,
    final_t: Vec<f64>,
}

/// Renders `scene` from `view` after applying `pose`.
pub fn render(
    scene: &Scene,
    view: &CameraView,
    pose: &Pose,
    opts: &RenderOptions,
) -> Result<(Image, SplatIntermediate)> {
    view.validate()?;
    if scene.is_empty() {
        return Err(Error::Scene("scene has no primitives".into()));
    }
    for (i, p) in scene.primitives.iter().enumerate() {
        check_finite(i, p)?;
    }
    let pose_r = quat_to_matrix(&pose.rotation);
    let splats: Vec<Option<ProjectedSplat>> = scene
        .primitives
        .iter()
        .map(|p| project(p, scene, view, &pose_r, pose, opts))
        .collect();

    let mut order: Vec<usize> = (0..splats.len()).filter(|&i| splats[i].is_some()).collect();
    // stable sort: equal depths keep index order
    order.sort_by(|&a, &b| {
        let (da, db) = (splats[a].as_ref().unwrap().depth(), splats[b].as_ref().unwrap().depth());
        da.total_cmp(&db)
    });

    let (w, h) = (view.width, view.height);
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for &i in &order {
        let s = splats[i].as_ref().unwrap();
        if let Some((y0, y1)) = pixel_span(s.mean2d[1], s.radius[1], h) {
            for row in &mut rows[y0..=y1] {
                row.push(i as u32);
            }
        }
    }

    let cutoff = opts.support_sigma * opts.support_sigma;
    let bg = scene.background;
    let outputs: Vec<RowOutput> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = RowOutput {
                pixels: Vec::with_capacity(3 * w),
                counts: Vec::with_capacity(w),
                records: Vec::new(),
                final_t: Vec::with_capacity(w),
            };
            let py = y as f64 + 0.5;
            for x in 0..w {
                let px = x as f64 + 0.5;
                let mut c = [0.0; 3];
                let mut t = 1.0;
                let start = out.records.len();
                for &i in &rows[y] {
                    let s = splats[i as usize].as_ref().unwrap();
                    let dx = px - s.mean2d[0];
                    if dx.abs() > s.radius[0] {
                        continue;
                    }
                    let dy = py - s.mean2d[1];
                    let q = &s.conic;
                    let power = q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy;
                    if power > cutoff {
                        continue;
                    }
                    let falloff = (-0.5 * power).exp();
                    let mut alpha = s.opacity * falloff;
                    if alpha < opts.alpha_min {
                        continue;
                    }
                    let capped = alpha > opts.alpha_max;
                    if capped {
                        alpha = opts.alpha_max;
                    }
                    for k in 0..3 {
                        c[k] += s.color[k] * alpha * t;
                    }
                    out.records.push(Contribution {
                        prim: i,
                        alpha,
                        falloff,
                        transmittance: t,
                        capped,
                    });
                    t *= 1.0 - alpha;
                    if t < opts.transmittance_min {
                        break;
                    }
                }
                for k in 0..3 {
                    out.pixels.push((c[k] + t * bg[k]).clamp(0.0, 1.0));
                }
                out.counts.push(out.records.len() - start);
                out.final_t.push(t);
            }
            out
        })
        .collect();

    let mut pixels = Vec::with_capacity(3 * w * h);
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut records = Vec::with_capacity(outputs.iter().map(|o| o.records.len()).sum());
    let mut final_transmittance = Vec::with_capacity(w * h);
    offsets.push(0);
    for o in outputs {
        pixels.extend(o.pixels);
        for n in o.counts {
            offsets.push(offsets.last().unwrap() + n);
        }
        records.extend(o.records);
        final_transmittance.extend(o.final_t);
    }

    let image = Image {
        width: w,
        height: h,
        pixels,
    };
    let inter = SplatIntermediate {
        width: w,
        height: h,
        options: opts.clone(),
        background: bg,
        splats,
        order,
        offsets,
        records,
        final_transmittance,
    };
    Ok((image, inter))
}
