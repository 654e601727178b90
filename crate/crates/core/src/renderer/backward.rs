use nalgebra::{Matrix2, Matrix3, Vector3, Vector4};
use rayon::prelude::*;

use crate::camera::{quat_to_matrix, CameraView, Pose};
use crate::error::{Error, Result};
use crate::scene::Scene;

use super::geometry::{band1_basis, left_mul_matrix, quat_gradient, rotation_from_quat};
use super::{ParamClass, SplatIntermediate, SH_C0, SH_C1};

/// Rows per reduction chunk. Fixed so the summation order never depends on
/// the worker count.
const ROW_CHUNK: usize = 8;

/// Per-primitive gradients with respect to screen-space quantities.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    color: [f64; 3],
    opacity: f64,
    mean2d: [f64; 2],
    /// Symmetric conic gradient as `(q00, q01, q11)`; the off-diagonal entry
    /// holds the gradient of each of the two equal entries.
    conic: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..3 {
            self.color[k] += o.color[k];
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
    }
}

fn accumulate_chunk(
    inter: &SplatIntermediate,
    d_image: &[f64],
    rows: std::ops::Range<usize>,
    geometry: bool,
    n: usize,
) -> Vec<ScreenGrad> {
    let mut acc = vec![ScreenGrad::default(); n];
    let w = inter.width;
    let bg = inter.background;
    for y in rows {
        for x in 0..w {
            let p = y * w + x;
            let g = [d_image[3 * p], d_image[3 * p + 1], d_image[3 * p + 2]];
            if g == [0.0; 3] {
                continue;
            }
            let recs = inter.pixel_records(p);
            // color that lies behind the current record, background included
            let t_final = inter.final_transmittance[p];
            let mut behind = [t_final * bg[0], t_final * bg[1], t_final * bg[2]];
            for r in recs.iter().rev() {
                let s = inter.splats[r.prim as usize].as_ref().unwrap();
                let a = &mut acc[r.prim as usize];
                let weight = r.alpha * r.transmittance;
                for k in 0..3 {
                    a.color[k] += g[k] * weight;
                }
                if geometry {
                    let mut g_alpha = 0.0;
                    for k in 0..3 {
                        g_alpha += g[k] * (s.color[k] * r.transmittance - behind[k] / (1.0 - r.alpha));
                    }
                    if !r.capped {
                        a.opacity += g_alpha * r.falloff;
                        let dx = x as f64 + 0.5 - s.mean2d[0];
                        let dy = y as f64 + 0.5 - s.mean2d[1];
                        let q = &s.conic;
                        let ga = g_alpha * r.alpha;
                        a.mean2d[0] += ga * (q[(0, 0)] * dx + q[(0, 1)] * dy);
                        a.mean2d[1] += ga * (q[(1, 0)] * dx + q[(1, 1)] * dy);
                        a.conic[0] += -0.5 * ga * dx * dx;
                        a.conic[1] += -0.5 * ga * dx * dy;
                        a.conic[2] += -0.5 * ga * dy * dy;
                    }
                }
                for k in 0..3 {
                    behind[k] += s.color[k] * weight;
                }
            }
        }
    }
    acc
}

/// Gradient of a scalar loss with respect to every parameter of `class`,
/// laid out primitive-major with `class.width(scene.sh_bands)` entries per
/// primitive. `d_image` is `dL/dpixel` in the image's channel layout.
///
/// Clamped colors and capped alphas pass no gradient; culled primitives get
/// zeros.
pub fn render_backward(
    scene: &Scene,
    view: &CameraView,
    pose: &Pose,
    inter: &SplatIntermediate,
    d_image: &[f64],
    class: ParamClass,
) -> Result<Vec<f64>> {
    if class == ParamClass::AcColor && scene.sh_bands < 2 {
        return Err(Error::invalid("ac_color gradients need at least 2 SH bands"));
    }
    let n = scene.len();
    if inter.splats.len() != n || inter.width != view.width || inter.height != view.height {
        return Err(Error::invalid("intermediate does not match scene and view"));
    }
    if d_image.len() != 3 * inter.width * inter.height {
        return Err(Error::invalid(format!(
            "image gradient has {} values, expected {}",
            d_image.len(),
            3 * inter.width * inter.height
        )));
    }

    let geometry = !class.is_color();
    let chunks: Vec<std::ops::Range<usize>> = (0..inter.height)
        .step_by(ROW_CHUNK)
        .map(|y| y..(y + ROW_CHUNK).min(inter.height))
        .collect();
    let partials: Vec<Vec<ScreenGrad>> = chunks
        .into_par_iter()
        .map(|rows| accumulate_chunk(inter, d_image, rows, geometry, n))
        .collect();
    let mut screen = vec![ScreenGrad::default(); n];
    for part in &partials {
        for (dst, src) in screen.iter_mut().zip(part) {
            dst.add(src);
        }
    }

    let width = class.width(scene.sh_bands);
    let pose_r = quat_to_matrix(&pose.rotation);
    let per_prim: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| match &inter.splats[i] {
            None => vec![0.0; width],
            Some(s) => chain(scene, view, &pose_r, pose, i, s, &screen[i], class, width),
        })
        .collect();
    Ok(per_prim.concat())
}

#[allow(clippy::too_many_arguments)]
fn chain(
    scene: &Scene,
    view: &CameraView,
    pose_r: &Matrix3<f64>,
    pose: &Pose,
    i: usize,
    s: &super::ProjectedSplat,
    g: &ScreenGrad,
    class: ParamClass,
    width: usize,
) -> Vec<f64> {
    let prim = &scene.primitives[i];
    let g_raw: [f64; 3] = std::array::from_fn(|k| if s.clamped[k] { 0.0 } else { g.color[k] });
    match class {
        ParamClass::DcColor => return g_raw.iter().map(|v| v * SH_C0).collect(),
        ParamClass::AcColor => {
            let mut out = vec![0.0; width];
            if let Some((dir, _)) = s.view_dir {
                for (k, b) in band1_basis(&dir).iter().enumerate() {
                    for c in 0..3 {
                        out[3 * k + c] = g_raw[c] * b;
                    }
                }
            }
            return out;
        }
        ParamClass::Opacity => return vec![g.opacity],
        _ => {}
    }

    // conic -> 2D covariance: dL/dΣ' = -Q G Q
    let q = &s.conic;
    let g_q = Matrix2::new(g.conic[0], g.conic[1], g.conic[1], g.conic[2]);
    let g_cov2d = -(q * g_q * q);
    let t = &s.transform;
    let g_cov3d: Matrix3<f64> = t.transpose() * g_cov2d * t;

    match class {
        ParamClass::Position => {
            let g_t = 2.0 * g_cov2d * t * s.cov3d;
            let g_j = g_t * view.rotation.transpose();
            let (x, y, z) = (s.mean_cam.x, s.mean_cam.y, s.mean_cam.z);
            let f = view.focal;
            let z2 = z * z;
            let z3 = z2 * z;
            let mut g_cam = Vector3::new(
                g_j[(0, 2)] * (-f / z2),
                g_j[(1, 2)] * (-f / z2),
                -(g_j[(0, 0)] + g_j[(1, 1)]) * f / z2
                    + g_j[(0, 2)] * 2.0 * f * x / z3
                    + g_j[(1, 2)] * 2.0 * f * y / z3,
            );
            g_cam.x += g.mean2d[0] * f / z;
            g_cam.y += g.mean2d[1] * f / z;
            g_cam.z -= (g.mean2d[0] * x + g.mean2d[1] * y) * f / z2;
            let mut g_world = view.rotation.transpose() * g_cam;
            if let Some((dir, len)) = s.view_dir {
                let mut g_dir = Vector3::zeros();
                for c in 0..3 {
                    let [c1, c2, c3] = [prim.sh_rest[0][c], prim.sh_rest[1][c], prim.sh_rest[2][c]];
                    g_dir += g_raw[c] * SH_C1 * Vector3::new(-c3, -c1, c2);
                }
                g_world += (g_dir - dir * dir.dot(&g_dir)) / len;
            }
            let g_mean = pose_r.transpose() * g_world;
            vec![g_mean.x, g_mean.y, g_mean.z]
        }
        ParamClass::Rotation | ParamClass::Scale => {
            let r = rotation_from_quat(&s.world_rotation);
            let sc = Matrix3::from_diagonal(&Vector3::from(prim.scale));
            let m = r * sc;
            let g_m = (g_cov3d + g_cov3d.transpose()) * m;
            if class == ParamClass::Scale {
                (0..3)
                    .map(|k| (0..3).map(|row| g_m[(row, k)] * r[(row, k)]).sum())
                    .collect()
            } else {
                let g_r = g_m * sc;
                let g_world_q = Vector4::from(quat_gradient(&s.world_rotation, &g_r));
                let g_q = left_mul_matrix(&pose.rotation).transpose() * g_world_q;
                g_q.iter().copied().collect()
            }
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::default_frontal;
    use crate::renderer::{render, RenderOptions};
    use crate::scene::GaussianPrimitive;

    #[test]
    fn two_term_front_dc_gradient() {
        let view = default_frontal(32, 32).unwrap();
        let shift = |z: f64| 0.5 * z / view.focal;
        let front = GaussianPrimitive::new([shift(3.5), -shift(3.5), 0.5], 0.3, 0.5, [0.2, 0.0, -0.3]);
        let back = GaussianPrimitive::new([shift(4.5), -shift(4.5), -0.5], 0.3, 0.5, [-0.4, 0.1, 0.0]);
        let scene = Scene::new(vec![front, back], 1, [0.5; 3]).unwrap();
        let opts = RenderOptions::default();
        let (_, inter) = render(&scene, &view, &Pose::identity(), &opts).unwrap();
        // loss = sum of the channels of pixel (16, 16)
        let mut d = vec![0.0; 32 * 32 * 3];
        let p = 16 * 32 + 16;
        d[3 * p..3 * p + 3].fill(1.0);
        let g = render_backward(&scene, &view, &Pose::identity(), &inter, &d, ParamClass::DcColor).unwrap();
        for k in 0..3 {
            assert!((g[k] - 0.5 * SH_C0).abs() < 1e-12, "{}", g[k]);
            assert!((g[3 + k] - 0.25 * SH_C0).abs() < 1e-12);
        }
    }

    #[test]
    fn background_only_pixels_give_zero() {
        let view = default_frontal(32, 32).unwrap();
        let scene = crate::scene::synth_scene(3, 10, crate::scene::Layout::Blob).unwrap();
        let opts = RenderOptions::default();
        let (_, inter) = render(&scene, &view, &Pose::identity(), &opts).unwrap();
        let mut d = vec![0.0; 32 * 32 * 3];
        let mut any = false;
        for p in 0..32 * 32 {
            if inter.pixel_records(p).is_empty() {
                d[3 * p..3 * p + 3].fill(1.0);
                any = true;
            }
        }
        assert!(any);
        for class in [ParamClass::DcColor, ParamClass::Position, ParamClass::Rotation, ParamClass::Scale, ParamClass::Opacity] {
            let g = render_backward(&scene, &view, &Pose::identity(), &inter, &d, class).unwrap();
            assert!(g.iter().all(|&v| v == 0.0), "{class}");
        }
    }

    #[test]
    fn ac_on_dc_only_scene_rejected() {
        let view = default_frontal(16, 16).unwrap();
        let scene = crate::scene::synth_scene(3, 2, crate::scene::Layout::Blob).unwrap();
        let (_, inter) = render(&scene, &view, &Pose::identity(), &RenderOptions::default()).unwrap();
        let d = vec![0.0; 16 * 16 * 3];
        assert!(matches!(
            render_backward(&scene, &view, &Pose::identity(), &inter, &d, ParamClass::AcColor),
            Err(Error::InvalidArgument(_))
        ));
    }
}
