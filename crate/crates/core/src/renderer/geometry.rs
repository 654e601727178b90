use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector3, Vector4};

use super::{SH_C0, SH_C1};

/// Rotation matrix of `q / |q|`, `q = (w, x, y, z)`.
pub fn rotation_from_quat(q: &[f64; 4]) -> Matrix3<f64> {
    let n = crate::scene::quat_norm(q);
    crate::camera::quat_to_matrix(&q.map(|v| v / n))
}

/// `R S Sᵀ Rᵀ`; eigenvalues are the squared scales.
pub fn build_covariance(rotation: &[f64; 4], scale: &[f64; 3]) -> Matrix3<f64> {
    let m = rotation_from_quat(rotation) * Matrix3::from_diagonal(&Vector3::from(*scale));
    m * m.transpose()
}

/// Jacobian of the perspective map at a camera-space point.
pub fn projection_jacobian(mean_cam: &Vector3<f64>, focal: f64) -> Matrix2x3<f64> {
    let (x, y, z) = (mean_cam.x, mean_cam.y, mean_cam.z);
    Matrix2x3::new(
        focal / z,
        0.0,
        -focal * x / (z * z),
        0.0,
        focal / z,
        -focal * y / (z * z),
    )
}

/// Screen-space covariance `J W Σ Wᵀ Jᵀ + dilation·I`, or `None` when the
/// point is at or behind the near plane.
pub fn project_covariance(
    cov: &Matrix3<f64>,
    mean_cam: &Vector3<f64>,
    world_to_cam: &Matrix3<f64>,
    focal: f64,
    dilation: f64,
    near: f64,
) -> Option<Matrix2<f64>> {
    if !(mean_cam.z > near) {
        return None;
    }
    let t = projection_jacobian(mean_cam, focal) * world_to_cam;
    let c = t * cov * t.transpose();
    // exact symmetry so the conic is symmetric too
    let off = 0.5 * (c[(0, 1)] + c[(1, 0)]);
    Some(Matrix2::new(c[(0, 0)] + dilation, off, off, c[(1, 1)] + dilation))
}

/// Pre-clamp color of the DC band.
pub fn dc_color_raw(sh_dc: &[f64; 3]) -> [f64; 3] {
    sh_dc.map(|v| SH_C0 * v + 0.5)
}

/// Band-1 basis at a unit direction, ordered like the stored coefficients.
pub fn band1_basis(dir: &Vector3<f64>) -> [f64; 3] {
    [-SH_C1 * dir.y, SH_C1 * dir.z, -SH_C1 * dir.x]
}

/// Clamps a raw color into `[0, 1]`; the mask marks clamped channels.
pub fn clamp_color(raw: [f64; 3]) -> ([f64; 3], [bool; 3]) {
    let clamped = raw.map(|v| !(0.0..=1.0).contains(&v));
    (raw.map(|v| v.clamp(0.0, 1.0)), clamped)
}

/// DC-only color with its clamp mask.
pub fn sh_to_color(sh_dc: &[f64; 3]) -> ([f64; 3], [bool; 3]) {
    clamp_color(dc_color_raw(sh_dc))
}

/// Gradient of `L(R(q / |q|))` with respect to the unnormalized `q`, given
/// `dL/dR`.
pub fn quat_gradient(q: &[f64; 4], g_r: &Matrix3<f64>) -> [f64; 4] {
    let n = crate::scene::quat_norm(q);
    let [w, x, y, z] = q.map(|v| v / n);
    let g = |i: usize, j: usize| g_r[(i, j)];
    let gw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let gx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let gy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let gz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let gh = Vector4::new(gw, gx, gy, gz);
    let qh = Vector4::new(w, x, y, z);
    let out = (gh - qh * qh.dot(&gh)) / n;
    [out[0], out[1], out[2], out[3]]
}

/// Matrix of `b ↦ a ⊗ b`.
pub fn left_mul_matrix(a: &[f64; 4]) -> Matrix4<f64> {
    let [w, x, y, z] = *a;
    Matrix4::new(w, -x, -y, -z, x, w, -z, y, y, z, w, -x, z, -y, x, w)
}
