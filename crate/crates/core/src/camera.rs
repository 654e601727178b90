//! Pinhole cameras, orbit viewpoints and rigid poses.
//!
//! Camera space is x right, y down, z forward. Pixel centers sit at
//! `(i + 0.5, j + 0.5)`, so a point on the optical axis lands on the
//! principal point.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::scene::Scene;

pub const MIN_IMAGE_SIDE: usize = 16;
/// Distance of the default camera from the scene origin.
pub const DEFAULT_ORBIT_RADIUS: f64 = 4.0;
/// Default focal length as a multiple of the shorter image side.
pub const DEFAULT_FOCAL_FACTOR: f64 = 1.25;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl CameraView {
    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_IMAGE_SIDE || self.height < MIN_IMAGE_SIDE {
            return Err(Error::invalid(format!(
                "image {}x{} smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                self.width, self.height
            )));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > 1e-9 || (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("camera rotation is not a proper rotation"));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::invalid("focal length must be positive"));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Frontal camera on the +z axis looking at the origin.
    pub fn frontal(width: usize, height: usize, orbit_radius: f64, focal: f64) -> Result<Self> {
        let view = CameraView {
            // rows: right = +x, down = -y, forward = -z
            rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0),
            translation: Vector3::new(0.0, 0.0, orbit_radius),
            focal,
            principal_point: [width as f64 / 2.0, height as f64 / 2.0],
            width,
            height,
        };
        view.validate()?;
        Ok(view)
    }
}

/// Reference camera used for the reference embedding.
pub fn default_frontal(width: usize, height: usize) -> Result<CameraView> {
    CameraView::frontal(
        width,
        height,
        DEFAULT_ORBIT_RADIUS,
        DEFAULT_FOCAL_FACTOR * width.min(height) as f64,
    )
}

/// Orbits the camera about the world origin: pitch about x, then yaw about y.
pub fn rotate_view(base: &CameraView, pitch: f64, yaw: f64) -> CameraView {
    let orbit = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch);
    // camera-to-world becomes orbit * R^T; the translation is unchanged
    CameraView {
        rotation: base.rotation * orbit.matrix().transpose(),
        ..base.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// `(w, x, y, z)` unit quaternion.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Pose::identity()
    }

    pub fn new(rotation: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let n = crate::scene::quat_norm(&rotation);
        if (n - 1.0).abs() > crate::scene::UNIT_TOLERANCE {
            return Err(Error::invalid(format!("pose quaternion norm {n} is not 1")));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(w, x, y, z))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    pub fn inverse(&self) -> Pose {
        let [w, x, y, z] = self.rotation;
        let rotation = [w, -x, -y, -z];
        let t = quat_to_matrix(&rotation) * Vector3::from(self.translation);
        Pose {
            rotation,
            translation: [-t.x, -t.y, -t.z],
        }
    }
}

/// Rotation matrix of a unit `(w, x, y, z)` quaternion.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Hamilton product `a * b` of `(w, x, y, z)` quaternions.
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Rigidly moves every primitive: means are rotated and translated, primitive
/// orientations are left-multiplied by the pose rotation.
pub fn apply_pose(scene: &Scene, pose: &Pose) -> Scene {
    if pose.is_identity() {
        return scene.clone();
    }
    let r = pose.matrix();
    let t = Vector3::from(pose.translation);
    let mut out = scene.clone();
    for p in &mut out.primitives {
        let m = r * Vector3::from(p.mean) + t;
        p.mean = [m.x, m.y, m.z];
        p.rotation = quat_mul(&pose.rotation, &p.rotation);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewpointDistribution {
    pub pitch_range: [f64; 2],
    pub yaw_range: [f64; 2],
    pub base_view: CameraView,
}

impl ViewpointDistribution {
    pub fn new(pitch_range: [f64; 2], yaw_range: [f64; 2], base_view: CameraView) -> Result<Self> {
        if pitch_range[0] > pitch_range[1] || yaw_range[0] > yaw_range[1] {
            return Err(Error::invalid("viewpoint range has lo > hi"));
        }
        Ok(ViewpointDistribution {
            pitch_range,
            yaw_range,
            base_view,
        })
    }

    /// Symmetric `[-r, r]` range on both angles.
    pub fn symmetric(radius: f64, base_view: CameraView) -> Result<Self> {
        Self::new([-radius, radius], [-radius, radius], base_view)
    }

    pub fn view(&self, angles: Angles) -> CameraView {
        rotate_view(&self.base_view, angles.pitch, angles.yaw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Angles {
    pub pitch: f64,
    pub yaw: f64,
}

fn uniform_in(rng: &mut impl rand::Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

/// Draws `k` angle pairs i.i.d. uniform over the ranges.
pub fn sample_angles(dist: &ViewpointDistribution, k: usize, rng: &mut impl rand::Rng) -> Vec<Angles> {
    (0..k)
        .map(|_| Angles {
            pitch: uniform_in(rng, dist.pitch_range),
            yaw: uniform_in(rng, dist.yaw_range),
        })
        .collect()
}

pub fn sample_viewpoints(
    dist: &ViewpointDistribution,
    k: usize,
    rng: &mut impl rand::Rng,
) -> Vec<CameraView> {
    sample_angles(dist, k, rng)
        .into_iter()
        .map(|a| dist.view(a))
        .collect()
}

/// Angles for sample `index` of `iteration`, drawn from the
/// `(seed, iteration, index)` substream so draws never depend on the order
/// in which samples are evaluated.
pub fn seeded_angles(dist: &ViewpointDistribution, seed: u64, iteration: u64, k: usize) -> Vec<Angles> {
    (0..k)
        .map(|i| {
            let mut rng = substream(seed, iteration, i as u64);
            Angles {
                pitch: uniform_in(&mut rng, dist.pitch_range),
                yaw: uniform_in(&mut rng, dist.yaw_range),
            }
        })
        .collect()
}

fn linspace(range: [f64; 2], n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (range[0] + range[1])];
    }
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            range[0] * (1.0 - t) + range[1] * t
        })
        .collect()
}

/// Row-major grid: pitch varies down the rows, yaw across the columns.
pub fn grid_angles(dist: &ViewpointDistribution, rows: usize, cols: usize) -> Result<Vec<Angles>> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("grid dimensions must be at least 1"));
    }
    let pitches = linspace(dist.pitch_range, rows);
    let yaws = linspace(dist.yaw_range, cols);
    Ok(pitches
        .iter()
        .flat_map(|&pitch| yaws.iter().map(move |&yaw| Angles { pitch, yaw }))
        .collect())
}

pub fn grid_viewpoints(dist: &ViewpointDistribution, rows: usize, cols: usize) -> Result<Vec<CameraView>> {
    Ok(grid_angles(dist, rows, cols)?
        .into_iter()
        .map(|a| dist.view(a))
        .collect())
}
