//! Differentiable Gaussian splatting.
//!
//! Forward: primitives are posed, projected to 2D Gaussians, sorted globally
//! by camera depth (ties by primitive index) and alpha-blended front to back
//! per pixel. The forward pass records every contribution so that
//! [`render_backward`] can differentiate each parameter class analytically.

mod backward;
mod fd;
mod forward;
pub mod geometry;
mod image;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{sh_rest_len, GaussianPrimitive};

pub use backward::render_backward;
pub use fd::{fd_gradient, fd_gradient_masked, fd_step};
pub use forward::{render, Contribution, ProjectedSplat, SplatIntermediate};
pub use geometry::{build_covariance, project_covariance, sh_to_color};
pub use image::Image;

/// Zeroth-band SH constant, `1 / (2√π)`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// First-band SH constant, `√3 / (2√π)`.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    /// Added to the diagonal of every screen-space covariance, in px².
    pub dilation: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub transmittance_min: f64,
    /// Screen-space support in standard deviations.
    pub support_sigma: f64,
    pub near: f64,
    /// Evaluate band-1 SH when the scene stores it.
    pub view_dependent: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            dilation: 0.3,
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.999,
            transmittance_min: 1e-4,
            support_sigma: 3.0,
            near: 1e-4,
            view_dependent: false,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dilation >= 0.0
            && (0.0..1.0).contains(&self.alpha_min)
            && self.alpha_max > self.alpha_min
            && self.alpha_max < 1.0
            && (0.0..1.0).contains(&self.transmittance_min)
            && self.support_sigma > 0.0
            && self.near > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("render options out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    DcColor,
    AcColor,
    Position,
    Rotation,
    Scale,
    Opacity,
}

impl ParamClass {
    pub const ALL: [ParamClass; 6] = [
        ParamClass::DcColor,
        ParamClass::AcColor,
        ParamClass::Position,
        ParamClass::Rotation,
        ParamClass::Scale,
        ParamClass::Opacity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::DcColor => "dc_color",
            ParamClass::AcColor => "ac_color",
            ParamClass::Position => "position",
            ParamClass::Rotation => "rotation",
            ParamClass::Scale => "scale",
            ParamClass::Opacity => "opacity",
        }
    }

    /// Scalars per primitive.
    pub fn width(self, sh_bands: u32) -> usize {
        match self {
            ParamClass::DcColor | ParamClass::Position | ParamClass::Scale => 3,
            ParamClass::AcColor => 3 * sh_rest_len(sh_bands),
            ParamClass::Rotation => 4,
            ParamClass::Opacity => 1,
        }
    }

    pub fn is_color(self) -> bool {
        matches!(self, ParamClass::DcColor | ParamClass::AcColor)
    }

    pub fn read(self, p: &GaussianPrimitive) -> Vec<f64> {
        match self {
            ParamClass::DcColor => p.sh_dc.to_vec(),
            ParamClass::AcColor => p.sh_rest.iter().flatten().copied().collect(),
            ParamClass::Position => p.mean.to_vec(),
            ParamClass::Rotation => p.rotation.to_vec(),
            ParamClass::Scale => p.scale.to_vec(),
            ParamClass::Opacity => vec![p.opacity],
        }
    }

    /// Inverse of [`ParamClass::read`]; `values` must have the class width.
    pub fn write(self, p: &mut GaussianPrimitive, values: &[f64]) {
        match self {
            ParamClass::DcColor => p.sh_dc.copy_from_slice(values),
            ParamClass::AcColor => {
                for (dst, src) in p.sh_rest.iter_mut().zip(values.chunks_exact(3)) {
                    dst.copy_from_slice(src);
                }
            }
            ParamClass::Position => p.mean.copy_from_slice(values),
            ParamClass::Rotation => p.rotation.copy_from_slice(values),
            ParamClass::Scale => p.scale.copy_from_slice(values),
            ParamClass::Opacity => p.opacity = values[0],
        }
    }
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown parameter class `{s}`")))
    }
}
