//! Gaussian scene representation.

mod io;
mod params;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_scene, parse_scene, save_scene, write_scene, SCHEMA_VERSION};
pub use params::{ColorTensor, ParamTensor};
pub use synth::{synth_scene, Layout};

/// Tolerance on quaternion norms accepted by [`Scene::validate`].
pub const UNIT_TOLERANCE: f64 = 1e-9;
/// Lower bound kept on every scale component when parameters are mutated.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Eyes,
    Forehead,
    Nose,
    Lips,
    Other,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Eyes,
        Region::Forehead,
        Region::Nose,
        Region::Lips,
        Region::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Eyes => "eyes",
            Region::Forehead => "forehead",
            Region::Nose => "nose",
            Region::Lips => "lips",
            Region::Other => "other",
        }
    }

    /// Single-letter code used in region-set shorthands like `EFN`.
    pub fn letter(self) -> char {
        match self {
            Region::Eyes => 'E',
            Region::Forehead => 'F',
            Region::Nose => 'N',
            Region::Lips => 'L',
            Region::Other => 'O',
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown region `{s}`")))
    }
}

/// A set of region labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RegionSet(u8);

impl RegionSet {
    pub fn all() -> Self {
        Region::ALL.into_iter().collect()
    }

    pub fn empty() -> Self {
        RegionSet(0)
    }

    pub fn contains(self, region: Region) -> bool {
        self.0 & region.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_all(self) -> bool {
        self == Self::all()
    }

    pub fn union(self, other: RegionSet) -> RegionSet {
        RegionSet(self.0 | other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Region> {
        Region::ALL.into_iter().filter(move |r| self.contains(*r))
    }

    /// Parses `all`, a letter shorthand (`EFN`), or a comma separated list of
    /// region names (`eyes,nose`).
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec.eq_ignore_ascii_case("all") {
            return Ok(Self::all());
        }
        if !spec.is_empty() && spec.chars().all(|c| "EFNLO".contains(c)) {
            return Ok(spec
                .chars()
                .map(|c| *Region::ALL.iter().find(|r| r.letter() == c).unwrap())
                .collect());
        }
        spec.split(',')
            .map(|s| s.trim().parse::<Region>())
            .collect::<Result<RegionSet>>()
    }
}

impl FromIterator<Region> for RegionSet {
    fn from_iter<I: IntoIterator<Item = Region>>(iter: I) -> Self {
        RegionSet(iter.into_iter().fold(0, |acc, r| acc | r.bit()))
    }
}

impl fmt::Display for RegionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_all() {
            return f.write_str("all");
        }
        for r in self.iter() {
            write!(f, "{}", r.letter())?;
        }
        Ok(())
    }
}

/// One anisotropic 3D Gaussian.
///
/// `rotation` is a `(w, x, y, z)` quaternion. `sh_rest` holds the band-1
/// coefficient triples (empty for a DC-only scene).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: [f64; 3],
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub sh_dc: [f64; 3],
    pub sh_rest: Vec<[f64; 3]>,
    pub region: Region,
}

impl GaussianPrimitive {
    /// Isotropic, axis-aligned primitive with DC-only color.
    pub fn new(mean: [f64; 3], scale: f64, opacity: f64, sh_dc: [f64; 3]) -> Self {
        GaussianPrimitive {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [scale; 3],
            opacity,
            sh_dc,
            sh_rest: Vec::new(),
            region: Region::Other,
        }
    }

    fn validate(&self, index: usize, sh_bands: u32) -> Result<()> {
        let fail = |message: String| Err(Error::Validation { index, message });
        let finite = self
            .mean
            .iter()
            .chain(&self.rotation)
            .chain(&self.scale)
            .chain(&self.sh_dc)
            .chain(self.sh_rest.iter().flatten())
            .chain(std::iter::once(&self.opacity))
            .all(|v| v.is_finite());
        if !finite {
            return fail("non-finite parameter".into());
        }
        let qn = quat_norm(&self.rotation);
        if (qn - 1.0).abs() > UNIT_TOLERANCE {
            return fail(format!("rotation quaternion norm {qn} is not 1"));
        }
        if let Some(s) = self.scale.iter().find(|s| **s <= 0.0) {
            return fail(format!("scale component {s} must be positive"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return fail(format!("opacity {} outside [0, 1]", self.opacity));
        }
        let expected = sh_rest_len(sh_bands);
        if self.sh_rest.len() != expected {
            return fail(format!(
                "sh_rest has {} coefficients, scene declares {sh_bands} band(s) ({expected} expected)",
                self.sh_rest.len()
            ));
        }
        Ok(())
    }
}

/// Number of non-DC coefficient triples for a band count.
pub fn sh_rest_len(sh_bands: u32) -> usize {
    (sh_bands as usize).pow(2).saturating_sub(1)
}

pub(crate) fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<GaussianPrimitive>,
    pub sh_bands: u32,
    pub background: [f64; 3],
    pub schema_version: u32,
}

impl Scene {
    pub fn new(primitives: Vec<GaussianPrimitive>, sh_bands: u32, background: [f64; 3]) -> Result<Self> {
        let scene = Scene {
            primitives,
            sh_bands,
            background,
            schema_version: SCHEMA_VERSION,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Scene("scene has no primitives".into()));
        }
        if !(1..=3).contains(&self.sh_bands) {
            return Err(Error::Scene(format!(
                "sh_bands must be in 1..=3, got {}",
                self.sh_bands
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Scene(format!(
                "background {:?} outside [0, 1]",
                self.background
            )));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate(i, self.sh_bands)?;
        }
        Ok(())
    }

    /// Spread of the DC coefficients, the natural upper bound for an
    /// l-infinity color budget.
    pub fn dc_range(&self) -> f64 {
        let (lo, hi) = self
            .primitives
            .iter()
            .flat_map(|p| p.sh_dc)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        hi - lo
    }

    /// Adds zero-initialized band-1 coefficients to a DC-only scene.
    pub fn with_sh_bands(mut self, sh_bands: u32) -> Result<Self> {
        let n = sh_rest_len(sh_bands);
        for p in &mut self.primitives {
            p.sh_rest.resize(n, [0.0; 3]);
        }
        self.sh_bands = sh_bands;
        self.validate()?;
        Ok(self)
    }

    pub fn region_histogram(&self) -> Vec<(Region, usize)> {
        Region::ALL
            .into_iter()
            .map(|r| (r, self.primitives.iter().filter(|p| p.region == r).count()))
            .collect()
    }
}

/// Sorted indices of primitives whose label is in `labels`.
pub fn select_region(scene: &Scene, labels: RegionSet) -> Vec<usize> {
    scene
        .primitives
        .iter()
        .enumerate()
        .filter(|(_, p)| labels.contains(p.region))
        .map(|(i, _)| i)
        .collect()
}
