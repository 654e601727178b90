use crate::error::{Error, Result};
use crate::renderer::ParamClass;

use super::Scene;

/// Flat view of one parameter class over a subset of primitives.
///
/// `values` is the optimization variable, `reference` the frozen starting
/// point; both are laid out primitive-major, `width` entries per primitive,
/// following `index_map`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub class: ParamClass,
    pub index_map: Vec<usize>,
    pub width: usize,
    pub values: Vec<f64>,
    pub reference: Vec<f64>,
}

/// The DC color tensor is the main optimization variable.
pub type ColorTensor = ParamTensor;

impl ParamTensor {
    pub fn from_scene(scene: &Scene, class: ParamClass, index_map: Vec<usize>) -> Result<Self> {
        if class == ParamClass::AcColor && scene.sh_bands < 2 {
            return Err(Error::invalid(
                "ac_color parameters need a scene with at least 2 SH bands",
            ));
        }
        if index_map.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("index map must be sorted and unique"));
        }
        if let Some(&last) = index_map.last() {
            if last >= scene.len() {
                return Err(Error::invalid(format!(
                    "index {last} out of range for {} primitives",
                    scene.len()
                )));
            }
        }
        let width = class.width(scene.sh_bands);
        let mut values = Vec::with_capacity(index_map.len() * width);
        for &i in &index_map {
            values.extend(class.read(&scene.primitives[i]));
        }
        Ok(ParamTensor {
            class,
            index_map,
            width,
            reference: values.clone(),
            values,
        })
    }

    /// DC colors of the given primitives.
    pub fn dc(scene: &Scene, index_map: Vec<usize>) -> Result<Self> {
        Self::from_scene(scene, ParamClass::DcColor, index_map)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Writes `values` into the covered primitives.
    pub fn write_into(&self, scene: &mut Scene) {
        for (row, &i) in self.index_map.iter().enumerate() {
            let chunk = &self.values[row * self.width..(row + 1) * self.width];
            self.class.write(&mut scene.primitives[i], chunk);
        }
    }

    /// Restricts a full-scene gradient (as returned by the renderer) to the
    /// covered primitives.
    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len());
        for &i in &self.index_map {
            out.extend_from_slice(&full[i * self.width..(i + 1) * self.width]);
        }
        out
    }

    pub fn delta(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().zip(&self.reference).map(|(v, r)| v - r)
    }

    pub fn linf_deviation(&self) -> f64 {
        self.delta().fold(0.0, |m, d| m.max(d.abs()))
    }

    pub fn l2_deviation(&self) -> f64 {
        self.delta().map(|d| d * d).sum::<f64>().sqrt()
    }
}
