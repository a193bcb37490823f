//! Declarative model configuration and the shipped presets.

use crate::annulus::{InnerMapModel, InnerRemainder, MapModel, ScatteringKind, ScatteringMapModel};
use crate::blender::{CertifyOptions, ChartParams};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub d: usize,
    pub beta: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    /// Kick matrix of the first scattering map; identity when absent.
    #[serde(default)]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default = "zero_remainder")]
    pub remainder: InnerRemainder,
    pub gamma: f64,
    pub eps: f64,
    /// Scattering maps after the first one.
    #[serde(default)]
    pub extra_scatterings: Vec<ScatteringKind>,
}

fn zero_remainder() -> InnerRemainder {
    InnerRemainder::Zero
}

fn square(rows: &[Vec<f64>], d: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Config(format!("{what} must be {d} x {d}")));
    }
    Ok(DMatrix::from_row_slice(d, d, &rows.iter().flatten().copied().collect::<Vec<_>>()))
}

impl ModelConfig {
    pub fn build(&self) -> Result<MapModel> {
        let d = self.d;
        if d == 0 || self.beta.len() != d {
            return Err(Error::Config("beta must have d >= 1 entries".into()));
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::Config("eps must lie in (0, 1]".into()));
        }
        let a = square(&self.a, d, "A")?;
        let inner = InnerMapModel::new(self.beta.clone(), a, self.remainder.clone(), self.gamma)?;
        let b = match &self.b {
            Some(rows) => {
                square(rows, d, "B")?;
                rows.clone()
            }
            None => (0..d).map(|i| (0..d).map(|k| if i == k { 1.0 } else { 0.0 }).collect()).collect(),
        };
        let mut scatterings = vec![ScatteringMapModel::new(d, ScatteringKind::Kick { b })?];
        for kind in &self.extra_scatterings {
            scatterings.push(ScatteringMapModel::new(d, kind.clone())?);
        }
        Ok(MapModel {
            name: self.name.clone().unwrap_or_else(|| "inline".into()),
            inner,
            scatterings,
            eps: self.eps,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlenderConfig {
    /// Chart `eps`; the model `eps` when absent.
    #[serde(default)]
    pub eps: Option<f64>,
    /// Smallest acceptable covering radius.
    pub a_min: f64,
    pub chart: ChartParams,
    #[serde(default)]
    pub certify: CertifyOptions,
}

#[derive(Debug, Clone, Deserialize)]
struct PresetFile {
    model: ModelConfig,
    #[serde(default)]
    blender: Option<BlenderConfig>,
}

pub const D1_PRESET: &str = include_str!("../presets/d1.toml");
pub const D2_PRESET: &str = include_str!("../presets/d2.toml");

pub fn preset_text(name: &str) -> Result<&'static str> {
    match name {
        "d1" => Ok(D1_PRESET),
        "d2" => Ok(D2_PRESET),
        other => Err(Error::Config(format!("unknown preset '{other}'"))),
    }
}

pub fn preset_model_config(name: &str) -> Result<ModelConfig> {
    let file: PresetFile = toml::from_str(preset_text(name)?).map_err(|e| Error::Config(e.to_string()))?;
    Ok(file.model)
}

pub fn preset_blender_config(name: &str) -> Result<BlenderConfig> {
    let file: PresetFile = toml::from_str(preset_text(name)?).map_err(|e| Error::Config(e.to_string()))?;
    file.blender.ok_or_else(|| Error::Config(format!("preset '{name}' has no blender table")))
}

pub fn preset(name: &str) -> Result<MapModel> {
    preset_model_config(name)?.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load() {
        let m = preset("d1").unwrap();
        assert_eq!(m.d(), 1);
        assert_eq!(m.b()[(0, 0)], 1.0);
        let m2 = preset("d2").unwrap();
        assert_eq!(m2.d(), 2);
        assert!(preset("d3").is_err());
    }
}
