//! Run configuration: one TOML document with `geometry`, `physics`,
//! `spdiff`, `dgdiff`, and `pipeline` sections. Unknown keys are rejected.
//! Every run echoes its effective configuration next to its outputs so a
//! result is reproducible from the echo plus the seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::image::HuWindow;
use crate::nn::RegressorArch;
use crate::physics::{AlphaBarSchedule, LambdaEndpoint, LambdaSchedule, NoiseModelParams};
use crate::pipeline::PipelineParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub geometry: GeometrySection,
    pub physics: PhysicsSection,
    pub spdiff: TrainSection,
    pub dgdiff: DgdiffSection,
    pub pipeline: PipelineSection,
}

/// Geometry preset plus optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub preset: String,
    pub n_views: Option<usize>,
    pub n_bins: Option<usize>,
    pub bin_spacing_mm: Option<f64>,
    pub sid_mm: Option<f64>,
    pub did_mm: Option<f64>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub pixel_size_mm: Option<f64>,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            preset: "desk128".into(),
            n_views: None,
            n_bins: None,
            bin_spacing_mm: None,
            sid_mm: None,
            did_mm: None,
            width: None,
            height: None,
            pixel_size_mm: None,
        }
    }
}

impl GeometrySection {
    pub fn resolve(&self) -> Result<FanBeamGeometry> {
        let base = FanBeamGeometry::preset(&self.preset)?;
        FanBeamGeometry::new(
            self.n_views.unwrap_or(base.n_views),
            self.n_bins.unwrap_or(base.n_bins),
            self.bin_spacing_mm.unwrap_or(base.bin_spacing_mm),
            self.sid_mm.unwrap_or(base.sid_mm),
            self.did_mm.unwrap_or(base.did_mm),
            self.width.unwrap_or(base.width),
            self.height.unwrap_or(base.height),
            self.pixel_size_mm.unwrap_or(base.pixel_size_mm),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsSection {
    pub i0: f64,
    pub sigma_e2: f64,
    pub tau: usize,
    pub lambda_hi: f64,
    pub lambda_lo: f64,
    /// Which index the upper schedule endpoint pins: 0 (the formula's
    /// anchor) or 1 (the alternative reading).
    pub lambda_endpoint_at: u8,
    pub t_max: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

impl Default for PhysicsSection {
    fn default() -> Self {
        Self {
            i0: 2.5e5,
            sigma_e2: 10.0,
            tau: 10,
            lambda_hi: 3e5,
            lambda_lo: 2.5e4,
            lambda_endpoint_at: 0,
            t_max: 1000,
            beta_lo: 1e-4,
            beta_hi: 0.02,
        }
    }
}

impl PhysicsSection {
    pub fn noise_params(&self) -> Result<NoiseModelParams> {
        NoiseModelParams::new(self.i0, self.sigma_e2)
    }

    pub fn lambda_schedule(&self) -> Result<LambdaSchedule> {
        let endpoint = match self.lambda_endpoint_at {
            0 => LambdaEndpoint::AtZero,
            1 => LambdaEndpoint::AtOne,
            other => {
                return Err(Error::Config(format!(
                    "lambda_endpoint_at must be 0 or 1, got {other}"
                )))
            }
        };
        LambdaSchedule::harmonic(self.tau, self.lambda_hi, self.lambda_lo, endpoint)
    }

    pub fn alpha_bar_schedule(&self) -> Result<AlphaBarSchedule> {
        AlphaBarSchedule::linear(self.t_max, self.beta_lo, self.beta_hi)
    }
}

/// Training knobs for the projection-domain model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub base_width: usize,
    pub levels: usize,
    pub time_embed_dim: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 2,
            iterations: 600,
            base_width: 16,
            levels: 2,
            time_embed_dim: 32,
        }
    }
}

impl TrainSection {
    pub fn arch(&self) -> RegressorArch {
        RegressorArch {
            in_channels: 1,
            base_width: self.base_width,
            levels: self.levels,
            time_embed_dim: self.time_embed_dim,
        }
    }
}

/// Training knobs for the image prior plus its guidance weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgdiffSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub base_width: usize,
    pub levels: usize,
    pub time_embed_dim: usize,
    pub s2: f64,
}

impl Default for DgdiffSection {
    fn default() -> Self {
        Self {
            learning_rate: 8e-5,
            batch_size: 2,
            iterations: 1200,
            base_width: 16,
            levels: 2,
            time_embed_dim: 32,
            s2: 0.8,
        }
    }
}

impl DgdiffSection {
    pub fn arch(&self) -> RegressorArch {
        RegressorArch {
            in_channels: 1,
            base_width: self.base_width,
            levels: self.levels,
            time_embed_dim: self.time_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub mu_water: f64,
    pub window_lo: f64,
    pub window_hi: f64,
    pub log_floor: f64,
    pub doses: Vec<f64>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            mu_water: crate::image::MU_WATER_PER_MM,
            window_lo: -1000.0,
            window_hi: 1000.0,
            log_floor: 1e-6,
            doses: vec![0.5, 0.25, 0.125, 0.10],
        }
    }
}

impl PipelineSection {
    pub fn params(&self) -> Result<PipelineParams> {
        let params = PipelineParams {
            mu_water: self.mu_water,
            window: HuWindow::new(self.window_lo, self.window_hi)?,
            log_floor: self.log_floor,
        };
        params.validate()?;
        Ok(params)
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Applies `section.key=value` overrides on the TOML representation,
    /// so unknown keys and type errors are caught the same way as in
    /// files.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value =
            toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for entry in overrides {
            let (path, raw) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{entry}' is not key=value")))?;
            let parsed: toml::Value = toml::from_str(&format!("v = {raw}"))
                .map(|t: toml::Table| t["v"].clone())
                .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
            let segments: Vec<&str> = path.trim().split('.').collect();
            let (last, parents) = segments.split_last().expect("split_once gave a key");
            let mut cursor = &mut value;
            for seg in parents {
                cursor = cursor
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("'{path}' does not address a table")))?
                    .entry(seg.to_string())
                    .or_insert(toml::Value::Table(Default::default()));
            }
            cursor
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("'{path}' does not address a table")))?
                .insert(last.to_string(), parsed);
        }
        let config: Config = value.try_into().map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Fails fast if any section cannot be materialized.
    pub fn validate(&self) -> Result<()> {
        self.geometry.resolve()?;
        self.physics.noise_params()?;
        self.physics.lambda_schedule()?;
        self.physics.alpha_bar_schedule()?;
        self.pipeline.params()?;
        if self.pipeline.doses.is_empty() {
            return Err(Error::Config("pipeline.doses must be nonempty".into()));
        }
        for &d in &self.pipeline.doses {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!("dose {d} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// The effective configuration as TOML, written next to run outputs.
    pub fn echo(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_materialize() {
        let c = Config::default();
        c.validate().unwrap();
        let lam = c.physics.lambda_schedule().unwrap();
        assert_eq!(lam.lambda(0), 3e5);
        let geo = c.geometry.resolve().unwrap();
        assert_eq!(geo.n_views, 180);
        assert_eq!(c.pipeline.doses, vec![0.5, 0.25, 0.125, 0.10]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("[physics]\nnot_a_key = 3\n").is_err());
        assert!(Config::from_toml("[nope]\nx = 1\n").is_err());
    }

    #[test]
    fn file_values_override_defaults() {
        let c = Config::from_toml(
            "[geometry]\npreset = \"mayo2016_sim\"\n\n[physics]\ntau = 12\n",
        )
        .unwrap();
        assert_eq!(c.geometry.resolve().unwrap().n_views, 672);
        assert_eq!(c.physics.tau, 12);
        assert_eq!(c.physics.i0, 2.5e5, "untouched keys keep defaults");
    }

    #[test]
    fn dotted_overrides_apply_and_reject_unknowns() {
        let c = Config::default();
        let c2 = c
            .apply_overrides(&[
                "physics.tau=14".into(),
                "pipeline.doses=[0.5, 0.25]".into(),
                "geometry.preset=\"mayo2016_sim\"".into(),
            ])
            .unwrap();
        assert_eq!(c2.physics.tau, 14);
        assert_eq!(c2.pipeline.doses, vec![0.5, 0.25]);
        assert_eq!(c2.geometry.preset, "mayo2016_sim");
        assert!(c.apply_overrides(&["physics.nope=1".into()]).is_err());
        assert!(c.apply_overrides(&["bad-entry".into()]).is_err());
    }

    #[test]
    fn lambda_endpoint_knob() {
        let c = Config::default()
            .apply_overrides(&["physics.lambda_endpoint_at=1".into()])
            .unwrap();
        let lam = c.physics.lambda_schedule().unwrap();
        assert_eq!(lam.lambda(1), 3e5);
        assert!(Config::default()
            .apply_overrides(&["physics.lambda_endpoint_at=2".into()])
            .is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = Config::default()
            .apply_overrides(&["physics.tau=9".into()])
            .unwrap();
        let echoed = c.echo().unwrap();
        let back = Config::from_toml(&echoed).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn bad_doses_rejected() {
        assert!(Config::default()
            .apply_overrides(&["pipeline.doses=[0.0]".into()])
            .is_err());
        assert!(Config::default()
            .apply_overrides(&["pipeline.doses=[1.5]".into()])
            .is_err());
    }
}
