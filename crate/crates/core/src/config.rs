//! Scenario configuration, read from TOML.
//!
//! Every table rejects unknown keys so that a typo fails loudly instead of
//! silently falling back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ecm::EcmConfig;
use crate::error::{Error, Result};
use crate::geometry::Layer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scans: usize,
    /// Sampling period (s).
    pub dt: f64,
    /// Transmitter-to-receiver distance (km).
    pub baseline_km: f64,
    pub surveillance: Surveillance,
    pub grid: GridConfig,
    pub radar: RadarConfig,
    pub process: ProcessConfig,
    pub gmrf: GmrfConfig,
    #[serde(default, rename = "ionosonde")]
    pub ionosondes: Vec<IonosondeConfig>,
    #[serde(rename = "target")]
    pub targets: Vec<TargetConfig>,
    #[serde(default)]
    pub ecm: EcmConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Surveillance {
    pub range_km: [f64; 2],
    pub azimuth_deg: [f64; 2],
    /// Slant range-rate span of the clutter box (km/s).
    pub range_rate_kms: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_km: [f64; 2],
    pub y_km: [f64; 2],
    pub cell_km: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarConfig {
    pub detection_probability: f64,
    /// Expected clutter returns per scan.
    pub expected_clutter: f64,
    /// Std of slant range (km), range rate (km/s) and azimuth (rad).
    pub noise_std: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessConfig {
    /// Per-step std of (ρ, ρ̇, b, ḃ) for truth and filter alike.
    pub noise_std: [f64; 4],
    /// Std of the tracker's initial state uncertainty.
    pub initial_std: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmrfConfig {
    pub e: LayerConfig,
    pub f: LayerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub diagonal: f64,
    pub off_diagonal: f64,
    pub mean_km: f64,
    /// Marginal std quoted alongside the precision entries; used only as a
    /// reference value in reports.
    pub nominal_std_km: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum IonosondeKind {
    Vertical,
    Oblique { distance_km: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IonosondeConfig {
    /// One-based cell number, X-fastest.
    pub subregion: usize,
    pub kind: IonosondeKind,
    #[serde(default = "both_layers")]
    pub layers: Vec<Layer>,
    /// Height-equivalent noise std (km).
    pub noise_std_km: f64,
}

fn both_layers() -> Vec<Layer> {
    vec![Layer::E, Layer::F]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    /// (ρ km, ρ̇ km/s, b rad, ḃ rad/s).
    pub initial: [f64; 4],
}

impl ScenarioConfig {
    /// The reference five-target scenario.
    pub fn reference() -> Self {
        Self {
            scans: 30,
            dt: 20.0,
            baseline_km: 40.0,
            surveillance: Surveillance {
                range_km: [1000.0, 1400.0],
                azimuth_deg: [4.0, 12.0],
                range_rate_kms: [-0.4, 0.4],
            },
            grid: GridConfig {
                x_km: [480.0, 750.0],
                y_km: [30.0, 150.0],
                cell_km: 15.0,
            },
            radar: RadarConfig {
                detection_probability: 0.7,
                expected_clutter: 50.0,
                noise_std: [5.0, 0.001, 0.003],
            },
            process: ProcessConfig {
                noise_std: [0.1, 2e-3, 2e-4, 4e-6],
                initial_std: [1.0, 0.005, 1e-3, 1e-5],
            },
            gmrf: GmrfConfig {
                e: LayerConfig {
                    diagonal: 0.082,
                    off_diagonal: -0.0205,
                    mean_km: 110.0,
                    nominal_std_km: 11.0,
                },
                f: LayerConfig {
                    diagonal: 0.0587,
                    off_diagonal: -0.0147,
                    mean_km: 220.0,
                    nominal_std_km: 13.0,
                },
            },
            ionosondes: [1, 73]
                .into_iter()
                .map(|subregion| IonosondeConfig {
                    subregion,
                    kind: IonosondeKind::Vertical,
                    layers: both_layers(),
                    noise_std_km: 10.0,
                })
                .collect(),
            targets: [
                [1100.0, 0.15, 0.09472, 1.52665e-4],
                [1190.0, -0.14, 0.11432, 1.07266e-4],
                [1210.0, -0.185, 0.16401, -5.79865e-5],
                [1120.0, 0.08, 0.20201, -1.55665e-4],
                [1090.0, 0.185, 0.16251, -5.25665e-5],
            ]
            .into_iter()
            .map(|initial| TargetConfig { initial })
            .collect(),
            ecm: EcmConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.scans == 0 || !(self.dt > 0.0) {
            return bad("scans and dt must be positive".into());
        }
        if !(self.baseline_km >= 0.0) {
            return bad(format!("baseline_km {} is negative", self.baseline_km));
        }
        let s = &self.surveillance;
        for (name, r) in [("range_km", s.range_km), ("azimuth_deg", s.azimuth_deg), ("range_rate_kms", s.range_rate_kms)] {
            if !(r[0] < r[1]) {
                return bad(format!("surveillance.{name} must be increasing, got {r:?}"));
            }
        }
        let g = &self.grid;
        if !(g.cell_km > 0.0 && g.x_km[0] < g.x_km[1] && g.y_km[0] < g.y_km[1]) {
            return bad("grid extent must be increasing with a positive cell size".into());
        }
        let pd = self.radar.detection_probability;
        if !(0.0..=1.0).contains(&pd) {
            return bad(format!("detection_probability {pd} not in [0, 1]"));
        }
        if !(self.radar.expected_clutter >= 0.0) {
            return bad("expected_clutter must be non-negative".into());
        }
        if self.radar.noise_std.iter().any(|v| !(*v > 0.0)) {
            return bad("radar noise_std entries must be positive".into());
        }
        if self.process.noise_std.iter().chain(&self.process.initial_std).any(|v| !(*v >= 0.0)) {
            return bad("process std entries must be non-negative".into());
        }
        for site in &self.ionosondes {
            if site.subregion == 0 {
                return bad("ionosonde subregions are numbered from 1".into());
            }
            if !(site.noise_std_km > 0.0) {
                return bad("ionosonde noise_std_km must be positive".into());
            }
        }
        if self.targets.is_empty() {
            return bad("at least one [[target]] is required".into());
        }
        for t in &self.targets {
            if !(t.initial[0] > 0.0) || t.initial.iter().any(|v| !v.is_finite()) {
                return bad(format!("target initial state {:?} invalid", t.initial));
            }
        }
        self.ecm.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_round_trips_through_toml() {
        let cfg = ScenarioConfig::reference();
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ScenarioConfig::reference().to_toml().replace("scans = 30", "scans = 30\nscnas = 3");
        assert!(matches!(ScenarioConfig::from_toml_str(&text), Err(Error::Config(_))));
        let text = ScenarioConfig::reference()
            .to_toml()
            .replace("detection_probability", "detection_prob");
        assert!(ScenarioConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = ScenarioConfig::reference();
        cfg.radar.detection_probability = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::reference();
        cfg.ionosondes[0].subregion = 0;
        assert!(cfg.validate().is_err());
    }
}
