//! Scenario files.
//!
//! ```toml
//! sensors = 16
//! spacing = 0.5          # optional, wavelengths
//! grid = "uniform"       # or "orthogonal"
//! grid_size = 90         # uniform grids only
//! doas = [-16.7, -4.2, 15.7]
//! snapshots = 10
//! snr_db = 20.0          # omit for noise-free
//! seed = 7
//! ```

use serde::{Deserialize, Serialize};

use super::{orthogonal_grid, AngularGrid, DoaScenario, GridKind, UlaGeometry};
use crate::error::{Error, Result};
use crate::rng::RngSeed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub sensors: usize,
    #[serde(default = "half")]
    pub spacing: f64,
    pub grid: GridKind,
    #[serde(default)]
    pub grid_size: Option<usize>,
    pub doas: Vec<f64>,
    pub snapshots: usize,
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn half() -> f64 {
    0.5
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<DoaScenario> {
        let grid = match (self.grid, self.grid_size) {
            (GridKind::Uniform, Some(n)) => AngularGrid::uniform(n)?,
            (GridKind::Uniform, None) => return Err(Error::Config("uniform grid needs `grid_size`".into())),
            (GridKind::Orthogonal, None) => orthogonal_grid(self.sensors)?,
            (GridKind::Orthogonal, Some(n)) if n == self.sensors => orthogonal_grid(self.sensors)?,
            (GridKind::Orthogonal, Some(n)) => {
                return Err(Error::Config(format!("orthogonal grid size is fixed by the array ({}), got {n}", self.sensors)))
            }
        };
        let scenario = DoaScenario {
            geometry: UlaGeometry { sensors: self.sensors, element_spacing: self.spacing },
            grid,
            true_doas: self.doas,
            snapshots: self.snapshots,
            snr_db: self.snr_db,
            seed: RngSeed(self.seed),
        };
        scenario.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(scenario)
    }
}

/// Parses scenario TOML. Errors carry the offending line and column.
pub fn parse_scenario(text: &str) -> Result<DoaScenario> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    file.into_scenario()
}
