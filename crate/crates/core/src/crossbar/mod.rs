//! One memristive crossbar tile: device conductances, programming variation
//! and the parasitic resistive network that turns ideal conductances into
//! effective (non-ideal) ones.

mod circuit;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RandomStream, Tensor};

pub use circuit::{
    approximate_nonideal_conductance, effective_conductance, extract_effective_conductance, solve_crossbar,
    CrossbarCircuit,
};

/// How the tile's column currents are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CircuitMode {
    /// `I = G^T v`, parasitics ignored.
    Ideal,
    /// Exact nodal analysis of the parasitic network.
    #[default]
    Nodal,
    /// First-order series-resistance approximation.
    Approx,
}

impl CircuitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CircuitMode::Ideal => "ideal",
            CircuitMode::Nodal => "nodal",
            CircuitMode::Approx => "approx",
        }
    }
}

impl std::str::FromStr for CircuitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(CircuitMode::Ideal),
            "nodal" => Ok(CircuitMode::Nodal),
            "approx" => Ok(CircuitMode::Approx),
            other => Err(Error::invalid(format!("unknown circuit mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for CircuitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Crossbar geometry, parasitics and device range.
///
/// Resistances are in ohms, conductances in siemens. The defaults describe a
/// 64x64 ReRAM array with an ON/OFF ratio of 10 (20 kOhm .. 200 kOhm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossbarConfig {
    pub rows: usize,
    pub cols: usize,
    pub r_driver: f64,
    /// Per segment between adjacent columns along a row wire.
    pub r_wire_row: f64,
    /// Per segment between adjacent rows along a column wire.
    pub r_wire_col: f64,
    pub r_sense: f64,
    pub g_min: f64,
    pub g_max: f64,
    /// Relative standard deviation of programmed conductances.
    pub sigma_over_mu: f64,
    pub v_read: f64,
    pub solver_tol: f64,
    pub circuit_mode: CircuitMode,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        CrossbarConfig {
            rows: 64,
            cols: 64,
            r_driver: 1000.0,
            r_wire_row: 5.0,
            r_wire_col: 10.0,
            r_sense: 1000.0,
            g_min: 5e-6,
            g_max: 5e-5,
            sigma_over_mu: 0.10,
            v_read: 1.0,
            solver_tol: crate::numerics::DEFAULT_SOLVER_TOL,
            circuit_mode: CircuitMode::Nodal,
        }
    }
}

impl CrossbarConfig {
    /// Square `size x size` crossbar with default device and parasitics.
    pub fn square(size: usize) -> Self {
        CrossbarConfig {
            rows: size,
            cols: size,
            ..Default::default()
        }
    }

    /// All parasitics and variation switched off.
    pub fn ideal(size: usize) -> Self {
        CrossbarConfig {
            r_driver: 0.0,
            r_wire_row: 0.0,
            r_wire_col: 0.0,
            r_sense: 0.0,
            sigma_over_mu: 0.0,
            ..Self::square(size)
        }
    }

    pub fn on_off_ratio(&self) -> f64 {
        self.g_max / self.g_min
    }

    pub fn parasitics_zero(&self) -> bool {
        self.r_driver == 0.0 && self.r_wire_row == 0.0 && self.r_wire_col == 0.0 && self.r_sense == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("crossbar rows and cols must be >= 1"));
        }
        if !(self.g_min > 0.0 && self.g_min < self.g_max && self.g_max.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < g_min < g_max, got {} and {}",
                self.g_min, self.g_max
            )));
        }
        for (name, r) in [
            ("r_driver", self.r_driver),
            ("r_wire_row", self.r_wire_row),
            ("r_wire_col", self.r_wire_col),
            ("r_sense", self.r_sense),
        ] {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite value >= 0, got {r}")));
            }
        }
        if !(self.sigma_over_mu >= 0.0 && self.sigma_over_mu.is_finite()) {
            return Err(Error::invalid("sigma_over_mu must be >= 0"));
        }
        if !(self.v_read > 0.0 && self.v_read.is_finite()) {
            return Err(Error::invalid("v_read must be > 0"));
        }
        if !(self.solver_tol > 0.0) {
            return Err(Error::invalid("solver_tol must be > 0"));
        }
        Ok(())
    }
}

/// Device conductances of one tile plus a mask of zero-padding cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductanceTile {
    values: Tensor,
    padded: Vec<bool>,
}

impl ConductanceTile {
    pub fn new(values: Tensor, padded: Vec<bool>) -> Result<Self> {
        if values.ndim() != 2 || padded.len() != values.len() {
            return Err(Error::shape(format!(
                "tile values {:?} with {} mask entries",
                values.shape(),
                padded.len()
            )));
        }
        Ok(ConductanceTile { values, padded })
    }

    /// Tile without padding.
    pub fn dense(values: Tensor) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![false; n])
    }

    pub fn uniform(rows: usize, cols: usize, g: f64) -> Self {
        ConductanceTile {
            values: Tensor::full(&[rows, cols], g),
            padded: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn padded_mask(&self) -> &[bool] {
        &self.padded
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.at2(i, j)
    }

    /// Checks that every cell lies in `[g_min, g_max]` and padded cells sit at `g_min`.
    pub fn validate(&self, cfg: &CrossbarConfig) -> Result<()> {
        for (k, (&g, &pad)) in self.values.data().iter().zip(&self.padded).enumerate() {
            if !(g >= cfg.g_min && g <= cfg.g_max) {
                return Err(Error::invalid(format!(
                    "cell {k} conductance {g:e} outside [{:e}, {:e}]",
                    cfg.g_min, cfg.g_max
                )));
            }
            if pad && g != cfg.g_min {
                return Err(Error::invalid(format!("padded cell {k} is not at g_min")));
            }
        }
        Ok(())
    }
}

/// Programs the tile with multiplicative Gaussian error: each real cell
/// becomes `g * (1 + eps)`, `eps ~ N(0, sigma_over_mu)`, clipped to the
/// device range. Padded cells stay at `g_min`.
pub fn apply_device_variation(
    tile: &ConductanceTile,
    cfg: &CrossbarConfig,
    stream: &mut RandomStream,
) -> Result<ConductanceTile> {
    tile.validate(cfg)?;
    if cfg.sigma_over_mu == 0.0 {
        return Ok(tile.clone());
    }
    let eps = stream.gaussian(tile.values.len(), 0.0, cfg.sigma_over_mu)?;
    let mut out = tile.clone();
    for ((g, &pad), e) in out.values.data_mut().iter_mut().zip(&tile.padded).zip(eps) {
        if !pad {
            *g = (*g * (1.0 + e)).clamp(cfg.g_min, cfg.g_max);
        }
    }
    Ok(out)
}
