//! Rectangular scalar maps with physical extent and a unit tag.
//!
//! `ScalarGrid` is the common carrier for every per-pixel quantity in the
//! pipeline: stray-field maps (mT), excitation-frequency maps (MHz), photon
//! count maps and normalized-PL maps. Values are stored row-major, index
//! `iy * nx + ix`, with pixel centers at `((ix + 0.5) / nx * width,
//! (iy + 0.5) / ny * height)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Physical unit carried by a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Millitesla,
    Megahertz,
    Counts,
    Dimensionless,
}

impl Unit {
    pub fn label(&self) -> &'static str {
        match self {
            Unit::Millitesla => "mT",
            Unit::Megahertz => "MHz",
            Unit::Counts => "counts",
            Unit::Dimensionless => "dimensionless",
        }
    }

    pub fn from_label(s: &str) -> Option<Unit> {
        match s {
            "mT" => Some(Unit::Millitesla),
            "MHz" => Some(Unit::Megahertz),
            "counts" => Some(Unit::Counts),
            "dimensionless" => Some(Unit::Dimensionless),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid must be at least 2x2, got {nx}x{ny}")]
    TooSmall { nx: usize, ny: usize },
    #[error("grid extent must be positive and finite, got {0}x{1}")]
    BadExtent(f64, f64),
    #[error("value length {len} does not match {nx}x{ny}")]
    LengthMismatch { len: usize, nx: usize, ny: usize },
    #[error("non-finite value at pixel ({ix}, {iy})")]
    NonFinite { ix: usize, iy: usize },
}

/// Rectangular grid of scalar values with a declared unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarGrid {
    nx: usize,
    ny: usize,
    extent: (f64, f64),
    unit: Unit,
    values: Vec<f64>,
}

impl ScalarGrid {
    /// Builds a grid from row-major values, validating shape and finiteness.
    pub fn new(
        nx: usize,
        ny: usize,
        extent: (f64, f64),
        unit: Unit,
        values: Vec<f64>,
    ) -> Result<Self, GridError> {
        if nx < 2 || ny < 2 {
            return Err(GridError::TooSmall { nx, ny });
        }
        if !(extent.0 > 0.0 && extent.1 > 0.0) || !extent.0.is_finite() || !extent.1.is_finite() {
            return Err(GridError::BadExtent(extent.0, extent.1));
        }
        if values.len() != nx * ny {
            return Err(GridError::LengthMismatch {
                len: values.len(),
                nx,
                ny,
            });
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(GridError::NonFinite {
                    ix: i % nx,
                    iy: i / nx,
                });
            }
        }
        Ok(Self {
            nx,
            ny,
            extent,
            unit,
            values,
        })
    }

    /// Grid filled with a constant.
    pub fn filled(nx: usize, ny: usize, extent: (f64, f64), unit: Unit, value: f64) -> Self {
        Self::new(nx, ny, extent, unit, vec![value; nx * ny]).expect("constant grid is valid")
    }

    /// Grid computed per pixel from normalized pixel-center coordinates.
    pub fn from_fn(
        nx: usize,
        ny: usize,
        extent: (f64, f64),
        unit: Unit,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, GridError> {
        let mut values = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                values.push(f(ix, iy));
            }
        }
        Self::new(nx, ny, extent, unit, values)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn extent(&self) -> (f64, f64) {
        self.extent
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        assert!(v.is_finite(), "grid values must be finite");
        self.values[iy * self.nx + ix] = v;
    }

    /// Center of pixel `(ix, iy)` in scan coordinates.
    pub fn pixel_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            (ix as f64 + 0.5) / self.nx as f64 * self.extent.0,
            (iy as f64 + 0.5) / self.ny as f64 * self.extent.1,
        )
    }

    pub fn same_dims(&self, other: &ScalarGrid) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Pixelwise map into a new grid, possibly with a different unit.
    pub fn map(&self, unit: Unit, f: impl Fn(f64) -> f64) -> ScalarGrid {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        ScalarGrid::new(self.nx, self.ny, self.extent, unit, values)
            .expect("mapped grid must stay finite")
    }

    /// Pixelwise absolute difference; grids must share dimensions.
    pub fn abs_diff(&self, other: &ScalarGrid) -> ScalarGrid {
        assert!(self.same_dims(other), "grid dimensions differ");
        let values: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .collect();
        ScalarGrid::new(self.nx, self.ny, self.extent, self.unit, values)
            .expect("difference of finite grids is finite")
    }
}
