//! Magnetostatic forward model and Zeeman conversion.
//!
//! A point dipole generates the synthetic stray field; the NV frame projects
//! it onto the NV axis and converts between on-axis field and spin resonance
//! frequency. The conversion is affine: `f = D ± gamma * (bias + b)`, which
//! branch is tracked being a configuration choice.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// mu0 / 4pi in T·m/A.
pub const MU0_OVER_4PI: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("dipole field evaluated at the source position")]
    AtSource,
    #[error("NV axis must be a unit vector, |axis| = {0}")]
    AxisNotUnit(f64),
    #[error("invalid NV frame parameter: {0}")]
    BadParameter(&'static str),
}

/// Point magnetic dipole beneath the scan plane.
///
/// `standoff_m` is the height of the NV (and of the scan plane) above the
/// sample plane that contains the dipole; it is consumed by the pipeline when
/// it places the evaluation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipoleSource {
    /// Magnetic moment in A·m².
    pub moment_am2: Vector3<f64>,
    /// Dipole location in meters.
    pub position_m: Vector3<f64>,
    /// NV height above the sample plane in meters.
    pub standoff_m: f64,
}

impl DipoleSource {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.standoff_m > 0.0) {
            return Err(FieldError::BadParameter("standoff must be positive"));
        }
        if !(self.moment_am2.norm() > 0.0) {
            return Err(FieldError::BadParameter("moment must be non-zero"));
        }
        Ok(())
    }
}

/// Which Zeeman-split transition the scan follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Upper,
    Lower,
}

impl Branch {
    pub fn sign(&self) -> f64 {
        match self {
            Branch::Upper => 1.0,
            Branch::Lower => -1.0,
        }
    }
}

/// NV sensing frame: axis, bias field and spin-transition constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NvFrame {
    /// Unit vector along the NV symmetry axis.
    pub nv_axis: Vector3<f64>,
    /// Bias field applied along the NV axis, mT.
    pub bias_mt: f64,
    /// Zero-field splitting D, MHz.
    pub zero_field_splitting_mhz: f64,
    /// Gyromagnetic ratio, MHz/mT.
    pub gyromagnetic_mhz_per_mt: f64,
    pub branch: Branch,
}

impl NvFrame {
    /// Standard frame: axis along z, D = 2870 MHz, gamma = 28.03 MHz/mT.
    pub fn standard(bias_mt: f64) -> Self {
        Self {
            nv_axis: Vector3::new(0.0, 0.0, 1.0),
            bias_mt,
            zero_field_splitting_mhz: 2870.0,
            gyromagnetic_mhz_per_mt: 28.03,
            branch: Branch::Upper,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let n = self.nv_axis.norm();
        if (n - 1.0).abs() > 1e-12 {
            return Err(FieldError::AxisNotUnit(n));
        }
        if !(self.gyromagnetic_mhz_per_mt > 0.0) {
            return Err(FieldError::BadParameter("gyromagnetic ratio must be positive"));
        }
        if !(self.zero_field_splitting_mhz > 0.0) {
            return Err(FieldError::BadParameter("zero-field splitting must be positive"));
        }
        Ok(())
    }

    /// Field component along the NV axis, mT.
    pub fn project_on_axis(&self, b_mt: &Vector3<f64>) -> f64 {
        b_mt.dot(&self.nv_axis)
    }

    /// Resonance frequency for an on-axis sample field `b_mt` on top of the
    /// bias: `D ± gamma * (bias + b)`.
    pub fn field_to_frequency(&self, b_mt: f64) -> f64 {
        self.zero_field_splitting_mhz
            + self.branch.sign() * self.gyromagnetic_mhz_per_mt * (self.bias_mt + b_mt)
    }

    /// Exact inverse of [`field_to_frequency`](Self::field_to_frequency).
    ///
    /// Returns the total on-axis field when `subtract_bias` is false, the
    /// sample contribution alone when it is true.
    pub fn frequency_to_field(&self, f_mhz: f64, subtract_bias: bool) -> f64 {
        let total = self.branch.sign() * (f_mhz - self.zero_field_splitting_mhz)
            / self.gyromagnetic_mhz_per_mt;
        if subtract_bias {
            total - self.bias_mt
        } else {
            total
        }
    }
}

/// Stray field of a point dipole at `point_m`, in mT.
///
/// `B(r) = (mu0/4pi) [3 r_hat (m . r_hat) - m] / |r|^3`
pub fn dipole_field_at(src: &DipoleSource, point_m: &Vector3<f64>) -> Result<Vector3<f64>, FieldError> {
    let r = point_m - src.position_m;
    let dist = r.norm();
    if dist == 0.0 {
        return Err(FieldError::AtSource);
    }
    let r_hat = r / dist;
    let b_tesla =
        (r_hat * (3.0 * src.moment_am2.dot(&r_hat)) - src.moment_am2) * (MU0_OVER_4PI / dist.powi(3));
    Ok(b_tesla * 1e3)
}
