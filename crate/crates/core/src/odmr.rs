//! ODMR spectral model: Gaussian dip, shot-noised photoluminescence and the
//! full-spectrum fit used to lock onto the resonance at the first pixel.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{minimize, OptimizerConfig};

#[derive(Debug, Error)]
pub enum OdmrError {
    #[error("invalid line shape: {0}")]
    BadShape(&'static str),
    #[error("spectrum needs at least 5 points, got {0}")]
    TooFewPoints(usize),
    #[error("frequency and count arrays differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("dip not bracketed: minimum count at sweep endpoint (index {0})")]
    DipNotBracketed(usize),
    #[error(
        "spectrum fit did not converge: {iterations} iterations, gradient norm {gradient_norm:.3e}"
    )]
    NonConvergence { iterations: usize, gradient_norm: f64 },
    #[error("spectrum fit degenerate: {0}")]
    Degenerate(&'static str),
}

/// Gaussian ODMR dip, parameterized by its full width at half maximum.
///
/// `g(x) = 1 - A exp(-4 ln2 x^2 / w^2)`, normalized to the off-resonance
/// baseline; `baseline_counts` is the expected photon number per integration
/// window far from resonance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineShape {
    /// Dip contrast A, in (0, 1).
    pub contrast: f64,
    /// Full width at half maximum, MHz.
    pub fwhm_mhz: f64,
    /// Expected off-resonance photon count N0.
    pub baseline_counts: f64,
}

const FOUR_LN2: f64 = 2.772588722239781; // 4 ln 2

impl LineShape {
    pub fn new(contrast: f64, fwhm_mhz: f64, baseline_counts: f64) -> Result<Self, OdmrError> {
        let shape = Self {
            contrast,
            fwhm_mhz,
            baseline_counts,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<(), OdmrError> {
        if !(self.contrast > 0.0 && self.contrast < 1.0) {
            return Err(OdmrError::BadShape("contrast must be in (0, 1)"));
        }
        if !(self.fwhm_mhz > 0.0) {
            return Err(OdmrError::BadShape("fwhm must be positive"));
        }
        if !(self.baseline_counts > 0.0) {
            return Err(OdmrError::BadShape("baseline counts must be positive"));
        }
        Ok(())
    }

    /// Normalized PL at the given detuning from resonance.
    pub fn value(&self, detuning_mhz: f64) -> f64 {
        let u = detuning_mhz / self.fwhm_mhz;
        1.0 - self.contrast * (-FOUR_LN2 * u * u).exp()
    }

    /// d(value)/d(detuning), used by the reconstruction gradient.
    pub fn slope(&self, detuning_mhz: f64) -> f64 {
        let w2 = self.fwhm_mhz * self.fwhm_mhz;
        let u2 = detuning_mhz * detuning_mhz / w2;
        self.contrast * (2.0 * FOUR_LN2 * detuning_mhz / w2) * (-FOUR_LN2 * u2).exp()
    }

    /// Expected photon count when driving at `f_mw` with resonance at `f_res`.
    pub fn expected_counts(&self, f_mw_mhz: f64, f_res_mhz: f64) -> f64 {
        self.baseline_counts * self.value(f_mw_mhz - f_res_mhz)
    }
}

/// One Poisson-distributed photon count for a single MW excitation.
pub fn sample_pl<R: Rng + ?Sized>(shape: &LineShape, f_mw_mhz: f64, f_res_mhz: f64, rng: &mut R) -> u64 {
    let mean = shape.expected_counts(f_mw_mhz, f_res_mhz);
    let poisson = Poisson::new(mean).expect("positive Poisson mean");
    poisson.sample(rng) as u64
}

/// Result of the full-spectrum fit at the first pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumFit {
    /// Fitted resonance frequency, MHz.
    pub resonance_mhz: f64,
    pub shape: LineShape,
    /// RMS of (counts - model)/N0 over the sweep.
    pub residual_rms: f64,
    pub iterations: usize,
}

/// Least-squares fit of `N0 * g(f - f_res)` over (f_res, A, w, N0).
///
/// Initialization follows the data: resonance at the minimum-count point,
/// baseline at the maximum count, width at half the sweep span, contrast from
/// the min/max ratio.
pub fn fit_spectrum(frequencies_mhz: &[f64], counts: &[f64]) -> Result<SpectrumFit, OdmrError> {
    if frequencies_mhz.len() != counts.len() {
        return Err(OdmrError::LengthMismatch(frequencies_mhz.len(), counts.len()));
    }
    let n = frequencies_mhz.len();
    if n < 5 {
        return Err(OdmrError::TooFewPoints(n));
    }

    let (mut i_min, mut i_max) = (0usize, 0usize);
    for i in 1..n {
        if counts[i] < counts[i_min] {
            i_min = i;
        }
        if counts[i] > counts[i_max] {
            i_max = i;
        }
    }
    if i_min == 0 || i_min == n - 1 {
        return Err(OdmrError::DipNotBracketed(i_min));
    }
    let c_max = counts[i_max];
    let c_min = counts[i_min];
    if !(c_max > 0.0) || c_min < 0.0 {
        return Err(OdmrError::Degenerate("counts must be non-negative with a positive maximum"));
    }

    let f_lo = frequencies_mhz.iter().copied().fold(f64::INFINITY, f64::min);
    let f_hi = frequencies_mhz
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = f_hi - f_lo;
    if !(span > 0.0) {
        return Err(OdmrError::Degenerate("sweep has zero span"));
    }
    let center = 0.5 * (f_lo + f_hi);

    // scaled parameters: position in span units, contrast, width in span
    // units, baseline in units of the maximum count
    let theta0 = DVector::from_vec(vec![
        (frequencies_mhz[i_min] - center) / span,
        (1.0 - c_min / c_max).clamp(0.05, 0.95),
        0.5,
        1.0,
    ]);

    let freqs_scaled: Vec<f64> = frequencies_mhz.iter().map(|f| (f - center) / span).collect();
    let counts_scaled: Vec<f64> = counts.iter().map(|c| c / c_max).collect();
    let inv_n = 1.0 / n as f64;

    let mut objective = |theta: &DVector<f64>, grad: &mut DVector<f64>| -> f64 {
        let (pos, a, w, n0) = (theta[0], theta[1], theta[2], theta[3]);
        let mut val = 0.0;
        grad.fill(0.0);
        for (f, c) in freqs_scaled.iter().zip(&counts_scaled) {
            let x = f - pos;
            let e = (-FOUR_LN2 * x * x / (w * w)).exp();
            let g = 1.0 - a * e;
            let model = n0 * g;
            let r = model - c;
            val += r * r * inv_n;
            let dr = 2.0 * r * inv_n;
            // d model / d pos = n0 * a * e * (-2 k x / w^2) * (-1) sign handling:
            // g = 1 - a exp(-k x^2 / w^2), x = f - pos
            // dg/dpos = -a e * (-k * 2x / w^2) * dx/dpos(-1) = -2 k a x e / w^2
            let k = FOUR_LN2;
            grad[0] += dr * n0 * (-2.0 * k * a * x * e / (w * w));
            grad[1] += dr * n0 * (-e);
            grad[2] += dr * n0 * (-a * e * (2.0 * k * x * x / (w * w * w)));
            grad[3] += dr * g;
        }
        val
    };

    let cfg = OptimizerConfig {
        memory: 10,
        max_iterations: 1000,
        gradient_tolerance: 1e-12,
        objective_tolerance: 0.0,
    };
    let res = minimize(&mut objective, theta0, &cfg);
    // the gradient tolerance is deliberately strict; accept any stall in the
    // flat noise floor as long as the gradient is genuinely small
    if !res.converged && res.gradient_norm > 1e-6 {
        return Err(OdmrError::NonConvergence {
            iterations: res.iterations,
            gradient_norm: res.gradient_norm,
        });
    }

    let f_res = res.x[0] * span + center;
    let contrast = res.x[1];
    let fwhm = res.x[2] * span;
    let n0 = res.x[3] * c_max;
    if f_res < f_lo || f_res > f_hi {
        return Err(OdmrError::Degenerate("fitted resonance outside the swept range"));
    }
    if !(contrast > 0.0 && contrast < 1.0) || !(fwhm > 0.0) || !(n0 > 0.0) {
        return Err(OdmrError::Degenerate("fitted parameters out of range"));
    }

    let shape = LineShape {
        contrast,
        fwhm_mhz: fwhm,
        baseline_counts: n0,
    };
    let mut ss = 0.0;
    for (f, c) in frequencies_mhz.iter().zip(counts) {
        let r = (c - shape.expected_counts(*f, f_res)) / n0;
        ss += r * r;
    }
    Ok(SpectrumFit {
        resonance_mhz: f_res,
        shape,
        residual_rms: (ss / n as f64).sqrt(),
        iterations: res.iterations,
    })
}
