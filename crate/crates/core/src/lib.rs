//! Scanning single-NV magnetometry, simulated end to end.
//!
//! The crate covers the whole measurement-and-reconstruction chain for
//! millitesla stray-field imaging:
//!
//! 1. **field** — dipole stray fields, projection onto the NV axis, and the
//!    affine Zeeman map between on-axis field and resonance frequency.
//! 2. **odmr** — Gaussian dip model, Poisson-noised photoluminescence, and
//!    the full-spectrum fit that locks the scan at its first pixel.
//! 3. **tracker** — the three-frequency scanning state machine with its
//!    threshold-gated frequency shifts and post-scan count exchange.
//! 4. **tps** — thin-plate-spline fit of the resonance surface under the
//!    weighted, smoothness-penalized energy with exact balance constraints,
//!    plus field reconstruction and fringe prediction.
//! 5. **pipeline** — experiment configs, deterministic simulation runs,
//!    noise sweeps, lambda selection and file I/O.

pub mod field;
pub mod grid;
pub mod io;
pub mod odmr;
pub mod optim;
pub mod pipeline;
pub mod tps;
pub mod tracker;

pub use field::{dipole_field_at, Branch, DipoleSource, FieldError, NvFrame};
pub use grid::{GridError, ScalarGrid, Unit};
pub use odmr::{fit_spectrum, sample_pl, LineShape, OdmrError, SpectrumFit};
pub use pipeline::{
    dynamic_range_demo, lambda_search, noise_sweep, run_simulation, save_simulation,
    DeviationReport, DeviationStats, ExperimentConfig, FieldSource, PipelineError,
    SimulationOutput, SimulationSummary,
};
pub use tps::{
    fit, kernel, objective, objective_gradient, predict_fringes, reconstruct_field, FitConfig,
    FitData, FittedTps, TpsError, TpsModel,
};
pub use tracker::{
    max_trackable_gradient, normalized_pl, post_process, track_scan, NormalizedPl, ScanOrder,
    ScanParams, ScanRecord, Shift, TrackerError,
};
