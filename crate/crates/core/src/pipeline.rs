//! End-to-end orchestration: synthetic experiments, tracked scans,
//! reconstruction and deviation analysis.
//!
//! A run is fully determined by its `ExperimentConfig` (including the seed):
//! the same config produces byte-identical output files. Stages communicate
//! through the on-disk formats in [`crate::io`], so a reconstruction can be
//! rerun from a saved scan record, including records acquired outside this
//! code base.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::field::{dipole_field_at, DipoleSource, FieldError, NvFrame};
use crate::grid::{GridError, ScalarGrid, Unit};
use crate::io::{self, IoError};
use crate::odmr::{fit_spectrum, sample_pl, LineShape, OdmrError, SpectrumFit};
use crate::tps::{
    fit, predict_fringes, reconstruct_field, FitConfig, FitData, FittedTps, TpsError,
};
use crate::tracker::{
    normalized_pl, post_process, track_scan, NormalizedPl, ScanOrder, ScanParams, ScanRecord,
    Shift, TrackerError,
};

/// Integration time per excitation frequency, seconds. With the nominal
/// 200 photons/ms count rate this is what yields the default 5000-count
/// baseline; only used for the acquisition-time estimate.
pub const INTEGRATION_TIME_S: f64 = 0.025;

/// A tracked scan is declared lost when the excitation drifts more than this
/// many line offsets away from the true resonance.
pub const TRACKING_LOSS_DELTAS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error("field stage: {0}")]
    Field(#[from] FieldError),
    #[error("grid stage: {0}")]
    Grid(#[from] GridError),
    #[error("spectrum stage: {0}")]
    Spectrum(#[from] OdmrError),
    #[error("scan stage: {0}")]
    Tracker(#[from] TrackerError),
    #[error("reconstruction stage: {0}")]
    Tps(#[from] TpsError),
    #[error("io stage: {0}")]
    Io(#[from] IoError),
    #[error(
        "tracking loss: detuning reached {max_detuning_mhz:.1} MHz (limit {threshold_mhz:.1} MHz) at pixel ({0}, {1})",
        pixel.0, pixel.1
    )]
    TrackingLoss {
        max_detuning_mhz: f64,
        threshold_mhz: f64,
        pixel: (usize, usize),
    },
    #[error("reconstruction needs a line shape: record has no spectrum fit and no override was given")]
    MissingLineShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
}

/// Synthetic field source for a simulated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FieldSource {
    /// Point dipole sampled at the scan plane.
    Dipole(DipoleSource),
    /// On-axis field growing linearly with the pixel index.
    Ramp { gradient_mt_per_px: f64, direction: Axis },
    /// Constant on-axis field.
    Uniform { field_mt: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
}

/// First-pixel spectrum sweep: window width and sample count. The window is
/// placed around the first pixel's resonance, standing in for the wide sweep
/// a real instrument would take.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSettings {
    pub span_mhz: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanSettings {
    pub delta_mhz: f64,
    pub threshold: f64,
    pub order: ScanOrder,
}

/// Complete description of one synthetic experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    /// Physical scan size in meters; enters only the dipole sampling.
    pub scan_size_m: (f64, f64),
    pub source: FieldSource,
    pub frame: NvFrame,
    pub lineshape: LineShape,
    pub scan: ScanSettings,
    pub spectrum: SpectrumSettings,
    pub fit: FitConfig,
    pub seed: u64,
    /// Poisson shot noise on every count; disable for noise-free runs.
    pub shot_noise: bool,
    /// Remove the bias field from the reconstructed map.
    pub subtract_bias: bool,
    /// Border width excluded from the interior deviation statistics.
    pub interior_margin_px: usize,
    /// Interior threshold the deviation report counts against, mT.
    pub deviation_threshold_mt: f64,
}

impl Default for ExperimentConfig {
    /// The committed flagship fixture: a dipole whose on-axis field spans
    /// about 0.4 to 1.1 mT over a 64 x 64 scan, mean count 5000,
    /// delta 12 MHz, k 0.96, lambda 1e-9, bias 5.5 mT.
    fn default() -> Self {
        Self {
            grid: GridSpec { nx: 64, ny: 64 },
            scan_size_m: (1.0e-6, 1.0e-6),
            source: FieldSource::Dipole(DipoleSource {
                moment_am2: Vector3::new(0.0, 0.0, 8.36e-15),
                position_m: Vector3::new(0.5e-6, 0.5e-6, 0.0),
                standoff_m: 1.15e-6,
            }),
            frame: NvFrame::standard(5.5),
            lineshape: LineShape {
                contrast: 0.2,
                fwhm_mhz: 12.0,
                baseline_counts: 5000.0,
            },
            scan: ScanSettings {
                delta_mhz: 12.0,
                threshold: 0.96,
                order: ScanOrder::Serpentine,
            },
            spectrum: SpectrumSettings {
                span_mhz: 80.0,
                points: 81,
            },
            fit: FitConfig::default(),
            seed: 7,
            shot_noise: true,
            subtract_bias: true,
            interior_margin_px: 4,
            deviation_threshold_mt: 0.03,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.grid.nx < 2 || self.grid.ny < 2 {
            return Err(PipelineError::BadConfig("grid must be at least 2x2".into()));
        }
        if !(self.scan_size_m.0 > 0.0 && self.scan_size_m.1 > 0.0) {
            return Err(PipelineError::BadConfig("scan size must be positive".into()));
        }
        self.frame.validate()?;
        self.lineshape.validate()?;
        if !(self.scan.delta_mhz > 0.0) {
            return Err(PipelineError::BadConfig("delta must be positive".into()));
        }
        if !(self.scan.threshold > 0.0 && self.scan.threshold <= 1.0) {
            return Err(PipelineError::BadConfig("threshold must be in (0, 1]".into()));
        }
        if self.spectrum.points < 5 {
            return Err(PipelineError::BadConfig("spectrum needs at least 5 points".into()));
        }
        if !(self.spectrum.span_mhz > 0.0) {
            return Err(PipelineError::BadConfig("spectrum span must be positive".into()));
        }
        self.fit.validate()?;
        if let FieldSource::Dipole(d) = &self.source {
            d.validate()?;
        }
        Ok(())
    }

    /// On-axis sample field at pixel `(ix, iy)`, mT.
    fn field_at(&self, ix: usize, iy: usize) -> Result<f64, PipelineError> {
        match &self.source {
            FieldSource::Dipole(src) => {
                let p = Vector3::new(
                    (ix as f64 + 0.5) / self.grid.nx as f64 * self.scan_size_m.0,
                    (iy as f64 + 0.5) / self.grid.ny as f64 * self.scan_size_m.1,
                    src.standoff_m,
                );
                let b = dipole_field_at(src, &p)?;
                Ok(self.frame.project_on_axis(&b))
            }
            FieldSource::Ramp {
                gradient_mt_per_px,
                direction,
            } => Ok(match direction {
                Axis::X => gradient_mt_per_px * ix as f64,
                Axis::Y => gradient_mt_per_px * iy as f64,
            }),
            FieldSource::Uniform { field_mt } => Ok(*field_mt),
        }
    }

    /// True on-axis sample field map, mT, on the normalized scan grid.
    pub fn true_field(&self) -> Result<ScalarGrid, PipelineError> {
        let mut values = Vec::with_capacity(self.grid.nx * self.grid.ny);
        for iy in 0..self.grid.ny {
            for ix in 0..self.grid.nx {
                values.push(self.field_at(ix, iy)?);
            }
        }
        Ok(ScalarGrid::new(
            self.grid.nx,
            self.grid.ny,
            (1.0, 1.0),
            Unit::Millitesla,
            values,
        )?)
    }
}

/// Deviation statistics between reconstruction and truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    pub max_all_mt: f64,
    /// Maximum with the corner margin excluded.
    pub max_interior_mt: f64,
    pub rms_interior_mt: f64,
    /// Fraction of interior pixels below `threshold_mt`.
    pub fraction_interior_below: f64,
    pub threshold_mt: f64,
    pub margin_px: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    /// |reconstructed - true| per pixel, mT.
    pub map: ScalarGrid,
    pub stats: DeviationStats,
}

impl DeviationReport {
    pub fn new(
        reconstructed: &ScalarGrid,
        truth: &ScalarGrid,
        margin_px: usize,
        threshold_mt: f64,
    ) -> Self {
        let map = reconstructed.abs_diff(truth);
        let (nx, ny) = (map.nx(), map.ny());
        let mut max_all = 0.0f64;
        let mut max_interior = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut below = 0usize;
        let mut count = 0usize;
        for iy in 0..ny {
            for ix in 0..nx {
                let d = map.get(ix, iy);
                max_all = max_all.max(d);
                let interior = ix >= margin_px
                    && iy >= margin_px
                    && ix + margin_px < nx
                    && iy + margin_px < ny;
                if interior {
                    max_interior = max_interior.max(d);
                    sum_sq += d * d;
                    if d <= threshold_mt {
                        below += 1;
                    }
                    count += 1;
                }
            }
        }
        let stats = DeviationStats {
            max_all_mt: max_all,
            max_interior_mt: max_interior,
            rms_interior_mt: if count > 0 {
                (sum_sq / count as f64).sqrt()
            } else {
                0.0
            },
            fraction_interior_below: if count > 0 {
                below as f64 / count as f64
            } else {
                0.0
            },
            threshold_mt,
            margin_px,
        };
        Self { map, stats }
    }
}

/// Detuning between the excitation actually used and the true resonance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingDiagnostics {
    pub max_detuning_mhz: f64,
    pub pixel: (usize, usize),
    pub loss_threshold_mhz: f64,
    pub lost: bool,
}

/// Everything a simulated experiment produces.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub true_field: ScalarGrid,
    /// True resonance frequency map, MHz.
    pub resonance: ScalarGrid,
    pub spectrum_fit: SpectrumFit,
    /// Record as scanned, shift log attached.
    pub raw_record: ScanRecord,
    /// Record after the count/frequency exchange.
    pub record: ScanRecord,
    pub normalized: NormalizedPl,
    pub fitted: FittedTps,
    pub reconstructed: ScalarGrid,
    pub deviation: DeviationReport,
    pub tracking: TrackingDiagnostics,
}

/// Output of a reconstruction that started from a scan record.
#[derive(Debug, Clone)]
pub struct ReconstructionOutput {
    pub record: ScanRecord,
    pub normalized: NormalizedPl,
    pub fitted: FittedTps,
    pub reconstructed: ScalarGrid,
}

/// Fits a saved (raw) scan record and reconstructs the field map.
///
/// The line shape comes from the record's embedded spectrum fit unless an
/// override is supplied.
pub fn reconstruct_from_record(
    raw: &ScanRecord,
    frame: &NvFrame,
    shape_override: Option<LineShape>,
    fit_cfg: &FitConfig,
    subtract_bias: bool,
) -> Result<ReconstructionOutput, PipelineError> {
    let shape = match shape_override {
        Some(s) => s,
        None => raw
            .spectrum
            .as_ref()
            .map(|f| f.shape)
            .ok_or(PipelineError::MissingLineShape)?,
    };
    shape.validate()?;
    let record = post_process(raw);
    let normalized = normalized_pl(&record);
    let data = FitData::from_record(&record)?;
    let fitted = fit(&data, &shape, fit_cfg)?;
    let reconstructed = reconstruct_field(
        &fitted.model,
        record.nx(),
        record.ny(),
        record.c0.extent(),
        frame,
        subtract_bias,
    );
    Ok(ReconstructionOutput {
        record,
        normalized,
        fitted,
        reconstructed,
    })
}

/// Runs the full synthetic experiment: spectrum lock, tracked scan,
/// post-processing, TPS fit, reconstruction and deviation analysis.
///
/// Fails with [`PipelineError::TrackingLoss`] when the scan drifted more than
/// [`TRACKING_LOSS_DELTAS`] line offsets from the true resonance.
pub fn run_simulation(cfg: &ExperimentConfig) -> Result<SimulationOutput, PipelineError> {
    cfg.validate()?;
    let true_field = cfg.true_field()?;
    let resonance = true_field.map(Unit::Megahertz, |b| cfg.frame.field_to_frequency(b));

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    // full ODMR spectrum at the first scan pixel
    let f_res_first = resonance.get(0, 0);
    let n_pts = cfg.spectrum.points;
    let mut freqs = Vec::with_capacity(n_pts);
    let mut counts = Vec::with_capacity(n_pts);
    for i in 0..n_pts {
        let f = f_res_first - cfg.spectrum.span_mhz / 2.0
            + cfg.spectrum.span_mhz * i as f64 / (n_pts - 1) as f64;
        let c = if cfg.shot_noise {
            sample_pl(&cfg.lineshape, f, f_res_first, &mut rng) as f64
        } else {
            cfg.lineshape.expected_counts(f, f_res_first)
        };
        freqs.push(f);
        counts.push(c);
    }
    let spectrum_fit = fit_spectrum(&freqs, &counts)?;

    let params = ScanParams {
        delta_mhz: cfg.scan.delta_mhz,
        threshold: cfg.scan.threshold,
        order: cfg.scan.order,
        f_init_mhz: spectrum_fit.resonance_mhz,
    };

    let mut pl_source = |px: (usize, usize), f_mw: f64| -> crate::tracker::PlResult {
        let f_res = resonance.get(px.0, px.1);
        let c = if cfg.shot_noise {
            sample_pl(&cfg.lineshape, f_mw, f_res, &mut rng) as f64
        } else {
            cfg.lineshape.expected_counts(f_mw, f_res)
        };
        Ok(c)
    };
    let mut raw_record = track_scan(&mut pl_source, cfg.grid.nx, cfg.grid.ny, (1.0, 1.0), params)?;
    raw_record.spectrum = Some(spectrum_fit.clone());

    let tracking = tracking_diagnostics(&raw_record, &resonance, cfg.scan.delta_mhz);
    if tracking.lost {
        return Err(PipelineError::TrackingLoss {
            max_detuning_mhz: tracking.max_detuning_mhz,
            threshold_mhz: tracking.loss_threshold_mhz,
            pixel: tracking.pixel,
        });
    }

    let recon = reconstruct_from_record(&raw_record, &cfg.frame, None, &cfg.fit, cfg.subtract_bias)?;
    let deviation = DeviationReport::new(
        &recon.reconstructed,
        &true_field,
        cfg.interior_margin_px,
        cfg.deviation_threshold_mt,
    );

    Ok(SimulationOutput {
        true_field,
        resonance,
        spectrum_fit,
        raw_record,
        record: recon.record,
        normalized: recon.normalized,
        fitted: recon.fitted,
        reconstructed: recon.reconstructed,
        deviation,
        tracking,
    })
}

/// Largest excitation-to-resonance detuning over the raw record.
pub fn tracking_diagnostics(
    raw: &ScanRecord,
    resonance: &ScalarGrid,
    delta_mhz: f64,
) -> TrackingDiagnostics {
    let mut max_detuning = 0.0f64;
    let mut pixel = (0usize, 0usize);
    for iy in 0..raw.ny() {
        for ix in 0..raw.nx() {
            let d = (raw.f0.get(ix, iy) - resonance.get(ix, iy)).abs();
            if d > max_detuning {
                max_detuning = d;
                pixel = (ix, iy);
            }
        }
    }
    let threshold = TRACKING_LOSS_DELTAS * delta_mhz;
    TrackingDiagnostics {
        max_detuning_mhz: max_detuning,
        pixel,
        loss_threshold_mhz: threshold,
        lost: max_detuning > threshold,
    }
}

/// Repeats the simulation for each mean photon count, all else identical.
pub fn noise_sweep(
    cfg: &ExperimentConfig,
    counts_list: &[f64],
) -> Result<Vec<(f64, DeviationReport)>, PipelineError> {
    if counts_list.is_empty() {
        return Err(PipelineError::BadConfig("counts list must not be empty".into()));
    }
    let mut reports = Vec::with_capacity(counts_list.len());
    for &n0 in counts_list {
        let mut c = cfg.clone();
        c.lineshape.baseline_counts = n0;
        let out = run_simulation(&c)?;
        reports.push((n0, out.deviation));
    }
    Ok(reports)
}

/// High-dynamic-range demonstration: verifies the configured source really
/// spans the requested range smoothly, then runs the full pipeline.
/// Tracking loss surfaces as its own error.
pub fn dynamic_range_demo(
    cfg: &ExperimentConfig,
    required_span_mt: f64,
) -> Result<DeviationReport, PipelineError> {
    let truth = cfg.true_field()?;
    let span = truth.max() - truth.min();
    if span < required_span_mt {
        return Err(PipelineError::BadConfig(format!(
            "source spans {span:.2} mT, below the required {required_span_mt:.2} mT"
        )));
    }
    let limit = 2.0 * cfg.scan.delta_mhz / cfg.frame.gyromagnetic_mhz_per_mt;
    let step = max_path_step(&truth, cfg.scan.order);
    if step >= limit {
        return Err(PipelineError::BadConfig(format!(
            "per-pixel field change {step:.3} mT exceeds the 2-delta window {limit:.3} mT"
        )));
    }
    Ok(run_simulation(cfg)?.deviation)
}

/// Largest field change between consecutive pixels along the scan path.
pub fn max_path_step(field: &ScalarGrid, order: ScanOrder) -> f64 {
    let path = crate::tracker::scan_path(field.nx(), field.ny(), order);
    path.windows(2)
        .map(|w| (field.get(w[1].0, w[1].1) - field.get(w[0].0, w[0].1)).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaTrial {
    pub lambda: f64,
    /// RMS of (predicted fringes - measured S) over valid pixels.
    pub fringe_rms: f64,
    pub bending_energy: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub trials: Vec<LambdaTrial>,
    /// Index of the trial with the smallest fringe RMS.
    pub best: usize,
}

/// Scans once, then refits the same record for every lambda and scores each
/// model by how well its predicted fringe image matches the measured one.
pub fn lambda_search(cfg: &ExperimentConfig, lambdas: &[f64]) -> Result<LambdaSearch, PipelineError> {
    if lambdas.is_empty() {
        return Err(PipelineError::BadConfig("lambda list must not be empty".into()));
    }
    let base = run_simulation(cfg)?;
    let mut trials = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut fit_cfg = cfg.fit.clone();
        fit_cfg.lambda = lambda;
        let recon = reconstruct_from_record(
            &base.raw_record,
            &cfg.frame,
            None,
            &fit_cfg,
            cfg.subtract_bias,
        )?;
        let predicted = predict_fringes(&recon.fitted.model, &recon.record, &recon_shape(&recon));
        let rms = fringe_rms(&predicted, &recon.normalized);
        trials.push(LambdaTrial {
            lambda,
            fringe_rms: rms,
            bending_energy: recon.fitted.model.bending_energy(),
            converged: recon.fitted.diagnostics.converged,
        });
    }
    let best = trials
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.fringe_rms.total_cmp(&b.1.fringe_rms))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(LambdaSearch { trials, best })
}

fn recon_shape(recon: &ReconstructionOutput) -> LineShape {
    recon
        .record
        .spectrum
        .as_ref()
        .map(|s| s.shape)
        .expect("reconstruction always carries a spectrum fit here")
}

/// RMS difference between predicted and measured normalized PL over valid pixels.
pub fn fringe_rms(predicted: &ScalarGrid, measured: &NormalizedPl) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for iy in 0..predicted.ny() {
        for ix in 0..predicted.nx() {
            if measured.valid[iy * predicted.nx() + ix] {
                let d = predicted.get(ix, iy) - measured.s.get(ix, iy);
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Scalar summary of a run, for reports and regression fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub seed: u64,
    pub true_field_min_mt: f64,
    pub true_field_max_mt: f64,
    pub shift_down_count: usize,
    pub shift_up_count: usize,
    pub invalid_pixels: usize,
    pub spectrum: SpectrumFit,
    pub tracking: TrackingDiagnostics,
    pub fit: crate::tps::FitDiagnostics,
    pub deviation: DeviationStats,
    pub estimated_acquisition_minutes: f64,
}

impl SimulationSummary {
    pub fn from_output(cfg: &ExperimentConfig, out: &SimulationOutput) -> Self {
        let downs = out
            .raw_record
            .shift_log
            .iter()
            .filter(|s| **s == Shift::Down)
            .count();
        let ups = out
            .raw_record
            .shift_log
            .iter()
            .filter(|s| **s == Shift::Up)
            .count();
        let pixels = (cfg.grid.nx * cfg.grid.ny) as f64;
        Self {
            seed: cfg.seed,
            true_field_min_mt: out.true_field.min(),
            true_field_max_mt: out.true_field.max(),
            shift_down_count: downs,
            shift_up_count: ups,
            invalid_pixels: out.normalized.invalid_count(),
            spectrum: out.spectrum_fit.clone(),
            tracking: out.tracking,
            fit: out.fitted.diagnostics.clone(),
            deviation: out.deviation.stats,
            estimated_acquisition_minutes: (pixels * 3.0 + cfg.spectrum.points as f64)
                * INTEGRATION_TIME_S
                / 60.0,
        }
    }
}

/// Writes every artifact of a run into `dir`: grids as CSV (plus PGM renders
/// for visual inspection), the raw record, the model and a JSON summary.
pub fn save_simulation(
    dir: &Path,
    cfg: &ExperimentConfig,
    out: &SimulationOutput,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        PipelineError::Io(IoError::File {
            path: dir.display().to_string(),
            source: e,
        })
    })?;
    io::save_json(&dir.join("config.json"), cfg)?;
    io::write_grid_csv(&dir.join("true_field.csv"), &out.true_field)?;
    io::write_grid_csv(&dir.join("resonance.csv"), &out.resonance)?;
    io::save_record(&dir.join("record"), &out.raw_record)?;
    io::write_grid_csv(&dir.join("s_map.csv"), &out.normalized.s)?;
    io::write_grid_csv(&dir.join("f0_map.csv"), &out.record.f0)?;
    io::write_grid_csv(&dir.join("reconstructed.csv"), &out.reconstructed)?;
    io::write_grid_csv(&dir.join("deviation.csv"), &out.deviation.map)?;
    io::save_model(&dir.join("model.json"), &out.fitted.model, &cfg.fit)?;
    io::save_json(
        &dir.join("summary.json"),
        &SimulationSummary::from_output(cfg, out),
    )?;
    for (name, grid) in [
        ("true_field.pgm", &out.true_field),
        ("s_map.pgm", &out.normalized.s),
        ("reconstructed.pgm", &out.reconstructed),
        ("deviation.pgm", &out.deviation.map),
    ] {
        io::write_grid_pgm(&dir.join(name), grid)?;
    }
    Ok(())
}
