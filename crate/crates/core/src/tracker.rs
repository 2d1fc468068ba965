//! Three-frequency resonance tracking over a scan.
//!
//! Each pixel is excited at `f0`, `f0 - delta` and `f0 + delta`, giving counts
//! `C0`, `C-`, `C+`. After recording, the shift rule runs exactly once:
//!
//! ```text
//! if C- < C+ { if k*C0 > C- { all three frequencies -= delta } }
//! else       { if k*C0 > C+ { all three frequencies += delta } }
//! ```
//!
//! The shift takes effect from the next pixel; `f0` stores the frequency that
//! actually excited each pixel. Post-processing later exchanges `C0` with the
//! deeper side count on shifted pixels to raise the number of pixels with
//! moderate contrast.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::NvFrame;
use crate::grid::{ScalarGrid, Unit};
use crate::odmr::SpectrumFit;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("PL source failed at pixel ({ix}, {iy}), f = {f_mhz} MHz: {source}")]
    Source {
        ix: usize,
        iy: usize,
        f_mhz: f64,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("PL source returned invalid counts {value} at pixel ({ix}, {iy})")]
    BadCounts { ix: usize, iy: usize, value: f64 },
    #[error("invalid scan parameters: {0}")]
    BadParams(&'static str),
}

/// Order in which the scan visits pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanOrder {
    /// Every row left to right.
    Raster,
    /// Alternating row direction, so consecutive path pixels stay adjacent.
    Serpentine,
}

/// Tracking parameters for one scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanParams {
    /// Offset of the two side frequencies, MHz.
    pub delta_mhz: f64,
    /// Shift threshold k in (0, 1].
    pub threshold: f64,
    pub order: ScanOrder,
    /// Excitation frequency for the first pixel, from the full-spectrum fit.
    pub f_init_mhz: f64,
}

impl ScanParams {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if !(self.delta_mhz > 0.0) {
            return Err(TrackerError::BadParams("delta must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(TrackerError::BadParams("threshold must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Per-pixel shift decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shift {
    None,
    Down,
    Up,
}

/// Raw maps recorded by one tracked scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub c0: ScalarGrid,
    pub c_minus: ScalarGrid,
    pub c_plus: ScalarGrid,
    /// Excitation frequency used at each pixel, MHz.
    pub f0: ScalarGrid,
    pub params: ScanParams,
    /// Shift decision taken at each pixel, row-major.
    pub shift_log: Vec<Shift>,
    /// Full-spectrum fit from the first pixel, when available.
    pub spectrum: Option<SpectrumFit>,
}

impl ScanRecord {
    pub fn nx(&self) -> usize {
        self.c0.nx()
    }

    pub fn ny(&self) -> usize {
        self.c0.ny()
    }

    pub fn validate(&self) -> Result<(), TrackerError> {
        let same = self.c0.same_dims(&self.c_minus)
            && self.c0.same_dims(&self.c_plus)
            && self.c0.same_dims(&self.f0)
            && self.shift_log.len() == self.c0.len();
        if !same {
            return Err(TrackerError::BadParams("record grids must share dimensions"));
        }
        self.params.validate()
    }
}

/// Pixel visit order for the given scan order.
pub fn scan_path(nx: usize, ny: usize, order: ScanOrder) -> Vec<(usize, usize)> {
    let mut path = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        match order {
            ScanOrder::Raster => {
                for ix in 0..nx {
                    path.push((ix, iy));
                }
            }
            ScanOrder::Serpentine => {
                if iy % 2 == 0 {
                    for ix in 0..nx {
                        path.push((ix, iy));
                    }
                } else {
                    for ix in (0..nx).rev() {
                        path.push((ix, iy));
                    }
                }
            }
        }
    }
    path
}

/// The flowchart decision for one pixel's three counts.
pub fn shift_decision(c0: f64, c_minus: f64, c_plus: f64, threshold: f64) -> Shift {
    if c_minus < c_plus {
        if threshold * c0 > c_minus {
            Shift::Down
        } else {
            Shift::None
        }
    } else if threshold * c0 > c_plus {
        Shift::Up
    } else {
        Shift::None
    }
}

pub type PlResult = Result<f64, Box<dyn std::error::Error + Send + Sync>>;

/// Runs a tracked scan over an `nx` x `ny` grid.
///
/// `pl_source` is called in path order, three times per pixel (`f0`,
/// `f0 - delta`, `f0 + delta`); it may carry its own RNG state.
pub fn track_scan<F>(
    pl_source: &mut F,
    nx: usize,
    ny: usize,
    extent: (f64, f64),
    params: ScanParams,
) -> Result<ScanRecord, TrackerError>
where
    F: FnMut((usize, usize), f64) -> PlResult,
{
    params.validate()?;
    let mut c0 = ScalarGrid::filled(nx, ny, extent, Unit::Counts, 0.0);
    let mut c_minus = c0.clone();
    let mut c_plus = c0.clone();
    let mut f0_grid = ScalarGrid::filled(nx, ny, extent, Unit::Megahertz, 0.0);
    let mut shift_log = vec![Shift::None; nx * ny];

    let measure = |src: &mut F, ix: usize, iy: usize, f: f64| -> Result<f64, TrackerError> {
        let v = src((ix, iy), f).map_err(|e| TrackerError::Source {
            ix,
            iy,
            f_mhz: f,
            source: e,
        })?;
        if !v.is_finite() || v < 0.0 {
            return Err(TrackerError::BadCounts { ix, iy, value: v });
        }
        Ok(v)
    };

    let mut f0 = params.f_init_mhz;
    for (ix, iy) in scan_path(nx, ny, params.order) {
        let v0 = measure(pl_source, ix, iy, f0)?;
        let vm = measure(pl_source, ix, iy, f0 - params.delta_mhz)?;
        let vp = measure(pl_source, ix, iy, f0 + params.delta_mhz)?;
        c0.set(ix, iy, v0);
        c_minus.set(ix, iy, vm);
        c_plus.set(ix, iy, vp);
        f0_grid.set(ix, iy, f0);

        let shift = shift_decision(v0, vm, vp, params.threshold);
        shift_log[iy * nx + ix] = shift;
        match shift {
            Shift::Down => f0 -= params.delta_mhz,
            Shift::Up => f0 += params.delta_mhz,
            Shift::None => {}
        }
    }

    Ok(ScanRecord {
        c0,
        c_minus,
        c_plus,
        f0: f0_grid,
        params,
        shift_log,
        spectrum: None,
    })
}

/// Applies the post-scan exchange: on every "down" pixel swap `C0` with `C-`
/// and lower `f0` by delta; on every "up" pixel swap `C0` with `C+` and raise
/// `f0` by delta.
pub fn post_process(rec: &ScanRecord) -> ScanRecord {
    let mut out = rec.clone();
    let delta = rec.params.delta_mhz;
    for iy in 0..rec.ny() {
        for ix in 0..rec.nx() {
            match rec.shift_log[iy * rec.nx() + ix] {
                Shift::Down => {
                    let (a, b) = (rec.c0.get(ix, iy), rec.c_minus.get(ix, iy));
                    out.c0.set(ix, iy, b);
                    out.c_minus.set(ix, iy, a);
                    out.f0.set(ix, iy, rec.f0.get(ix, iy) - delta);
                }
                Shift::Up => {
                    let (a, b) = (rec.c0.get(ix, iy), rec.c_plus.get(ix, iy));
                    out.c0.set(ix, iy, b);
                    out.c_plus.set(ix, iy, a);
                    out.f0.set(ix, iy, rec.f0.get(ix, iy) + delta);
                }
                Shift::None => {}
            }
        }
    }
    out
}

/// Normalized PL with a validity mask for degenerate pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPl {
    /// `S = C0 / max(C-, C+)`; invalid pixels hold zero.
    pub s: ScalarGrid,
    pub valid: Vec<bool>,
}

impl NormalizedPl {
    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

/// The resonance-fringe image: `S = C0 / max(C-, C+)` per pixel. Pixels whose
/// reference count is zero are marked invalid instead of failing the map.
pub fn normalized_pl(rec: &ScanRecord) -> NormalizedPl {
    let (nx, ny) = (rec.nx(), rec.ny());
    let mut s = ScalarGrid::filled(nx, ny, rec.c0.extent(), Unit::Dimensionless, 0.0);
    let mut valid = vec![true; nx * ny];
    for iy in 0..ny {
        for ix in 0..nx {
            let reference = rec.c_minus.get(ix, iy).max(rec.c_plus.get(ix, iy));
            if reference > 0.0 {
                s.set(ix, iy, rec.c0.get(ix, iy) / reference);
            } else {
                valid[iy * nx + ix] = false;
            }
        }
    }
    NormalizedPl { s, valid }
}

/// Largest field step between adjacent pixels the three-frequency window can
/// register: `2 delta / gamma`, in mT per pixel.
pub fn max_trackable_gradient(params: &ScanParams, frame: &NvFrame) -> f64 {
    2.0 * params.delta_mhz / frame.gyromagnetic_mhz_per_mt
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn params(delta: f64, k: f64, order: ScanOrder, f_init: f64) -> ScanParams {
        ScanParams {
            delta_mhz: delta,
            threshold: k,
            order,
            f_init_mhz: f_init,
        }
    }

    /// PL source backed by a true resonance map; noise-free Gaussian dip.
    fn resonance_source(
        f_true: impl Fn(usize, usize) -> f64 + 'static,
    ) -> impl FnMut((usize, usize), f64) -> PlResult {
        let shape = crate::odmr::LineShape::new(0.2, 12.0, 1000.0).unwrap();
        move |(ix, iy), f| Ok(shape.expected_counts(f, f_true(ix, iy)))
    }

    #[test]
    fn flowchart_trace_down_shift() {
        assert_eq!(shift_decision(1000.0, 900.0, 1010.0, 0.96), Shift::Down);
    }

    #[test]
    fn threshold_suppresses_noise_shift() {
        assert_eq!(shift_decision(1000.0, 970.0, 990.0, 0.96), Shift::None);
    }

    #[test]
    fn tie_falls_through_to_up_test() {
        // C- == C+: the first branch answers no, so the up test runs
        assert_eq!(shift_decision(1000.0, 700.0, 700.0, 0.96), Shift::Up);
        assert_eq!(shift_decision(1000.0, 990.0, 990.0, 0.96), Shift::None);
    }

    #[test]
    fn decision_is_monotone_in_threshold() {
        // larger k can only widen the trigger set for fixed counts
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let c0 = 500.0 + rng.random::<f64>() * 1000.0;
            let cm = 500.0 + rng.random::<f64>() * 1000.0;
            let cp = 500.0 + rng.random::<f64>() * 1000.0;
            let k1 = 0.5 + 0.5 * rng.random::<f64>();
            let k2 = (k1 + rng.random::<f64>() * (1.0 - k1)).min(1.0);
            let d1 = shift_decision(c0, cm, cp, k1);
            let d2 = shift_decision(c0, cm, cp, k2);
            if d1 != Shift::None {
                assert_eq!(d1, d2, "raising k from {k1} to {k2} must keep the trigger");
            }
        }
    }

    #[test]
    fn shift_applies_from_next_pixel() {
        // pixel 0 sees the down-shift counts; every later pixel is flat
        let mut first = true;
        let mut src = move |_px: (usize, usize), f: f64| -> PlResult {
            if first {
                let v = if f == 3000.0 {
                    1000.0
                } else if f == 2988.0 {
                    900.0
                } else {
                    1010.0
                };
                if f == 3012.0 {
                    first = false;
                }
                Ok(v)
            } else {
                Ok(1000.0)
            }
        };
        let rec = track_scan(&mut src, 2, 2, (1.0, 1.0), params(12.0, 0.96, ScanOrder::Raster, 3000.0))
            .unwrap();
        assert_eq!(rec.shift_log[0], Shift::Down);
        assert_eq!(rec.f0.get(0, 0), 3000.0);
        assert_eq!(rec.f0.get(1, 0), 2988.0);
    }

    #[test]
    fn static_resonance_never_shifts() {
        let mut src = resonance_source(|_, _| 3000.0);
        let rec = track_scan(&mut src, 8, 8, (1.0, 1.0), params(12.0, 0.96, ScanOrder::Serpentine, 3000.0))
            .unwrap();
        assert!(rec.shift_log.iter().all(|s| *s == Shift::None));
        assert!(rec.f0.values().iter().all(|f| *f == 3000.0));
    }

    #[test]
    fn raw_f0_steps_are_zero_or_delta() {
        let mut src = resonance_source(|ix, iy| 3000.0 + 8.0 * (ix as f64 + iy as f64));
        let p = params(12.0, 0.96, ScanOrder::Serpentine, 3000.0);
        let rec = track_scan(&mut src, 16, 16, (1.0, 1.0), p).unwrap();
        let path = scan_path(16, 16, ScanOrder::Serpentine);
        for w in path.windows(2) {
            let a = rec.f0.get(w[0].0, w[0].1);
            let b = rec.f0.get(w[1].0, w[1].1);
            let step = (b - a).abs();
            assert!(step == 0.0 || (step - 12.0).abs() < 1e-12, "step {step}");
        }
    }

    #[test]
    fn gentle_ramp_keeps_detuning_within_delta() {
        // the threshold gate goes quiet while C0 and the near side count are
        // comparable (detuning around half a width), so the detuning can lag
        // to roughly that dead zone plus one per-pixel step before the shifts
        // kick in; a 0.35-delta ramp therefore stays within one delta
        let delta = 12.0;
        let rate = 0.35 * delta;
        let nx = 16;
        let f_true = move |ix: usize, iy: usize| {
            // serpentine path position for a left-right-alternating scan
            let along = if iy % 2 == 0 { ix } else { nx - 1 - ix };
            3000.0 + rate * (iy * nx + along) as f64
        };
        let mut src = resonance_source(f_true);
        let p = params(delta, 0.96, ScanOrder::Serpentine, 3000.0);
        let rec = track_scan(&mut src, nx, 8, (1.0, 1.0), p).unwrap();
        for iy in 0..8 {
            for ix in 0..nx {
                let detuning = (rec.f0.get(ix, iy) - f_true(ix, iy)).abs();
                assert!(detuning <= delta + 1e-9, "detuning {detuning} at ({ix}, {iy})");
            }
        }
    }

    #[test]
    fn sub_delta_ramp_never_loses_lock() {
        // up to one delta per path step the tracker keeps shifting and the
        // detuning stays bounded, though transients overshoot one delta
        let delta = 12.0;
        let rate = 0.9 * delta;
        let nx = 16;
        let ny = 16;
        let f_true = move |ix: usize, iy: usize| {
            let along = if iy % 2 == 0 { ix } else { nx - 1 - ix };
            3000.0 + rate * (iy * nx + along) as f64
        };
        let mut src = resonance_source(f_true);
        let p = params(delta, 0.96, ScanOrder::Serpentine, 3000.0);
        let rec = track_scan(&mut src, nx, ny, (1.0, 1.0), p).unwrap();
        let mut max_detuning = 0.0f64;
        for iy in 0..ny {
            for ix in 0..nx {
                max_detuning = max_detuning.max((rec.f0.get(ix, iy) - f_true(ix, iy)).abs());
            }
        }
        assert!(
            max_detuning < 2.0 * delta,
            "lock lost: max detuning {max_detuning}"
        );
        // and the last pixel is still locked, not drifting away
        let last = (rec.f0.get(0, ny - 1) - f_true(0, ny - 1)).abs();
        assert!(last < 2.0 * delta);
    }

    #[test]
    fn ramp_beyond_twice_delta_loses_lock() {
        let delta = 12.0;
        let rate = 2.5 * delta;
        let nx = 32;
        let f_true = move |ix: usize, iy: usize| {
            let along = if iy % 2 == 0 { ix } else { nx - 1 - ix };
            3000.0 + rate * (iy * nx + along) as f64
        };
        let mut src = resonance_source(f_true);
        let p = params(delta, 0.96, ScanOrder::Serpentine, 3000.0);
        let rec = track_scan(&mut src, nx, 2, (1.0, 1.0), p).unwrap();
        let path = scan_path(nx, 2, ScanOrder::Serpentine);
        let detunings: Vec<f64> = path
            .iter()
            .map(|&(ix, iy)| (rec.f0.get(ix, iy) - f_true(ix, iy)).abs())
            .collect();
        // the detuning must grow along the path without recovering
        assert!(detunings.last().unwrap() > &(10.0 * delta));
        let max_early = detunings[..8].iter().cloned().fold(0.0, f64::max);
        assert!(max_early < *detunings.last().unwrap());
    }

    #[test]
    fn post_process_applies_rule_on_logged_pixels_only() {
        let mut first = true;
        let mut src = move |_px: (usize, usize), f: f64| -> PlResult {
            if first {
                let v = if f == 3000.0 {
                    950.0
                } else if f == 2988.0 {
                    700.0
                } else {
                    1000.0
                };
                if f == 3012.0 {
                    first = false;
                }
                Ok(v)
            } else {
                Ok(1000.0)
            }
        };
        let rec = track_scan(&mut src, 2, 2, (1.0, 1.0), params(12.0, 0.96, ScanOrder::Raster, 3000.0))
            .unwrap();
        assert_eq!(rec.shift_log[0], Shift::Down);
        let post = post_process(&rec);
        assert_eq!(post.c0.get(0, 0), 700.0);
        assert_eq!(post.c_minus.get(0, 0), 950.0);
        assert_eq!(post.f0.get(0, 0), 2988.0);
        // untouched pixels stay identical
        for iy in 0..2 {
            for ix in 0..2 {
                if (ix, iy) == (0, 0) {
                    continue;
                }
                assert_eq!(post.c0.get(ix, iy), rec.c0.get(ix, iy));
                assert_eq!(post.f0.get(ix, iy), rec.f0.get(ix, iy));
            }
        }
        // exactly the logged pixels change
        let changed: Vec<bool> = (0..4)
            .map(|i| {
                let (ix, iy) = (i % 2, i / 2);
                post.c0.get(ix, iy) != rec.c0.get(ix, iy) || post.f0.get(ix, iy) != rec.f0.get(ix, iy)
            })
            .collect();
        let logged: Vec<bool> = rec.shift_log.iter().map(|s| *s != Shift::None).collect();
        assert_eq!(changed, logged);
    }

    #[test]
    fn normalized_pl_examples() {
        let mk = |c0v: f64, cmv: f64, cpv: f64| {
            let g = |v| ScalarGrid::filled(2, 2, (1.0, 1.0), Unit::Counts, v);
            ScanRecord {
                c0: g(c0v),
                c_minus: g(cmv),
                c_plus: g(cpv),
                f0: ScalarGrid::filled(2, 2, (1.0, 1.0), Unit::Megahertz, 3000.0),
                params: params(12.0, 0.96, ScanOrder::Raster, 3000.0),
                shift_log: vec![Shift::None; 4],
                spectrum: None,
            }
        };
        let pl = normalized_pl(&mk(800.0, 1000.0, 980.0));
        assert_relative_eq!(pl.s.get(0, 0), 0.8, max_relative = 1e-15);
        assert!(pl.valid.iter().all(|v| *v));

        let pl = normalized_pl(&mk(777.0, 777.0, 777.0));
        assert_eq!(pl.s.get(1, 1), 1.0);

        let pl = normalized_pl(&mk(10.0, 0.0, 0.0));
        assert!(pl.valid.iter().all(|v| !*v));
        assert_eq!(pl.invalid_count(), 4);
    }

    #[test]
    fn trackable_gradient_formula() {
        let frame = crate::field::NvFrame::standard(5.5);
        let p = params(12.0, 0.96, ScanOrder::Serpentine, 3000.0);
        let g = max_trackable_gradient(&p, &frame);
        assert_relative_eq!(g, 0.8562, epsilon = 5e-4);
        let half = params(6.0, 0.96, ScanOrder::Serpentine, 3000.0);
        assert_relative_eq!(max_trackable_gradient(&half, &frame), g / 2.0, max_relative = 1e-12);
        let zero = params(f64::MIN_POSITIVE, 0.96, ScanOrder::Serpentine, 3000.0);
        assert!(max_trackable_gradient(&zero, &frame) < 1e-300);
    }

    #[test]
    fn source_errors_carry_pixel_coordinates() {
        let mut src = |px: (usize, usize), _f: f64| -> PlResult {
            if px == (1, 0) {
                Err("detector glitch".into())
            } else {
                Ok(100.0)
            }
        };
        let err = track_scan(&mut src, 2, 2, (1.0, 1.0), params(12.0, 0.96, ScanOrder::Raster, 3000.0))
            .unwrap_err();
        match err {
            TrackerError::Source { ix, iy, .. } => assert_eq!((ix, iy), (1, 0)),
            other => panic!("unexpected error {other}"),
        }
    }
}
