//! File formats: CSV grids with a header block, 16-bit PGM renders, and JSON
//! documents for configs, models and scan sidecars.
//!
//! Grid CSV layout: header lines prefixed `#` carrying `nx`, `ny`, `width`,
//! `height`, `unit`, followed by `ny` comma-separated rows of `nx` values.
//! Values are written with 17 significant digits so a round trip reproduces
//! every `f64` bit for bit.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, ScalarGrid, Unit};
use crate::odmr::SpectrumFit;
use crate::tps::{FitConfig, TpsModel};
use crate::tracker::{ScanParams, ScanRecord, Shift};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: bad header: {message}")]
    BadHeader {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: missing header key '{key}'")]
    MissingKey { path: String, key: &'static str },
    #[error("{path}: data row {row} is missing (expected {expected} rows)")]
    MissingRow {
        path: String,
        row: usize,
        expected: usize,
    },
    #[error("{path}: row {row} has {got} values, expected {want}")]
    RowLength {
        path: String,
        row: usize,
        got: usize,
        want: usize,
    },
    #[error("{path}: row {row}, field {col}: cannot parse '{text}' as a number")]
    BadValue {
        path: String,
        row: usize,
        col: usize,
        text: String,
    },
    #[error("{path}: {source}")]
    Grid { path: String, source: GridError },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: record sidecar shift log has {got} entries, grids have {want} pixels")]
    ShiftLogLength {
        path: String,
        got: usize,
        want: usize,
    },
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        source,
    }
}

/// Writes a grid as headered CSV at full precision.
pub fn write_grid_csv(path: &Path, grid: &ScalarGrid) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>, s: String| -> Result<(), IoError> {
        w.write_all(s.as_bytes()).map_err(|e| file_err(path, e))
    };
    write(&mut w, format!("# nx: {}\n", grid.nx()))?;
    write(&mut w, format!("# ny: {}\n", grid.ny()))?;
    write(&mut w, format!("# width: {:.16e}\n", grid.extent().0))?;
    write(&mut w, format!("# height: {:.16e}\n", grid.extent().1))?;
    write(&mut w, format!("# unit: {}\n", grid.unit().label()))?;
    for iy in 0..grid.ny() {
        let mut line = String::new();
        for ix in 0..grid.nx() {
            if ix > 0 {
                line.push(',');
            }
            line.push_str(&format!("{:.16e}", grid.get(ix, iy)));
        }
        line.push('\n');
        write(&mut w, line)?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Reads a headered CSV grid, reporting the offending line on failure.
pub fn read_grid_csv(path: &Path) -> Result<ScalarGrid, IoError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| file_err(path, e))?;
    let reader = BufReader::new(file);

    let mut nx: Option<usize> = None;
    let mut ny: Option<usize> = None;
    let mut width: Option<f64> = None;
    let mut height: Option<f64> = None;
    let mut unit: Option<Unit> = None;
    let mut values: Vec<f64> = Vec::new();
    let mut data_row = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| file_err(path, e))?;
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let (key, value) = rest.split_once(':').ok_or_else(|| IoError::BadHeader {
                path: p.clone(),
                line: line_no,
                message: "expected 'key: value'".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |message: String| IoError::BadHeader {
                path: p.clone(),
                line: line_no,
                message,
            };
            match key {
                "nx" => nx = Some(value.parse().map_err(|_| bad(format!("bad nx '{value}'")))?),
                "ny" => ny = Some(value.parse().map_err(|_| bad(format!("bad ny '{value}'")))?),
                "width" => {
                    width = Some(value.parse().map_err(|_| bad(format!("bad width '{value}'")))?)
                }
                "height" => {
                    height = Some(
                        value
                            .parse()
                            .map_err(|_| bad(format!("bad height '{value}'")))?,
                    )
                }
                "unit" => {
                    unit = Some(
                        Unit::from_label(value).ok_or_else(|| bad(format!("unknown unit '{value}'")))?,
                    )
                }
                other => return Err(bad(format!("unknown header key '{other}'"))),
            }
            continue;
        }

        let want = nx.ok_or(IoError::MissingKey {
            path: p.clone(),
            key: "nx",
        })?;
        data_row += 1;
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != want {
            return Err(IoError::RowLength {
                path: p,
                row: data_row,
                got: fields.len(),
                want,
            });
        }
        for (col, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| IoError::BadValue {
                path: p.clone(),
                row: data_row,
                col: col + 1,
                text: field.trim().to_string(),
            })?;
            values.push(v);
        }
    }

    let nx = nx.ok_or(IoError::MissingKey {
        path: p.clone(),
        key: "nx",
    })?;
    let ny = ny.ok_or(IoError::MissingKey {
        path: p.clone(),
        key: "ny",
    })?;
    let width = width.ok_or(IoError::MissingKey {
        path: p.clone(),
        key: "width",
    })?;
    let height = height.ok_or(IoError::MissingKey {
        path: p.clone(),
        key: "height",
    })?;
    let unit = unit.ok_or(IoError::MissingKey {
        path: p.clone(),
        key: "unit",
    })?;

    if data_row < ny {
        return Err(IoError::MissingRow {
            path: p,
            row: data_row + 1,
            expected: ny,
        });
    }

    ScalarGrid::new(nx, ny, (width, height), unit, values)
        .map_err(|source| IoError::Grid { path: p, source })
}

/// Renders a grid as binary 16-bit PGM, mapping `[min, max]` linearly onto
/// `[0, 65535]`. A constant grid maps to all-zero pixels.
pub fn write_grid_pgm(path: &Path, grid: &ScalarGrid) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(file);
    let header = format!("P5\n{} {}\n65535\n", grid.nx(), grid.ny());
    w.write_all(header.as_bytes()).map_err(|e| file_err(path, e))?;
    let lo = grid.min();
    let hi = grid.max();
    let span = hi - lo;
    for iy in 0..grid.ny() {
        for ix in 0..grid.nx() {
            let v = if span > 0.0 {
                (((grid.get(ix, iy) - lo) / span) * 65535.0).round() as u16
            } else {
                0
            };
            w.write_all(&v.to_be_bytes()).map_err(|e| file_err(path, e))?;
        }
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Serializes any document as pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| file_err(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// On-disk form of a fitted model: coefficients, centers, the fit
/// configuration that produced them, and the library version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsModelFile {
    pub version: String,
    pub config: FitConfig,
    pub model: TpsModel,
}

pub fn save_model(path: &Path, model: &TpsModel, config: &FitConfig) -> Result<(), IoError> {
    save_json(
        path,
        &TpsModelFile {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            model: model.clone(),
        },
    )
}

pub fn load_model(path: &Path) -> Result<TpsModelFile, IoError> {
    load_json(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScanSidecar {
    params: ScanParams,
    #[serde(default)]
    shift_log: Vec<Shift>,
    #[serde(default)]
    spectrum: Option<SpectrumFit>,
}

/// Writes a scan record as four grid CSVs plus a JSON sidecar.
pub fn save_record(dir: &Path, rec: &ScanRecord) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    write_grid_csv(&dir.join("c0.csv"), &rec.c0)?;
    write_grid_csv(&dir.join("c_minus.csv"), &rec.c_minus)?;
    write_grid_csv(&dir.join("c_plus.csv"), &rec.c_plus)?;
    write_grid_csv(&dir.join("f0.csv"), &rec.f0)?;
    save_json(
        &dir.join("scan.json"),
        &ScanSidecar {
            params: rec.params,
            shift_log: rec.shift_log.clone(),
            spectrum: rec.spectrum.clone(),
        },
    )
}

/// Loads a scan record directory. External data may omit the shift log, in
/// which case no pixel is post-processed.
pub fn load_record(dir: &Path) -> Result<ScanRecord, IoError> {
    let c0 = read_grid_csv(&dir.join("c0.csv"))?;
    let c_minus = read_grid_csv(&dir.join("c_minus.csv"))?;
    let c_plus = read_grid_csv(&dir.join("c_plus.csv"))?;
    let f0 = read_grid_csv(&dir.join("f0.csv"))?;
    let sidecar: ScanSidecar = load_json(&dir.join("scan.json"))?;
    let pixels = c0.len();
    let shift_log = if sidecar.shift_log.is_empty() {
        vec![Shift::None; pixels]
    } else if sidecar.shift_log.len() == pixels {
        sidecar.shift_log
    } else {
        return Err(IoError::ShiftLogLength {
            path: dir.join("scan.json").display().to_string(),
            got: sidecar.shift_log.len(),
            want: pixels,
        });
    };
    Ok(ScanRecord {
        c0,
        c_minus,
        c_plus,
        f0,
        params: sidecar.params,
        shift_log,
        spectrum: sidecar.spectrum,
    })
}
