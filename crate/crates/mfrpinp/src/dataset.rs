//! Dataset and fused-state CSV files.
//!
//! Dataset columns, one row per low-fidelity tick:
//! `t, dk, enc_wr, enc_wl, imu_yawrate, hifi_flag, hifi_x, hifi_y, hifi_th,
//! hifi_vx, hifi_vy, hifi_w, true_x, true_y, true_th, true_vx, true_vy, true_w`.
//! The `hifi_*` cells are empty when `hifi_flag` is 0.
//!
//! Fused columns: `t, x, y, th, vx, vy, w`.

use std::io::{Read, Write};
use std::path::Path;

use mfrpinp_core::physics::{RobotState, WheelCmd};
use mfrpinp_core::sim::{Dataset, GroundTruthFrame, SensorFrame};

use crate::error::{Error, Result};

pub const DATASET_COLUMNS: [&str; 18] = [
    "t",
    "dk",
    "enc_wr",
    "enc_wl",
    "imu_yawrate",
    "hifi_flag",
    "hifi_x",
    "hifi_y",
    "hifi_th",
    "hifi_vx",
    "hifi_vy",
    "hifi_w",
    "true_x",
    "true_y",
    "true_th",
    "true_vx",
    "true_vy",
    "true_w",
];

pub const FUSED_COLUMNS: [&str; 7] = ["t", "x", "y", "th", "vx", "vy", "w"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("{0}")]
    Io(String),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("file has no rows")]
    Empty,
}

impl From<DataError> for Error {
    fn from(e: DataError) -> Self {
        Error::Validation(e.to_string())
    }
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        match e.position() {
            Some(p) => DataError::Parse {
                line: p.line(),
                message: e.to_string(),
            },
            None => DataError::Io(e.to_string()),
        }
    }
}

/// Shortest text that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn state_cells(s: &RobotState) -> impl Iterator<Item = String> {
    s.to_array().into_iter().map(fmt_f64)
}

pub fn write_dataset<W: Write>(out: W, data: &Dataset) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DATASET_COLUMNS)?;
    for (f, g) in data.sensors.iter().zip(&data.truth) {
        let mut row = vec![
            fmt_f64(f.t),
            fmt_f64(f.dk),
            fmt_f64(f.encoder.right),
            fmt_f64(f.encoder.left),
            fmt_f64(f.imu_yaw_rate),
        ];
        match &f.hifi {
            Some(h) => {
                row.push("1".into());
                row.extend(state_cells(h));
            }
            None => {
                row.push("0".into());
                row.extend(std::iter::repeat_n(String::new(), 6));
            }
        }
        row.extend(state_cells(&g.state));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))
}

/// Column positions of `names` in `headers`, or the first missing name.
fn columns<const N: usize>(
    headers: &csv::StringRecord,
    names: &[&str; N],
) -> Result<[usize; N], DataError> {
    let mut idx = [0; N];
    for (i, name) in names.iter().enumerate() {
        idx[i] = headers
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| DataError::MissingColumn((*name).to_string()))?;
    }
    Ok(idx)
}

struct Row<'a> {
    rec: &'a csv::StringRecord,
    line: u64,
}

impl Row<'_> {
    fn err(&self, message: String) -> DataError {
        DataError::Parse {
            line: self.line,
            message,
        }
    }

    fn cell(&self, i: usize, name: &str) -> Result<&str, DataError> {
        self.rec
            .get(i)
            .map(str::trim)
            .ok_or_else(|| self.err(format!("missing value for {name}")))
    }

    fn num(&self, i: usize, name: &str) -> Result<f64, DataError> {
        let s = self.cell(i, name)?;
        s.parse()
            .map_err(|_| self.err(format!("column {name}: expected a number, got {s:?}")))
    }

    fn state(&self, idx: &[usize], names: &[&str]) -> Result<RobotState, DataError> {
        let mut a = [0.0; 6];
        for k in 0..6 {
            a[k] = self.num(idx[k], names[k])?;
        }
        Ok(RobotState::from_array(a))
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input)
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset, DataError> {
    let mut r = reader(input);
    let idx = columns(r.headers()?, &DATASET_COLUMNS)?;
    let mut data = Dataset::default();
    let mut rec = csv::StringRecord::new();
    let mut prev_t = f64::NEG_INFINITY;
    while r.read_record(&mut rec)? {
        let row = Row {
            rec: &rec,
            line: rec.position().map_or(0, |p| p.line()),
        };
        let n = |k: usize| row.num(idx[k], DATASET_COLUMNS[k]);
        let (t, dk) = (n(0)?, n(1)?);
        if !(dk > 0.0) {
            return Err(row.err(format!("dk must be positive, got {dk}")));
        }
        if !(t > prev_t) {
            return Err(row.err("timestamps must increase".into()));
        }
        prev_t = t;
        let hifi = match row.cell(idx[5], "hifi_flag")? {
            "0" => None,
            "1" => Some(row.state(&idx[6..12], &DATASET_COLUMNS[6..12])?),
            other => return Err(row.err(format!("hifi_flag must be 0 or 1, got {other:?}"))),
        };
        let state = row.state(&idx[12..18], &DATASET_COLUMNS[12..18])?;
        let body = state.body_velocity();
        data.sensors.push(SensorFrame {
            t,
            dk,
            encoder: WheelCmd::new(n(2)?, n(3)?),
            imu_yaw_rate: n(4)?,
            hifi,
        });
        data.truth.push(GroundTruthFrame {
            t,
            state,
            body,
            disturbance: [0.0; 6],
        });
    }
    if data.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(data)
}

pub fn write_fused<W: Write>(out: W, times: &[f64], states: &[RobotState]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FUSED_COLUMNS)?;
    for (t, s) in times.iter().zip(states) {
        let mut row = vec![fmt_f64(*t)];
        row.extend(state_cells(s));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))
}

/// Timestamps and states of a fused-state file.
pub fn read_fused<R: Read>(input: R) -> Result<(Vec<f64>, Vec<RobotState>), DataError> {
    let mut r = reader(input);
    let idx = columns(r.headers()?, &FUSED_COLUMNS)?;
    let (mut times, mut states) = (Vec::new(), Vec::new());
    let mut rec = csv::StringRecord::new();
    while r.read_record(&mut rec)? {
        let row = Row {
            rec: &rec,
            line: rec.position().map_or(0, |p| p.line()),
        };
        times.push(row.num(idx[0], "t")?);
        states.push(row.state(&idx[1..], &FUSED_COLUMNS[1..])?);
    }
    if states.is_empty() {
        return Err(DataError::Empty);
    }
    Ok((times, states))
}

fn open(path: &Path) -> Result<std::fs::File, DataError> {
    std::fs::File::open(path).map_err(|e| DataError::Io(e.to_string()))
}

fn with_path(path: &Path, e: DataError) -> Error {
    Error::Validation(format!("{}: {e}", path.display()))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    open(path)
        .and_then(|f| read_dataset(std::io::BufReader::new(f)))
        .map_err(|e| with_path(path, e))
}

pub fn load_fused(path: &Path) -> Result<(Vec<f64>, Vec<RobotState>)> {
    open(path)
        .and_then(|f| read_fused(std::io::BufReader::new(f)))
        .map_err(|e| with_path(path, e))
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dataset(std::io::BufWriter::new(f), data).map_err(|e| Error::runtime(format!("{}: {e}", path.display())))
}

pub fn save_fused(path: &Path, times: &[f64], states: &[RobotState]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_fused(std::io::BufWriter::new(f), times, states)
        .map_err(|e| Error::runtime(format!("{}: {e}", path.display())))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}
