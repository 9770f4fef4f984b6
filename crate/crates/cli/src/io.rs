//! Reading input files.

use std::fmt;
use std::fs;
use std::path::Path;

use mziforge::network::WeightRecord;
use mziforge::ComplexMatrix;
use serde::de::DeserializeOwned;

/// A file that cannot be read or parsed; reported with exit code 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn read_text(path: &Path) -> Result<String, InputError> {
    fs::read_to_string(path).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, InputError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

/// A square matrix stored as `{rows, cols, re, im}`.
pub fn read_unitary(path: &Path) -> Result<ComplexMatrix, InputError> {
    let rec: WeightRecord = read_json(path)?;
    let m = rec
        .to_matrix()
        .map_err(|e| InputError(format!("{}: {e}", path.display())))?;
    if !m.is_square() {
        return Err(InputError(format!(
            "{}: matrix is {}x{}, not square",
            path.display(),
            m.rows(),
            m.cols()
        )));
    }
    Ok(m)
}
