use std::io::Write;
use std::path::Path;

use super::{EvalEntry, InferenceError, Summary};

fn io_err(path: &Path, e: std::io::Error) -> InferenceError {
    InferenceError::Io(format!("{}: {e}", path.display()))
}

/// Binary (P5) PGM; nonzero pixels are written as 255.
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<(), InferenceError> {
    if pixels.len() != height * width {
        return Err(InferenceError::Invalid(format!("{} pixels for a {height}x{width} image", pixels.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&p| if p > 0 { 255u8 } else { 0 }));
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// `sample_id,mean_nll,std_nll`, one row per entry in the given order.
pub fn write_nll_csv(path: &Path, rows: &[(usize, EvalEntry)]) -> Result<(), InferenceError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_err(path, e))?);
    let mut body = String::from("sample_id,mean_nll,std_nll\n");
    for (id, e) in rows {
        body.push_str(&format!("{id},{},{}\n", e.mean_nll, e.std_nll));
    }
    f.write_all(body.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn write_summary_csv(path: &Path, label: &str, s: &Summary) -> Result<(), InferenceError> {
    let body = format!(
        "dataset,count,mean,std,min,p05,p25,median,p75,p95,max\n{label},{},{},{},{},{},{},{},{},{},{}\n",
        s.count, s.mean, s.std, s.min, s.p05, s.p25, s.median, s.p75, s.p95, s.max
    );
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}
