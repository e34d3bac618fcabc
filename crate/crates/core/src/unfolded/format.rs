//! Binary model files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "DFPC"            4 bytes magic
//! version           u32   1 = shared A, B, C; 2 = one A, B, C per layer
//! M, N, R           u64 × 3
//! kappa             f64
//! normalize flag    u8    1 = per-layer normalization
//! A, B, C           f64, row-major (repeated R times for version 2)
//! nu                f64 × R
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{LayerWeights, UnfoldedModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFPC";
pub const FORMAT_VERSION_SHARED: u32 = 1;
pub const FORMAT_VERSION_PER_LAYER: u32 = 2;

/// Refuse headers claiming more than this many parameters.
const MAX_PARAMS: u64 = 1 << 31;

pub fn write_model<W: Write>(model: &UnfoldedModel, mut w: W) -> Result<()> {
    model.validate()?;
    let version = if model.is_per_layer() { FORMAT_VERSION_PER_LAYER } else { FORMAT_VERSION_SHARED };
    w.write_all(MAGIC)?;
    w.write_all(&version.to_le_bytes())?;
    for d in [model.measurements(), model.signal_len(), model.layers()] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&model.kappa.to_le_bytes())?;
    w.write_all(&[u8::from(model.normalize_per_layer)])?;
    for lw in &model.weights {
        for mat in [&lw.a, &lw.b, &lw.c] {
            write_row_major(&mut w, mat)?;
        }
    }
    for v in &model.nu {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn write_row_major<W: Write>(w: &mut W, mat: &DMatrix<f64>) -> Result<()> {
    for i in 0..mat.nrows() {
        for j in 0..mat.ncols() {
            w.write_all(&mat[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array::<8, _>(r, what)?))
}

fn read_row_major<R: Read>(r: &mut R, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(r, what)?);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn read_model<R: Read>(mut r: R) -> Result<UnfoldedModel> {
    let magic = read_array::<4, _>(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array::<4, _>(&mut r, "version")?);
    if version != FORMAT_VERSION_SHARED && version != FORMAT_VERSION_PER_LAYER {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0u64; 3];
    for (d, name) in dims.iter_mut().zip(["M", "N", "R"]) {
        *d = u64::from_le_bytes(read_array::<8, _>(&mut r, name)?);
    }
    let [m, n, layers] = dims;
    let sets = if version == FORMAT_VERSION_PER_LAYER { layers } else { 1 };
    let plausible = m
        .checked_mul(n)
        .and_then(|mn| mn.checked_mul(3))
        .and_then(|p| p.checked_mul(sets))
        .is_some_and(|p| p <= MAX_PARAMS && m > 0 && n > 0 && layers > 0);
    if !plausible {
        return Err(Error::Format(format!("implausible dimensions M={m}, N={n}, R={layers}")));
    }
    let (m, n, layers) = (m as usize, n as usize, layers as usize);
    let kappa = read_f64(&mut r, "kappa")?;
    let flag = read_array::<1, _>(&mut r, "normalize flag")?[0];
    if flag > 1 {
        return Err(Error::Format(format!("normalize flag must be 0 or 1, got {flag}")));
    }
    let mut weights = Vec::with_capacity(sets as usize);
    for _ in 0..sets {
        let a = read_row_major(&mut r, n, m, "A")?;
        let b = read_row_major(&mut r, m, n, "B")?;
        let c = read_row_major(&mut r, n, m, "C")?;
        weights.push(LayerWeights { a, b, c });
    }
    let nu = (0..layers).map(|_| read_f64(&mut r, "nu")).collect::<Result<Vec<_>>>()?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after model".into()));
    }
    let model = UnfoldedModel { weights, nu, kappa, normalize_per_layer: flag == 1 };
    model.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(model)
}

pub fn save_model(model: &UnfoldedModel, path: &Path) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: &Path) -> Result<UnfoldedModel> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingModel(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    read_model(BufReader::new(file))
}
