//! Binary parameter archives.
//!
//! Layout (little endian): magic `SSCDLCK1`, `u32` fingerprint length and
//! bytes, `u32` tensor count, then per tensor a `u32` name length, the name,
//! `u64` rows, `u64` cols and `rows × cols` `f64` values in row-major order.
//! Batch-norm running statistics are stored as `1 × d` tensors named
//! `<layer>.bn.running_mean` / `<layer>.bn.running_var`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::ModelParams;

const MAGIC: &[u8; 8] = b"SSCDLCK1";

fn named_tensors(params: &ModelParams) -> Vec<(String, Array2<f64>)> {
    let mut out: Vec<(String, Array2<f64>)> = params
        .names()
        .iter()
        .cloned()
        .zip(params.tensors().iter().cloned())
        .collect();
    for (name, stats) in params.running_names().into_iter().zip(params.running()) {
        let row = |a: &Array1<f64>| a.clone().insert_axis(ndarray::Axis(0));
        out.push((format!("{name}.running_mean"), row(&stats.mean)));
        out.push((format!("{name}.running_var"), row(&stats.var)));
    }
    out
}

pub fn encode(params: &ModelParams, fingerprint: &str) -> Vec<u8> {
    let tensors = named_tensors(params);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(fingerprint.len() as u32).to_le_bytes());
    buf.extend_from_slice(fingerprint.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            .map_err(|_| Error::Checkpoint("dimension overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub type NamedTensors = Vec<(String, Array2<f64>)>;

/// Parsed archive: the recorded fingerprint and named tensors in order.
pub fn decode(bytes: &[u8]) -> Result<(String, NamedTensors)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let fingerprint = c.string()?;
    let count = c.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = c.string()?;
        let rows = c.u64()?;
        let cols = c.u64()?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?;
        let raw = c.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensors.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((fingerprint, tensors))
}

/// Copies archived values into `params`, which fixes the expected layout.
/// The archive must carry `expected_fingerprint` and exactly the tensors of
/// `params`, with matching shapes.
pub fn restore(params: &mut ModelParams, bytes: &[u8], expected_fingerprint: &str) -> Result<()> {
    let (fingerprint, tensors) = decode(bytes)?;
    if fingerprint != expected_fingerprint {
        return Err(Error::Checkpoint(format!(
            "fingerprint {fingerprint} does not match expected {expected_fingerprint}"
        )));
    }
    let layout = named_tensors(params);
    if layout.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "archive has {} tensors, model expects {}",
            tensors.len(),
            layout.len()
        )));
    }
    for ((want, cur), (got, t)) in layout.iter().zip(&tensors) {
        if want != got || cur.dim() != t.dim() {
            return Err(Error::Checkpoint(format!(
                "tensor {got} {:?} where {want} {:?} was expected",
                t.dim(),
                cur.dim()
            )));
        }
    }
    let n_params = params.tensors().len();
    params.set_tensors(tensors[..n_params].iter().map(|(_, t)| t.clone()).collect())?;
    for (i, pair) in tensors[n_params..].chunks_exact(2).enumerate() {
        let stats = &mut params.running_mut()[i];
        stats.mean = pair[0].1.row(0).to_owned();
        stats.var = pair[1].1.row(0).to_owned();
    }
    Ok(())
}

pub fn save(path: &Path, params: &ModelParams, fingerprint: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(params, fingerprint)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, params: &mut ModelParams, expected_fingerprint: &str) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(params, &bytes, expected_fingerprint)
}
