//! Flat binary dataset container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic    4 bytes  "LRMT"
//! version  u32
//! d, k, T, N  u64 each
//! sigma    f64
//! for each task t: X_t as d·N f64 (row-major), then y_t as N f64
//! ```

use std::io::{Read, Write};

use super::{MultiTaskDataset, TaskData};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CONTAINER_MAGIC: &[u8; 4] = b"LRMT";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    /// Representation dimension the data was generated with.
    pub k: usize,
    pub data: MultiTaskDataset,
}

pub fn write_dataset<W: Write>(mut out: W, data: &MultiTaskDataset, k: usize) -> Result<()> {
    out.write_all(CONTAINER_MAGIC)?;
    out.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    for v in [data.dim(), k, data.t_count(), data.n_per_task] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(&data.noise_sigma.to_le_bytes())?;
    for task in &data.tasks {
        for v in task.x.as_slice().iter().chain(&task.y) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<DatasetFile> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array(&mut input)?);
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for slot in dims.iter_mut() {
        let v = u64::from_le_bytes(read_array(&mut input)?);
        *slot = usize::try_from(v).map_err(|_| Error::Format(format!("dimension {v} too large")))?;
    }
    let [d, k, t_count, n] = dims;
    if d == 0 || t_count == 0 || n == 0 {
        return Err(Error::Format("zero dimension in header".into()));
    }
    let noise_sigma = f64::from_le_bytes(read_array(&mut input)?);

    let mut tasks = Vec::with_capacity(t_count);
    for _ in 0..t_count {
        let x = read_f64s(&mut input, d * n)?;
        let y = read_f64s(&mut input, n)?;
        let x = Matrix::from_vec(d, n, x).map_err(|e| Error::Format(e.to_string()))?;
        tasks.push(TaskData { x, y });
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last task".into()));
    }
    let data = MultiTaskDataset::new(tasks, noise_sigma)?;
    Ok(DatasetFile { k, data })
}

fn read_array<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    Ok(buf)
}

fn read_f64s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f64>> {
    (0..count)
        .map(|_| read_array::<R, 8>(input).map(f64::from_le_bytes))
        .collect()
}
