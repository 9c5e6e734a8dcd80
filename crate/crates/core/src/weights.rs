//! The NNW1 tensor container used for network weights and probability maps.
//!
//! Layout: the 4 magic bytes `NNW1`, then zero or more records until EOF.
//! Each record is
//!
//! ```text
//! u16 LE  name length in bytes
//! bytes   UTF-8 name
//! u8      ndim
//! u32 LE  × ndim  dims
//! f32 LE  × product(dims)  data
//! ```
//!
//! Network parameters are stored in architecture order. Malformed files are
//! reported as three distinct errors: corrupt header (bad magic or nonsense
//! record metadata), truncated payload (EOF inside a record), and shape
//! mismatch (valid file whose tensors disagree with the target architecture).

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Network, NetworkParams, Param};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NNW1";
/// Upper bound on ndim; anything above this is treated as corruption.
const MAX_NDIM: u8 = 8;
/// Upper bound on a single tensor's element count (corruption guard).
const MAX_ELEMENTS: u64 = 1 << 31;

/// Writes named tensors in the given order.
pub fn save_tensors(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Data(format!("tensor name too long: {name}")));
        }
        if tensor.shape().len() > MAX_NDIM as usize {
            return Err(Error::Data(format!(
                "tensor {name} has {} dims, max {MAX_NDIM}",
                tensor.shape().len()
            )));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads all records of an NNW1 file in order.
pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::CorruptHeader(format!("{}: file shorter than magic", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    if &magic != MAGIC {
        return Err(Error::CorruptHeader(format!(
            "{}: bad magic {magic:?}, expected {MAGIC:?}",
            path.display()
        )));
    }

    let mut entries = Vec::new();
    loop {
        // A record may cleanly end the file; EOF at the first byte of a
        // record is the normal termination.
        let mut len_bytes = [0u8; 2];
        if r.read(&mut len_bytes[..1])? == 0 {
            break;
        }
        let in_record = |e: std::io::Error, what: &str| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::TruncatedPayload(format!("{}: EOF inside {what}", path.display()))
            } else {
                Error::Io(e)
            }
        };
        r.read_exact(&mut len_bytes[1..])
            .map_err(|e| in_record(e, "record name length"))?;
        let name_len = u16::from_le_bytes(len_bytes) as usize;

        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|e| in_record(e, "record name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| {
            Error::CorruptHeader(format!("{}: record name is not UTF-8", path.display()))
        })?;

        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)
            .map_err(|e| in_record(e, "record ndim"))?;
        let ndim = ndim[0];
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::CorruptHeader(format!(
                "{}: tensor '{name}' has implausible ndim {ndim}",
                path.display()
            )));
        }

        let mut shape = Vec::with_capacity(ndim as usize);
        let mut elements: u64 = 1;
        for _ in 0..ndim {
            let mut dim = [0u8; 4];
            r.read_exact(&mut dim)
                .map_err(|e| in_record(e, "record dims"))?;
            let dim = u32::from_le_bytes(dim) as u64;
            elements = elements.saturating_mul(dim.max(1)).max(dim);
            shape.push(dim as usize);
        }
        if elements > MAX_ELEMENTS {
            return Err(Error::CorruptHeader(format!(
                "{}: tensor '{name}' claims {elements} elements",
                path.display()
            )));
        }

        let count: usize = shape.iter().product();
        let mut data = vec![0f32; count];
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf)
            .map_err(|e| in_record(e, &format!("data of tensor '{name}'")))?;
        for (v, chunk) in data.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(entries)
}

/// Saves network parameters in architecture order.
pub fn save_weights(path: &Path, params: &NetworkParams<f32>) -> Result<()> {
    let entries: Vec<(String, Tensor<f32>)> = params
        .entries()
        .iter()
        .map(|p| (p.name.clone(), p.values.clone()))
        .collect();
    save_tensors(path, &entries)
}

fn params_from_entries(entries: Vec<(String, Tensor<f32>)>) -> NetworkParams<f32> {
    NetworkParams::from_entries(
        entries
            .into_iter()
            .map(|(name, values)| Param { name, values })
            .collect(),
    )
}

/// Loads patch-model parameters and validates them against `network`.
pub fn load_weights(path: &Path, network: &Network) -> Result<NetworkParams<f32>> {
    let params = params_from_entries(load_tensors(path)?);
    network.validate_params(&params)?;
    Ok(params)
}

/// Loads fully-convolutional parameters and validates them against `network`.
pub fn load_dense_weights(path: &Path, network: &Network) -> Result<NetworkParams<f32>> {
    let params = params_from_entries(load_tensors(path)?);
    network.validate_dense_params(&params)?;
    Ok(params)
}
