//! Binary checkpoint format.
//!
//! ```text
//! magic "DAMOCKPT" | u32 version | u32 len + config JSON | u32 tensor count
//! per tensor: u32 len + name | u32 ndim | u64 dims.. | f64 data..
//! ```
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{build, DamoConfig, ModelState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DAMOCKPT";
const FORMAT_VERSION: u32 = 1;
/// Guards against allocating absurd buffers from a corrupt header.
const MAX_FIELD: usize = 1 << 28;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint(state: &ModelState, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(state.config()).map_err(|e| Error::Format(e.to_string()))?;
    put_u32(w, json.len())?;
    w.write_all(&json)?;
    let tensors = state.named_tensors();
    put_u32(w, tensors.len())?;
    for (name, dims, data) in tensors {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, dims.len())?;
        for d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn get_len(r: &mut impl Read) -> Result<usize> {
    let v = u32::from_le_bytes(take(r)?) as usize;
    if v > MAX_FIELD {
        return Err(Error::Format(format!("field length {v} is implausible")));
    }
    Ok(v)
}

fn get_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("checkpoint is truncated".into()))?;
    Ok(buf)
}

/// Rebuilds the model from the stored config, then fills every tensor by name.
pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelState> {
    if &take::<8>(r)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = get_len(r)?;
    let config: DamoConfig = serde_json::from_slice(&get_bytes(r, len)?)
        .map_err(|e| Error::Format(format!("bad config: {e}")))?;
    let mut state = build(&config)?;
    let count = get_len(r)?;
    let mut stored: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = get_len(r)?;
        let name = String::from_utf8(get_bytes(r, len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = get_len(r)?;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(take(r)?) as usize);
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|&n| n <= MAX_FIELD).ok_or_else(|| {
            Error::Format(format!("tensor {name} has implausible dims {dims:?}"))
        })?;
        let raw = get_bytes(r, 8 * numel)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        stored.insert(name, (dims, data));
    }
    let expected: Vec<(String, Vec<usize>)> = state
        .named_tensors()
        .into_iter()
        .map(|(n, d, _)| (n, d))
        .collect();
    if stored.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model expects {}",
            stored.len(),
            expected.len()
        )));
    }
    for ((name, dims), dst) in expected.iter().zip(state.param_slices_mut()) {
        let (d, data) = stored
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if &d != dims {
            return Err(Error::Format(format!("tensor {name}: dims {d:?}, expected {dims:?}")));
        }
        dst.copy_from_slice(&data);
    }
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(state, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed() -> ModelState {
        let cfg = DamoConfig { channels: vec![4, 6, 8], spm_stages: 2, ..DamoConfig::new(8, 3) };
        let mut m = build(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in m.param_slices_mut() {
            for v in s.iter_mut() {
                *v += rng.random_range(-1.0..1.0) * 1e-3;
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = perturbed();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(&mut &buf[..]).unwrap();
        assert_eq!(back, m);
        for ((_, _, a), (_, _, b)) in m.named_tensors().iter().zip(back.named_tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = perturbed();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let mut buf = Vec::new();
        write_checkpoint(&perturbed(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut &bad[..]), Err(Error::Format(_))));
        let cut = &buf[..buf.len() - 5];
        assert!(matches!(read_checkpoint(&mut &cut[..]), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint(&mut &b""[..]), Err(Error::Format(_))));
    }
}
