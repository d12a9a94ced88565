//! Bit-exact parameter serialization.
//!
//! Format: a small binary container of named f32 tensors, little-endian.
//! Loading restores exactly the bytes that were saved, which the rest of
//! the workspace relies on for checkpoint-digest identity.

use crate::params::ParamSet;
use crate::NnError;
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"NNPARAM1";

pub fn to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&(value.ndim() as u8).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in value.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet, NnError> {
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Malformed("bad magic".into()));
    }
    let count = read_u32(&mut cur)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u16(&mut cur)? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NnError::Malformed("name utf8".into()))?;
        let ndim = read_u8(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut cur)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        for x in data.iter_mut() {
            let mut b = [0u8; 4];
            cur.read_exact(&mut b)?;
            *x = f32::from_le_bytes(b);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| NnError::Malformed(format!("shape: {e}")))?;
        params.register(&name, arr);
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), NnError> {
    let bytes = to_bytes(params);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet, NnError> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

/// Hex sha256 of the serialized parameters; the identity of a checkpoint.
pub fn digest(params: &ParamSet) -> String {
    let bytes = to_bytes(params);
    let mut h = Sha256::new();
    h.update(&bytes);
    hex(&h.finalize())
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn read_u8(cur: &mut std::io::Cursor<&[u8]>) -> Result<u8, NnError> {
    let mut b = [0u8; 1];
    cur.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16(cur: &mut std::io::Cursor<&[u8]>) -> Result<u16, NnError> {
    let mut b = [0u8; 2];
    cur.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use crate::rng::rng_from_seed;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rng_from_seed(1);
        let mut ps = ParamSet::new();
        ps.register("a.w", init::kaiming_uniform(&mut rng, &[4, 3, 3, 3], 27));
        ps.register("a.b", init::zeros(&[4]));
        let bytes = to_bytes(&ps);
        let ps2 = from_bytes(&bytes).unwrap();
        assert_eq!(ps.names(), ps2.names());
        assert_eq!(ps.flatten(), ps2.flatten());
        assert_eq!(digest(&ps), digest(&ps2));
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut rng = rng_from_seed(2);
        let mut ps = ParamSet::new();
        ps.register("x", init::uniform(&mut rng, &[5, 7], 1.0));
        save(&ps, &path).unwrap();
        let ps2 = load(&path).unwrap();
        assert_eq!(ps.flatten(), ps2.flatten());
    }
}
