//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MAMCKPT\0"
//! version  u32
//! config   u32 length, UTF-8 model snapshot (key = value lines)
//! count    u32
//! array*   u32 name length, name, u8 dtype tag, u32 rank, u64 dims[rank], raw values
//! ```

use std::path::Path;

use mam_core::{init_model, Array, DType, JointPolicy, ModelConfig, ParamSet, Scalar};

use crate::config::{model_snapshot, parse_model_snapshot};
use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"MAMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(params: &ParamSet<T>, config: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_scalars() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let snapshot = model_snapshot(config);
    out.extend_from_slice(&(snapshot.len() as u32).to_le_bytes());
    out.extend_from_slice(snapshot.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, a) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
        for &d in a.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in a.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(params: &ParamSet<T>, config: &ModelConfig, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(params, config)).map_err(|e| HarnessError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(HarnessError::Truncated { path: self.path.into(), what: what.into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| HarnessError::Format { path: self.path.into(), message: format!("{what} is not UTF-8") })
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(ModelConfig, ParamSet<T>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len(), "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(HarnessError::BadMagic { path: path.into() });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(HarnessError::Version { path: path.into(), found: version, expected: FORMAT_VERSION });
    }
    let snapshot = r.text("config snapshot")?;
    let config = parse_model_snapshot(&snapshot, &format!("{} (snapshot)", path.display()))?;
    let count = r.u32("array count")?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let name = r.text(&format!("name of array {i}"))?;
        let tag = r.take(1, &format!("dtype of `{name}`"))?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| HarnessError::Format {
            path: path.into(),
            message: format!("array `{name}` has unknown dtype tag {tag}"),
        })?;
        if dtype != T::DTYPE {
            return Err(HarnessError::Format {
                path: path.into(),
                message: format!("array `{name}` is {dtype:?}, requested {:?}", T::DTYPE),
            });
        }
        let rank = r.u32(&format!("rank of `{name}`"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&format!("shape of `{name}`"))? as usize);
        }
        let len: usize = shape.iter().product();
        let size = dtype.size();
        let raw = r.take(len.saturating_mul(size), &format!("values of `{name}`"))?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        params.add(name, Array::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(HarnessError::Format {
            path: path.into(),
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok((config, params))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelConfig, ParamSet<T>)> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Rebuilds a policy from `path`. With `expected`, the stored arrays must
/// match the layout that configuration produces, array by array.
pub fn load_policy<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Box<dyn JointPolicy<T>>> {
    let (stored, params) = load_checkpoint::<T>(path)?;
    let config = expected.unwrap_or(&stored);
    let mut policy = init_model::<T>(config, 0)?;
    check_layout(path, policy.params(), &params)?;
    policy.params_mut().assign(params.iter().map(|(_, a)| a.clone()).collect())?;
    Ok(policy)
}

fn check_layout<T: Scalar>(path: &Path, reference: &ParamSet<T>, params: &ParamSet<T>) -> Result<()> {
    let describe = |a: Option<(&str, &Array<T>)>| match a {
        Some((n, a)) => format!("`{n}` {:?}", a.shape()),
        None => "nothing".to_string(),
    };
    let (mut want, mut got) = (reference.iter(), params.iter());
    loop {
        match (want.next(), got.next()) {
            (None, None) => break,
            (w, g) if w.map(|(n, a)| (n, a.shape())) != g.map(|(n, a)| (n, a.shape())) => {
                let name = g.or(w).map(|(n, _)| n.to_string()).unwrap_or_default();
                return Err(HarnessError::ShapeMismatch {
                    path: path.into(),
                    name,
                    expected: describe(w),
                    found: describe(g),
                });
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mam_core::MamModel64;

    fn small() -> ModelConfig {
        ModelConfig { d_model: 4, state_dim: 2, dt_rank: 2, ..ModelConfig::new(2, 3, 2) }
    }

    #[test]
    fn encoding_round_trips_bitwise() {
        let m = MamModel64::init(&small(), 4).unwrap();
        let bytes = encode_checkpoint(m.params(), &small());
        let (c, p) = decode_checkpoint::<f64>(&bytes, Path::new("mem")).unwrap();
        assert_eq!(c, small());
        assert!(p.bit_eq(m.params()));
        assert_eq!(encode_checkpoint(&p, &c), bytes);
    }

    #[test]
    fn every_truncation_is_reported() {
        let m = MamModel64::init(&small(), 4).unwrap();
        let bytes = encode_checkpoint(m.params(), &small());
        for cut in [0, 5, 9, 14, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint::<f64>(&bytes[..cut], Path::new("mem")).unwrap_err();
            assert!(matches!(err, HarnessError::Truncated { .. } | HarnessError::BadMagic { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn wrong_dtype_is_a_format_error() {
        let m = MamModel64::init(&small(), 4).unwrap();
        let bytes = encode_checkpoint(m.params(), &small());
        assert!(matches!(decode_checkpoint::<f32>(&bytes, Path::new("mem")), Err(HarnessError::Format { .. })));
    }
}
