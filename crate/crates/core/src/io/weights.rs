//! `XFTW` weight files.
//!
//! Layout (little-endian): magic, version `u32`, config JSON length `u32`
//! and bytes, tensor count `u32`, then per tensor a `u16`-prefixed UTF-8
//! name, dtype `u8` (0 = f32), rank `u8`, `u32` dims and the raw payload.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, XFeatModel};

use super::{atomic_write, check_version, put_f32s, put_u32, Reader};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"XFTW";
pub const WEIGHTS_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_weights(model: &XFeatModel<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_u32(&mut out, model.params().len())?;
    for p in model.params().iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("name too long: {}", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        out.push(u8::try_from(p.shape.len()).map_err(|_| Error::InvalidArgument("rank above 255".into()))?);
        for &d in &p.shape {
            put_u32(&mut out, d)?;
        }
        put_f32s(&mut out, &p.data);
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<XFeatModel<f32>> {
    let mut r = Reader::new(bytes, "weight file");
    r.magic(&WEIGHTS_MAGIC)?;
    check_version(r.u32()?, WEIGHTS_VERSION)?;
    let n = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    config.validate()?;
    let count = r.u32()? as usize;
    let mut names = BTreeSet::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(Error::Corrupt(format!("duplicate tensor {name}")));
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::UnknownDtype(dtype));
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name}: size overflow")))?;
        let data = r.f32s(numel)?;
        tensors.push((name, dims, data));
    }
    r.finish()?;
    XFeatModel::from_named(config, tensors)
}

pub fn save_weights(model: &XFeatModel<f32>, path: &Path) -> Result<()> {
    atomic_write(path, &encode_weights(model)?)
}

pub fn load_weights(path: &Path) -> Result<XFeatModel<f32>> {
    decode_weights(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = XFeatModel::<f32>::reduced(4).unwrap();
        m.param_mut("backbone.block1.0.bn.running_var").unwrap().data[0] = f32::from_bits(0x3f80_0001);
        let back = decode_weights(&encode_weights(&m).unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn corrupt_headers_rejected() {
        let m = XFeatModel::<f32>::reduced(0).unwrap();
        let good = encode_weights(&m).unwrap();
        let mut bad = good.clone();
        bad[0] = b'Y';
        assert!(matches!(decode_weights(&bad), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_weights(&bad), Err(Error::Version { found: 9, .. })));
        assert!(matches!(decode_weights(&good[..good.len() - 3]), Err(Error::Truncated(_))));
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_weights(&extra).is_err());
    }

    #[test]
    fn unknown_dtype_rejected() {
        let m = XFeatModel::<f32>::reduced(0).unwrap();
        let mut bytes = encode_weights(&m).unwrap();
        let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let first = 12 + cfg_len + 4;
        let name_len = u16::from_le_bytes(bytes[first..first + 2].try_into().unwrap()) as usize;
        bytes[first + 2 + name_len] = 7;
        assert!(matches!(decode_weights(&bytes), Err(Error::UnknownDtype(7))));
    }
}
