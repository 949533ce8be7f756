//! The CDIM model checkpoint.
//!
//! Layout (little-endian): `"CDIM"`, version `u32`, input dimension `u32`,
//! hidden dimension `u32`, dropout rate `f32`, dense weights (`d_h × d`,
//! row-major `f32`), dense bias (`d_h` `f32`), head count `u32`, then per
//! head its class count `K: u32`, `K` labels as `u32` byte length plus UTF-8
//! bytes, and `K × d_h` `f32` weights.
//!
//! Parameters are stored as `f32`, so a checkpoint of `f64` training state is
//! exact only for values representable in single precision.

use std::path::Path;

use cdi_core::encoder::{ClassifierHead, EncoderParams};
use cdi_core::linalg::Matrix;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDIM";
pub const VERSION: u32 = 1;

pub fn encode(params: &EncoderParams) -> Result<Vec<u8>> {
    params.validate()?;
    let mut out = Vec::new();
    let put_u32 = |out: &mut Vec<u8>, v: usize| -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit a u32 field")))?;
        out.extend_from_slice(&v.to_le_bytes());
        Ok(())
    };
    let put_f32s = |out: &mut Vec<u8>, xs: &[f64]| xs.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes()));
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, params.input_dim())?;
    put_u32(&mut out, params.hidden_dim())?;
    out.extend_from_slice(&(params.dropout_rate as f32).to_le_bytes());
    put_f32s(&mut out, params.w_dense.as_slice());
    put_f32s(&mut out, &params.b_dense);
    put_u32(&mut out, params.heads.len())?;
    for head in &params.heads {
        put_u32(&mut out, head.k())?;
        for label in &head.label_space {
            put_u32(&mut out, label.len())?;
            out.extend_from_slice(label.as_bytes());
        }
        put_f32s(&mut out, head.w.as_slice());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    name: &'a str,
}

impl Reader<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Binary {
            source_name: self.name.to_string(),
            offset: self.at as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(4).ok_or_else(|| self.err(format!("{what} length overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn decode(bytes: &[u8], name: &str) -> Result<EncoderParams> {
    let mut r = Reader { bytes, at: 0, name };
    if r.take(4, "magic")? != MAGIC {
        r.at = 0;
        return Err(r.err("bad magic, expected \"CDIM\""));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        r.at = 4;
        return Err(r.err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let d = r.u32("input dimension")?;
    let d_h = r.u32("hidden dimension")?;
    let dropout_rate = f32::from_le_bytes(r.take(4, "dropout rate")?.try_into().expect("4 bytes")) as f64;
    let w = r.f32s(d * d_h, "dense weights")?;
    let b_dense = r.f32s(d_h, "dense bias")?;
    let n_heads = r.u32("head count")?;
    let mut heads = Vec::new();
    for h in 0..n_heads {
        let k = r.u32("class count")?;
        let mut label_space = Vec::with_capacity(k.min(1 << 16));
        for _ in 0..k {
            let len = r.u32("label length")?;
            let start = r.at;
            let raw = r.take(len, "label")?.to_vec();
            let label = String::from_utf8(raw).map_err(|_| Error::Binary {
                source_name: name.to_string(),
                offset: start as u64,
                message: format!("label of head {h} is not UTF-8"),
            })?;
            label_space.push(label);
        }
        let hw = r.f32s(k * d_h, "head weights")?;
        heads.push(ClassifierHead {
            w: Matrix::from_vec(k, d_h, hw)?,
            label_space,
        });
    }
    if r.at != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    let params = EncoderParams {
        w_dense: Matrix::from_vec(d_h, d, w)?,
        b_dense,
        heads,
        dropout_rate,
    };
    params.validate()?;
    Ok(params)
}

pub fn write(path: &Path, params: &EncoderParams) -> Result<()> {
    std::fs::write(path, encode(params)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<EncoderParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
