//! `.cfdata` binary container file: a header with symbol bindings plus
//! container names, dtypes and evaluated shapes, followed by little-endian
//! payloads in header order. Booleans are stored as one byte each.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::interp::{Buffer, ExecutionInput};
use crate::ir::{DType, Program};

const MAGIC: &[u8; 8] = b"CFDATA\x01\x00";

#[derive(Debug, Error)]
pub enum CfDataError {
    #[error("corrupt data file: {0}")]
    Corrupt(String),
    #[error("shape evaluation failed for `{0}`: {1}")]
    Shape(String, crate::symexpr::EvalError),
    #[error("buffer for `{name}` has {got} elements, header says {want}")]
    LengthMismatch { name: String, got: usize, want: usize },
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F64 => 0,
        DType::F32 => 1,
        DType::I64 => 2,
        DType::I32 => 3,
        DType::Bool => 4,
    }
}

fn tag_dtype(t: u8) -> Option<DType> {
    Some(match t {
        0 => DType::F64,
        1 => DType::F32,
        2 => DType::I64,
        3 => DType::I32,
        4 => DType::Bool,
        _ => return None,
    })
}

/// Encode an input with shapes evaluated against `program`'s descriptors.
pub fn write_cfdata(program: &Program, input: &ExecutionInput) -> Result<Vec<u8>, CfDataError> {
    let mut entries = Vec::new();
    for (name, buffer) in &input.buffers {
        let dims: Vec<u64> = match program.containers.get(name) {
            Some(desc) => desc
                .shape
                .iter()
                .map(|e| {
                    e.eval(&input.symbols)
                        .map(|v| v.max(0) as u64)
                        .map_err(|err| CfDataError::Shape(name.clone(), err))
                })
                .collect::<Result<_, _>>()?,
            None => vec![buffer.len() as u64],
        };
        let want: u64 = dims.iter().product();
        if want != buffer.len() as u64 {
            return Err(CfDataError::LengthMismatch {
                name: name.clone(),
                got: buffer.len(),
                want: want as usize,
            });
        }
        entries.push((name.clone(), dims, buffer));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(input.symbols.len() as u32).to_le_bytes());
    for (name, value) in &input.symbols {
        write_str(&mut out, name);
        out.extend_from_slice(&value.to_le_bytes());
    }
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, dims, buffer) in &entries {
        write_str(&mut out, name);
        out.push(dtype_tag(buffer.dtype()));
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    for (_, _, buffer) in &entries {
        match buffer {
            Buffer::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Buffer::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Buffer::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Buffer::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Buffer::Bool(v) => v.iter().for_each(|x| out.push(*x as u8)),
        }
    }
    Ok(out)
}

pub fn read_cfdata(bytes: &[u8]) -> Result<ExecutionInput, CfDataError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(CfDataError::Corrupt("bad magic".into()));
    }
    let nsyms = cur.u32()?;
    let mut symbols = BTreeMap::new();
    for _ in 0..nsyms {
        let name = cur.string()?;
        let value = i64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        symbols.insert(name, value);
    }
    let ncontainers = cur.u32()?;
    let mut headers = Vec::new();
    for _ in 0..ncontainers {
        let name = cur.string()?;
        let dtype = tag_dtype(cur.u8()?)
            .ok_or_else(|| CfDataError::Corrupt("unknown dtype tag".into()))?;
        let rank = cur.u32()?;
        let mut len: u64 = 1;
        for _ in 0..rank {
            let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            len = len.saturating_mul(d);
        }
        headers.push((name, dtype, len as usize));
    }
    let mut buffers = BTreeMap::new();
    for (name, dtype, len) in headers {
        let buffer = match dtype {
            DType::F64 => Buffer::F64(cur.vec(len, 8, |b| f64::from_le_bytes(b.try_into().unwrap()))?),
            DType::F32 => Buffer::F32(cur.vec(len, 4, |b| f32::from_le_bytes(b.try_into().unwrap()))?),
            DType::I64 => Buffer::I64(cur.vec(len, 8, |b| i64::from_le_bytes(b.try_into().unwrap()))?),
            DType::I32 => Buffer::I32(cur.vec(len, 4, |b| i32::from_le_bytes(b.try_into().unwrap()))?),
            DType::Bool => Buffer::Bool(cur.vec(len, 1, |b| b[0] != 0)?),
        };
        buffers.insert(name, buffer);
    }
    if cur.pos != bytes.len() {
        return Err(CfDataError::Corrupt("trailing bytes".into()));
    }
    Ok(ExecutionInput { symbols, buffers })
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CfDataError> {
        if self.pos + n > self.bytes.len() {
            return Err(CfDataError::Corrupt("truncated file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CfDataError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CfDataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CfDataError> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(CfDataError::Corrupt("implausible string length".into()));
        }
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CfDataError::Corrupt("bad utf-8".into()))
    }

    fn vec<T>(
        &mut self,
        len: usize,
        width: usize,
        decode: impl Fn(&[u8]) -> T,
    ) -> Result<Vec<T>, CfDataError> {
        let raw = self.take(len.saturating_mul(width))?;
        Ok(raw.chunks_exact(width).map(decode).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn round_trip_identity() {
        let fix = fixtures::matrix_chain();
        let mut symbols = BTreeMap::new();
        symbols.insert("N".to_string(), 2i64);
        let mut input = ExecutionInput::zeros(&fix.program, symbols).unwrap();
        input
            .buffers
            .insert("A".into(), Buffer::F64(vec![1.0, 2.5, -3.0, f64::NAN]));
        let bytes = write_cfdata(&fix.program, &input).unwrap();
        let back = read_cfdata(&bytes).unwrap();
        assert_eq!(back.symbols, input.symbols);
        assert_eq!(back.buffers.len(), input.buffers.len());
        // NaN payloads survive bit-exactly.
        let (Buffer::F64(a), Buffer::F64(b)) = (&input.buffers["A"], &back.buffers["A"]) else {
            unreachable!()
        };
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // Same input encodes to identical bytes.
        assert_eq!(bytes, write_cfdata(&fix.program, &back).unwrap());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let fix = fixtures::scalar_chain();
        let mut input = ExecutionInput::zeros(&fix.program, BTreeMap::new()).unwrap();
        input.buffers.insert("x".into(), Buffer::F64(vec![0.25]));
        let bytes = write_cfdata(&fix.program, &input).unwrap();
        for cut in [1, bytes.len() / 2, bytes.len() - 1] {
            assert!(read_cfdata(&bytes[..cut]).is_err());
        }
        let mut garbled = bytes.clone();
        garbled[0] ^= 0xff;
        assert!(read_cfdata(&garbled).is_err());
    }
}
