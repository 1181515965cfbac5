//! Little-endian named-array container shared by dataset and checkpoint files.
//!
//! Layout after the caller's own header: `count: u32`, then per array
//! `name_len: u32`, UTF-8 name, `dtype: u8`, `ndim: u32`, `ndim × u64` dims,
//! row-major payload.

use std::io::Write;

use crate::error::{Error, Result};

const DTYPE_F64: u8 = 0;
const DTYPE_U64: u8 = 1;
const DTYPE_UTF8: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Utf8(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<u64>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f64(name: impl Into<String>, shape: Vec<u64>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::F64(values),
        }
    }

    pub fn u64(name: impl Into<String>, values: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![values.len() as u64],
            data: ArrayData::U64(values),
        }
    }

    pub fn text(name: impl Into<String>, text: String) -> Self {
        Self {
            name: name.into(),
            shape: vec![text.len() as u64],
            data: ArrayData::Utf8(text),
        }
    }

    fn element_count(&self) -> usize {
        match &self.data {
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
            ArrayData::Utf8(s) => s.len(),
        }
    }
}

pub fn write_arrays<W: Write>(out: &mut W, arrays: &[NamedArray]) -> Result<()> {
    out.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        let expected: u64 = a.shape.iter().product();
        if expected as usize != a.element_count() {
            return Err(Error::InvalidArgument(format!(
                "array `{}` has shape {:?} but {} elements",
                a.name,
                a.shape,
                a.element_count()
            )));
        }
        out.write_all(&(a.name.len() as u32).to_le_bytes())?;
        out.write_all(a.name.as_bytes())?;
        let tag = match a.data {
            ArrayData::F64(_) => DTYPE_F64,
            ArrayData::U64(_) => DTYPE_U64,
            ArrayData::Utf8(_) => DTYPE_UTF8,
        };
        out.write_all(&[tag])?;
        out.write_all(&(a.shape.len() as u32).to_le_bytes())?;
        for d in &a.shape {
            out.write_all(&d.to_le_bytes())?;
        }
        match &a.data {
            ArrayData::F64(v) => {
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::U64(v) => {
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::Utf8(s) => out.write_all(s.as_bytes())?,
        }
    }
    Ok(())
}

/// Bounds-checked cursor over a byte buffer; every short read is a
/// [`Error::CorruptPayload`].
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::CorruptPayload(format!(
                    "needed {n} bytes at offset {}, only {} remain",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn read_arrays(reader: &mut Reader<'_>) -> Result<Vec<NamedArray>> {
    let count = reader.u32()?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let name_len = reader.u32()? as usize;
        let name = std::str::from_utf8(reader.take(name_len)?)
            .map_err(|e| Error::CorruptPayload(format!("array name is not UTF-8: {e}")))?
            .to_string();
        let tag = reader.u8()?;
        let ndim = reader.u32()? as usize;
        if ndim > 8 {
            return Err(Error::CorruptPayload(format!("array `{name}` claims {ndim} dims")));
        }
        let shape = (0..ndim).map(|_| reader.u64()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c <= reader.remaining() as u64)
            .ok_or_else(|| Error::CorruptPayload(format!("array `{name}` shape {shape:?} exceeds payload")))?
            as usize;
        let data = match tag {
            DTYPE_F64 => ArrayData::F64(
                reader
                    .take(count.checked_mul(8).ok_or_else(|| Error::CorruptPayload("overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DTYPE_U64 => ArrayData::U64(
                reader
                    .take(count.checked_mul(8).ok_or_else(|| Error::CorruptPayload("overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DTYPE_UTF8 => ArrayData::Utf8(
                std::str::from_utf8(reader.take(count)?)
                    .map_err(|e| Error::CorruptPayload(format!("array `{name}` is not UTF-8: {e}")))?
                    .to_string(),
            ),
            other => return Err(Error::CorruptPayload(format!("unknown dtype tag {other} in `{name}`"))),
        };
        arrays.push(NamedArray { name, shape, data });
    }
    if reader.remaining() != 0 {
        return Err(Error::CorruptPayload(format!("{} trailing bytes", reader.remaining())));
    }
    Ok(arrays)
}

/// Looks up an array by name, or fails with a corrupt-payload error.
pub fn find<'a>(arrays: &'a [NamedArray], name: &str) -> Result<&'a NamedArray> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::CorruptPayload(format!("missing array `{name}`")))
}

impl NamedArray {
    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            ArrayData::F64(v) => Ok(v),
            _ => Err(Error::CorruptPayload(format!("array `{}` is not f64", self.name))),
        }
    }

    pub fn as_u64(&self) -> Result<&[u64]> {
        match &self.data {
            ArrayData::U64(v) => Ok(v),
            _ => Err(Error::CorruptPayload(format!("array `{}` is not u64", self.name))),
        }
    }

    pub fn as_text(&self) -> Result<&str> {
        match &self.data {
            ArrayData::Utf8(s) => Ok(s),
            _ => Err(Error::CorruptPayload(format!("array `{}` is not text", self.name))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn arrays_round_trip(
            values in proptest::collection::vec(-1e6f64..1e6, 0..40),
            labels in proptest::collection::vec(0u64..100, 0..40),
            text in "[a-z{}\":,]{0,30}",
        ) {
            let arrays = vec![
                NamedArray::f64("x", vec![values.len() as u64], values),
                NamedArray::u64("labels", labels),
                NamedArray::text("meta", text),
            ];
            let mut buf = Vec::new();
            write_arrays(&mut buf, &arrays).unwrap();
            let back = read_arrays(&mut Reader::new(&buf)).unwrap();
            prop_assert_eq!(back, arrays);
        }
    }

    #[test]
    fn truncation_is_corrupt_payload() {
        let arrays = vec![NamedArray::f64("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])];
        let mut buf = Vec::new();
        write_arrays(&mut buf, &arrays).unwrap();
        for cut in 0..buf.len() {
            assert!(matches!(
                read_arrays(&mut Reader::new(&buf[..cut])),
                Err(Error::CorruptPayload(_))
            ));
        }
    }

    #[test]
    fn shape_must_match_payload() {
        let bad = NamedArray::f64("w", vec![3], vec![1.0]);
        assert!(write_arrays(&mut Vec::new(), &[bad]).is_err());
    }
}
