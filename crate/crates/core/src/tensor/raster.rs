//! Portable raster format shared by weights, attribution maps and images.
//!
//! A record is one line of JSON, `{"dtype":"f32"|"f64","shape":[...]}`,
//! terminated by `\n`, followed by `product(shape)` little-endian values in
//! row-major order. Records can be concatenated in one stream.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

pub fn write_raster<W: Write>(mut out: W, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let header = Header { dtype, shape: tensor.shape().to_vec() };
    let line = serde_json::to_string(&header).map_err(|e| TensorError::MalformedHeader(e.to_string()))?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(tensor.numel() * dtype.width());
    match dtype {
        Dtype::F64 => tensor.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => tensor.data().iter().for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads one record. `Ok(None)` signals a clean end of stream before any
/// header byte.
pub fn read_raster_opt<R: BufRead>(input: &mut R) -> Result<Option<Tensor>> {
    let mut line = Vec::new();
    let n = input.read_until(b'\n', &mut line)?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        return Err(TensorError::MalformedHeader("header is not newline-terminated".into()));
    }
    line.pop();
    let header: Header = serde_json::from_slice(&line).map_err(|e| TensorError::MalformedHeader(e.to_string()))?;
    let count: usize = header.shape.iter().product();
    let expected = count * header.dtype.width();
    let mut payload = Vec::with_capacity(expected);
    input.take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(TensorError::PayloadLength { expected, actual: payload.len() });
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    };
    Tensor::new(header.shape, data).map(Some)
}

pub fn read_raster<R: BufRead>(input: &mut R) -> Result<Tensor> {
    read_raster_opt(input)?.ok_or_else(|| TensorError::MalformedHeader("empty stream".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_compact_json() {
        let mut buf = Vec::new();
        write_raster(&mut buf, &Tensor::zeros([2, 3]), Dtype::F64).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&buf[..nl], br#"{"dtype":"f64","shape":[2,3]}"#);
        assert_eq!(buf.len(), nl + 1 + 48);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut buf = Vec::new();
        write_raster(&mut buf, &Tensor::full([4], 1.5), Dtype::F32).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_raster(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, TensorError::PayloadLength { expected: 16, actual: 13 }));
    }

    #[test]
    fn garbage_header_is_rejected() {
        let err = read_raster(&mut &b"{\"dtype\":\"f16\",\"shape\":[1]}\n\0\0"[..]).unwrap_err();
        assert!(matches!(err, TensorError::MalformedHeader(_)));
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bitwise(values in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let t = Tensor::new([values.len()], values).unwrap();
            let mut buf = Vec::new();
            write_raster(&mut buf, &t, Dtype::F64).unwrap();
            write_raster(&mut buf, &t, Dtype::F64).unwrap();
            let mut r = buf.as_slice();
            prop_assert_eq!(read_raster(&mut r).unwrap(), t.clone());
            prop_assert_eq!(read_raster(&mut r).unwrap(), t);
            prop_assert!(read_raster_opt(&mut r).unwrap().is_none());
        }
    }
}
