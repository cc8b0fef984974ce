//! On-disk tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   magic  b"PATC"
//! offset 4   u16    format version, currently 1
//! offset 6   u8     dtype: 0 = f32, 1 = f64, 2 = u8
//! offset 7   u8     ndim, 1..=8
//! offset 8   u32 x ndim   dims, each >= 1
//! then       payload, row-major element stream
//! ```
//!
//! A 3-d header is 20 bytes; a 26x128x128 f32 cube carries a
//! 1_703_936-byte payload. Read errors report the byte offset at which
//! the file stopped making sense.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{CoreError, Result};

pub const MAGIC: [u8; 4] = *b"PATC";
pub const FORMAT_VERSION: u16 = 1;
pub const MAX_NDIM: usize = 8;

/// A tensor with its element type made explicit for serialization.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    U8(ArrayD<u8>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::F64(a) => a.shape(),
            TensorData::U8(a) => a.shape(),
        }
    }

    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    pub fn as_f32(&self) -> Result<&ArrayD<f32>> {
        match self {
            TensorData::F32(a) => Ok(a),
            other => Err(CoreError::invalid(
                "tensor dtype",
                format!("expected f32, found {}", other.dtype_name()),
            )),
        }
    }

    pub fn as_f64(&self) -> Result<&ArrayD<f64>> {
        match self {
            TensorData::F64(a) => Ok(a),
            other => Err(CoreError::invalid(
                "tensor dtype",
                format!("expected f64, found {}", other.dtype_name()),
            )),
        }
    }

    pub fn as_u8(&self) -> Result<&ArrayD<u8>> {
        match self {
            TensorData::U8(a) => Ok(a),
            other => Err(CoreError::invalid(
                "tensor dtype",
                format!("expected u8, found {}", other.dtype_name()),
            )),
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::U8(_) => "u8",
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_NDIM {
        return Err(CoreError::invalid(
            "tensor shape",
            format!("ndim {} outside 1..={MAX_NDIM}", shape.len()),
        ));
    }
    for &d in shape {
        if d == 0 {
            return Err(CoreError::invalid("tensor shape", "zero-length dimension"));
        }
        if d > u32::MAX as usize {
            return Err(CoreError::invalid(
                "tensor shape",
                format!("dimension {d} exceeds u32 range"),
            ));
        }
    }
    Ok(())
}

/// Serializes a tensor into `w`.
pub fn write_tensor_to(w: &mut impl Write, tensor: &TensorData) -> Result<()> {
    let shape = tensor.shape();
    check_shape(shape)?;
    let io = |e: std::io::Error| CoreError::Format {
        offset: 0,
        reason: format!("write failed: {e}"),
    };
    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&[tensor.dtype_code(), shape.len() as u8])
        .map_err(io)?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
    }
    // Row-major element stream. `iter()` follows logical order for any
    // layout, so no standardization copy is needed.
    match tensor {
        TensorData::F32(a) => {
            let mut buf = Vec::with_capacity(a.len() * 4);
            for v in a.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        TensorData::F64(a) => {
            let mut buf = Vec::with_capacity(a.len() * 8);
            for v in a.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        TensorData::U8(a) => {
            let buf: Vec<u8> = a.iter().copied().collect();
            w.write_all(&buf).map_err(io)?;
        }
    }
    Ok(())
}

struct Offset<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Offset<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.pos;
        self.inner.read_exact(buf).map_err(|e| CoreError::Format {
            offset: at,
            reason: format!("{what}: {e}"),
        })?;
        self.pos += buf.len() as u64;
        Ok(())
    }
}

/// Deserializes a tensor from `r`, rejecting trailing bytes.
pub fn read_tensor_from(r: &mut impl Read) -> Result<TensorData> {
    let mut r = Offset { inner: r, pos: 0 };

    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "truncated magic")?;
    if magic != MAGIC {
        return Err(CoreError::Format {
            offset: 0,
            reason: format!("bad magic {magic:02x?}, expected \"PATC\""),
        });
    }

    let mut ver = [0u8; 2];
    r.read_exact_at(&mut ver, "truncated version")?;
    let version = u16::from_le_bytes(ver);
    if version != FORMAT_VERSION {
        return Err(CoreError::Format {
            offset: 4,
            reason: format!("unsupported format version {version}"),
        });
    }

    let mut head = [0u8; 2];
    r.read_exact_at(&mut head, "truncated dtype/ndim")?;
    let (dtype, ndim) = (head[0], head[1] as usize);
    if dtype > 2 {
        return Err(CoreError::Format {
            offset: 6,
            reason: format!("unknown dtype code {dtype}"),
        });
    }
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(CoreError::Format {
            offset: 7,
            reason: format!("ndim {ndim} outside 1..={MAX_NDIM}"),
        });
    }

    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = r.pos;
        let mut d = [0u8; 4];
        r.read_exact_at(&mut d, "truncated dims")?;
        let d = u32::from_le_bytes(d);
        if d == 0 {
            return Err(CoreError::Format {
                offset: at,
                reason: format!("dimension {i} is zero"),
            });
        }
        shape.push(d as usize);
    }

    let count = shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d).ok_or(CoreError::Format {
            offset: 8,
            reason: "element count overflows usize".into(),
        })
    })?;

    let elem = match dtype {
        0 => 4,
        1 => 8,
        _ => 1,
    };
    let mut payload = vec![0u8; count * elem];
    r.read_exact_at(&mut payload, "truncated payload")?;

    // Anything after the payload is a malformed file, not padding.
    let end = r.pos;
    let mut probe = [0u8; 1];
    match r.inner.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(CoreError::Format {
                offset: end,
                reason: "trailing bytes after payload".into(),
            });
        }
        Err(e) => {
            return Err(CoreError::Format {
                offset: end,
                reason: format!("read failed: {e}"),
            });
        }
    }

    let dyn_shape = IxDyn(&shape);
    Ok(match dtype {
        0 => {
            let vals: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TensorData::F32(ArrayD::from_shape_vec(dyn_shape, vals).unwrap())
        }
        1 => {
            let vals: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TensorData::F64(ArrayD::from_shape_vec(dyn_shape, vals).unwrap())
        }
        _ => TensorData::U8(ArrayD::from_shape_vec(dyn_shape, payload).unwrap()),
    })
}

pub fn write_tensor(path: &Path, tensor: &TensorData) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, tensor)?;
    w.flush().map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<TensorData> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    read_tensor_from(&mut r).map_err(|e| match e {
        // Keep the offset but name the file for context.
        CoreError::Format { offset, reason } => CoreError::Format {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn roundtrip(t: &TensorData) -> TensorData {
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, t).unwrap();
        read_tensor_from(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn header_bytes_for_2x3_f32() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0f32; 6]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &TensorData::F32(a)).unwrap();
        assert_eq!(&buf[0..4], b"PATC");
        assert_eq!(&buf[4..6], &[1, 0]); // version 1 LE
        assert_eq!(buf[6], 0); // f32
        assert_eq!(buf[7], 2); // ndim
        assert_eq!(&buf[8..12], &[2, 0, 0, 0]);
        assert_eq!(&buf[12..16], &[3, 0, 0, 0]);
        assert_eq!(buf.len(), 16 + 6 * 4);
    }

    #[test]
    fn cube_sized_file_has_expected_length() {
        let a = ArrayD::from_elem(IxDyn(&[26, 128, 128]), 0.5f32);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &TensorData::F32(a)).unwrap();
        // 20-byte header for ndim 3, then 26*128*128*4 payload bytes.
        assert_eq!(buf.len(), 20 + 1_703_936);
    }

    #[test]
    fn roundtrips_all_dtypes() {
        let f32s = ArrayD::from_shape_vec(
            IxDyn(&[2, 2, 3]),
            (0..12).map(|i| i as f32 * 0.25 - 1.0).collect(),
        )
        .unwrap();
        let f64s =
            ArrayD::from_shape_vec(IxDyn(&[5]), vec![1.5, -2.25, 0.0, f64::MIN, f64::MAX]).unwrap();
        let u8s = ArrayD::from_shape_vec(IxDyn(&[3, 2]), vec![0u8, 1, 2, 253, 254, 255]).unwrap();
        for t in [
            TensorData::F32(f32s),
            TensorData::F64(f64s),
            TensorData::U8(u8s),
        ] {
            assert_eq!(roundtrip(&t), t);
        }
    }

    #[test]
    fn roundtrips_non_standard_layout() {
        let a = ArrayD::from_shape_vec(IxDyn(&[3, 4]), (0..12).map(|i| i as f32).collect())
            .unwrap()
            .reversed_axes();
        let t = TensorData::F32(a.clone());
        assert_eq!(roundtrip(&t), t);
        assert_eq!(t.shape(), &[4, 3]);
    }

    #[test]
    fn errors_carry_offsets() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1f32, 2.0, 3.0, 4.0]).unwrap();
        let mut good = Vec::new();
        write_tensor_to(&mut good, &TensorData::F32(a)).unwrap();

        let expect_offset = |bytes: &[u8], offset: u64| {
            match read_tensor_from(&mut &bytes[..]) {
                Err(CoreError::Format { offset: o, .. }) => assert_eq!(o, offset),
                other => panic!("expected format error at {offset}, got {other:?}"),
            };
        };

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        expect_offset(&bad_magic, 0);

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        expect_offset(&bad_version, 4);

        let mut bad_dtype = good.clone();
        bad_dtype[6] = 3;
        expect_offset(&bad_dtype, 6);

        let mut bad_ndim = good.clone();
        bad_ndim[7] = 0;
        expect_offset(&bad_ndim, 7);

        let mut zero_dim = good.clone();
        zero_dim[12..16].copy_from_slice(&[0, 0, 0, 0]);
        expect_offset(&zero_dim, 12);

        let truncated = &good[..good.len() - 1];
        assert!(matches!(
            read_tensor_from(&mut &truncated[..]),
            Err(CoreError::Format { .. })
        ));

        let mut trailing = good.clone();
        trailing.push(0);
        expect_offset(&trailing, good.len() as u64);
    }

    #[test]
    fn write_rejects_zero_dims() {
        let a = ArrayD::<f32>::zeros(IxDyn(&[2, 0]));
        let mut buf = Vec::new();
        assert!(write_tensor_to(&mut buf, &TensorData::F32(a)).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.patc");
        let t = TensorData::U8(ArrayD::from_shape_vec(IxDyn(&[4]), vec![9, 8, 7, 6]).unwrap());
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        assert!(read_tensor(&dir.path().join("missing.patc")).is_err());
    }
}
