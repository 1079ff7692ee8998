//! Single-file container of named little-endian arrays plus a config text.
//!
//! Layout:
//! ```text
//! magic "SYNTHSAE" | major u16 | minor u16
//! config_len u64 | config utf-8 | sha256(config) [32]
//! n_arrays u32
//! per array: name_len u16 | name | dtype u8 | ndim u8 | dims u64* | data
//! sha256(all array records) [32]
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SYNTHSAE";
pub const VERSION_MAJOR: u16 = 1;
pub const VERSION_MINOR: u16 = 0;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a model container")]
    NotAContainer,
    #[error("unsupported version {major}.{minor} (this build reads {VERSION_MAJOR}.x)")]
    UnsupportedVersion { major: u16, minor: u16 },
    #[error("truncated container")]
    Truncated,
    #[error("digest mismatch in {0}")]
    DigestMismatch(&'static str),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("missing array `{0}`")]
    Missing(String),
    #[error("array `{name}` has shape {found:?}, expected {expected}")]
    Shape {
        name: String,
        found: Vec<u64>,
        expected: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

type CResult<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl ArrayData {
    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 1,
            ArrayData::I32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub config: String,
    arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(config: impl Into<String>) -> Self {
        Self {
            config: config.into(),
            arrays: Vec::new(),
        }
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    fn push(&mut self, name: &str, dims: &[usize], data: ArrayData) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.arrays.retain(|a| a.name != name);
        self.arrays.push(NamedArray {
            name: name.to_string(),
            dims: dims.iter().map(|&d| d as u64).collect(),
            data,
        });
    }

    pub fn push_f32(&mut self, name: &str, dims: &[usize], data: Vec<f32>) {
        self.push(name, dims, ArrayData::F32(data));
    }

    pub fn push_i32(&mut self, name: &str, dims: &[usize], data: Vec<i32>) {
        self.push(name, dims, ArrayData::I32(data));
    }

    pub fn push_matrix(&mut self, name: &str, m: &Array2<f32>) {
        let data = m.as_standard_layout().iter().copied().collect();
        self.push_f32(name, &[m.nrows(), m.ncols()], data);
    }

    pub fn has(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    pub fn get(&self, name: &str) -> CResult<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    fn shape_err(a: &NamedArray, expected: &str) -> ContainerError {
        ContainerError::Shape {
            name: a.name.clone(),
            found: a.dims.clone(),
            expected: expected.to_string(),
        }
    }

    pub fn vec_f32(&self, name: &str) -> CResult<Vec<f32>> {
        let a = self.get(name)?;
        match (&a.data, a.dims.len()) {
            (ArrayData::F32(v), 1) => Ok(v.clone()),
            _ => Err(Self::shape_err(a, "1-d f32")),
        }
    }

    pub fn vec_i32(&self, name: &str) -> CResult<Vec<i32>> {
        let a = self.get(name)?;
        match (&a.data, a.dims.len()) {
            (ArrayData::I32(v), 1) => Ok(v.clone()),
            _ => Err(Self::shape_err(a, "1-d i32")),
        }
    }

    pub fn array1(&self, name: &str) -> CResult<Array1<f32>> {
        self.vec_f32(name).map(Array1::from)
    }

    pub fn matrix(&self, name: &str) -> CResult<Array2<f32>> {
        let a = self.get(name)?;
        match (&a.data, a.dims.as_slice()) {
            (ArrayData::F32(v), &[r, c]) => Array2::from_shape_vec((r as usize, c as usize), v.clone())
                .map_err(|e| ContainerError::Malformed(e.to_string())),
            _ => Err(Self::shape_err(a, "2-d f32")),
        }
    }

    pub fn config_digest(&self) -> String {
        hex(&Sha256::digest(self.config.as_bytes()))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> CResult<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION_MAJOR.to_le_bytes())?;
        w.write_all(&VERSION_MINOR.to_le_bytes())?;
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        w.write_all(&Sha256::digest(self.config.as_bytes()))?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        let mut hw = HashingWriter {
            inner: w,
            hasher: Sha256::new(),
        };
        let mut buf = Vec::with_capacity(1 << 16);
        for a in &self.arrays {
            let name = a.name.as_bytes();
            if name.len() > u16::MAX as usize || a.dims.len() > u8::MAX as usize {
                return Err(ContainerError::Malformed(format!("array `{}` header too large", a.name)));
            }
            hw.write_all(&(name.len() as u16).to_le_bytes())?;
            hw.write_all(name)?;
            hw.write_all(&[a.data.dtype(), a.dims.len() as u8])?;
            for d in &a.dims {
                hw.write_all(&d.to_le_bytes())?;
            }
            match &a.data {
                ArrayData::F32(v) => write_chunked(&mut hw, v, &mut buf, |x| x.to_le_bytes())?,
                ArrayData::I32(v) => write_chunked(&mut hw, v, &mut buf, |x| x.to_le_bytes())?,
            }
        }
        let digest = hw.hasher.finalize();
        w.write_all(&digest)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> CResult<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ContainerError::NotAContainer);
        }
        cur.pos = MAGIC.len();
        let major = u16::from_le_bytes(cur.take_array()?);
        let minor = u16::from_le_bytes(cur.take_array()?);
        if major != VERSION_MAJOR {
            return Err(ContainerError::UnsupportedVersion { major, minor });
        }
        let config_len = u64::from_le_bytes(cur.take_array()?) as usize;
        let config_bytes = cur.take(config_len)?;
        let stored: [u8; 32] = cur.take_array()?;
        if Sha256::digest(config_bytes).as_slice() != stored {
            return Err(ContainerError::DigestMismatch("config"));
        }
        let config = String::from_utf8(config_bytes.to_vec())
            .map_err(|_| ContainerError::Malformed("config is not utf-8".into()))?;
        let n_arrays = u32::from_le_bytes(cur.take_array()?) as usize;
        let payload_start = cur.pos;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let name_len = u16::from_le_bytes(cur.take_array()?) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| ContainerError::Malformed("array name is not utf-8".into()))?;
            let [dtype, ndim] = cur.take_array::<2>()?;
            let mut dims = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(cur.take_array()?));
            }
            let count = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .and_then(|c| usize::try_from(c).ok())
                .ok_or_else(|| ContainerError::Malformed(format!("array `{name}` is too large")))?;
            let raw = cur.take(count.checked_mul(4).ok_or(ContainerError::Truncated)?)?;
            let data = match dtype {
                1 => ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::I32(
                    raw.chunks_exact(4)
                        .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(ContainerError::Malformed(format!("unknown dtype {other}"))),
            };
            arrays.push(NamedArray { name, dims, data });
        }
        let payload = &bytes[payload_start..cur.pos];
        let stored: [u8; 32] = cur.take_array()?;
        if Sha256::digest(payload).as_slice() != stored {
            return Err(ContainerError::DigestMismatch("arrays"));
        }
        if cur.pos != bytes.len() {
            return Err(ContainerError::Malformed("trailing bytes after container".into()));
        }
        Ok(Self { config, arrays })
    }

    pub fn save(&self, path: &Path) -> CResult<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> CResult<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn write_chunked<W: Write, T: Copy>(
    w: &mut W,
    v: &[T],
    buf: &mut Vec<u8>,
    to_bytes: impl Fn(T) -> [u8; 4],
) -> std::io::Result<()> {
    for chunk in v.chunks(16 * 1024) {
        buf.clear();
        for &x in chunk {
            buf.extend_from_slice(&to_bytes(x));
        }
        w.write_all(buf)?;
    }
    Ok(())
}

struct HashingWriter<'a, W: Write> {
    inner: &'a mut W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<'_, W> {
    fn write(&mut self, data: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(data)?;
        self.hasher.update(&data[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> CResult<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated)?;
        if end > self.buf.len() {
            return Err(ContainerError::Truncated);
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn take_array<const K: usize>(&mut self) -> CResult<[u8; K]> {
        Ok(self.take(K)?.try_into().unwrap())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new("a = 1\n");
        c.push_f32("x", &[2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]);
        c.push_i32("p", &[3], vec![-1, 0, 7]);
        c
    }

    fn bytes(c: &Container) -> Vec<u8> {
        let mut out = Vec::new();
        c.write_to(&mut out).unwrap();
        out
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Container::from_bytes(&bytes(&c)).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.matrix("x").unwrap().dim(), (2, 3));
        assert_eq!(back.vec_i32("p").unwrap(), vec![-1, 0, 7]);
        assert!(matches!(back.matrix("nope"), Err(ContainerError::Missing(_))));
        assert!(matches!(back.vec_f32("x"), Err(ContainerError::Shape { .. })));
    }

    #[test]
    fn distinct_failures() {
        let good = bytes(&sample());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad_magic), Err(ContainerError::NotAContainer)));
        let mut newer = good.clone();
        newer[8..10].copy_from_slice(&(VERSION_MAJOR + 1).to_le_bytes());
        let err = Container::from_bytes(&newer).unwrap_err();
        assert!(err.to_string().contains("unsupported version"));
        assert!(matches!(
            Container::from_bytes(&good[..good.len() - 5]),
            Err(ContainerError::Truncated)
        ));
        let mut flipped = good.clone();
        let at = good.len() - 40;
        flipped[at] ^= 1;
        assert!(matches!(Container::from_bytes(&flipped), Err(ContainerError::DigestMismatch(_))));
        let mut cfg_flip = good;
        cfg_flip[20] ^= 1;
        assert!(matches!(
            Container::from_bytes(&cfg_flip),
            Err(ContainerError::DigestMismatch("config"))
        ));
    }

    proptest! {
        #[test]
        fn arbitrary_arrays_round_trip(
            rows in 0usize..6, cols in 0usize..6,
            vals in proptest::collection::vec(any::<u32>(), 36),
            cfg in "[a-z =0-9\n]{0,40}"
        ) {
            let mut c = Container::new(cfg);
            let data: Vec<f32> = vals[..rows * cols].iter().map(|&b| f32::from_bits(b)).collect();
            c.push_f32("m", &[rows, cols], data);
            c.push_i32("i", &[rows], vals[..rows].iter().map(|&v| v as i32).collect());
            let back = Container::from_bytes(&bytes(&c)).unwrap();
            // compare bit patterns so NaN payloads count as equal
            prop_assert_eq!(back.config.clone(), c.config.clone());
            for (a, b) in back.arrays().iter().zip(c.arrays()) {
                prop_assert_eq!(&a.dims, &b.dims);
                match (&a.data, &b.data) {
                    (ArrayData::F32(x), ArrayData::F32(y)) => {
                        prop_assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
                    }
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
        }
    }
}
