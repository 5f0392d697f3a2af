//! Binary tensor dump format shared by every module for feature and probe
//! I/O, plus the named-tensor container used by checkpoints.
//!
//! Single tensor ("SERT"):
//!   magic "SERT" | version u16 | dtype u8 (0 = f32, 1 = f64) | rank u8 |
//!   dims u32 x rank | row-major payload
//! All integers and floats little-endian.
//!
//! Container ("SERC"):
//!   magic "SERC" | version u16 | manifest_len u32 | manifest UTF-8 bytes |
//!   n_tensors u32 | { name_len u16 | name UTF-8 | SERT blob } x n

use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::scalar::Scalar;

pub const SERT_MAGIC: &[u8; 4] = b"SERT";
pub const SERC_MAGIC: &[u8; 4] = b"SERC";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug)]
pub enum IoError {
    Io(io::Error),
    BadMagic { expected: &'static str, path: String },
    BadVersion(u16),
    BadDtype(u8),
    Truncated(String),
    BadUtf8(String),
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::Io(e) => write!(f, "io error: {e}"),
            IoError::BadMagic { expected, path } => {
                write!(f, "{path}: bad magic, expected {expected}")
            }
            IoError::BadVersion(v) => write!(f, "unsupported format version {v}"),
            IoError::BadDtype(d) => write!(f, "unknown dtype code {d}"),
            IoError::Truncated(what) => write!(f, "truncated input while reading {what}"),
            IoError::BadUtf8(what) => write!(f, "invalid utf-8 in {what}"),
        }
    }
}

impl std::error::Error for IoError {}

impl From<io::Error> for IoError {
    fn from(e: io::Error) -> Self {
        IoError::Io(e)
    }
}

/// A tensor detached from any tape: shape plus raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> RawTensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        RawTensor { shape, data }
    }
}

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &RawTensor<S>) -> Result<(), IoError> {
    w.write_all(SERT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[S::DTYPE_CODE, t.shape.len() as u8])?;
    for d in &t.shape {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in &t.data {
        w.write_all(&v.to_le_bytes_vec())?;
    }
    Ok(())
}

pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<RawTensor<S>, IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| IoError::Truncated("magic".into()))?;
    if &magic != SERT_MAGIC {
        return Err(IoError::BadMagic {
            expected: "SERT",
            path: String::new(),
        });
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)
        .map_err(|_| IoError::Truncated("version".into()))?;
    let version = u16::from_le_bytes(buf2);
    if version != FORMAT_VERSION {
        return Err(IoError::BadVersion(version));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)
        .map_err(|_| IoError::Truncated("dtype/rank".into()))?;
    let (dtype, rank) = (hdr[0], hdr[1] as usize);
    if dtype != S::DTYPE_CODE {
        return Err(IoError::BadDtype(dtype));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| IoError::Truncated("dims".into()))?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let width = S::ZERO.to_le_bytes_vec().len();
    let mut payload = vec![0u8; n * width];
    r.read_exact(&mut payload)
        .map_err(|_| IoError::Truncated("payload".into()))?;
    let data = payload.chunks(width).map(S::from_le_slice).collect();
    Ok(RawTensor { shape, data })
}

pub fn write_tensor_file<S: Scalar>(path: &Path, t: &RawTensor<S>) -> Result<(), IoError> {
    let mut f = File::create(path)?;
    write_tensor(&mut f, t)
}

pub fn read_tensor_file<S: Scalar>(path: &Path) -> Result<RawTensor<S>, IoError> {
    let mut f = File::open(path)?;
    read_tensor(&mut f).map_err(|e| match e {
        IoError::BadMagic { expected, .. } => IoError::BadMagic {
            expected,
            path: path.display().to_string(),
        },
        other => other,
    })
}

/// Named-tensor container with a text manifest. Checkpoints are one of these.
#[derive(Debug, Clone, PartialEq)]
pub struct Container<S> {
    pub manifest: String,
    pub tensors: Vec<(String, RawTensor<S>)>,
}

pub fn write_container<S: Scalar, W: Write>(w: &mut W, c: &Container<S>) -> Result<(), IoError> {
    w.write_all(SERC_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let mbytes = c.manifest.as_bytes();
    w.write_all(&(mbytes.len() as u32).to_le_bytes())?;
    w.write_all(mbytes)?;
    w.write_all(&(c.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &c.tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_container<S: Scalar, R: Read>(r: &mut R) -> Result<Container<S>, IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| IoError::Truncated("magic".into()))?;
    if &magic != SERC_MAGIC {
        return Err(IoError::BadMagic {
            expected: "SERC",
            path: String::new(),
        });
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)
        .map_err(|_| IoError::Truncated("version".into()))?;
    let version = u16::from_le_bytes(b2);
    if version != FORMAT_VERSION {
        return Err(IoError::BadVersion(version));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| IoError::Truncated("manifest length".into()))?;
    let mlen = u32::from_le_bytes(b4) as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes)
        .map_err(|_| IoError::Truncated("manifest".into()))?;
    let manifest =
        String::from_utf8(mbytes).map_err(|_| IoError::BadUtf8("manifest".into()))?;
    r.read_exact(&mut b4)
        .map_err(|_| IoError::Truncated("tensor count".into()))?;
    let n = u32::from_le_bytes(b4) as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b2)
            .map_err(|_| IoError::Truncated("name length".into()))?;
        let nlen = u16::from_le_bytes(b2) as usize;
        let mut nbytes = vec![0u8; nlen];
        r.read_exact(&mut nbytes)
            .map_err(|_| IoError::Truncated("name".into()))?;
        let name =
            String::from_utf8(nbytes).map_err(|_| IoError::BadUtf8("tensor name".into()))?;
        tensors.push((name, read_tensor(r)?));
    }
    Ok(Container { manifest, tensors })
}

pub fn write_container_file<S: Scalar>(path: &Path, c: &Container<S>) -> Result<(), IoError> {
    // atomic write: temp file then rename
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        write_container(&mut f, c)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container_file<S: Scalar>(path: &Path) -> Result<Container<S>, IoError> {
    let mut f = File::open(path)?;
    read_container(&mut f)
}

/// Read only a container's manifest (header + text section), leaving the
/// tensor payload untouched; lets callers pick a dtype before a full read.
pub fn read_container_manifest(path: &Path) -> Result<String, IoError> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| IoError::Truncated("magic".into()))?;
    if &magic != SERC_MAGIC {
        return Err(IoError::BadMagic {
            expected: "SERC",
            path: path.display().to_string(),
        });
    }
    let mut b2 = [0u8; 2];
    f.read_exact(&mut b2)
        .map_err(|_| IoError::Truncated("version".into()))?;
    if u16::from_le_bytes(b2) != FORMAT_VERSION {
        return Err(IoError::BadVersion(u16::from_le_bytes(b2)));
    }
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)
        .map_err(|_| IoError::Truncated("manifest length".into()))?;
    let mlen = u32::from_le_bytes(b4) as usize;
    let mut mbytes = vec![0u8; mlen];
    f.read_exact(&mut mbytes)
        .map_err(|_| IoError::Truncated("manifest".into()))?;
    String::from_utf8(mbytes).map_err(|_| IoError::BadUtf8("manifest".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn tensor_roundtrip_f32_and_f64() {
        let mut rng = Rng::from_seed(1);
        let t64 = RawTensor::new(vec![2, 3], (0..6).map(|_| rng.normal()).collect());
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t64).unwrap();
        let back: RawTensor<f64> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t64);

        let t32 = RawTensor::new(vec![4], vec![1.0f32, -2.5, 3.25, 0.0]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t32).unwrap();
        let back: RawTensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t32);
    }

    #[test]
    fn header_layout_is_stable() {
        let t = RawTensor::new(vec![1, 2], vec![0.0f32, 0.0]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..4], b"SERT");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1); // version
        assert_eq!(buf[6], 0); // f32 dtype code
        assert_eq!(buf[7], 2); // rank
        assert_eq!(u32::from_le_bytes([buf[8], buf[9], buf[10], buf[11]]), 1);
        assert_eq!(u32::from_le_bytes([buf[12], buf[13], buf[14], buf[15]]), 2);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let t = RawTensor::new(vec![1], vec![1.0f32]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let res: Result<RawTensor<f64>, _> = read_tensor(&mut buf.as_slice());
        assert!(matches!(res, Err(IoError::BadDtype(0))));
    }

    #[test]
    fn container_roundtrip() {
        let c = Container {
            manifest: "step = 7\nseed = 42\n".to_string(),
            tensors: vec![
                ("w".to_string(), RawTensor::new(vec![2], vec![1.0f64, 2.0])),
                ("b".to_string(), RawTensor::new(vec![1], vec![-3.0f64])),
            ],
        };
        let mut buf = Vec::new();
        write_container(&mut buf, &c).unwrap();
        let back: Container<f64> = read_container(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);
    }
}
