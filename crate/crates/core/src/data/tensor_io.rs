//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | field                          |
//! |--------------|--------------------------------|
//! | 4            | magic `ACTN`                   |
//! | 4            | version `u32` = 1              |
//! | 1            | dtype `u8` = 2 (f64)           |
//! | 1            | ndim `u8`                      |
//! | 4 × ndim     | dims, `u32` each               |
//! | 8 × Πdims    | row-major `f64` payload        |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACTN";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 2;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let ndim =
        u8::try_from(t.ndim()).map_err(|_| Error::usage(format!("too many dims: {}", t.ndim())))?;
    let mut out = Vec::with_capacity(10 + 4 * t.ndim() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(ndim);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::usage(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(
                field,
                format!(
                    "truncated: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn err(&self, field: &'static str, detail: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            field,
            detail,
        }
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(r.err("magic", format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(r.err("version", format!("unsupported version {version}")));
    }
    let dtype = r.take(1, "dtype")?[0];
    if dtype != DTYPE_F64 {
        return Err(r.err("dtype", format!("unsupported dtype {dtype}")));
    }
    let ndim = r.take(1, "ndim")?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u32::from_le_bytes(r.take(4, "dims")?.try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(r.err("dims", "zero extent".into()));
        }
        dims.push(d);
    }
    let count: usize = dims.iter().product();
    let payload = r.take(count * 8, "payload")?;
    if r.pos != bytes.len() {
        return Err(r.err("payload", format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
