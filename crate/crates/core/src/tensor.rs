//! Dense row-major tensors and the raw tensor file (RTF) container.
//!
//! RTF layout: the magic bytes `RTF1`, one `u8` holding the rank, `rank`
//! little-endian `u32` extents, then the row-major payload as little-endian
//! IEEE-754 32-bit floats.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar type used by every computation in the crate.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

pub const RTF_MAGIC: &[u8; 4] = b"RTF1";

/// An immutable N-dimensional array. Cloning and reshaping share the buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<Real>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expects {numel} elements, buffer holds {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Builds a tensor whose shape has already been validated by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Real>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: Real) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![value; n]))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: Real) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<Real>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> Real) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), (0..n).map(f).collect()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<Real> {
        self.data.as_ref().clone()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<Real> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::NonScalarRoot(self.shape.clone())),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Returns item `index` along the leading axis, keeping a leading extent of 1.
    pub fn slice_outer(&self, index: usize) -> Result<Self> {
        let outer = *self.shape.first().unwrap_or(&1);
        if index >= outer {
            return Err(Error::invalid(format!(
                "index {index} out of range for leading extent {outer}"
            )));
        }
        let inner = self.numel() / outer;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self::from_parts(
            shape,
            self.data[index * inner..(index + 1) * inner].to_vec(),
        ))
    }

    /// Concatenates tensors along the leading axis; trailing extents must agree.
    pub fn stack_outer(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack_outer: no tensors"))?;
        let mut outer = 0;
        let mut data = Vec::new();
        for t in parts {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    op: "stack_outer",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            outer += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Self::from_parts(shape, data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }

    pub fn write_rtf<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(RTF_MAGIC)?;
        w.write_all(&[self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in self.data.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Serialized size in bytes.
    pub fn rtf_len(&self) -> u64 {
        (4 + 1 + 4 * self.shape.len() + 4 * self.numel()) as u64
    }

    pub fn to_rtf_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.rtf_len() as usize);
        self.write_rtf(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Parses one RTF record from the front of `bytes`; `path` labels errors.
    pub fn from_rtf_bytes(bytes: &[u8], path: &Path) -> Result<(Self, usize)> {
        let truncated = |expected: usize| Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            found: bytes.len() as u64,
        };
        if bytes.len() < 5 {
            return Err(truncated(5));
        }
        if &bytes[..4] != RTF_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "bad RTF magic".into(),
            });
        }
        let ndim = bytes[4] as usize;
        let header = 5 + 4 * ndim;
        if bytes.len() < header {
            return Err(truncated(header));
        }
        let shape: Vec<usize> = bytes[5..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let numel = check_shape(&shape).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let total = header + 4 * numel;
        if bytes.len() < total {
            return Err(truncated(total));
        }
        let data = bytes[header..total]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
            .collect();
        Ok((Self::from_parts(shape, data), total))
    }

    pub fn save_rtf(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_rtf(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_rtf(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let (t, used) = Self::from_rtf_bytes(&bytes, path)?;
        if used != bytes.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("{} trailing bytes after tensor", bytes.len() - used),
            });
        }
        Ok(t)
    }
}
