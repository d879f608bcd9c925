//! Dense row-major tensors and the `DPET` binary tensor format.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 4;

/// Ordered tensor extents, at most four of them (N, C, H, W for images).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; MAX_RANK],
    rank: u8,
}

impl Shape {
    /// Every extent must be at least 1, with one exception: the channel axis of
    /// a rank-4 shape may be 0, which is how an empty feature map is written.
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::InvalidArgument(format!(
                "rank {} exceeds the maximum of {MAX_RANK}",
                dims.len()
            )));
        }
        for (axis, &d) in dims.iter().enumerate() {
            let empty_channels = dims.len() == 4 && axis == 1 && d == 0;
            if d == 0 && !empty_channels {
                return Err(Error::InvalidArgument(format!(
                    "extent {axis} of {dims:?} is zero"
                )));
            }
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidArgument(format!("element count of {dims:?} overflows")))?;
        let mut out = [1usize; MAX_RANK];
        out[..dims.len()].copy_from_slice(dims);
        Ok(Shape {
            dims: out,
            rank: dims.len() as u8,
        })
    }

    pub fn scalar() -> Self {
        Shape {
            dims: [1; MAX_RANK],
            rank: 0,
        }
    }

    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Shape::new(&[n, c, h, w])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// (N, C, H, W) of a rank-4 shape.
    pub fn nchw_dims(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.dims() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, format!("expected a rank-4 NCHW tensor, got {self}"))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.dims().iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Immutable dense tensor. Cloning is cheap: the buffer is reference counted.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<[T]>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor_new",
                format!("{} values for shape {shape} ({} elements)", data.len(), shape.numel()),
            ));
        }
        let t = Tensor {
            shape,
            data: data.into(),
        };
        t.ensure_finite("tensor_new")?;
        Ok(t)
    }

    pub fn from_slice(dims: &[usize], data: &[T]) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, data.to_vec())
    }

    pub fn full(shape: Shape, value: T) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "tensor_new" });
        }
        Ok(Self::filled(shape, value))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::filled(shape, T::one())
    }

    pub fn scalar(value: T) -> Result<Self> {
        Tensor::full(Shape::scalar(), value)
    }

    fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()].into(),
        }
    }

    /// Builds a tensor from an already validated buffer, checking finiteness
    /// on behalf of `op`.
    pub(crate) fn from_op(op: &'static str, shape: Shape, data: Vec<T>) -> Result<Self> {
        debug_assert_eq!(data.len(), shape.numel());
        let t = Tensor {
            shape,
            data: data.into(),
        };
        t.ensure_finite(op)?;
        Ok(t)
    }

    /// Same as [`from_op`](Self::from_op) without the finiteness scan.
    pub(crate) fn from_vec_unchecked(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor {
            shape,
            data: data.into(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("tensor of shape {} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Tensor::from_op("map", self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::shape("reshape", format!("{} -> {shape}", self.shape)));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Elementwise sum without recording anything on a graph.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("add", format!("{} vs {}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a + b).collect();
        Tensor::from_op("add", self.shape, data)
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        self.map(|v| v * factor)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// Channels `[start, end)` of an NCHW tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let (n, c, h, w) = self.shape.nchw_dims("slice_channels")?;
        if start > end || end > c {
            return Err(Error::shape("slice_channels", format!("range {start}..{end} of {c} channels")));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            let base = b * c * plane;
            out.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Tensor::from_vec_unchecked(Shape::nchw(n, end - start, h, w)?, out))
    }

    /// Batch items `[start, end)` of an NCHW tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let (n, c, h, w) = self.shape.nchw_dims("slice_batch")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_batch", format!("range {start}..{end} of batch {n}")));
        }
        let item = c * h * w;
        Ok(Tensor::from_vec_unchecked(
            Shape::nchw(end - start, c, h, w)?,
            self.data[start * item..end * item].to_vec(),
        ))
    }

    /// Stacks per-sample `(C, H, W)` or `(1, C, H, W)` tensors into one batch.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack an empty list".into()))?;
        let (c, h, w) = match *first.dims() {
            [c, h, w] | [1, c, h, w] => (c, h, w),
            _ => return Err(Error::shape("stack", format!("cannot stack tensors of shape {}", first.shape))),
        };
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            let same = matches!(*t.dims(), [tc, th, tw] | [1, tc, th, tw] if (tc, th, tw) == (c, h, w));
            if !same {
                return Err(Error::shape("stack", format!("{} vs {}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_vec_unchecked(Shape::nchw(items.len(), c, h, w)?, data))
    }

    /// Converts element type, e.g. an `f32` tensor to `f64` for gradient checks.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Serializes as a `DPET` record: magic, version 1, dtype code, rank,
    /// little-endian u32 extents, then the little-endian payload.
    pub fn write_dpet<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 4 * MAX_RANK + self.numel() * T::BYTES);
        self.encode_dpet(&mut buf);
        out.write_all(&buf).map_err(|e| Error::io("<stream>", e))
    }

    pub(crate) fn encode_dpet(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(DPET_MAGIC);
        buf.push(DPET_VERSION);
        buf.push(T::DTYPE_CODE);
        buf.push(self.shape.rank);
        for &d in self.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in self.data.iter() {
            v.write_le(buf);
        }
    }

    pub fn read_dpet<R: Read>(input: &mut R) -> Result<Self> {
        let mut header = [0u8; 7];
        read_exact(input, &mut header)?;
        if &header[..4] != DPET_MAGIC {
            return Err(Error::Corrupt("bad DPET magic".into()));
        }
        if header[4] != DPET_VERSION {
            return Err(Error::Unsupported(format!("DPET version {}", header[4])));
        }
        if header[5] != T::DTYPE_CODE {
            return Err(Error::Unsupported(format!(
                "DPET dtype code {} (expected {})",
                header[5],
                T::DTYPE_CODE
            )));
        }
        let rank = header[6] as usize;
        if rank > MAX_RANK {
            return Err(Error::Corrupt(format!("DPET rank {rank}")));
        }
        let mut dims = [0usize; MAX_RANK];
        for d in dims.iter_mut().take(rank) {
            let mut b = [0u8; 4];
            read_exact(input, &mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let shape = Shape::new(&dims[..rank]).map_err(|e| Error::Corrupt(format!("DPET shape: {e}")))?;
        let mut payload = vec![0u8; shape.numel() * T::BYTES];
        read_exact(input, &mut payload)?;
        let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Tensor {
            shape,
            data: Arc::from(Vec::into_boxed_slice(data)),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.encode_dpet(&mut buf);
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cursor = bytes.as_slice();
        let t = Tensor::read_dpet(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes after DPET record", cursor.len())));
        }
        Ok(t)
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

const DPET_MAGIC: &[u8; 4] = b"DPET";
const DPET_VERSION: u8 = 1;

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt("truncated DPET record".into()),
        _ => Error::io("<stream>", e),
    })
}
