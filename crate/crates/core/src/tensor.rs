//! Dense row-major f64 tensors and the handful of numeric kernels the rest
//! of the crate is built on.
//!
//! Tensors serialize to a small self-describing binary format: an 8-byte
//! magic, a little-endian u32 rank, one little-endian u64 extent per axis,
//! then the values as little-endian f64 words in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic prefix of the tensor binary format.
pub const TENSOR_MAGIC: &[u8; 8] = b"XGAPTNSR";

/// Dense row-major tensor of f64 values. Every axis extent is at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Wraps `data` in a tensor of the given shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument {
                op: "Tensor::new",
                reason: format!("extents must be positive, got {shape:?}"),
            });
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidArgument {
                op: "Tensor::new",
                reason: format!("shape {shape:?} needs {len} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor. Panics on an invalid shape; shapes here are
    /// programmer-supplied, not data-dependent.
    pub fn zeros(shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        assert!(!shape.is_empty() && shape.iter().all(|&e| e > 0), "invalid shape {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Interprets the tensor as a matrix, returning (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidArgument {
                op: "Tensor::dims2",
                reason: format!("expected rank 2, got shape {:?}", self.shape),
            }),
        }
    }

    /// Number of values in one slice along the first axis.
    pub fn item_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Values of the i-th slice along the first axis.
    pub fn item(&self, i: usize) -> &[f64] {
        let w = self.item_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Copies the i-th first-axis slice out as its own tensor. A rank-1
    /// source yields a single-element rank-1 tensor.
    pub fn item_tensor(&self, i: usize) -> Tensor {
        let shape = if self.rank() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Tensor {
            shape,
            data: self.item(i).to_vec(),
        }
    }

    /// Same data viewed under a new shape of equal volume.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::InvalidArgument {
            op: "Tensor::stack",
            reason: "no tensors to stack".into(),
        })?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "Tensor::stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Writes the binary encoding to `w`.
    pub fn write_to(&self, w: &mut impl Write, path: &str) -> Result<()> {
        let io = |e| Error::io(path, e);
        w.write_all(TENSOR_MAGIC).map_err(io)?;
        w.write_all(&(self.rank() as u32).to_le_bytes()).map_err(io)?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)
    }

    /// Decodes the binary encoding from `r`. `path` labels errors only.
    pub fn read_from(r: &mut impl Read, path: &str) -> Result<Tensor> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let name = path.display().to_string();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(&name, e))?;
        let mut w = std::io::BufWriter::new(&mut file);
        self.write_to(&mut w, &name)
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let name = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| Error::io(&name, e))?;
        Self::from_bytes(&bytes, &name)
    }

    fn from_bytes(bytes: &[u8], path: &str) -> Result<Tensor> {
        let parse = |offset: usize, reason: String| Error::Parse {
            path: path.into(),
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 12 {
            return Err(parse(bytes.len(), "truncated header".into()));
        }
        if &bytes[..8] != TENSOR_MAGIC {
            return Err(parse(0, format!("bad magic {:?}", &bytes[..8])));
        }
        let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if rank == 0 || rank > 8 {
            return Err(parse(8, format!("rank {rank} out of range 1..=8")));
        }
        let header = 12 + rank * 8;
        if bytes.len() < header {
            return Err(parse(bytes.len(), "truncated extents".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for a in 0..rank {
            let off = 12 + a * 8;
            let extent = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            let extent = usize::try_from(extent)
                .ok()
                .filter(|&e| e > 0)
                .ok_or_else(|| parse(off, format!("extent {extent} out of range on axis {a}")))?;
            len = len.checked_mul(extent).ok_or_else(|| parse(off, "volume overflow".into()))?;
            shape.push(extent);
        }
        let want = header + len * 8;
        if bytes.len() != want {
            return Err(parse(
                bytes.len().min(want),
                format!("expected {want} bytes total, got {}", bytes.len()),
            ));
        }
        let data = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }
}

/// Matrix product of two rank-2 tensors.
///
/// Accumulation order is fixed (ascending inner index), so results are
/// bit-identical across runs and platforms with the same inputs.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.to_vec(),
            right: b.shape.to_vec(),
        });
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &a.data[i * k..(i + 1) * k];
        let dst = &mut out[i * m..(i + 1) * m];
        for (p, &av) in row.iter().enumerate() {
            let brow = &b.data[p * m..(p + 1) * m];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Product a · bᵀ for row-major matrices; the layout most kernels here want.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor, op: &'static str) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (m, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.to_vec(),
            right: b.shape.to_vec(),
        });
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * m + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Numerically stable softmax over a non-empty logit slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "softmax of empty slice");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Elementwise sign: -1, 0, or +1 per entry (sign(0) = 0).
pub fn sign(t: &Tensor) -> Tensor {
    let data = t
        .data
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

/// Indices of the k largest values, descending; ties broken toward the
/// lower index.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::InvalidArgument {
            op: "topk_indices",
            reason: format!("k = {k} out of range 1..={}", values.len()),
        });
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Index of the largest value; ties broken toward the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
