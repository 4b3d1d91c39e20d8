//! Dense row-major f64 tensors.
//!
//! Everything the rest of the crate computes on is one of these. Rank 0 is a
//! scalar. Broadcasting follows the usual trailing-dimension rule: shapes are
//! right-aligned and a dimension matches if the extents are equal or one of
//! them is 1.

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(", "))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::validation(format!(
                "tensor shape {} has a zero extent",
                fmt_shape(&shape)
            )));
        }
        if numel != data.len() {
            return Err(Error::validation(format!(
                "tensor shape {} wants {} values, got {}",
                fmt_shape(&shape),
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for i in 0..t.data.len() {
            t.data[i] = f(&idx);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
    }

    /// Identity matrix, rank 2.
    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for ax in (0..self.shape.len()).rev() {
            debug_assert!(index[ax] < self.shape[ax]);
            off += index[ax] * stride;
            stride *= self.shape[ax];
        }
        self.data[off]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let mut off = 0;
        let mut stride = 1;
        for ax in (0..self.shape.len()).rev() {
            off += index[ax] * stride;
            stride *= self.shape[ax];
        }
        self.data[off] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::validation(format!(
                "cannot reshape {} ({} values) to {}",
                fmt_shape(&self.shape),
                self.data.len(),
                fmt_shape(shape)
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place a += b, exact shapes required. Used for adjoint accumulation.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} {:?}", fmt_shape(&self.shape), self.data)
    }
}

/// Uniform values in ±bound; the fan-in initializer everywhere uses
/// bound = √(1/fan_in).
pub fn uniform(rng: &mut impl rand::Rng, shape: &[usize], bound: f64) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    strides
}

// ── broadcasting ────────────────────────────────────────────────────────────

/// Trailing-dimension broadcast of two shapes, or an error naming both.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::validation(format!(
                "shapes {} and {} do not broadcast",
                fmt_shape(a),
                fmt_shape(b)
            )));
        };
    }
    Ok(out)
}

/// Elementwise combine with broadcasting.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    // Fast paths cover almost every call in the hot loops.
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape, data });
    }
    if b.numel() == 1 {
        let y = b.data[0];
        return Ok(Tensor {
            shape,
            data: a.data.iter().map(|&x| f(x, y)).collect(),
        });
    }
    if a.numel() == 1 {
        let x = a.data[0];
        return Ok(Tensor {
            shape,
            data: b.data.iter().map(|&y| f(x, y)).collect(),
        });
    }
    let rank = shape.len();
    let pad_strides = |t: &Tensor| {
        let ts = t.strides();
        let mut s = vec![0usize; rank];
        let offset = rank - t.shape.len();
        for (i, &dim) in t.shape.iter().enumerate() {
            s[offset + i] = if dim == 1 { 0 } else { ts[i] };
        }
        s
    };
    let sa = pad_strides(a);
    let sb = pad_strides(b);
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0; numel];
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for out in data.iter_mut() {
        *out = f(a.data[oa], b.data[ob]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
        }
    }
    Ok(Tensor { shape, data })
}

/// Sum `grad` down to `target` shape: the adjoint of broadcasting. Leading
/// extra axes are summed away, axes of extent 1 are summed over.
pub fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape == target {
        return grad.clone();
    }
    let rank = grad.shape.len();
    let offset = rank - target.len();
    let mut out = Tensor::zeros(target);
    let tstrides = strides_of(target);
    let mut idx = vec![0usize; rank];
    let mut toff = 0usize;
    for &g in &grad.data {
        out.data[toff] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            let tstride = if ax >= offset && target[ax - offset] != 1 {
                tstrides[ax - offset]
            } else {
                0
            };
            toff += tstride;
            if idx[ax] < grad.shape[ax] {
                break;
            }
            idx[ax] = 0;
            toff -= tstride * grad.shape[ax];
        }
    }
    out
}

// ── binary serialization ────────────────────────────────────────────────────
//
// Layout: magic "TCAT", u32 LE rank, rank × u64 LE extents, raw f64 LE values.

pub const TCAT_MAGIC: &[u8; 4] = b"TCAT";
const MAX_RANK: u32 = 16;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(TCAT_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TCAT_MAGIC {
        return Err(Error::validation(format!(
            "bad tensor magic {:?}, expected {:?}",
            magic, TCAT_MAGIC
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4);
    if rank > MAX_RANK {
        return Err(Error::validation(format!("tensor rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut b8 = [0u8; 8];
    let mut numel: u64 = 1;
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        let d = u64::from_le_bytes(b8);
        if d == 0 {
            return Err(Error::validation("tensor extent 0 in serialized header".to_string()));
        }
        numel = numel.checked_mul(d).ok_or_else(|| {
            Error::validation("tensor extents overflow".to_string())
        })?;
        shape.push(d as usize);
    }
    if numel > (1 << 32) {
        return Err(Error::validation(format!("tensor with {numel} values is too large")));
    }
    let mut data = Vec::with_capacity(numel as usize);
    for _ in 0..numel {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data)
}

/// Serialized byte length of a tensor record, for manifest offsets.
pub fn tensor_byte_len(t: &Tensor) -> u64 {
    4 + 4 + 8 * t.rank() as u64 + 8 * t.numel() as u64
}
