//! Dense `f64` tensors and the forward-difference gradient / divergence pair.
//!
//! Image-like data is stored channels-then-rows-then-columns, row-major. A
//! batched network tensor is `N x C x H x W`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::Size(format!("rank {} outside 1..=4", shape.len())));
    }
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::Size(format!("zero extent in {shape:?}")));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::Size(format!("extent product overflows for {shape:?}")))?;
    }
    // the payload must stay addressable in bytes
    n.checked_mul(8)
        .ok_or_else(|| Error::Size(format!("payload overflows for {shape:?}")))?;
    Ok(n)
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = checked_len(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// Normal samples with mean zero and standard deviation `std`, drawn from
    /// a ChaCha8 stream seeded with `seed`.
    pub fn random_normal(shape: &[usize], seed: u64, std: f64) -> Result<Self> {
        let n = checked_len(shape)?;
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::invalid(format!("std must be finite and >= 0, got {std}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = checked_len(shape)?;
        if data.len() != n {
            return Err(Error::Size(format!(
                "data length {} does not match shape {shape:?} ({n} elements)",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a `H x W` tensor from rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Size("ragged rows".into()));
        }
        Self::from_vec(&[h, w], rows.concat())
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

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    /// Spatial extents `(H, W)`: the last two axes.
    pub fn hw(&self) -> (usize, usize) {
        let r = self.shape.len();
        if r < 2 {
            (1, self.shape[0])
        } else {
            (self.shape[r - 2], self.shape[r - 1])
        }
    }

    /// Number of `H x W` planes stacked in the leading axes.
    pub fn planes(&self) -> usize {
        let (h, w) = self.hw();
        self.data.len() / (h * w)
    }

    pub fn plane(&self, index: usize) -> &[f64] {
        let (h, w) = self.hw();
        &self.data[index * h * w..(index + 1) * h * w]
    }

    pub fn plane_mut(&mut self, index: usize) -> &mut [f64] {
        let (h, w) = self.hw();
        &mut self.data[index * h * w..(index + 1) * h * w]
    }

    /// Copies plane `index` out as a `H x W` tensor.
    pub fn plane_tensor(&self, index: usize) -> Tensor {
        let (h, w) = self.hw();
        Tensor {
            shape: vec![h, w],
            data: self.plane(index).to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Size("cannot stack zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            t.expect_shape(first.shape())?;
            data.extend_from_slice(t.data());
        }
        Self::from_vec(&shape, data)
    }

    /// Splits off the leading axis.
    pub fn unstack(&self) -> Vec<Tensor> {
        let inner = &self.shape[1..];
        let inner_shape = if inner.is_empty() { vec![1] } else { inner.to_vec() };
        let n: usize = inner_shape.iter().product();
        self.data
            .chunks(n)
            .map(|c| Tensor {
                shape: inner_shape.clone(),
                data: c.to_vec(),
            })
            .collect()
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let (_, w) = self.hw();
        self.data[i * w + j]
    }

    pub(crate) fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(shape, &self.shape));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        other.expect_shape(&self.shape)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        other.expect_shape(&self.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        other.expect_shape(&self.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Forward-difference components of a `H x W` field.
#[derive(Debug, Clone, PartialEq)]
pub struct GradField {
    pub gx: Tensor,
    pub gy: Tensor,
}

impl GradField {
    pub fn new(gx: Tensor, gy: Tensor) -> Result<Self> {
        if gx.rank() != 2 {
            return Err(Error::invalid(format!("gradient field must be rank 2, got {:?}", gx.shape())));
        }
        gy.expect_shape(gx.shape())?;
        Ok(Self { gx, gy })
    }

    pub fn dot(&self, other: &GradField) -> Result<f64> {
        Ok(self.gx.dot(&other.gx)? + self.gy.dot(&other.gy)?)
    }
}

/// Forward differences with replicate (Neumann) boundary: the last column of
/// `gx` and the last row of `gy` are zero.
pub fn grad_forward(u: &Tensor) -> Result<GradField> {
    if u.rank() != 2 {
        return Err(Error::invalid(format!("grad_forward needs a rank-2 tensor, got {:?}", u.shape())));
    }
    let (h, w) = u.hw();
    let src = u.data();
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for i in 0..h {
        let row = &src[i * w..(i + 1) * w];
        for j in 0..w.saturating_sub(1) {
            gx[i * w + j] = row[j + 1] - row[j];
        }
        if i + 1 < h {
            let next = &src[(i + 1) * w..(i + 2) * w];
            for j in 0..w {
                gy[i * w + j] = next[j] - row[j];
            }
        }
    }
    Ok(GradField {
        gx: Tensor::from_vec(&[h, w], gx)?,
        gy: Tensor::from_vec(&[h, w], gy)?,
    })
}

/// Discrete divergence, the negative adjoint of [`grad_forward`]:
/// `<grad u, g> = -<u, div g>`.
pub fn div_backward(g: &GradField) -> Result<Tensor> {
    g.gy.expect_shape(g.gx.shape())?;
    let (h, w) = g.gx.hw();
    let gx = g.gx.data();
    let gy = g.gy.data();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let mut d = 0.0;
            if j + 1 < w {
                d += gx[k];
            }
            if j > 0 {
                d -= gx[k - 1];
            }
            if i + 1 < h {
                d += gy[k];
            }
            if i > 0 {
                d -= gy[k - w];
            }
            out[k] = d;
        }
    }
    Tensor::from_vec(&[h, w], out)
}
