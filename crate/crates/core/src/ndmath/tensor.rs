//! Dense row-major arrays of `f64` and their complex counterpart.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Rank-1 tensor over `data`, which must be non-empty.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector needs at least one element");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor rank is at least 1")
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::invalid(format!(
                "expected a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::invalid(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape(&self.shape, &other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Swaps axes 1 and 2 of a rank-3 tensor.
    pub fn transpose12(&self) -> Result<Tensor> {
        let (a, b, c) = self.dims3()?;
        let mut out = vec![0.0; self.data.len()];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    out[(i * c + k) * b + j] = self.data[(i * b + j) * c + k];
                }
            }
        }
        Ok(Tensor {
            shape: vec![a, c, b],
            data: out,
        })
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor { shape, data: out })
    }

    /// Concatenates two tensors along the last axis. Leading axes must agree.
    pub fn concat_last(&self, other: &Tensor) -> Result<Tensor> {
        let lead_a = &self.shape[..self.rank() - 1];
        let lead_b = &other.shape[..other.rank() - 1];
        if lead_a != lead_b {
            return Err(Error::invalid(format!(
                "cannot concatenate {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        let (na, nb) = (self.last_dim(), other.last_dim());
        let rows = self.len() / na;
        let mut data = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * na..(r + 1) * na]);
            data.extend_from_slice(&other.data[r * nb..(r + 1) * nb]);
        }
        let mut shape = lead_a.to_vec();
        shape.push(na + nb);
        Ok(Tensor { shape, data })
    }

    /// `x · wᵀ + b` over the last axis of `self`; `w` is `(out, in)`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let (n_out, n_in) = w.dims2()?;
        if self.last_dim() != n_in {
            return Err(Error::invalid(format!(
                "linear: input width {} does not match weight {:?}",
                self.last_dim(),
                w.shape
            )));
        }
        if let Some(b) = b {
            if b.len() != n_out {
                return Err(Error::invalid(format!(
                    "linear: bias {:?} does not match {n_out} outputs",
                    b.shape
                )));
            }
        }
        let rows = self.len() / n_in;
        let mut data = vec![0.0; rows * n_out];
        for r in 0..rows {
            let x = &self.data[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let wrow = &w.data[o * n_in..(o + 1) * n_in];
                let mut acc = b.map_or(0.0, |b| b.data[o]);
                for (xi, wi) in x.iter().zip(wrow) {
                    acc += xi * wi;
                }
                data[r * n_out + o] = acc;
            }
        }
        let mut shape = self.shape[..self.rank() - 1].to_vec();
        shape.push(n_out);
        Ok(Tensor { shape, data })
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax_last(&self) -> Tensor {
        let n = self.last_dim();
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::invalid(format!(
                "complex shape {shape:?} holds {n} values, got re={} im={}",
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexTensor { shape, re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ComplexTensor {
            shape: shape.to_vec(),
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.re, &mut self.im)
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor rank is at least 1")
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::invalid(format!(
                "expected a rank-3 complex tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Elementwise modulus.
    pub fn magnitude(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .re
                .iter()
                .zip(&self.im)
                .map(|(r, i)| r.hypot(*i))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ComplexTensor) -> Result<()> {
        same_shape(&self.shape, &other.shape)?;
        for (a, b) in self.re.iter_mut().zip(&other.re) {
            *a += b;
        }
        for (a, b) in self.im.iter_mut().zip(&other.im) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!(
            "shape must be non-empty with positive extents, got {shape:?}"
        )));
    }
    Ok(())
}

pub(crate) fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("shape mismatch: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `(outer, axis extent, inner)` for a row-major shape.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
