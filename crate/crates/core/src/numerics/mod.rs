//! Dense tensors and the FFT-based primitives everything else builds on.

mod fft;
pub mod kernels;

pub use fft::FftPlan;

use crate::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = checked_volume(&shape)?;
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Row count of a rank-2 tensor (length of a rank-1 one).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a rank-2 tensor (1 for rank-1).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if checked_volume(&shape)? != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Copies a rank-1 tensor `times` times into a `times × n` matrix.
    pub fn tile(&self, times: usize) -> Result<Self> {
        if self.rank() != 1 {
            return Err(Error::shape("tile expects a rank-1 tensor"));
        }
        let mut data = Vec::with_capacity(times * self.len());
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Ok(Tensor {
            shape: vec![times, self.len()],
            data,
        })
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        kernels::axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(kernels::dot(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> f64 {
        kernels::dot(&self.data, &self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite("elementwise op")?;
        Ok(t)
    }
}

fn checked_volume(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Overflow(format!("shape {shape:?}")))
}

/// Complex vector in split (re, im) layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVector {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexVector {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::shape(format!(
                "re has {} entries, im has {}",
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexVector { re, im })
    }

    pub fn from_real(re: &[f64]) -> Self {
        ComplexVector {
            re: re.to_vec(),
            im: vec![0.0; re.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.re.len() != self.im.len() {
            return Err(Error::shape("re/im length mismatch"));
        }
        if self.is_empty() {
            return Err(Error::Empty("fft input"));
        }
        if !self.re.iter().chain(&self.im).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("fft input".into()));
        }
        Ok(())
    }
}

pub fn fft(x: &ComplexVector) -> Result<ComplexVector> {
    x.validate()?;
    let mut out = x.clone();
    FftPlan::new(x.len()).forward(&mut out.re, &mut out.im);
    Ok(out)
}

pub fn ifft(x: &ComplexVector) -> Result<ComplexVector> {
    x.validate()?;
    let mut out = x.clone();
    FftPlan::new(x.len()).inverse(&mut out.re, &mut out.im);
    Ok(out)
}

/// Spectra of two real signals of equal length from a single complex FFT.
pub(crate) fn real_pair_spectra(
    plan: &FftPlan,
    a: &[f64],
    b: &[f64],
) -> (ComplexVector, ComplexVector) {
    let n = a.len();
    let mut zr = a.to_vec();
    let mut zi = b.to_vec();
    plan.forward(&mut zr, &mut zi);
    let mut sa = ComplexVector {
        re: vec![0.0; n],
        im: vec![0.0; n],
    };
    let mut sb = sa.clone();
    for k in 0..n {
        let j = (n - k) % n;
        let (xr, xi, wr, wi) = (zr[k], zi[k], zr[j], zi[j]);
        sa.re[k] = 0.5 * (xr + wr);
        sa.im[k] = 0.5 * (xi - wi);
        sb.re[k] = 0.5 * (xi + wi);
        sb.im[k] = 0.5 * (wr - xr);
    }
    (sa, sb)
}

/// Real part of `ifft(x ⊙ y)`, or of `ifft(x ⊙ conj(y))` when `conjugate_y`.
pub(crate) fn inverse_of_product(
    plan: &FftPlan,
    x: &ComplexVector,
    y: &ComplexVector,
    conjugate_y: bool,
) -> Result<Vec<f64>> {
    let n = x.len();
    let sign = if conjugate_y { -1.0 } else { 1.0 };
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        let (ar, ai) = (x.re[k], x.im[k]);
        let (br, bi) = (y.re[k], sign * y.im[k]);
        re[k] = ar * br - ai * bi;
        im[k] = ar * bi + ai * br;
    }
    plan.inverse(&mut re, &mut im);
    let peak = re.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let residue = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(residue < 1e-6 * peak) {
        return Err(Error::NonFinite(format!(
            "real convolution left imaginary residue {residue:e}"
        )));
    }
    Ok(re)
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 1 || b.rank() != 1 {
        return Err(Error::shape("circular convolution expects rank-1 tensors"));
    }
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("circular convolution input"));
    }
    Ok(())
}

/// `c[k] = Σ_j a[j]·b[(k−j) mod n]`, evaluated through the FFT.
pub fn circular_convolution(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair(a, b)?;
    let plan = FftPlan::new(a.len());
    let (sa, sb) = real_pair_spectra(&plan, a.data(), b.data());
    Tensor::vector(inverse_of_product(&plan, &sa, &sb, false)?)
}

/// `r[j] = Σ_k g[k]·b[(k−j) mod n]`, the adjoint of convolving with `b`.
pub fn circular_correlation(g: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair(g, b)?;
    let plan = FftPlan::new(g.len());
    let (sg, sb) = real_pair_spectra(&plan, g.data(), b.data());
    Tensor::vector(inverse_of_product(&plan, &sg, &sb, true)?)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul expects rank-2 tensors"));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(format!("{m}×{k} · {k2}×{n}")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip != 0.0 {
                kernels::axpy(aip, &b.data[p * n..(p + 1) * n], row);
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::shape("softmax expects a rank-1 tensor"));
    }
    if x.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    x.check_finite("softmax input")?;
    let mut y = x.data.clone();
    kernels::softmax_in_place(&mut y);
    Ok(Tensor {
        shape: x.shape.clone(),
        data: y,
    })
}
