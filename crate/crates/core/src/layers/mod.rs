//! Learnable layers with explicit forward and backward passes.
//!
//! Backward functions come in two flavours: the `*_backward` free functions
//! return fresh gradient containers, while the methods used by the model
//! accumulate into caller-owned gradient buffers of the same parameter type.

mod conv;
mod lstm;

pub use conv::{conv1x1_backward, conv1x1_forward, ConvCache, ConvParams};
pub use lstm::{
    bilstm_backward, bilstm_encode, lstm_cell_backward, lstm_cell_forward, BiLstmCache,
    LstmCache, LstmCellGrads, LstmCellParams,
};

use crate::numerics::{kernels, Tensor};
use crate::{Error, Result};

/// Affine map `y = W x + b` with `W` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseParams {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        if w.rank() != 2 || b.rank() != 1 || w.rows() != b.len() {
            return Err(Error::shape(format!(
                "dense weight {:?} with bias {:?}",
                w.shape(),
                b.shape()
            )));
        }
        Ok(DenseParams { w, b })
    }

    pub fn zeros(out: usize, input: usize) -> Self {
        DenseParams {
            w: Tensor::zeros(&[out, input]),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w.cols()
    }

    pub fn output_size(&self) -> usize {
        self.w.rows()
    }

    pub(crate) fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.data().to_vec();
        kernels::matvec_acc(self.w.data(), self.input_size(), x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `acc` and returns `∂/∂x`.
    pub(crate) fn apply_backward(&self, x: &[f64], grad_y: &[f64], acc: &mut DenseParams) -> Vec<f64> {
        kernels::outer_acc(acc.w.data_mut(), grad_y, x);
        kernels::axpy(1.0, grad_y, acc.b.data_mut());
        let mut gx = vec![0.0; x.len()];
        kernels::matvec_t_acc(self.w.data(), self.input_size(), grad_y, &mut gx);
        gx
    }
}

fn check_dense_input(x: &Tensor, p: &DenseParams) -> Result<()> {
    if x.rank() != 1 || x.len() != p.input_size() {
        return Err(Error::shape(format!(
            "dense layer expects input length {}, got {:?}",
            p.input_size(),
            x.shape()
        )));
    }
    Ok(())
}

pub fn dense_forward(x: &Tensor, p: &DenseParams) -> Result<Tensor> {
    check_dense_input(x, p)?;
    Tensor::vector(p.apply(x.data()))
}

/// Returns `(∂/∂x, ∂/∂params)`.
pub fn dense_backward(x: &Tensor, grad_y: &Tensor, p: &DenseParams) -> Result<(Tensor, DenseParams)> {
    check_dense_input(x, p)?;
    if grad_y.len() != p.output_size() {
        return Err(Error::shape("dense gradient length"));
    }
    let mut acc = DenseParams::zeros(p.output_size(), p.input_size());
    let gx = p.apply_backward(x.data(), grad_y.data(), &mut acc);
    Ok((Tensor::vector(gx)?, acc))
}

/// Word embedding table, one row per vocabulary entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub table: Tensor,
}

impl EmbeddingParams {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.rank() != 2 {
            return Err(Error::shape("embedding table must be rank-2"));
        }
        Ok(EmbeddingParams { table })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    fn check(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size()) {
            Some(&t) => Err(Error::OutOfRange {
                index: t as usize,
                limit: self.vocab_size(),
            }),
            None => Ok(()),
        }
    }

    pub(crate) fn lookup(&self, token: u32) -> &[f64] {
        self.table.row(token as usize)
    }

    pub(crate) fn accumulate(&mut self, token: u32, grad: &[f64]) {
        kernels::axpy(1.0, grad, self.table.row_mut(token as usize));
    }
}

/// Looks up one row per token; an empty sequence yields a `0 × E` tensor.
pub fn embed(tokens: &[u32], p: &EmbeddingParams) -> Result<Tensor> {
    p.check(tokens)?;
    let mut data = Vec::with_capacity(tokens.len() * p.dim());
    for &t in tokens {
        data.extend_from_slice(p.lookup(t));
    }
    Tensor::matrix(tokens.len(), p.dim(), data)
}

/// Scatters `grad` (T × E) into the rows of `acc` touched by `tokens`.
pub fn embed_backward(tokens: &[u32], grad: &Tensor, acc: &mut EmbeddingParams) -> Result<()> {
    acc.check(tokens)?;
    if grad.rows() != tokens.len() || grad.cols() != acc.dim() {
        return Err(Error::shape("embedding gradient shape"));
    }
    for (i, &t) in tokens.iter().enumerate() {
        acc.accumulate(t, grad.row(i));
    }
    Ok(())
}
