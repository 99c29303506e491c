use crate::numerics::{kernels, Tensor};
use crate::{Error, Result};

/// Two stacked 1×1 convolutions, `C_in → H → 1`, with ReLU in between.
///
/// A 1×1 convolution over a flattened grid is a dense layer applied
/// independently at every grid position.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    input: Tensor,
    /// Post-ReLU hidden activations, `G × H`.
    hidden: Vec<f64>,
}

impl ConvParams {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let h = w1.rows();
        if w1.rank() != 2
            || b1.len() != h
            || w2.rank() != 2
            || w2.rows() != 1
            || w2.cols() != h
            || b2.len() != 1
        {
            return Err(Error::shape("convolution kernels do not chain"));
        }
        Ok(ConvParams { w1, b1, w2, b2 })
    }

    pub fn zeros(in_channels: usize, hidden: usize) -> Self {
        ConvParams {
            w1: Tensor::zeros(&[hidden, in_channels]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[1, hidden]),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_channels(&self) -> usize {
        self.w1.rows()
    }
}

/// Maps a `G × C_in` grid to one logit per grid cell (a length-`G` vector).
pub fn conv1x1_forward(features: &Tensor, p: &ConvParams) -> Result<(Tensor, ConvCache)> {
    if features.rank() != 2 || features.cols() != p.in_channels() {
        return Err(Error::shape(format!(
            "convolution expects {} channels, got {:?}",
            p.in_channels(),
            features.shape()
        )));
    }
    let g = features.rows();
    let hs = p.hidden_channels();
    let mut hidden = vec![0.0; g * hs];
    let mut logits = vec![p.b2.data()[0]; g];
    for cell in 0..g {
        let hrow = &mut hidden[cell * hs..(cell + 1) * hs];
        hrow.copy_from_slice(p.b1.data());
        kernels::matvec_acc(p.w1.data(), p.in_channels(), features.row(cell), hrow);
        for v in hrow.iter_mut() {
            *v = v.max(0.0);
        }
        logits[cell] += kernels::dot(p.w2.data(), hrow);
    }
    let logits = Tensor::vector(logits)?;
    Ok((
        logits,
        ConvCache {
            input: features.clone(),
            hidden,
        },
    ))
}

/// Accumulates kernel gradients into `acc`; returns `∂features`.
pub fn conv1x1_backward(
    grad_logits: &[f64],
    cache: &ConvCache,
    p: &ConvParams,
    acc: &mut ConvParams,
) -> Result<Tensor> {
    let g = cache.input.rows();
    let hs = p.hidden_channels();
    if grad_logits.len() != g || cache.hidden.len() != g * hs {
        return Err(Error::shape("convolution gradient shape"));
    }
    let mut gin = Tensor::zeros(&[g, p.in_channels()]);
    let mut dh = vec![0.0; hs];
    for cell in 0..g {
        let gl = grad_logits[cell];
        let hrow = &cache.hidden[cell * hs..(cell + 1) * hs];
        acc.b2.data_mut()[0] += gl;
        kernels::axpy(gl, hrow, acc.w2.data_mut());
        for k in 0..hs {
            dh[k] = if hrow[k] > 0.0 { gl * p.w2.data()[k] } else { 0.0 };
        }
        kernels::outer_acc(acc.w1.data_mut(), &dh, cache.input.row(cell));
        kernels::axpy(1.0, &dh, acc.b1.data_mut());
        kernels::matvec_t_acc(p.w1.data(), p.in_channels(), &dh, gin.row_mut(cell));
    }
    Ok(gin)
}
