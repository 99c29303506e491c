use crate::attention::AttentionParams;
use crate::layers::{ConvParams, DenseParams, EmbeddingParams, LstmCellParams};
use crate::numerics::Tensor;

/// How a tensor is treated by regularization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrices and score vectors; L2-regularized.
    Weight,
    Bias,
    Embedding,
}

/// A collection of named tensors listed in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<(&str, ParamKind, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<(&str, ParamKind, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    fn names(&self) -> Vec<String> {
        self.tensors().iter().map(|(n, _, _)| n.to_string()).collect()
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors()
            .into_iter()
            .find(|(n, _, _)| *n == name)
            .map(|(_, _, t)| t)
    }
}

/// Every learnable tensor of the encoder-decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub src_embed: EmbeddingParams,
    pub tgt_embed: EmbeddingParams,
    pub enc_fwd: LstmCellParams,
    pub enc_bwd: LstmCellParams,
    /// `s_0 = tanh(W_init·h_T + b_init)`
    pub init: DenseParams,
    /// Input-feeding projection of `[y_{t-1}; c_{t-1}]`, no bias.
    pub w_in: Tensor,
    pub dec: LstmCellParams,
    pub attn: AttentionParams,
    pub pre_conv: Option<ConvParams>,
    pub proj: DenseParams,
    pub out: DenseParams,
}

macro_rules! list_all {
    ($p:expr, $($r:tt)+) => {{
        let p = $p;
        let mut v = vec![
            ("src_embed.table", ParamKind::Embedding, $($r)+ p.src_embed.table),
            ("tgt_embed.table", ParamKind::Embedding, $($r)+ p.tgt_embed.table),
            ("enc_fwd.w", ParamKind::Weight, $($r)+ p.enc_fwd.w),
            ("enc_fwd.b", ParamKind::Bias, $($r)+ p.enc_fwd.b),
            ("enc_bwd.w", ParamKind::Weight, $($r)+ p.enc_bwd.w),
            ("enc_bwd.b", ParamKind::Bias, $($r)+ p.enc_bwd.b),
            ("init.w", ParamKind::Weight, $($r)+ p.init.w),
            ("init.b", ParamKind::Bias, $($r)+ p.init.b),
            ("in.w", ParamKind::Weight, $($r)+ p.w_in),
            ("dec.w", ParamKind::Weight, $($r)+ p.dec.w),
            ("dec.b", ParamKind::Bias, $($r)+ p.dec.b),
            ("attn.w2", ParamKind::Weight, $($r)+ p.attn.w2),
            ("attn.text.w1", ParamKind::Weight, $($r)+ p.attn.text.w1),
            ("attn.text.b", ParamKind::Bias, $($r)+ p.attn.text.b),
            ("attn.text.v", ParamKind::Weight, $($r)+ p.attn.text.v),
        ];
        if let Some(vis) = $($r)+ p.attn.visual {
            v.push(("attn.vis.w1", ParamKind::Weight, $($r)+ vis.w1));
            v.push(("attn.vis.b", ParamKind::Bias, $($r)+ vis.b));
            v.push(("attn.vis.v", ParamKind::Weight, $($r)+ vis.v));
        }
        if let Some(conv) = $($r)+ p.pre_conv {
            v.push(("pre.conv.w1", ParamKind::Weight, $($r)+ conv.w1));
            v.push(("pre.conv.b1", ParamKind::Bias, $($r)+ conv.b1));
            v.push(("pre.conv.w2", ParamKind::Weight, $($r)+ conv.w2));
            v.push(("pre.conv.b2", ParamKind::Bias, $($r)+ conv.b2));
        }
        v.push(("proj.w", ParamKind::Weight, $($r)+ p.proj.w));
        v.push(("proj.b", ParamKind::Bias, $($r)+ p.proj.b));
        v.push(("out.w", ParamKind::Weight, $($r)+ p.out.w));
        v.push(("out.b", ParamKind::Bias, $($r)+ p.out.b));
        v
    }};
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<(&str, ParamKind, &Tensor)> {
        list_all!(self, &)
    }

    fn tensors_mut(&mut self) -> Vec<(&str, ParamKind, &mut Tensor)> {
        list_all!(self, &mut)
    }
}

impl ModelParams {
    /// Same structure and shapes, all entries zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }
}
