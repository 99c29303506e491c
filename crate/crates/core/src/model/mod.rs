//! The multimodal attention encoder-decoder.
//!
//! Encoding: a bi-directional LSTM over source embeddings gives textual
//! annotations; the `G × C` feature grid (optionally reweighted by
//! pre-attention) gives visual annotations. Decoding follows the
//! input-feeding recurrence
//!
//! ```text
//! s_t, o_t = LSTM(s_{t-1}, W_in [y_{t-1}; c_{t-1}])
//! c_t      = fuse(attend_text(s_t), attend_vis(s_t))
//! õ_t      = W_proj [o_t; c_t] + b_proj
//! p(y_t)   = softmax(W_out õ_t + b_out)
//! ```
//!
//! with `o_t` taken to be the LSTM hidden state.

mod forward;
mod params;

pub use forward::{DecoderState, Encoded, EvalStats, ForwardOutput, StepOutput};
pub use params::{ModelParams, ParamKind, Parameters};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, FusionKind, FusionStrategy, ModalityScorer};
use crate::layers::{ConvParams, DenseParams, EmbeddingParams, LstmCellParams};
use crate::numerics::Tensor;
use crate::sketch::McbPooler;
use crate::train::xavier_init;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Word embedding size `E`.
    pub embed_dim: usize,
    /// Encoder and decoder layer size `L`.
    pub hidden: usize,
    /// Attention projection size.
    pub attn_dim: usize,
    pub fusion: FusionKind,
    pub pre_attention: bool,
    /// Sketch dimension `d`, shared by MCB fusion and pre-attention pooling.
    pub sketch_dim: Option<usize>,
    /// Hidden channels between the two pre-attention convolutions.
    pub pre_attention_hidden: usize,
    /// Grid cells `G` and channels `C` of the visual feature map.
    pub grid: usize,
    pub channels: usize,
    pub max_decode_len: usize,
    /// Ignore the image entirely; `c_t` is the text context.
    pub text_only: bool,
    /// Signed square root and L2 normalization after MCB pooling.
    pub mcb_normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            src_vocab: 0,
            tgt_vocab: 0,
            embed_dim: 512,
            hidden: 512,
            attn_dim: 512,
            fusion: FusionKind::Product,
            pre_attention: false,
            sketch_dim: None,
            pre_attention_hidden: 512,
            grid: 196,
            channels: 1024,
            max_decode_len: 80,
            text_only: false,
            mcb_normalize: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("attn_dim", self.attn_dim),
            ("grid", self.grid),
            ("channels", self.channels),
            ("max_decode_len", self.max_decode_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.src_vocab <= crate::data::EOS as usize || self.tgt_vocab <= crate::data::EOS as usize {
            return Err(Error::InvalidArgument("vocabularies must include the reserved tokens".into()));
        }
        if self.text_only {
            return Ok(());
        }
        let needs_sketch = self.fusion == FusionKind::Mcb || self.pre_attention;
        match self.sketch_dim {
            None if needs_sketch => {
                return Err(Error::InvalidArgument(
                    "MCB fusion and pre-attention require a sketch dimension".into(),
                ))
            }
            Some(0) => return Err(Error::InvalidArgument("sketch_dim must be positive".into())),
            _ => {}
        }
        if self.pre_attention && self.pre_attention_hidden == 0 {
            return Err(Error::InvalidArgument("pre_attention_hidden must be positive".into()));
        }
        if matches!(self.fusion, FusionKind::Sum | FusionKind::Product) && self.channels != 2 * self.hidden {
            return Err(Error::InvalidArgument(format!(
                "element-wise fusion needs channels == 2·hidden ({} vs {})",
                self.channels,
                2 * self.hidden
            )));
        }
        Ok(())
    }

    /// Length of `c_t` fed back to the decoder and into `W_proj`.
    pub fn fused_dim(&self) -> usize {
        let text = 2 * self.hidden;
        if self.text_only {
            return text;
        }
        match self.fusion {
            FusionKind::Concat => text + self.channels,
            FusionKind::Sum | FusionKind::Product => text,
            FusionKind::Mcb => self.sketch_dim.unwrap_or(0),
        }
    }

    pub fn uses_pre_attention(&self) -> bool {
        self.pre_attention && !self.text_only
    }
}

/// Baseline configuration that bypasses visual attention and fusion.
pub fn text_only_mode(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        text_only: true,
        pre_attention: false,
        ..config.clone()
    }
}

/// Mixes a label into a base seed (FNV-1a followed by a SplitMix64 finalizer).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Parameters plus the frozen sketch tables that go with them.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ModelParams,
    fusion: FusionStrategy,
    pre_pooler: Option<McbPooler>,
}

impl Model {
    /// Xavier-initialized weights, zero biases (forget gates at 1.0), and
    /// freshly sampled sketch tables, all derived from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zero_params(&config);
        for (name, kind, t) in params.tensors_mut() {
            if kind != ParamKind::Bias {
                *t = xavier_init(t.shape(), derive_seed(seed, name))?;
            }
        }
        for cell in [&mut params.enc_fwd, &mut params.enc_bwd, &mut params.dec] {
            cell.set_forget_bias(1.0);
        }
        let (fusion, pre_pooler) = Self::sample_sketches(&config, seed)?;
        Ok(Model {
            config,
            params,
            fusion,
            pre_pooler,
        })
    }

    fn sample_sketches(config: &ModelConfig, seed: u64) -> Result<(FusionStrategy, Option<McbPooler>)> {
        let text = 2 * config.hidden;
        let fusion = if config.text_only {
            FusionStrategy::Concat
        } else {
            match config.fusion {
                FusionKind::Concat => FusionStrategy::Concat,
                FusionKind::Sum => FusionStrategy::Sum,
                FusionKind::Product => FusionStrategy::Product,
                FusionKind::Mcb => {
                    let d = config.sketch_dim.unwrap_or(0);
                    let pooler = McbPooler::new(text, config.channels, d, derive_seed(seed, "sketch.fusion"))?
                        .with_normalization(config.mcb_normalize);
                    FusionStrategy::Mcb(pooler)
                }
            }
        };
        let pre = if config.uses_pre_attention() {
            let d = config.sketch_dim.unwrap_or(0);
            Some(McbPooler::new(text, config.channels, d, derive_seed(seed, "sketch.pre"))?)
        } else {
            None
        };
        Ok((fusion, pre))
    }

    /// All-zero parameters with the shapes `config` implies.
    pub fn zero_params(config: &ModelConfig) -> ModelParams {
        let (e, l, a) = (config.embed_dim, config.hidden, config.attn_dim);
        let f = config.fused_dim();
        let visual = (!config.text_only).then(|| ModalityScorer::zeros(a, config.channels));
        let pre_conv = config.uses_pre_attention().then(|| {
            ConvParams::zeros(config.sketch_dim.unwrap_or(0), config.pre_attention_hidden)
        });
        ModelParams {
            src_embed: EmbeddingParams {
                table: Tensor::zeros(&[config.src_vocab, e]),
            },
            tgt_embed: EmbeddingParams {
                table: Tensor::zeros(&[config.tgt_vocab, e]),
            },
            enc_fwd: LstmCellParams::zeros(e, l),
            enc_bwd: LstmCellParams::zeros(e, l),
            init: DenseParams::zeros(l, 2 * l),
            w_in: Tensor::zeros(&[e, e + f]),
            dec: LstmCellParams::zeros(e, l),
            attn: AttentionParams {
                text: ModalityScorer::zeros(a, 2 * l),
                visual,
                w2: Tensor::zeros(&[a, l]),
            },
            pre_conv,
            proj: DenseParams::zeros(l, l + f),
            out: DenseParams::zeros(config.tgt_vocab, l),
        }
    }

    /// Reassembles a model from stored parts, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        params: ModelParams,
        fusion_pooler: Option<McbPooler>,
        pre_pooler: Option<McbPooler>,
    ) -> Result<Self> {
        config.validate()?;
        let reference = Self::zero_params(&config);
        let expected: Vec<_> = reference.tensors().iter().map(|(n, _, t)| (n.to_string(), t.shape().to_vec())).collect();
        let got: Vec<_> = params.tensors().iter().map(|(n, _, t)| (n.to_string(), t.shape().to_vec())).collect();
        if expected != got {
            return Err(Error::shape("parameters do not match the configuration"));
        }
        let text = 2 * config.hidden;
        let fusion = if config.text_only {
            FusionStrategy::Concat
        } else {
            match (config.fusion, fusion_pooler) {
                (FusionKind::Concat, None) => FusionStrategy::Concat,
                (FusionKind::Sum, None) => FusionStrategy::Sum,
                (FusionKind::Product, None) => FusionStrategy::Product,
                (FusionKind::Mcb, Some(p)) => {
                    if p.n_text() != text || p.n_vis() != config.channels || Some(p.d()) != config.sketch_dim {
                        return Err(Error::shape("fusion sketch tables do not match the configuration"));
                    }
                    FusionStrategy::Mcb(p.with_normalization(config.mcb_normalize))
                }
                _ => return Err(Error::InvalidArgument("fusion sketch tables missing or unexpected".into())),
            }
        };
        match (&pre_pooler, config.uses_pre_attention()) {
            (Some(p), true) => {
                if p.n_text() != text || p.n_vis() != config.channels || Some(p.d()) != config.sketch_dim {
                    return Err(Error::shape("pre-attention sketch tables do not match the configuration"));
                }
            }
            (None, false) => {}
            _ => return Err(Error::InvalidArgument("pre-attention sketch tables missing or unexpected".into())),
        }
        Ok(Model {
            config,
            params,
            fusion,
            pre_pooler,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fusion(&self) -> &FusionStrategy {
        &self.fusion
    }

    pub fn fusion_pooler(&self) -> Option<&McbPooler> {
        match &self.fusion {
            FusionStrategy::Mcb(p) => Some(p),
            _ => None,
        }
    }

    pub fn pre_pooler(&self) -> Option<&McbPooler> {
        self.pre_pooler.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }
}

/// Decoder initial state `tanh(W_init·h_T + b_init)`.
pub fn init_decoder_state(h_t: &Tensor, p: &DenseParams) -> Result<Tensor> {
    let mut s = crate::layers::dense_forward(h_t, p)?;
    s.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    Ok(s)
}
