use super::{Model, ModelParams, ParamKind, Parameters};
use crate::attention::{
    pre_attend_backward, pre_attend_with, read, read_backward, FusionCache, PreAttentionCache,
    ReadCache,
};
use crate::data::{Example, BOS, EOS};
use crate::layers::{bilstm_backward, bilstm_encode, embed, embed_backward, BiLstmCache, LstmCache};
use crate::numerics::{kernels, Tensor};
use crate::{Error, Result};

/// Per-sentence encoder outputs, reused across decoder steps.
#[derive(Clone, Debug)]
pub struct Encoded {
    src: Vec<u32>,
    text_ann: Tensor,
    summary: Vec<f64>,
    enc_cache: BiLstmCache,
    features: Option<Tensor>,
    vis_ann: Option<Tensor>,
    pre_cache: Option<PreAttentionCache>,
    text_proj: Vec<f64>,
    vis_proj: Option<Vec<f64>>,
    s0: Vec<f64>,
}

impl Encoded {
    pub fn text_annotations(&self) -> &Tensor {
        &self.text_ann
    }

    /// Visual annotations after any pre-attention reweighting.
    pub fn visual_annotations(&self) -> Option<&Tensor> {
        self.vis_ann.as_ref()
    }

    /// Pre-attention weights over grid cells, when enabled.
    pub fn pre_attention_weights(&self) -> Option<&[f64]> {
        self.pre_cache.as_ref().map(|c| c.weights())
    }

    /// Concatenated final encoder state `h_T` used to initialise the decoder.
    pub fn summary(&self) -> &[f64] {
        &self.summary
    }
}

/// Recurrent decoder state: LSTM hidden and cell vectors plus the previous
/// attention vector fed back as input.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub cell: Vec<f64>,
    pub ctx: Vec<f64>,
}

pub struct StepOutput {
    pub state: DecoderState,
    pub logits: Vec<f64>,
    pub text_alpha: Vec<f64>,
    pub visual_alpha: Option<Vec<f64>>,
}

struct StepCache {
    prev_token: u32,
    input: Vec<f64>,
    lstm: LstmCache,
    h: Vec<f64>,
    text_read: ReadCache,
    text_ctx: Vec<f64>,
    vis: Option<(ReadCache, Vec<f64>)>,
    fusion: Option<FusionCache>,
    proj_in: Vec<f64>,
    otilde: Vec<f64>,
    probs: Vec<f64>,
}

/// Result of [`Model::forward_loss`].
pub struct ForwardOutput {
    /// Mean token NLL plus the L2 term.
    pub loss: f64,
    pub nll: f64,
    pub tokens: usize,
    pub grads: ModelParams,
}

/// Teacher-forced evaluation totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalStats {
    pub nll_sum: f64,
    pub tokens: usize,
    pub correct: usize,
    pub grounded: usize,
    pub grounded_correct: usize,
}

impl EvalStats {
    pub fn loss(&self) -> f64 {
        self.nll_sum / self.tokens.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }

    /// Accuracy on image-dependent target positions (NaN when there are none).
    pub fn grounded_accuracy(&self) -> f64 {
        if self.grounded == 0 {
            f64::NAN
        } else {
            self.grounded_correct as f64 / self.grounded as f64
        }
    }
}

/// Target prefix up to and including the first EOS; anything after is padding.
pub(crate) fn effective_target(tgt: &[u32]) -> Result<&[u32]> {
    match tgt.iter().position(|&t| t == EOS) {
        Some(p) => Ok(&tgt[..=p]),
        None => Err(Error::Data("target sequence lacks an end-of-sequence marker".into())),
    }
}

impl Model {
    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.rank() != 2 || features.cols() != self.config.channels || features.rows() == 0 {
            return Err(Error::shape(format!(
                "feature map must be G × {}, got {:?}",
                self.config.channels,
                features.shape()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, src: &[u32], features: &Tensor) -> Result<Encoded> {
        let p = &self.params;
        let x = embed(src, &p.src_embed)?;
        let (text_ann, summary, enc_cache) = bilstm_encode(&x, &p.enc_fwd, &p.enc_bwd)?;
        let summary = summary.into_data();
        let text_proj = p.attn.text.project(&text_ann);
        let (feats, vis_ann, pre_cache, vis_proj) = if self.config.text_only {
            (None, None, None, None)
        } else {
            self.check_features(features)?;
            let (vis_ann, pre_cache) = match (&self.pre_pooler, &p.pre_conv) {
                (Some(pooler), Some(conv)) => {
                    let (_, out, cache) = pre_attend_with(features, &summary, conv, pooler)?;
                    (out, Some(cache))
                }
                _ => (features.clone(), None),
            };
            let scorer = p.attn.scorer(crate::attention::Modality::Visual)?;
            let proj = scorer.project(&vis_ann);
            (Some(features.clone()), Some(vis_ann), pre_cache, Some(proj))
        };
        let mut s0 = p.init.apply(&summary);
        s0.iter_mut().for_each(|v| *v = v.tanh());
        Ok(Encoded {
            src: src.to_vec(),
            text_ann,
            summary,
            enc_cache,
            features: feats,
            vis_ann,
            pre_cache,
            text_proj,
            vis_proj,
            s0,
        })
    }

    pub fn initial_state(&self, enc: &Encoded) -> DecoderState {
        DecoderState {
            h: enc.s0.clone(),
            cell: vec![0.0; self.config.hidden],
            ctx: vec![0.0; self.config.fused_dim()],
        }
    }

    fn step_cached(&self, enc: &Encoded, state: &DecoderState, prev_token: u32) -> Result<(StepOutput, StepCache)> {
        let p = &self.params;
        if prev_token as usize >= self.config.tgt_vocab {
            return Err(Error::OutOfRange {
                index: prev_token as usize,
                limit: self.config.tgt_vocab,
            });
        }
        let e = self.config.embed_dim;
        let mut input = Vec::with_capacity(e + state.ctx.len());
        input.extend_from_slice(p.tgt_embed.lookup(prev_token));
        input.extend_from_slice(&state.ctx);
        let mut x_in = vec![0.0; e];
        kernels::matvec(p.w_in.data(), input.len(), &input, &mut x_in);
        let (h, cell, lstm) = p.dec.step(&x_in, &state.h, &state.cell);

        let q = p.attn.query(&h);
        let (text_ctx, text_read) = read(&p.attn.text, &enc.text_ann, &enc.text_proj, &q);
        let (fused, vis, fusion) = match (&enc.vis_ann, &enc.vis_proj, &p.attn.visual) {
            (Some(ann), Some(proj), Some(scorer)) => {
                let (vis_ctx, vis_read) = read(scorer, ann, proj, &q);
                let (fused, fc) = self.fusion.forward(&text_ctx, &vis_ctx)?;
                (fused, Some((vis_read, vis_ctx)), Some(fc))
            }
            _ => (text_ctx.clone(), None, None),
        };

        let mut proj_in = h.clone();
        proj_in.extend_from_slice(&fused);
        let otilde = p.proj.apply(&proj_in);
        let logits = p.out.apply(&otilde);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        let mut probs = logits.clone();
        kernels::softmax_in_place(&mut probs);

        let out = StepOutput {
            state: DecoderState {
                h: h.clone(),
                cell,
                ctx: fused,
            },
            logits,
            text_alpha: text_read.alpha().to_vec(),
            visual_alpha: vis.as_ref().map(|(r, _)| r.alpha().to_vec()),
        };
        let cache = StepCache {
            prev_token,
            input,
            lstm,
            h,
            text_read,
            text_ctx,
            vis,
            fusion,
            proj_in,
            otilde,
            probs,
        };
        Ok((out, cache))
    }

    /// One decoder step from `state`, conditioned on the previous token.
    pub fn decode_step(&self, enc: &Encoded, state: &DecoderState, prev_token: u32) -> Result<StepOutput> {
        self.step_cached(enc, state, prev_token).map(|(out, _)| out)
    }

    /// Teacher-forced pass over one example; returns its summed NLL and the
    /// step caches needed for backpropagation.
    fn run_example(&self, ex: &Example) -> Result<(Encoded, Vec<StepCache>, f64, Vec<u32>)> {
        let tgt = effective_target(&ex.tgt)?;
        if let Some(&bad) = tgt.iter().find(|&&t| t as usize >= self.config.tgt_vocab) {
            return Err(Error::OutOfRange {
                index: bad as usize,
                limit: self.config.tgt_vocab,
            });
        }
        let enc = self.encode(&ex.src, &ex.features)?;
        let mut state = self.initial_state(&enc);
        let mut caches = Vec::with_capacity(tgt.len());
        let mut nll = 0.0;
        let mut predictions = Vec::with_capacity(tgt.len());
        let mut prev = BOS;
        for &y in tgt {
            let (out, cache) = self.step_cached(&enc, &state, prev)?;
            nll -= cache.probs[y as usize].max(f64::MIN_POSITIVE).ln();
            predictions.push(kernels::argmax(&out.logits) as u32);
            state = out.state;
            caches.push(cache);
            prev = y;
        }
        Ok((enc, caches, nll, predictions))
    }

    fn backward_example(
        &self,
        ex: &Example,
        enc: &Encoded,
        caches: &[StepCache],
        scale: f64,
        grads: &mut ModelParams,
    ) -> Result<()> {
        let p = &self.params;
        let cfg = &self.config;
        let (l, e) = (cfg.hidden, cfg.embed_dim);
        let tgt = effective_target(&ex.tgt)?;
        let mut g_text_proj = vec![0.0; enc.text_proj.len()];
        let mut g_text_ann = Tensor::zeros(enc.text_ann.shape());
        let mut g_vis_proj = enc.vis_proj.as_ref().map(|v| vec![0.0; v.len()]);
        let mut g_vis_ann = enc.vis_ann.as_ref().map(|a| Tensor::zeros(a.shape()));
        let mut carry_h = vec![0.0; l];
        let mut carry_cell = vec![0.0; l];
        let mut carry_ctx = vec![0.0; cfg.fused_dim()];

        for (t, c) in caches.iter().enumerate().rev() {
            let mut g_logits: Vec<f64> = c.probs.iter().map(|&q| q * scale).collect();
            g_logits[tgt[t] as usize] -= scale;
            let g_otilde = p.out.apply_backward(&c.otilde, &g_logits, &mut grads.out);
            let g_proj_in = p.proj.apply_backward(&c.proj_in, &g_otilde, &mut grads.proj);
            let mut g_h = g_proj_in[..l].to_vec();
            kernels::axpy(1.0, &carry_h, &mut g_h);
            let mut g_fused = g_proj_in[l..].to_vec();
            kernels::axpy(1.0, &carry_ctx, &mut g_fused);

            let mut g_q = vec![0.0; cfg.attn_dim];
            let g_text_ctx = match (&c.vis, &c.fusion) {
                (Some((vis_read, vis_ctx)), Some(fc)) => {
                    let (g_ct, g_cv) = self.fusion.backward(fc, &c.text_ctx, vis_ctx, &g_fused)?;
                    let scorer = p.attn.visual.as_ref().expect("visual scorer");
                    let acc = grads.attn.visual.as_mut().expect("visual scorer grads");
                    read_backward(
                        scorer,
                        enc.vis_ann.as_ref().expect("visual annotations"),
                        vis_read,
                        &g_cv,
                        acc,
                        g_vis_proj.as_mut().expect("visual projection grads"),
                        &mut g_q,
                        g_vis_ann.as_mut().expect("visual annotation grads"),
                    );
                    g_ct
                }
                _ => g_fused,
            };
            read_backward(
                &p.attn.text,
                &enc.text_ann,
                &c.text_read,
                &g_text_ctx,
                &mut grads.attn.text,
                &mut g_text_proj,
                &mut g_q,
                &mut g_text_ann,
            );
            kernels::outer_acc(grads.attn.w2.data_mut(), &g_q, &c.h);
            kernels::matvec_t_acc(p.attn.w2.data(), p.attn.w2.cols(), &g_q, &mut g_h);

            let (g_x, g_h_prev, g_cell_prev) = p.dec.step_backward(&c.lstm, &g_h, &carry_cell, &mut grads.dec);
            kernels::outer_acc(grads.w_in.data_mut(), &g_x, &c.input);
            let mut g_input = vec![0.0; c.input.len()];
            kernels::matvec_t_acc(p.w_in.data(), c.input.len(), &g_x, &mut g_input);
            grads.tgt_embed.accumulate(c.prev_token, &g_input[..e]);
            carry_ctx = g_input[e..].to_vec();
            carry_h = g_h_prev;
            carry_cell = g_cell_prev;
        }

        // h_0 = tanh(W_init·summary + b_init); the initial cell and context are constants.
        let g_pre: Vec<f64> = carry_h.iter().zip(&enc.s0).map(|(g, s)| g * (1.0 - s * s)).collect();
        let mut g_summary = p.init.apply_backward(&enc.summary, &g_pre, &mut grads.init);

        p.attn.text.project_backward(&enc.text_ann, &g_text_proj, &mut grads.attn.text, &mut g_text_ann);
        if let (Some(ann), Some(gp), Some(mut ga)) = (&enc.vis_ann, &g_vis_proj, g_vis_ann) {
            let scorer = p.attn.visual.as_ref().expect("visual scorer");
            scorer.project_backward(ann, gp, grads.attn.visual.as_mut().expect("visual grads"), &mut ga);
            if let (Some(cache), Some(pooler), Some(conv), Some(features)) =
                (&enc.pre_cache, &self.pre_pooler, &p.pre_conv, &enc.features)
            {
                let acc = grads.pre_conv.as_mut().expect("pre-attention grads");
                let (_, g_text) = pre_attend_backward(&ga, features, cache, conv, pooler, acc)?;
                kernels::axpy(1.0, &g_text, &mut g_summary);
            }
        }
        let g_x = bilstm_backward(
            &g_text_ann,
            &g_summary,
            &enc.enc_cache,
            &p.enc_fwd,
            &p.enc_bwd,
            &mut grads.enc_fwd,
            &mut grads.enc_bwd,
        )?;
        embed_backward(&enc.src, &g_x, &mut grads.src_embed)?;
        Ok(())
    }

    /// Mean per-token NLL over the batch plus `l2·Σ‖W‖²` over weight
    /// tensors, with its exact gradient for every named parameter.
    pub fn forward_loss(&self, batch: &[Example], l2: f64) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut tokens = 0;
        for ex in batch {
            tokens += effective_target(&ex.tgt)?.len();
        }
        let scale = 1.0 / tokens as f64;
        let mut grads = self.params.zeros_like();
        let mut nll_sum = 0.0;
        for ex in batch {
            let (enc, caches, nll, _) = self.run_example(ex)?;
            nll_sum += nll;
            self.backward_example(ex, &enc, &caches, scale, &mut grads)?;
        }
        let nll = nll_sum * scale;
        let mut penalty = 0.0;
        if l2 != 0.0 {
            let weights = self.params.tensors();
            for ((_, kind, w), (_, _, g)) in weights.iter().zip(grads.tensors_mut()) {
                if *kind == ParamKind::Weight {
                    penalty += l2 * w.norm_sq();
                    kernels::axpy(2.0 * l2, w.data(), g.data_mut());
                }
            }
        }
        let loss = nll + penalty;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        for (name, _, g) in grads.tensors() {
            g.check_finite(name)?;
        }
        Ok(ForwardOutput {
            loss,
            nll,
            tokens,
            grads,
        })
    }

    /// Teacher-forced loss and token accuracy without gradients.
    pub fn evaluate(&self, examples: &[Example]) -> Result<EvalStats> {
        let mut stats = EvalStats::default();
        for ex in examples {
            let (_, _, nll, predictions) = self.run_example(ex)?;
            let tgt = effective_target(&ex.tgt)?;
            stats.nll_sum += nll;
            stats.tokens += tgt.len();
            stats.correct += predictions.iter().zip(tgt).filter(|(a, b)| a == b).count();
            for &pos in &ex.grounded {
                if pos < tgt.len() {
                    stats.grounded += 1;
                    stats.grounded_correct += (predictions[pos] == tgt[pos]) as usize;
                }
            }
        }
        Ok(stats)
    }

    /// Greedy decoding, feeding back the argmax token (ties to the lowest
    /// id) until EOS or `max_decode_len` tokens. EOS is not included.
    pub fn greedy_translate(&self, src: &[u32], features: &Tensor) -> Result<Vec<u32>> {
        let enc = self.encode(src, features)?;
        let mut state = self.initial_state(&enc);
        let mut prev = BOS;
        let mut out = Vec::new();
        while out.len() < self.config.max_decode_len {
            let step = self.decode_step(&enc, &state, prev)?;
            let next = kernels::argmax(&step.logits) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            state = step.state;
            prev = next;
        }
        Ok(out)
    }
}
