//! Initialization, Adam with coupled L2, and the early-stopping loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bleu::bleu;
use crate::data::{Example, EOS};
use crate::model::{derive_seed, Model, ModelConfig, ParamKind, Parameters};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Uniform on `±√(6/(fan_in + fan_out))` for an `out × in` matrix.
pub fn xavier_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "xavier init needs a rank-2 shape, got {shape:?}"
        )));
    }
    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Adam moments keyed by parameter name, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: Vec<(String, Tensor, Tensor)>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(0.0007)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// First and second moments for `name`, once a step has run.
    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.moments.iter().find(|(n, _, _)| n == name).map(|(_, m, v)| (m, v))
    }
}

fn check_keys<P: Parameters>(params: &P, grads: &P) -> Result<()> {
    let a = params.tensors();
    let b = grads.tensors();
    let same = a.len() == b.len()
        && a.iter().zip(&b).all(|((n1, _, t1), (n2, _, t2))| n1 == n2 && t1.shape() == t2.shape());
    if !same {
        return Err(Error::InvalidArgument("gradient keys or shapes differ from parameters".into()));
    }
    Ok(())
}

/// One Adam update with `g + 2δ·w` on weight tensors. Nothing is modified
/// if the keys differ or any gradient is non-finite.
pub fn adam_step<P: Parameters>(params: &mut P, grads: &P, state: &mut AdamState, l2: f64) -> Result<()> {
    check_keys(params, grads)?;
    for (name, _, g) in grads.tensors() {
        g.check_finite(name)?;
    }
    if state.moments.is_empty() {
        state.moments = params
            .tensors()
            .iter()
            .map(|(n, _, t)| (n.to_string(), Tensor::zeros(t.shape()), Tensor::zeros(t.shape())))
            .collect();
    } else {
        let names = params.names();
        if names.len() != state.moments.len() || names.iter().zip(&state.moments).any(|(a, (b, _, _))| a != b) {
            return Err(Error::InvalidArgument("optimizer state keyed differently from parameters".into()));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let grads = grads.tensors();
    for (((_, kind, w), (_, _, g)), (_, m, v)) in params.tensors_mut().into_iter().zip(grads).zip(&mut state.moments) {
        let decay = if kind == ParamKind::Weight { 2.0 * l2 } else { 0.0 };
        let w = w.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..w.len() {
            let gi = g.data()[i] + decay * w[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            w[i] -= state.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.tensors().iter().map(|(_, _, t)| t.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, _, t) in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// A plain list of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensors(pub Vec<(String, ParamKind, Tensor)>);

impl Parameters for NamedTensors {
    fn tensors(&self) -> Vec<(&str, ParamKind, &Tensor)> {
        self.0.iter().map(|(n, k, t)| (n.as_str(), *k, t)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&str, ParamKind, &mut Tensor)> {
        self.0.iter_mut().map(|(n, k, t)| (n.as_str(), *k, t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    /// Steps without a validation-loss improvement before stopping.
    pub patience: usize,
    pub eval_interval: usize,
    pub max_steps: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Skip greedy decoding during evaluation and log no BLEU.
    pub skip_bleu: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 0.0007,
            l2: 1e-5,
            patience: 10_000,
            eval_interval: 100,
            max_steps: 10_000,
            clip_norm: Some(5.0),
            skip_bleu: false,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.eval_interval == 0 {
            return Err(Error::InvalidArgument("batch size, patience and eval interval must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive and l2 non-negative".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidArgument("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub bleu: Option<f64>,
    pub acc: Option<f64>,
}

impl MetricRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric records always serialize")
    }
}

pub struct TrainOutcome {
    /// Parameters from the evaluation with the lowest validation loss.
    pub best: Model,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub log: Vec<MetricRecord>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Validates token ranges, EOS termination and feature shapes.
pub fn check_dataset(config: &ModelConfig, examples: &[Example]) -> Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        let bad = |what: &str| Error::Data(format!("example {i}: {what}"));
        if ex.src.is_empty() || ex.src.iter().any(|&t| t as usize >= config.src_vocab) {
            return Err(bad("source ids empty or outside the vocabulary"));
        }
        if !ex.tgt.contains(&EOS) || ex.tgt.iter().any(|&t| t as usize >= config.tgt_vocab) {
            return Err(bad("target lacks EOS or has ids outside the vocabulary"));
        }
        if !config.text_only && ex.features.shape() != [config.grid, config.channels] {
            return Err(bad(&format!("feature map shape {:?}", ex.features.shape())));
        }
    }
    Ok(())
}

fn strip_eos(tgt: &[u32]) -> Vec<u32> {
    tgt.iter().take_while(|&&t| t != EOS).copied().collect()
}

/// Teacher-forced loss and accuracy, plus corpus BLEU of greedy output.
pub fn evaluate(model: &Model, examples: &[Example], with_bleu: bool) -> Result<(f64, Option<f64>, f64)> {
    let stats = model.evaluate(examples)?;
    let score = if with_bleu {
        let hyps = examples
            .iter()
            .map(|ex| model.greedy_translate(&ex.src, &ex.features))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<Vec<u32>> = examples.iter().map(|ex| strip_eos(&ex.tgt)).collect();
        Some(bleu(&hyps, &refs)?)
    } else {
        None
    };
    Ok((stats.loss(), score, stats.accuracy()))
}

/// Mini-batch Adam with evaluation every `eval_interval` steps, keeping the
/// best validation model and stopping after `patience` steps without a
/// strict improvement.
pub fn train_loop(config: &ModelConfig, train: &[Example], val: &[Example], tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training or validation set"));
    }
    check_dataset(config, train)?;
    check_dataset(config, val)?;
    let mut model = Model::new(config.clone(), tc.seed)?;
    let mut adam = AdamState::new(tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, "shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let mut log = Vec::new();
    let (loss, score, acc) = evaluate(&model, val, !tc.skip_bleu)?;
    log.push(MetricRecord {
        step: 0,
        split: "val".into(),
        loss,
        bleu: score,
        acc: Some(acc),
    });
    let mut best = model.clone();
    let (mut best_step, mut best_val_loss) = (0, loss);
    let mut window = (0.0, 0usize);
    let mut stopped_early = false;
    let mut step = 0;
    let mut batch = Vec::with_capacity(tc.batch_size);

    while step < tc.max_steps {
        batch.clear();
        while batch.len() < tc.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let mut out = model.forward_loss(&batch, 0.0)?;
        if let Some(c) = tc.clip_norm {
            clip_grad_norm(&mut out.grads, c);
        }
        adam_step(&mut model.params, &out.grads, &mut adam, tc.l2)?;
        step += 1;
        window.0 += out.nll;
        window.1 += 1;

        if step % tc.eval_interval == 0 || step == tc.max_steps {
            log.push(MetricRecord {
                step,
                split: "train".into(),
                loss: window.0 / window.1 as f64,
                bleu: None,
                acc: None,
            });
            window = (0.0, 0);
            let (loss, score, acc) = evaluate(&model, val, !tc.skip_bleu)?;
            log.push(MetricRecord {
                step,
                split: "val".into(),
                loss,
                bleu: score,
                acc: Some(acc),
            });
            if loss < best_val_loss {
                best_val_loss = loss;
                best_step = step;
                best = model.clone();
            } else if step - best_step >= tc.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_step,
        best_val_loss,
        log,
        steps: step,
        stopped_early,
    })
}
