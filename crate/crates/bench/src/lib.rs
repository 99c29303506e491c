//! Shared fixtures for the benchmarks.

use mcbmt::data::{gen_synthetic, Example, SyntheticTaskSpec};
use mcbmt::{FusionKind, Model, ModelConfig, Tensor};

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn signal(n: usize, seed: u64) -> Vec<f64> {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

pub fn vector(n: usize, seed: u64) -> Tensor {
    Tensor::vector(signal(n, seed)).expect("finite")
}

/// The acceptance-scale synthetic model (L = E = 32, G = 16, C = 8) and a
/// batch of 32 examples.
pub fn synthetic_model(fusion: FusionKind, pre_attention: bool) -> (Model, Vec<Example>) {
    let corpus = gen_synthetic(&SyntheticTaskSpec::preset("small").expect("preset")).expect("corpus");
    let config = ModelConfig {
        src_vocab: corpus.src_vocab.len(),
        tgt_vocab: corpus.tgt_vocab.len(),
        embed_dim: 32,
        hidden: 32,
        attn_dim: 32,
        fusion,
        pre_attention,
        sketch_dim: Some(256),
        pre_attention_hidden: 32,
        grid: 16,
        channels: if matches!(fusion, FusionKind::Sum | FusionKind::Product) { 64 } else { 8 },
        max_decode_len: 30,
        text_only: false,
        mcb_normalize: false,
    };
    let mut batch: Vec<Example> = corpus.train[..32].to_vec();
    for ex in &mut batch {
        let mut f = Tensor::zeros(&[16, config.channels]);
        for g in 0..16 {
            f.row_mut(g)[..8].copy_from_slice(ex.features.row(g));
        }
        ex.features = f;
    }
    (Model::new(config, 1).expect("valid config"), batch)
}
