//! Library-level round trips: synthetic data, training, checkpoints and
//! feature files used together the way the command-line tool uses them.

use mcbmt::bleu::bleu;
use mcbmt::data::{gen_synthetic, load_checkpoint, load_feature_maps, save_checkpoint, save_feature_maps, SyntheticTaskSpec, EOS};
use mcbmt::train::train_loop;
use mcbmt::{FusionKind, ModelConfig, TrainConfig};

fn small_spec() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        train: 120,
        val: 30,
        test: 30,
        ..SyntheticTaskSpec::preset("small").unwrap()
    }
}

fn config_for(spec: &SyntheticTaskSpec, src: usize, tgt: usize) -> ModelConfig {
    ModelConfig {
        src_vocab: src,
        tgt_vocab: tgt,
        embed_dim: 12,
        hidden: 12,
        attn_dim: 12,
        fusion: FusionKind::Mcb,
        pre_attention: true,
        sketch_dim: Some(32),
        pre_attention_hidden: 6,
        grid: spec.grid,
        channels: spec.channels,
        max_decode_len: 20,
        ..ModelConfig::default()
    }
}

#[test]
fn train_save_load_translate() {
    let spec = small_spec();
    let corpus = gen_synthetic(&spec).unwrap();
    let cfg = config_for(&spec, corpus.src_vocab.len(), corpus.tgt_vocab.len());
    let tc = TrainConfig {
        max_steps: 30,
        eval_interval: 10,
        batch_size: 8,
        lr: 0.003,
        ..TrainConfig::default()
    };
    let outcome = train_loop(&cfg, &corpus.train, &corpus.val, &tc).unwrap();
    assert_eq!(outcome.steps, 30);
    assert!(outcome.best_val_loss.is_finite());
    assert!(outcome.log.iter().any(|r| r.split == "val"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &outcome.best, &corpus.src_vocab, &corpus.tgt_vocab).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.model.config(), outcome.best.config());
    assert_eq!(loaded.src_vocab, corpus.src_vocab);

    for ex in corpus.test.iter().take(10) {
        let a = outcome.best.greedy_translate(&ex.src, &ex.features).unwrap();
        let b = loaded.model.greedy_translate(&ex.src, &ex.features).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains(&EOS));
        assert!(a.len() <= cfg.max_decode_len);
    }
    let before = outcome.best.evaluate(&corpus.test).unwrap();
    let after = loaded.model.evaluate(&corpus.test).unwrap();
    assert_eq!(before.loss().to_bits(), after.loss().to_bits());
}

#[test]
fn feature_files_round_trip_synthetic_maps() {
    let corpus = gen_synthetic(&small_spec()).unwrap();
    let maps: Vec<_> = corpus.val.iter().map(|e| e.features.clone()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("val.mmfm");
    save_feature_maps(&path, &maps).unwrap();
    let back = load_feature_maps(&path).unwrap();
    assert_eq!(back, maps);
}

#[test]
fn synthetic_targets_decode_to_reference_text() {
    let corpus = gen_synthetic(&small_spec()).unwrap();
    let refs: Vec<Vec<String>> = corpus.test.iter().map(|e| corpus.tgt_vocab.decode(&e.tgt)).collect();
    assert!(refs.iter().all(|r| !r.is_empty() && !r.iter().any(|w| w.starts_with('<'))));
    assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
}
