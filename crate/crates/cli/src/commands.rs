use std::path::{Path, PathBuf};

use mcbmt::bleu::bleu;
use mcbmt::data::{
    build_vocab, gen_synthetic, load_checkpoint, load_feature_maps, load_parallel, load_text, save_checkpoint,
    save_feature_maps, write_atomic, Example, SyntheticTaskSpec, Vocab,
};
use mcbmt::model::Model;
use mcbmt::sketch_bench::{format_table, run_sketch_bench, BenchConfig};
use mcbmt::train::{evaluate, train_loop};
use mcbmt::{FusionKind, ModelConfig, Tensor, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::manifest::{DataSource, RunManifest};
use crate::{BenchArgs, BleuArgs, CliError, CliResult, GenArgs, Toggle, TrainArgs, TranslateArgs};

/// Optional sections of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
    synthetic: Option<SyntheticTaskSpec>,
}

struct Dataset {
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    train: Vec<Example>,
    val: Vec<Example>,
    test: Vec<Example>,
    grid: usize,
    channels: usize,
}

/// Final metrics of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub best_step: usize,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_bleu: f64,
    pub val_grounded_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub test_bleu: Option<f64>,
    pub test_grounded_acc: Option<f64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn features_or_blank(path: Option<&PathBuf>, count: usize, text_only: bool) -> CliResult<Vec<Tensor>> {
    match path {
        Some(p) => {
            let maps = load_feature_maps(p)?;
            if maps.len() != count {
                return Err(CliError::data(format!(
                    "{} holds {} feature maps for {count} sentences",
                    p.display(),
                    maps.len()
                )));
            }
            Ok(maps)
        }
        None if text_only => Ok(vec![Tensor::zeros(&[1, 1]); count]),
        None => Err(CliError::usage("feature maps are required unless --text-only is set")),
    }
}

fn load_dataset(source: &DataSource, text_only: bool) -> CliResult<Dataset> {
    match source {
        DataSource::Synthetic(spec) => {
            let c = gen_synthetic(spec)?;
            Ok(Dataset {
                src_vocab: c.src_vocab,
                tgt_vocab: c.tgt_vocab,
                train: c.train,
                val: c.val,
                test: c.test,
                grid: spec.grid,
                channels: spec.channels,
            })
        }
        DataSource::Files {
            train_src,
            train_tgt,
            train_features,
            val_src,
            val_tgt,
            val_features,
            min_count,
        } => {
            let (ts, tt) = load_parallel(train_src, train_tgt)?;
            let (vs, vt) = load_parallel(val_src, val_tgt)?;
            let src_vocab = build_vocab(&ts, *min_count)?;
            let tgt_vocab = build_vocab(&tt, *min_count)?;
            let tf = features_or_blank(train_features.as_ref(), ts.len(), text_only)?;
            let vf = features_or_blank(val_features.as_ref(), vs.len(), text_only)?;
            let (grid, channels) = tf.first().map(|t| (t.rows(), t.cols())).unwrap_or((1, 1));
            let build = |s: Vec<Vec<String>>, t: Vec<Vec<String>>, f: Vec<Tensor>| -> CliResult<Vec<Example>> {
                s.into_iter()
                    .zip(t)
                    .zip(f)
                    .filter(|((s, _), _)| !s.is_empty())
                    .map(|((s, t), f)| Example::new(src_vocab.encode(&s), tgt_vocab.encode_target(&t), f).map_err(CliError::from))
                    .collect()
            };
            let train = build(ts, tt, tf)?;
            let val = build(vs, vt, vf)?;
            Ok(Dataset {
                src_vocab: src_vocab.clone(),
                tgt_vocab: tgt_vocab.clone(),
                train,
                val,
                test: Vec::new(),
                grid,
                channels,
            })
        }
    }
}

/// Merges defaults, the config file and flags into a manifest.
fn resolve(args: &TrainArgs) -> CliResult<RunManifest> {
    let file: FileConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => FileConfig::default(),
    };
    let mut model = file.model;
    let mut train = file.train;
    if let Some(f) = args.fusion {
        model.fusion = f;
    }
    if let Some(t) = args.pre_attention {
        model.pre_attention = t == Toggle::On;
    }
    if args.sketch_dim.is_some() {
        model.sketch_dim = args.sketch_dim;
    }
    model.hidden = args.hidden.unwrap_or(model.hidden);
    model.embed_dim = args.embed.unwrap_or(model.embed_dim);
    model.attn_dim = args.attn_dim.unwrap_or(model.attn_dim);
    model.pre_attention_hidden = args.pre_hidden.unwrap_or(model.pre_attention_hidden);
    model.max_decode_len = args.max_decode_len.unwrap_or(model.max_decode_len);
    model.text_only |= args.text_only;
    train.max_steps = args.steps.unwrap_or(train.max_steps);
    train.patience = args.patience.unwrap_or(train.patience);
    train.batch_size = args.batch.unwrap_or(train.batch_size);
    train.lr = args.lr.unwrap_or(train.lr);
    train.l2 = args.l2.unwrap_or(train.l2);
    train.eval_interval = args.eval_interval.unwrap_or(train.eval_interval);
    train.seed = args.seed.unwrap_or(train.seed);
    if args.no_clip {
        train.clip_norm = None;
    }
    train.validate()?;
    if args.runs == 0 {
        return Err(CliError::usage("--runs must be at least 1"));
    }

    let data = if let Some(src) = &args.train_src {
        let need = |p: &Option<PathBuf>, flag: &str| p.clone().ok_or_else(|| CliError::usage(format!("{flag} is required with --train-src")));
        DataSource::Files {
            train_src: src.clone(),
            train_tgt: need(&args.train_tgt, "--train-tgt")?,
            train_features: args.train_features.clone(),
            val_src: need(&args.val_src, "--val-src")?,
            val_tgt: need(&args.val_tgt, "--val-tgt")?,
            val_features: args.val_features.clone(),
            min_count: args.min_count,
        }
    } else {
        let mut spec = match (&args.synthetic, file.synthetic) {
            (_, Some(spec)) => spec,
            (Some(name), None) => SyntheticTaskSpec::preset(name)?,
            (None, None) => return Err(CliError::usage("pass --synthetic or --train-src/--train-tgt/--val-src/--val-tgt")),
        };
        // Element-wise fusion needs C == 2L; the extra channels stay zero.
        let elementwise = matches!(model.fusion, FusionKind::Sum | FusionKind::Product);
        if elementwise && !model.text_only && spec.channels < 2 * model.hidden {
            spec.channels = 2 * model.hidden;
        }
        DataSource::Synthetic(spec)
    };
    let input_hash = data.content_hash()?;
    Ok(RunManifest {
        model,
        train,
        seeds: (0..args.runs as u64).map(|k| args.seed.unwrap_or(1) + k).collect(),
        data,
        input_hash,
        out_dir: args.out.clone().unwrap_or_else(|| PathBuf::from("mcbmt-out")),
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn grounded(model: &Model, examples: &[Example]) -> CliResult<Option<f64>> {
    let s = model.evaluate(examples)?;
    Ok((s.grounded > 0).then(|| s.grounded_accuracy()))
}

/// Trains one model per seed, writing `run-<seed>/best.ckpt`,
/// `run-<seed>/metrics.jsonl`, `manifest.json` and `summary.json` under
/// the output directory.
pub fn cmd_train(args: &TrainArgs) -> CliResult<Vec<RunSummary>> {
    let mut manifest = match &args.from_manifest {
        Some(p) => RunManifest::load(p)?,
        None => resolve(args)?,
    };
    if args.from_manifest.is_some() {
        if let Some(out) = &args.out {
            manifest.out_dir = out.clone();
        }
        let hash = manifest.data.content_hash()?;
        if hash != manifest.input_hash {
            return Err(CliError::data("inputs changed since the manifest was written"));
        }
    }
    let data = load_dataset(&manifest.data, manifest.model.text_only)?;
    manifest.model.src_vocab = data.src_vocab.len();
    manifest.model.tgt_vocab = data.tgt_vocab.len();
    manifest.model.grid = data.grid;
    manifest.model.channels = data.channels;
    manifest.model.validate()?;

    let out = manifest.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    manifest.save(&out.join("manifest.json"))?;

    let mut summaries = Vec::new();
    for &seed in &manifest.seeds {
        let tc = TrainConfig {
            seed,
            ..manifest.train.clone()
        };
        let outcome = train_loop(&manifest.model, &data.train, &data.val, &tc)?;
        let dir = out.join(format!("run-{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        let log: String = outcome.log.iter().map(|r| r.to_json() + "\n").collect();
        write_atomic(&dir.join("metrics.jsonl"), log.as_bytes())?;
        save_checkpoint(&dir.join("best.ckpt"), &outcome.best, &data.src_vocab, &data.tgt_vocab)?;

        let best = &outcome.best;
        let (val_loss, val_bleu, val_acc) = evaluate(best, &data.val, true)?;
        let (mut test_acc, mut test_bleu, mut test_grounded) = (None, None, None);
        if !data.test.is_empty() {
            let (_, b, a) = evaluate(best, &data.test, true)?;
            test_acc = Some(a);
            test_bleu = b;
            test_grounded = grounded(best, &data.test)?;
        }
        let s = RunSummary {
            seed,
            steps: outcome.steps,
            best_step: outcome.best_step,
            val_loss,
            val_acc,
            val_bleu: val_bleu.unwrap_or(0.0),
            val_grounded_acc: grounded(best, &data.val)?,
            test_acc,
            test_bleu,
            test_grounded_acc: test_grounded,
        };
        if !args.quiet {
            println!(
                "seed {seed}: {} steps, best at {}, val loss {:.4} acc {:.4} bleu {:.2}",
                s.steps, s.best_step, s.val_loss, s.val_acc, s.val_bleu
            );
        }
        summaries.push(s);
    }
    let n = summaries.len();
    let avg = serde_json::json!({
        "runs": n,
        "val_loss": mean(summaries.iter().map(|s| s.val_loss)),
        "val_acc": mean(summaries.iter().map(|s| s.val_acc)),
        "val_bleu": mean(summaries.iter().map(|s| s.val_bleu)),
        "test_bleu": summaries.iter().map(|s| s.test_bleu).collect::<Option<Vec<_>>>().map(|v| mean(v.into_iter())),
    });
    if !args.quiet {
        println!(
            "mean over {n} run(s): val loss {:.4} acc {:.4} bleu {:.2}",
            avg["val_loss"].as_f64().unwrap_or(f64::NAN),
            avg["val_acc"].as_f64().unwrap_or(f64::NAN),
            avg["val_bleu"].as_f64().unwrap_or(f64::NAN)
        );
    }
    let summary = serde_json::json!({ "runs": summaries, "mean": avg });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::data(e.to_string()))? + "\n";
    write_atomic(&out.join("summary.json"), text.as_bytes())?;
    Ok(summaries)
}

/// One output line per source line. Nothing is written unless every line
/// translates.
pub fn cmd_translate(args: &TranslateArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = &ckpt.model;
    let lines = load_text(&args.src)?;
    let features = features_or_blank(args.features.as_ref(), lines.len(), model.config().text_only)?;
    let mut out = String::new();
    for (tokens, f) in lines.iter().zip(&features) {
        if !tokens.is_empty() {
            let ids = model.greedy_translate(&ckpt.src_vocab.encode(tokens), f)?;
            out += &ckpt.tgt_vocab.decode(&ids).join(" ");
        }
        out.push('\n');
    }
    write_atomic(&args.out, out.as_bytes())?;
    Ok(())
}

/// Scores tokenized, lowercased lines.
pub fn cmd_bleu(args: &BleuArgs) -> CliResult<f64> {
    let hyp = load_text(&args.hyp)?;
    let reference = load_text(&args.reference)?;
    Ok(bleu(&hyp, &reference)?)
}

pub fn cmd_bench_sketch(args: &BenchArgs) -> CliResult<Vec<mcbmt::sketch_bench::BenchRow>> {
    let cfg = BenchConfig {
        dims: args.dims.clone(),
        trials: args.trials,
        n1: args.n1,
        n2: args.n2,
        seed: args.seed,
    };
    let rows = run_sketch_bench(&cfg)?;
    print!("{}", format_table(&rows));
    if let Some(path) = &args.out {
        let mut text = String::new();
        for r in &rows {
            text += &serde_json::to_string(&r.record).map_err(|e| CliError::data(e.to_string()))?;
            text.push('\n');
        }
        write_atomic(path, text.as_bytes())?;
    }
    Ok(rows)
}

/// Writes `{train,val,test}.{src,tgt,mmfm}`.
pub fn cmd_gen_synthetic(args: &GenArgs) -> CliResult<()> {
    let mut spec = SyntheticTaskSpec::preset(&args.synthetic)?;
    spec.seed = args.seed.unwrap_or(spec.seed);
    let corpus = gen_synthetic(&spec)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::data(format!("{}: {e}", args.out.display())))?;
    for (name, split) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
        let render = |v: &Vocab, ids: &dyn Fn(&Example) -> &[u32]| -> String {
            split.iter().map(|ex| v.decode(ids(ex)).join(" ") + "\n").collect()
        };
        write_atomic(&args.out.join(format!("{name}.src")), render(&corpus.src_vocab, &|e| &e.src).as_bytes())?;
        write_atomic(&args.out.join(format!("{name}.tgt")), render(&corpus.tgt_vocab, &|e| &e.tgt).as_bytes())?;
        let maps: Vec<Tensor> = split.iter().map(|e| e.features.clone()).collect();
        save_feature_maps(&args.out.join(format!("{name}.mmfm")), &maps)?;
    }
    Ok(())
}
