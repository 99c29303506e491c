//! A desk-scale grounded translation task.
//!
//! Each scene places objects (a shape with a color) on a square grid. The
//! feature map holds a shape one-hot and a color one-hot at every occupied
//! cell. Sources read "the red circle is left of the blue star ." and
//! targets put the color after the noun, "das kreis rot ist links von das
//! stern blau .". In an ambiguous example one source color is replaced by
//! `colored`; its translation can only be recovered from the image.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, Vocab};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// A source word and its target-language rendering (either may be several
/// space-separated tokens).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexeme {
    pub src: String,
    pub tgt: String,
}

impl Lexeme {
    fn new(src: &str, tgt: &str) -> Self {
        Lexeme {
            src: src.into(),
            tgt: tgt.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub grid: usize,
    pub channels: usize,
    pub shapes: Vec<Lexeme>,
    pub colors: Vec<Lexeme>,
    /// Left of, right of, above, below, in that order.
    pub relations: Vec<Lexeme>,
    /// Fraction of "there is a …" sentences; the rest are relational.
    pub existential_rate: f64,
    /// Fraction of examples with an image-dependent target token.
    pub ambiguity_rate: f64,
    pub ambiguous_word: String,
    /// Unmentioned objects added to a scene, at most.
    pub max_distractors: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            grid: 16,
            channels: 8,
            shapes: vec![
                Lexeme::new("circle", "kreis"),
                Lexeme::new("square", "quadrat"),
                Lexeme::new("triangle", "dreieck"),
                Lexeme::new("star", "stern"),
            ],
            colors: vec![
                Lexeme::new("red", "rot"),
                Lexeme::new("green", "gruen"),
                Lexeme::new("blue", "blau"),
                Lexeme::new("yellow", "gelb"),
            ],
            relations: vec![
                Lexeme::new("left of", "links von"),
                Lexeme::new("right of", "rechts von"),
                Lexeme::new("above", "ueber"),
                Lexeme::new("below", "unter"),
            ],
            existential_rate: 0.25,
            ambiguity_rate: 0.5,
            ambiguous_word: "colored".into(),
            max_distractors: 1,
            train: 2000,
            val: 200,
            test: 200,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    /// Named configurations: `default`, `small` and `unambiguous`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = SyntheticTaskSpec::default();
        match name {
            "default" => Ok(base),
            "small" => Ok(SyntheticTaskSpec {
                train: 300,
                val: 60,
                test: 60,
                ..base
            }),
            "unambiguous" => Ok(SyntheticTaskSpec {
                ambiguity_rate: 0.0,
                ..base
            }),
            other => Err(Error::InvalidArgument(format!("unknown synthetic preset {other:?}"))),
        }
    }

    fn side(&self) -> usize {
        let s = (self.grid as f64).sqrt().round() as usize;
        if s * s == self.grid {
            s
        } else {
            self.grid
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ambiguity_rate) || !(0.0..=1.0).contains(&self.existential_rate) {
            return Err(Error::InvalidArgument("rates must lie in [0, 1]".into()));
        }
        if self.shapes.len() < 2 || self.colors.is_empty() {
            return Err(Error::InvalidArgument("need at least two shapes and one color".into()));
        }
        if self.relations.len() != 4 {
            return Err(Error::InvalidArgument("relations must list left, right, above, below".into()));
        }
        if self.channels < self.shapes.len() + self.colors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} channels cannot encode {} shapes and {} colors",
                self.channels,
                self.shapes.len(),
                self.colors.len()
            )));
        }
        let objects = 2 + self.max_distractors;
        if self.grid < objects || self.shapes.len() < objects {
            return Err(Error::InvalidArgument(format!(
                "inventory too small: scenes need {objects} distinct cells and shapes"
            )));
        }
        if self.train == 0 || self.val == 0 {
            return Err(Error::InvalidArgument("train and validation sizes must be positive".into()));
        }
        let word = self.ambiguous_word.as_str();
        if word.is_empty() || word.contains(char::is_whitespace) || self.colors.iter().any(|c| c.src == word) {
            return Err(Error::InvalidArgument(format!("unusable ambiguous word {word:?}")));
        }
        Ok(())
    }

    fn src_words(&self) -> BTreeSet<&str> {
        let mut w: BTreeSet<&str> = ["the", "is", ".", "there", "a"].into_iter().collect();
        for lx in self.shapes.iter().chain(&self.colors).chain(&self.relations) {
            w.extend(lx.src.split_whitespace());
        }
        w.insert(&self.ambiguous_word);
        w
    }

    fn tgt_words(&self) -> BTreeSet<&str> {
        let mut w: BTreeSet<&str> = ["das", "ist", ".", "da", "ein"].into_iter().collect();
        for lx in self.shapes.iter().chain(&self.colors).chain(&self.relations) {
            w.extend(lx.tgt.split_whitespace());
        }
        w
    }
}

/// Generated splits plus the vocabularies covering the whole lexicon.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SyntheticTaskSpec,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Copy)]
struct Object {
    shape: usize,
    color: usize,
    cell: usize,
}

struct Sentence {
    src: Vec<String>,
    tgt: Vec<String>,
    grounded: Option<usize>,
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace().map(str::to_string)
}

fn describe(spec: &SyntheticTaskSpec, objs: &[Object], relation: Option<usize>, hide: Option<usize>) -> Sentence {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut grounded = None;
    let mut noun_phrase = |k: usize, src: &mut Vec<String>, tgt: &mut Vec<String>| {
        let o = objs[k];
        if hide == Some(k) {
            src.push(spec.ambiguous_word.clone());
        } else {
            src.extend(words(&spec.colors[o.color].src));
        }
        src.extend(words(&spec.shapes[o.shape].src));
        tgt.extend(words(&spec.shapes[o.shape].tgt));
        if hide == Some(k) {
            grounded = Some(tgt.len());
        }
        tgt.extend(words(&spec.colors[o.color].tgt));
    };
    match relation {
        None => {
            src.extend(["there", "is", "a"].map(String::from));
            tgt.extend(["da", "ist", "ein"].map(String::from));
            noun_phrase(0, &mut src, &mut tgt);
        }
        Some(r) => {
            src.push("the".into());
            tgt.push("das".into());
            noun_phrase(0, &mut src, &mut tgt);
            src.push("is".into());
            tgt.push("ist".into());
            src.extend(words(&spec.relations[r].src));
            tgt.extend(words(&spec.relations[r].tgt));
            src.push("the".into());
            tgt.push("das".into());
            noun_phrase(1, &mut src, &mut tgt);
        }
    }
    src.push(".".into());
    tgt.push(".".into());
    Sentence { src, tgt, grounded }
}

fn valid_relations(side: usize, a: usize, b: usize) -> Vec<usize> {
    let (ra, ca) = (a / side, a % side);
    let (rb, cb) = (b / side, b % side);
    let mut v = Vec::new();
    if ca < cb {
        v.push(0);
    }
    if ca > cb {
        v.push(1);
    }
    if ra < rb {
        v.push(2);
    }
    if ra > rb {
        v.push(3);
    }
    v
}

fn sample_example(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Result<Example> {
    let existential = rng.gen_bool(spec.existential_rate);
    let mentioned = if existential { 1 } else { 2 };
    let count = mentioned + rng.gen_range(0..=spec.max_distractors);
    let shapes: Vec<usize> = rand::seq::index::sample(rng, spec.shapes.len(), count).into_vec();
    let cells: Vec<usize> = rand::seq::index::sample(rng, spec.grid, count).into_vec();
    let objs: Vec<Object> = (0..count)
        .map(|k| Object {
            shape: shapes[k],
            color: rng.gen_range(0..spec.colors.len()),
            cell: cells[k],
        })
        .collect();
    let relation = if existential {
        None
    } else {
        let options = valid_relations(spec.side(), objs[0].cell, objs[1].cell);
        Some(*options.choose(rng).expect("distinct cells always relate"))
    };
    let hide = rng.gen_bool(spec.ambiguity_rate).then(|| rng.gen_range(0..mentioned));
    let sentence = describe(spec, &objs, relation, hide);

    let mut features = Tensor::zeros(&[spec.grid, spec.channels]);
    for o in &objs {
        let row = features.row_mut(o.cell);
        row[o.shape] = 1.0;
        row[spec.shapes.len() + o.color] = 1.0;
    }
    let mut ex = Example::new(
        src_vocab.encode(&sentence.src),
        tgt_vocab.encode_target(&sentence.tgt),
        features,
    )?;
    ex.grounded.extend(sentence.grounded);
    Ok(ex)
}

/// Deterministic per `spec.seed`; splits are drawn in train, val, test order
/// from one stream.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let src_vocab = Vocab::from_tokens(spec.src_words())?;
    let tgt_vocab = Vocab::from_tokens(spec.tgt_words())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |n: usize| -> Result<Vec<Example>> {
        (0..n).map(|_| sample_example(spec, &mut rng, &src_vocab, &tgt_vocab)).collect()
    };
    let train = split(spec.train)?;
    let val = split(spec.val)?;
    let test = split(spec.test)?;
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        src_vocab,
        tgt_vocab,
        train,
        val,
        test,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub examples: usize,
    /// Examples with an image-dependent target token.
    pub ambiguous: usize,
    /// Color tokens checked against the feature map.
    pub colors_checked: usize,
}

/// Verifies that every target color word, and in particular every
/// image-dependent one, names the color stored at the cell holding the
/// shape it follows.
pub fn audit(corpus: &SyntheticCorpus) -> Result<AuditReport> {
    let spec = &corpus.spec;
    let ns = spec.shapes.len();
    let single = |lx: &Lexeme| -> Result<u32> {
        let mut it = lx.tgt.split_whitespace();
        match (it.next(), it.next()) {
            (Some(w), None) => Ok(corpus.tgt_vocab.id(w)),
            _ => Err(Error::InvalidArgument("audit needs single-token shape and color words".into())),
        }
    };
    let shape_ids: Vec<u32> = spec.shapes.iter().map(&single).collect::<Result<_>>()?;
    let color_ids: Vec<u32> = spec.colors.iter().map(&single).collect::<Result<_>>()?;
    let hidden = corpus.src_vocab.id(&spec.ambiguous_word);
    let mut report = AuditReport::default();
    for ex in corpus.train.iter().chain(&corpus.val).chain(&corpus.test) {
        report.examples += 1;
        let fail = |detail: String| Error::Corrupt {
            what: "synthetic example",
            detail,
        };
        if ex.grounded.len() != ex.src.iter().filter(|&&t| t == hidden).count() {
            return Err(fail("grounded positions disagree with ambiguous source words".into()));
        }
        report.ambiguous += (!ex.grounded.is_empty()) as usize;
        for &p in &ex.grounded {
            if p == 0 || !color_ids.contains(&ex.tgt[p]) {
                return Err(fail(format!("grounded position {p} is not a color word")));
            }
        }
        for p in 1..ex.tgt.len() {
            let Some(color) = color_ids.iter().position(|&c| c == ex.tgt[p]) else {
                continue;
            };
            let shape = shape_ids
                .iter()
                .position(|&s| s == ex.tgt[p - 1])
                .ok_or_else(|| fail(format!("color at {p} does not follow a shape")))?;
            let cells: Vec<usize> = (0..ex.features.rows()).filter(|&g| ex.features.row(g)[shape] == 1.0).collect();
            let [cell] = cells[..] else {
                return Err(fail(format!("shape {shape} occupies {} cells", cells.len())));
            };
            let row = ex.features.row(cell);
            let stored = (0..spec.colors.len()).find(|&k| row[ns + k] == 1.0);
            if stored != Some(color) {
                return Err(fail(format!("target color {color} but cell {cell} stores {stored:?}")));
            }
            report.colors_checked += 1;
        }
    }
    Ok(report)
}
