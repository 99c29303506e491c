//! Text, vocabularies, file formats and the synthetic grounded task.

mod checkpoint;
mod mmfm;
mod synthetic;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use mmfm::{load_feature_maps, parse_feature_maps, save_feature_maps, serialize_feature_maps, MMFM_VERSION};
pub use synthetic::{audit, gen_synthetic, AuditReport, Lexeme, SyntheticCorpus, SyntheticTaskSpec};

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '"', '(', ')'];

/// Lowercases and splits on whitespace, with each punctuation mark in
/// `. , ! ? ; : " ( )` as its own token.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in line.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if PUNCTUATION.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// [`tokenize`] on raw bytes, rejecting invalid UTF-8.
pub fn tokenize_bytes(line: &[u8]) -> Result<Vec<String>> {
    std::str::from_utf8(line).map(tokenize).map_err(|_| Error::Encoding)
}

/// Token/id mapping with `<pad>`, `<s>`, `</s>`, `<unk>` fixed at ids 0–3.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from tokens listed after the reserved slots.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut ids = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Data("empty vocabulary entry".into()));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { ids, tokens: all })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-reserved entries in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Like [`Vocab::encode`] with a trailing EOS.
    pub fn encode_target<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        let mut ids = self.encode(tokens);
        ids.push(EOS);
        ids
    }

    /// Maps ids back to tokens, stopping at the first EOS and dropping
    /// padding and BOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]).to_string())
            .collect()
    }
}

/// Keeps tokens seen at least `min_count` times, ordered by descending
/// count and then lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Empty("vocabulary corpus"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in corpus {
        for t in line {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocab::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// One training triple: source ids, target ids ending in EOS, and a
/// `G × C` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub features: Tensor,
    /// Target positions whose correct token depends on the image.
    pub grounded: Vec<usize>,
}

impl Example {
    pub fn new(src: Vec<u32>, tgt: Vec<u32>, features: Tensor) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        if tgt.last() != Some(&EOS) {
            return Err(Error::Data("target must end with the end-of-sequence marker".into()));
        }
        Ok(Example {
            src,
            tgt,
            features,
            grounded: Vec::new(),
        })
    }
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::Encoding)?;
    Ok(text.lines().map(tokenize).collect())
}

/// Reads two aligned UTF-8 files, one sentence per line, and tokenizes them.
pub fn load_parallel(src: &Path, tgt: &Path) -> Result<(Vec<Vec<String>>, Vec<Vec<String>>)> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    Ok((s, t))
}

/// Tokenized lines of a single UTF-8 text file.
pub fn load_text(path: &Path) -> Result<Vec<Vec<String>>> {
    read_lines(path)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
