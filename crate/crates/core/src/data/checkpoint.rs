//! Versioned binary checkpoints.
//!
//! Layout (little-endian): `"MCBC"`, version u16, config JSON (u32 length),
//! source and target vocabularies (u32 count, then u16-length tokens),
//! sketch tables (u8 count; per table a u8 slot, u64 seed, u32 d, u32 n,
//! `n` u32 hashes, `n` i8 signs), the named-tensor table (u32 count; per
//! tensor u16 name length, name, u8 rank, u32 dims, binary64 payload), and
//! a trailing SHA-256 of everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{write_atomic, Vocab};
use crate::model::{Model, ModelConfig, Parameters};
use crate::numerics::Tensor;
use crate::sketch::{McbPooler, SketchParams};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"MCBC";
const DIGEST_LEN: usize = 32;

const SLOT_FUSION_TEXT: u8 = 0;
const SLOT_FUSION_VIS: u8 = 1;
const SLOT_PRE_TEXT: u8 = 2;
const SLOT_PRE_VIS: u8 = 3;

/// A model together with the vocabularies it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

fn put_len<T: TryFrom<usize>>(out: &mut Vec<u8>, n: usize, what: &'static str, enc: impl Fn(T) -> Vec<u8>) -> Result<()> {
    let v = T::try_from(n).map_err(|_| Error::DimensionOverflow(what))?;
    out.extend(enc(v));
    Ok(())
}

fn put_vocab(out: &mut Vec<u8>, v: &Vocab) -> Result<()> {
    put_len(out, v.entries().len(), "vocabulary", |n: u32| n.to_le_bytes().to_vec())?;
    for t in v.entries() {
        put_len(out, t.len(), "vocabulary entry", |n: u16| n.to_le_bytes().to_vec())?;
        out.extend_from_slice(t.as_bytes());
    }
    Ok(())
}

fn put_sketch(out: &mut Vec<u8>, slot: u8, p: &SketchParams) -> Result<()> {
    out.push(slot);
    out.extend_from_slice(&p.seed().to_le_bytes());
    put_len(out, p.d(), "sketch", |n: u32| n.to_le_bytes().to_vec())?;
    put_len(out, p.n(), "sketch", |n: u32| n.to_le_bytes().to_vec())?;
    for h in p.hashes() {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out.extend(p.signs().iter().map(|&s| s as u8));
    Ok(())
}

/// Serializes a checkpoint to bytes; identical inputs give identical bytes.
pub fn encode_checkpoint(model: &Model, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).map_err(|e| Error::Data(e.to_string()))?;
    put_len(&mut out, config.len(), "config", |n: u32| n.to_le_bytes().to_vec())?;
    out.extend_from_slice(&config);
    put_vocab(&mut out, src_vocab)?;
    put_vocab(&mut out, tgt_vocab)?;

    let mut tables = Vec::new();
    if let Some(p) = model.fusion_pooler() {
        tables.push((SLOT_FUSION_TEXT, p.params_text()));
        tables.push((SLOT_FUSION_VIS, p.params_vis()));
    }
    if let Some(p) = model.pre_pooler() {
        tables.push((SLOT_PRE_TEXT, p.params_text()));
        tables.push((SLOT_PRE_VIS, p.params_vis()));
    }
    out.push(tables.len() as u8);
    for (slot, p) in tables {
        put_sketch(&mut out, slot, p)?;
    }

    let tensors = model.params.tensors();
    put_len(&mut out, tensors.len(), "tensor table", |n: u32| n.to_le_bytes().to_vec())?;
    for (name, _, t) in tensors {
        put_len(&mut out, name.len(), "tensor name", |n: u16| n.to_le_bytes().to_vec())?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, t.rank(), "tensor rank", |n: u8| vec![n])?;
        for &d in t.shape() {
            put_len(&mut out, d, "tensor dims", |n: u32| n.to_le_bytes().to_vec())?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &Model, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, src_vocab, tgt_vocab)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(Error::Truncated("checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, len: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(len)?).map_err(|_| corrupt("non-UTF-8 text"))
    }

    fn vocab(&mut self) -> Result<Vocab> {
        let n = self.u32()?;
        let mut tokens = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = self.u16()? as usize;
            tokens.push(self.str(len)?.to_string());
        }
        Vocab::from_tokens(tokens)
    }
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt {
        what: "checkpoint",
        detail: detail.into(),
    }
}

/// Parses a checkpoint image, verifying its checksum and every shape
/// before building the model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic("checkpoint"));
    }
    if bytes.len() < 6 + DIGEST_LEN {
        return Err(Error::Truncated("checkpoint"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut c = Cursor { buf: body, pos: 6 };
    let len = c.u32()?;
    let config: ModelConfig = serde_json::from_slice(c.take(len)?).map_err(|e| corrupt(e.to_string()))?;
    let src_vocab = c.vocab()?;
    let tgt_vocab = c.vocab()?;
    if src_vocab.len() != config.src_vocab || tgt_vocab.len() != config.tgt_vocab {
        return Err(corrupt("vocabulary sizes disagree with the configuration"));
    }

    let mut slots: [Option<SketchParams>; 4] = Default::default();
    for _ in 0..c.u8()? {
        let slot = c.u8()? as usize;
        let seed = c.u64()?;
        let d = c.u32()?;
        let n = c.u32()?;
        let h_len = n.checked_mul(4).ok_or(Error::DimensionOverflow("sketch table"))?;
        let h = c.take(h_len)?.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        let s = c.take(n)?.iter().map(|&b| b as i8).collect();
        let entry = slots.get_mut(slot).ok_or_else(|| corrupt(format!("unknown sketch slot {slot}")))?;
        if entry.replace(SketchParams::from_tables(d, h, s, seed)?).is_some() {
            return Err(corrupt(format!("duplicate sketch slot {slot}")));
        }
    }
    let [ft, fv, pt, pv] = slots;
    let pair = |a: Option<SketchParams>, b: Option<SketchParams>| -> Result<Option<McbPooler>> {
        match (a, b) {
            (Some(a), Some(b)) => McbPooler::from_params(a, b).map(Some),
            (None, None) => Ok(None),
            _ => Err(corrupt("sketch table pair incomplete")),
        }
    };
    let fusion = pair(ft, fv)?;
    let pre = pair(pt, pv)?;

    let mut params = Model::zero_params(&config);
    let count = c.u32()?;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(corrupt(format!("expected {} tensors, found {count}", slots.len())));
    }
    for (expected, _, tensor) in slots.iter_mut() {
        let len = c.u16()? as usize;
        let name = c.str(len)?;
        if name != *expected {
            return Err(corrupt(format!("expected tensor {expected}, found {name}")));
        }
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()?);
        }
        if shape != tensor.shape() {
            return Err(corrupt(format!("tensor {name} has shape {shape:?}")));
        }
        let raw = c.take(8 * tensor.len())?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        **tensor = Tensor::new(shape, data)?;
    }
    drop(slots);
    if c.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    let model = Model::from_parts(config, params, fusion, pre)?;
    Ok(Checkpoint {
        model,
        src_vocab,
        tgt_vocab,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FusionKind;
    use crate::data::{gen_synthetic, SyntheticTaskSpec};

    fn setup(fusion: FusionKind, pre: bool) -> (Model, Vocab, Vocab, Vec<crate::data::Example>) {
        let corpus = gen_synthetic(&SyntheticTaskSpec::preset("small").unwrap()).unwrap();
        let cfg = ModelConfig {
            src_vocab: corpus.src_vocab.len(),
            tgt_vocab: corpus.tgt_vocab.len(),
            embed_dim: 6,
            hidden: 4,
            attn_dim: 5,
            fusion,
            pre_attention: pre,
            sketch_dim: Some(12),
            pre_attention_hidden: 3,
            grid: 16,
            channels: 8,
            max_decode_len: 20,
            text_only: false,
            mcb_normalize: false,
        };
        let model = Model::new(cfg, 9).unwrap();
        (model, corpus.src_vocab, corpus.tgt_vocab, corpus.train[..4].to_vec())
    }

    #[test]
    fn round_trip_gives_bitwise_identical_loss() {
        for (fusion, pre) in [(FusionKind::Mcb, true), (FusionKind::Concat, false), (FusionKind::Product, true)] {
            let (model, sv, tv, batch) = setup(fusion, pre);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.ckpt");
            save_checkpoint(&path, &model, &sv, &tv).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back.src_vocab, sv);
            assert_eq!(back.tgt_vocab, tv);
            assert_eq!(back.model.params, model.params);
            assert_eq!(back.model.pre_pooler().map(|p| p.params_vis().clone()), model.pre_pooler().map(|p| p.params_vis().clone()));
            let a = model.forward_loss(&batch, 1e-5).unwrap().loss;
            let b = back.model.forward_loss(&batch, 1e-5).unwrap().loss;
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fresh_model_bytes_are_reproducible() {
        let (a, sv, tv, _) = setup(FusionKind::Mcb, true);
        let (b, _, _, _) = setup(FusionKind::Mcb, true);
        assert_eq!(encode_checkpoint(&a, &sv, &tv).unwrap(), encode_checkpoint(&b, &sv, &tv).unwrap());
    }

    #[test]
    fn damaged_files_fail_closed() {
        let (model, sv, tv, _) = setup(FusionKind::Mcb, false);
        let bytes = encode_checkpoint(&model, &sv, &tv).unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Corrupt { .. })));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode_checkpoint(&v), Err(Error::Version { found: 9, .. })));
        let mut m = bytes;
        m[0] = b'X';
        assert!(matches!(decode_checkpoint(&m), Err(Error::BadMagic(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
