//! Binary checkpoint container for LM and SAE parameters.
//!
//! Layout (little endian): magic, u32 version, kind, u32 meta count and
//! key/value strings, u32 tensor count and per tensor name, u64 rows,
//! u64 cols, rows·cols f64 values. Strings are u32 length plus UTF-8 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::datagen::Vocab;
use crate::numcore::Matrix;
use crate::sae::SAEParams;
use crate::toylm::{LMConfig, LMParams};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"GSAECKPT";
const VERSION: u32 = 1;

pub const KIND_LM: &str = "lm";
pub const KIND_SAE: &str = "sae";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("invalid UTF-8 before byte {}", self.pos)))
    }
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_owned(), meta: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.kind);
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, m) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= buf.len()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
            let bytes = r.take(n * 8)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key {key:?}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let v = self.meta_str(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("meta key {key:?} is not a count: {v:?}")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }
}

pub fn lm_checkpoint(lm: &LMParams, vocab: &Vocab) -> Checkpoint {
    let c = &lm.config;
    let mut ck = Checkpoint::new(KIND_LM);
    for (k, v) in [
        ("vocab_size", c.vocab_size),
        ("dim", c.dim),
        ("layers", c.layers),
        ("heads", c.heads),
        ("context_len", c.context_len),
        ("hook_layer", c.hook_layer),
        ("mlp_mult", c.mlp_mult),
    ] {
        ck.meta.insert(k.into(), v.to_string());
    }
    ck.meta.insert("vocab".into(), vocab.words().join(" "));
    ck.tensors = lm.tensor_names().into_iter().zip(lm.tensors().into_iter().cloned()).collect();
    ck
}

pub fn lm_from_checkpoint(ck: &Checkpoint) -> Result<(LMParams, Vocab)> {
    ck.expect_kind(KIND_LM)?;
    let config = LMConfig {
        vocab_size: ck.meta_usize("vocab_size")?,
        dim: ck.meta_usize("dim")?,
        layers: ck.meta_usize("layers")?,
        heads: ck.meta_usize("heads")?,
        context_len: ck.meta_usize("context_len")?,
        hook_layer: ck.meta_usize("hook_layer")?,
        mlp_mult: ck.meta_usize("mlp_mult")?,
    };
    let vocab = Vocab::from_words(ck.meta_str("vocab")?.split(' ').map(String::from).collect())?;
    if vocab.len() != config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} words, config says {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let tensors = ck.tensors.iter().map(|(_, m)| m.clone()).collect();
    Ok((LMParams::from_tensors(&config, tensors)?, vocab))
}

pub fn sae_checkpoint(sae: &SAEParams, hook_layer: usize) -> Checkpoint {
    let mut ck = Checkpoint::new(KIND_SAE);
    ck.meta.insert("hook_layer".into(), hook_layer.to_string());
    ck.tensors = vec![("w_enc".into(), sae.w_enc.clone()), ("w_dec".into(), sae.w_dec.clone())];
    ck
}

/// Returns the SAE and the hook layer it was trained on.
pub fn sae_from_checkpoint(ck: &Checkpoint) -> Result<(SAEParams, usize)> {
    ck.expect_kind(KIND_SAE)?;
    let sae = SAEParams::new(ck.tensor("w_enc")?.clone(), ck.tensor("w_dec")?.clone())?;
    Ok((sae, ck.meta_usize("hook_layer")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Lexicon;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("demo");
        ck.meta.insert("a".into(), "1".into());
        ck.tensors.push(("m".into(), Matrix::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 3e300]]).unwrap()));
        ck
    }

    fn bitwise_eq(a: &Checkpoint, b: &Checkpoint) -> bool {
        a.kind == b.kind
            && a.meta == b.meta
            && a.tensors.len() == b.tensors.len()
            && a.tensors.iter().zip(&b.tensors).all(|((na, ma), (nb, mb))| {
                na == nb
                    && ma.shape() == mb.shape()
                    && ma.data().iter().zip(mb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(bitwise_eq(&ck, &back));
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
    }

    #[test]
    fn lm_round_trip() {
        let vocab = Vocab::from_lexicon(&Lexicon::default()).unwrap();
        let cfg = LMConfig { vocab_size: vocab.len(), dim: 16, heads: 2, ..Default::default() };
        let lm = LMParams::init(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.ckpt");
        lm_checkpoint(&lm, &vocab).save(&path).unwrap();
        let (back, v2) = lm_from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back, lm);
        assert_eq!(v2, vocab);
    }

    #[test]
    fn sae_round_trip_and_kind_check() {
        let sae = SAEParams::new(Matrix::filled(4, 6, 0.25), Matrix::filled(6, 4, -0.5)).unwrap();
        let ck = sae_checkpoint(&sae, 2);
        let (back, layer) = sae_from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!((back, layer), (sae, 2));
        assert!(lm_from_checkpoint(&ck).is_err());
    }
}
