//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic "BVCK" | version u32 = 1
//! config: vocab_size, max_len, d_model, n_heads, n_layers, d_ff u32,
//!         dropout_rate as the u32 bit pattern of an f32
//! vocabulary: u32 count, then per token u32 byte length + UTF-8
//! tensor count u32, then per tensor:
//!         u16 name length + UTF-8 name, rows u32, cols u32, rows*cols f32
//! ```
//!
//! The vocabulary block holds the non-reserved tokens in id order (ids start
//! at 4). `n_classes` is always 3 and the head depth is recovered from the
//! `head.hiddenN.*` tensor names. Pooling is not stored; loaded configs use
//! `[CLS]` pooling.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{EncoderConfig, EncoderError, EncoderWeights, Pooling};
use crate::corpus::Label;
use crate::numerics::{Matrix, Parameter, Real};
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 4] = b"BVCK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), EncoderError> {
    let v = u32::try_from(v).map_err(|_| EncoderError::Malformed(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialise weights (as `f32`), their config and the vocabulary. The file
/// is written to a temporary sibling and renamed into place.
pub fn save_checkpoint<T: Real>(
    weights: &EncoderWeights<T>,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<(), EncoderError> {
    let c = &weights.config;
    if vocab.len() > c.vocab_size {
        return Err(EncoderError::VocabTooLarge {
            vocab: vocab.len(),
            vocab_size: c.vocab_size,
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.vocab_size, c.max_len, c.d_model, c.n_heads, c.n_layers, c.d_ff] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&c.dropout_rate.to_bits().to_le_bytes());

    put_u32(&mut out, vocab.words().len())?;
    for w in vocab.words() {
        put_u32(&mut out, w.len())?;
        out.extend_from_slice(w.as_bytes());
    }

    put_u32(&mut out, weights.params.len())?;
    for p in &weights.params {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| EncoderError::Malformed(format!("tensor name too long: {}", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        put_u32(&mut out, p.value.rows())?;
        put_u32(&mut out, p.value.cols())?;
        for &x in p.value.as_slice() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, &out)?;
    tmp.persist(path).map_err(|e| EncoderError::Io(e.error))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EncoderError> {
        if self.buf.len() - self.pos < n {
            return Err(EncoderError::Malformed(format!("unexpected end of file reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, EncoderError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize, EncoderError> {
        self.u32(what).map(|v| v as usize)
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String, EncoderError> {
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| EncoderError::Malformed(format!("{what} is not valid UTF-8")))
    }
}

struct RawCheckpoint {
    config: EncoderConfig,
    vocab: Vocabulary,
    tensors: Vec<(String, Matrix<f32>)>,
}

fn read_raw(path: &Path) -> Result<RawCheckpoint, EncoderError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| EncoderError::BadMagic)? != MAGIC {
        return Err(EncoderError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(EncoderError::VersionUnsupported(version));
    }
    let mut config = EncoderConfig {
        vocab_size: r.usize("config")?,
        max_len: r.usize("config")?,
        d_model: r.usize("config")?,
        n_heads: r.usize("config")?,
        n_layers: r.usize("config")?,
        d_ff: r.usize("config")?,
        dropout_rate: f32::from_bits(r.u32("config")?),
        n_classes: Label::COUNT,
        head_layers: 0,
        pooling: Pooling::Cls,
    };

    let n_words = r.usize("vocabulary count")?;
    let mut words = Vec::with_capacity(n_words.min(1 << 20));
    for _ in 0..n_words {
        let len = r.usize("token length")?;
        words.push(r.string(len, "token")?);
    }
    let vocab = Vocabulary::from_tokens(words)
        .map_err(|e| EncoderError::Malformed(e.to_string()))?;

    let n_tensors = r.usize("tensor count")?;
    let mut tensors = Vec::with_capacity(n_tensors.min(1 << 16));
    for _ in 0..n_tensors {
        let len = r.u16("tensor name length")? as usize;
        let name = r.string(len, "tensor name")?;
        let rows = r.usize("tensor rows")?;
        let cols = r.usize("tensor cols")?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| EncoderError::Malformed(format!("tensor {name} too large")))?;
        let data = r
            .take(n, &name)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data).expect("sized above")));
    }
    if r.pos != bytes.len() {
        return Err(EncoderError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    config.head_layers = (1..)
        .take_while(|k| tensors.iter().any(|(n, _)| *n == format!("head.hidden{k}.weight")))
        .count();
    Ok(RawCheckpoint {
        config,
        vocab,
        tensors,
    })
}

fn assemble(
    config: EncoderConfig,
    vocab: &Vocabulary,
    tensors: Vec<(String, Matrix<f32>)>,
) -> Result<EncoderWeights<f32>, EncoderError> {
    config.validate()?;
    if vocab.len() > config.vocab_size {
        return Err(EncoderError::VocabTooLarge {
            vocab: vocab.len(),
            vocab_size: config.vocab_size,
        });
    }
    let schema = config.tensor_schema();
    let mut by_name: HashMap<String, Matrix<f32>> = HashMap::with_capacity(tensors.len());
    for (name, m) in tensors {
        if by_name.insert(name.clone(), m).is_some() {
            return Err(EncoderError::Malformed(format!("duplicate tensor {name}")));
        }
    }
    let mut params = Vec::with_capacity(schema.len());
    for s in &schema {
        let m = by_name
            .remove(&s.name)
            .ok_or_else(|| EncoderError::TensorMissing(s.name.clone()))?;
        if m.shape() != (s.rows, s.cols) {
            return Err(EncoderError::ShapeMismatch {
                name: s.name.clone(),
                expected: (s.rows, s.cols),
                got: m.shape(),
            });
        }
        params.push(Parameter::new(s.name.clone(), m));
    }
    if let Some(extra) = schema_order_leftover(&by_name) {
        return Err(EncoderError::UnexpectedTensor(extra));
    }
    EncoderWeights::from_parts(config, params)
}

fn schema_order_leftover(rest: &HashMap<String, Matrix<f32>>) -> Option<String> {
    rest.keys().min().cloned()
}

/// Read a checkpoint, using the config stored in the file.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(EncoderWeights<f32>, EncoderConfig, Vocabulary), EncoderError> {
    let raw = read_raw(path)?;
    let weights = assemble(raw.config, &raw.vocab, raw.tensors)?;
    Ok((weights, raw.config, raw.vocab))
}

/// Read a checkpoint and validate it against `expected` rather than the
/// stored config. The first schema tensor that is absent is reported as
/// [`EncoderError::TensorMissing`].
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &EncoderConfig,
) -> Result<(EncoderWeights<f32>, Vocabulary), EncoderError> {
    let raw = read_raw(path)?;
    let weights = assemble(*expected, &raw.vocab, raw.tensors)?;
    Ok((weights, raw.vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{apply_freeze_policy, FreezePolicy};
    use crate::tokenizer::build_vocab;

    fn config(n_layers: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 40,
            max_len: 8,
            d_model: 8,
            n_heads: 2,
            n_layers,
            d_ff: 16,
            ..Default::default()
        }
    }

    fn vocab() -> Vocabulary {
        build_vocab(&["the room was clean, très calme !"], 40, 1).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bvck");
        let mut w = EncoderWeights::<f32>::init(config(2), 5).unwrap();
        w.params[3].value.as_mut_slice()[0] = f32::MIN_POSITIVE / 3.0;
        save_checkpoint(&w, &vocab(), &path).unwrap();
        let (back, cfg, v) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, w.config);
        assert_eq!(v, vocab());
        for (a, b) in back.params.iter().zip(&w.params) {
            assert_eq!(a.name, b.name);
            let bits = |m: &Matrix<f32>| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(&fs::read(&path).unwrap()[..4], b"BVCK");
    }

    #[test]
    fn freeze_flags_are_not_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        let mut w = EncoderWeights::<f32>::init(config(1), 5).unwrap();
        apply_freeze_policy(&mut w, &FreezePolicy::new(1.0));
        save_checkpoint(&w, &vocab(), &path).unwrap();
        let (back, _, _) = load_checkpoint(&path).unwrap();
        assert!(back.frozen_names().is_empty());
    }

    #[test]
    fn corrupted_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        let w = EncoderWeights::<f32>::init(config(1), 5).unwrap();
        save_checkpoint(&w, &vocab(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EncoderError::BadMagic)));
        fs::write(&path, b"BV").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EncoderError::BadMagic)));
    }

    #[test]
    fn unsupported_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        let w = EncoderWeights::<f32>::init(config(1), 5).unwrap();
        save_checkpoint(&w, &vocab(), &path).unwrap();
        let good = fs::read(&path).unwrap();
        let mut bytes = good.clone();
        bytes[4] = 2;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EncoderError::VersionUnsupported(2))));
        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EncoderError::Malformed(_))));
    }

    #[test]
    fn deeper_config_reports_first_missing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        let w = EncoderWeights::<f32>::init(config(2), 5).unwrap();
        save_checkpoint(&w, &vocab(), &path).unwrap();
        // first tensor of the 4-layer schema absent from the 2-layer one
        let have: Vec<String> = config(2).tensor_schema().into_iter().map(|s| s.name).collect();
        let first_absent = config(4)
            .tensor_schema()
            .into_iter()
            .map(|s| s.name)
            .find(|n| !have.contains(n))
            .unwrap();
        assert_eq!(first_absent, "layer3.attn.q.weight");
        match load_checkpoint_expecting(&path, &config(4)) {
            Err(EncoderError::TensorMissing(name)) => assert_eq!(name, first_absent),
            other => panic!("unexpected {other:?}"),
        }
        let mut wider = config(2);
        wider.d_ff = 32;
        assert!(matches!(
            load_checkpoint_expecting(&path, &wider),
            Err(EncoderError::ShapeMismatch { name, .. }) if name == "layer1.ffn.in.weight"
        ));
    }

    #[test]
    fn head_depth_recovered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        let mut c = config(1);
        c.head_layers = 2;
        let w = EncoderWeights::<f32>::init(c, 5).unwrap();
        save_checkpoint(&w, &vocab(), &path).unwrap();
        let (_, cfg, _) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg.head_layers, 2);
    }
}
