//! Checkpoint files.
//!
//! Layout: the 8-byte magic `SYNLMCK1`, the manifest length as a little-endian
//! `u64`, a JSON manifest (config, embedded vocabularies with SHA-256 digests,
//! tensor table), then every tensor as little-endian `f32` in table order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synlm_core::model::{Model, ModelConfig};
use synlm_core::tensor::Matrix;
use synlm_core::vocab::{JointActionVocab, NGramVocab};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SYNLMCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: JointActionVocab,
    /// Present for scaffold variants.
    pub ngrams: Option<NGramVocab>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    endianness: String,
    dtype: String,
    config: ModelConfig,
    vocab: VocabFile,
    vocab_sha256: String,
    #[serde(default)]
    ngrams: Option<VocabFile>,
    #[serde(default)]
    ngrams_sha256: Option<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(transparent)]
struct VocabFile(String);

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset into the payload.
    offset: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Data(format!("invalid checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn new(model: Model<f32>, vocab: JointActionVocab, ngrams: Option<NGramVocab>) -> Result<Self> {
        check_consistent(model.config(), &vocab, ngrams.as_ref())?;
        Ok(Checkpoint { model, vocab, ngrams })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let vocab = self.vocab.to_lines();
        let ngrams = self.ngrams.as_ref().map(NGramVocab::to_lines);
        let mut offset = 0;
        let tensors = self
            .model
            .specs()
            .iter()
            .map(|s| {
                let e = TensorEntry {
                    name: s.name.clone(),
                    shape: [s.shape.0, s.shape.1],
                    offset,
                };
                offset += 4 * s.shape.0 * s.shape.1;
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            endianness: "little".into(),
            dtype: "f32".into(),
            config: self.model.config().clone(),
            vocab_sha256: sha256_hex(vocab.as_bytes()),
            vocab: VocabFile(vocab),
            ngrams_sha256: ngrams.as_ref().map(|n| sha256_hex(n.as_bytes())),
            ngrams: ngrams.map(VocabFile),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated manifest"))?;
        let m: Manifest = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        if m.format_version != FORMAT_VERSION || m.endianness != "little" || m.dtype != "f32" {
            return Err(bad("unsupported format, endianness or dtype"));
        }
        if sha256_hex(m.vocab.0.as_bytes()) != m.vocab_sha256 {
            return Err(bad("vocabulary digest mismatch"));
        }
        let vocab = JointActionVocab::from_lines(&m.vocab.0)?;
        let ngrams = match (&m.ngrams, &m.ngrams_sha256) {
            (Some(n), Some(d)) if sha256_hex(n.0.as_bytes()) == *d => Some(NGramVocab::from_lines(&n.0)?),
            (None, None) => None,
            _ => return Err(bad("n-gram vocabulary digest mismatch")),
        };
        m.config.validate().map_err(|e| bad(e.to_string()))?;
        check_consistent(&m.config, &vocab, ngrams.as_ref())?;
        let specs = m.config.param_specs();
        if specs.len() != m.tensors.len() {
            return Err(bad("tensor table does not match the configuration"));
        }
        let payload = &bytes[16 + len..];
        let mut params = Vec::with_capacity(specs.len());
        let mut expected_offset = 0;
        for (s, e) in specs.iter().zip(&m.tensors) {
            if s.name != e.name || [s.shape.0, s.shape.1] != e.shape || e.offset != expected_offset {
                return Err(bad(format!("unexpected tensor entry {}", e.name)));
            }
            let n = s.shape.0 * s.shape.1;
            let raw = payload
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| bad(format!("payload too short for {}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(Matrix::from_vec(s.shape.0, s.shape.1, data));
            expected_offset += 4 * n;
        }
        if payload.len() != expected_offset {
            return Err(bad("trailing bytes after the last tensor"));
        }
        let model = Model::from_params(m.config, params)?;
        Ok(Checkpoint { model, vocab, ngrams })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn check_consistent(c: &ModelConfig, vocab: &JointActionVocab, ngrams: Option<&NGramVocab>) -> Result<()> {
    let expected = if c.variant.is_joint() { vocab.len() } else { vocab.tokens().len() };
    if c.vocab_size != expected {
        return Err(bad(format!("vocab_size {} but the vocabulary has {expected} entries", c.vocab_size)));
    }
    match (c.variant.is_scaffold(), ngrams) {
        (true, Some(n)) if n.len() == c.ngram_vocab_size => Ok(()),
        (false, None) => Ok(()),
        _ => Err(bad("n-gram vocabulary does not match the variant")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use synlm_core::model::{HeadMasks, Variant};
    use synlm_core::transitions::{oracle, ActionSequence};
    use synlm_core::tree::parse_tree;
    use synlm_core::vocab::{build_ngram_vocab, build_token_vocab};

    fn setup(variant: Variant) -> Checkpoint {
        let trees = [parse_tree("(S (NP The birds) (VP sang))").unwrap()];
        let vocab = JointActionVocab::from_trees(build_token_vocab(&trees, 1).unwrap(), &trees);
        let oracles: Vec<ActionSequence> = trees.iter().map(oracle).collect();
        let ngrams = variant.is_scaffold().then(|| build_ngram_vocab(&oracles));
        let config = ModelConfig {
            hidden: 16,
            heads: 4,
            layers: 2,
            max_len: 16,
            ..ModelConfig::for_vocabs(variant, &vocab, ngrams.as_ref())
        };
        Checkpoint::new(Model::new(config, 7).unwrap(), vocab, ngrams).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in Variant::ALL {
            let ck = setup(v);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            if v == Variant::Plm {
                let ids = [2u32, 6, 7, 3, 4];
                let a = ck.model.next_log_probs(&ids, HeadMasks::None).unwrap();
                let b = back.model.next_log_probs(&ids, HeadMasks::None).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = setup(Variant::SclmNext).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let pos = text.find("The").unwrap();
        let mut tampered = bytes.clone();
        tampered[pos] = b'X';
        let e = Checkpoint::from_bytes(&tampered).unwrap_err();
        assert!(e.to_string().contains("digest"), "{e}");
    }
}
