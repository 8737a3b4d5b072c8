//! Binary checkpoints: magic bytes, a length-prefixed JSON header
//! (kind, config, vocabulary, tensor table), then raw little-endian `f64`
//! tensor data in header order. Round trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::model::{Seq2SeqModel, StandaloneDecoder};
use crate::seqcore::params::{ModelConfig, ParamStore};
use crate::seqcore::vocab::Vocabulary;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"QAPCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Seq2seq,
    StandaloneDecoder,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: Kind,
    config: ModelConfig,
    vocab: Vocabulary,
    tensors: Vec<TensorEntry>,
}

fn encode(kind: Kind, config: &ModelConfig, vocab: &Vocabulary, params: &ParamStore) -> Vec<u8> {
    let header = Header {
        kind,
        config: config.clone(),
        vocab: vocab.clone(),
        tensors: params
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in params.iter() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode(bytes: &[u8], expected: Kind) -> Result<(ModelConfig, Vocabulary, ParamStore)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.kind != expected {
        return Err(Error::Checkpoint(format!(
            "expected a {expected:?} checkpoint, found {:?}",
            header.kind
        )));
    }
    let mut data = &body[hlen..];
    let mut params = ParamStore::new();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        if data.len() < n * 8 {
            return Err(bad("truncated tensor data"));
        }
        let values = data[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, values));
        data = &data[n * 8..];
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header.config, header.vocab, params))
}

/// Writes to a sibling temp file and renames, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Seq2SeqModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(Kind::Seq2seq, self.config(), self.vocab(), self.params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, vocab, params) = decode(bytes, Kind::Seq2seq)?;
        Self::from_parts(config, vocab, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

impl StandaloneDecoder {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(Kind::StandaloneDecoder, self.config(), self.vocab(), self.params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, vocab, params) = decode(bytes, Kind::StandaloneDecoder)?;
        Self::from_parts(config, vocab, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["x", "y", "z"]).unwrap()
    }

    #[test]
    fn seq2seq_round_trip_is_bit_exact() {
        let v = vocab();
        let m = Seq2SeqModel::new(ModelConfig::tiny(v.len()), v, 4).unwrap();
        let back = Seq2SeqModel::from_bytes(&m.to_bytes()).unwrap();
        assert!(back.params().bit_eq(m.params()));
        assert_eq!(back.config(), m.config());
        assert_eq!(back.vocab(), m.vocab());
    }

    #[test]
    fn kind_and_corruption_are_detected() {
        let v = vocab();
        let d = StandaloneDecoder::new(ModelConfig::tiny(v.len()), v, 4).unwrap();
        let bytes = d.to_bytes();
        assert!(Seq2SeqModel::from_bytes(&bytes).is_err());
        assert!(StandaloneDecoder::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(StandaloneDecoder::from_bytes(b"garbage").is_err());
        let back = StandaloneDecoder::from_bytes(&bytes).unwrap();
        assert!(back.params().bit_eq(d.params()));
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ag.ckpt");
        let v = vocab();
        let m = Seq2SeqModel::new(ModelConfig::tiny(v.len()), v, 9).unwrap();
        m.save(&path).unwrap();
        let back = Seq2SeqModel::load(&path).unwrap();
        assert!(back.params().bit_eq(m.params()));
        assert!(!dir.path().join("ag.ckpt.tmp").exists());
    }
}
