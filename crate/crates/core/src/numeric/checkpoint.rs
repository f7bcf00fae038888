//! Parameter checkpoints: a compact little-endian binary layout and a JSON
//! mirror of the same content.
//!
//! Binary layout (all integers `u64` little-endian unless noted):
//!
//! ```text
//! magic  b"FLARECK1"
//! step
//! metadata length, metadata UTF-8 bytes
//! block count
//! per block: name length, name bytes, rows, cols,
//!            value[rows*cols], adam_m[..], adam_v[..]   (f64 LE)
//! ```
//!
//! Gradients are transient and not stored.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Matrix, NumericError, ParamBlock};

const MAGIC: &[u8; 8] = b"FLARECK1";

/// Everything needed to resume or evaluate a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Free-form document stored alongside the tensors (the model layer
    /// stores its config here).
    pub metadata: String,
    pub blocks: Vec<ParamBlock>,
}

#[derive(Serialize, Deserialize)]
struct JsonBlock {
    name: String,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonCheckpoint {
    step: u64,
    metadata: String,
    blocks: Vec<JsonBlock>,
}

impl Checkpoint {
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), NumericError> {
        w.write_all(MAGIC)?;
        w.write_all(&self.step.to_le_bytes())?;
        write_bytes(&mut w, self.metadata.as_bytes())?;
        w.write_all(&(self.blocks.len() as u64).to_le_bytes())?;
        for b in &self.blocks {
            write_bytes(&mut w, b.name.as_bytes())?;
            let (rows, cols) = b.shape();
            w.write_all(&(rows as u64).to_le_bytes())?;
            w.write_all(&(cols as u64).to_le_bytes())?;
            for m in [&b.value, &b.adam_m, &b.adam_v] {
                for v in m.as_slice() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_binary(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, NumericError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NumericError::Checkpoint("bad magic bytes".into()));
        }
        let step = read_u64(&mut r)?;
        let metadata = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| NumericError::Checkpoint("metadata is not UTF-8".into()))?;
        let n = read_u64(&mut r)?;
        let mut blocks = Vec::new();
        for _ in 0..n {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| NumericError::Checkpoint("block name is not UTF-8".into()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| NumericError::Checkpoint(format!("block {name}: shape overflow")))?;
            let mut read_matrix = || -> Result<Matrix, NumericError> {
                let mut data = Vec::with_capacity(len.min(1 << 24));
                for _ in 0..len {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    data.push(f64::from_le_bytes(b));
                }
                Matrix::from_vec(rows, cols, data)
            };
            let value = read_matrix()?;
            let adam_m = read_matrix()?;
            let adam_v = read_matrix()?;
            let mut block = ParamBlock::new(name, value);
            block.adam_m = adam_m;
            block.adam_v = adam_v;
            blocks.push(block);
        }
        Ok(Self {
            step,
            metadata,
            blocks,
        })
    }

    pub fn to_json(&self) -> Result<String, NumericError> {
        let doc = JsonCheckpoint {
            step: self.step,
            metadata: self.metadata.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| JsonBlock {
                    name: b.name.clone(),
                    rows: b.value.rows(),
                    cols: b.value.cols(),
                    value: b.value.as_slice().to_vec(),
                    adam_m: b.adam_m.as_slice().to_vec(),
                    adam_v: b.adam_v.as_slice().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&doc).map_err(|e| NumericError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, NumericError> {
        let doc: JsonCheckpoint =
            serde_json::from_str(s).map_err(|e| NumericError::Checkpoint(e.to_string()))?;
        let blocks = doc
            .blocks
            .into_iter()
            .map(|b| {
                let mut block =
                    ParamBlock::new(b.name, Matrix::from_vec(b.rows, b.cols, b.value)?);
                block.adam_m = Matrix::from_vec(b.rows, b.cols, b.adam_m)?;
                block.adam_v = Matrix::from_vec(b.rows, b.cols, b.adam_v)?;
                Ok(block)
            })
            .collect::<Result<_, NumericError>>()?;
        Ok(Self {
            step: doc.step,
            metadata: doc.metadata,
            blocks,
        })
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, NumericError> {
    let len = read_u64(r)? as usize;
    if len > 1 << 30 {
        return Err(NumericError::Checkpoint("length field too large".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_block() -> impl Strategy<Value = ParamBlock> {
        (1usize..4, 1usize..4, "[a-z.0-9]{1,12}").prop_flat_map(|(r, c, name)| {
            let n = r * c;
            (
                prop::collection::vec(-1e6f64..1e6, n),
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(0.0f64..1.0, n),
            )
                .prop_map(move |(v, m, s)| {
                    let mut b = ParamBlock::new(name.clone(), Matrix::from_vec(r, c, v).unwrap());
                    b.adam_m = Matrix::from_vec(r, c, m).unwrap();
                    b.adam_v = Matrix::from_vec(r, c, s).unwrap();
                    b
                })
        })
    }

    proptest! {
        #[test]
        fn binary_and_json_round_trip(
            blocks in prop::collection::vec(arb_block(), 0..4),
            step in any::<u64>(),
        ) {
            let ck = Checkpoint { step, metadata: "{\"k\":1}".into(), blocks };
            let bin = ck.to_binary();
            let back = Checkpoint::read_binary(bin.as_slice()).unwrap();
            prop_assert_eq!(back.to_binary(), bin);
            prop_assert_eq!(&back, &ck);

            let json = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            prop_assert_eq!(json.step, ck.step);
            for (a, b) in json.blocks.iter().zip(&ck.blocks) {
                prop_assert_eq!(&a.name, &b.name);
                for (x, y) in a.value.as_slice().iter().zip(b.value.as_slice()) {
                    prop_assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        assert!(Checkpoint::read_binary(&b"NOTACKPT"[..]).is_err());
        let ck = Checkpoint {
            step: 3,
            metadata: String::new(),
            blocks: vec![ParamBlock::zeros("w", 2, 2)],
        };
        let bin = ck.to_binary();
        assert!(Checkpoint::read_binary(&bin[..bin.len() - 1]).is_err());
    }
}
