//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LATF"                      magic
//! u32                         format version (1)
//! u32 len, bytes              config echo (canonical config text)
//! u32 len, bytes              run state ("key = value" lines: step, nan_skips, cursors)
//! u32 × 6                     model shape: layers, d_model, heads, vocab, context, d_ff
//! u32 count, tensors          parameters
//! u32 count, tensors          momentum buffers (0 or one per parameter)
//! [u8; 32]                    SHA-256 of everything above
//! ```
//!
//! Each tensor is `u16 name_len, name, u32 ndim, u32 dims…, f32 payload`.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::fsutil::atomic_write;
use super::CliError;
use crate::diff::Tensor;
use crate::lm::{ModelConfig, Parameters};
use crate::trainer::{Cursors, TrainState};

pub const MAGIC: &[u8; 4] = b"LATF";
pub const VERSION: u32 = 1;

/// A decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub state: TrainState,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensors(out: &mut Vec<u8>, names: &[String], tensors: &[Tensor]) {
    put_u32(out, tensors.len());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape().len());
        for &d in t.shape() {
            put_u32(out, d);
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn state_text(state: &TrainState) -> String {
    format!(
        "step = {}\nnan_skips = {}\ncursor.train = {}\ncursor.retain = {}\ncursor.benign = {}\n",
        state.step, state.nan_skips, state.cursors.train, state.cursors.retain, state.cursors.benign
    )
}

/// Serializes a training state with its config echo.
pub fn encode(config_text: &str, state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_text(&mut out, config_text);
    put_text(&mut out, &state_text(state));
    let m = state.params.config();
    for v in [m.n_layers, m.d_model, m.n_heads, m.vocab_size, m.max_context, m.d_ff] {
        put_u32(&mut out, v);
    }
    let names = state.params.names();
    put_tensors(&mut out, &names, state.params.tensors());
    put_tensors(&mut out, &names, state.momentum.tensors());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Io(format!("corrupt checkpoint: {}", msg.into()))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self) -> Result<String, CliError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("text is not UTF-8"))
    }

    fn tensors(&mut self, names: &[String], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>, CliError> {
        let count = self.u32()?;
        if count != 0 && count != names.len() {
            return Err(corrupt(format!("expected {} tensors, found {count}", names.len())));
        }
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            if name != names[i] {
                return Err(corrupt(format!("tensor {i} is `{name}`, expected `{}`", names[i])));
            }
            let ndim = self.u32()?;
            let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
            if shape != shapes[i] {
                return Err(corrupt(format!(
                    "tensor `{name}` has shape {shape:?}, expected {:?}",
                    shapes[i]
                )));
            }
            let len: usize = shape.iter().product();
            let data = self
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.push(Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?);
        }
        Ok(out)
    }
}

fn parse_state(text: &str) -> Result<BTreeMap<&str, u64>, CliError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l.split_once('=').ok_or_else(|| corrupt("malformed state line"))?;
            let v = v
                .trim()
                .parse()
                .map_err(|_| corrupt(format!("bad state value `{l}`")))?;
            Ok((k.trim(), v))
        })
        .collect()
}

/// Parses and verifies a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CliError> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing LATF magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let config_text = r.text()?;
    let state_text = r.text()?;
    let s = parse_state(&state_text)?;
    let dims: Vec<usize> = (0..6).map(|_| r.u32()).collect::<Result<_, _>>()?;
    let model = ModelConfig {
        n_layers: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        vocab_size: dims[3],
        max_context: dims[4],
        d_ff: dims[5],
    };
    let template = Parameters::<f32>::zeros(model).map_err(|e| corrupt(e.to_string()))?;
    let names = template.names();
    let shapes: Vec<Vec<usize>> = template.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let params = r.tensors(&names, &shapes)?;
    if params.len() != names.len() {
        return Err(corrupt("no parameter tensors"));
    }
    let momentum = r.tensors(&names, &shapes)?;
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    let params = Parameters::from_tensors(model, params).map_err(|e| corrupt(e.to_string()))?;
    let momentum = if momentum.is_empty() {
        params.zeros_like()
    } else {
        Parameters::from_tensors(model, momentum).map_err(|e| corrupt(e.to_string()))?
    };
    let get = |k: &str| {
        s.get(k)
            .copied()
            .ok_or_else(|| corrupt(format!("state is missing `{k}`")))
    };
    Ok(Checkpoint {
        config_text,
        state: TrainState {
            step: get("step")? as usize,
            params,
            momentum,
            nan_skips: get("nan_skips")? as usize,
            cursors: Cursors {
                train: get("cursor.train")?,
                retain: get("cursor.retain")?,
                benign: get("cursor.benign")?,
            },
        },
    })
}

pub fn save_checkpoint(path: &Path, config_text: &str, state: &TrainState) -> Result<(), CliError> {
    atomic_write(path, &encode(config_text, state))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn state() -> TrainState {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            vocab_size: 12,
            max_context: 8,
            d_ff: 16,
        };
        let params = Parameters::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut s = TrainState::new(params);
        s.step = 17;
        s.nan_skips = 1;
        s.cursors = Cursors {
            train: 272,
            retain: 3,
            benign: 9,
        };
        s.momentum.tensors_mut()[0].data_mut()[0] = -0.5;
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = state();
        let bytes = encode("a = 1\n", &s);
        let c = decode(&bytes).unwrap();
        assert_eq!(c.config_text, "a = 1\n");
        assert_eq!(c.state, s);
        assert_eq!(encode("a = 1\n", &c.state), bytes);
    }

    #[test]
    fn checksum_detects_corruption() {
        let mut bytes = encode("", &state());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(decode(&bytes).unwrap_err().to_string().contains("checksum"));
        assert!(decode(b"NOPE").is_err());
    }
}
