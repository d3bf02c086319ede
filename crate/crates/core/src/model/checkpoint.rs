//! Binary checkpoint format.
//!
//! ```text
//! "FRSM"                      4 bytes
//! version                     u32 LE (currently 1)
//! vocab_size, hidden_dim, num_layers, num_heads, max_seq_len, seed
//!                             6 x u64 LE
//! embedding                   vocab_size x hidden_dim
//! per layer:
//!   attn_norm                 hidden_dim
//!   wq, wk, wv, wo            hidden_dim x hidden_dim each
//!   mlp_norm                  hidden_dim
//!   w_up                      4*hidden_dim x hidden_dim
//!   w_down                    hidden_dim x 4*hidden_dim
//! final_norm                  hidden_dim
//! lm_head                     vocab_size x hidden_dim
//! ```
//!
//! Every tensor is row-major little-endian `f32`. Projection matrices hold
//! one output feature per row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LayerWeights, ModelConfig, TargetModel};
use crate::error::{Error, Result};
use crate::kernels::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FRSM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_f32s(w: &mut impl Write, values: &[f32]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &TargetModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn write_checkpoint(model: &TargetModel, w: &mut impl Write) -> Result<()> {
    let c = model.config();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for field in [
        c.vocab_size as u64,
        c.hidden_dim as u64,
        c.num_layers as u64,
        c.num_heads as u64,
        c.max_seq_len as u64,
        c.seed,
    ] {
        w.write_all(&field.to_le_bytes())?;
    }
    write_f32s(w, model.embedding().data())?;
    for l in model.layers() {
        write_f32s(w, &l.attn_norm)?;
        for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
            write_f32s(w, m.data())?;
        }
        write_f32s(w, &l.mlp_norm)?;
        write_f32s(w, l.w_up.data())?;
        write_f32s(w, l.w_down.data())?;
    }
    write_f32s(w, model.final_norm())?;
    write_f32s(w, model.lm_head().data())?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    what: String,
}

impl<R: Read> Reader<R> {
    fn exact<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| self.truncated(field, e))?;
        Ok(buf)
    }

    fn truncated(&self, field: &str, e: std::io::Error) -> Error {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("{}: truncated while reading {field}", self.what))
        } else {
            Error::Io(e)
        }
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact(field)?))
    }

    fn usize(&mut self, field: &str) -> Result<usize> {
        let v = self.u64(field)?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= 1 << 32)
            .ok_or_else(|| Error::Format(format!("{}: {field} = {v} is implausible", self.what)))
    }

    fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.inner
            .read_exact(&mut bytes)
            .map_err(|e| self.truncated(field, e))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("{}: non-finite weight in {field}", self.what)));
        }
        Ok(values)
    }

    fn matrix(&mut self, rows: usize, cols: usize, field: &str) -> Result<Matrix> {
        let data = self.f32s(rows * cols, field)?;
        Matrix::new(rows, cols, data).map_err(|e| Error::Format(format!("{}: {e}", self.what)))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TargetModel> {
    let file = File::open(path)?;
    read_checkpoint(BufReader::new(file), &path.display().to_string())
}

pub(crate) fn read_checkpoint(inner: impl Read, what: &str) -> Result<TargetModel> {
    let mut r = Reader {
        inner,
        what: what.to_string(),
    };
    if &r.exact::<4>("magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{what}: bad magic, not an FRSM checkpoint")));
    }
    let version = u32::from_le_bytes(r.exact("version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{what}: unsupported checkpoint version {version}"
        )));
    }
    let config = ModelConfig {
        vocab_size: r.usize("vocab_size")?,
        hidden_dim: r.usize("hidden_dim")?,
        num_layers: r.usize("num_layers")?,
        num_heads: r.usize("num_heads")?,
        max_seq_len: r.usize("max_seq_len")?,
        seed: r.u64("seed")?,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("{what}: header rejected: {e}")))?;
    let (v, d, f) = (config.vocab_size, config.hidden_dim, config.mlp_dim());
    let embedding = r.matrix(v, d, "embedding")?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for i in 0..config.num_layers {
        let name = |s: &str| format!("layer {i} {s}");
        layers.push(LayerWeights {
            attn_norm: r.f32s(d, &name("attn_norm"))?,
            wq: r.matrix(d, d, &name("wq"))?,
            wk: r.matrix(d, d, &name("wk"))?,
            wv: r.matrix(d, d, &name("wv"))?,
            wo: r.matrix(d, d, &name("wo"))?,
            mlp_norm: r.f32s(d, &name("mlp_norm"))?,
            w_up: r.matrix(f, d, &name("w_up"))?,
            w_down: r.matrix(d, f, &name("w_down"))?,
        });
    }
    let final_norm = r.f32s(d, "final_norm")?;
    let lm_head = r.matrix(v, d, "lm_head")?;
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!("{what}: trailing bytes after lm_head")));
    }
    TargetModel::from_parts(config, embedding, layers, final_norm, lm_head)
        .map_err(|e| Error::Format(format!("{what}: {e}")))
}
