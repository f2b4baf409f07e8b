//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `CPHEADV1`, u32 version, u8 mode (0 = scratch,
//! 1 = finetune), then u32 horizon, rank, vocab, embed_dim. After the header,
//! named double-precision arrays in a fixed order, each as u32 name length +
//! UTF-8 name + u64 element count + row-major f64 data. Everything is
//! little-endian.
//!
//! Scratch order:  decay, token_table, gate_weights, factor_w_{s}_{a}.
//! Finetune order: decay, token_table, gate_weights, shared_head,
//!                 adapter_{s}_{a}.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::heads::{FullHeadParams, ReducedHeadParams};
use crate::model::{HeadParams, Mode, Model};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CPHEADV1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_array(w: &mut impl Write, name: &str, data: &[f64]) -> Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u64::<LittleEndian>(data.len() as u64)?;
    for &x in data {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read, expect_name: &str, expect_len: usize) -> Result<Vec<f64>> {
    let name_len = r.read_u32::<LittleEndian>()? as usize;
    if name_len > 256 {
        return Err(Error::Checkpoint(format!(
            "array name length {name_len} is implausible"
        )));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name =
        String::from_utf8(name).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
    if name != expect_name {
        return Err(Error::Checkpoint(format!(
            "expected array {expect_name:?}, found {name:?}"
        )));
    }
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len != expect_len {
        return Err(Error::Checkpoint(format!(
            "array {name:?} has {len} elements, expected {expect_len}"
        )));
    }
    let mut data = vec![0.0; len];
    for x in &mut data {
        *x = r.read_f64::<LittleEndian>()?;
    }
    Ok(data)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let mode_byte = match model.mode {
        Mode::Scratch => 0u8,
        Mode::Finetune => 1u8,
    };
    w.write_u8(mode_byte)?;
    let (n, r, v, e) = (
        model.horizon(),
        model.rank(),
        model.vocab(),
        model.embed_dim(),
    );
    for dim in [n, r, v, e] {
        w.write_u32::<LittleEndian>(dim as u32)?;
    }

    write_array(&mut w, "decay", &[model.encoder.decay])?;
    write_array(
        &mut w,
        "token_table",
        model.encoder.token_table.as_slice().unwrap(),
    )?;
    match &model.head {
        HeadParams::Full(head) => {
            write_array(
                &mut w,
                "gate_weights",
                head.gate_weights.as_slice().unwrap(),
            )?;
            for (s, per_alpha) in head.factor_weights.iter().enumerate() {
                for (alpha, matrix) in per_alpha.iter().enumerate() {
                    write_array(
                        &mut w,
                        &format!("factor_w_{s}_{alpha}"),
                        matrix.as_slice().unwrap(),
                    )?;
                }
            }
        }
        HeadParams::Reduced(head) => {
            write_array(
                &mut w,
                "gate_weights",
                head.gate_weights.as_slice().unwrap(),
            )?;
            write_array(&mut w, "shared_head", head.shared_head.as_slice().unwrap())?;
            for (s, per_alpha) in head.adapters.iter().enumerate() {
                for (alpha, matrix) in per_alpha.iter().enumerate() {
                    write_array(
                        &mut w,
                        &format!("adapter_{s}_{alpha}"),
                        matrix.as_slice().unwrap(),
                    )?;
                }
            }
        }
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mode = match r.read_u8()? {
        0 => Mode::Scratch,
        1 => Mode::Finetune,
        other => return Err(Error::Checkpoint(format!("unknown mode byte {other}"))),
    };
    let n = r.read_u32::<LittleEndian>()? as usize;
    let rank = r.read_u32::<LittleEndian>()? as usize;
    let v = r.read_u32::<LittleEndian>()? as usize;
    let e = r.read_u32::<LittleEndian>()? as usize;
    if n == 0 || rank == 0 || v == 0 || e == 0 {
        return Err(Error::Checkpoint("degenerate dimensions in header".into()));
    }

    let decay = read_array(&mut r, "decay", 1)?[0];
    let table = read_array(&mut r, "token_table", v * e)?;
    let token_table =
        Array2::from_shape_vec((v, e), table).map_err(|err| Error::Checkpoint(err.to_string()))?;
    let encoder = EncoderParams::new(token_table, decay, mode == Mode::Scratch)?;

    let gate = read_array(&mut r, "gate_weights", rank * e)?;
    let gate_weights = Array2::from_shape_vec((rank, e), gate)
        .map_err(|err| Error::Checkpoint(err.to_string()))?;

    let head = match mode {
        Mode::Scratch => {
            let mut factor_weights = Vec::with_capacity(n);
            for s in 0..n {
                let mut per_alpha = Vec::with_capacity(rank);
                for alpha in 0..rank {
                    let data = read_array(&mut r, &format!("factor_w_{s}_{alpha}"), v * e)?;
                    per_alpha.push(
                        Array2::from_shape_vec((v, e), data)
                            .map_err(|err| Error::Checkpoint(err.to_string()))?,
                    );
                }
                factor_weights.push(per_alpha);
            }
            HeadParams::Full(FullHeadParams {
                factor_weights,
                gate_weights,
                horizon: n,
                rank,
                vocab: v,
                embed_dim: e,
            })
        }
        Mode::Finetune => {
            let shared = read_array(&mut r, "shared_head", v * e)?;
            let shared_head = Array2::from_shape_vec((v, e), shared)
                .map_err(|err| Error::Checkpoint(err.to_string()))?;
            let mut adapters = Vec::with_capacity(n);
            for s in 0..n {
                let mut per_alpha = Vec::with_capacity(rank);
                for alpha in 0..rank {
                    let data = read_array(&mut r, &format!("adapter_{s}_{alpha}"), e * e)?;
                    per_alpha.push(
                        Array2::from_shape_vec((e, e), data)
                            .map_err(|err| Error::Checkpoint(err.to_string()))?,
                    );
                }
                adapters.push(per_alpha);
            }
            HeadParams::Reduced(ReducedHeadParams {
                shared_head,
                adapters,
                gate_weights,
                horizon: n,
                rank,
                vocab: v,
                embed_dim: e,
            })
        }
    };

    Ok(Model {
        encoder,
        head,
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn models_equal(a: &Model, b: &Model) -> bool {
        if a.mode != b.mode
            || a.encoder.decay != b.encoder.decay
            || a.encoder.token_table != b.encoder.token_table
        {
            return false;
        }
        match (&a.head, &b.head) {
            (HeadParams::Full(x), HeadParams::Full(y)) => {
                x.gate_weights == y.gate_weights && x.factor_weights == y.factor_weights
            }
            (HeadParams::Reduced(x), HeadParams::Reduced(y)) => {
                x.gate_weights == y.gate_weights
                    && x.shared_head == y.shared_head
                    && x.adapters == y.adapters
            }
            _ => false,
        }
    }

    #[test]
    fn scratch_checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scratch.ckpt");
        let model = Model::init_scratch(6, 8, 2, 3, 0.7, 11).unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert!(models_equal(&model, &loaded));
        assert!(loaded.encoder.trainable);
    }

    #[test]
    fn finetune_checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("finetune.ckpt");
        let base = Model::init_scratch(6, 8, 2, 1, 0.7, 12).unwrap();
        let model = Model::init_finetune(&base, 4, true).unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert!(models_equal(&model, &loaded));
        assert!(!loaded.encoder.trainable, "finetune encoders stay frozen");
    }

    #[test]
    fn corrupt_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corrupt.ckpt");
        std::fs::write(&path, b"WRONGMAG\x01\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let model = Model::init_scratch(4, 4, 1, 1, 0.7, 13).unwrap();
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_model(&path).is_err());
    }
}
