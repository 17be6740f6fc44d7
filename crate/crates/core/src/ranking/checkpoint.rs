//! Binary `TrainState` checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic        b"PLTD"
//! version      u32
//! in_dim       u32
//! out_dim      u32
//! image_count  u32
//! step         u64
//! fallbacks    u64
//! weights      f64 x out_dim*in_dim
//! bias         f64 x out_dim
//! masks        (x_l, x_r, y_t, y_b, k) f64 x 5 per image
//! history_len  u64
//! history      f64 x history_len
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::embedder::ToyEmbedder;
use super::mask::{MaskParams, Rect};
use super::train::TrainState;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PLTD";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(state: &TrainState, mut w: W) -> Result<()> {
    let emb = &state.embedder;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(emb.in_dim as u32)?;
    w.write_u32::<LittleEndian>(emb.out_dim as u32)?;
    w.write_u32::<LittleEndian>(state.masks.len() as u32)?;
    w.write_u64::<LittleEndian>(state.step)?;
    w.write_u64::<LittleEndian>(state.fallback_count)?;
    for v in emb.weights.iter().chain(&emb.bias) {
        w.write_f64::<LittleEndian>(*v)?;
    }
    for m in &state.masks {
        for v in [m.rect.x_l, m.rect.x_r, m.rect.y_t, m.rect.y_b, m.k] {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.write_u64::<LittleEndian>(state.loss_history.len() as u64)?;
    for v in &state.loss_history {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<TrainState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a training checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let in_dim = r.read_u32::<LittleEndian>()? as usize;
    let out_dim = r.read_u32::<LittleEndian>()? as usize;
    let images = r.read_u32::<LittleEndian>()? as usize;
    let step = r.read_u64::<LittleEndian>()?;
    let fallback_count = r.read_u64::<LittleEndian>()?;
    let weights = read_f64s(&mut r, in_dim * out_dim)?;
    let bias = read_f64s(&mut r, out_dim)?;
    let mut masks = Vec::with_capacity(images);
    for _ in 0..images {
        let v = read_f64s(&mut r, 5)?;
        let rect = Rect { x_l: v[0], x_r: v[1], y_t: v[2], y_b: v[3] };
        masks.push(MaskParams::new(rect, v[4]).map_err(|e| Error::Format(e.to_string()))?);
    }
    let history_len = r.read_u64::<LittleEndian>()? as usize;
    let loss_history = read_f64s(&mut r, history_len)?;
    Ok(TrainState {
        embedder: ToyEmbedder {
            in_dim,
            out_dim,
            weights,
            bias,
        },
        masks,
        step,
        loss_history,
        fallback_count,
    })
}

pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(state, &mut out).expect("writing to a Vec cannot fail");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::data::{generate, ImageSetConfig};
    use crate::ranking::train::{train, TrainConfig};

    #[test]
    fn write_read_write_is_identical() {
        let set = generate(&ImageSetConfig { triplets: 6, height: 8, width: 8, ..Default::default() }).unwrap();
        let state = train(&set, &TrainConfig { steps: 3, batch_size: 4, ..Default::default() }).unwrap();
        let bytes = checkpoint_bytes(&state);
        assert_eq!(&bytes[..4], b"PLTD");
        let back = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, state);
        assert_eq!(checkpoint_bytes(&back), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_checkpoint(&b"XXXX\x01\0\0\0"[..]), Err(Error::Format(_))));
        let set = generate(&ImageSetConfig { triplets: 2, height: 4, width: 4, ..Default::default() }).unwrap();
        let state = train(&set, &TrainConfig { steps: 1, ..Default::default() }).unwrap();
        let bytes = checkpoint_bytes(&state);
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
