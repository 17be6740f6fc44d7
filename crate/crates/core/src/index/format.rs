//! On-disk snapshot format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic          b"PLTI"
//! version        u32
//! dim            u32      (code length in bits equals dim)
//! band_width     u32
//! item_count     u64
//! thresholds     f32 x dim
//! ids            u64 x n  (strictly ascending)
//! categories     u8  x n
//! codes          u64 x n * ceil(dim / 64)
//! embeddings     f32 x n * dim
//! quality        (u64 sales, f32 conversion, f32 applause) x n
//! per band:      offsets u32 x (2^bits + 1), positions u32 x n
//! sha256         32 bytes over everything above
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{band_layout, Band, IndexSnapshot, PostingIndex};
use crate::error::{Error, Result};
use crate::model::{words_for, Category, QualityMeta};

pub const MAGIC: &[u8; 4] = b"PLTI";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptIndex(msg.into())
}

impl IndexSnapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(64 + n * (8 + 1 + self.dim * 4 + 16));
        out.extend_from_slice(MAGIC);
        let w = &mut out;
        w.write_u32::<LittleEndian>(VERSION).unwrap();
        w.write_u32::<LittleEndian>(self.dim as u32).unwrap();
        w.write_u32::<LittleEndian>(self.postings.band_width as u32).unwrap();
        w.write_u64::<LittleEndian>(n as u64).unwrap();
        for v in &self.thresholds {
            w.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            w.extend_from_slice(&id.to_le_bytes());
        }
        w.extend(self.categories.iter().map(|c| c.index() as u8));
        for c in &self.codes {
            w.extend_from_slice(&c.to_le_bytes());
        }
        for v in &self.embeddings {
            w.extend_from_slice(&v.to_le_bytes());
        }
        for q in &self.quality {
            w.extend_from_slice(&q.sales_volume.to_le_bytes());
            w.extend_from_slice(&q.percent_conversion.to_le_bytes());
            w.extend_from_slice(&q.applause_rate.to_le_bytes());
        }
        for band in &self.postings.bands {
            for v in band.offsets.iter().chain(&band.positions) {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Hex SHA-256 of the serialized snapshot.
    pub fn checksum(&self) -> String {
        let bytes = self.to_bytes();
        hex(&bytes[bytes.len() - DIGEST_LEN..])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + DIGEST_LEN {
            return Err(corrupt("snapshot truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if &body[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        parse(&body[4..]).map_err(|e| match e {
            Error::Io(io) => corrupt(format!("truncated snapshot: {io}")),
            other => other,
        })
    }

    /// Writes atomically: the file is written beside `path` and renamed over it.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_vec<T, F>(r: &mut Cursor<&[u8]>, n: usize, mut f: F) -> Result<Vec<T>>
where
    F: FnMut(&mut Cursor<&[u8]>) -> std::io::Result<T>,
{
    let remaining = r.get_ref().len() as u64 - r.position();
    if (n as u64) > remaining {
        return Err(corrupt("array length exceeds file size"));
    }
    (0..n).map(|_| f(r).map_err(Error::from)).collect()
}

fn parse(body: &[u8]) -> Result<IndexSnapshot> {
    let mut r = Cursor::new(body);
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let band_width = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u64::<LittleEndian>()? as usize;
    if !(1..=16).contains(&band_width) || n > u32::MAX as usize {
        return Err(corrupt("bad header"));
    }
    let thresholds = read_vec(&mut r, dim, |r| r.read_f32::<LittleEndian>())?;
    let ids = read_vec(&mut r, n, |r| r.read_u64::<LittleEndian>())?;
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(corrupt("ids not strictly ascending"));
    }
    let categories = read_vec(&mut r, n, |r| r.read_u8())?
        .into_iter()
        .map(|c| Category::try_from(c).map_err(|_| corrupt(format!("bad category {c}"))))
        .collect::<Result<Vec<_>>>()?;
    let codes = read_vec(&mut r, n * words_for(dim), |r| r.read_u64::<LittleEndian>())?;
    let embeddings = read_vec(&mut r, n * dim, |r| r.read_f32::<LittleEndian>())?;
    let quality = read_vec(&mut r, n, |r| {
        Ok(QualityMeta {
            sales_volume: r.read_u64::<LittleEndian>()?,
            percent_conversion: r.read_f32::<LittleEndian>()?,
            applause_rate: r.read_f32::<LittleEndian>()?,
        })
    })?;
    let mut bands = Vec::new();
    for range in band_layout(dim, band_width) {
        let bits = range.len();
        let offsets = read_vec(&mut r, (1 << bits) + 1, |r| r.read_u32::<LittleEndian>())?;
        let positions = read_vec(&mut r, n, |r| r.read_u32::<LittleEndian>())?;
        let consistent = offsets[0] == 0
            && offsets.windows(2).all(|w| w[0] <= w[1])
            && *offsets.last().unwrap() as usize == n
            && positions.iter().all(|&p| (p as usize) < n);
        if !consistent {
            return Err(corrupt("inconsistent posting lists"));
        }
        bands.push(Band {
            start: range.start,
            bits,
            offsets,
            positions,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(IndexSnapshot {
        dim,
        thresholds,
        ids,
        categories,
        codes,
        embeddings,
        quality,
        postings: PostingIndex { band_width, bands },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{build, BuildConfig};
    use crate::model::{Embedding, Item};

    fn snapshot() -> IndexSnapshot {
        let items: Vec<Item> = (0..50u64)
            .map(|i| Item {
                id: 100 - i,
                category: Category::new((i % 14) as usize).unwrap(),
                embedding: Embedding::new((0..70).map(|j| ((i * 7 + j) % 13) as f32 - 6.0).collect()).unwrap(),
                quality: QualityMeta { sales_volume: i, percent_conversion: 0.5, applause_rate: 0.25 },
            })
            .collect();
        build(&items, &BuildConfig::default()).unwrap()
    }

    #[test]
    fn write_read_write_is_identical() {
        let snap = snapshot();
        let bytes = snap.to_bytes();
        let back = IndexSnapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rebuild_is_byte_identical() {
        assert_eq!(snapshot().checksum(), snapshot().checksum());
    }

    #[test]
    fn detects_corruption() {
        let mut bytes = snapshot().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(IndexSnapshot::from_bytes(&bytes), Err(Error::CorruptIndex(_))));
        assert!(matches!(IndexSnapshot::from_bytes(b"PLTI"), Err(Error::CorruptIndex(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inv.plti");
        let snap = snapshot();
        snap.write_to(&path).unwrap();
        assert_eq!(IndexSnapshot::read_from(&path).unwrap(), snap);
    }
}
