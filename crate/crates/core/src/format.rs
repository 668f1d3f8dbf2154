//! Little-endian binary containers for feature grids (`.fgrid`), pooled
//! embeddings (`.aemb`) and projection checkpoints (`PRJW`).
//!
//! Every file starts with a 4-byte magic and a `u32` version (currently 1),
//! followed by `u32` dimensions and a flat `f32` payload. Values are held as
//! `f64` in memory and narrowed to `f32` on write.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::{AudioEmbedding, FeatureGrid, VectorBatch};

pub const FGRID_MAGIC: &[u8; 4] = b"FGRD";
pub const AEMB_MAGIC: &[u8; 4] = b"AEMB";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PRJW";
pub const FORMAT_VERSION: u32 = 1;

fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], dims: &[usize]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for &d in dims {
        let d =
            u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4], ndims: usize) -> Result<Vec<usize>> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(truncated)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    (0..ndims)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect()
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

fn checked_product(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("payload size overflows".into()))
}

pub fn write_fgrid<W: Write>(w: &mut W, grid: &FeatureGrid) -> Result<()> {
    write_header(
        w,
        FGRID_MAGIC,
        &[grid.batch(), grid.height(), grid.width(), grid.channels()],
    )?;
    write_f32s(w, grid.data())
}

pub fn read_fgrid<R: Read>(r: &mut R) -> Result<FeatureGrid> {
    let dims = read_header(r, FGRID_MAGIC, 4)?;
    let data = read_f32s(r, checked_product(&dims)?)?;
    expect_eof(r)?;
    FeatureGrid::new(dims[0], dims[1], dims[2], dims[3], data)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn write_aemb<W: Write>(w: &mut W, emb: &AudioEmbedding) -> Result<()> {
    write_header(w, AEMB_MAGIC, &[emb.batch(), emb.channels()])?;
    write_f32s(w, emb.data())
}

pub fn read_aemb<R: Read>(r: &mut R) -> Result<AudioEmbedding> {
    let dims = read_header(r, AEMB_MAGIC, 2)?;
    let data = read_f32s(r, checked_product(&dims)?)?;
    expect_eof(r)?;
    VectorBatch::new(dims[0], dims[1], data).map_err(|e| Error::Format(e.to_string()))
}

/// Raw contents of a projection checkpoint: two `rows x cols` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub rows: usize,
    pub cols: usize,
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &CheckpointData) -> Result<()> {
    let n = ckpt.rows * ckpt.cols;
    if ckpt.visual.len() != n || ckpt.audio.len() != n {
        return Err(Error::Dimension(
            "checkpoint matrices do not match dims".into(),
        ));
    }
    write_header(w, CHECKPOINT_MAGIC, &[ckpt.rows, ckpt.cols])?;
    write_f32s(w, &ckpt.visual)?;
    write_f32s(w, &ckpt.audio)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<CheckpointData> {
    let dims = read_header(r, CHECKPOINT_MAGIC, 2)?;
    let n = checked_product(&dims)?;
    let visual = read_f32s(r, n)?;
    let audio = read_f32s(r, n)?;
    expect_eof(r)?;
    if visual.iter().chain(&audio).any(|v| !v.is_finite()) {
        return Err(Error::Format("checkpoint holds non-finite weights".into()));
    }
    Ok(CheckpointData {
        rows: dims[0],
        cols: dims[1],
        visual,
        audio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fgrid_layout_is_exact() {
        let g = FeatureGrid::new(1, 1, 2, 1, vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_fgrid(&mut buf, &g).unwrap();
        let mut expected = b"FGRD".to_vec();
        for d in [1u32, 1, 1, 2, 1] {
            expected.extend_from_slice(&d.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_fgrid(&mut buf.as_slice()).unwrap(), g);
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let g = FeatureGrid::new(1, 1, 1, 1, vec![1.0]).unwrap();
        let mut buf = Vec::new();
        write_fgrid(&mut buf, &g).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_fgrid(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(
            read_fgrid(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_aemb(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
        let short = &buf[..buf.len() - 1];
        assert!(matches!(read_fgrid(&mut &short[..]), Err(Error::Format(_))));
    }

    #[test]
    fn aemb_and_checkpoint_round_trip() {
        let e = VectorBatch::new(2, 2, vec![0.25, -1.0, 3.5, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_aemb(&mut buf, &e).unwrap();
        assert_eq!(&buf[..4], b"AEMB");
        assert_eq!(read_aemb(&mut buf.as_slice()).unwrap(), e);

        let ck = CheckpointData {
            rows: 1,
            cols: 2,
            visual: vec![0.5, 1.5],
            audio: vec![-0.5, 2.0],
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        assert_eq!(&buf[..4], b"PRJW");
        assert_eq!(read_checkpoint(&mut buf.as_slice()).unwrap(), ck);
    }
}
