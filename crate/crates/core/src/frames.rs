//! Binary frame files: `"VSCN"`, version, `T`, `N`, `d` as little-endian
//! `u32`, then `T·N·d` little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::memory::FrameTokens;
use crate::model::ModelConfig;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub const FRAME_MAGIC: &[u8; 4] = b"VSCN";
pub const FRAME_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub frames: u32,
    pub tokens: u32,
    pub dim: u32,
}

pub fn write_frames<S: Scalar>(mut out: impl Write, frames: &[FrameTokens<S>]) -> Result<()> {
    let (n, d) = frames.first().map(|f| f.embeddings.shape()).unwrap_or((0, 0));
    out.write_all(FRAME_MAGIC)?;
    for v in [FRAME_VERSION, to_u32(frames.len())?, to_u32(n)?, to_u32(d)?] {
        out.write_all(&v.to_le_bytes())?;
    }
    for f in frames {
        if f.embeddings.shape() != (n, d) {
            return Err(Error::Shape(format!(
                "frame {} is {:?}, file holds {n}×{d}",
                f.index,
                f.embeddings.shape()
            )));
        }
        for &v in f.embeddings.data() {
            out.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    Ok(())
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit the u32 header")))
}

/// Reads frames without checking them against a model.
pub fn read_frames<S: Scalar>(input: impl Read) -> Result<(FrameHeader, Vec<FrameTokens<S>>)> {
    let mut input = input;
    let mut head = [0u8; HEADER_BYTES as usize];
    input
        .read_exact(&mut head)
        .map_err(|_| Error::Format("file shorter than the frame header".into()))?;
    if &head[..4] != FRAME_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &head[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != FRAME_VERSION {
        return Err(Error::Format(format!("unsupported frame file version {}", word(0))));
    }
    let header = FrameHeader {
        frames: word(1),
        tokens: word(2),
        dim: word(3),
    };
    let (t, n, d) = (header.frames as u64, header.tokens as u64, header.dim as u64);
    let expected = t * n * d * 4;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() as u64 != expected {
        return Err(Error::Length {
            expected,
            actual: payload.len() as u64,
        });
    }
    let values: Vec<S> = payload
        .chunks_exact(4)
        .map(|c| S::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    let per = (n * d) as usize;
    let frames = (0..t as usize)
        .map(|k| {
            let m = Matrix::from_vec(n as usize, d as usize, values[k * per..(k + 1) * per].to_vec())?;
            Ok(FrameTokens::new(k, m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, frames))
}

/// Reads a frame file and checks `N` and `d` against `config`.
pub fn load_frames<S: Scalar>(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Vec<FrameTokens<S>>> {
    let (header, frames) = read_frames(BufReader::new(File::open(path)?))?;
    if header.frames > 0 && (header.tokens as usize != config.frame_tokens || header.dim as usize != config.d_model) {
        return Err(Error::Config(format!(
            "frame file holds {}×{} tokens, model expects {}×{}",
            header.tokens, header.dim, config.frame_tokens, config.d_model
        )));
    }
    Ok(frames)
}

pub fn save_frames<S: Scalar>(path: impl AsRef<Path>, frames: &[FrameTokens<S>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_frames(&mut out, frames)?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::random_frames;
    use crate::model::tiny_config;

    #[test]
    fn round_trip_is_bitwise() {
        let frames: Vec<FrameTokens<f32>> = random_frames(3, 3, 8, 5);
        let mut buf = Vec::new();
        write_frames(&mut buf, &frames).unwrap();
        assert_eq!(buf.len(), 20 + 3 * 3 * 8 * 4);
        let (h, back) = read_frames::<f32>(&buf[..]).unwrap();
        assert_eq!(h, FrameHeader { frames: 3, tokens: 3, dim: 8 });
        assert_eq!(back, frames);
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        save_frames::<f32>(&p, &[]).unwrap();
        assert!(load_frames::<f32>(&p, &tiny_config()).unwrap().is_empty());
    }

    #[test]
    fn truncated_payload_names_sizes() {
        let frames: Vec<FrameTokens<f32>> = random_frames(2, 3, 8, 5);
        let mut buf = Vec::new();
        write_frames(&mut buf, &frames).unwrap();
        buf.truncate(20 + 3 * 8 * 4);
        match read_frames::<f32>(&buf[..]) {
            Err(Error::Length { expected, actual }) => {
                assert_eq!(expected, 192);
                assert_eq!(actual, 96);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_header_and_shape_mismatch() {
        assert!(matches!(read_frames::<f32>(&b"VSCX\x01\0\0\0"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_frames::<f32>(&mut buf, &[]).unwrap();
        buf[4] = 2;
        assert!(matches!(read_frames::<f32>(&buf[..]), Err(Error::Format(_))));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        save_frames(&p, &random_frames::<f32>(1, 4, 8, 1)).unwrap();
        assert!(matches!(load_frames::<f32>(&p, &tiny_config()), Err(Error::Config(_))));
    }
}
