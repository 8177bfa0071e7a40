//! `VSWT` weight checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"VSWT"
//! version u32
//! len     u32          length of the config JSON
//! config  [u8; len]    ModelConfig as JSON
//! payload f32 LE       every parameter matrix in declaration order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Weights};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VSWT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_weights<S: Scalar, W: Write>(weights: &Weights<S>, mut out: W) -> Result<()> {
    let config = serde_json::to_vec(&weights.config)?;
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(&config)?;
    for (_, m) in weights.params() {
        for v in m.data() {
            out.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_weights<S: Scalar, R: Read>(mut input: R) -> Result<Weights<S>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| Error::Format("missing checkpoint magic".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(&mut input)? as usize;
    let mut config = vec![0u8; len];
    input.read_exact(&mut config).map_err(|_| Error::Format("truncated checkpoint config".into()))?;
    let config: ModelConfig = serde_json::from_slice(&config)?;
    config.validate()?;

    let mut weights = Weights::<S>::zeros(&config);
    let expected: u64 = weights.params().iter().map(|(_, m)| m.data().len() as u64 * 4).sum();
    let mut payload = Vec::with_capacity(expected as usize);
    input.read_to_end(&mut payload)?;
    if payload.len() as u64 != expected {
        return Err(Error::Length {
            expected,
            actual: payload.len() as u64,
        });
    }
    let mut chunks = payload.chunks_exact(4);
    for (_, m) in weights.params_mut() {
        for v in m.data_mut() {
            let b = chunks.next().expect("length checked");
            *v = S::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
    }
    Ok(weights)
}

pub fn save_weights<S: Scalar>(weights: &Weights<S>, path: impl AsRef<Path>) -> Result<()> {
    write_weights(weights, BufWriter::new(File::create(path)?))
}

pub fn load_weights<S: Scalar>(path: impl AsRef<Path>) -> Result<Weights<S>> {
    read_weights(BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{EntryMeta, MaskSpec, SegmentTag, TagSet};
    use crate::model::{embed_positions, forward_step, init_model, tiny_config, KvCache, StepInput};
    use crate::numerics::Matrix;

    #[test]
    fn round_trip_preserves_outputs() {
        let w: Weights<f32> = init_model(&tiny_config(), 4).unwrap();
        let mut buf = Vec::new();
        write_weights(&w, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"VSWT");
        let back: Weights<f32> = read_weights(buf.as_slice()).unwrap();
        assert_eq!(back, w);

        let emb = Matrix::from_vec(2, 8, (0..16).map(|i| i as f32 * 0.1).collect()).unwrap();
        assert_eq!(
            embed_positions(&emb, &[3, 9], &w).unwrap(),
            embed_positions(&emb, &[3, 9], &back).unwrap()
        );
        let entries: Vec<EntryMeta> = (0..2)
            .map(|p| EntryMeta { tag: SegmentTag::Text, position: p, frame: None })
            .collect();
        let run = |w: &Weights<f32>| {
            let mut cache = KvCache::new(2, 8);
            forward_step(w, &mut cache, &StepInput { embeddings: &emb, entries: &entries, mask: &MaskSpec::causal(2) }, TagSet::ALL)
                .unwrap()
        };
        assert_eq!(run(&w), run(&back));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let w: Weights<f32> = init_model(&tiny_config(), 4).unwrap();
        let mut buf = Vec::new();
        write_weights(&w, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_weights::<f32, _>(bad.as_slice()), Err(Error::Format(_))));

        let truncated = &buf[..buf.len() - 8];
        match read_weights::<f32, _>(truncated) {
            Err(Error::Length { expected, actual }) => assert_eq!(expected, actual + 8),
            other => panic!("unexpected {other:?}"),
        }
    }
}
