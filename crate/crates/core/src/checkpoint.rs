//! Binary checkpoint files.
//!
//! Layout: `RTLB`, version (u32 LE), header length (u32 LE), a TOML header
//! describing the model and its segment table, the payload as f32 LE in
//! segment order, then a CRC32 (u32 LE) of every preceding byte. Running
//! statistics follow the parameters as `stat` segments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{param_layout, ModelSpec, ModelState, Mode, ParamVector, RunningStats};

pub const MAGIC: &[u8; 4] = b"RTLB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec_digest: String,
    seed: u64,
    step: u64,
    mode: Mode,
    spec: ModelSpec,
    segments: Vec<SegmentEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    kind: String,
}

/// CRC32 of the model spec's TOML form, as 8 hex digits.
pub fn spec_digest(spec: &ModelSpec) -> Result<String> {
    let text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    Ok(format!("{:08x}", crc32fast::hash(text.as_bytes())))
}

pub fn encode_checkpoint(state: &ModelState, meta: CheckpointMeta) -> Result<Vec<u8>> {
    let mut segments: Vec<SegmentEntry> = state
        .layout()
        .segments()
        .iter()
        .map(|s| SegmentEntry {
            name: s.name.clone(),
            shape: s.shape.clone(),
            offset: s.offset,
            kind: s.tag.as_str().into(),
        })
        .collect();
    let mut payload: Vec<f64> = state.params().values().to_vec();
    for st in state.stats() {
        for (suffix, v) in [("mean", &st.mean), ("var", &st.var)] {
            segments.push(SegmentEntry {
                name: format!("{}.{suffix}", st.name),
                shape: vec![v.len()],
                offset: payload.len(),
                kind: "stat".into(),
            });
            payload.extend_from_slice(v);
        }
    }
    let header = Header {
        spec_digest: spec_digest(state.spec())?,
        seed: meta.seed,
        step: meta.step,
        mode: state.mode(),
        spec: state.spec().clone(),
        segments,
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + text.len() + 4 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for v in payload {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(fail(format!(
            "unsupported format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let body = bytes.len() - 4;
    let stored = u32_at(body);
    let actual = crc32fast::hash(&bytes[..body]);
    if stored != actual {
        return Err(fail(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let hlen = u32_at(8) as usize;
    if 12 + hlen > body {
        return Err(fail("header length exceeds file".into()));
    }
    let text = std::str::from_utf8(&bytes[12..12 + hlen]).map_err(|e| fail(format!("header is not UTF-8: {e}")))?;
    let header: Header = toml::from_str(text).map_err(|e| fail(format!("header: {e}")))?;
    let payload = &bytes[12 + hlen..body];
    if payload.len() % 4 != 0 {
        return Err(fail("payload is not a whole number of f32 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if spec_digest(&header.spec)? != header.spec_digest {
        return Err(fail("spec digest does not match the stored spec".into()));
    }
    let layout = param_layout(&header.spec)?;
    let params_len = layout.total();
    let nparam = layout.segments().len();
    let consistent = header.segments.len() >= nparam
        && layout
            .segments()
            .iter()
            .zip(&header.segments)
            .all(|(s, e)| s.name == e.name && s.shape == e.shape && s.offset == e.offset);
    if !consistent {
        return Err(fail("segment table does not match the model spec's layout".into()));
    }
    let expected = header.segments.last().map_or(0, |e| e.offset + e.shape.iter().product::<usize>());
    if values.len() != expected {
        return Err(fail(format!("payload holds {} values, segment table needs {expected}", values.len())));
    }
    let params = ParamVector::new(std::sync::Arc::new(layout), values[..params_len].to_vec())?;
    let mut stats = Vec::new();
    for pair in header.segments[nparam..].chunks(2) {
        let [mean, var] = pair else {
            return Err(fail("unpaired statistics segment".into()));
        };
        let name = mean
            .name
            .strip_suffix(".mean")
            .filter(|n| var.name.strip_suffix(".var") == Some(n))
            .ok_or_else(|| fail(format!("bad statistics segments {} / {}", mean.name, var.name)))?;
        let slice = |e: &SegmentEntry| values[e.offset..e.offset + e.shape.iter().product::<usize>()].to_vec();
        stats.push(RunningStats {
            name: name.into(),
            mean: slice(mean),
            var: slice(var),
        });
    }
    let state = ModelState::from_parts(&header.spec, params, stats)?.with_mode(header.mode);
    Ok((
        state,
        CheckpointMeta {
            seed: header.seed,
            step: header.step,
        },
    ))
}

pub fn save_checkpoint(path: &Path, state: &ModelState, meta: CheckpointMeta) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn sample() -> ModelState {
        let mut spec = ModelSpec::small_cnn([1, 8, 8]);
        spec.encoder_widths = vec![4, 8];
        spec.embed_dim = 8;
        spec.projector.hidden_dims = vec![16];
        spec.projector.bottleneck_dim = 4;
        spec.projector.out_dim = 10;
        init_params(&spec, 3).unwrap()
    }

    #[test]
    fn round_trip_within_f32() {
        let s = sample();
        let bytes = encode_checkpoint(&s, CheckpointMeta { seed: 3, step: 7 }).unwrap();
        let (back, meta) = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(meta, CheckpointMeta { seed: 3, step: 7 });
        assert_eq!(back.spec(), s.spec());
        assert_eq!(back.stats().len(), s.stats().len());
        for (a, b) in back.params().values().iter().zip(s.params().values()) {
            assert!((a - b).abs() <= f32::EPSILON as f64 * b.abs());
        }
        assert_eq!(encode_checkpoint(&back, meta).unwrap(), bytes);
    }

    #[test]
    fn corruption_and_version_are_rejected() {
        let bytes = encode_checkpoint(&sample(), CheckpointMeta::default()).unwrap();
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 10] ^= 1;
        let err = decode_checkpoint(&bad, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("CRC"), "{err}");
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let err = decode_checkpoint(&v2, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic, Path::new("x")).is_err());
    }
}
