//! The TTS container.
//!
//! ```text
//! b"TTS1"
//! u64 N, u64 D, u64 T                      (little-endian)
//! u64 metadata_len, metadata (UTF-8 JSON: location_ids, feature_names, timestamps)
//! N*D*T f32 little-endian, location-major then feature then time
//! ```
//!
//! The writer emits compact JSON with keys in the order above; any file it
//! produces reloads and re-saves byte-identically.

use std::path::Path;

use super::{AxisMeta, TensorSeries};
use crate::error::TtsError;

pub const TTS_MAGIC: &[u8; 4] = b"TTS1";

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Replace non-finite payload values by the previous finite value along
    /// time (or the next one for a leading gap) instead of rejecting the file.
    pub forward_fill: bool,
}

pub fn write_tts(ts: &TensorSeries) -> Vec<u8> {
    let meta = serde_json::to_vec(ts.meta()).expect("metadata serializes");
    let (n, d, t) = ts.shape();
    let mut out = Vec::with_capacity(4 + 32 + meta.len() + 4 * n * d * t);
    out.extend_from_slice(TTS_MAGIC);
    for v in [n as u64, d as u64, t as u64, meta.len() as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&meta);
    for v in ts.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn read_tts(bytes: &[u8], opts: LoadOptions) -> Result<TensorSeries, TtsError> {
    if bytes.len() < 4 || &bytes[..4] != TTS_MAGIC {
        return Err(TtsError::BadMagic);
    }
    let mut pos = 4;
    let mut next_u64 = |what: &str| -> Result<u64, TtsError> {
        let chunk = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| TtsError::MalformedHeader(format!("truncated before {what}")))?;
        pos += 8;
        Ok(u64::from_le_bytes(chunk.try_into().unwrap()))
    };
    let n = next_u64("N")? as usize;
    let d = next_u64("D")? as usize;
    let t = next_u64("T")? as usize;
    let meta_len = next_u64("metadata length")? as usize;
    let meta_bytes = bytes
        .get(pos..pos.saturating_add(meta_len))
        .ok_or_else(|| TtsError::MalformedHeader(format!("metadata block of {meta_len} bytes is truncated")))?;
    pos += meta_len;
    let meta: AxisMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| TtsError::MalformedHeader(format!("metadata JSON: {e}")))?;

    let count = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(t))
        .ok_or_else(|| TtsError::MalformedHeader("shape overflows".into()))?;
    let payload = &bytes[pos..];
    if payload.len() != count * 4 {
        return Err(TtsError::AxisMismatch(format!(
            "payload has {} bytes, shape {n}x{d}x{t} needs {}",
            payload.len(),
            count * 4
        )));
    }
    let mut values: Vec<f64> =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    if opts.forward_fill {
        fill_gaps(&mut values, n, d, t)?;
    }
    TensorSeries::new(n, d, t, values, meta)
}

fn fill_gaps(values: &mut [f64], n: usize, d: usize, t: usize) -> Result<(), TtsError> {
    for i in 0..n {
        for j in 0..d {
            let series = &mut values[(i * d + j) * t..(i * d + j + 1) * t];
            let Some(first) = series.iter().position(|v| v.is_finite()) else {
                return Err(TtsError::NonFinitePayload { location: i, feature: j, step: 0 });
            };
            let lead = series[first];
            series[..first].fill(lead);
            let mut last = lead;
            for v in series.iter_mut().skip(first) {
                if v.is_finite() {
                    last = *v;
                } else {
                    *v = last;
                }
            }
        }
    }
    Ok(())
}

impl TensorSeries {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TtsError> {
        Self::load_with(path, LoadOptions::default())
    }

    pub fn load_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Self, TtsError> {
        let bytes = std::fs::read(path)?;
        read_tts(&bytes, opts)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TtsError> {
        std::fs::write(path, write_tts(self))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw_file(n: u64, d: u64, t: u64, meta: &str, payload: &[f32]) -> Vec<u8> {
        let mut out = TTS_MAGIC.to_vec();
        for v in [n, d, t, meta.len() as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(meta.as_bytes());
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn reads_documented_layout() {
        let meta = r#"{"location_ids":["a","b"],"feature_names":["x"],"timestamps":[0,1,2]}"#;
        let bytes = raw_file(2, 1, 3, meta, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let ts = read_tts(&bytes, LoadOptions::default()).unwrap();
        assert_eq!(ts.get(1, 0, 2), 6.0);
        assert_eq!(write_tts(&ts), bytes);
    }

    #[test]
    fn distinct_errors() {
        let ok_meta = r#"{"location_ids":["a","b"],"feature_names":["x"],"timestamps":[0,1,2]}"#;
        let three_ids = r#"{"location_ids":["a","b","c"],"feature_names":["x"],"timestamps":[0,1,2]}"#;
        let bad_ts = r#"{"location_ids":["a","b"],"feature_names":["x"],"timestamps":[0,2,1]}"#;
        let six = [1.0f32; 6];

        assert!(matches!(read_tts(b"TTS0", LoadOptions::default()), Err(TtsError::BadMagic)));
        assert!(matches!(read_tts(&raw_file(2, 1, 3, three_ids, &six), LoadOptions::default()), Err(TtsError::AxisMismatch(_))));
        assert!(matches!(
            read_tts(&raw_file(2, 1, 3, bad_ts, &six), LoadOptions::default()),
            Err(TtsError::NonMonotoneTimestamps(_))
        ));
        assert!(matches!(read_tts(&raw_file(2, 1, 3, "{not json", &six), LoadOptions::default()), Err(TtsError::MalformedHeader(_))));
        let nan = [1.0, f32::NAN, 3.0, 4.0, 5.0, 6.0];
        assert!(matches!(
            read_tts(&raw_file(2, 1, 3, ok_meta, &nan), LoadOptions::default()),
            Err(TtsError::NonFinitePayload { location: 0, feature: 0, step: 1 })
        ));
        let filled = read_tts(&raw_file(2, 1, 3, ok_meta, &nan), LoadOptions { forward_fill: true }).unwrap();
        assert_eq!(filled.get(0, 0, 1), 1.0);
    }

    proptest! {
        #[test]
        fn save_load_is_byte_identical(n in 1usize..=8, d in 1usize..=8, t in 1usize..=8, seed in any::<u64>(), start in -1000i64..1000, stride in 1i64..48) {
            let mut state = seed;
            let ts = TensorSeries::from_fn(n, d, t, |_, _, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 200.0) as f32 as f64
            }).unwrap();
            let mut meta = ts.meta().clone();
            meta.timestamps = (0..t as i64).map(|k| start + k * stride).collect();
            let ts = TensorSeries::new(n, d, t, ts.values().to_vec(), meta).unwrap();
            let bytes = write_tts(&ts);
            let back = read_tts(&bytes, LoadOptions::default()).unwrap();
            prop_assert_eq!(write_tts(&back), bytes);
        }
    }
}
