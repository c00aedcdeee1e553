//! Binary feature-file format for externally extracted teacher features.
//!
//! Layout:
//!
//! ```text
//! magic   b"SAKF"
//! version u8 (currently 1)
//! u32 LE  header length
//! header  UTF-8 JSON: teacher_id, dtype, num_samples, levels [{level,h,w,c}]
//! payload sample-major: per sample, per level (ascending), h*w*c values LE
//! ```
//!
//! The sample-major layout allows shuffled streaming reads by sample
//! index without touching the rest of the file. Readers validate the
//! payload length against the header before exposing any data and are
//! safe for concurrent access by sample index.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::Path;

use half::f16;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{MultiLevelFeatures, TokenMap};

pub const MAGIC: &[u8; 4] = b"SAKF";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
    F16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    /// Round-trip a value through the stored precision.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Dtype::F64 => v,
            Dtype::F32 => v as f32 as f64,
            Dtype::F16 => f16::from_f64(v).to_f64(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelShape {
    pub level: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub teacher_id: String,
    pub dtype: Dtype,
    pub num_samples: usize,
    pub levels: Vec<LevelShape>,
}

impl FeatureHeader {
    /// Bytes per sample implied by the level shapes.
    pub fn sample_stride(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.h * l.w * l.c * self.dtype.size())
            .sum()
    }

    pub fn level_ids(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.level).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Format("header declares no levels".into()));
        }
        let mut last = 0usize;
        for l in &self.levels {
            if l.h == 0 || l.w == 0 || l.c == 0 {
                return Err(Error::Format(format!(
                    "level {}: degenerate shape {}x{}x{}",
                    l.level, l.h, l.w, l.c
                )));
            }
            if l.level <= last && self.levels[0].level != l.level {
                return Err(Error::Format("level ids must be strictly increasing".into()));
            }
            last = l.level;
        }
        // cap the per-sample footprint so a hostile header cannot request
        // an absurd allocation before the payload check
        if self.sample_stride() > 1 << 30 {
            return Err(Error::Format("sample stride exceeds 1 GiB cap".into()));
        }
        Ok(())
    }
}

/// Write one feature file from in-memory samples. All samples must share
/// the shapes of the first.
pub fn write_features(
    path: &Path,
    teacher_id: &str,
    dtype: Dtype,
    samples: &[MultiLevelFeatures],
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::config("write_features: no samples"));
    }
    let levels: Vec<LevelShape> = samples[0]
        .levels
        .iter()
        .map(|(level, map)| LevelShape {
            level: *level,
            h: map.grid.h,
            w: map.grid.w,
            c: map.dim(),
        })
        .collect();
    let header = FeatureHeader {
        teacher_id: teacher_id.to_string(),
        dtype,
        num_samples: samples.len(),
        levels,
    };
    header.validate()?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);

    for (i, sample) in samples.iter().enumerate() {
        let ids: Vec<usize> = sample.levels.keys().copied().collect();
        if ids != header.level_ids() {
            return Err(Error::config(format!(
                "sample {i} levels {ids:?} differ from first sample"
            )));
        }
        for (shape, (_, map)) in header.levels.iter().zip(&sample.levels) {
            if map.grid.h != shape.h || map.grid.w != shape.w || map.dim() != shape.c {
                return Err(Error::config(format!(
                    "sample {i} level {} shape mismatch",
                    shape.level
                )));
            }
            for &v in map.tokens.iter() {
                match dtype {
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
                }
            }
        }
    }
    let mut file = File::create(path)?;
    file.write_all(&out)?;
    file.sync_all()?;
    Ok(())
}

/// Streaming reader addressed by sample index.
pub struct FeatureFileReader {
    file: File,
    header: FeatureHeader,
    payload_offset: u64,
}

impl FeatureFileReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let mut prefix = [0u8; 9];
        file.read_exact(&mut prefix)
            .map_err(|_| Error::Truncated("file shorter than fixed prefix".into()))?;
        if &prefix[0..4] != MAGIC {
            return Err(Error::Format("bad magic, not a feature file".into()));
        }
        if prefix[4] != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {}",
                prefix[4]
            )));
        }
        let header_len = u32::from_le_bytes(prefix[5..9].try_into().unwrap()) as usize;
        if header_len > 1 << 20 {
            return Err(Error::Format("header length exceeds 1 MiB cap".into()));
        }
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)
            .map_err(|_| Error::Truncated("file ends inside header".into()))?;
        let header: FeatureHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Format(format!("bad header JSON: {e}")))?;
        header.validate()?;

        let payload_offset = 9 + header_len as u64;
        let expected = header.num_samples as u64 * header.sample_stride() as u64;
        let actual = file.metadata()?.len().saturating_sub(payload_offset);
        if actual < expected {
            return Err(Error::Truncated(format!(
                "payload holds {actual} bytes, header implies {expected}"
            )));
        }
        if actual > expected {
            return Err(Error::Format(format!(
                "payload holds {actual} bytes, header implies {expected} (trailing data)"
            )));
        }
        Ok(FeatureFileReader {
            file,
            header,
            payload_offset,
        })
    }

    pub fn header(&self) -> &FeatureHeader {
        &self.header
    }

    pub fn num_samples(&self) -> usize {
        self.header.num_samples
    }

    /// Error unless the file's level ids equal the student's selected set.
    pub fn check_levels(&self, expected: &[usize]) -> Result<()> {
        let ids = self.header.level_ids();
        if ids != expected {
            return Err(Error::LevelMismatch(format!(
                "file levels {ids:?} vs student levels {expected:?}"
            )));
        }
        Ok(())
    }

    /// Read one sample without touching the rest of the payload.
    pub fn read_sample(&self, index: usize) -> Result<MultiLevelFeatures> {
        if index >= self.header.num_samples {
            return Err(Error::config(format!(
                "sample {index} out of range ({} stored)",
                self.header.num_samples
            )));
        }
        let stride = self.header.sample_stride();
        let mut buf = vec![0u8; stride];
        self.file
            .read_exact_at(&mut buf, self.payload_offset + (index * stride) as u64)
            .map_err(|_| Error::Truncated(format!("payload ends inside sample {index}")))?;

        let mut levels = BTreeMap::new();
        let mut offset = 0usize;
        let word = self.header.dtype.size();
        for shape in &self.header.levels {
            let n = shape.h * shape.w;
            let mut tokens = Array2::<f64>::zeros((n, shape.c));
            for row in 0..n {
                for col in 0..shape.c {
                    let bytes = &buf[offset..offset + word];
                    let v = match self.header.dtype {
                        Dtype::F64 => f64::from_le_bytes(bytes.try_into().unwrap()),
                        Dtype::F32 => f32::from_le_bytes(bytes.try_into().unwrap()) as f64,
                        Dtype::F16 => {
                            f16::from_le_bytes([bytes[0], bytes[1]]).to_f64()
                        }
                    };
                    tokens[[row, col]] = v;
                    offset += word;
                }
            }
            levels.insert(
                shape.level,
                TokenMap::new(tokens, Grid::new(shape.h, shape.w), shape.level)?,
            );
        }
        Ok(MultiLevelFeatures::new(levels))
    }
}

/// Parse a feature file from a byte slice (fuzzing and tests); reads
/// every sample to exercise the full decode path.
pub fn read_all_from_bytes(bytes: &[u8]) -> Result<Vec<MultiLevelFeatures>> {
    let dir = std::env::temp_dir();
    let path = dir.join(format!(
        "sakf-mem-{}-{}.tmp",
        std::process::id(),
        fxhash(bytes)
    ));
    std::fs::write(&path, bytes)?;
    let result = (|| {
        let reader = FeatureFileReader::open(&path)?;
        let mut out = Vec::with_capacity(reader.num_samples());
        for i in 0..reader.num_samples() {
            out.push(reader.read_sample(i)?);
        }
        Ok(out)
    })();
    let _ = std::fs::remove_file(&path);
    result
}

fn fxhash(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample(seed: u64, grids: &[(usize, usize, usize, usize)]) -> MultiLevelFeatures {
        let mut rng = crate::params::stream_rng(seed, crate::params::Stream::Init);
        let mut levels = BTreeMap::new();
        for &(level, h, w, c) in grids {
            let tokens = crate::params::randn2(&mut rng, h * w, c, 1.0);
            levels.insert(level, TokenMap::new(tokens, Grid::new(h, w), level).unwrap());
        }
        MultiLevelFeatures::new(levels)
    }

    #[test]
    fn round_trip_is_bitwise_at_f64_and_f32() {
        let dir = tempdir().unwrap();
        let grids = [(1usize, 2, 3, 4), (2, 2, 3, 4), (3, 2, 3, 4), (4, 2, 3, 4)];
        for dtype in [Dtype::F64, Dtype::F32, Dtype::F16] {
            let samples: Vec<MultiLevelFeatures> = (0..3)
                .map(|i| {
                    let mut s = sample(i, &grids);
                    // pre-quantize so the round trip is exact at the
                    // stored precision
                    for (_, map) in s.levels.iter_mut() {
                        map.tokens.mapv_inplace(|v| dtype.quantize(v));
                    }
                    s
                })
                .collect();
            let path = dir.path().join(format!("t-{dtype:?}.sakf"));
            write_features(&path, "t", dtype, &samples).unwrap();
            let reader = FeatureFileReader::open(&path).unwrap();
            assert_eq!(reader.num_samples(), 3);
            for (i, s) in samples.iter().enumerate() {
                let read = reader.read_sample(i).unwrap();
                for level in [1, 2, 3, 4] {
                    assert_eq!(
                        read.get(level).unwrap().tokens,
                        s.get(level).unwrap().tokens,
                        "dtype {dtype:?} sample {i} level {level}"
                    );
                }
            }
        }
    }

    #[test]
    fn truncated_payload_fails_closed() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.sakf");
        let samples = vec![sample(0, &[(4, 2, 2, 3)])];
        write_features(&path, "t", Dtype::F32, &samples).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            FeatureFileReader::open(&path),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.sakf");
        let samples = vec![sample(0, &[(4, 2, 2, 3)])];
        write_features(&path, "t", Dtype::F32, &samples).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            FeatureFileReader::open(&path),
            Err(Error::Format(_))
        ));
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            FeatureFileReader::open(&path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn dino_shaped_header_exposes_declared_shapes() {
        // the canonical real-teacher shape: 36x36 map, 768 channels
        let dir = tempdir().unwrap();
        let path = dir.path().join("dino.sakf");
        let grids = [(3usize, 36, 36, 768)];
        let samples = vec![sample(1, &grids)];
        write_features(&path, "dino", Dtype::F32, &samples).unwrap();
        let reader = FeatureFileReader::open(&path).unwrap();
        let shape = &reader.header().levels[0];
        assert_eq!((shape.h, shape.w, shape.c), (36, 36, 768));
        let features = reader.read_sample(0).unwrap();
        let map = features.get(3).unwrap();
        assert_eq!(map.grid, Grid::new(36, 36));
        assert_eq!(map.dim(), 768);
    }

    #[test]
    fn level_mismatch_is_distinct_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.sakf");
        let samples = vec![sample(0, &[(1usize, 2, 2, 3), (2, 2, 2, 3), (3, 2, 2, 3), (4, 2, 2, 3)])];
        write_features(&path, "t", Dtype::F32, &samples).unwrap();
        let reader = FeatureFileReader::open(&path).unwrap();
        assert!(reader.check_levels(&[1, 2, 3, 4]).is_ok());
        assert!(matches!(
            reader.check_levels(&[2, 4, 6, 8]),
            Err(Error::LevelMismatch(_))
        ));
    }
}
