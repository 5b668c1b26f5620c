//! Feature archive: per-utterance binary blocks plus a TSV index.
//!
//! Block layout, all little-endian: u32 utt_id byte length, utt_id bytes,
//! u32 T, u32 D, then T·D row-major f32 values. The index file maps
//! `utt_id TAB byte-offset` into the archive.

use super::{FeatureError, FeatureMatrix};
use crate::mat::Mat;
use crate::scalar::Scalar;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

pub struct ArchiveWriter {
    data: BufWriter<File>,
    index: BTreeMap<String, u64>,
    offset: u64,
    data_path: PathBuf,
    index_path: PathBuf,
}

impl ArchiveWriter {
    pub fn create(data_path: &Path, index_path: &Path) -> Result<Self, FeatureError> {
        Ok(ArchiveWriter {
            data: BufWriter::new(File::create(data_path)?),
            index: BTreeMap::new(),
            offset: 0,
            data_path: data_path.to_path_buf(),
            index_path: index_path.to_path_buf(),
        })
    }

    pub fn append<T: Scalar>(&mut self, features: &FeatureMatrix<T>) -> Result<(), FeatureError> {
        if self.index.contains_key(&features.utt_id) {
            return Err(FeatureError::Archive(format!(
                "duplicate utt_id {} in archive {}",
                features.utt_id,
                self.data_path.display()
            )));
        }
        let id_bytes = features.utt_id.as_bytes();
        let (t, d) = features.frames.shape();
        self.index.insert(features.utt_id.clone(), self.offset);
        self.data.write_all(&(id_bytes.len() as u32).to_le_bytes())?;
        self.data.write_all(id_bytes)?;
        self.data.write_all(&(t as u32).to_le_bytes())?;
        self.data.write_all(&(d as u32).to_le_bytes())?;
        for &v in features.frames.data() {
            self.data
                .write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
        self.offset += 4 + id_bytes.len() as u64 + 4 + 4 + (t * d * 4) as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), FeatureError> {
        self.data.flush()?;
        let mut idx = BufWriter::new(File::create(&self.index_path)?);
        for (utt_id, offset) in &self.index {
            writeln!(idx, "{utt_id}\t{offset}")?;
        }
        idx.flush()?;
        Ok(())
    }
}

pub struct ArchiveReader {
    file: File,
    index: BTreeMap<String, u64>,
}

impl ArchiveReader {
    pub fn open(data_path: &Path, index_path: &Path) -> Result<Self, FeatureError> {
        let mut index = BTreeMap::new();
        let idx = BufReader::new(File::open(index_path)?);
        for (i, line) in std::io::BufRead::lines(idx).enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, off) = line.split_once('\t').ok_or_else(|| {
                FeatureError::Archive(format!(
                    "{}:{}: bad index line",
                    index_path.display(),
                    i + 1
                ))
            })?;
            let off: u64 = off.trim().parse().map_err(|_| {
                FeatureError::Archive(format!(
                    "{}:{}: bad offset {off}",
                    index_path.display(),
                    i + 1
                ))
            })?;
            index.insert(id.to_string(), off);
        }
        Ok(ArchiveReader {
            file: File::open(data_path)?,
            index,
        })
    }

    pub fn utt_ids(&self) -> impl Iterator<Item = &String> {
        self.index.keys()
    }

    pub fn contains(&self, utt_id: &str) -> bool {
        self.index.contains_key(utt_id)
    }

    pub fn read<T: Scalar>(&mut self, utt_id: &str) -> Result<FeatureMatrix<T>, FeatureError> {
        let &offset = self
            .index
            .get(utt_id)
            .ok_or_else(|| FeatureError::Archive(format!("utt_id {utt_id} not in archive")))?;
        self.file.seek(SeekFrom::Start(offset))?;
        let mut u32buf = [0u8; 4];
        self.file.read_exact(&mut u32buf)?;
        let id_len = u32::from_le_bytes(u32buf) as usize;
        let mut id_bytes = vec![0u8; id_len];
        self.file.read_exact(&mut id_bytes)?;
        let stored_id = String::from_utf8(id_bytes)
            .map_err(|_| FeatureError::Archive("non-utf8 utt_id in archive".into()))?;
        if stored_id != utt_id {
            return Err(FeatureError::Archive(format!(
                "index points at {stored_id}, wanted {utt_id}"
            )));
        }
        self.file.read_exact(&mut u32buf)?;
        let t = u32::from_le_bytes(u32buf) as usize;
        self.file.read_exact(&mut u32buf)?;
        let d = u32::from_le_bytes(u32buf) as usize;
        let mut raw = vec![0u8; t * d * 4];
        self.file.read_exact(&mut raw)?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::of_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Ok(FeatureMatrix {
            utt_id: utt_id.to_string(),
            frames: Mat::from_vec(t, d, data),
            frame_shift_s: 0.0,
            frame_length_s: 0.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("feats.bin");
        let index = dir.path().join("feats.idx");
        let mut w = ArchiveWriter::create(&data, &index).unwrap();
        let mut mats = Vec::new();
        for i in 0..3 {
            let mut m = Mat::zeros(4 + i, 6);
            for r in 0..m.rows() {
                for c in 0..6 {
                    m.set(r, c, (i * 100 + r * 10 + c) as f64 * 0.5);
                }
            }
            let fm = FeatureMatrix {
                utt_id: format!("utt_{i}"),
                frames: m,
                frame_shift_s: 0.01,
                frame_length_s: 0.025,
            };
            w.append(&fm).unwrap();
            mats.push(fm);
        }
        w.finish().unwrap();

        let mut r = ArchiveReader::open(&data, &index).unwrap();
        // out-of-order access through the index
        for fm in mats.iter().rev() {
            let back: FeatureMatrix<f64> = r.read(&fm.utt_id).unwrap();
            assert_eq!(back.frames.shape(), fm.frames.shape());
            assert!(back.frames.max_abs_diff(&fm.frames) < 1e-6);
        }
        assert!(!r.contains("missing"));
        assert!(r.read::<f64>("missing").is_err());
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("feats.bin");
        let index = dir.path().join("feats.idx");
        let mut w = ArchiveWriter::create(&data, &index).unwrap();
        let fm = FeatureMatrix::<f64> {
            utt_id: "u".into(),
            frames: Mat::zeros(2, 2),
            frame_shift_s: 0.01,
            frame_length_s: 0.025,
        };
        w.append(&fm).unwrap();
        assert!(w.append(&fm).is_err());
    }
}
