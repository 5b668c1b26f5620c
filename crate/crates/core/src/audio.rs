//! Minimal WAV I/O: 16-bit PCM mono, the only audio format the lab accepts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a RIFF/WAVE file")]
    NotWave { path: String },
    #[error("{path}: unsupported wav layout ({detail}); need 16-bit PCM mono")]
    Unsupported { path: String, detail: String },
}

#[derive(Debug, Clone)]
pub struct Wave {
    pub sample_rate: u32,
    /// Samples scaled to `[-1, 1)`.
    pub samples: Vec<f64>,
}

impl Wave {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn read_wav(path: &Path) -> Result<Wave, AudioError> {
    let show = path.display().to_string();
    let io_err = |source| AudioError::Io {
        path: show.clone(),
        source,
    };
    let f = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(f);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| AudioError::Io {
        path: show.clone(),
        source: e,
    })?;

    if buf.len() < 12 || &buf[0..4] != b"RIFF" || &buf[8..12] != b"WAVE" {
        return Err(AudioError::NotWave { path: show });
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= buf.len() {
        let id = &buf[pos..pos + 4];
        let size = u32::from_le_bytes([buf[pos + 4], buf[pos + 5], buf[pos + 6], buf[pos + 7]])
            as usize;
        let body_start = pos + 8;
        let body_end = (body_start + size).min(buf.len());
        let body = &buf[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(AudioError::Unsupported {
                        path: show,
                        detail: "short fmt chunk".into(),
                    });
                }
                let format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| AudioError::Unsupported {
        path: show.clone(),
        detail: "missing fmt chunk".into(),
    })?;
    if format != 1 || channels != 1 || bits != 16 {
        return Err(AudioError::Unsupported {
            path: show,
            detail: format!("format={format} channels={channels} bits={bits}"),
        });
    }
    let data = data.ok_or_else(|| AudioError::Unsupported {
        path: show.clone(),
        detail: "missing data chunk".into(),
    })?;

    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(Wave {
        sample_rate: rate,
        samples,
    })
}

pub fn write_wav(path: &Path, wave: &Wave) -> Result<(), AudioError> {
    let show = path.display().to_string();
    let io_err = |source| AudioError::Io {
        path: show.clone(),
        source,
    };
    let f = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(f);
    let n = wave.samples.len();
    let data_len = (n * 2) as u32;
    let mut write = |bytes: &[u8]| -> Result<(), AudioError> {
        w.write_all(bytes).map_err(|e| AudioError::Io {
            path: show.clone(),
            source: e,
        })
    };
    write(b"RIFF")?;
    write(&(36 + data_len).to_le_bytes())?;
    write(b"WAVE")?;
    write(b"fmt ")?;
    write(&16u32.to_le_bytes())?;
    write(&1u16.to_le_bytes())?; // PCM
    write(&1u16.to_le_bytes())?; // mono
    write(&wave.sample_rate.to_le_bytes())?;
    write(&(wave.sample_rate * 2).to_le_bytes())?; // byte rate
    write(&2u16.to_le_bytes())?; // block align
    write(&16u16.to_le_bytes())?; // bits
    write(b"data")?;
    write(&data_len.to_le_bytes())?;
    for &s in &wave.samples {
        let clamped = s.clamp(-1.0, 32767.0 / 32768.0);
        let v = (clamped * 32768.0).round() as i32;
        let v = v.clamp(i16::MIN as i32, i16::MAX as i32) as i16;
        write(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let wave = Wave {
            sample_rate: 16000,
            samples: (0..1600)
                .map(|i| (i as f64 * 0.01).sin() * 0.5)
                .collect(),
        };
        write_wav(&path, &wave).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.samples.len(), 1600);
        let max_err = wave
            .samples
            .iter()
            .zip(back.samples.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1.0 / 32768.0, "max quantization err {max_err}");
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a wav at all").unwrap();
        assert!(matches!(read_wav(&path), Err(AudioError::NotWave { .. })));
    }
}
