//! Mono waveforms and RIFF/WAVE PCM16 file I/O.
//!
//! Samples are `f64` in [-1, 1]. On disk the format is fixed: RIFF/WAVE,
//! PCM 16-bit signed little-endian, mono. Integer samples decode to real
//! values via division by 32768; writing rounds and clamps so that 1.0
//! maps to 32767 and -1.0 to -32768.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// A mono waveform: finite samples plus a sample rate in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InputTooShort { got: 0, need: 1 });
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample_rate must be positive".into()));
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::MalformedWav(format!("truncated while reading {what}")))
}

/// Read a PCM16 mono RIFF/WAVE file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "RIFF magic")?;
    if &magic != b"RIFF" {
        return Err(Error::MalformedWav("missing RIFF magic".into()));
    }
    let _riff_size = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::MalformedWav("truncated RIFF size".into()))?;
    read_exact_or(&mut r, &mut magic, "WAVE tag")?;
    if &magic != b"WAVE" {
        return Err(Error::MalformedWav("missing WAVE tag".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<Vec<u8>> = None;

    loop {
        let mut id = [0u8; 4];
        match r.read_exact(&mut id) {
            Ok(()) => {}
            Err(_) => break, // end of chunks
        }
        let size = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::MalformedWav("truncated chunk size".into()))? as usize;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::MalformedWav("fmt chunk shorter than 16 bytes".into()));
                }
                let mut body = vec![0u8; size];
                read_exact_or(&mut r, &mut body, "fmt chunk")?;
                let mut c = &body[..];
                let audio_format = c.read_u16::<LittleEndian>().unwrap();
                let channels = c.read_u16::<LittleEndian>().unwrap();
                let sample_rate = c.read_u32::<LittleEndian>().unwrap();
                let _byte_rate = c.read_u32::<LittleEndian>().unwrap();
                let _block_align = c.read_u16::<LittleEndian>().unwrap();
                let bits = c.read_u16::<LittleEndian>().unwrap();
                fmt = Some((audio_format, channels, sample_rate, bits));
            }
            b"data" => {
                let mut body = vec![0u8; size];
                read_exact_or(&mut r, &mut body, "data chunk")?;
                data = Some(body);
            }
            _ => {
                // Skip unknown chunk (chunks are word-aligned).
                let padded = size + (size & 1);
                let mut skip = vec![0u8; padded];
                read_exact_or(&mut r, &mut skip, "chunk body")?;
                continue;
            }
        }
        if size & 1 == 1 {
            let mut pad = [0u8; 1];
            let _ = r.read_exact(&mut pad);
        }
        if fmt.is_some() && data.is_some() {
            break;
        }
    }

    let (audio_format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| Error::MalformedWav("missing fmt chunk".into()))?;
    if audio_format != 1 {
        return Err(Error::UnsupportedWav {
            field: "audio_format".into(),
            value: audio_format.to_string(),
            expected: "1 (PCM)".into(),
        });
    }
    if channels != 1 {
        return Err(Error::UnsupportedWav {
            field: "channels".into(),
            value: channels.to_string(),
            expected: "1 (mono)".into(),
        });
    }
    if bits != 16 {
        return Err(Error::UnsupportedWav {
            field: "bits_per_sample".into(),
            value: bits.to_string(),
            expected: "16".into(),
        });
    }
    let data = data.ok_or_else(|| Error::MalformedWav("missing data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(Error::MalformedWav("data chunk has odd byte length".into()));
    }

    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, sample_rate)
}

fn quantize_sample(x: f64) -> i16 {
    let v = (x * 32768.0).round();
    v.clamp(-32768.0, 32767.0) as i16
}

/// Write a PCM16 mono RIFF/WAVE file. Values are clamped to the 16-bit
/// range before quantization; output bytes are deterministic.
pub fn write_wav(path: impl AsRef<Path>, wav: &Waveform) -> Result<()> {
    let path = path.as_ref();
    if !wav.samples.iter().all(|s| s.is_finite()) {
        return Err(Error::NonFinite("waveform samples".into()));
    }
    let file =
        File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let data_len = (wav.samples.len() * 2) as u32;
    let ctx = || format!("write {}", path.display());
    let io = |e| Error::io(ctx(), e);

    w.write_all(b"RIFF").map_err(io)?;
    w.write_u32::<LittleEndian>(36 + data_len).map_err(io)?;
    w.write_all(b"WAVE").map_err(io)?;
    w.write_all(b"fmt ").map_err(io)?;
    w.write_u32::<LittleEndian>(16).map_err(io)?;
    w.write_u16::<LittleEndian>(1).map_err(io)?; // PCM
    w.write_u16::<LittleEndian>(1).map_err(io)?; // mono
    w.write_u32::<LittleEndian>(wav.sample_rate).map_err(io)?;
    w.write_u32::<LittleEndian>(wav.sample_rate * 2).map_err(io)?;
    w.write_u16::<LittleEndian>(2).map_err(io)?; // block align
    w.write_u16::<LittleEndian>(16).map_err(io)?;
    w.write_all(b"data").map_err(io)?;
    w.write_u32::<LittleEndian>(data_len).map_err(io)?;
    for &s in &wav.samples {
        w.write_i16::<LittleEndian>(quantize_sample(s)).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}
