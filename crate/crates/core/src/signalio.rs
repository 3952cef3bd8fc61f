//! Sampled signals and their coordinate grids, plus binary PGM/PPM and
//! 16-bit PCM WAV codecs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::partition::Bounds;
use crate::tensors::Matrix;

/// Regularly sampled signal with values in `[-1, 1]`, stored row-major
/// with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    resolution: Vec<usize>,
    channels: usize,
    values: Vec<f32>,
}

impl Signal {
    pub fn new(resolution: Vec<usize>, channels: usize, values: Vec<f32>) -> Result<Self> {
        if resolution.is_empty() || resolution.contains(&0) || channels == 0 {
            return Err(Error::Shape(format!(
                "invalid signal shape {resolution:?} x {channels}"
            )));
        }
        let expected = resolution.iter().product::<usize>() * channels;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "signal {resolution:?} x {channels} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "signal value {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            resolution,
            channels,
            values,
        })
    }

    /// Builds a signal from arbitrary values, clamping into `[-1, 1]`
    /// (non-finite values become 0).
    pub fn from_clamped(resolution: Vec<usize>, channels: usize, values: Vec<f32>) -> Result<Self> {
        let values = values
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 })
            .collect();
        Self::new(resolution, channels, values)
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn dim(&self) -> usize {
        self.resolution.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn points(&self) -> usize {
        self.resolution.iter().product()
    }

    /// Coordinates over `(-1, 1)^n`, one row per sample.
    pub fn coords(&self) -> Matrix<f32> {
        grid_coords(&self.resolution)
    }

    /// Coordinates spanning `bounds` (endpoints inclusive).
    pub fn coords_in(&self, bounds: &Bounds) -> Result<Matrix<f32>> {
        coords_spanning(&self.resolution, bounds)
    }

    /// Values as a `points × channels` matrix.
    pub fn targets(&self) -> Matrix<f32> {
        Matrix::from_vec(self.points(), self.channels, self.values.clone())
            .expect("signal values are finite")
    }

    /// Axis-aligned sub-block starting at `offset` with extent `size`.
    pub fn window(&self, offset: &[usize], size: &[usize]) -> Result<Signal> {
        let n = self.dim();
        if offset.len() != n || size.len() != n {
            return Err(Error::Shape("window rank differs from signal rank".into()));
        }
        for d in 0..n {
            if size[d] == 0 || offset[d] + size[d] > self.resolution[d] {
                return Err(Error::Shape(format!(
                    "window {offset:?}+{size:?} exceeds signal {:?}",
                    self.resolution
                )));
            }
        }
        let total: usize = size.iter().product();
        let mut values = Vec::with_capacity(total * self.channels);
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            let mut flat = 0;
            for d in 0..n {
                flat = flat * self.resolution[d] + offset[d] + idx[d];
            }
            values.extend_from_slice(&self.values[flat * self.channels..(flat + 1) * self.channels]);
            for d in (0..n).rev() {
                idx[d] += 1;
                if idx[d] < size[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Signal::new(size.to_vec(), self.channels, values)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

fn coords_spanning(resolution: &[usize], bounds: &Bounds) -> Result<Matrix<f32>> {
    if bounds.dim() != resolution.len() {
        return Err(Error::Shape(format!(
            "{}-dimensional bounds for a {}-dimensional signal",
            bounds.dim(),
            resolution.len()
        )));
    }
    let axes: Vec<Vec<f32>> = resolution
        .iter()
        .enumerate()
        .map(|(d, &r)| {
            linspace(bounds.min()[d], bounds.max()[d], r)
                .into_iter()
                .map(|v| v as f32)
                .collect()
        })
        .collect();
    let n = resolution.len();
    let total: usize = resolution.iter().product();
    let mut data = Vec::with_capacity(total * n);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        for d in 0..n {
            data.push(axes[d][idx[d]]);
        }
        for d in (0..n).rev() {
            idx[d] += 1;
            if idx[d] < resolution[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Matrix::from_vec(total, n, data)
}

/// Row-major grid over `(-1, 1)^n`; each axis is an endpoint-inclusive
/// linspace, single-sample axes sit at 0.
pub fn grid_coords(resolution: &[usize]) -> Matrix<f32> {
    coords_spanning(resolution, &Bounds::unit(resolution.len()))
        .expect("unit bounds match resolution rank")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    /// Binary grayscale, `P5`.
    Pgm,
    /// Binary RGB, `P6`.
    Ppm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "pgm" => Some(Self::Pgm),
            "ppm" => Some(Self::Ppm),
            _ => None,
        }
    }

    fn channels(self) -> usize {
        match self {
            Self::Pgm => 1,
            Self::Ppm => 3,
        }
    }

    fn magic(self) -> &'static [u8; 2] {
        match self {
            Self::Pgm => b"P5",
            Self::Ppm => b"P6",
        }
    }
}

struct HeaderCursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start as u64, format!("expected {what}")));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, format!("{what} out of range")))
    }
}

/// Decodes binary PGM/PPM with maxval 255.
pub fn decode_pnm(bytes: &[u8], format: ImageFormat) -> Result<Signal> {
    if bytes.len() < 2 || &bytes[..2] != format.magic() {
        return Err(Error::format(
            0,
            format!(
                "expected magic {}",
                String::from_utf8_lossy(format.magic())
            ),
        ));
    }
    let mut cur = HeaderCursor { data: bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            maxval_at as u64,
            format!("only maxval 255 is supported, found {maxval}"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(2, "image has zero size"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::format(cur.pos as u64, "missing separator after maxval"));
    }
    let start = cur.pos + 1;
    let channels = format.channels();
    let need = width * height * channels;
    if bytes.len() - start < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated raster: need {need} bytes, have {}", bytes.len() - start),
        ));
    }
    let values = bytes[start..start + need]
        .iter()
        .map(|&b| 2.0 * (b as f32 / 255.0) - 1.0)
        .collect();
    Signal::new(vec![height, width], channels, values)
}

fn quantize_u8(v: f32) -> u8 {
    (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pnm(signal: &Signal, format: ImageFormat) -> Result<Vec<u8>> {
    if signal.dim() != 2 {
        return Err(Error::Shape(format!(
            "images are 2-dimensional, got {:?}",
            signal.resolution()
        )));
    }
    if signal.channels() != format.channels() {
        return Err(Error::Shape(format!(
            "{:?} needs {} channels, signal has {}",
            format,
            format.channels(),
            signal.channels()
        )));
    }
    let (h, w) = (signal.resolution()[0], signal.resolution()[1]);
    let mut out = format!(
        "{}\n{w} {h}\n255\n",
        String::from_utf8_lossy(format.magic())
    )
    .into_bytes();
    out.extend(signal.values().iter().map(|&v| quantize_u8(v)));
    Ok(out)
}

pub fn load_image(path: &Path, format: ImageFormat) -> Result<Signal> {
    decode_pnm(&fs::read(path)?, format)
}

pub fn save_image(signal: &Signal, path: &Path, format: ImageFormat) -> Result<()> {
    let bytes = encode_pnm(signal, format)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Decoded mono PCM16 clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Audio {
    pub signal: Signal,
    pub sample_rate: u32,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes RIFF/WAVE PCM, 16-bit, mono. Samples map to `s / 32768`.
pub fn decode_wav(bytes: &[u8]) -> Result<Audio> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format(0, "not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut sample_rate = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 || body + 16 > bytes.len() {
                return Err(Error::format(pos as u64, "fmt chunk too short"));
            }
            let format_tag = le_u16(bytes, body);
            let channels = le_u16(bytes, body + 2);
            let bits = le_u16(bytes, body + 14);
            if format_tag != 1 {
                return Err(Error::format(
                    body as u64,
                    format!("unsupported WAV encoding {format_tag}; only PCM (1) is accepted"),
                ));
            }
            if channels != 1 {
                return Err(Error::format(
                    (body + 2) as u64,
                    format!("{channels}-channel WAV; only mono is accepted"),
                ));
            }
            if bits != 16 {
                return Err(Error::format(
                    (body + 14) as u64,
                    format!("{bits}-bit WAV; only 16-bit samples are accepted"),
                ));
            }
            sample_rate = Some(le_u32(bytes, body + 4));
        } else if id == b"data" {
            let rate = sample_rate
                .ok_or_else(|| Error::format(pos as u64, "data chunk before fmt chunk"))?;
            if body + size > bytes.len() {
                return Err(Error::format(
                    bytes.len() as u64,
                    format!("truncated data chunk: need {size} bytes"),
                ));
            }
            let values: Vec<f32> = bytes[body..body + size]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                .collect();
            if values.is_empty() {
                return Err(Error::format(body as u64, "empty data chunk"));
            }
            return Ok(Audio {
                signal: Signal::new(vec![values.len()], 1, values)?,
                sample_rate: rate,
            });
        }
        pos = body + size + (size & 1);
    }
    Err(Error::format(pos as u64, "no data chunk"))
}

/// Canonical 44-byte-header PCM16 mono encoding.
pub fn encode_wav(signal: &Signal, sample_rate: u32) -> Result<Vec<u8>> {
    if signal.dim() != 1 || signal.channels() != 1 {
        return Err(Error::Shape(format!(
            "WAV output needs a 1-D mono signal, got {:?} x {}",
            signal.resolution(),
            signal.channels()
        )));
    }
    let data_len = (signal.points() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &v in signal.values() {
        let s = (v.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&s.to_le_bytes());
    }
    Ok(out)
}

pub fn load_wav(path: &Path) -> Result<Audio> {
    decode_wav(&fs::read(path)?)
}

pub fn save_wav(signal: &Signal, path: &Path, sample_rate: u32) -> Result<()> {
    fs::write(path, encode_wav(signal, sample_rate)?)?;
    Ok(())
}
