//! Signal files chosen by extension: `.pgm`, `.ppm` images and `.wav`
//! audio.

use std::path::Path;

use anyhow::{bail, Context, Result};
use lginr_core::signalio::{self, ImageFormat};
use lginr_core::Signal;

pub struct LoadedSignal {
    pub signal: Signal,
    /// Present for audio.
    pub sample_rate: Option<u32>,
}

fn is_wav(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

pub fn load_signal(path: &Path) -> Result<LoadedSignal> {
    let ctx = || format!("reading {}", path.display());
    if is_wav(path) {
        let a = signalio::load_wav(path).with_context(ctx)?;
        return Ok(LoadedSignal {
            signal: a.signal,
            sample_rate: Some(a.sample_rate),
        });
    }
    match ImageFormat::from_path(path) {
        Some(f) => Ok(LoadedSignal {
            signal: signalio::load_image(path, f).with_context(ctx)?,
            sample_rate: None,
        }),
        None => bail!("{}: expected a .pgm, .ppm or .wav file", path.display()),
    }
}

pub fn save_signal(signal: &Signal, path: &Path, sample_rate: u32) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    if is_wav(path) {
        return signalio::save_wav(signal, path, sample_rate).with_context(ctx);
    }
    match ImageFormat::from_path(path) {
        Some(f) => signalio::save_image(signal, path, f).with_context(ctx),
        None => bail!("{}: expected a .pgm, .ppm or .wav file", path.display()),
    }
}

/// Rounds `signal` to the sample depth of the file type at `like`, giving
/// exactly what writing and re-reading it would yield.
pub fn quantize(signal: &Signal, like: &Path, sample_rate: Option<u32>) -> Result<Signal> {
    if is_wav(like) {
        let bytes = signalio::encode_wav(signal, sample_rate.unwrap_or(16000))?;
        return Ok(signalio::decode_wav(&bytes)?.signal);
    }
    match ImageFormat::from_path(like) {
        Some(f) => Ok(signalio::decode_pnm(&signalio::encode_pnm(signal, f)?, f)?),
        None => bail!("{}: expected a .pgm, .ppm or .wav file", like.display()),
    }
}
