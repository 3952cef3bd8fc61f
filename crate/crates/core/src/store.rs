//! Binary model files.
//!
//! All integers are little-endian `u32`, all weights little-endian `f32`.
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `4C 47 49 4E 52 00 01 00` (`"LGINR\0"`, version 1, reserved 0) |
//! | 8 | 4 | kind: 0 siren, 1 spp, 2 lgs |
//! | 12 | 4 | `n` input dimension |
//! | 16 | 4 | `m` output channels |
//! | 20 | 4 | `D` depth |
//! | 24 | 4 | `h_l` local width |
//! | 28 | 4 | `h_g` global width (0 without a global network) |
//! | 32 | 4 | ω as `f32` |
//! | 36 | 4 | merge: bits 0..8 kind (0 concat_fc, 1 fc_add), bit 8 unit merge frequency |
//! | 40 | 16n | bounds: `n` minimums then `n` maximums, `f64` |
//! | 40+16n | 4n | partition factors |
//! | 40+20n | ⌈K/8⌉ | presence bitmap, partition `k` is bit `k % 8` of byte `k / 8` |
//!
//! The payload follows directly: the global layers (each weight row-major,
//! then bias), the merge weight and bias, then one block per kept partition
//! in ascending flat index. A block holds that partition's `D` layers, each
//! weight then bias. Cropping a partition therefore removes one contiguous
//! byte range, and the file length follows from the header alone.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::edit;
use crate::error::{Error, Result};
use crate::model::{ArchKind, CropMask, MergeKind, Model, ModelSpec, Params};
use crate::partition::{Bounds, PartitionGrid};

pub const MAGIC: [u8; 8] = *b"LGINR\0\x01\x00";
const VERSION_OFFSET: usize = 6;
const FIXED_HEADER: usize = 40;
const UNIT_FREQUENCY_BIT: u32 = 1 << 8;

/// Decoded header plus the byte ranges it implies.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub spec: ModelSpec,
    pub mask: CropMask,
    /// Length of the header in bytes; the payload starts here.
    pub header_len: usize,
    /// Bytes of global and merge weights.
    pub shared_len: usize,
    /// Bytes of one partition block.
    pub block_len: usize,
}

impl Header {
    pub fn file_len(&self) -> usize {
        self.header_len + self.shared_len + self.mask.kept_count() * self.block_len
    }
}

fn kind_code(kind: ArchKind) -> u32 {
    match kind {
        ArchKind::Siren => 0,
        ArchKind::Spp => 1,
        ArchKind::Lgs => 2,
    }
}

fn merge_code(merge: MergeKind) -> u32 {
    match merge {
        MergeKind::ConcatFc => 0,
        MergeKind::FcAdd => 1,
    }
}

fn header_bytes(spec: &ModelSpec, mask: &CropMask) -> Vec<u8> {
    let n = spec.in_dim;
    let mut out = Vec::with_capacity(FIXED_HEADER + 20 * n + mask.len().div_ceil(8));
    out.extend_from_slice(&MAGIC);
    for v in [
        kind_code(spec.kind),
        n as u32,
        spec.out_dim as u32,
        spec.depth as u32,
        spec.local_hidden as u32,
        spec.global_hidden as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&spec.omega.to_le_bytes());
    let unit = if spec.merge_unit_frequency { UNIT_FREQUENCY_BIT } else { 0 };
    out.extend_from_slice(&(merge_code(spec.merge) | unit).to_le_bytes());
    let b = spec.grid.bounds();
    for v in b.min().iter().chain(b.max()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &c in spec.grid.factors() {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&bitmap(mask.bits()));
    out
}

fn bitmap(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (k, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[k / 8] |= 1 << (k % 8);
    }
    out
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model. Non-finite weights are rejected.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let params = model.params();
    if !params.all_finite() {
        return Err(Error::InvalidArgument(
            "refusing to save non-finite weights".into(),
        ));
    }
    let mut out = header_bytes(model.spec(), model.mask());
    out.reserve(4 * params.len());
    for d in params.global.iter().chain(params.merge.iter()) {
        push_f32s(&mut out, d.weight.as_slice());
        push_f32s(&mut out, d.bias.as_slice());
    }
    for slot in 0..model.mask().kept_count() {
        for layer in &params.local {
            push_f32s(&mut out, layer.weight.slice(slot));
            push_f32s(&mut out, layer.bias.slice(slot));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("file ends inside {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses and validates the header; the payload is not touched beyond a
/// length check.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic[..VERSION_OFFSET] != MAGIC[..VERSION_OFFSET] {
        return Err(Error::format(0, "bad magic, not a model file"));
    }
    if magic[VERSION_OFFSET..] != MAGIC[VERSION_OFFSET..] {
        return Err(Error::format(
            VERSION_OFFSET as u64,
            format!("unsupported format version {}", magic[VERSION_OFFSET]),
        ));
    }
    let field = |r: &mut Reader<'_>, what: &str| -> Result<(u64, u32)> {
        let at = r.pos as u64;
        Ok((at, r.u32(what)?))
    };
    let (at, kind) = field(&mut r, "kind")?;
    let kind = match kind {
        0 => ArchKind::Siren,
        1 => ArchKind::Spp,
        2 => ArchKind::Lgs,
        k => return Err(Error::format(at, format!("unknown architecture code {k}"))),
    };
    let mut dims = [0usize; 5];
    for (d, name) in dims.iter_mut().zip(["n", "m", "D", "h_l", "h_g"]) {
        *d = r.u32(name)? as usize;
    }
    let [n, m, depth, h_l, h_g] = dims;
    if n == 0 || n > 64 {
        return Err(Error::format(12, format!("implausible input dimension {n}")));
    }
    let omega = f32::from_le_bytes(r.take(4, "omega")?.try_into().unwrap());
    let (at, merge) = field(&mut r, "merge kind")?;
    let unit = merge & UNIT_FREQUENCY_BIT != 0;
    let merge_kind = match merge & !UNIT_FREQUENCY_BIT {
        0 => MergeKind::ConcatFc,
        1 => MergeKind::FcAdd,
        k => return Err(Error::format(at, format!("unknown merge code {k}"))),
    };
    let bounds_at = r.pos as u64;
    let mut min = Vec::with_capacity(n);
    let mut max = Vec::with_capacity(n);
    for _ in 0..n {
        min.push(r.f64("bounds")?);
    }
    for _ in 0..n {
        max.push(r.f64("bounds")?);
    }
    let bounds = Bounds::new(min, max).map_err(|e| Error::format(bounds_at, e.to_string()))?;
    let factors_at = r.pos as u64;
    let mut factors = Vec::with_capacity(n);
    for _ in 0..n {
        factors.push(r.u32("partition factors")? as usize);
    }
    let k = factors
        .iter()
        .try_fold(1usize, |acc, &c| acc.checked_mul(c))
        .filter(|&k| k > 0 && k <= u32::MAX as usize)
        .ok_or_else(|| Error::format(factors_at, "partition factors overflow or are zero"))?;
    let grid =
        PartitionGrid::new(bounds, factors).map_err(|e| Error::format(factors_at, e.to_string()))?;
    let bitmap_at = r.pos;
    let map = r.take(k.div_ceil(8), "presence bitmap")?;
    if k % 8 != 0 && map[k / 8] >> (k % 8) != 0 {
        return Err(Error::format(
            (bitmap_at + k / 8) as u64,
            "bits set past the last partition",
        ));
    }
    let bits: Vec<bool> = (0..k).map(|i| map[i / 8] >> (i % 8) & 1 == 1).collect();
    let mask = CropMask::from_bits(bits)
        .map_err(|_| Error::format(bitmap_at as u64, "no partition is present"))?;
    let spec = ModelSpec {
        kind,
        in_dim: n,
        out_dim: m,
        depth,
        local_hidden: h_l,
        global_hidden: h_g,
        omega,
        merge: merge_kind,
        merge_unit_frequency: unit,
        grid,
    };
    spec.validate().map_err(|e| Error::format(8, e.to_string()))?;
    let b = spec.breakdown();
    let header = Header {
        header_len: r.pos,
        shared_len: 4 * (b.global + b.merge),
        block_len: 4 * b.per_partition,
        spec,
        mask,
    };
    if bytes.len() != header.file_len() {
        return Err(Error::format(
            bytes.len().min(header.file_len()) as u64,
            format!(
                "header implies {} bytes, file has {}",
                header.file_len(),
                bytes.len()
            ),
        ));
    }
    Ok(header)
}

/// Parses a model file held in memory.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let header = read_header(bytes)?;
    let mut params = Params::<f32>::zeros(&header.spec, header.mask.kept_count());
    let mut pos = header.header_len;
    let mut fill = |dst: &mut [f32]| -> Result<()> {
        for v in dst.iter_mut() {
            let x = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::format(pos as u64, "non-finite weight"));
            }
            *v = x;
            pos += 4;
        }
        Ok(())
    };
    let Params { global, merge, local } = &mut params;
    for d in global.iter_mut().chain(merge.iter_mut()) {
        fill(d.weight.as_mut_slice())?;
        fill(d.bias.as_mut_slice())?;
    }
    for slot in 0..header.mask.kept_count() {
        for layer in local.iter_mut() {
            fill(layer.weight.slice_mut(slot))?;
            fill(layer.bias.slice_mut(slot))?;
        }
    }
    Model::from_params(header.spec, params, header.mask)
}

/// Writes through a temporary file in the destination directory and
/// renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(model)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

/// Drops partitions from serialized bytes by rewriting the bitmap and
/// splicing out their blocks; weights are copied, never decoded.
pub fn crop_bytes(bytes: &[u8], drop: &[usize]) -> Result<Vec<u8>> {
    let header = read_header(bytes)?;
    let mask = &header.mask;
    let k = mask.len();
    for &d in drop {
        if d >= k {
            return Err(Error::IndexOutOfRange(format!(
                "partition {d} with only {k} partitions"
            )));
        }
        if !mask.is_present(d) {
            return Err(Error::AlreadyCropped(d));
        }
    }
    let bits: Vec<bool> = (0..k).map(|i| mask.is_present(i) && !drop.contains(&i)).collect();
    let new_mask = CropMask::from_bits(bits)?;
    let map_len = k.div_ceil(8);
    let map_at = header.header_len - map_len;
    let payload = header.header_len + header.shared_len;

    let mut out = Vec::with_capacity(
        header.header_len + header.shared_len + new_mask.kept_count() * header.block_len,
    );
    out.extend_from_slice(&bytes[..map_at]);
    out.extend_from_slice(&bitmap(new_mask.bits()));
    out.extend_from_slice(&bytes[header.header_len..payload]);
    for (slot, part) in mask.kept_indices().enumerate() {
        if new_mask.is_present(part) {
            let at = payload + slot * header.block_len;
            out.extend_from_slice(&bytes[at..at + header.block_len]);
        }
    }
    Ok(out)
}

/// File-to-file crop. The output is byte-identical to saving
/// [`edit::crop`] of the loaded model.
pub fn crop_file(input: impl AsRef<Path>, drop: &[usize], output: impl AsRef<Path>) -> Result<()> {
    let bytes = fs::read(input)?;
    write_atomic(output.as_ref(), &crop_bytes(&bytes, drop)?)
}

#[doc(hidden)]
pub fn crop_via_model(bytes: &[u8], drop: &[usize]) -> Result<Vec<u8>> {
    to_bytes(&edit::crop(&from_bytes(bytes)?, drop)?)
}
