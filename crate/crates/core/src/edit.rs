//! Cropping and extension of trained models.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{CropMask, Model};
use crate::partition::{Bounds, PartitionGrid};
use crate::tensors::Real;
use crate::train::FreezeMask;

/// Removes the local sub-networks of `drop` (flat partition indices).
/// Global and merge weights are untouched, so outputs on the remaining
/// partitions are bitwise identical to the original model's.
pub fn crop<T: Real>(model: &Model<T>, drop: &[usize]) -> Result<Model<T>> {
    let k = model.mask().len();
    let drop: BTreeSet<usize> = drop.iter().copied().collect();
    for &d in &drop {
        if d >= k {
            return Err(Error::IndexOutOfRange(format!(
                "partition {d} with only {k} partitions"
            )));
        }
        if !model.mask().is_present(d) {
            return Err(Error::AlreadyCropped(d));
        }
    }
    if drop.is_empty() {
        return Ok(model.clone());
    }
    let bits: Vec<bool> = (0..k)
        .map(|i| model.mask().is_present(i) && !drop.contains(&i))
        .collect();
    let mask = CropMask::from_bits(bits)?;
    let keep_slots: Vec<bool> = model
        .mask()
        .kept_indices()
        .map(|i| !drop.contains(&i))
        .collect();
    let mut params = model.params().clone();
    for layer in &mut params.local {
        layer.weight.retain_slices(&keep_slots);
        layer.bias.retain_slices(&keep_slots);
    }
    Ok(Model::from_parts(model.spec().clone(), params, mask))
}

/// How new partitions pick the old partition they are copied from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MirrorMode {
    /// Reflect across the old border: `j ↦ 2·C − 1 − j`, repeated until in
    /// range, clamped at 0.
    #[default]
    Reflect,
    /// Repeat the outermost old slice.
    Replicate,
}

/// Old index along one dimension that seeds new index `j`.
pub fn mirror_source(j: usize, old_count: usize, mode: MirrorMode) -> usize {
    match mode {
        MirrorMode::Replicate => j.min(old_count - 1),
        MirrorMode::Reflect => {
            let c = old_count as isize;
            let mut j = j as isize;
            while j >= c {
                j = 2 * c - 1 - j;
            }
            j.max(0) as usize
        }
    }
}

/// Extended model plus a freeze mask covering the original partitions.
#[derive(Clone, Debug)]
pub struct Extension<T: Real = f32> {
    pub model: Model<T>,
    /// Marks the partitions that existed before extension; not applied
    /// unless passed to training.
    pub old_partitions: FreezeMask,
}

/// Grows the partition grid to `new_factors`, keeping the old partitions
/// at the low corner. Cell sizes are unchanged: the bounds grow by whole
/// cells from the old minimum corner, so old partitions keep their exact
/// coordinate ranges and, before any fine-tuning, their exact outputs.
/// Each new partition copies the weights of its mirrored old partition.
///
/// `new_bounds`, when given, must equal the implied enlarged box.
pub fn extend<T: Real>(
    model: &Model<T>,
    new_factors: &[usize],
    new_bounds: Option<&Bounds>,
    mode: MirrorMode,
) -> Result<Extension<T>> {
    let old = model.grid();
    let n = old.dim();
    if new_factors.len() != n {
        return Err(Error::Shape(format!(
            "{} factors for a {n}-dimensional grid",
            new_factors.len()
        )));
    }
    if let Some(d) = (0..n).find(|&d| new_factors[d] < old.factors()[d]) {
        return Err(Error::InvalidArgument(format!(
            "extension cannot shrink dimension {d} from {} to {}",
            old.factors()[d],
            new_factors[d]
        )));
    }
    let min = old.bounds().min().to_vec();
    let max: Vec<f64> = (0..n)
        .map(|d| {
            if new_factors[d] == old.factors()[d] {
                old.bounds().max()[d]
            } else {
                min[d] + new_factors[d] as f64 * old.deltas()[d]
            }
        })
        .collect();
    if let Some(b) = new_bounds {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        let ok = b.dim() == n
            && (0..n).all(|d| close(b.min()[d], min[d]) && close(b.max()[d], max[d]));
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "bounds {:?}..{:?} do not extend the old box by whole cells; expected {min:?}..{max:?}",
                b.min(),
                b.max()
            )));
        }
    }
    let grid = PartitionGrid::new(Bounds::new(min, max)?, new_factors.to_vec())?;
    let mut spec = model.spec().clone();
    spec.grid = grid;
    spec.validate()?;

    // Source old partition of every new one; old partitions map to
    // themselves.
    let mut bits = Vec::with_capacity(spec.grid.len());
    let mut sources = Vec::new();
    let mut old_kept = Vec::new();
    for k in 0..spec.grid.len() {
        let idx = spec.grid.unflatten(k)?;
        let inside = (0..n).all(|d| idx[d] < old.factors()[d]);
        let src_idx: Vec<usize> = (0..n)
            .map(|d| mirror_source(idx[d], old.factors()[d], mode))
            .collect();
        let src = old.flat_index(&src_idx)?;
        match model.slot_of(src) {
            Some(slot) => {
                bits.push(true);
                sources.push(slot);
                if inside {
                    old_kept.push(k);
                }
            }
            None if inside => bits.push(false),
            None => return Err(Error::CroppedPartition(src)),
        }
    }

    let mut params = model.params().clone();
    for layer in &mut params.local {
        layer.weight = layer.weight.gather(&sources);
        layer.bias = layer.bias.gather(&sources);
    }
    let mask = CropMask::from_bits(bits)?;
    Ok(Extension {
        model: Model::from_parts(spec, params, mask),
        old_partitions: FreezeMask {
            global: false,
            merge: false,
            partitions: old_kept,
        },
    })
}
