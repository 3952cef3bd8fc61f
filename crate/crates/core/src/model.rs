//! Sine-activated coordinate networks: a plain SIREN, one SIREN per
//! partition, and the local-global variant where per-partition local
//! sub-networks are merged at every hidden stage with a shared global
//! sub-network.
//!
//! Layout conventions: activations are rows, a dense layer computes
//! `x · W + b` with `W` stored `fan_in × fan_out`. A network of depth `D`
//! has `D` local layers (the last one linear), `D − 1` global layers and a
//! single merge layer reused after each of the first `D − 1` local layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::PartitionGrid;
use crate::tensors::{
    col_sum_acc, gemm, gemm_bias, gemm_tn_acc, transpose_into, uniform, BatchedMatrix, Matrix,
    Real, Rng,
};

pub const DEFAULT_OMEGA: f32 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Siren,
    Spp,
    Lgs,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Siren => "siren",
            ArchKind::Spp => "spp",
            ArchKind::Lgs => "lgs",
        }
    }
}

/// How local and global features are combined at each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    /// `sin(ω([L ‖ G] · W + b))`
    ConcatFc,
    /// `L + sin(ω(G · W + b))`
    FcAdd,
}

impl MergeKind {
    pub fn name(self) -> &'static str {
        match self {
            MergeKind::ConcatFc => "concat_fc",
            MergeKind::FcAdd => "fc_add",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ArchKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub depth: usize,
    pub local_hidden: usize,
    /// Zero unless `kind == Lgs`.
    pub global_hidden: usize,
    pub omega: f32,
    pub merge: MergeKind,
    /// Use frequency 1 instead of `omega` inside the merge sine.
    pub merge_unit_frequency: bool,
    /// For `Siren` a single partition over the unit box.
    pub grid: PartitionGrid,
}

impl ModelSpec {
    pub fn siren(in_dim: usize, out_dim: usize, hidden: usize, depth: usize) -> Result<Self> {
        Self {
            kind: ArchKind::Siren,
            in_dim,
            out_dim,
            depth,
            local_hidden: hidden,
            global_hidden: 0,
            omega: DEFAULT_OMEGA,
            merge: MergeKind::ConcatFc,
            merge_unit_frequency: false,
            grid: PartitionGrid::unit(vec![1; in_dim.max(1)])?,
        }
        .validated()
    }

    pub fn spp(
        in_dim: usize,
        out_dim: usize,
        hidden: usize,
        depth: usize,
        grid: PartitionGrid,
    ) -> Result<Self> {
        Self {
            kind: ArchKind::Spp,
            in_dim,
            out_dim,
            depth,
            local_hidden: hidden,
            global_hidden: 0,
            omega: DEFAULT_OMEGA,
            merge: MergeKind::ConcatFc,
            merge_unit_frequency: false,
            grid,
        }
        .validated()
    }

    pub fn lgs(
        in_dim: usize,
        out_dim: usize,
        local_hidden: usize,
        global_hidden: usize,
        depth: usize,
        grid: PartitionGrid,
    ) -> Result<Self> {
        Self {
            kind: ArchKind::Lgs,
            in_dim,
            out_dim,
            depth,
            local_hidden,
            global_hidden,
            omega: DEFAULT_OMEGA,
            merge: MergeKind::ConcatFc,
            merge_unit_frequency: false,
            grid,
        }
        .validated()
    }

    pub fn with_omega(mut self, omega: f32) -> Result<Self> {
        self.omega = omega;
        self.validated()
    }

    pub fn with_merge(mut self, merge: MergeKind) -> Self {
        self.merge = merge;
        self
    }

    pub fn with_merge_unit_frequency(mut self, unit: bool) -> Self {
        self.merge_unit_frequency = unit;
        self
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.in_dim == 0 || self.out_dim == 0 {
            return bad("input and output dimensions must be positive".into());
        }
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.local_hidden == 0 {
            return bad("local hidden size must be positive".into());
        }
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return bad(format!("omega must be positive, got {}", self.omega));
        }
        if self.grid.dim() != self.in_dim {
            return bad(format!(
                "{}-dimensional grid for {}-dimensional input",
                self.grid.dim(),
                self.in_dim
            ));
        }
        match self.kind {
            ArchKind::Lgs if self.global_hidden == 0 => {
                bad("local-global networks need a positive global hidden size".into())
            }
            ArchKind::Siren | ArchKind::Spp if self.global_hidden != 0 => {
                bad("global hidden size only applies to local-global networks".into())
            }
            ArchKind::Siren if self.grid.len() != 1 => {
                bad("a plain SIREN has exactly one partition".into())
            }
            _ => Ok(()),
        }
    }

    pub fn partitions(&self) -> usize {
        self.grid.len()
    }

    pub fn has_global(&self) -> bool {
        self.kind == ArchKind::Lgs
    }

    pub fn merge_omega(&self) -> f32 {
        if self.merge_unit_frequency {
            1.0
        } else {
            self.omega
        }
    }

    /// `(fan_in, fan_out)` of local layer `i` (0-based).
    pub fn local_layer_shape(&self, i: usize) -> (usize, usize) {
        let h = self.local_hidden;
        let fan_in = if i == 0 { self.in_dim } else { h };
        let fan_out = if i + 1 == self.depth { self.out_dim } else { h };
        (fan_in, fan_out)
    }

    pub fn global_layer_shape(&self, i: usize) -> (usize, usize) {
        let h = self.global_hidden;
        (if i == 0 { self.in_dim } else { h }, h)
    }

    pub fn merge_shape(&self) -> (usize, usize) {
        match self.merge {
            MergeKind::ConcatFc => (self.local_hidden + self.global_hidden, self.local_hidden),
            MergeKind::FcAdd => (self.global_hidden, self.local_hidden),
        }
    }

    pub fn breakdown(&self) -> ParamBreakdown {
        let (global, merge) = if self.has_global() {
            let (mi, mo) = self.merge_shape();
            (
                global_block_params(self.in_dim, self.global_hidden, self.depth),
                mi * mo + mo,
            )
        } else {
            (0, 0)
        };
        ParamBreakdown {
            global,
            merge,
            per_partition: local_block_params(
                self.in_dim,
                self.out_dim,
                self.local_hidden,
                self.depth,
            ),
            partitions: self.partitions(),
            kept: self.partitions(),
        }
    }

    /// Total parameters with every partition present.
    pub fn param_count(&self) -> usize {
        self.breakdown().total()
    }
}

/// Parameters of one `depth`-layer sine MLP of width `h`:
/// `(n·h + h) + (D − 2)(h² + h) + (h·m + m)`.
pub fn local_block_params(n: usize, m: usize, h: usize, depth: usize) -> usize {
    (n * h + h) + (depth - 2) * (h * h + h) + (h * m + m)
}

/// Parameters of the `D − 1`-layer global sub-network.
pub fn global_block_params(n: usize, h_g: usize, depth: usize) -> usize {
    (n * h_g + h_g) + (depth - 2) * (h_g * h_g + h_g)
}

/// Global sub-network plus merge layer.
pub fn global_params(n: usize, h_g: usize, h_l: usize, depth: usize, merge: MergeKind) -> usize {
    let merge_in = match merge {
        MergeKind::ConcatFc => h_l + h_g,
        MergeKind::FcAdd => h_g,
    };
    global_block_params(n, h_g, depth) + merge_in * h_l + h_l
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub global: usize,
    pub merge: usize,
    pub per_partition: usize,
    pub partitions: usize,
    pub kept: usize,
}

impl ParamBreakdown {
    /// Global sub-network plus merge layer: the part cropping never removes.
    pub fn global_weights(&self) -> usize {
        self.global + self.merge
    }

    pub fn local_weights(&self) -> usize {
        self.kept * self.per_partition
    }

    pub fn total(&self) -> usize {
        self.global_weights() + self.local_weights()
    }
}

/// Per-partition presence bitmap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropMask {
    bits: Vec<bool>,
    kept: usize,
}

impl CropMask {
    pub fn full(k: usize) -> Self {
        Self {
            bits: vec![true; k],
            kept: k,
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        let kept = bits.iter().filter(|&&b| b).count();
        if kept == 0 {
            return Err(Error::EmptyModel);
        }
        Ok(Self { bits, kept })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.kept
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_present(&self, k: usize) -> bool {
        self.bits.get(k).copied().unwrap_or(false)
    }

    pub fn kept_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(k, &b)| b.then_some(k))
    }

    /// Storage slot of every partition (`None` when cropped).
    pub fn slots(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.bits
            .iter()
            .map(|&b| {
                b.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T = f32> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Real> Dense<T> {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// One local layer for every kept partition (slot order).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalLayer<T = f32> {
    pub weight: BatchedMatrix<T>,
    pub bias: BatchedMatrix<T>,
}

impl<T: Real> LocalLayer<T> {
    fn zeros(slots: usize, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: BatchedMatrix::zeros(slots, fan_in, fan_out),
            bias: BatchedMatrix::zeros(slots, 1, fan_out),
        }
    }

    fn cast<U: Real>(&self) -> LocalLayer<U> {
        LocalLayer {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Which freezable unit a parameter tensor (or slice) belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Global,
    Merge,
    /// Storage slot of a kept partition.
    Local(usize),
}

/// All trainable tensors of a network; also used for gradients and
/// optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T = f32> {
    pub global: Vec<Dense<T>>,
    pub merge: Option<Dense<T>>,
    pub local: Vec<LocalLayer<T>>,
}

impl<T: Real> Params<T> {
    pub fn zeros(spec: &ModelSpec, slots: usize) -> Self {
        let global = if spec.has_global() {
            (0..spec.depth - 1)
                .map(|i| {
                    let (a, b) = spec.global_layer_shape(i);
                    Dense::zeros(a, b)
                })
                .collect()
        } else {
            Vec::new()
        };
        let merge = spec.has_global().then(|| {
            let (a, b) = spec.merge_shape();
            Dense::zeros(a, b)
        });
        let local = (0..spec.depth)
            .map(|i| {
                let (a, b) = spec.local_layer_shape(i);
                LocalLayer::zeros(slots, a, b)
            })
            .collect();
        Self {
            global,
            merge,
            local,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            global: self
                .global
                .iter()
                .map(|d| Dense::zeros(d.weight.rows(), d.weight.cols()))
                .collect(),
            merge: self
                .merge
                .as_ref()
                .map(|d| Dense::zeros(d.weight.rows(), d.weight.cols())),
            local: self
                .local
                .iter()
                .map(|l| LocalLayer::zeros(l.weight.batch(), l.weight.rows(), l.weight.cols()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            global: self.global.iter().map(Dense::cast).collect(),
            merge: self.merge.as_ref().map(Dense::cast),
            local: self.local.iter().map(LocalLayer::cast).collect(),
        }
    }

    /// Every parameter slice with its group, in canonical order: global
    /// layers, merge, then local layers with one slice per slot.
    pub fn groups(&self) -> Vec<(ParamGroup, &[T])> {
        let mut out = Vec::new();
        for d in &self.global {
            out.push((ParamGroup::Global, d.weight.as_slice()));
            out.push((ParamGroup::Global, d.bias.as_slice()));
        }
        if let Some(d) = &self.merge {
            out.push((ParamGroup::Merge, d.weight.as_slice()));
            out.push((ParamGroup::Merge, d.bias.as_slice()));
        }
        for l in &self.local {
            for t in [&l.weight, &l.bias] {
                let n = t.slice_len();
                for (slot, chunk) in t.as_slice().chunks(n.max(1)).enumerate() {
                    out.push((ParamGroup::Local(slot), chunk));
                }
            }
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(ParamGroup, &mut [T])> {
        let mut out = Vec::new();
        for d in &mut self.global {
            out.push((ParamGroup::Global, d.weight.as_mut_slice()));
            out.push((ParamGroup::Global, d.bias.as_mut_slice()));
        }
        if let Some(d) = &mut self.merge {
            out.push((ParamGroup::Merge, d.weight.as_mut_slice()));
            out.push((ParamGroup::Merge, d.bias.as_mut_slice()));
        }
        for l in &mut self.local {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.slice_len();
                for (slot, chunk) in t.as_mut_slice().chunks_mut(n.max(1)).enumerate() {
                    out.push((ParamGroup::Local(slot), chunk));
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.groups().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.groups()
            .iter()
            .all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

/// A realized network: spec, weights, and which partitions are present.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub(crate) spec: ModelSpec,
    pub(crate) params: Params<T>,
    pub(crate) mask: CropMask,
    pub(crate) slots: Vec<Option<usize>>,
}

impl Model<f32> {
    /// SIREN-style initialization: first layers `U(−1/fan_in, 1/fan_in)`,
    /// deeper layers (including merge and output) `U(±√(6/fan_in)/ω)`,
    /// zero biases. Every partition draws its own weights.
    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let k = spec.partitions();
        let mut params = Params::<f32>::zeros(&spec, k);
        let omega = spec.omega as f64;
        let limit = |first: bool, fan_in: usize| {
            if first {
                1.0 / fan_in as f64
            } else {
                (6.0 / fan_in as f64).sqrt() / omega
            }
        };

        for (i, d) in params.global.iter_mut().enumerate() {
            let (a, b) = (d.weight.rows(), d.weight.cols());
            let l = limit(i == 0, a);
            d.weight = uniform(rng, -l, l, a, b)?;
        }
        if let Some(d) = &mut params.merge {
            let (a, b) = (d.weight.rows(), d.weight.cols());
            let l = limit(false, a);
            d.weight = uniform(rng, -l, l, a, b)?;
        }
        for slot in 0..k {
            for (i, layer) in params.local.iter_mut().enumerate() {
                let (a, b) = (layer.weight.rows(), layer.weight.cols());
                let l = limit(i == 0, a);
                let w = uniform::<f32>(rng, -l, l, a, b)?;
                layer.weight.slice_mut(slot).copy_from_slice(w.as_slice());
            }
        }
        Ok(Self::from_parts(spec, params, CropMask::full(k)))
    }
}

impl<T: Real> Model<T> {
    pub(crate) fn from_parts(spec: ModelSpec, params: Params<T>, mask: CropMask) -> Self {
        let slots = mask.slots();
        Self {
            spec,
            params,
            mask,
            slots,
        }
    }

    /// Assembles a model from explicit weights, checking every shape.
    pub fn from_params(spec: ModelSpec, params: Params<T>, mask: CropMask) -> Result<Self> {
        spec.validate()?;
        if mask.len() != spec.partitions() {
            return Err(Error::Shape(format!(
                "mask covers {} partitions, grid has {}",
                mask.len(),
                spec.partitions()
            )));
        }
        let expected = Params::<T>::zeros(&spec, mask.kept_count());
        let shapes = |p: &Params<T>| -> Vec<(usize, usize, usize)> {
            p.global
                .iter()
                .chain(p.merge.iter())
                .flat_map(|d| {
                    [
                        (1, d.weight.rows(), d.weight.cols()),
                        (1, d.bias.rows(), d.bias.cols()),
                    ]
                })
                .chain(p.local.iter().flat_map(|l| {
                    [
                        (l.weight.batch(), l.weight.rows(), l.weight.cols()),
                        (l.bias.batch(), l.bias.rows(), l.bias.cols()),
                    ]
                }))
                .collect()
        };
        if shapes(&params) != shapes(&expected) {
            return Err(Error::Shape("weight shapes do not match the spec".into()));
        }
        if !params.all_finite() {
            return Err(Error::InvalidArgument("weights must be finite".into()));
        }
        Ok(Self::from_parts(spec, params, mask))
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn mask(&self) -> &CropMask {
        &self.mask
    }

    pub fn grid(&self) -> &PartitionGrid {
        &self.spec.grid
    }

    /// Storage slot of flat partition `k`, if present.
    pub fn slot_of(&self, k: usize) -> Option<usize> {
        self.slots.get(k).copied().flatten()
    }

    pub fn breakdown(&self) -> ParamBreakdown {
        ParamBreakdown {
            kept: self.mask.kept_count(),
            ..self.spec.breakdown()
        }
    }

    pub fn param_count(&self) -> usize {
        self.breakdown().total()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
            mask: self.mask.clone(),
            slots: self.slots.clone(),
        }
    }

    /// Flat partition index of every coordinate row.
    pub fn locate_all(&self, coords: &Matrix<T>) -> Result<Vec<usize>> {
        if coords.cols() != self.spec.in_dim {
            return Err(Error::Shape(format!(
                "{}-dimensional coordinates for a {}-dimensional model",
                coords.cols(),
                self.spec.in_dim
            )));
        }
        let mut p = vec![0.0f64; coords.cols()];
        (0..coords.rows())
            .map(|r| {
                for (dst, v) in p.iter_mut().zip(coords.row(r)) {
                    *dst = v.to_f64_lossy();
                }
                self.spec.grid.locate_flat(&p)
            })
            .collect()
    }

    /// Network outputs for each coordinate row, in input order.
    pub fn forward(&self, coords: &Matrix<T>, partition_ids: &[usize]) -> Result<Matrix<T>> {
        let batch = PartitionedBatch::new(self, coords, partition_ids)?;
        let mut out = vec![T::zero(); coords.rows() * self.spec.out_dim];
        for chunk in batch.chunks(INFERENCE_CHUNK) {
            let tape = forward_tape(self, &chunk);
            chunk.scatter(&tape.output, self.spec.out_dim, &mut out);
        }
        Matrix::from_vec(coords.rows(), self.spec.out_dim, out)
    }

    /// [`Model::forward`] with partitions located from the coordinates.
    pub fn predict(&self, coords: &Matrix<T>) -> Result<Matrix<T>> {
        let ids = self.locate_all(coords)?;
        self.forward(coords, &ids)
    }

    /// Mean-squared-error loss over all outputs and its gradient with
    /// respect to every parameter.
    pub fn backward(
        &self,
        coords: &Matrix<T>,
        partition_ids: &[usize],
        targets: &Matrix<T>,
    ) -> Result<(Params<T>, f64)> {
        let batch = PartitionedBatch::new(self, coords, partition_ids)?;
        if targets.rows() != coords.rows() || targets.cols() != self.spec.out_dim {
            return Err(Error::Shape(format!(
                "targets are {}x{}, expected {}x{}",
                targets.rows(),
                targets.cols(),
                coords.rows(),
                self.spec.out_dim
            )));
        }
        let sorted = batch.gather_rows(targets.as_slice(), self.spec.out_dim);
        Ok(self.loss_and_grad(&batch, &sorted))
    }

    /// Gradient on a pre-grouped batch; `targets` in the batch's sorted
    /// order.
    pub fn loss_and_grad(&self, batch: &PartitionedBatch<T>, targets: &[T]) -> (Params<T>, f64) {
        let m = self.spec.out_dim;
        let n_out = batch.rows() * m;
        let scale = T::from_f64_lossy(2.0 / n_out as f64);
        let mut sq = 0.0f64;
        let mut grads = self.params.zeros_like();
        // Row tiles keep the tape cache-resident. Every accumulation runs
        // in row order, so the result does not depend on the tile size.
        let mut offset = 0;
        for chunk in batch.chunks(TRAIN_TILE) {
            let tape = forward_tape(self, &chunk);
            let t = &targets[offset * m..(offset + chunk.rows()) * m];
            let grad_out: Vec<T> = tape
                .output
                .iter()
                .zip(t)
                .map(|(&y, &t)| {
                    let r = y - t;
                    let rf = r.to_f64_lossy();
                    sq += rf * rf;
                    r * scale
                })
                .collect();
            backward_tape(self, &chunk, &tape, &grad_out, &mut grads);
            offset += chunk.rows();
        }
        (grads, sq / n_out as f64)
    }
}

const INFERENCE_CHUNK: usize = 256;
const TRAIN_TILE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub slot: usize,
    pub start: usize,
    pub len: usize,
}

/// Coordinates regrouped so that each partition's rows are contiguous,
/// which lets every local layer run as one product per partition.
#[derive(Clone, Debug)]
pub struct PartitionedBatch<T = f32> {
    coords: Vec<T>,
    in_dim: usize,
    segments: Vec<Segment>,
    /// `order[i]` is the input row stored at sorted position `i`.
    order: Vec<usize>,
}

impl<T: Real> PartitionedBatch<T> {
    pub fn new(model: &Model<T>, coords: &Matrix<T>, partition_ids: &[usize]) -> Result<Self> {
        let n = model.spec.in_dim;
        if coords.cols() != n {
            return Err(Error::Shape(format!(
                "{}-dimensional coordinates for a {n}-dimensional model",
                coords.cols()
            )));
        }
        if partition_ids.len() != coords.rows() {
            return Err(Error::Shape(format!(
                "{} partition ids for {} coordinates",
                partition_ids.len(),
                coords.rows()
            )));
        }
        let bounds = model.spec.grid.bounds();
        let mut slot_of_row = Vec::with_capacity(coords.rows());
        for (r, &k) in partition_ids.iter().enumerate() {
            let row = coords.row(r);
            let inside = row
                .iter()
                .zip(bounds.min().iter().zip(bounds.max()))
                .all(|(v, (lo, hi))| {
                    let v = v.to_f64_lossy();
                    v >= *lo && v <= *hi
                });
            if !inside {
                return Err(Error::OutOfBounds(
                    row.iter().map(|v| v.to_f64_lossy()).collect(),
                ));
            }
            if k >= model.slots.len() {
                return Err(Error::IndexOutOfRange(format!(
                    "partition {k} with only {} partitions",
                    model.slots.len()
                )));
            }
            slot_of_row.push(model.slots[k].ok_or(Error::CroppedPartition(k))?);
        }
        let mut order: Vec<usize> = (0..coords.rows()).collect();
        order.sort_by_key(|&r| slot_of_row[r]);

        let mut sorted = Vec::with_capacity(coords.len());
        let mut segments: Vec<Segment> = Vec::new();
        for (i, &r) in order.iter().enumerate() {
            sorted.extend_from_slice(coords.row(r));
            let slot = slot_of_row[r];
            match segments.last_mut() {
                Some(s) if s.slot == slot => s.len += 1,
                _ => segments.push(Segment {
                    slot,
                    start: i,
                    len: 1,
                }),
            }
        }
        Ok(Self {
            coords: sorted,
            in_dim: n,
            segments,
            order,
        })
    }

    pub fn rows(&self) -> usize {
        self.order.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Rows of `values` (input order) rearranged into sorted order.
    pub fn gather_rows(&self, values: &[T], width: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.rows() * width);
        for &r in &self.order {
            out.extend_from_slice(&values[r * width..(r + 1) * width]);
        }
        out
    }

    /// Writes sorted-order rows back to their input positions.
    pub fn scatter(&self, sorted: &[T], width: usize, out: &mut [T]) {
        for (i, &r) in self.order.iter().enumerate() {
            out[r * width..(r + 1) * width].copy_from_slice(&sorted[i * width..(i + 1) * width]);
        }
    }

    /// Splits into sub-batches of at most `rows` rows; segment boundaries
    /// are respected within each chunk.
    pub fn chunks(&self, rows: usize) -> Vec<PartitionedBatch<T>> {
        let rows = rows.max(1);
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.rows() {
            let end = (start + rows).min(self.rows());
            let segments = self
                .segments
                .iter()
                .filter_map(|s| {
                    let lo = s.start.max(start);
                    let hi = (s.start + s.len).min(end);
                    (lo < hi).then(|| Segment {
                        slot: s.slot,
                        start: lo - start,
                        len: hi - lo,
                    })
                })
                .collect();
            out.push(PartitionedBatch {
                coords: self.coords[start * self.in_dim..end * self.in_dim].to_vec(),
                in_dim: self.in_dim,
                segments,
                order: self.order[start..end].to_vec(),
            });
            start = end;
        }
        out
    }
}

/// Intermediate values of one hidden stage kept for the backward pass.
struct StageTape<T> {
    /// `ω·cos(ω z)` of the local layer.
    local_slope: Vec<T>,
    global_out: Vec<T>,
    global_slope: Vec<T>,
    /// Input of the merge layer (`[L ‖ G]` or `G`).
    merge_in: Vec<T>,
    merge_slope: Vec<T>,
    /// Stage output fed to the next local layer.
    out: Vec<T>,
}

struct Tape<T> {
    stages: Vec<StageTape<T>>,
    output: Vec<T>,
}

fn sine_with_slope<T: Real>(z: &mut [T], slope: &mut Vec<T>, omega: T) {
    slope.clear();
    slope.resize(z.len(), T::zero());
    T::sine_slope(z, slope, omega);
}

fn apply_local<T: Real>(
    layer: &LocalLayer<T>,
    segments: &[Segment],
    input: &[T],
    out: &mut [T],
) {
    let (fi, fo) = (layer.weight.rows(), layer.weight.cols());
    for s in segments {
        gemm_bias(
            &input[s.start * fi..(s.start + s.len) * fi],
            layer.weight.slice(s.slot),
            layer.bias.slice(s.slot),
            &mut out[s.start * fo..(s.start + s.len) * fo],
            s.len,
            fi,
            fo,
        );
    }
}

fn forward_tape<T: Real>(model: &Model<T>, batch: &PartitionedBatch<T>) -> Tape<T> {
    let spec = &model.spec;
    let p = &model.params;
    let rows = batch.rows();
    let omega = T::from_f64_lossy(spec.omega as f64);
    let merge_omega = T::from_f64_lossy(spec.merge_omega() as f64);
    let (h_l, h_g) = (spec.local_hidden, spec.global_hidden);
    let n_stages = spec.depth - 1;

    let mut stages: Vec<StageTape<T>> = Vec::with_capacity(n_stages);
    for s in 0..n_stages {
        let (local_in, global_in): (&[T], &[T]) = if s == 0 {
            (&batch.coords, &batch.coords)
        } else {
            (&stages[s - 1].out, &stages[s - 1].global_out)
        };
        let mut local = vec![T::zero(); rows * h_l];
        apply_local(&p.local[s], &batch.segments, local_in, &mut local);
        let mut local_slope = Vec::new();
        sine_with_slope(&mut local, &mut local_slope, omega);

        let stage = if spec.has_global() {
            let g_layer = &p.global[s];
            let fan_in = g_layer.weight.rows();
            let mut global = vec![T::zero(); rows * h_g];
            gemm_bias(
                global_in,
                g_layer.weight.as_slice(),
                g_layer.bias.as_slice(),
                &mut global,
                rows,
                fan_in,
                h_g,
            );
            let mut global_slope = Vec::new();
            sine_with_slope(&mut global, &mut global_slope, omega);

            let merge = p.merge.as_ref().expect("local-global model has a merge layer");
            let (merge_in, width) = match spec.merge {
                MergeKind::ConcatFc => {
                    let mut cat = Vec::with_capacity(rows * (h_l + h_g));
                    for (l, g) in local.chunks_exact(h_l).zip(global.chunks_exact(h_g)) {
                        cat.extend_from_slice(l);
                        cat.extend_from_slice(g);
                    }
                    (cat, h_l + h_g)
                }
                MergeKind::FcAdd => (global.clone(), h_g),
            };
            let mut merged = vec![T::zero(); rows * h_l];
            gemm_bias(
                &merge_in,
                merge.weight.as_slice(),
                merge.bias.as_slice(),
                &mut merged,
                rows,
                width,
                h_l,
            );
            let mut merge_slope = Vec::new();
            sine_with_slope(&mut merged, &mut merge_slope, merge_omega);
            if spec.merge == MergeKind::FcAdd {
                for (m, &l) in merged.iter_mut().zip(&local) {
                    *m = l + *m;
                }
            }
            StageTape {
                local_slope,
                global_out: global,
                global_slope,
                merge_in,
                merge_slope,
                out: merged,
            }
        } else {
            StageTape {
                local_slope,
                global_out: Vec::new(),
                global_slope: Vec::new(),
                merge_in: Vec::new(),
                merge_slope: Vec::new(),
                out: local,
            }
        };
        stages.push(stage);
    }

    let mut output = vec![T::zero(); rows * spec.out_dim];
    apply_local(
        &p.local[spec.depth - 1],
        &batch.segments,
        &stages[n_stages - 1].out,
        &mut output,
    );
    Tape { stages, output }
}

fn transposed<T: Real>(w: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); w.len()];
    transpose_into(w, rows, cols, &mut t);
    t
}

/// Local layer backward: accumulates weight/bias gradients per segment and,
/// when `grad_in` is given, propagates `grad_out · Wᵀ`.
fn local_backward<T: Real>(
    layer: &LocalLayer<T>,
    grads: &mut LocalLayer<T>,
    segments: &[Segment],
    input: &[T],
    grad_out: &[T],
    grad_in: Option<&mut [T]>,
) {
    let (fi, fo) = (layer.weight.rows(), layer.weight.cols());
    for s in segments {
        let rows = s.start..s.start + s.len;
        let x = &input[rows.start * fi..rows.end * fi];
        let g = &grad_out[rows.start * fo..rows.end * fo];
        gemm_tn_acc(x, g, grads.weight.slice_mut(s.slot), s.len, fi, fo);
        col_sum_acc(g, grads.bias.slice_mut(s.slot), fo);
    }
    if let Some(grad_in) = grad_in {
        for s in segments {
            let wt = transposed(layer.weight.slice(s.slot), fi, fo);
            let rows = s.start..s.start + s.len;
            gemm(
                &grad_out[rows.start * fo..rows.end * fo],
                &wt,
                &mut grad_in[rows.start * fi..rows.end * fi],
                s.len,
                fo,
                fi,
            );
        }
    }
}

fn backward_tape<T: Real>(
    model: &Model<T>,
    batch: &PartitionedBatch<T>,
    tape: &Tape<T>,
    grad_output: &[T],
    grads: &mut Params<T>,
) {
    let spec = &model.spec;
    let p = &model.params;
    let rows = batch.rows();
    let (h_l, h_g) = (spec.local_hidden, spec.global_hidden);
    let n_stages = spec.depth - 1;

    let mut grad_stage_out = vec![T::zero(); rows * h_l];
    local_backward(
        &p.local[spec.depth - 1],
        &mut grads.local[spec.depth - 1],
        &batch.segments,
        &tape.stages[n_stages - 1].out,
        grad_output,
        Some(&mut grad_stage_out),
    );

    // Gradient reaching the global features of stage s from stage s + 1.
    let mut grad_global_carry = vec![T::zero(); rows * h_g];

    for s in (0..n_stages).rev() {
        let st = &tape.stages[s];
        let mut grad_local = if spec.has_global() {
            let merge = p.merge.as_ref().expect("merge layer");
            let merge_grads = grads.merge.as_mut().expect("merge gradients");
            let width = merge.weight.rows();
            let g_z: Vec<T> = grad_stage_out
                .iter()
                .zip(&st.merge_slope)
                .map(|(&g, &d)| g * d)
                .collect();
            gemm_tn_acc(
                &st.merge_in,
                &g_z,
                merge_grads.weight.as_mut_slice(),
                rows,
                width,
                h_l,
            );
            col_sum_acc(&g_z, merge_grads.bias.as_mut_slice(), h_l);
            let mut g_merge_in = vec![T::zero(); rows * width];
            gemm(
                &g_z,
                &transposed(merge.weight.as_slice(), width, h_l),
                &mut g_merge_in,
                rows,
                h_l,
                width,
            );

            let (grad_local, mut grad_global) = match spec.merge {
                MergeKind::ConcatFc => {
                    let mut gl = Vec::with_capacity(rows * h_l);
                    let mut gg = Vec::with_capacity(rows * h_g);
                    for row in g_merge_in.chunks_exact(h_l + h_g) {
                        gl.extend_from_slice(&row[..h_l]);
                        gg.extend_from_slice(&row[h_l..]);
                    }
                    (gl, gg)
                }
                MergeKind::FcAdd => (grad_stage_out.clone(), g_merge_in),
            };
            for (g, &c) in grad_global.iter_mut().zip(&grad_global_carry) {
                *g += c;
            }

            let g_zg: Vec<T> = grad_global
                .iter()
                .zip(&st.global_slope)
                .map(|(&g, &d)| g * d)
                .collect();
            let g_layer = &p.global[s];
            let fan_in = g_layer.weight.rows();
            let global_in: &[T] = if s == 0 {
                &batch.coords
            } else {
                &tape.stages[s - 1].global_out
            };
            gemm_tn_acc(
                global_in,
                &g_zg,
                grads.global[s].weight.as_mut_slice(),
                rows,
                fan_in,
                h_g,
            );
            col_sum_acc(&g_zg, grads.global[s].bias.as_mut_slice(), h_g);
            if s > 0 {
                gemm(
                    &g_zg,
                    &transposed(g_layer.weight.as_slice(), fan_in, h_g),
                    &mut grad_global_carry,
                    rows,
                    h_g,
                    fan_in,
                );
            }
            grad_local
        } else {
            std::mem::take(&mut grad_stage_out)
        };

        for (g, &d) in grad_local.iter_mut().zip(&st.local_slope) {
            *g *= d;
        }
        let local_in: &[T] = if s == 0 {
            &batch.coords
        } else {
            &tape.stages[s - 1].out
        };
        if s > 0 {
            grad_stage_out.resize(rows * h_l, T::zero());
            local_backward(
                &p.local[s],
                &mut grads.local[s],
                &batch.segments,
                local_in,
                &grad_local,
                Some(&mut grad_stage_out),
            );
        } else {
            local_backward(
                &p.local[s],
                &mut grads.local[s],
                &batch.segments,
                local_in,
                &grad_local,
                None,
            );
        }
    }
}
