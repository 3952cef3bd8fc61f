//! Fitting loop: MSE objective, AdamW, equal-count per-partition sampling.

use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::psnr_from_mse;
use crate::model::{CropMask, Model, ParamGroup, Params, PartitionedBatch};
use crate::partition::PartitionGrid;
use crate::signalio::Signal;
use crate::tensors::{Matrix, Real, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: f32,
    /// Learning rate for local sub-networks; `lr` when unset.
    pub local_lr: Option<f32>,
    pub betas: (f32, f32),
    pub weight_decay: f32,
    pub eps: f32,
    pub sample_fraction: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            lr: 5e-4,
            local_lr: None,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            eps: 1e-8,
            sample_fraction: 1.0,
            seed: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if let Some(l) = self.local_lr {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("local learning rate must be positive, got {l}"));
            }
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!(
                "sample fraction must lie in (0, 1], got {}",
                self.sample_fraction
            ));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight decay non-negative".into());
        }
        Ok(())
    }
}

/// One logged step. `mse` is on the `[0, 1]` value scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub mse: f64,
    pub psnr: f64,
    pub elapsed_secs: f64,
}

/// Parameters excluded from updates. Partitions are flat grid indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FreezeMask {
    pub global: bool,
    pub merge: bool,
    pub partitions: Vec<usize>,
}

impl FreezeMask {
    fn resolve(&self, model: &Model) -> Result<ResolvedFreeze> {
        let mut slots = vec![false; model.mask().kept_count()];
        for &k in &self.partitions {
            if k >= model.mask().len() {
                return Err(Error::IndexOutOfRange(format!(
                    "frozen partition {k} with only {} partitions",
                    model.mask().len()
                )));
            }
            if let Some(s) = model.slot_of(k) {
                slots[s] = true;
            }
        }
        Ok(ResolvedFreeze {
            global: self.global,
            merge: self.merge,
            slots,
        })
    }
}

struct ResolvedFreeze {
    global: bool,
    merge: bool,
    slots: Vec<bool>,
}

impl ResolvedFreeze {
    fn frozen(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Global => self.global,
            ParamGroup::Merge => self.merge,
            ParamGroup::Local(s) => self.slots[s],
        }
    }
}

/// AdamW first/second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update. Groups for which `frozen`
/// returns true keep their weights and moments untouched.
pub fn adamw_step<T: Real>(
    params: &mut Params<T>,
    grads: &Params<T>,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
    frozen: impl Fn(ParamGroup) -> bool,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("gradient/optimizer shapes differ from parameters".into()));
    }
    if !grads.all_finite() {
        return Err(Error::NonFiniteGradient(format!(
            "at optimizer step {}",
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.betas.0 as f64, config.betas.1 as f64);
    let c1 = T::from_f64_lossy(1.0 / (1.0 - b1.powi(t)));
    let c2 = T::from_f64_lossy(1.0 / (1.0 - b2.powi(t)));
    let (b1, b2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let one = T::one();
    let eps = T::from_f64_lossy(config.eps as f64);
    let wd = T::from_f64_lossy(config.weight_decay as f64);
    let lr_global = T::from_f64_lossy(config.lr as f64);
    let lr_local = T::from_f64_lossy(config.local_lr.unwrap_or(config.lr) as f64);

    let g_groups = grads.groups();
    let m_groups = state.m.groups_mut();
    let v_groups = state.v.groups_mut();
    let p_groups = params.groups_mut();
    for (((p, g), m), v) in p_groups.into_iter().zip(g_groups).zip(m_groups).zip(v_groups) {
        let (group, w) = p;
        if frozen(group) {
            continue;
        }
        let lr = match group {
            ParamGroup::Local(_) => lr_local,
            _ => lr_global,
        };
        for (((w, &g), m), v) in w.iter_mut().zip(g.1).zip(m.1.iter_mut()).zip(v.1.iter_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m * c1;
            let vh = *v * c2;
            *w -= lr * (mh / (vh.sqrt() + eps) + wd * *w);
        }
    }
    Ok(())
}

/// A training (or evaluation) batch in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub coords: Matrix<f32>,
    pub partition_ids: Vec<usize>,
    pub targets: Matrix<f32>,
}

/// Sample positions grouped by partition over the whole signal.
struct PointIndex {
    coords: Matrix<f32>,
    targets: Matrix<f32>,
    ids: Vec<usize>,
    /// Point indices of each kept partition, flat partition order.
    by_partition: Vec<(usize, Vec<usize>)>,
}

impl PointIndex {
    fn build(signal: &Signal, grid: &PartitionGrid, mask: &CropMask) -> Result<Self> {
        if signal.dim() != grid.dim() {
            return Err(Error::Shape(format!(
                "{}-dimensional signal for a {}-dimensional grid",
                signal.dim(),
                grid.dim()
            )));
        }
        if mask.len() != grid.len() {
            return Err(Error::Shape("crop mask does not match the grid".into()));
        }
        let coords = signal.coords_in(grid.bounds())?;
        let mut p = vec![0.0f64; grid.dim()];
        let mut ids = Vec::with_capacity(coords.rows());
        let mut members = vec![Vec::new(); grid.len()];
        for r in 0..coords.rows() {
            for (d, &v) in p.iter_mut().zip(coords.row(r)) {
                *d = v as f64;
            }
            let k = grid.locate_flat(&p)?;
            ids.push(k);
            members[k].push(r);
        }
        let mut by_partition = Vec::new();
        for (k, rows) in members.into_iter().enumerate() {
            if !mask.is_present(k) {
                continue;
            }
            if rows.is_empty() {
                return Err(Error::EmptyBatch(format!(
                    "partition {k} contains no samples; factors {:?} exceed resolution {:?}",
                    grid.factors(),
                    signal.resolution()
                )));
            }
            by_partition.push((k, rows));
        }
        Ok(Self {
            coords,
            targets: signal.targets(),
            ids,
            by_partition,
        })
    }

    fn full(&self) -> Sample {
        let rows: Vec<usize> = self.by_partition.iter().flat_map(|(_, r)| r.iter().copied()).collect();
        self.select(&rows)
    }

    fn per_partition_count(&self, fraction: f64) -> Result<usize> {
        let smallest = self.by_partition.iter().map(|(_, r)| r.len()).min().unwrap_or(0);
        let count = (fraction * smallest as f64).floor() as usize;
        if count == 0 {
            return Err(Error::EmptyBatch(format!(
                "fraction {fraction} of {smallest} points per partition is empty"
            )));
        }
        Ok(count)
    }

    fn draw(&self, count: usize, rng: &mut Rng) -> Sample {
        let mut rows = Vec::with_capacity(count * self.by_partition.len());
        for (_, members) in &self.by_partition {
            for i in index::sample(rng, members.len(), count) {
                rows.push(members[i]);
            }
        }
        self.select(&rows)
    }

    fn select(&self, rows: &[usize]) -> Sample {
        let n = self.coords.cols();
        let m = self.targets.cols();
        let mut c = Vec::with_capacity(rows.len() * n);
        let mut t = Vec::with_capacity(rows.len() * m);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            c.extend_from_slice(self.coords.row(r));
            t.extend_from_slice(self.targets.row(r));
            ids.push(self.ids[r]);
        }
        Sample {
            coords: Matrix::from_vec(rows.len(), n, c).expect("finite coordinates"),
            partition_ids: ids,
            targets: Matrix::from_vec(rows.len(), m, t).expect("finite targets"),
        }
    }
}

/// With `fraction == 1` every sample of every kept partition, once.
/// Otherwise `floor(fraction · n)` points per kept partition, drawn
/// without replacement, where `n` is the smallest partition's size.
pub fn sample_batch(
    signal: &Signal,
    grid: &PartitionGrid,
    mask: &CropMask,
    fraction: f64,
    rng: &mut Rng,
) -> Result<Sample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let index = PointIndex::build(signal, grid, mask)?;
    if fraction == 1.0 {
        return Ok(index.full());
    }
    let count = index.per_partition_count(fraction)?;
    Ok(index.draw(count, rng))
}

fn check_signal(model: &Model, signal: &Signal) -> Result<()> {
    if signal.dim() != model.spec().in_dim || signal.channels() != model.spec().out_dim {
        return Err(Error::Shape(format!(
            "signal {:?}x{} does not fit a model with {} inputs and {} outputs",
            signal.resolution(),
            signal.channels(),
            model.spec().in_dim,
            model.spec().out_dim
        )));
    }
    Ok(())
}

/// Trains `model` in place on `signal`, whose samples are laid out as an
/// endpoint-inclusive grid over the model's bounds. Frozen parameters are
/// never written. On error the model holds the weights of the last
/// completed step.
pub fn fit(
    model: &mut Model,
    signal: &Signal,
    config: &TrainConfig,
    freeze: Option<&FreezeMask>,
) -> Result<Vec<HistoryRecord>> {
    config.validate()?;
    check_signal(model, signal)?;
    let freeze = freeze.cloned().unwrap_or_default().resolve(model)?;
    let index = PointIndex::build(signal, model.grid(), model.mask())?;
    let full = config.sample_fraction == 1.0;
    let fixed = if full {
        let s = index.full();
        let batch = PartitionedBatch::new(model, &s.coords, &s.partition_ids)?;
        let targets = batch.gather_rows(s.targets.as_slice(), s.targets.cols());
        Some((batch, targets))
    } else {
        None
    };
    let count = if full { 0 } else { index.per_partition_count(config.sample_fraction)? };

    let mut rng = Rng::new(config.seed);
    let mut state = OptimizerState::new(model.params());
    let mut history = Vec::new();
    let start = Instant::now();
    let log_every = config.log_every.max(1);
    for it in 1..=config.iters {
        let drawn;
        let (batch, targets) = match &fixed {
            Some((b, t)) => (b, t),
            None => {
                let s = index.draw(count, &mut rng);
                let b = PartitionedBatch::new(model, &s.coords, &s.partition_ids)?;
                let t = b.gather_rows(s.targets.as_slice(), s.targets.cols());
                drawn = (b, t);
                (&drawn.0, &drawn.1)
            }
        };
        let (grads, loss) = model.loss_and_grad(batch, targets);
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: it, loss });
        }
        if it % log_every == 0 || it == config.iters || it == 1 {
            let mse = loss / 4.0;
            history.push(HistoryRecord {
                iteration: it,
                mse,
                psnr: psnr_from_mse(mse),
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
        }
        adamw_step(model.params_mut(), &grads, &mut state, config, |g| freeze.frozen(g))
            .map_err(|_| Error::Divergence { iteration: it, loss })?;
    }
    Ok(history)
}

/// Dense reconstruction over the model's bounds at `resolution`. Cropped
/// partitions are filled with `fill`; the second value counts those samples.
pub fn reconstruct(model: &Model, resolution: &[usize], fill: f32) -> Result<(Signal, usize)> {
    let m = model.spec().out_dim;
    if resolution.len() != model.spec().in_dim {
        return Err(Error::Shape(format!(
            "{}-dimensional resolution for a {}-dimensional model",
            resolution.len(),
            model.spec().in_dim
        )));
    }
    let probe = Signal::new(resolution.to_vec(), 1, vec![0.0; resolution.iter().product()])?;
    let coords = probe.coords_in(model.grid().bounds())?;
    let ids = model.locate_all(&coords)?;
    let keep: Vec<usize> = (0..coords.rows()).filter(|&r| model.mask().is_present(ids[r])).collect();
    let mut values = vec![fill; coords.rows() * m];
    if !keep.is_empty() {
        let n = coords.cols();
        let mut kc = Vec::with_capacity(keep.len() * n);
        for &r in &keep {
            kc.extend_from_slice(coords.row(r));
        }
        let kc = Matrix::from_vec(keep.len(), n, kc)?;
        let kid: Vec<usize> = keep.iter().map(|&r| ids[r]).collect();
        let out = model.forward(&kc, &kid)?;
        for (i, &r) in keep.iter().enumerate() {
            values[r * m..(r + 1) * m].copy_from_slice(out.row(i));
        }
    }
    let dropped = coords.rows() - keep.len();
    Ok((Signal::from_clamped(resolution.to_vec(), m, values)?, dropped))
}
