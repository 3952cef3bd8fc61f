//! Hyperrectangle partitioning of the coordinate space and the automatic
//! partition planner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, MergeKind};

/// Closed per-dimension interval `[min_i, max_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl Bounds {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() || min.is_empty() {
            return Err(Error::Shape(format!(
                "bounds need matching non-empty min/max, got {} and {}",
                min.len(),
                max.len()
            )));
        }
        for (i, (lo, hi)) in min.iter().zip(&max).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "dimension {i}: need min < max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// `(-1, 1)^n`, the normalized coordinate box.
    pub fn unit(n: usize) -> Self {
        Self {
            min: vec![-1.0; n],
            max: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p
                .iter()
                .zip(self.min.iter().zip(&self.max))
                .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionGrid {
    bounds: Bounds,
    factors: Vec<usize>,
    deltas: Vec<f64>,
}

impl PartitionGrid {
    pub fn new(bounds: Bounds, factors: Vec<usize>) -> Result<Self> {
        if factors.len() != bounds.dim() {
            return Err(Error::Shape(format!(
                "{} partition factors for {}-dimensional bounds",
                factors.len(),
                bounds.dim()
            )));
        }
        if factors.contains(&0) {
            return Err(Error::InvalidArgument(
                "partition factors must be positive".into(),
            ));
        }
        let deltas = factors
            .iter()
            .zip(bounds.min.iter().zip(&bounds.max))
            .map(|(&c, (lo, hi))| (hi - lo) / c as f64)
            .collect();
        Ok(Self {
            bounds,
            factors,
            deltas,
        })
    }

    /// Grid over `(-1, 1)^n`.
    pub fn unit(factors: Vec<usize>) -> Result<Self> {
        let n = factors.len();
        Self::new(Bounds::unit(n), factors)
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    /// Total number of partitions `K = ∏ C_i`.
    pub fn len(&self) -> usize {
        self.factors.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Partition index vector of `p`. Points on the upper boundary belong
    /// to the last partition of that dimension.
    pub fn locate(&self, p: &[f64]) -> Result<Vec<usize>> {
        if p.len() != self.dim() {
            return Err(Error::Shape(format!(
                "{}-dimensional coordinate for a {}-dimensional grid",
                p.len(),
                self.dim()
            )));
        }
        if !self.bounds.contains(p) {
            return Err(Error::OutOfBounds(p.to_vec()));
        }
        Ok(p.iter()
            .enumerate()
            .map(|(i, &v)| {
                let cell = ((v - self.bounds.min[i]) / self.deltas[i]).floor() as usize;
                cell.min(self.factors[i] - 1)
            })
            .collect())
    }

    pub fn locate_flat(&self, p: &[f64]) -> Result<usize> {
        let idx = self.locate(p)?;
        self.flat_index(&idx)
    }

    /// Row-major linearization, last dimension fastest.
    pub fn flat_index(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.dim() {
            return Err(Error::Shape(format!(
                "{}-dimensional partition index for a {}-dimensional grid",
                idx.len(),
                self.dim()
            )));
        }
        let mut k = 0;
        for (i, (&p, &c)) in idx.iter().zip(&self.factors).enumerate() {
            if p >= c {
                return Err(Error::IndexOutOfRange(format!(
                    "index {p} in dimension {i} exceeds factor {c}"
                )));
            }
            k = k * c + p;
        }
        Ok(k)
    }

    pub fn unflatten(&self, k: usize) -> Result<Vec<usize>> {
        if k >= self.len() {
            return Err(Error::IndexOutOfRange(format!(
                "flat index {k} with only {} partitions",
                self.len()
            )));
        }
        let mut idx = vec![0; self.dim()];
        let mut rest = k;
        for i in (0..self.dim()).rev() {
            idx[i] = rest % self.factors[i];
            rest /= self.factors[i];
        }
        Ok(idx)
    }
}

/// Output of [`auto_partition`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub factors: Vec<usize>,
    pub local_hidden_dim: usize,
    pub global_hidden_dim: usize,
    pub predicted_total_params: usize,
}

/// Planner inputs besides the budget.
#[derive(Clone, Debug)]
pub struct PlanRequest<'a> {
    pub target_total_params: usize,
    pub target_global_ratio: f64,
    pub target_partition_size: &'a [usize],
    pub signal_resolution: &'a [usize],
    pub depth: usize,
    pub out_dim: usize,
    pub merge: MergeKind,
}

/// Partition count per dimension: `ceil(resolution / partition_size)`.
pub fn compute_num_groups(resolution: &[usize], partition_size: &[usize]) -> Result<Vec<usize>> {
    if resolution.len() != partition_size.len() {
        return Err(Error::Shape(format!(
            "{} resolution entries vs {} partition sizes",
            resolution.len(),
            partition_size.len()
        )));
    }
    if partition_size.contains(&0) || resolution.contains(&0) {
        return Err(Error::InvalidArgument(
            "resolution and partition size must be positive".into(),
        ));
    }
    Ok(resolution
        .iter()
        .zip(partition_size)
        .map(|(&r, &s)| r.div_ceil(s))
        .collect())
}

/// Largest `h ≥ 1` with `count(h) <= budget`, by binary search over a
/// monotone count. `None` when even `h = 1` does not fit.
fn find_dimension(budget: f64, count: impl Fn(usize) -> usize) -> Option<usize> {
    if count(1) as f64 > budget {
        return None;
    }
    let mut lo = 1usize;
    let mut hi = 2usize;
    while (count(hi) as f64) <= budget {
        lo = hi;
        hi *= 2;
    }
    // count(lo) <= budget < count(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if (count(mid) as f64) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// Chooses partition factors and hidden sizes for a local-global network
/// close to a parameter budget.
pub fn auto_partition(req: &PlanRequest<'_>) -> Result<PartitionPlan> {
    if !(0.0..1.0).contains(&req.target_global_ratio) {
        return Err(Error::InvalidArgument(format!(
            "global ratio must lie in [0, 1), got {}",
            req.target_global_ratio
        )));
    }
    if req.depth < 2 {
        return Err(Error::InvalidArgument("depth must be at least 2".into()));
    }
    let factors = compute_num_groups(req.signal_resolution, req.target_partition_size)?;
    let groups: usize = factors.iter().product();
    let n = factors.len();
    let (m, depth, merge) = (req.out_dim, req.depth, req.merge);
    let target = req.target_total_params as f64;

    let local_total = |h_l: usize| groups * model::local_block_params(n, m, h_l, depth);
    let global_total =
        |h_g: usize, h_l: usize| model::global_params(n, h_g, h_l, depth, merge);

    // The merge size depends on the local width, which itself depends on
    // what the global share leaves over. Seed with the local width that the
    // non-global share alone would afford.
    let infeasible = || {
        Error::InfeasiblePlan(format!(
            "{} parameters cannot host {groups} partitions with depth {depth}",
            req.target_total_params
        ))
    };
    let h_l_seed = find_dimension(target * (1.0 - req.target_global_ratio), local_total)
        .ok_or_else(infeasible)?;
    let mut global_hidden = find_dimension(target * req.target_global_ratio, |h| {
        global_total(h, h_l_seed)
    })
    .unwrap_or(1);

    // Remaining budget goes to the local blocks; the merge term is counted
    // with the candidate local width.
    let local_hidden = find_dimension(target, |h| local_total(h) + global_total(global_hidden, h))
        .ok_or_else(infeasible)?;

    let total = |h_g: usize| local_total(local_hidden) + global_total(h_g, local_hidden);
    let tolerance = 0.01 * target;
    let mut visited = std::collections::HashSet::new();
    loop {
        let t = total(global_hidden) as f64;
        if (t - target).abs() <= tolerance {
            break;
        }
        if !visited.insert(global_hidden) {
            return Err(Error::InfeasiblePlan(format!(
                "global width oscillates around {global_hidden} without reaching 1% of {}",
                req.target_total_params
            )));
        }
        if t > target {
            if global_hidden == 1 {
                return Err(Error::InfeasiblePlan(format!(
                    "minimum global width still exceeds {} by more than 1%",
                    req.target_total_params
                )));
            }
            global_hidden -= 1;
        } else {
            global_hidden += 1;
        }
    }

    Ok(PartitionPlan {
        predicted_total_params: total(global_hidden),
        factors,
        local_hidden_dim: local_hidden,
        global_hidden_dim: global_hidden,
    })
}

/// Local-only planning (no global branch): largest width whose total does
/// not exceed the budget.
pub fn plan_local_only(
    target_total_params: usize,
    target_partition_size: &[usize],
    signal_resolution: &[usize],
    depth: usize,
    out_dim: usize,
) -> Result<PartitionPlan> {
    let factors = compute_num_groups(signal_resolution, target_partition_size)?;
    let groups: usize = factors.iter().product();
    let n = factors.len();
    let count = |h| groups * model::local_block_params(n, out_dim, h, depth);
    let h = find_dimension(target_total_params as f64, count).ok_or_else(|| {
        Error::InfeasiblePlan(format!(
            "{target_total_params} parameters cannot host {groups} partitions"
        ))
    })?;
    Ok(PartitionPlan {
        predicted_total_params: count(h),
        factors,
        local_hidden_dim: h,
        global_hidden_dim: 0,
    })
}
