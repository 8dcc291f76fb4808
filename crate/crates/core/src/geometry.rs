//! Space-time geometry: the anisotropic metric, admissibility, and the
//! hierarchical partition of the product domain.
//!
//! Points live in the closed unit cylinder `[0,1]^n x [0,T]`. The metric
//! treats one unit of squared time like `beta` units of squared space:
//! `m((x,t),(y,s)) = max(|x-y|_inf, sqrt(|t-s|/beta))`. Under this metric a
//! box whose spatial sides halve while its time extent quarters keeps its
//! aspect ratio, which is why each refinement level splits every spatial axis
//! in two and the time axis in four.
//!
//! A pair of boxes is admissible when they are at least `rho` times their
//! larger diameter apart; the partition recurses on non-admissible pairs and
//! keeps admissible ones as leaves. Pairs whose target time box lies entirely
//! before the source time box are tagged causal-zero: the kernel vanishes
//! there identically and nothing has to be learned.

use crate::error::{Error, Result};

/// A closed interval `[lo, hi]` with `lo <= hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::NonFinite("interval endpoint".into()));
        }
        if lo > hi {
            return Err(Error::InvalidArgument(format!(
                "interval lower bound {lo} exceeds upper bound {hi}"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    /// Gap between two intervals; zero when they overlap or touch.
    pub fn gap(&self, other: &Interval) -> f64 {
        (other.lo - self.hi).max(self.lo - other.hi).max(0.0)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// An axis-aligned box in space-time: `n` spatial intervals plus one time
/// interval.
///
/// Boxes produced by [`build_partition`] also carry their refinement level and
/// integer indices (spatial indices first, time index last); ad-hoc boxes
/// built from raw bounds have level 0 and no indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeBox {
    pub spatial: Vec<Interval>,
    pub time: Interval,
    pub level: u32,
    pub indices: Vec<u64>,
}

impl SpaceTimeBox {
    /// Box from explicit bounds; no partition provenance.
    pub fn from_bounds(spatial: Vec<Interval>, time: Interval) -> Result<Self> {
        if spatial.is_empty() {
            return Err(Error::DimensionMismatch(
                "box needs at least one spatial axis".into(),
            ));
        }
        Ok(Self {
            spatial,
            time,
            level: 0,
            indices: Vec::new(),
        })
    }

    /// The level-`level` partition box with the given spatial indices and time
    /// index on the unit cylinder. Spatial cells have side `2^-level`, time
    /// cells length `4^-level`.
    pub fn from_indices(dim: usize, level: u32, spatial_idx: &[u64], time_idx: u64) -> Result<Self> {
        if spatial_idx.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {dim} spatial indices, got {}",
                spatial_idx.len()
            )));
        }
        let sp_cells = 1u64 << level;
        let t_cells = 1u64 << (2 * level);
        for &j in spatial_idx {
            if j >= sp_cells {
                return Err(Error::InvalidArgument(format!(
                    "spatial index {j} out of range at level {level}"
                )));
            }
        }
        if time_idx >= t_cells {
            return Err(Error::InvalidArgument(format!(
                "time index {time_idx} out of range at level {level}"
            )));
        }
        let h = 0.5f64.powi(level as i32);
        let tau = 0.25f64.powi(level as i32);
        let spatial = spatial_idx
            .iter()
            .map(|&j| Interval {
                lo: j as f64 * h,
                hi: (j + 1) as f64 * h,
            })
            .collect();
        let time = Interval {
            lo: time_idx as f64 * tau,
            hi: (time_idx + 1) as f64 * tau,
        };
        let mut indices = spatial_idx.to_vec();
        indices.push(time_idx);
        Ok(Self {
            spatial,
            time,
            level,
            indices,
        })
    }

    pub fn dim(&self) -> usize {
        self.spatial.len()
    }

    /// Whether a space-time point lies in the closed box.
    pub fn contains(&self, x: &[f64], t: f64) -> bool {
        x.len() == self.dim()
            && self.time.contains(t)
            && self.spatial.iter().zip(x).all(|(iv, &v)| iv.contains(v))
    }
}

/// Anisotropic space-time distance between two points.
pub fn metric(x: &[f64], t: f64, y: &[f64], s: f64, beta: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "point dimensions differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if beta <= 0.0 {
        return Err(Error::NonpositiveBeta(beta));
    }
    let spatial = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    Ok(spatial.max(((t - s).abs() / beta).sqrt()))
}

/// Diameter of a box under the metric: the largest spatial side or the
/// metric length of the time side, whichever is bigger.
pub fn diameter(b: &SpaceTimeBox, beta: f64) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::NonpositiveBeta(beta));
    }
    let spatial = b
        .spatial
        .iter()
        .map(Interval::length)
        .fold(0.0f64, f64::max);
    Ok(spatial.max((b.time.length() / beta).sqrt()))
}

/// Distance between two boxes under the metric: the infimum of the metric
/// over all point pairs, which for axis-aligned boxes is the larger of the
/// worst spatial gap and the metric time gap.
pub fn distance(a: &SpaceTimeBox, b: &SpaceTimeBox, beta: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "box dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if beta <= 0.0 {
        return Err(Error::NonpositiveBeta(beta));
    }
    let spatial = a
        .spatial
        .iter()
        .zip(&b.spatial)
        .map(|(p, q)| p.gap(q))
        .fold(0.0f64, f64::max);
    Ok(spatial.max((a.time.gap(&b.time) / beta).sqrt()))
}

/// Admissibility: the boxes are at least `rho` times the larger diameter
/// apart. The comparison is inclusive, so exact equality is admissible.
pub fn is_admissible(a: &SpaceTimeBox, b: &SpaceTimeBox, rho: f64, beta: f64) -> Result<bool> {
    if rho <= 0.0 || rho > 1.0 {
        return Err(Error::InvalidRho(rho));
    }
    let d = distance(a, b, beta)?;
    let r = diameter(a, beta)?.max(diameter(b, beta)?);
    Ok(d >= rho * r)
}

/// Classification of a leaf pair in the partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockStatus {
    /// Well separated; learnable by low-rank probing.
    Admissible,
    /// Near the diagonal at the final level; the model leaves it at zero.
    NonAdmissible,
    /// Target times precede source times, so the kernel is identically zero.
    CausalZero,
}

impl BlockStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockStatus::Admissible => "admissible",
            BlockStatus::NonAdmissible => "non-admissible",
            BlockStatus::CausalZero => "causal-zero",
        }
    }
}

/// A leaf of the partition: a target box (where the output lives) paired with
/// a source box (where the forcing lives).
///
/// `admissible` records the separation classification used by the block
/// counts; `causal_zero` is an orthogonal tag that short-circuits learning.
/// [`BoxPair::status`] folds the two into the reported status, with
/// causal-zero taking precedence.
#[derive(Debug, Clone)]
pub struct BoxPair {
    pub target: SpaceTimeBox,
    pub source: SpaceTimeBox,
    admissible: bool,
    causal_zero: bool,
}

impl BoxPair {
    pub fn new(target: SpaceTimeBox, source: SpaceTimeBox, admissible: bool) -> Self {
        let causal_zero = target.time.hi <= source.time.lo;
        Self {
            target,
            source,
            admissible,
            causal_zero,
        }
    }

    pub fn admissible(&self) -> bool {
        self.admissible
    }

    pub fn causal_zero(&self) -> bool {
        self.causal_zero
    }

    pub fn status(&self) -> BlockStatus {
        if self.causal_zero {
            BlockStatus::CausalZero
        } else if self.admissible {
            BlockStatus::Admissible
        } else {
            BlockStatus::NonAdmissible
        }
    }

    /// Stable identifier: level plus the concatenated target/source indices.
    pub fn id(&self) -> BlockId {
        BlockId {
            level: self.target.level,
            target: self.target.indices.clone(),
            source: self.source.indices.clone(),
        }
    }
}

/// Stable identity of a partition leaf, usable as a map key and as an RNG
/// substream index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId {
    pub level: u32,
    pub target: Vec<u64>,
    pub source: Vec<u64>,
}

/// Configuration for [`build_partition`].
#[derive(Debug, Clone)]
pub struct PartitionConfig {
    /// Spatial dimension `n`.
    pub dim: usize,
    /// Number of refinement levels; non-admissible pairs at this level become
    /// leaves.
    pub levels: u32,
    /// Admissibility parameter in `(0, 1]`. The index-based construction
    /// below realizes the metric criterion exactly at `rho = 1` and is
    /// conservative (never falsely admissible) for smaller values.
    pub rho: f64,
    /// Metric anisotropy parameter.
    pub beta: f64,
    /// Refuse to materialize a tree with more leaves than this.
    pub leaf_cap: u64,
}

impl PartitionConfig {
    pub fn new(dim: usize, levels: u32) -> Self {
        Self {
            dim,
            levels,
            rho: 1.0,
            beta: 1.0,
            leaf_cap: 1_000_000,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::DimensionMismatch(
                "spatial dimension must be at least 1".into(),
            ));
        }
        if self.rho <= 0.0 || self.rho > 1.0 {
            return Err(Error::InvalidRho(self.rho));
        }
        if self.beta <= 0.0 {
            return Err(Error::NonpositiveBeta(self.beta));
        }
        Ok(())
    }
}

/// The leaf-level partition of the product domain.
///
/// Only leaves are stored; interior nodes are recoverable from indices.
#[derive(Debug, Clone)]
pub struct PartitionTree {
    pub dim: usize,
    pub levels: u32,
    pub rho: f64,
    pub beta: f64,
    pub leaves: Vec<BoxPair>,
    adm_per_level: Vec<u64>,
    nonadm_count: u64,
}

impl PartitionTree {
    /// Admissible leaf counts per level (index 0 is level 1).
    pub fn admissible_per_level(&self) -> &[u64] {
        &self.adm_per_level
    }

    pub fn nonadmissible_count(&self) -> u64 {
        self.nonadm_count
    }

    pub fn admissible_total(&self) -> u64 {
        self.adm_per_level.iter().sum()
    }
}

/// Index-pair classification: a pair of same-level cells is non-admissible
/// exactly when every spatial and temporal index offset is at most one.
pub(crate) fn indices_nonadmissible(ti: &[u64], si: &[u64], tt: u64, st: u64) -> bool {
    ti.iter()
        .zip(si)
        .all(|(&a, &b)| a.abs_diff(b) <= 1)
        && tt.abs_diff(st) <= 1
}

/// Closed-form count of non-admissible pairs at the final level.
pub fn closed_nonadmissible_count(dim: usize, levels: u32) -> Result<u64> {
    let t = 3u64
        .checked_mul(1u64 << (2 * levels))
        .and_then(|v| v.checked_sub(2))
        .ok_or_else(|| Error::ResourceCap("non-admissible count overflow".into()))?;
    let s = 3u64 * (1u64 << levels) - 2;
    let mut out = t;
    for _ in 0..dim {
        out = out
            .checked_mul(s)
            .ok_or_else(|| Error::ResourceCap("non-admissible count overflow".into()))?;
    }
    Ok(out)
}

/// Closed-form count of admissible leaves created at a given level (>= 1):
/// children of the previous level's non-admissible pairs minus the pairs that
/// stay non-admissible.
pub fn closed_admissible_count_at_level(dim: usize, level: u32) -> Result<u64> {
    if level == 0 {
        return Err(Error::InvalidArgument(
            "admissible leaves exist only at level >= 1".into(),
        ));
    }
    let children_per_pair = {
        let c = 4u64 << dim; // 4 time children x 2^dim spatial children
        c.checked_mul(c)
            .ok_or_else(|| Error::ResourceCap("children count overflow".into()))?
    };
    let parents = closed_nonadmissible_count(dim, level - 1)?;
    let stay = closed_nonadmissible_count(dim, level)?;
    children_per_pair
        .checked_mul(parents)
        .and_then(|v| v.checked_sub(stay))
        .ok_or_else(|| Error::ResourceCap("admissible count overflow".into()))
}

/// Upper bound on the total number of admissible leaves across all levels:
/// `24 * 6^dim * 2^((dim+2) * levels)`.
pub fn admissible_count_bound(dim: usize, levels: u32) -> f64 {
    24.0 * 6f64.powi(dim as i32) * 2f64.powi(((dim as u32 + 2) * levels) as i32)
}

/// Metric width of the temporal region left non-admissible after `levels`
/// refinements: `sqrt(2) * 2^(-2 levels)`.
pub fn nonadmissible_time_width(levels: u32) -> f64 {
    std::f64::consts::SQRT_2 * 0.25f64.powi(levels as i32)
}

/// Exact leaf counts per status, per level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCounts {
    /// Admissible leaves created at each level (index 0 is level 1).
    pub admissible_per_level: Vec<u64>,
    /// Non-admissible leaves (all at the final level).
    pub nonadmissible: u64,
    /// Whether the admissible total respects the closed-form upper bound.
    pub bound_satisfied: bool,
}

impl BlockCounts {
    pub fn admissible_total(&self) -> u64 {
        self.admissible_per_level.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.admissible_total() + self.nonadmissible
    }
}

/// Count partition leaves by walking the non-admissible frontier without
/// materializing boxes. Usable at sizes where [`build_partition`] would blow
/// the leaf cap.
pub fn enumerate_block_counts(dim: usize, levels: u32) -> Result<BlockCounts> {
    if dim == 0 {
        return Err(Error::DimensionMismatch(
            "spatial dimension must be at least 1".into(),
        ));
    }
    // Frontier entries: target spatial indices, source spatial indices,
    // target time index, source time index.
    let mut frontier: Vec<(Vec<u64>, Vec<u64>, u64, u64)> =
        vec![(vec![0; dim], vec![0; dim], 0, 0)];
    let mut adm_per_level = Vec::new();
    for level in 1..=levels {
        let mut next = Vec::new();
        let mut admissible_here = 0u64;
        for (ti, si, tt, st) in &frontier {
            for_each_child_pair(ti, si, *tt, *st, |cti, csi, ctt, cst| {
                if indices_nonadmissible(cti, csi, ctt, cst) {
                    next.push((cti.to_vec(), csi.to_vec(), ctt, cst));
                } else {
                    admissible_here += 1;
                }
            });
        }
        adm_per_level.push(admissible_here);
        let expected = closed_admissible_count_at_level(dim, level)?;
        if admissible_here != expected {
            return Err(Error::NumericalBreakdown(format!(
                "admissible count at level {level} disagrees with closed form: \
                 enumerated {admissible_here}, expected {expected}"
            )));
        }
        frontier = next;
    }
    let nonadmissible = frontier.len() as u64;
    let expected_nonadm = closed_nonadmissible_count(dim, levels)?;
    if nonadmissible != expected_nonadm {
        return Err(Error::NumericalBreakdown(format!(
            "non-admissible count disagrees with closed form: \
             enumerated {nonadmissible}, expected {expected_nonadm}"
        )));
    }
    let total_adm: u64 = adm_per_level.iter().sum();
    Ok(BlockCounts {
        admissible_per_level: adm_per_level,
        nonadmissible,
        bound_satisfied: (total_adm as f64) <= admissible_count_bound(dim, levels),
    })
}

/// Enumerate the child index pairs of a non-admissible pair: each spatial
/// index spawns 2 children (2j, 2j+1), each time index spawns 4 (4j..4j+3),
/// independently on the target and source sides.
fn for_each_child_pair(
    ti: &[u64],
    si: &[u64],
    tt: u64,
    st: u64,
    mut f: impl FnMut(&[u64], &[u64], u64, u64),
) {
    let dim = ti.len();
    let spatial_combo_count = 1usize << (2 * dim); // target and source bits per axis
    let mut cti = vec![0u64; dim];
    let mut csi = vec![0u64; dim];
    for combo in 0..spatial_combo_count {
        for a in 0..dim {
            cti[a] = 2 * ti[a] + ((combo >> (2 * a)) & 1) as u64;
            csi[a] = 2 * si[a] + ((combo >> (2 * a + 1)) & 1) as u64;
        }
        for dt in 0..4u64 {
            for ds in 0..4u64 {
                f(&cti, &csi, 4 * tt + dt, 4 * st + ds);
            }
        }
    }
}

/// Build the leaf partition of the product domain.
///
/// Level 0 is the single root pair; at each level the non-admissible pairs
/// are refined, admissible children become leaves immediately, and the
/// non-admissible pairs remaining at the final level become leaves too.
/// With `levels = 0` the tree is the lone non-admissible root pair.
///
/// Fails with a resource error when the closed-form leaf count exceeds the
/// configured cap, before any allocation.
pub fn build_partition(config: &PartitionConfig) -> Result<PartitionTree> {
    config.validate()?;
    // Predict the leaf count from the closed forms before materializing.
    let mut predicted = closed_nonadmissible_count(config.dim, config.levels)?;
    for level in 1..=config.levels {
        predicted = predicted
            .checked_add(closed_admissible_count_at_level(config.dim, level)?)
            .ok_or_else(|| Error::ResourceCap("leaf count overflow".into()))?;
    }
    if predicted > config.leaf_cap {
        return Err(Error::ResourceCap(format!(
            "partition would have {predicted} leaves, cap is {}",
            config.leaf_cap
        )));
    }

    let dim = config.dim;
    let make_pair = |level: u32, ti: &[u64], si: &[u64], tt: u64, st: u64, admissible: bool| {
        let target = SpaceTimeBox::from_indices(dim, level, ti, tt)?;
        let source = SpaceTimeBox::from_indices(dim, level, si, st)?;
        Ok::<BoxPair, Error>(BoxPair::new(target, source, admissible))
    };

    let mut leaves = Vec::with_capacity(predicted as usize);
    let mut adm_per_level = vec![0u64; config.levels as usize];
    let mut frontier: Vec<(Vec<u64>, Vec<u64>, u64, u64)> =
        vec![(vec![0; dim], vec![0; dim], 0, 0)];
    for level in 1..=config.levels {
        let mut next = Vec::new();
        for (ti, si, tt, st) in &frontier {
            let mut child_err = None;
            for_each_child_pair(ti, si, *tt, *st, |cti, csi, ctt, cst| {
                if child_err.is_some() {
                    return;
                }
                if indices_nonadmissible(cti, csi, ctt, cst) {
                    next.push((cti.to_vec(), csi.to_vec(), ctt, cst));
                } else {
                    match make_pair(level, cti, csi, ctt, cst, true) {
                        Ok(p) => {
                            leaves.push(p);
                            adm_per_level[(level - 1) as usize] += 1;
                        }
                        Err(e) => child_err = Some(e),
                    }
                }
            });
            if let Some(e) = child_err {
                return Err(e);
            }
        }
        frontier = next;
    }
    let nonadm_count = frontier.len() as u64;
    for (ti, si, tt, st) in &frontier {
        leaves.push(make_pair(config.levels, ti, si, *tt, *st, false)?);
    }

    Ok(PartitionTree {
        dim: config.dim,
        levels: config.levels,
        rho: config.rho,
        beta: config.beta,
        leaves,
        adm_per_level,
        nonadm_count,
    })
}

/// Recount a materialized tree's leaves and cross-check the closed forms.
pub fn count_blocks(tree: &PartitionTree) -> Result<BlockCounts> {
    let mut adm_per_level = vec![0u64; tree.levels.max(1) as usize];
    let mut nonadm = 0u64;
    for leaf in &tree.leaves {
        if leaf.admissible() {
            let level = leaf.target.level;
            if level == 0 || level > tree.levels {
                return Err(Error::NumericalBreakdown(format!(
                    "admissible leaf at impossible level {level}"
                )));
            }
            adm_per_level[(level - 1) as usize] += 1;
        } else {
            if leaf.target.level != tree.levels {
                return Err(Error::NumericalBreakdown(
                    "non-admissible leaf not at the final level".into(),
                ));
            }
            nonadm += 1;
        }
    }
    if tree.levels == 0 {
        adm_per_level.clear();
    }
    for (i, &count) in adm_per_level.iter().enumerate() {
        let expected = closed_admissible_count_at_level(tree.dim, (i + 1) as u32)?;
        if count != expected {
            return Err(Error::NumericalBreakdown(format!(
                "admissible leaf count at level {} disagrees with closed form: \
                 {count} vs {expected}",
                i + 1
            )));
        }
    }
    let expected_nonadm = closed_nonadmissible_count(tree.dim, tree.levels)?;
    if nonadm != expected_nonadm {
        return Err(Error::NumericalBreakdown(format!(
            "non-admissible leaf count disagrees with closed form: \
             {nonadm} vs {expected_nonadm}"
        )));
    }
    let total_adm: u64 = adm_per_level.iter().sum();
    Ok(BlockCounts {
        admissible_per_level: adm_per_level,
        nonadmissible: nonadm,
        bound_satisfied: (total_adm as f64) <= admissible_count_bound(tree.dim, tree.levels),
    })
}
