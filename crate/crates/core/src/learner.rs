//! Assembling, evaluating, storing, and benchmarking a learned kernel model.
//!
//! This module glues the pieces together: it walks the hierarchical
//! space-time partition, learns one low-rank factorization per admissible
//! leaf from forcing/solution pairs, and packages the result as a
//! [`GreensApproximant`] that can be evaluated at arbitrary points of the
//! unit cylinder. Alongside the learner it provides
//!
//! * a pointwise evaluator with exactly-one-leaf lookup semantics,
//! * a relative L1 accuracy report against reference kernels,
//! * a deterministic binary model format with integrity checks, and
//! * accuracy-versus-data learning curves driven by the level-selection
//!   rule from the theory module.
//!
//! Everything here is deterministic for a fixed seed: per-block randomness
//! comes from dedicated ChaCha substreams indexed by leaf position, block
//! results are collected in leaf order before any floating-point reduction,
//! and stored models serialize to byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, ModelIoError, Result};
use crate::fitting::log_log_slope;
use crate::geometry::{
    build_partition, indices_nonadmissible, BlockId, BlockStatus, BoxPair, PartitionConfig,
    PartitionTree,
};
use crate::grid::{BlockGrid, Grid, Quasimatrix, ScalarField, SharedGrid};
use crate::oracle::{heat_kernel_nd, heat_kernel_scaled};
use crate::rng::{substream, StreamKind};
use crate::rsvd::{learn_block, learn_block_adaptive, LowRankBlock};
use crate::sampling::{sample_gp, spectral_decompose, CovarianceKernel, SpectralDecomposition};
use crate::solver::ForwardMap;
use crate::table::KernelTable;
use crate::theory::levels_for_accuracy;

/// First bytes of every model file.
pub const MODEL_MAGIC: [u8; 8] = *b"GKAPPROX";

/// Version of the binary model layout written by [`serialize_model`].
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Default refusal threshold for partition sizes; covers four levels in one
/// spatial dimension with room to spare.
pub const DEFAULT_LEAF_CAP: u64 = 1_000_000;

/// Default number of covariance eigenmodes kept for probe sampling.
pub const DEFAULT_MODE_BUDGET: usize = 200;

/// Forward probes spent by [`estimate_operator_scale`].
pub const SCALE_PROBE_COUNT: usize = 6;

/// Relative singular-value cutoff used when factoring directly sampled
/// kernel blocks.
const DIRECT_SAMPLING_CUTOFF: f64 = 1e-12;

/// Smallest relative tolerance a learning-curve run will request from the
/// adaptive rank rule.
const CURVE_TOLERANCE_FLOOR: f64 = 1e-7;

/// Slack allowed when checking that a grid covers the unit time horizon.
const HORIZON_TOLERANCE: f64 = 1e-12;

/// How the rank of each learned block is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankRule {
    /// Probe every active block with `rank + oversample` random forcings and
    /// keep the revealed range.
    Fixed {
        /// Nominal rank of the sketch.
        rank: usize,
        /// Extra probes beyond the nominal rank.
        oversample: usize,
    },
    /// Grow the sketch in batches until the estimated missing operator mass
    /// drops below `tolerance` (absolute, operator-norm scale).
    Adaptive {
        /// Absolute stopping tolerance.
        tolerance: f64,
    },
    /// Factors obtained by sampling a reference kernel directly; produced
    /// only by [`approximant_from_kernel`], never by probing.
    Direct,
}

impl RankRule {
    fn validate(&self) -> Result<()> {
        match *self {
            RankRule::Fixed { rank, oversample } => {
                if rank == 0 || oversample == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "fixed rank rule needs rank and oversample of at least 1, got {rank} and {oversample}"
                    )));
                }
            }
            RankRule::Adaptive { tolerance } => {
                if !(tolerance > 0.0) || !tolerance.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "adaptive tolerance must be positive and finite, got {tolerance}"
                    )));
                }
            }
            RankRule::Direct => {
                return Err(Error::InvalidArgument(
                    "the direct rank rule labels sampled models and cannot drive probing".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Configuration for [`learn_greens`].
#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    /// Number of refinement levels of the space-time partition.
    pub levels: u32,
    /// Per-block rank selection rule.
    pub rank_rule: RankRule,
    /// Master seed; every probe drawn anywhere in the run derives from it.
    pub seed: u64,
    /// Admissibility parameter of the partition.
    pub rho: f64,
    /// Metric anisotropy parameter of the partition.
    pub beta: f64,
    /// Refuse partitions with more leaves than this.
    pub leaf_cap: u64,
    /// Largest number of covariance eigenmodes used for probe sampling;
    /// clamped to the grid size.
    pub mode_budget: usize,
    /// Free-form single-line description of the probed operator, stored in
    /// model metadata.
    pub operator_label: String,
}

impl LearnConfig {
    /// Configuration with default partition parameters (`rho = 1`,
    /// `beta = 1`), the default leaf cap and mode budget, and a generic
    /// operator label.
    pub fn new(levels: u32, rank_rule: RankRule, seed: u64) -> Self {
        Self {
            levels,
            rank_rule,
            seed,
            rho: 1.0,
            beta: 1.0,
            leaf_cap: DEFAULT_LEAF_CAP,
            mode_budget: DEFAULT_MODE_BUDGET,
            operator_label: "unspecified operator".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidArgument(
                "learning needs at least one partition level".into(),
            ));
        }
        self.rank_rule.validate()?;
        if self.mode_budget == 0 {
            return Err(Error::InvalidArgument(
                "the covariance mode budget must be at least 1".into(),
            ));
        }
        if self.operator_label.contains('\n') || self.operator_label.contains('\r') {
            return Err(Error::InvalidArgument(
                "operator labels must be a single line".into(),
            ));
        }
        Ok(())
    }
}

/// Descriptive record stored inside every model file.
///
/// Everything needed to rebuild the evaluation grid and the partition is
/// here; nothing in the record depends on when or where the model was
/// trained, so identical runs produce identical files.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMetadata {
    /// Layout version of the file this record was read from or will be
    /// written to.
    pub format_version: u32,
    /// Master seed of the training run.
    pub seed: u64,
    /// Partition refinement levels.
    pub levels: u32,
    /// Partition admissibility parameter.
    pub rho: f64,
    /// Partition metric anisotropy.
    pub beta: f64,
    /// Rank selection rule used in training.
    pub rank_rule: RankRule,
    /// Total forcing/solution pairs consumed across all blocks.
    pub pairs_total: u64,
    /// Spatial dimension of the grid.
    pub dim: usize,
    /// Spatial intervals per axis.
    pub intervals: usize,
    /// Time steps.
    pub steps: usize,
    /// Final time of the grid.
    pub horizon: f64,
    /// Spatial length scale of the probe covariance (0 when not applicable).
    pub covariance_length: f64,
    /// Temporal scale of the probe covariance (0 when not applicable).
    pub covariance_time: f64,
    /// Eigenmode budget used for probe sampling (0 for sampled models).
    pub mode_budget: usize,
    /// Single-line description of the operator or kernel behind the model.
    pub operator_label: String,
}

/// Which partition leaf an evaluation point falls in, and what kind of leaf
/// it is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafLocation {
    /// Identity of the leaf.
    pub id: BlockId,
    /// True when the leaf is admissible (carries a learned factorization).
    pub admissible: bool,
    /// True when every target time in the leaf precedes every source time,
    /// so the kernel vanishes there identically.
    pub causal_zero: bool,
}

impl LeafLocation {
    /// Status with the same precedence as the partition itself: causal
    /// vanishing wins over admissibility.
    pub fn status(&self) -> BlockStatus {
        if self.causal_zero {
            BlockStatus::CausalZero
        } else if self.admissible {
            BlockStatus::Admissible
        } else {
            BlockStatus::NonAdmissible
        }
    }
}

/// A learned kernel model: a hierarchical partition of the squared unit
/// cylinder with one low-rank factorization per stored leaf.
///
/// Evaluation walks the partition to the unique leaf containing the query
/// point and interpolates that leaf's factors. Leaves without a stored
/// block are implicit zeros: causal-vanishing leaves and, for probed
/// models, the non-admissible leaves hugging the diagonal.
#[derive(Debug, Clone)]
pub struct GreensApproximant {
    grid: SharedGrid,
    partition: PartitionTree,
    blocks: BTreeMap<BlockId, LowRankBlock>,
    metadata: ModelMetadata,
}

impl GreensApproximant {
    /// Discretization grid the model was trained on.
    pub fn grid(&self) -> &SharedGrid {
        &self.grid
    }

    /// The space-time partition underlying the block structure.
    pub fn partition(&self) -> &PartitionTree {
        &self.partition
    }

    /// Descriptive metadata (seed, sizes, pair counts).
    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    /// All stored blocks, keyed and ordered by leaf identity.
    pub fn blocks(&self) -> &BTreeMap<BlockId, LowRankBlock> {
        &self.blocks
    }

    /// The block stored for one leaf, if any.
    pub fn block(&self, id: &BlockId) -> Option<&LowRankBlock> {
        self.blocks.get(id)
    }

    /// Total forcing/solution pairs consumed to train the model.
    pub fn pairs_total(&self) -> u64 {
        self.metadata.pairs_total
    }

    /// Number of stored blocks with at least one separable term.
    pub fn active_block_count(&self) -> usize {
        self.blocks.values().filter(|b| !b.is_zero()).count()
    }

    /// Largest rank among stored blocks.
    pub fn max_rank(&self) -> usize {
        self.blocks.values().map(|b| b.rank()).max().unwrap_or(0)
    }

    fn check_point(&self, x: &[f64], t: f64, y: &[f64], s: f64) -> Result<()> {
        let dim = self.partition.dim;
        if x.len() != dim || y.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {dim} spatial coordinates per point, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        for &v in x.iter().chain(y.iter()).chain([t, s].iter()) {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "evaluation points must lie in the closed unit cylinder, got coordinate {v}"
                )));
            }
        }
        Ok(())
    }

    /// Find the unique partition leaf containing `((x, t), (y, s))`.
    ///
    /// Points on cell boundaries resolve to the cell with the smaller
    /// index along every tied axis, so each point belongs to exactly one
    /// leaf. Errors if the coordinates leave the closed unit cylinder or
    /// have the wrong dimension.
    pub fn locate(&self, x: &[f64], t: f64, y: &[f64], s: f64) -> Result<LeafLocation> {
        self.check_point(x, t, y, s)?;
        let levels = self.partition.levels;
        for level in 1..=levels {
            let space_cells = 1u64 << level;
            let time_cells = 1u64 << (2 * level);
            let ti: Vec<u64> = x.iter().map(|&v| cell_index(v, space_cells)).collect();
            let si: Vec<u64> = y.iter().map(|&v| cell_index(v, space_cells)).collect();
            let tt = cell_index(t, time_cells);
            let st = cell_index(s, time_cells);
            let nonadmissible = indices_nonadmissible(&ti, &si, tt, st);
            if !nonadmissible || level == levels {
                let mut target = ti;
                target.push(tt);
                let mut source = si;
                source.push(st);
                return Ok(LeafLocation {
                    id: BlockId {
                        level,
                        target,
                        source,
                    },
                    admissible: !nonadmissible,
                    causal_zero: tt + 1 <= st,
                });
            }
        }
        Err(Error::InvalidArgument(
            "the partition has no levels to search".into(),
        ))
    }

    /// Kernel value of the model at `((x, t), (y, s))`.
    ///
    /// Zero on causal-vanishing leaves and on near-diagonal leaves without
    /// a stored block.
    pub fn evaluate(&self, x: &[f64], t: f64, y: &[f64], s: f64) -> Result<f64> {
        let leaf = self.locate(x, t, y, s)?;
        Ok(match self.blocks.get(&leaf.id) {
            Some(block) => block.evaluate(x, t, y, s),
            None => 0.0,
        })
    }
}

/// Index of the partition cell containing `v` among `cells` equal cells of
/// the unit interval; boundary points resolve to the lower cell.
///
/// Because cell counts are powers of two, the scaling below is exact and
/// the located cells nest across levels.
fn cell_index(v: f64, cells: u64) -> u64 {
    let scaled = (v * cells as f64).ceil();
    if scaled <= 0.0 {
        0
    } else {
        ((scaled as u64) - 1).min(cells - 1)
    }
}

fn require_unit_horizon(grid: &SharedGrid) -> Result<()> {
    if (grid.horizon() - 1.0).abs() > HORIZON_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "the hierarchical partition covers the unit time horizon; got a grid with horizon {}",
            grid.horizon()
        )));
    }
    Ok(())
}

/// Attach the leaf identity to errors raised while learning one block.
fn annotate_block_error(err: Error, pair: &BoxPair) -> Error {
    let id = pair.id();
    let tag = format!(
        "leaf level {} target {:?} source {:?}: ",
        id.level, id.target, id.source
    );
    match err {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{tag}{m}")),
        Error::DimensionMismatch(m) => Error::DimensionMismatch(format!("{tag}{m}")),
        Error::DegenerateInput(m) => Error::DegenerateInput(format!("{tag}{m}")),
        Error::NonFinite(m) => Error::NonFinite(format!("{tag}{m}")),
        Error::NumericalBreakdown(m) => Error::NumericalBreakdown(format!("{tag}{m}")),
        other => other,
    }
}

/// Learn a kernel model for the operator behind `map` from forcing/solution
/// pairs alone.
///
/// Builds the hierarchical partition, skips causal-vanishing leaves (they
/// are implicit zeros), then learns one low-rank factorization per
/// remaining admissible leaf by randomized probing with forcings drawn
/// from `forcing`. Every leaf gets its own deterministic ChaCha
/// substream, and per-leaf results are collected in leaf order, so the
/// outcome is identical for any thread count. The returned model counts
/// every forward and adjoint solve it issued in
/// [`GreensApproximant::pairs_total`].
pub fn learn_greens<M: ForwardMap>(
    map: &M,
    forcing: &CovarianceKernel,
    config: &LearnConfig,
) -> Result<GreensApproximant> {
    config.validate()?;
    let grid = map.grid().clone();
    require_unit_horizon(&grid)?;
    let modes = config.mode_budget.min(grid.points());
    let decomposition = spectral_decompose(forcing, &grid, modes)?;
    let partition = build_partition(&PartitionConfig {
        dim: grid.dim(),
        levels: config.levels,
        rho: config.rho,
        beta: config.beta,
        leaf_cap: config.leaf_cap,
    })?;
    let jobs: Vec<(u64, &BoxPair)> = partition
        .leaves
        .iter()
        .filter(|pair| pair.admissible() && !pair.causal_zero())
        .enumerate()
        .map(|(index, pair)| (index as u64, pair))
        .collect();
    let learned: Result<Vec<(BlockId, LowRankBlock)>> = jobs
        .par_iter()
        .map(|&(index, pair)| {
            let block_seed = substream(config.seed, StreamKind::Block, index).gen::<u64>();
            let block = match config.rank_rule {
                RankRule::Fixed { rank, oversample } => {
                    learn_block(map, &decomposition, pair, rank, oversample, block_seed)
                }
                RankRule::Adaptive { tolerance } => {
                    learn_block_adaptive(map, &decomposition, pair, tolerance, block_seed)
                }
                RankRule::Direct => Err(Error::InvalidArgument(
                    "the direct rank rule cannot drive probing".into(),
                )),
            };
            block
                .map(|b| (pair.id(), b))
                .map_err(|e| annotate_block_error(e, pair))
        })
        .collect();
    let mut blocks = BTreeMap::new();
    let mut pairs_total = 0u64;
    for (id, block) in learned? {
        pairs_total += block.pairs_used as u64;
        blocks.insert(id, block);
    }
    let metadata = ModelMetadata {
        format_version: MODEL_FORMAT_VERSION,
        seed: config.seed,
        levels: config.levels,
        rho: config.rho,
        beta: config.beta,
        rank_rule: config.rank_rule,
        pairs_total,
        dim: grid.dim(),
        intervals: grid.intervals(),
        steps: grid.steps(),
        horizon: grid.horizon(),
        covariance_length: forcing.length_scale(),
        covariance_time: forcing.time_scale(),
        mode_budget: modes,
        operator_label: config.operator_label.clone(),
    };
    Ok(GreensApproximant {
        grid,
        partition,
        blocks,
        metadata,
    })
}

/// Largest observed L2 amplification of the operator over a few random
/// forcings: an inexpensive stand-in for its operator norm, used to turn
/// relative accuracy targets into absolute tolerances.
///
/// Spends `probes` forward solves; callers tracking data budgets should
/// add that many pairs on top of what learning itself consumed.
pub fn estimate_operator_scale<M: ForwardMap>(
    map: &M,
    decomposition: &SpectralDecomposition,
    probes: usize,
    master_seed: u64,
) -> Result<f64> {
    if probes == 0 {
        return Err(Error::InvalidArgument(
            "scale estimation needs at least one probe".into(),
        ));
    }
    let seed = substream(master_seed, StreamKind::Scale, 0).gen::<u64>();
    let omega = sample_gp(decomposition, probes, seed)?;
    let grid = map.grid();
    let mut best = 0.0f64;
    for j in 0..probes {
        let forcing = ScalarField::from_values(grid, omega.col(j).to_vec())?;
        let forcing_norm = forcing.norm_l2();
        if forcing_norm == 0.0 {
            continue;
        }
        let response = map.forward(&forcing)?;
        best = best.max(response.norm_l2() / forcing_norm);
    }
    Ok(best)
}

/// Build a model by sampling a known kernel directly on every causally
/// active leaf, including the near-diagonal ones probing cannot reach.
///
/// This is a diagnostic constructor: it consumes no forcing/solution pairs
/// and exists to separate partition/interpolation error from learning
/// error, and to exercise storage with fully populated partitions. Factors
/// come from a quadrature-weighted SVD per leaf, truncated at a relative
/// singular-value cutoff of `1e-12`.
pub fn approximant_from_kernel<F>(
    grid: &SharedGrid,
    levels: u32,
    kernel: &F,
    label: &str,
) -> Result<GreensApproximant>
where
    F: Fn(&[f64], f64, &[f64], f64) -> f64 + Sync + ?Sized,
{
    require_unit_horizon(grid)?;
    if levels == 0 {
        return Err(Error::InvalidArgument(
            "sampling needs at least one partition level".into(),
        ));
    }
    if label.contains('\n') || label.contains('\r') {
        return Err(Error::InvalidArgument(
            "kernel labels must be a single line".into(),
        ));
    }
    let partition = build_partition(&PartitionConfig {
        dim: grid.dim(),
        levels,
        rho: 1.0,
        beta: 1.0,
        leaf_cap: DEFAULT_LEAF_CAP,
    })?;
    let jobs: Vec<&BoxPair> = partition
        .leaves
        .iter()
        .filter(|pair| !pair.causal_zero())
        .collect();
    let sampled: Result<Vec<(BlockId, LowRankBlock)>> = jobs
        .par_iter()
        .map(|pair| {
            sample_block(grid, pair, kernel)
                .map(|b| (pair.id(), b))
                .map_err(|e| annotate_block_error(e, pair))
        })
        .collect();
    let mut blocks = BTreeMap::new();
    for (id, block) in sampled? {
        blocks.insert(id, block);
    }
    let metadata = ModelMetadata {
        format_version: MODEL_FORMAT_VERSION,
        seed: 0,
        levels,
        rho: 1.0,
        beta: 1.0,
        rank_rule: RankRule::Direct,
        pairs_total: 0,
        dim: grid.dim(),
        intervals: grid.intervals(),
        steps: grid.steps(),
        horizon: grid.horizon(),
        covariance_length: 0.0,
        covariance_time: 0.0,
        mode_budget: 0,
        operator_label: label.into(),
    };
    Ok(GreensApproximant {
        grid: grid.clone(),
        partition,
        blocks,
        metadata,
    })
}

/// Physical coordinates of every block point, in block point order
/// (time-major, spatial nodes fastest).
pub(crate) fn block_point_coords(grid: &SharedGrid, block: &BlockGrid) -> Vec<(Vec<f64>, f64)> {
    let space_ids = block.space_ids();
    let mut out = Vec::with_capacity(block.len());
    let mut x = vec![0.0; grid.dim()];
    for &level in block.time_ids() {
        let t = grid.time_coord(level);
        for &node in &space_ids {
            grid.node_coord(node, &mut x);
            out.push((x.clone(), t));
        }
    }
    out
}

fn sample_block<F>(grid: &SharedGrid, pair: &BoxPair, kernel: &F) -> Result<LowRankBlock>
where
    F: Fn(&[f64], f64, &[f64], f64) -> f64 + Sync + ?Sized,
{
    let target = BlockGrid::from_box(grid, &pair.target)?;
    let source = BlockGrid::from_box(grid, &pair.source)?;
    let target_points = block_point_coords(grid, &target);
    let source_points = block_point_coords(grid, &source);
    let mut dense = DMatrix::zeros(target.len(), source.len());
    for (q, (y, s)) in source_points.iter().enumerate() {
        for (p, (x, t)) in target_points.iter().enumerate() {
            let v = kernel(x, *t, y, *s);
            if !v.is_finite() {
                return Err(Error::NonFinite("sampled kernel value".into()));
            }
            dense[(p, q)] = v;
        }
    }
    let target_weights = target.point_weights();
    let source_weights = source.point_weights();
    for (p, &w) in target_weights.iter().enumerate() {
        let r = w.sqrt();
        for q in 0..source.len() {
            dense[(p, q)] *= r;
        }
    }
    for (q, &w) in source_weights.iter().enumerate() {
        let r = w.sqrt();
        for p in 0..target.len() {
            dense[(p, q)] *= r;
        }
    }
    let svd = dense.svd(true, true);
    let u = svd
        .u
        .as_ref()
        .ok_or_else(|| Error::NumericalBreakdown("SVD returned no left factors".into()))?;
    let vt = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::NumericalBreakdown("SVD returned no right factors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let top = order.first().map(|&i| svd.singular_values[i]).unwrap_or(0.0);
    let mut left_cols = Vec::new();
    let mut right_cols = Vec::new();
    if top > 0.0 {
        let cutoff = DIRECT_SAMPLING_CUTOFF * top;
        for &j in &order {
            let sigma = svd.singular_values[j];
            if sigma <= cutoff {
                break;
            }
            let left: Vec<f64> = (0..target.len())
                .map(|p| u[(p, j)] / target_weights[p].sqrt())
                .collect();
            let right: Vec<f64> = (0..source.len())
                .map(|q| sigma * vt[(j, q)] / source_weights[q].sqrt())
                .collect();
            left_cols.push(left);
            right_cols.push(right);
        }
    }
    let left = Quasimatrix::with_columns(Arc::new(target_weights), left_cols)?;
    let right = Quasimatrix::with_columns(Arc::new(source_weights), right_cols)?;
    Ok(LowRankBlock {
        pair: (*pair).clone(),
        target,
        source,
        left,
        right,
        pairs_used: 0,
    })
}

/// Reference kernels an approximant can be measured against.
pub enum KernelOracle<'a> {
    /// Analytic Dirichlet heat kernel with unit coefficient (tensor product
    /// across dimensions).
    HeatUnit,
    /// Analytic one-dimensional Dirichlet kernel of the operator with
    /// constant scalar coefficient.
    HeatScaled(f64),
    /// A fully sampled kernel table (unit strides), evaluated by
    /// multilinear interpolation in all four arguments.
    Table(&'a KernelTable),
    /// Any user-supplied reference kernel.
    Custom {
        /// Single-line description for reports.
        label: String,
        /// The kernel itself.
        kernel: &'a (dyn Fn(&[f64], f64, &[f64], f64) -> f64 + Sync),
    },
}

impl KernelOracle<'_> {
    /// Human-readable name used in error reports.
    pub fn label(&self) -> String {
        match self {
            KernelOracle::HeatUnit => "analytic heat kernel, unit coefficient".into(),
            KernelOracle::HeatScaled(c) => {
                format!("analytic heat kernel, coefficient {c}")
            }
            KernelOracle::Table(_) => "sampled kernel table".into(),
            KernelOracle::Custom { label, .. } => label.clone(),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            KernelOracle::HeatUnit => Ok(()),
            KernelOracle::HeatScaled(c) => {
                if dim != 1 {
                    return Err(Error::DimensionMismatch(format!(
                        "the scaled heat oracle is one-dimensional, the model has dimension {dim}"
                    )));
                }
                if !(*c > 0.0) || !c.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "the heat coefficient must be positive and finite, got {c}"
                    )));
                }
                Ok(())
            }
            KernelOracle::Table(table) => {
                let grid = table.grid();
                if grid.dim() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "table dimension {} vs model dimension {dim}",
                        grid.dim()
                    )));
                }
                require_unit_horizon(grid)?;
                let full = grid.space_nodes() * (grid.steps() + 1);
                if table.column_count() != full {
                    return Err(Error::InvalidArgument(format!(
                        "the table oracle needs every source sampled (unit strides): {} columns vs {full} sources",
                        table.column_count()
                    )));
                }
                Ok(())
            }
            KernelOracle::Custom { .. } => Ok(()),
        }
    }

    fn value(&self, x: &[f64], t: f64, y: &[f64], s: f64) -> Result<f64> {
        match self {
            KernelOracle::HeatUnit => Ok(heat_kernel_nd(x, t, y, s)),
            KernelOracle::HeatScaled(c) => Ok(heat_kernel_scaled(x[0], t, y[0], s, *c)),
            KernelOracle::Table(table) => table_interpolate(table, x, t, y, s),
            KernelOracle::Custom { kernel, .. } => Ok(kernel(x, t, y, s)),
        }
    }
}

/// Lower grid cell containing `v` and the interpolation weight of the upper
/// neighbor, for a uniform grid with `cells` cells on the unit interval.
fn axis_cell(v: f64, cells: usize) -> (usize, f64) {
    let scaled = v * cells as f64;
    let mut lo = scaled.floor() as usize;
    if lo >= cells {
        lo = cells - 1;
    }
    (lo, (scaled - lo as f64).clamp(0.0, 1.0))
}

/// Multilinear interpolation of a fully sampled kernel table in target
/// space, target time, source space, and source time.
fn table_interpolate(table: &KernelTable, x: &[f64], t: f64, y: &[f64], s: f64) -> Result<f64> {
    let grid = table.grid();
    let dim = grid.dim();
    let intervals = grid.intervals();
    let steps = grid.steps();
    let tx: Vec<(usize, f64)> = x.iter().map(|&v| axis_cell(v, intervals)).collect();
    let sy: Vec<(usize, f64)> = y.iter().map(|&v| axis_cell(v, intervals)).collect();
    let (t_lo, t_frac) = axis_cell(t, steps);
    let (s_lo, s_frac) = axis_cell(s, steps);
    let mut target_idx = vec![0usize; dim];
    let mut source_idx = vec![0usize; dim];
    let mut acc = 0.0;
    for target_corner in 0..(1usize << dim) {
        let mut wx = 1.0;
        for a in 0..dim {
            let hi = (target_corner >> a) & 1 == 1;
            target_idx[a] = tx[a].0 + hi as usize;
            wx *= if hi { tx[a].1 } else { 1.0 - tx[a].1 };
        }
        if wx == 0.0 {
            continue;
        }
        let target_node = grid.flatten(&target_idx);
        for dt in 0..2usize {
            let wt = if dt == 1 { t_frac } else { 1.0 - t_frac };
            if wt == 0.0 {
                continue;
            }
            let target_level = t_lo + dt;
            for source_corner in 0..(1usize << dim) {
                let mut wy = 1.0;
                for a in 0..dim {
                    let hi = (source_corner >> a) & 1 == 1;
                    source_idx[a] = sy[a].0 + hi as usize;
                    wy *= if hi { sy[a].1 } else { 1.0 - sy[a].1 };
                }
                if wy == 0.0 {
                    continue;
                }
                let source_node = grid.flatten(&source_idx);
                for ds in 0..2usize {
                    let ws = if ds == 1 { s_frac } else { 1.0 - s_frac };
                    if ws == 0.0 {
                        continue;
                    }
                    let source_level = s_lo + ds;
                    let col = table.column_of(source_node, source_level).ok_or_else(|| {
                        Error::InvalidArgument(
                            "the table oracle is missing a source column; rebuild with unit strides"
                                .into(),
                        )
                    })?;
                    acc += wx * wt * wy * ws * table.value(col, target_node, target_level);
                }
            }
        }
    }
    Ok(acc)
}

/// Midpoint evaluation grid for L1 accuracy reports: `space_cells` cells
/// per spatial axis and `time_cells` cells along time, in both the target
/// and the source copy of the cylinder.
///
/// Midpoints never touch partition cell boundaries, so every evaluation
/// point lies strictly inside one leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalGridSpec {
    /// Quadrature cells per spatial axis.
    pub space_cells: usize,
    /// Quadrature cells along the time axis.
    pub time_cells: usize,
}

impl EvalGridSpec {
    /// A spec with explicit cell counts.
    pub fn new(space_cells: usize, time_cells: usize) -> Result<Self> {
        if space_cells == 0 || time_cells == 0 {
            return Err(Error::InvalidArgument(
                "evaluation grids need at least one cell per axis".into(),
            ));
        }
        Ok(Self {
            space_cells,
            time_cells,
        })
    }
}

impl Default for EvalGridSpec {
    fn default() -> Self {
        Self {
            space_cells: 48,
            time_cells: 48,
        }
    }
}

/// Relative L1 accuracy of a model against a reference kernel, with the
/// error mass split by leaf kind.
///
/// `error_mass` always equals `admissible_error_mass +
/// nonadmissible_error_mass` exactly, and `relative_l1` always equals
/// `error_mass / oracle_mass` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// `|model - reference|` integrated over both cylinders, divided by the
    /// reference mass.
    pub relative_l1: f64,
    /// Absolute integrated error.
    pub error_mass: f64,
    /// Error contributed by points in admissible leaves.
    pub admissible_error_mass: f64,
    /// Error contributed by points in near-diagonal leaves.
    pub nonadmissible_error_mass: f64,
    /// Integral of `|reference|` over the same grid.
    pub oracle_mass: f64,
    /// Which reference kernel was used.
    pub oracle_label: String,
    /// Description of the quadrature rule.
    pub quadrature: String,
}

fn tensor_points(coords: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let mut points: Vec<Vec<f64>> = vec![Vec::new()];
    for _ in 0..dim {
        let mut next = Vec::with_capacity(points.len() * coords.len());
        for p in &points {
            for &c in coords {
                let mut q = p.clone();
                q.push(c);
                next.push(q);
            }
        }
        points = next;
    }
    points
}

/// Relative L1 distance between a model and a reference kernel on a
/// midpoint quadrature grid.
///
/// The error integral is split between admissible and near-diagonal leaves
/// so that learning error and partition truncation error can be told
/// apart. Accumulation order is fixed by the evaluation grid, so the
/// report is identical for any thread count. Errors if the reference has
/// no mass on the grid.
pub fn l1_error(
    model: &GreensApproximant,
    oracle: &KernelOracle<'_>,
    spec: &EvalGridSpec,
) -> Result<ErrorReport> {
    if spec.space_cells == 0 || spec.time_cells == 0 {
        return Err(Error::InvalidArgument(
            "evaluation grids need at least one cell per axis".into(),
        ));
    }
    let dim = model.partition.dim;
    oracle.validate(dim)?;
    let sc = spec.space_cells;
    let tc = spec.time_cells;
    let space_mid: Vec<f64> = (0..sc).map(|i| (i as f64 + 0.5) / sc as f64).collect();
    let time_mid: Vec<f64> = (0..tc).map(|j| (j as f64 + 0.5) / tc as f64).collect();
    let spatial_points = tensor_points(&space_mid, dim);
    let chunks: Result<Vec<(f64, f64, f64, f64)>> = (0..tc * tc)
        .into_par_iter()
        .map(|pair_idx| {
            let t = time_mid[pair_idx / tc];
            let s = time_mid[pair_idx % tc];
            let mut admissible_err = 0.0;
            let mut nonadmissible_err = 0.0;
            let mut admissible_ref = 0.0;
            let mut nonadmissible_ref = 0.0;
            for x in &spatial_points {
                for y in &spatial_points {
                    let leaf = model.locate(x, t, y, s)?;
                    let predicted = match model.blocks.get(&leaf.id) {
                        Some(block) => block.evaluate(x, t, y, s),
                        None => 0.0,
                    };
                    let reference = oracle.value(x, t, y, s)?;
                    let err = (reference - predicted).abs();
                    if leaf.admissible {
                        admissible_err += err;
                        admissible_ref += reference.abs();
                    } else {
                        nonadmissible_err += err;
                        nonadmissible_ref += reference.abs();
                    }
                }
            }
            Ok((
                admissible_err,
                nonadmissible_err,
                admissible_ref,
                nonadmissible_ref,
            ))
        })
        .collect();
    let mut admissible_err = 0.0;
    let mut nonadmissible_err = 0.0;
    let mut admissible_ref = 0.0;
    let mut nonadmissible_ref = 0.0;
    for (ae, ne, ar, nr) in chunks? {
        admissible_err += ae;
        nonadmissible_err += ne;
        admissible_ref += ar;
        nonadmissible_ref += nr;
    }
    let cell = (1.0 / sc as f64).powi(dim as i32) / tc as f64;
    let weight = cell * cell;
    let admissible_error_mass = admissible_err * weight;
    let nonadmissible_error_mass = nonadmissible_err * weight;
    let error_mass = admissible_error_mass + nonadmissible_error_mass;
    let oracle_mass = admissible_ref * weight + nonadmissible_ref * weight;
    if !error_mass.is_finite() || !oracle_mass.is_finite() {
        return Err(Error::NonFinite("L1 error accumulation".into()));
    }
    if oracle_mass <= 0.0 {
        return Err(Error::DegenerateInput(
            "the reference kernel has no mass on the evaluation grid".into(),
        ));
    }
    Ok(ErrorReport {
        relative_l1: error_mass / oracle_mass,
        error_mass,
        admissible_error_mass,
        nonadmissible_error_mass,
        oracle_mass,
        oracle_label: oracle.label(),
        quadrature: format!(
            "midpoint product rule, {sc} cells per spatial axis and {tc} time cells on each cylinder copy"
        ),
    })
}

/// One training run inside a learning curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    /// Requested relative accuracy.
    pub target: f64,
    /// Partition levels chosen for the target.
    pub levels: u32,
    /// True when the level choice hit the single-level floor.
    pub levels_clamped: bool,
    /// Measured relative L1 error of the trained model.
    pub achieved_relative_l1: f64,
    /// Forcing/solution pairs consumed, including the shared scale probes.
    pub pairs: u64,
}

/// Accuracy-versus-data summary produced by [`learning_curve`].
#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurve {
    /// One entry per requested accuracy target, in the given order.
    pub points: Vec<CurvePoint>,
    /// Log-log slope of pairs against inverse achieved error; `None` with
    /// fewer than two points.
    pub slope: Option<f64>,
    /// Estimated operator scale used to set absolute tolerances.
    pub operator_scale: f64,
}

/// Train one model per accuracy target and record how the consumed data
/// grows as the error falls.
///
/// Each target picks its partition depth through the level-selection rule
/// with the supplied diagonal constant, and an adaptive rank tolerance of
/// one tenth of the target on the operator's own scale. The shared scale
/// estimate costs [`SCALE_PROBE_COUNT`] forward solves, which every
/// curve point includes in its pair count. Targets must be strictly
/// decreasing.
pub fn learning_curve<M: ForwardMap>(
    map: &M,
    forcing: &CovarianceKernel,
    oracle: &KernelOracle<'_>,
    targets: &[f64],
    diagonal_constant: f64,
    spec: &EvalGridSpec,
    seed: u64,
) -> Result<LearningCurve> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument(
            "learning curves need at least one accuracy target".into(),
        ));
    }
    for &target in targets {
        if !(target > 0.0) || !target.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "accuracy targets must be positive and finite, got {target}"
            )));
        }
    }
    for window in targets.windows(2) {
        if !(window[1] < window[0]) {
            return Err(Error::InvalidArgument(
                "accuracy targets must be strictly decreasing".into(),
            ));
        }
    }
    let grid = map.grid().clone();
    require_unit_horizon(&grid)?;
    let modes = DEFAULT_MODE_BUDGET.min(grid.points());
    let decomposition = spectral_decompose(forcing, &grid, modes)?;
    let scale = estimate_operator_scale(map, &decomposition, SCALE_PROBE_COUNT, seed)?;
    if !(scale > 0.0) {
        return Err(Error::DegenerateInput(
            "the operator returned zero responses; its learning curve is undefined".into(),
        ));
    }
    let mut points = Vec::with_capacity(targets.len());
    for &target in targets {
        let (levels, levels_clamped) = levels_for_accuracy(target, diagonal_constant)?;
        let tolerance = scale * (target / 10.0).max(CURVE_TOLERANCE_FLOOR);
        let config = LearnConfig::new(levels, RankRule::Adaptive { tolerance }, seed);
        let model = learn_greens(map, forcing, &config)?;
        let report = l1_error(&model, oracle, spec)?;
        if !(report.relative_l1 > 0.0) {
            return Err(Error::DegenerateInput(
                "a curve point achieved exactly zero error; the log-log fit is undefined".into(),
            ));
        }
        points.push(CurvePoint {
            target,
            levels,
            levels_clamped,
            achieved_relative_l1: report.relative_l1,
            pairs: model.pairs_total() + SCALE_PROBE_COUNT as u64,
        });
    }
    let slope = if points.len() >= 2 {
        let inverse_error: Vec<f64> = points.iter().map(|p| 1.0 / p.achieved_relative_l1).collect();
        let pairs: Vec<f64> = points.iter().map(|p| p.pairs as f64).collect();
        Some(log_log_slope(&inverse_error, &pairs)?)
    } else {
        None
    };
    Ok(LearningCurve {
        points,
        slope,
        operator_scale: scale,
    })
}

const METADATA_KEYS: [&str; 14] = [
    "seed",
    "levels",
    "rho",
    "beta",
    "rank_rule",
    "pairs_total",
    "dim",
    "intervals",
    "steps",
    "horizon",
    "covariance_length",
    "covariance_time",
    "mode_budget",
    "operator",
];

fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn rank_rule_text(rule: &RankRule) -> String {
    match *rule {
        RankRule::Fixed { rank, oversample } => format!("fixed {rank} {oversample}"),
        RankRule::Adaptive { tolerance } => format!("adaptive {}", format_float(tolerance)),
        RankRule::Direct => "direct".into(),
    }
}

fn parse_rank_rule(text: &str) -> std::result::Result<RankRule, ModelIoError> {
    let parts: Vec<&str> = text.split_whitespace().collect();
    let malformed = || ModelIoError::Malformed(format!("unreadable rank rule `{text}`"));
    match parts.as_slice() {
        ["fixed", rank, oversample] => Ok(RankRule::Fixed {
            rank: rank.parse().map_err(|_| malformed())?,
            oversample: oversample.parse().map_err(|_| malformed())?,
        }),
        ["adaptive", tolerance] => Ok(RankRule::Adaptive {
            tolerance: tolerance.parse().map_err(|_| malformed())?,
        }),
        ["direct"] => Ok(RankRule::Direct),
        _ => Err(malformed()),
    }
}

fn metadata_text(meta: &ModelMetadata) -> String {
    let mut out = String::new();
    out.push_str(&format!("seed = {}\n", meta.seed));
    out.push_str(&format!("levels = {}\n", meta.levels));
    out.push_str(&format!("rho = {}\n", format_float(meta.rho)));
    out.push_str(&format!("beta = {}\n", format_float(meta.beta)));
    out.push_str(&format!("rank_rule = {}\n", rank_rule_text(&meta.rank_rule)));
    out.push_str(&format!("pairs_total = {}\n", meta.pairs_total));
    out.push_str(&format!("dim = {}\n", meta.dim));
    out.push_str(&format!("intervals = {}\n", meta.intervals));
    out.push_str(&format!("steps = {}\n", meta.steps));
    out.push_str(&format!("horizon = {}\n", format_float(meta.horizon)));
    out.push_str(&format!(
        "covariance_length = {}\n",
        format_float(meta.covariance_length)
    ));
    out.push_str(&format!(
        "covariance_time = {}\n",
        format_float(meta.covariance_time)
    ));
    out.push_str(&format!("mode_budget = {}\n", meta.mode_budget));
    out.push_str(&format!("operator = {}\n", meta.operator_label));
    out
}

fn parse_metadata(text: &str) -> std::result::Result<ModelMetadata, ModelIoError> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != METADATA_KEYS.len() {
        return Err(ModelIoError::Malformed(format!(
            "expected {} metadata lines, found {}",
            METADATA_KEYS.len(),
            lines.len()
        )));
    }
    let mut values: Vec<&str> = Vec::with_capacity(lines.len());
    for (line, expected) in lines.iter().zip(METADATA_KEYS.iter()) {
        let (key, value) = line.split_once(" = ").ok_or_else(|| {
            ModelIoError::Malformed(format!("metadata line without a key: `{line}`"))
        })?;
        if key != *expected {
            return Err(ModelIoError::Malformed(format!(
                "expected metadata key `{expected}`, found `{key}`"
            )));
        }
        values.push(value);
    }
    fn num<T: std::str::FromStr>(
        value: &str,
        key: &str,
    ) -> std::result::Result<T, ModelIoError> {
        value
            .parse()
            .map_err(|_| ModelIoError::Malformed(format!("unreadable value for `{key}`: `{value}`")))
    }
    Ok(ModelMetadata {
        format_version: MODEL_FORMAT_VERSION,
        seed: num(values[0], "seed")?,
        levels: num(values[1], "levels")?,
        rho: num(values[2], "rho")?,
        beta: num(values[3], "beta")?,
        rank_rule: parse_rank_rule(values[4])?,
        pairs_total: num(values[5], "pairs_total")?,
        dim: num(values[6], "dim")?,
        intervals: num(values[7], "intervals")?,
        steps: num(values[8], "steps")?,
        horizon: num(values[9], "horizon")?,
        covariance_length: num(values[10], "covariance_length")?,
        covariance_time: num(values[11], "covariance_time")?,
        mode_budget: num(values[12], "mode_budget")?,
        operator_label: values[13].to_string(),
    })
}

/// Serialize a model to its binary byte stream.
///
/// Layout: an 8-byte magic, the format version, the total byte length, a
/// length-prefixed metadata text, the block records in leaf order, and a
/// trailing SHA-256 checksum over everything before it. The stream is a
/// pure function of the model, so identical models produce identical
/// bytes.
pub fn serialize_model_bytes(model: &GreensApproximant) -> Result<Vec<u8>> {
    let meta = metadata_text(&model.metadata);
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(&MODEL_MAGIC);
    body.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    body.extend_from_slice(&0u64.to_le_bytes());
    body.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    body.extend_from_slice(meta.as_bytes());
    body.extend_from_slice(&(model.blocks.len() as u64).to_le_bytes());
    for (id, block) in &model.blocks {
        body.extend_from_slice(&id.level.to_le_bytes());
        for &v in id.target.iter().chain(id.source.iter()) {
            body.extend_from_slice(&v.to_le_bytes());
        }
        body.push(block.pair.admissible() as u8);
        body.extend_from_slice(&(block.rank() as u32).to_le_bytes());
        body.extend_from_slice(&(block.pairs_used as u64).to_le_bytes());
        for col in block.left.columns().iter().chain(block.right.columns()) {
            for &v in col {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let total = body.len() as u64 + 32;
    body[12..20].copy_from_slice(&total.to_le_bytes());
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    Ok(body)
}

/// Write a model file; see [`serialize_model_bytes`] for the layout.
pub fn serialize_model(model: &GreensApproximant, path: &Path) -> Result<()> {
    let bytes = serialize_model_bytes(model)?;
    fs::write(path, bytes)?;
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize) -> std::result::Result<&'a [u8], ModelIoError> {
        let end = self.pos.checked_add(len).ok_or_else(|| {
            ModelIoError::Malformed("a record length overflows the payload".into())
        })?;
        if end > self.buf.len() {
            return Err(ModelIoError::Malformed(
                "a record extends past the declared payload".into(),
            ));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn take_u32(&mut self) -> std::result::Result<u32, ModelIoError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take_u64(&mut self) -> std::result::Result<u64, ModelIoError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn take_f64(&mut self) -> std::result::Result<f64, ModelIoError> {
        Ok(f64::from_bits(self.take_u64()?))
    }
}

/// Rebuild a model from its binary byte stream.
///
/// Header fields are checked first (magic, version, declared length), then
/// the trailing checksum, then the payload itself: metadata must parse,
/// the grid and partition must rebuild, every block record must name a
/// leaf of that partition with a consistent admissibility flag, ids must
/// arrive in strictly increasing order, and the stored pair total must
/// match the block records.
pub fn deserialize_model_bytes(bytes: &[u8]) -> Result<GreensApproximant> {
    if bytes.len() < MODEL_MAGIC.len() {
        return Err(ModelIoError::Truncated("shorter than the 8-byte magic".into()).into());
    }
    if bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(ModelIoError::BadMagic.into());
    }
    if bytes.len() < 20 {
        return Err(ModelIoError::Truncated("shorter than the fixed header".into()).into());
    }
    let version = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if version != MODEL_FORMAT_VERSION {
        return Err(ModelIoError::VersionMismatch {
            found: version,
            supported: MODEL_FORMAT_VERSION,
        }
        .into());
    }
    let declared = u64::from_le_bytes([
        bytes[12], bytes[13], bytes[14], bytes[15], bytes[16], bytes[17], bytes[18], bytes[19],
    ]);
    let actual = bytes.len() as u64;
    if actual < declared {
        return Err(ModelIoError::Truncated(format!(
            "file holds {actual} of {declared} declared bytes"
        ))
        .into());
    }
    if actual > declared {
        return Err(
            ModelIoError::Malformed("bytes continue past the declared end of the model".into())
                .into(),
        );
    }
    if declared < 20 + 8 + 8 + 32 {
        return Err(ModelIoError::Malformed(
            "declared length is shorter than the smallest possible model".into(),
        )
        .into());
    }
    let (payload, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(payload);
    if digest[..] != *stored_digest {
        return Err(ModelIoError::ChecksumMismatch.into());
    }
    let mut reader = ByteReader {
        buf: payload,
        pos: 20,
    };
    let meta_len = reader.take_u64()? as usize;
    let meta_bytes = reader.take(meta_len)?;
    let meta_text = std::str::from_utf8(meta_bytes)
        .map_err(|_| ModelIoError::Malformed("metadata is not valid UTF-8".into()))?;
    let metadata = parse_metadata(meta_text)?;
    let grid = Grid::with_horizon(
        metadata.dim,
        metadata.intervals,
        metadata.steps,
        metadata.horizon,
    )
    .map_err(|e| ModelIoError::Malformed(format!("the stored grid is invalid: {e}")))?;
    let partition = build_partition(&PartitionConfig {
        dim: metadata.dim,
        levels: metadata.levels,
        rho: metadata.rho,
        beta: metadata.beta,
        leaf_cap: u64::MAX,
    })
    .map_err(|e| ModelIoError::Malformed(format!("the stored partition is invalid: {e}")))?;
    let leaf_index: BTreeMap<BlockId, &BoxPair> = partition
        .leaves
        .iter()
        .map(|pair| (pair.id(), pair))
        .collect();
    let block_count = reader.take_u64()?;
    let mut blocks: BTreeMap<BlockId, LowRankBlock> = BTreeMap::new();
    let mut pairs_sum = 0u64;
    let mut previous: Option<BlockId> = None;
    for _ in 0..block_count {
        let level = reader.take_u32()?;
        let index_len = metadata.dim + 1;
        let mut target = Vec::with_capacity(index_len);
        for _ in 0..index_len {
            target.push(reader.take_u64()?);
        }
        let mut source = Vec::with_capacity(index_len);
        for _ in 0..index_len {
            source.push(reader.take_u64()?);
        }
        let id = BlockId {
            level,
            target,
            source,
        };
        if let Some(prev) = &previous {
            if *prev >= id {
                return Err(ModelIoError::Malformed(
                    "block records are not in strictly increasing leaf order".into(),
                )
                .into());
            }
        }
        let pair = *leaf_index.get(&id).ok_or_else(|| {
            ModelIoError::Malformed(format!(
                "block record level {} target {:?} source {:?} names no partition leaf",
                id.level, id.target, id.source
            ))
        })?;
        if pair.causal_zero() {
            return Err(ModelIoError::Malformed(
                "causal-vanishing leaves are implicit zeros and must not be stored".into(),
            )
            .into());
        }
        let admissible_flag = reader.take(1)?[0];
        if admissible_flag > 1 || (admissible_flag == 1) != pair.admissible() {
            return Err(ModelIoError::Malformed(
                "a block record disagrees with the partition about admissibility".into(),
            )
            .into());
        }
        let rank = reader.take_u32()? as usize;
        let pairs_used = reader.take_u64()?;
        let target_grid = BlockGrid::from_box(&grid, &pair.target)
            .map_err(|e| ModelIoError::Malformed(format!("stored block grid: {e}")))?;
        let source_grid = BlockGrid::from_box(&grid, &pair.source)
            .map_err(|e| ModelIoError::Malformed(format!("stored block grid: {e}")))?;
        if rank > target_grid.len().min(source_grid.len()) {
            return Err(ModelIoError::Malformed(format!(
                "stored rank {rank} exceeds the block size {}x{}",
                target_grid.len(),
                source_grid.len()
            ))
            .into());
        }
        let mut left_cols = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut col = Vec::with_capacity(target_grid.len());
            for _ in 0..target_grid.len() {
                let v = reader.take_f64()?;
                if !v.is_finite() {
                    return Err(
                        ModelIoError::Malformed("a stored factor value is not finite".into())
                            .into(),
                    );
                }
                col.push(v);
            }
            left_cols.push(col);
        }
        let mut right_cols = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut col = Vec::with_capacity(source_grid.len());
            for _ in 0..source_grid.len() {
                let v = reader.take_f64()?;
                if !v.is_finite() {
                    return Err(
                        ModelIoError::Malformed("a stored factor value is not finite".into())
                            .into(),
                    );
                }
                col.push(v);
            }
            right_cols.push(col);
        }
        let left = Quasimatrix::with_columns(Arc::new(target_grid.point_weights()), left_cols)
            .map_err(|e| ModelIoError::Malformed(format!("stored factors: {e}")))?;
        let right = Quasimatrix::with_columns(Arc::new(source_grid.point_weights()), right_cols)
            .map_err(|e| ModelIoError::Malformed(format!("stored factors: {e}")))?;
        pairs_sum += pairs_used;
        blocks.insert(
            id.clone(),
            LowRankBlock {
                pair: pair.clone(),
                target: target_grid,
                source: source_grid,
                left,
                right,
                pairs_used: pairs_used as usize,
            },
        );
        previous = Some(id);
    }
    if reader.pos != payload.len() {
        return Err(ModelIoError::Malformed(
            "unread bytes remain inside the declared payload".into(),
        )
        .into());
    }
    if pairs_sum != metadata.pairs_total {
        return Err(ModelIoError::Malformed(format!(
            "metadata reports {} pairs but the block records sum to {pairs_sum}",
            metadata.pairs_total
        ))
        .into());
    }
    Ok(GreensApproximant {
        grid,
        partition,
        blocks,
        metadata,
    })
}

/// Read a model file; the inverse of [`serialize_model`].
pub fn deserialize_model(path: &Path) -> Result<GreensApproximant> {
    let bytes = fs::read(path)?;
    deserialize_model_bytes(&bytes)
}
