//! Randomized low-rank factorization of the discrete solution operator
//! restricted to one admissible block pair.
//!
//! The operator is never materialized: its range on the target block is
//! sketched with forward solves of random forcings supported in the source
//! block, and the companion factor is recovered with one adjoint solve per
//! retained basis column. All inner products and norms are discrete L2
//! quantities under the block quadrature, so ranks, singular values and
//! errors agree with the dense block analysis in [`crate::table`].

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::BoxPair;
use crate::grid::{weighted_dot, BlockGrid, Quasimatrix, ScalarField};
use crate::rng::{substream, StreamKind};
use crate::sampling::{restrict_extend, sample_gp, SpectralDecomposition};
use crate::solver::ForwardMap;
use crate::table::BlockMatrices;

/// Columns whose norm after orthogonalization falls below this fraction of
/// their original norm carry no new direction and are dropped.
const RANGE_DROP_TOL: f64 = 1e-12;

/// Probe columns added per round of the adaptive rank loop.
const ADAPTIVE_BATCH: usize = 8;

/// Hard cap on the adaptive sketch width.
const ADAPTIVE_CAP: usize = 32;

/// Separable approximation of the kernel on one block pair:
/// `G(x, t, y, s) ≈ Σ_m left_m(x, t) · right_m(y, s)`.
///
/// The left factor is orthonormal under the target-block quadrature; the
/// right factor carries the magnitudes. A rank of zero is a valid state and
/// represents an exactly zero block (causal-zero geometry, or an operator
/// whose response on the block is numerically null).
#[derive(Debug, Clone)]
pub struct LowRankBlock {
    /// The box pair this factorization covers.
    pub pair: BoxPair,
    /// Grid points of the target box.
    pub target: BlockGrid,
    /// Grid points of the source box.
    pub source: BlockGrid,
    /// Orthonormal fields on the target block, one column per rank.
    pub left: Quasimatrix,
    /// Companion fields on the source block, one column per rank.
    pub right: Quasimatrix,
    /// Forcing/solution pairs consumed to learn this block: forward solves
    /// plus adjoint solves actually issued.
    pub pairs_used: usize,
}

impl LowRankBlock {
    /// Number of separable terms.
    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    /// True when the block represents the zero kernel.
    pub fn is_zero(&self) -> bool {
        self.rank() == 0
    }

    /// Dense reconstruction, target block points by source block points.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.target.len(), self.source.len());
        for m in 0..self.rank() {
            let l = self.left.col(m);
            let r = self.right.col(m);
            for (q, &rv) in r.iter().enumerate() {
                if rv == 0.0 {
                    continue;
                }
                for (p, &lv) in l.iter().enumerate() {
                    out[(p, q)] += lv * rv;
                }
            }
        }
        out
    }

    /// Dense reconstruction scaled by the square roots of both block
    /// quadratures; its Frobenius norm is the discrete L2 norm of the
    /// reconstructed kernel on the block.
    pub fn weighted_dense(&self) -> DMatrix<f64> {
        let mut m = self.dense();
        scale_by_sqrt_weights(&mut m, &self.target.point_weights(), &self.source.point_weights());
        m
    }

    /// Kernel value at physical coordinates inside the block, by separable
    /// multilinear interpolation of both factors.
    pub fn evaluate(&self, x: &[f64], t: f64, y: &[f64], s: f64) -> f64 {
        let mut acc = 0.0;
        for m in 0..self.rank() {
            acc += self.target.interpolate(self.left.col(m), x, t)
                * self.source.interpolate(self.right.col(m), y, s);
        }
        acc
    }
}

/// Multiply rows by `sqrt(row_weights)` and columns by `sqrt(col_weights)`.
fn scale_by_sqrt_weights(m: &mut DMatrix<f64>, row_weights: &[f64], col_weights: &[f64]) {
    for (ri, w) in row_weights.iter().enumerate() {
        let f = w.sqrt();
        for cj in 0..m.ncols() {
            m[(ri, cj)] *= f;
        }
    }
    for (cj, w) in col_weights.iter().enumerate() {
        let f = w.sqrt();
        for ri in 0..m.nrows() {
            m[(ri, cj)] *= f;
        }
    }
}

/// Parameters of the probabilistic error bound: deviation multipliers `t`
/// and `s`, the spectral alignment factor of the probing process on the
/// block, and the covariance trace ratio.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub t: f64,
    pub s: f64,
    pub gamma: f64,
    pub trace_ratio: f64,
}

impl Default for BoundParams {
    fn default() -> Self {
        Self {
            t: std::f64::consts::E,
            s: 3.0,
            gamma: 1.0,
            trace_ratio: 1.0,
        }
    }
}

/// Outcome of a Monte Carlo check of the probabilistic error bound on one
/// block: the dense singular values, the predicted bound pieces, and the
/// observed per-trial errors. All stored error quantities are relative to
/// the block's weighted Frobenius norm.
#[derive(Debug, Clone)]
pub struct RsvdReport {
    /// Target rank entering the bound.
    pub k: usize,
    /// Oversampling entering the bound.
    pub p: usize,
    /// Singular values of the weighted dense block, descending.
    pub singular_values: Vec<f64>,
    /// Relative tail energy past rank `k`: `sqrt(Σ_{j>k} σ_j²) / ‖G‖_F`.
    pub tail_energy: f64,
    /// Multiplier applied to the tail energy by the bound.
    pub bound_factor: f64,
    /// Probability that a run exceeds the bound, per the theory; in (0,1).
    pub fail_prob: f64,
    /// Observed relative errors, one per trial.
    pub trial_errors: Vec<f64>,
    /// Retained rank of each trial's factorization.
    pub trial_ranks: Vec<usize>,
}

impl RsvdReport {
    /// The relative error level the theory promises not to exceed (up to
    /// the failure probability).
    pub fn error_bound(&self) -> f64 {
        self.bound_factor * self.tail_energy
    }

    /// Relative best-approximation error of any rank-`rank` factorization:
    /// `sqrt(Σ_{j≥rank} σ_j²) / ‖G‖_F` (indices zero-based).
    pub fn relative_tail(&self, rank: usize) -> f64 {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        if total <= 0.0 {
            return 0.0;
        }
        let tail: f64 = self.singular_values[rank.min(self.singular_values.len())..]
            .iter()
            .map(|s| s * s)
            .sum();
        (tail / total).sqrt()
    }

    /// Number of trials whose error exceeded [`RsvdReport::error_bound`].
    pub fn exceedances(&self) -> usize {
        let b = self.error_bound();
        self.trial_errors.iter().filter(|&&e| e > b).count()
    }

    /// Fraction of trials exceeding the bound.
    pub fn exceedance_fraction(&self) -> f64 {
        self.exceedances() as f64 / self.trial_errors.len().max(1) as f64
    }
}

/// Weighted modified Gram-Schmidt with one reorthogonalization pass.
/// Columns whose residual norm drops below [`RANGE_DROP_TOL`] relative to
/// their original norm are discarded. Returns the retained orthonormal
/// columns together with each input column's residual norm before
/// normalization (retained or not), in input order.
fn orthonormalize_weighted(
    columns: Vec<Vec<f64>>,
    weights: &[f64],
    kept: &mut Vec<Vec<f64>>,
) -> Vec<f64> {
    let mut residuals = Vec::with_capacity(columns.len());
    for mut y in columns {
        let norm0 = weighted_dot(&y, &y, weights).max(0.0).sqrt();
        if !(norm0 > 0.0) {
            residuals.push(0.0);
            continue;
        }
        for _pass in 0..2 {
            for q in kept.iter() {
                let c = weighted_dot(q, &y, weights);
                for (yv, &qv) in y.iter_mut().zip(q) {
                    *yv -= c * qv;
                }
            }
        }
        let norm = weighted_dot(&y, &y, weights).max(0.0).sqrt();
        residuals.push(norm);
        if norm <= RANGE_DROP_TOL * norm0 {
            continue;
        }
        let inv = 1.0 / norm;
        y.iter_mut().for_each(|v| *v *= inv);
        kept.push(y);
    }
    residuals
}

/// Sketch the range of the forward operator on the target block.
///
/// Runs one forward solve per column of `omega` (full-grid forcings, already
/// restricted to the source box), restricts each solution to the target
/// block, and orthonormalizes under the block quadrature. The returned
/// quasimatrix may have fewer columns than `omega` when probes carry no new
/// direction; zero columns means the operator is numerically null on the
/// block and the block should be treated as zero.
pub fn randomized_range<F>(
    apply_forward: F,
    omega: &Quasimatrix,
    target: &BlockGrid,
) -> Result<Quasimatrix>
where
    F: Fn(&ScalarField) -> Result<ScalarField> + Sync,
{
    let grid = target.grid().clone();
    if omega.rows() != grid.points() {
        return Err(Error::DimensionMismatch(format!(
            "probe columns have {} rows, grid has {} points",
            omega.rows(),
            grid.points()
        )));
    }
    let raw: Vec<Vec<f64>> = omega
        .columns()
        .par_iter()
        .map(|col| {
            let f = ScalarField::from_values(&grid, col.clone())?;
            let u = apply_forward(&f)?;
            Ok(target.extract(&u))
        })
        .collect::<Result<_>>()?;
    let weights = Arc::new(target.point_weights());
    let mut kept = Vec::new();
    orthonormalize_weighted(raw, &weights, &mut kept);
    Quasimatrix::with_columns(weights, kept)
}

/// Recover the right factor: one adjoint solve per basis column.
///
/// Each basis column is scattered to the full grid with its block weights
/// divided by the global quadrature weights, so that the adjoint solve
/// realizes the block inner product `⟨q_i, G(·, y)⟩` exactly; the output on
/// the source block is then the right factor of the orthogonal projection
/// of the operator onto the sketched range.
pub fn project_adjoint<A>(
    apply_adjoint: A,
    basis: &Quasimatrix,
    target: &BlockGrid,
    source: &BlockGrid,
) -> Result<Quasimatrix>
where
    A: Fn(&ScalarField) -> Result<ScalarField> + Sync,
{
    if basis.rows() != target.len() {
        return Err(Error::DimensionMismatch(format!(
            "basis has {} rows, target block has {} points",
            basis.rows(),
            target.len()
        )));
    }
    let grid = target.grid();
    let block_w = target.point_weights();
    let space_ids = target.space_ids();
    let time_ids = target.time_ids();
    let ns = space_ids.len();
    let ratio: Vec<f64> = (0..target.len())
        .map(|p| {
            let node = space_ids[p % ns];
            let level = time_ids[p / ns];
            block_w[p] / grid.point_weight(node, level)
        })
        .collect();
    let cols: Vec<Vec<f64>> = basis
        .columns()
        .par_iter()
        .map(|q| {
            let data: Vec<f64> = q.iter().zip(&ratio).map(|(&v, &r)| v * r).collect();
            let field = target.scatter(&data)?;
            let a = apply_adjoint(&field)?;
            Ok(source.extract(&a))
        })
        .collect::<Result<_>>()?;
    Quasimatrix::with_columns(Arc::new(source.point_weights()), cols)
}

fn zero_block(
    pair: &BoxPair,
    target: BlockGrid,
    source: BlockGrid,
    pairs_used: usize,
) -> Result<LowRankBlock> {
    let left = Quasimatrix::with_columns(Arc::new(target.point_weights()), Vec::new())?;
    let right = Quasimatrix::with_columns(Arc::new(source.point_weights()), Vec::new())?;
    Ok(LowRankBlock {
        pair: pair.clone(),
        target,
        source,
        left,
        right,
        pairs_used,
    })
}

/// Learn one admissible block with a fixed sketch width of `k + p` random
/// forcings drawn from the decomposed covariance.
///
/// Counts every solve actually issued in `pairs_used`: `k + p` forward
/// sketches plus one adjoint per retained basis column, i.e. `2(k+p)` on a
/// generic block, and `0` when causal geometry makes the block exactly zero
/// without any solve.
pub fn learn_block<M: ForwardMap>(
    model: &M,
    dec: &SpectralDecomposition,
    pair: &BoxPair,
    k: usize,
    p: usize,
    seed: u64,
) -> Result<LowRankBlock> {
    if !pair.admissible() {
        return Err(Error::InvalidArgument(
            "low-rank learning applies only to admissible pairs".into(),
        ));
    }
    if k == 0 || p == 0 {
        return Err(Error::InvalidArgument(format!(
            "rank and oversampling must be at least 1, got k={k}, p={p}"
        )));
    }
    let grid = model.grid();
    if dec.grid().points() != grid.points() {
        return Err(Error::DimensionMismatch(
            "covariance decomposition lives on a different grid".into(),
        ));
    }
    let target = BlockGrid::from_box(grid, &pair.target)?;
    let source = BlockGrid::from_box(grid, &pair.source)?;
    if pair.causal_zero() {
        return zero_block(pair, target, source, 0);
    }
    let omega = restrict_extend(grid, &sample_gp(dec, k + p, seed)?, &pair.source)?;
    let basis = randomized_range(|f| model.forward(f), &omega, &target)?;
    let forwards = k + p;
    if basis.ncols() == 0 {
        return zero_block(pair, target, source, forwards);
    }
    let right = project_adjoint(|g| model.adjoint(g), &basis, &target, &source)?;
    let pairs_used = forwards + basis.ncols();
    Ok(LowRankBlock {
        pair: pair.clone(),
        target,
        source,
        left: basis,
        right,
        pairs_used,
    })
}

/// Learn one admissible block with an adaptively chosen rank.
///
/// Probes are issued in batches of [`ADAPTIVE_BATCH`] up to
/// [`ADAPTIVE_CAP`]. After each batch the largest new-direction residual,
/// normalized by the probe's source-block norm, estimates the operator
/// norm of what the sketch still misses; the loop stops once that estimate
/// falls to `tolerance` (an absolute operator-norm level). The oversampled
/// factorization is then recompressed through a small SVD, discarding
/// separable terms whose singular value is below half the tolerance.
pub fn learn_block_adaptive<M: ForwardMap>(
    model: &M,
    dec: &SpectralDecomposition,
    pair: &BoxPair,
    tolerance: f64,
    seed: u64,
) -> Result<LowRankBlock> {
    if !pair.admissible() {
        return Err(Error::InvalidArgument(
            "low-rank learning applies only to admissible pairs".into(),
        ));
    }
    if !(tolerance > 0.0) || !tolerance.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive and finite, got {tolerance}"
        )));
    }
    let grid = model.grid();
    if dec.grid().points() != grid.points() {
        return Err(Error::DimensionMismatch(
            "covariance decomposition lives on a different grid".into(),
        ));
    }
    let target = BlockGrid::from_box(grid, &pair.target)?;
    let source = BlockGrid::from_box(grid, &pair.source)?;
    if pair.causal_zero() {
        return zero_block(pair, target, source, 0);
    }
    let omega = restrict_extend(grid, &sample_gp(dec, ADAPTIVE_CAP, seed)?, &pair.source)?;
    let tw = target.point_weights();
    let sw = source.point_weights();
    let mut kept: Vec<Vec<f64>> = Vec::new();
    let mut forwards = 0usize;
    let mut drawn = 0usize;
    while drawn < ADAPTIVE_CAP {
        let batch_end = (drawn + ADAPTIVE_BATCH).min(ADAPTIVE_CAP);
        let batch: Vec<(Vec<f64>, f64)> = (drawn..batch_end)
            .into_par_iter()
            .map(|j| {
                let f = ScalarField::from_values(grid, omega.col(j).to_vec())?;
                let probe_norm = {
                    let restricted = source.extract(&f);
                    weighted_dot(&restricted, &restricted, &sw).max(0.0).sqrt()
                };
                let u = model.forward(&f)?;
                Ok((target.extract(&u), probe_norm))
            })
            .collect::<Result<_>>()?;
        forwards += batch.len();
        drawn = batch_end;
        let mut worst = 0.0f64;
        for (col, probe_norm) in batch {
            let resid = orthonormalize_weighted(vec![col], &tw, &mut kept)[0];
            if probe_norm > 0.0 {
                worst = worst.max(resid / probe_norm);
            }
        }
        if worst <= tolerance {
            break;
        }
    }
    let m = kept.len();
    if m == 0 {
        return zero_block(pair, target, source, forwards);
    }
    let basis = Quasimatrix::with_columns(Arc::new(tw.clone()), kept)?;
    let right = project_adjoint(|g| model.adjoint(g), &basis, &target, &source)?;
    let pairs_used = forwards + m;

    // Recompress: the singular values of the weighted right factor are the
    // singular values of the learned block operator, because the left factor
    // is orthonormal under the block quadrature.
    let mut rw = DMatrix::zeros(source.len(), m);
    let sqrt_sw: Vec<f64> = sw.iter().map(|w| w.sqrt()).collect();
    for i in 0..m {
        for (q, &v) in right.col(i).iter().enumerate() {
            rw[(q, i)] = v * sqrt_sw[q];
        }
    }
    let svd = rw.svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let vt = svd.v_t.as_ref().expect("right singular vectors requested");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let sigma_max = sv[order[0]];
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&j| sv[j] > (0.5 * tolerance).max(1e-14 * sigma_max))
        .collect();
    if keep.is_empty() {
        return zero_block(pair, target, source, pairs_used);
    }
    let mut left_cols = Vec::with_capacity(keep.len());
    let mut right_cols = Vec::with_capacity(keep.len());
    for &j in &keep {
        let mut lc = vec![0.0; target.len()];
        for mm in 0..m {
            let c = vt[(j, mm)];
            if c == 0.0 {
                continue;
            }
            for (out, &v) in lc.iter_mut().zip(basis.col(mm)) {
                *out += c * v;
            }
        }
        left_cols.push(lc);
        let rc: Vec<f64> = (0..source.len())
            .map(|q| sv[j] * u[(q, j)] / sqrt_sw[q])
            .collect();
        right_cols.push(rc);
    }
    Ok(LowRankBlock {
        pair: pair.clone(),
        target,
        source: source.clone(),
        left: Quasimatrix::with_columns(basis.weights().clone(), left_cols)?,
        right: Quasimatrix::with_columns(Arc::new(sw), right_cols)?,
        pairs_used,
    })
}

/// Oversampling used when evaluating the probabilistic bound for a given
/// rank: the bound's derivation needs at least 4, while the construction
/// pairs rank with equal oversampling. Returns the oversampling together
/// with a flag that is true when the rank sits outside the regime the
/// bound covers (k < 4 forced the floor).
pub fn theorem_oversampling(k: usize) -> (usize, bool) {
    (k.max(4), k < 4)
}

/// Error-bound multiplier and failure probability for a randomized rank-`k`
/// factorization with oversampling `p`, deviation parameters `t` and `s`,
/// spectral alignment `gamma_k` and covariance trace ratio `trace_ratio`.
///
/// The expected-error multiplier on the singular-value tail is
/// `sqrt(1 + t²s²·(3/γ)·(k(k+p)/(p+1))·tr)`, exceeded with probability at
/// most `t^{-p} + (s·e^{-(s²-1)/2})^{k+p}`.
pub fn bound_factor(
    k: usize,
    p: usize,
    t: f64,
    s: f64,
    gamma_k: f64,
    trace_ratio: f64,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    if p < 4 {
        return Err(Error::InvalidArgument(format!(
            "the bound requires oversampling at least 4, got {p}"
        )));
    }
    if !(t >= 1.0) || !(s >= 1.0) || !t.is_finite() || !s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "deviation parameters need t, s >= 1, got t={t}, s={s}"
        )));
    }
    if !(gamma_k > 0.0 && gamma_k <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "spectral alignment must lie in (0, 1], got {gamma_k}"
        )));
    }
    if !(trace_ratio >= 1.0) || !trace_ratio.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "trace ratio must be at least 1, got {trace_ratio}"
        )));
    }
    let kf = k as f64;
    let pf = p as f64;
    let factor =
        (1.0 + t * t * s * s * (3.0 / gamma_k) * (kf * (kf + pf) / (pf + 1.0)) * trace_ratio)
            .sqrt();
    let fail = t.powi(-(p as i32)) + (s * (-(s * s - 1.0) / 2.0).exp()).powi((k + p) as i32);
    Ok((factor, fail))
}

/// Monte Carlo check of the probabilistic error bound on one block.
///
/// Runs `trials` independent [`learn_block`] calls against the dense
/// reference sub-matrix and records each relative error (weighted Frobenius,
/// relative to the reference block norm) next to the bound predicted by
/// [`bound_factor`] at the given parameters.
#[allow(clippy::too_many_arguments)]
pub fn empirical_bound_trial<M: ForwardMap>(
    model: &M,
    dec: &SpectralDecomposition,
    reference: &BlockMatrices,
    pair: &BoxPair,
    k: usize,
    p: usize,
    trials: usize,
    params: &BoundParams,
    seed: u64,
) -> Result<RsvdReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    if pair.causal_zero() {
        return Err(Error::DegenerateInput(
            "the bound trial needs a block with nonzero kernel mass".into(),
        ));
    }
    let gw = reference.weighted();
    let norm = gw.norm();
    if !(norm > 0.0) {
        return Err(Error::DegenerateInput(
            "dense reference block is numerically zero".into(),
        ));
    }
    let mut singular_values: Vec<f64> = gw
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let tail_sq: f64 = singular_values[k.min(singular_values.len())..]
        .iter()
        .map(|s| s * s)
        .sum();
    let tail_energy = tail_sq.sqrt() / norm;
    let (factor, fail_prob) =
        bound_factor(k, p, params.t, params.s, params.gamma, params.trace_ratio)?;
    if !(fail_prob > 0.0 && fail_prob < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "failure probability {fail_prob} is not in (0, 1); raise t or s"
        )));
    }
    let outcomes: Vec<(f64, usize)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let trial_seed: u64 = substream(seed, StreamKind::Trial, i as u64).gen();
            let block = learn_block(model, dec, pair, k, p, trial_seed)?;
            let lw = block.weighted_dense();
            if lw.nrows() != gw.nrows() || lw.ncols() != gw.ncols() {
                return Err(Error::DimensionMismatch(
                    "learned block and dense reference disagree in shape".into(),
                ));
            }
            Ok(((&gw - lw).norm() / norm, block.rank()))
        })
        .collect::<Result<_>>()?;
    let (trial_errors, trial_ranks) = outcomes.into_iter().unzip();
    Ok(RsvdReport {
        k,
        p,
        singular_values,
        tail_energy,
        bound_factor: factor,
        fail_prob,
        trial_errors,
        trial_ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting;
    use crate::geometry::{Interval, SpaceTimeBox};
    use crate::grid::{Grid, SharedGrid};
    use crate::oracle;
    use crate::sampling::{spectral_decompose, CovarianceKernel};
    use crate::solver::{Coefficient, Propagator};
    use crate::table::operator_block_direct;
    use approx::assert_relative_eq;

    fn heat_setup(intervals: usize, steps: usize) -> (SharedGrid, Propagator) {
        let grid = Grid::unit(1, intervals, steps).unwrap();
        let prop = Propagator::new(&Coefficient::heat(1).unwrap(), &grid).unwrap();
        (grid, prop)
    }

    fn forcing_modes(grid: &SharedGrid, count: usize) -> SpectralDecomposition {
        let kernel = CovarianceKernel::default_forcing();
        spectral_decompose(&kernel, grid, count.min(grid.points())).unwrap()
    }

    /// Decomposition of a shorter-range probe kernel, whose sample space has
    /// a numerical rank comfortably above 20 even on half-domain boxes.
    fn rich_modes(grid: &SharedGrid, count: usize) -> SpectralDecomposition {
        let kernel = CovarianceKernel::squared_exponential(0.1, 1.0).unwrap();
        spectral_decompose(&kernel, grid, count.min(grid.points())).unwrap()
    }

    fn boxed(xlo: f64, xhi: f64, tlo: f64, thi: f64) -> SpaceTimeBox {
        SpaceTimeBox::from_bounds(
            vec![Interval::new(xlo, xhi).unwrap()],
            Interval::new(tlo, thi).unwrap(),
        )
        .unwrap()
    }

    /// Space cell 2 and time cell 4 of the level-2 partition against the
    /// origin cell: separated in both axes, kernel mass clearly nonzero.
    fn level2_pair() -> BoxPair {
        BoxPair::new(
            boxed(0.5, 0.75, 0.25, 0.3125),
            boxed(0.0, 0.25, 0.0, 0.0625),
            true,
        )
    }

    /// Level-1 pair separated by two time cells: a big slowly decaying block.
    fn level1_pair() -> BoxPair {
        BoxPair::new(
            boxed(0.5, 1.0, 0.5, 0.75),
            boxed(0.0, 0.5, 0.0, 0.25),
            true,
        )
    }

    fn random_probe_columns(grid: &SharedGrid, count: usize, seed: u64) -> Quasimatrix {
        let mut cols = Vec::with_capacity(count);
        for j in 0..count {
            let mut rng = substream(seed, StreamKind::Sample, j as u64);
            cols.push((0..grid.points()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        Quasimatrix::with_columns(Arc::new(grid.point_weights()), cols).unwrap()
    }

    /// A rank-three integral operator and its exact adjoint, for probing the
    /// sketching machinery without any PDE in the loop.
    fn rank_three_operator(
        grid: &SharedGrid,
    ) -> (Vec<ScalarField>, Vec<ScalarField>) {
        let us = vec![
            ScalarField::from_fn(grid, |x, t| (std::f64::consts::PI * x[0]).sin() * (-t).exp()),
            ScalarField::from_fn(grid, |x, t| (2.0 * std::f64::consts::PI * x[0]).sin() * t),
            ScalarField::from_fn(grid, |x, t| x[0] * (1.0 - x[0]) * (1.0 + t * t)),
        ];
        let ws = vec![
            ScalarField::from_fn(grid, |x, t| 1.0 + x[0] + t),
            ScalarField::from_fn(grid, |x, t| (3.0 * x[0] - t).cos()),
            ScalarField::from_fn(grid, |x, t| x[0] * x[0] - 0.3 * t),
        ];
        (us, ws)
    }

    fn apply_rank_three<'a>(
        grid: &'a SharedGrid,
        from: &'a [ScalarField],
        to: &'a [ScalarField],
    ) -> impl Fn(&ScalarField) -> Result<ScalarField> + Sync + 'a {
        move |f: &ScalarField| {
            let mut out = ScalarField::zeros(grid);
            for (u, w) in to.iter().zip(from) {
                let c = w.inner(f)?;
                for (o, &uv) in out.values_mut().iter_mut().zip(u.values()) {
                    *o += c * uv;
                }
            }
            Ok(out)
        }
    }

    #[test]
    fn synthetic_rank_three_operator_is_recovered_exactly() {
        let grid = Grid::unit(1, 16, 32).unwrap();
        let (us, ws) = rank_three_operator(&grid);
        let forward = apply_rank_three(&grid, &ws, &us);
        let adjoint = apply_rank_three(&grid, &us, &ws);
        let whole = boxed(0.0, 1.0, 0.0, 1.0);
        let bg = BlockGrid::from_box(&grid, &whole).unwrap();
        // Six probes exceed the exact rank: the sketch must stop at three.
        let omega = random_probe_columns(&grid, 6, 11);
        let basis = randomized_range(&forward, &omega, &bg).unwrap();
        assert_eq!(basis.ncols(), 3, "probes beyond the exact rank must be dropped");
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(basis.inner(i, j), expect, epsilon = 1e-10);
            }
        }
        let right = project_adjoint(&adjoint, &basis, &bg, &bg).unwrap();
        // True kernel matrix at block points.
        let n = bg.len();
        let mut truth = DMatrix::zeros(n, n);
        for (u, w) in us.iter().zip(&ws) {
            let uc = bg.extract(u);
            let wc = bg.extract(w);
            for q in 0..n {
                for p in 0..n {
                    truth[(p, q)] += uc[p] * wc[q];
                }
            }
        }
        let learned = LowRankBlock {
            pair: BoxPair::new(whole.clone(), whole, true),
            target: bg.clone(),
            source: bg.clone(),
            left: basis,
            right,
            pairs_used: 9,
        };
        let mut diff = learned.dense() - &truth;
        let wts = bg.point_weights();
        scale_by_sqrt_weights(&mut diff, &wts, &wts);
        scale_by_sqrt_weights(&mut truth, &wts, &wts);
        let rel = diff.norm() / truth.norm();
        assert!(
            rel <= 1e-10,
            "rank-3 operator must be captured to round-off, got {rel:.3e}"
        );
    }

    #[test]
    fn single_probe_yields_one_unit_column() {
        let grid = Grid::unit(1, 16, 32).unwrap();
        let (us, ws) = rank_three_operator(&grid);
        let forward = apply_rank_three(&grid, &ws, &us);
        let bg = BlockGrid::from_box(&grid, &boxed(0.0, 1.0, 0.0, 1.0)).unwrap();
        let omega = random_probe_columns(&grid, 1, 3);
        let basis = randomized_range(&forward, &omega, &bg).unwrap();
        assert_eq!(basis.ncols(), 1);
        assert_relative_eq!(basis.norm(0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_operator_yields_an_empty_range() {
        let grid = Grid::unit(1, 8, 16).unwrap();
        let bg = BlockGrid::from_box(&grid, &boxed(0.0, 1.0, 0.0, 1.0)).unwrap();
        let omega = random_probe_columns(&grid, 4, 5);
        let zero = |_: &ScalarField| Ok(ScalarField::zeros(&grid));
        let basis = randomized_range(zero, &omega, &bg).unwrap();
        assert_eq!(basis.ncols(), 0, "a null operator has an empty range");
        // An empty basis produces an empty right factor.
        let right = project_adjoint(zero, &basis, &bg, &bg).unwrap();
        assert_eq!(right.ncols(), 0);
    }

    #[test]
    fn causal_zero_geometry_short_circuits_without_solves() {
        let (grid, prop) = heat_setup(32, 64);
        let dec = forcing_modes(&grid, 60);
        // Target entirely before the source in time.
        let pair = BoxPair::new(
            boxed(0.5, 0.75, 0.0, 0.0625),
            boxed(0.0, 0.25, 0.25, 0.3125),
            true,
        );
        assert!(pair.causal_zero());
        let block = learn_block(&prop, &dec, &pair, 3, 3, 1).unwrap();
        assert!(block.is_zero());
        assert_eq!(block.rank(), 0);
        assert_eq!(block.pairs_used, 0);
        assert_eq!(block.evaluate(&[0.6], 0.03, &[0.1], 0.27), 0.0);
        let adaptive = learn_block_adaptive(&prop, &dec, &pair, 1e-6, 1).unwrap();
        assert!(adaptive.is_zero());
        assert_eq!(adaptive.pairs_used, 0);
    }

    #[test]
    fn sketch_is_orthonormal_on_a_heat_block() {
        let (grid, prop) = heat_setup(32, 64);
        let dec = rich_modes(&grid, 300);
        let pair = level1_pair();
        let target = BlockGrid::from_box(&grid, &pair.target).unwrap();
        // The block operator supports about 19 directions above the drop
        // tolerance here, so a 12-probe sketch survives in full.
        let omega =
            restrict_extend(&grid, &sample_gp(&dec, 12, 42).unwrap(), &pair.source).unwrap();
        let basis = randomized_range(|f| prop.solve_forward(f), &omega, &target).unwrap();
        assert_eq!(basis.ncols(), 12, "a modest probe set must survive in full");
        for i in 0..basis.ncols() {
            for j in 0..=i {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (basis.inner(i, j) - expect).abs() <= 1e-10,
                    "Gram entry ({i},{j}) = {}",
                    basis.inner(i, j)
                );
            }
        }
        // Nothing is dropped, so the full budget of forward plus adjoint
        // solves is spent: 2(k+p) = 24 for k = p = 6.
        let block = learn_block(&prop, &dec, &pair, 6, 6, 42).unwrap();
        assert_eq!(block.rank(), 12);
        assert_eq!(block.pairs_used, 24);
    }

    #[test]
    fn block_duality_holds_through_the_scatter_plumbing() {
        let (grid, prop) = heat_setup(24, 48);
        let dec = forcing_modes(&grid, 100);
        let pair = level2_pair();
        let target = BlockGrid::from_box(&grid, &pair.target).unwrap();
        let omega =
            restrict_extend(&grid, &sample_gp(&dec, 3, 9).unwrap(), &pair.source).unwrap();
        let basis = randomized_range(|f| prop.solve_forward(f), &omega, &target).unwrap();
        assert!(basis.ncols() >= 1);
        let w_field = ScalarField::from_values(&grid, omega.col(0).to_vec()).unwrap();
        let q_field = target.scatter(basis.col(0)).unwrap();
        let forward = prop.solve_forward(&w_field).unwrap();
        let back = prop.solve_adjoint(&q_field).unwrap();
        let a = forward.inner(&q_field).unwrap();
        let b = w_field.inner(&back).unwrap();
        let scale = forward.norm_l2() * q_field.norm_l2();
        assert!(
            (a - b).abs() <= 1e-10 * scale.max(1e-30),
            "duality defect {:.3e} at scale {:.3e}",
            (a - b).abs(),
            scale
        );
    }

    /// The right factor must make `left · rightᵀ` exactly the orthogonal
    /// projection (in the block inner product) of the probed operator onto
    /// the sketched range. The reference matrix is assembled from unit-mass
    /// impulse responses of the same forward march the sketch used.
    #[test]
    fn reconstruction_equals_the_projected_operator() {
        let (grid, prop) = heat_setup(32, 64);
        let dec = forcing_modes(&grid, 150);
        let pair = level2_pair();
        let target = BlockGrid::from_box(&grid, &pair.target).unwrap();
        let source = BlockGrid::from_box(&grid, &pair.source).unwrap();
        let omega =
            restrict_extend(&grid, &sample_gp(&dec, 12, 23).unwrap(), &pair.source).unwrap();
        let basis = randomized_range(|f| prop.solve_forward(f), &omega, &target).unwrap();
        let right = project_adjoint(|g| prop.solve_adjoint(g), &basis, &target, &source).unwrap();
        let m = basis.ncols();
        assert!(m >= 8);

        // Exact dense matrix of the forward operator the sketch probed.
        let gmat = operator_block_direct(&prop, &pair).unwrap().weighted();
        let tw = target.point_weights();
        let sw = source.point_weights();
        let mut lw = DMatrix::zeros(target.len(), m);
        let mut rw = DMatrix::zeros(source.len(), m);
        for i in 0..m {
            for (p, &v) in basis.col(i).iter().enumerate() {
                lw[(p, i)] = v * tw[p].sqrt();
            }
            for (q, &v) in right.col(i).iter().enumerate() {
                rw[(q, i)] = v * sw[q].sqrt();
            }
        }
        let projected = &lw * (lw.transpose() * &gmat);
        let reconstructed = &lw * rw.transpose();
        let rel = (&reconstructed - &projected).norm() / gmat.norm();
        assert!(
            rel <= 1e-12,
            "adjoint projection must reproduce P_Y F to round-off, got {rel:.3e}"
        );
    }

    #[test]
    fn level2_block_is_learned_to_regression_accuracy() {
        // Mildly stiff grid: the step-response transients of the plain march
        // are fully damped across the block separation, so the sketch error
        // is governed by the singular-value tail alone.
        let (grid, prop) = heat_setup(16, 192);
        let dec = forcing_modes(&grid, 200);
        let pair = level2_pair();
        let block = learn_block(&prop, &dec, &pair, 10, 10, 77).unwrap();
        let reference = operator_block_direct(&prop, &pair).unwrap();
        let gw = reference.weighted();
        let rel = (&gw - block.weighted_dense()).norm() / gw.norm();
        println!(
            "level-2 learned block: rank {}, pairs {}, relative error {rel:.3e}",
            block.rank(),
            block.pairs_used
        );
        // The drop tolerance trims the 20 probes down to the small numerical
        // rank of this well-separated block (measured: 3).
        assert!(
            (2..=8).contains(&block.rank()),
            "expected heavy compression of 20 probes, got rank {}",
            block.rank()
        );
        assert_eq!(block.pairs_used, 20 + block.rank());
        assert!(
            rel <= 1e-4,
            "k=10, p=10 on a level-2 block must reach 1e-4, got {rel:.3e}"
        );
        // Spot-check the interpolating evaluator against the dense entry at
        // a block grid point.
        let x = grid.axis_coord(0, block.target.space_ids()[3]);
        let t = grid.time_coord(block.target.time_ids()[2]);
        let y = grid.axis_coord(0, block.source.space_ids()[2]);
        let s = grid.time_coord(block.source.time_ids()[1]);
        let sc = block.target.space_count();
        let dense = block.dense();
        let row = 2 * sc + 3;
        let col = block.source.space_count() + 2;
        assert_relative_eq!(
            block.evaluate(&[x], t, &[y], s),
            dense[(row, col)],
            max_relative = 1e-9,
            epsilon = 1e-12
        );
    }

    #[test]
    fn reconstruction_stays_in_the_sketched_range() {
        let (grid, prop) = heat_setup(24, 48);
        let dec = forcing_modes(&grid, 120);
        let pair = level1_pair();
        let target = BlockGrid::from_box(&grid, &pair.target).unwrap();
        let seed = 31;
        let count = 8;
        let omega =
            restrict_extend(&grid, &sample_gp(&dec, count, seed).unwrap(), &pair.source).unwrap();
        // Raw sketch responses, before orthonormalization.
        let raw: Vec<Vec<f64>> = omega
            .columns()
            .iter()
            .map(|col| {
                let f = ScalarField::from_values(&grid, col.clone()).unwrap();
                target.extract(&prop.solve_forward(&f).unwrap())
            })
            .collect();
        let block = learn_block(&prop, &dec, &pair, 4, 4, seed).unwrap();
        let tw = target.point_weights();
        let mut yw = DMatrix::zeros(target.len(), raw.len());
        for (i, col) in raw.iter().enumerate() {
            for (p, &v) in col.iter().enumerate() {
                yw[(p, i)] = v * tw[p].sqrt();
            }
        }
        let q = yw.qr().q();
        for i in 0..block.rank() {
            let lw =
                nalgebra::DVector::from_iterator(target.len(), block.left.col(i).iter().zip(&tw).map(|(&v, &w)| v * w.sqrt()));
            let resid = (&lw - &q * (q.transpose() * &lw)).norm() / lw.norm();
            assert!(
                resid <= 1e-10,
                "left column {i} escapes the sketch span by {resid:.3e}"
            );
        }
    }

    #[test]
    fn median_error_is_monotone_in_the_rank() {
        // Step-response transients must be damped across the separation,
        // otherwise every rank floors at the same unlearnable residue.
        let (grid, prop) = heat_setup(16, 96);
        let dec = forcing_modes(&grid, 150);
        let pair = level1_pair();
        let reference = operator_block_direct(&prop, &pair).unwrap();
        let gw = reference.weighted();
        let norm = gw.norm();
        let ks = [2usize, 4, 8, 16];
        let mut medians = Vec::new();
        for &k in &ks {
            let mut errs: Vec<f64> = (0..10)
                .map(|s| {
                    let block = learn_block(&prop, &dec, &pair, k, 4, 1000 + s).unwrap();
                    (&gw - block.weighted_dense()).norm() / norm
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            medians.push(0.5 * (errs[4] + errs[5]));
        }
        println!("median errors over k={ks:?}: {medians:?}");
        let violations = medians
            .windows(2)
            .filter(|w| w[1] > 1.10 * w[0])
            .count();
        assert!(
            violations <= 1,
            "error medians must be non-increasing in k (10% slack, one waiver): {medians:?}"
        );
        assert!(
            medians[3] < 0.9 * medians[0],
            "error must genuinely fall from k=2 to k=16: {medians:?}"
        );
    }

    #[test]
    fn bound_factor_matches_the_frozen_example() {
        let (factor, fail) = bound_factor(10, 10, std::f64::consts::E, 3.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(factor, 60.23582664994579, max_relative = 1e-9);
        assert_relative_eq!(fail, 4.5399929762484875e-5, max_relative = 1e-9);
    }

    #[test]
    fn smaller_alignment_inflates_the_factor() {
        let (f1, _) = bound_factor(10, 10, std::f64::consts::E, 3.0, 1.0, 1.0).unwrap();
        let (f2, _) = bound_factor(10, 10, std::f64::consts::E, 3.0, 0.5, 1.0).unwrap();
        let (f3, _) = bound_factor(10, 10, std::f64::consts::E, 3.0, 0.01, 1.0).unwrap();
        assert!(f1 < f2 && f2 < f3);
    }

    #[test]
    fn failure_probability_is_twice_exponential_at_s_three() {
        for k in [4usize, 6, 10, 14] {
            let (_, fail) = bound_factor(k, k, std::f64::consts::E, 3.0, 1.0, 1.0).unwrap();
            assert!(
                fail <= 2.0 * (-(k as f64)).exp(),
                "k={k}: fail={fail:.3e} exceeds 2e^-k"
            );
        }
    }

    #[test]
    fn bound_factor_rejects_out_of_domain_parameters() {
        let e = std::f64::consts::E;
        assert!(bound_factor(0, 10, e, 3.0, 1.0, 1.0).is_err());
        assert!(bound_factor(10, 3, e, 3.0, 1.0, 1.0).is_err());
        assert!(bound_factor(10, 10, 0.9, 3.0, 1.0, 1.0).is_err());
        assert!(bound_factor(10, 10, e, 0.5, 1.0, 1.0).is_err());
        assert!(bound_factor(10, 10, e, 3.0, 0.0, 1.0).is_err());
        assert!(bound_factor(10, 10, e, 3.0, 1.5, 1.0).is_err());
        assert!(bound_factor(10, 10, e, 3.0, 1.0, 0.5).is_err());
        assert_eq!(theorem_oversampling(2), (4, true));
        assert_eq!(theorem_oversampling(10), (10, false));
    }

    #[test]
    fn observed_errors_respect_the_probabilistic_bound() {
        let (grid, prop) = heat_setup(32, 64);
        let dec = forcing_modes(&grid, 150);
        let pair = level2_pair();
        let reference = operator_block_direct(&prop, &pair).unwrap();
        let report = empirical_bound_trial(
            &prop,
            &dec,
            &reference,
            &pair,
            6,
            6,
            12,
            &BoundParams::default(),
            2024,
        )
        .unwrap();
        assert!(report.fail_prob > 0.0 && report.fail_prob < 1.0);
        assert_eq!(report.trial_errors.len(), 12);
        let bound = report.error_bound();
        println!(
            "bound {bound:.3e}, worst error {:.3e}",
            report.trial_errors.iter().cloned().fold(0.0, f64::max)
        );
        assert_eq!(
            report.exceedances(),
            0,
            "every trial must sit under the bound: errors {:?}",
            report.trial_errors
        );
        // Every trial is floored by the best possible approximation at its
        // retained rank.
        for (err, &rank) in report.trial_errors.iter().zip(&report.trial_ranks) {
            let floor = report.relative_tail(rank);
            assert!(
                *err >= floor * (1.0 - 1e-9),
                "error {err:.6e} beats the rank-{rank} floor {floor:.6e}"
            );
        }
    }

    #[test]
    fn single_trial_is_deterministic() {
        let (grid, prop) = heat_setup(24, 48);
        let dec = forcing_modes(&grid, 100);
        let pair = level2_pair();
        let reference = operator_block_direct(&prop, &pair).unwrap();
        let params = BoundParams::default();
        let a = empirical_bound_trial(&prop, &dec, &reference, &pair, 5, 5, 1, &params, 7)
            .unwrap();
        let b = empirical_bound_trial(&prop, &dec, &reference, &pair, 5, 5, 1, &params, 7)
            .unwrap();
        assert_eq!(a.trial_errors, b.trial_errors);
        assert_eq!(a.trial_ranks, b.trial_ranks);
    }

    #[test]
    fn learning_rejects_bad_requests() {
        let (grid, prop) = heat_setup(8, 16);
        let dec = forcing_modes(&grid, 30);
        let inadmissible = BoxPair::new(
            boxed(0.0, 0.5, 0.25, 0.5),
            boxed(0.0, 0.5, 0.0, 0.25),
            false,
        );
        assert!(matches!(
            learn_block(&prop, &dec, &inadmissible, 2, 2, 0),
            Err(Error::InvalidArgument(_))
        ));
        let pair = level1_pair();
        assert!(learn_block(&prop, &dec, &pair, 0, 2, 0).is_err());
        assert!(learn_block_adaptive(&prop, &dec, &pair, 0.0, 0).is_err());
        let causal = BoxPair::new(
            boxed(0.5, 1.0, 0.0, 0.25),
            boxed(0.0, 0.5, 0.5, 0.75),
            true,
        );
        let reference = BlockMatrices {
            target: BlockGrid::from_box(&grid, &causal.target).unwrap(),
            source: BlockGrid::from_box(&grid, &causal.source).unwrap(),
            matrix: DMatrix::zeros(1, 1),
        };
        assert!(matches!(
            empirical_bound_trial(
                &prop,
                &dec,
                &reference,
                &causal,
                4,
                4,
                1,
                &BoundParams::default(),
                0
            ),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn adaptive_learning_meets_its_tolerance() {
        let (grid, prop) = heat_setup(16, 96);
        let dec = forcing_modes(&grid, 150);
        let pair = level1_pair();
        // Reference matrix of the very operator the sketch probes.
        let gmat = operator_block_direct(&prop, &pair).unwrap().weighted();
        let sigma1 = gmat
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .cloned()
            .fold(0.0, f64::max);

        let tight_tol = 1e-5 * sigma1;
        let tight = learn_block_adaptive(&prop, &dec, &pair, tight_tol, 55).unwrap();
        let err_tight = (&gmat - tight.weighted_dense()).norm();
        let loose_tol = 0.2 * sigma1;
        let loose = learn_block_adaptive(&prop, &dec, &pair, loose_tol, 55).unwrap();
        let err_loose = (&gmat - loose.weighted_dense()).norm();
        println!(
            "adaptive: tight rank {} err {:.3e} (tol {:.3e}), loose rank {} err {:.3e} (tol {:.3e})",
            tight.rank(),
            err_tight,
            tight_tol,
            loose.rank(),
            err_loose,
            loose_tol
        );
        assert!(tight.rank() <= ADAPTIVE_CAP);
        assert!(loose.rank() < tight.rank(), "loose tolerance must stop earlier");
        assert!(
            err_tight <= 50.0 * tight_tol,
            "tight run error {err_tight:.3e} vs tolerance {tight_tol:.3e}"
        );
        assert!(
            err_loose <= 5.0 * loose_tol,
            "loose run error {err_loose:.3e} vs tolerance {loose_tol:.3e}"
        );
        assert!(err_tight < err_loose);
        // The recompressed left factor stays orthonormal under quadrature.
        for i in 0..tight.rank() {
            for j in 0..=i {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (tight.left.inner(i, j) - expect).abs() <= 1e-9,
                    "recompressed Gram entry ({i},{j}) = {}",
                    tight.left.inner(i, j)
                );
            }
        }
    }

    #[test]
    fn adaptive_learning_is_deterministic_in_the_seed() {
        let (grid, prop) = heat_setup(16, 32);
        let dec = forcing_modes(&grid, 80);
        let pair = level1_pair();
        let a = learn_block_adaptive(&prop, &dec, &pair, 1e-4, 9).unwrap();
        let b = learn_block_adaptive(&prop, &dec, &pair, 1e-4, 9).unwrap();
        assert_eq!(a.rank(), b.rank());
        assert_eq!(a.pairs_used, b.pairs_used);
        for i in 0..a.rank() {
            assert_eq!(a.left.col(i), b.left.col(i));
            assert_eq!(a.right.col(i), b.right.col(i));
        }
        let c = learn_block_adaptive(&prop, &dec, &pair, 1e-4, 10).unwrap();
        assert!(
            a.rank() != c.rank() || a.dense() != c.dense(),
            "different seeds must draw different probes"
        );
    }

    /// Singular values of the analytic heat kernel sampled on one admissible
    /// block of the given partition level, under trapezoid quadrature. The
    /// source sits on the origin cell; the target cell is offset by `dx` space
    /// cells and `dt` time cells, so any `dx >= 2` keeps the pair admissible
    /// and causally active.
    fn analytic_block_singular_values(
        level: i32,
        dx: usize,
        dt: usize,
        m_x: usize,
        m_t: usize,
    ) -> Vec<f64> {
        let wx = 0.5f64.powi(level);
        let wt = 0.25f64.powi(level);
        let lin = |lo: f64, hi: f64, m: usize, i: usize| lo + (hi - lo) * i as f64 / (m - 1) as f64;
        let trapz = |lo: f64, hi: f64, m: usize| {
            let h = (hi - lo) / (m - 1) as f64;
            (0..m)
                .map(|i| if i == 0 || i == m - 1 { 0.5 * h } else { h })
                .collect::<Vec<f64>>()
        };
        let (x0, t0) = (dx as f64 * wx, dt as f64 * wt);
        let xs: Vec<f64> = (0..m_x).map(|i| lin(x0, x0 + wx, m_x, i)).collect();
        let ts: Vec<f64> = (0..m_t).map(|i| lin(t0, t0 + wt, m_t, i)).collect();
        let ys: Vec<f64> = (0..m_x).map(|i| lin(0.0, wx, m_x, i)).collect();
        let ss: Vec<f64> = (0..m_t).map(|i| lin(0.0, wt, m_t, i)).collect();
        let wxs = trapz(x0, x0 + wx, m_x);
        let wts = trapz(t0, t0 + wt, m_t);
        let wys = trapz(0.0, wx, m_x);
        let wss = trapz(0.0, wt, m_t);
        let rows = m_x * m_t;
        let mut k = DMatrix::zeros(rows, rows);
        for (ti, &t) in ts.iter().enumerate() {
            for (xi, &x) in xs.iter().enumerate() {
                let rw = (wxs[xi] * wts[ti]).sqrt();
                for (si, &s) in ss.iter().enumerate() {
                    for (yi, &y) in ys.iter().enumerate() {
                        let cw = (wys[yi] * wss[si]).sqrt();
                        k[(ti * m_x + xi, si * m_x + yi)] =
                            rw * cw * oracle::heat_kernel(x, t, y, s);
                    }
                }
            }
        }
        let mut sv: Vec<f64> = k.svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    #[test]
    fn analytic_block_rank_decays_polylogarithmically() {
        let tols: Vec<f64> = (1..=9).map(|i| 10f64.powi(-(i as i32) - 1)).collect();
        let log_inv: Vec<f64> = tols.iter().map(|t| (1.0 / t).ln()).collect();
        // A single block produces an integer rank staircase that no smooth
        // curve fits well; averaging over a family of admissible offsets
        // exposes the underlying polylogarithmic trend.
        let offsets: Vec<(usize, usize)> =
            (2..=3).flat_map(|dx| (2..=5).map(move |dt| (dx, dt))).collect();
        for level in 2..=4 {
            let mut mean_ranks = vec![0.0f64; tols.len()];
            let mut max_rank_1e6 = 0usize;
            for &(dx, dt) in &offsets {
                let sv = analytic_block_singular_values(level, dx, dt, 24, 12);
                for (ri, &tol) in tols.iter().enumerate() {
                    mean_ranks[ri] += sv.iter().filter(|&&s| s > tol * sv[0]).count() as f64;
                }
                max_rank_1e6 =
                    max_rank_1e6.max(sv.iter().filter(|&&s| s > 1e-6 * sv[0]).count());
            }
            for r in &mut mean_ranks {
                *r /= offsets.len() as f64;
            }
            println!("level {level}: mean ranks {mean_ranks:?} max rank@1e-6 {max_rank_1e6}");
            assert!(
                max_rank_1e6 <= 25,
                "level {level}: rank {max_rank_1e6} at tolerance 1e-6 exceeds 25"
            );
            let fit = fitting::fit_polynomial(&log_inv, &mean_ranks, 4).unwrap();
            assert!(
                fit.r_squared >= 0.98,
                "level {level}: rank growth poorly described by a quartic in log(1/tol): R^2 = {}",
                fit.r_squared
            );
        }
    }
}
