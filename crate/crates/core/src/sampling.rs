//! Gaussian-process forcing generation and covariance quality measures.
//!
//! A [`CovarianceKernel`] on the space-time cylinder is diagonalized by
//! [`spectral_decompose`] into quadrature-orthonormal eigenfields, which
//! [`sample_gp`] combines into independent random forcings. Fields are
//! restricted to a sub-box (and extended by zero) with [`restrict_extend`].
//! [`gamma_k`] measures how well a kernel's range covers a set of singular
//! directions, and [`worst_block_gamma`] takes the minimum of that measure
//! over the admissible leaves of a partition.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{PartitionTree, SpaceTimeBox};
use crate::grid::{weighted_dot, BlockGrid, Quasimatrix, SharedGrid};
use crate::rng::{substream, StreamKind};
use crate::table::KernelTable;

/// Largest point count for which a dense kernel matrix is materialized.
const DENSE_POINT_CAP: usize = 2500;

/// Covariance kernel on the space-time cylinder.
///
/// The squared-exponential kind is isotropic in the metric-scaled
/// coordinates `(x, t/√β)`; a user matrix gives the kernel values directly
/// on the points of one grid (level-major flat indexing).
#[derive(Clone)]
pub struct CovarianceKernel {
    kind: CovarianceKind,
    length_scale: f64,
    time_scale: f64,
}

#[derive(Clone)]
enum CovarianceKind {
    SquaredExponential,
    Matrix(Arc<DMatrix<f64>>),
}

impl CovarianceKernel {
    /// Squared-exponential kernel with the given length scale, isotropic in
    /// `(x, t/√time_scale)`.
    pub fn squared_exponential(length_scale: f64, time_scale: f64) -> Result<Self> {
        if !(length_scale > 0.0) || !(time_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "covariance scales must be positive, got ℓ={length_scale}, β={time_scale}"
            )));
        }
        Ok(Self {
            kind: CovarianceKind::SquaredExponential,
            length_scale,
            time_scale,
        })
    }

    /// Squared-exponential kernel with the default length scale 0.2 and unit
    /// time scale.
    pub fn default_forcing() -> Self {
        Self::squared_exponential(0.2, 1.0).expect("default scales are valid")
    }

    /// Kernel given by an explicit symmetric matrix over grid points.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "kernel matrix must be square, got {}×{}",
                values.nrows(),
                values.ncols()
            )));
        }
        let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let max_asym = (0..values.nrows())
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| (values[(i, j)] - values[(j, i)]).abs())
            .fold(0.0_f64, f64::max);
        if max_asym > 1e-12 * (1.0 + scale) {
            return Err(Error::InvalidArgument(
                "kernel matrix must be symmetric".into(),
            ));
        }
        Ok(Self {
            kind: CovarianceKind::Matrix(Arc::new(values)),
            length_scale: 0.0,
            time_scale: 1.0,
        })
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }

    fn is_separable(&self) -> bool {
        matches!(self.kind, CovarianceKind::SquaredExponential)
    }

    /// Kernel value between two grid points.
    pub fn point_value(
        &self,
        grid: &SharedGrid,
        node_i: usize,
        level_i: usize,
        node_j: usize,
        level_j: usize,
    ) -> f64 {
        match &self.kind {
            CovarianceKind::SquaredExponential => {
                let dim = grid.dim();
                let mut xi = [0.0; 2];
                let mut xj = [0.0; 2];
                grid.node_coord(node_i, &mut xi[..dim]);
                grid.node_coord(node_j, &mut xj[..dim]);
                let mut dist_sq: f64 = xi[..dim]
                    .iter()
                    .zip(&xj[..dim])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let dt = grid.time_coord(level_i) - grid.time_coord(level_j);
                dist_sq += dt * dt / self.time_scale;
                (-dist_sq / (2.0 * self.length_scale * self.length_scale)).exp()
            }
            CovarianceKind::Matrix(m) => {
                let ns = grid.space_nodes();
                m[(level_i * ns + node_i, level_j * ns + node_j)]
            }
        }
    }
}

/// Eigenvalues of a kernel restricted to each grid axis, under that axis's
/// trapezoid quadrature. Only separable kernels have per-axis spectra.
#[derive(Debug, Clone)]
pub struct AxisSpectra {
    /// One descending spectrum per spatial axis.
    pub spatial: Vec<Vec<f64>>,
    /// Spectrum of the time factor (already metric-scaled).
    pub time: Vec<f64>,
}

/// Per-axis eigenvalues of a separable kernel on the grid.
pub fn axis_spectra(kernel: &CovarianceKernel, grid: &SharedGrid) -> Result<AxisSpectra> {
    if !kernel.is_separable() {
        return Err(Error::InvalidArgument(
            "per-axis spectra require a separable kernel".into(),
        ));
    }
    let factors = axis_factors(kernel, grid)?;
    let mut spatial: Vec<Vec<f64>> = factors[..grid.dim()]
        .iter()
        .map(|f| f.eigenvalues.clone())
        .collect();
    let time = factors[grid.dim()].eigenvalues.clone();
    spatial.iter_mut().for_each(|s| s.shrink_to_fit());
    Ok(AxisSpectra { spatial, time })
}

/// Truncated eigendecomposition of a covariance kernel on a grid.
///
/// Eigenfields are orthonormal under the grid's space-time trapezoid
/// quadrature; eigenvalues are descending and non-negative.
pub struct SpectralDecomposition {
    grid: SharedGrid,
    eigenvalues: Vec<f64>,
    fields: Quasimatrix,
    trace: f64,
}

impl SpectralDecomposition {
    pub fn grid(&self) -> &SharedGrid {
        &self.grid
    }

    /// Descending non-negative eigenvalues.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Eigenfields as quasimatrix columns (level-major point order).
    pub fn fields(&self) -> &Quasimatrix {
        &self.fields
    }

    /// Sum of the retained eigenvalues.
    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// One axis factor of a separable kernel: eigenvalues plus eigenvector
/// values at the axis nodes (orthonormal under the axis weights).
struct AxisFactor {
    eigenvalues: Vec<f64>,
    vectors: Vec<Vec<f64>>,
}

/// Weighted symmetric eigensolve of a correlation matrix on one axis:
/// diagonalize `D^{1/2} K D^{1/2}` and return `ψ = D^{−1/2} q`, orthonormal
/// under the weights.
fn weighted_eig(matrix: DMatrix<f64>, weights: &[f64]) -> Result<AxisFactor> {
    let n = weights.len();
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut sym = matrix;
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] *= sqrt_w[i] * sqrt_w[j];
        }
    }
    // Symmetrize against round-off before the eigensolve.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (sym[(i, j)] + sym[(j, i)]);
            sym[(i, j)] = avg;
            sym[(j, i)] = avg;
        }
    }
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let lambda_min = eig.eigenvalues[order[n - 1]];
    if lambda_min < -1e-10 * lambda_max.max(1e-300) {
        return Err(Error::DegenerateInput(format!(
            "covariance is not positive semidefinite: eigenvalue {lambda_min:.3e} \
             against maximum {lambda_max:.3e}"
        )));
    }
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            (0..n)
                .map(|r| eig.eigenvectors[(r, i)] / sqrt_w[r])
                .collect()
        })
        .collect();
    Ok(AxisFactor {
        eigenvalues,
        vectors,
    })
}

/// Axis factors of a separable kernel: one per spatial axis, then time.
fn axis_factors(kernel: &CovarianceKernel, grid: &SharedGrid) -> Result<Vec<AxisFactor>> {
    let ell_sq = 2.0 * kernel.length_scale * kernel.length_scale;
    let mut factors = Vec::with_capacity(grid.dim() + 1);
    for axis in 0..grid.dim() {
        let coords = grid.axis_coords(axis);
        let n = coords.len();
        let weights: Vec<f64> = (0..n).map(|i| grid.axis_weight(axis, i)).collect();
        let m = DMatrix::from_fn(n, n, |i, j| {
            let d = coords[i] - coords[j];
            (-d * d / ell_sq).exp()
        });
        factors.push(weighted_eig(m, &weights)?);
    }
    let times = grid.time_coords();
    let n = times.len();
    let weights: Vec<f64> = (0..n).map(|i| grid.time_weight(i)).collect();
    let beta = kernel.time_scale;
    let m = DMatrix::from_fn(n, n, |i, j| {
        let d = times[i] - times[j];
        (-d * d / (beta * ell_sq)).exp()
    });
    factors.push(weighted_eig(m, &weights)?);
    Ok(factors)
}

/// Truncated eigendecomposition of `kernel` on the grid's points.
///
/// Separable kernels decompose one axis at a time and combine tensor-product
/// eigenpairs; matrix kernels get a dense weighted eigensolve, refused above
/// a desk-scale point count.
pub fn spectral_decompose(
    kernel: &CovarianceKernel,
    grid: &SharedGrid,
    k_max: usize,
) -> Result<SpectralDecomposition> {
    let points = grid.points();
    if k_max == 0 || k_max > points {
        return Err(Error::InvalidArgument(format!(
            "k_max must be in 1..={points}, got {k_max}"
        )));
    }
    let weights = Arc::new(grid.point_weights());
    let (eigenvalues, columns) = if kernel.is_separable() {
        let factors = axis_factors(kernel, grid)?;
        let dim = grid.dim();
        // Rank tensor-product eigenvalues without materializing fields.
        let mut combos: Vec<(f64, [usize; 3])> = Vec::with_capacity(points);
        let axis_lens: Vec<usize> = factors.iter().map(|f| f.eigenvalues.len()).collect();
        let mut idx = [0usize; 3];
        loop {
            let lambda: f64 = factors
                .iter()
                .enumerate()
                .map(|(a, f)| f.eigenvalues[idx[a]])
                .product();
            combos.push((lambda, idx));
            let mut a = dim + 1;
            loop {
                if a == 0 {
                    break;
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] < axis_lens[a] {
                    break;
                }
                idx[a] = 0;
            }
            if idx.iter().all(|&i| i == 0) {
                break;
            }
        }
        combos.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
        combos.truncate(k_max);
        let ns = grid.space_nodes();
        let columns: Vec<Vec<f64>> = combos
            .par_iter()
            .map(|&(_, modes)| {
                let mut col = Vec::with_capacity(points);
                let mut axis_idx = vec![0usize; dim];
                for level in 0..grid.time_levels() {
                    let tv = factors[dim].vectors[modes[dim]][level];
                    for node in 0..ns {
                        grid.unflatten(node, &mut axis_idx);
                        let sv: f64 = (0..dim)
                            .map(|a| factors[a].vectors[modes[a]][axis_idx[a]])
                            .product();
                        col.push(sv * tv);
                    }
                }
                col
            })
            .collect();
        (combos.into_iter().map(|(l, _)| l).collect(), columns)
    } else {
        if points > DENSE_POINT_CAP {
            return Err(Error::ResourceCap(format!(
                "dense kernel decomposition needs {points} points, cap is {DENSE_POINT_CAP}"
            )));
        }
        let ns = grid.space_nodes();
        let m = DMatrix::from_fn(points, points, |i, j| {
            kernel.point_value(grid, i % ns, i / ns, j % ns, j / ns)
        });
        let factor = weighted_eig(m, &weights)?;
        let eigenvalues: Vec<f64> = factor.eigenvalues[..k_max].to_vec();
        let columns = factor.vectors[..k_max].to_vec();
        (eigenvalues, columns)
    };
    let trace = eigenvalues.iter().sum();
    Ok(SpectralDecomposition {
        grid: grid.clone(),
        fields: Quasimatrix::with_columns(weights, columns)?,
        eigenvalues,
        trace,
    })
}

/// Draw `count` independent Gaussian-process forcings from a decomposition.
///
/// Column `j` is `Σ_m √λ_m c_{jm} ψ_m` with standard normal coefficients
/// from its own seeded substream, so results are identical for a given seed
/// regardless of thread count or evaluation order.
pub fn sample_gp(dec: &SpectralDecomposition, count: usize, seed: u64) -> Result<Quasimatrix> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "sample count must be positive".into(),
        ));
    }
    let scales: Vec<f64> = dec.eigenvalues.iter().map(|l| l.sqrt()).collect();
    let rows = dec.fields.rows();
    let columns: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|j| {
            let mut rng = substream(seed, StreamKind::Sample, j as u64);
            let mut col = vec![0.0_f64; rows];
            for (m, &scale) in scales.iter().enumerate() {
                let c: f64 = rng.sample(StandardNormal);
                let amp = scale * c;
                if amp == 0.0 {
                    continue;
                }
                for (o, v) in col.iter_mut().zip(dec.fields.col(m)) {
                    *o += amp * v;
                }
            }
            col
        })
        .collect();
    Quasimatrix::with_columns(dec.fields.weights().clone(), columns)
}

/// Zero each column outside `support`, keeping values inside unchanged.
pub fn restrict_extend(
    grid: &SharedGrid,
    omega: &Quasimatrix,
    support: &SpaceTimeBox,
) -> Result<Quasimatrix> {
    if omega.rows() != grid.points() {
        return Err(Error::DimensionMismatch(format!(
            "quasimatrix has {} rows, grid has {} points",
            omega.rows(),
            grid.points()
        )));
    }
    let block = BlockGrid::from_box(grid, support)?;
    let ns = grid.space_nodes();
    let mut keep = vec![false; grid.points()];
    let space_ids = block.space_ids();
    for &level in block.time_ids() {
        for &node in &space_ids {
            keep[level * ns + node] = true;
        }
    }
    let columns: Vec<Vec<f64>> = omega
        .columns()
        .iter()
        .map(|c| {
            c.iter()
                .zip(&keep)
                .map(|(&v, &k)| if k { v } else { 0.0 })
                .collect()
        })
        .collect();
    Quasimatrix::with_columns(omega.weights().clone(), columns)
}

/// Quality of a covariance kernel against a set of singular directions:
/// `k / (λ₁ · Tr(C⁻¹))` clamped to `(0, 1]`, with the degeneracy flag raised
/// when the directions fall outside the kernel's numerical range.
#[derive(Debug, Clone, Copy)]
pub struct GammaEstimate {
    pub value: f64,
    pub degenerate: bool,
}

/// Check quadrature-orthonormality of columns within `tol`.
fn check_orthonormal(columns: &[Vec<f64>], weights: &[f64], tol: f64) -> Result<()> {
    for (i, a) in columns.iter().enumerate() {
        for (j, b) in columns.iter().enumerate().take(i + 1) {
            let target = if i == j { 1.0 } else { 0.0 };
            let got = weighted_dot(a, b, weights);
            if (got - target).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "directions must be orthonormal under quadrature: ⟨v{i},v{j}⟩ = {got:.3e}"
                )));
            }
        }
    }
    Ok(())
}

/// Shared tail of the quality factor: eigenvalues of `C` against `λ₁`.
fn gamma_from_cross(cross: &DMatrix<f64>, lambda_1: f64) -> GammaEstimate {
    let k = cross.nrows();
    if lambda_1 <= 0.0 {
        return GammaEstimate {
            value: 0.0,
            degenerate: true,
        };
    }
    let mut sym = cross.clone();
    for i in 0..k {
        for j in 0..i {
            let avg = 0.5 * (sym[(i, j)] + sym[(j, i)]);
            sym[(i, j)] = avg;
            sym[(j, i)] = avg;
        }
    }
    let eig = SymmetricEigen::new(sym);
    let mu_min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if mu_min <= 0.0 {
        return GammaEstimate {
            value: 0.0,
            degenerate: true,
        };
    }
    let inv_trace: f64 = eig.eigenvalues.iter().map(|&m| 1.0 / m).sum();
    let value = (k as f64 / (lambda_1 * inv_trace)).min(1.0);
    GammaEstimate {
        value,
        degenerate: value < 1e-12,
    }
}

/// Quality factor of `kernel` for directions `v` on the whole grid.
///
/// `v`'s columns must be orthonormal under the grid quadrature. Separable
/// kernels go through the truncated spectral decomposition (directions
/// beyond the retained spectrum register as degenerate, which is the
/// conservative reading); matrix kernels use a dense solve.
pub fn gamma_k(
    kernel: &CovarianceKernel,
    v: &Quasimatrix,
    grid: &SharedGrid,
) -> Result<GammaEstimate> {
    let points = grid.points();
    if v.rows() != points {
        return Err(Error::DimensionMismatch(format!(
            "directions have {} rows, grid has {points} points",
            v.rows()
        )));
    }
    let k = v.ncols();
    if k == 0 {
        return Err(Error::InvalidArgument(
            "at least one direction is required".into(),
        ));
    }
    let weights = grid.point_weights();
    check_orthonormal(v.columns(), &weights, 1e-6)?;
    if kernel.is_separable() {
        let dec = spectral_decompose(kernel, grid, points.min(400))?;
        let lambda_1 = dec.eigenvalues[0];
        // C = Aᵀ Λ A with A_mi = ⟨ψ_m, v_i⟩: the kernel applied through its
        // retained modes. Modes below 1e−14·λ₁ sit outside the numerical
        // range of the operator (eigensolve noise) and are dropped, so
        // directions supported there register as degenerate.
        let modes = dec
            .eigenvalues
            .iter()
            .take_while(|&&l| l >= 1e-14 * lambda_1)
            .count();
        let mut a = DMatrix::zeros(modes, k);
        for m in 0..modes {
            for i in 0..k {
                a[(m, i)] = weighted_dot(dec.fields.col(m), v.col(i), &weights);
            }
        }
        let mut cross = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                cross[(i, j)] = (0..modes)
                    .map(|m| dec.eigenvalues[m] * a[(m, i)] * a[(m, j)])
                    .sum();
            }
        }
        Ok(gamma_from_cross(&cross, lambda_1))
    } else {
        if points > DENSE_POINT_CAP {
            return Err(Error::ResourceCap(format!(
                "dense quality factor needs {points} points, cap is {DENSE_POINT_CAP}"
            )));
        }
        let ns = grid.space_nodes();
        let km = DMatrix::from_fn(points, points, |i, j| {
            kernel.point_value(grid, i % ns, i / ns, j % ns, j / ns)
        });
        let factor = weighted_eig(km.clone(), &weights)?;
        let lambda_1 = factor.eigenvalues[0];
        let cross = weighted_cross(&km, v.columns(), &weights);
        Ok(gamma_from_cross(&cross, lambda_1))
    }
}

/// `C_ij = (W v_i)ᵀ K (W v_j)`: the kernel operator seen through weighted
/// directions.
fn weighted_cross(kernel_matrix: &DMatrix<f64>, columns: &[Vec<f64>], weights: &[f64]) -> DMatrix<f64> {
    let k = columns.len();
    let n = weights.len();
    let mut u = DMatrix::zeros(n, k);
    for (i, c) in columns.iter().enumerate() {
        for (r, (&v, &w)) in c.iter().zip(weights).enumerate() {
            u[(r, i)] = v * w;
        }
    }
    let ku = kernel_matrix * &u;
    u.transpose() * ku
}

/// Quality factor of `kernel` restricted to one block of the grid, for
/// directions given as block-point columns (time-major order), orthonormal
/// under the block quadrature.
pub fn gamma_k_on_block(
    kernel: &CovarianceKernel,
    block: &BlockGrid,
    directions: &[Vec<f64>],
) -> Result<GammaEstimate> {
    let bp = block.len();
    if bp > DENSE_POINT_CAP {
        return Err(Error::ResourceCap(format!(
            "dense restricted quality factor needs {bp} points, cap is {DENSE_POINT_CAP}"
        )));
    }
    if directions.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one direction is required".into(),
        ));
    }
    if directions.iter().any(|d| d.len() != bp) {
        return Err(Error::DimensionMismatch(
            "direction length must match the block point count".into(),
        ));
    }
    let weights = block.point_weights();
    check_orthonormal(directions, &weights, 1e-6)?;
    let grid = block.grid();
    let space_ids = block.space_ids();
    let time_ids = block.time_ids();
    let sc = space_ids.len();
    let km = DMatrix::from_fn(bp, bp, |i, j| {
        kernel.point_value(
            grid,
            space_ids[i % sc],
            time_ids[i / sc],
            space_ids[j % sc],
            time_ids[j / sc],
        )
    });
    let factor = weighted_eig(km.clone(), &weights)?;
    let cross = weighted_cross(&km, directions, &weights);
    Ok(gamma_from_cross(&cross, factor.eigenvalues[0]))
}

/// Minimum block quality factor over the admissible leaves of a partition.
///
/// Each leaf's directions are the top right singular fields of its dense
/// ground-truth block (so the table must sample every grid point: stride 1).
/// Leaves that vanish identically by causality carry no singular directions
/// and are skipped. The rank is clamped to each block's size.
pub fn worst_block_gamma(
    tree: &PartitionTree,
    kernel: &CovarianceKernel,
    table: &KernelTable,
    rank: usize,
) -> Result<GammaEstimate> {
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be positive".into()));
    }
    let eligible: Vec<_> = tree
        .leaves
        .iter()
        .filter(|pair| pair.admissible() && !pair.causal_zero())
        .collect();
    if eligible.is_empty() {
        return Err(Error::DegenerateInput(
            "partition has no admissible non-vanishing leaves".into(),
        ));
    }
    let estimates: Vec<GammaEstimate> = eligible
        .par_iter()
        .map(|pair| -> Result<GammaEstimate> {
            let block = table.dense_block(pair)?;
            let weighted = block.weighted();
            let k = rank.min(weighted.nrows()).min(weighted.ncols());
            let svd = weighted.svd(false, true);
            let v_t = svd
                .v_t
                .ok_or_else(|| Error::NumericalBreakdown("block SVD failed".into()))?;
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_unstable_by(|&a, &b| {
                svd.singular_values[b].total_cmp(&svd.singular_values[a])
            });
            let sw = block.source.point_weights();
            let directions: Vec<Vec<f64>> = order[..k]
                .iter()
                .map(|&row| {
                    (0..v_t.ncols())
                        .map(|c| v_t[(row, c)] / sw[c].sqrt())
                        .collect()
                })
                .collect();
            gamma_k_on_block(kernel, &block.source, &directions)
        })
        .collect::<Result<_>>()?;
    Ok(estimates
        .into_iter()
        .reduce(|a, b| GammaEstimate {
            value: a.value.min(b.value),
            degenerate: a.degenerate || b.degenerate,
        })
        .expect("at least one eligible leaf"))
}
