//! Tensor-product space-time grids, scalar fields on them, and weighted
//! column collections.
//!
//! A [`Grid`] discretizes the cylinder `[0,1]^n x [0,T]` with equispaced
//! nodes (boundary included) and composite-trapezoid quadrature weights whose
//! total is exactly the cylinder volume. Fields are stored level-major:
//! `values[level * space_nodes + node]`, with the spatial flattening
//! row-major over axes.
//!
//! [`BlockGrid`] is the restriction of a grid to an axis-aligned box: a
//! tensor subset of node indices with its own trapezoid weights, used for
//! block-local factors. [`Quasimatrix`] is a list of same-length columns
//! sharing one quadrature weight vector; continuous inner products reduce to
//! weighted dot products against it.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::SpaceTimeBox;

/// Shared handle to an immutable grid.
pub type SharedGrid = Arc<Grid>;

/// Equispaced tensor grid on `[0,1]^n x [0,T]`.
#[derive(Debug)]
pub struct Grid {
    dim: usize,
    intervals: Vec<usize>,
    steps: usize,
    horizon: f64,
    axis_coords: Vec<Vec<f64>>,
    axis_weights: Vec<Vec<f64>>,
    time_coords: Vec<f64>,
    time_weights: Vec<f64>,
    space_weights: Vec<f64>,
    space_nodes: usize,
}

fn trapezoid_weights(coords: &[f64]) -> Vec<f64> {
    let n = coords.len();
    if n == 1 {
        return vec![1.0];
    }
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = coords[i + 1] - coords[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

impl Grid {
    /// Grid with `intervals` cells per spatial axis and `steps` time steps on
    /// `[0,1]^n x [0,1]`. Node counts are `intervals + 1` per axis.
    pub fn unit(dim: usize, intervals: usize, steps: usize) -> Result<SharedGrid> {
        Self::with_horizon(dim, intervals, steps, 1.0)
    }

    /// Grid with a custom final time.
    pub fn with_horizon(
        dim: usize,
        intervals: usize,
        steps: usize,
        horizon: f64,
    ) -> Result<SharedGrid> {
        if dim == 0 || dim > 2 {
            return Err(Error::DimensionMismatch(format!(
                "solver grids support spatial dimension 1 or 2, got {dim}"
            )));
        }
        if intervals < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 spatial intervals".into(),
            ));
        }
        if steps < 1 {
            return Err(Error::InvalidArgument("need at least 1 time step".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time horizon must be positive and finite, got {horizon}"
            )));
        }
        let nodes = intervals + 1;
        let axis: Vec<f64> = (0..nodes).map(|i| i as f64 / intervals as f64).collect();
        let axis_w = trapezoid_weights(&axis);
        let time_coords: Vec<f64> = (0..=steps)
            .map(|j| horizon * j as f64 / steps as f64)
            .collect();
        let time_weights = trapezoid_weights(&time_coords);
        let axis_coords = vec![axis; dim];
        let axis_weights = vec![axis_w; dim];
        let space_nodes = nodes.pow(dim as u32);
        let mut space_weights = vec![0.0; space_nodes];
        for flat in 0..space_nodes {
            let mut w = 1.0;
            let mut rem = flat;
            for a in (0..dim).rev() {
                let i = rem % nodes;
                rem /= nodes;
                w *= axis_weights[a][i];
            }
            space_weights[flat] = w;
        }
        Ok(Arc::new(Self {
            dim,
            intervals: vec![intervals; dim],
            steps,
            horizon,
            axis_coords,
            axis_weights,
            time_coords,
            time_weights,
            space_weights,
            space_nodes,
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Nodes per spatial axis (boundary included).
    pub fn axis_nodes(&self) -> usize {
        self.intervals[0] + 1
    }

    pub fn intervals(&self) -> usize {
        self.intervals[0]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of time levels, `steps + 1`.
    pub fn time_levels(&self) -> usize {
        self.steps + 1
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Spatial mesh width.
    pub fn h(&self) -> f64 {
        1.0 / self.intervals[0] as f64
    }

    /// Time step.
    pub fn tau(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Total flattened spatial nodes.
    pub fn space_nodes(&self) -> usize {
        self.space_nodes
    }

    /// Total space-time samples.
    pub fn points(&self) -> usize {
        self.space_nodes * self.time_levels()
    }

    pub fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        self.axis_coords[axis][i]
    }

    pub fn axis_coords(&self, axis: usize) -> &[f64] {
        &self.axis_coords[axis]
    }

    pub fn axis_weight(&self, axis: usize, i: usize) -> f64 {
        self.axis_weights[axis][i]
    }

    pub fn time_coord(&self, level: usize) -> f64 {
        self.time_coords[level]
    }

    pub fn time_coords(&self) -> &[f64] {
        &self.time_coords
    }

    pub fn time_weight(&self, level: usize) -> f64 {
        self.time_weights[level]
    }

    pub fn space_weight(&self, flat: usize) -> f64 {
        self.space_weights[flat]
    }

    pub fn space_weights(&self) -> &[f64] {
        &self.space_weights
    }

    /// Decompose a flattened spatial index into per-axis indices.
    pub fn unflatten(&self, flat: usize, out: &mut [usize]) {
        let nodes = self.axis_nodes();
        let mut rem = flat;
        for a in (0..self.dim).rev() {
            out[a] = rem % nodes;
            rem /= nodes;
        }
    }

    /// Flatten per-axis spatial indices (row-major over axes).
    pub fn flatten(&self, idx: &[usize]) -> usize {
        let nodes = self.axis_nodes();
        idx.iter().fold(0, |acc, &i| acc * nodes + i)
    }

    /// Write the coordinates of a flattened spatial node.
    pub fn node_coord(&self, flat: usize, out: &mut [f64]) {
        let nodes = self.axis_nodes();
        let mut rem = flat;
        for a in (0..self.dim).rev() {
            out[a] = self.axis_coords[a][rem % nodes];
            rem /= nodes;
        }
    }

    /// Whether a flattened spatial node touches the spatial boundary.
    pub fn on_boundary(&self, flat: usize) -> bool {
        let nodes = self.axis_nodes();
        let mut rem = flat;
        for _ in 0..self.dim {
            let i = rem % nodes;
            if i == 0 || i == nodes - 1 {
                return true;
            }
            rem /= nodes;
        }
        false
    }

    /// Quadrature weight of a space-time sample.
    pub fn point_weight(&self, node: usize, level: usize) -> f64 {
        self.space_weights[node] * self.time_weights[level]
    }

    /// Flattened space-time quadrature weights, level-major.
    pub fn point_weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.points());
        for level in 0..self.time_levels() {
            let tw = self.time_weights[level];
            w.extend(self.space_weights.iter().map(|&sw| sw * tw));
        }
        w
    }

    /// Total quadrature mass; equals the cylinder volume.
    pub fn volume(&self) -> f64 {
        let space: f64 = self.space_weights.iter().sum();
        let time: f64 = self.time_weights.iter().sum();
        space * time
    }
}

fn grids_match(a: &SharedGrid, b: &SharedGrid) -> bool {
    Arc::ptr_eq(a, b)
        || (a.dim == b.dim
            && a.intervals == b.intervals
            && a.steps == b.steps
            && a.horizon == b.horizon)
}

/// A scalar function sampled on every space-time node of a grid.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: SharedGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &SharedGrid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.points()],
        }
    }

    /// Sample a closure `f(x, t)` at every node.
    pub fn from_fn(grid: &SharedGrid, f: impl Fn(&[f64], f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.points());
        let mut x = vec![0.0; grid.dim()];
        for level in 0..grid.time_levels() {
            let t = grid.time_coord(level);
            for node in 0..grid.space_nodes() {
                grid.node_coord(node, &mut x);
                values.push(f(&x, t));
            }
        }
        Self {
            grid: grid.clone(),
            values,
        }
    }

    pub fn from_values(grid: &SharedGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.points() {
            return Err(Error::DimensionMismatch(format!(
                "field needs {} values, got {}",
                grid.points(),
                values.len()
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    pub fn grid(&self) -> &SharedGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn value(&self, node: usize, level: usize) -> f64 {
        self.values[level * self.grid.space_nodes() + node]
    }

    pub fn set(&mut self, node: usize, level: usize, v: f64) {
        self.values[level * self.grid.space_nodes() + node] = v;
    }

    /// Space-time quadrature inner product.
    pub fn inner(&self, other: &ScalarField) -> Result<f64> {
        if !grids_match(&self.grid, &other.grid) {
            return Err(Error::DimensionMismatch(
                "inner product between fields on different grids".into(),
            ));
        }
        let ns = self.grid.space_nodes();
        let mut acc = 0.0;
        for level in 0..self.grid.time_levels() {
            let tw = self.grid.time_weight(level);
            let base = level * ns;
            let mut level_acc = 0.0;
            for node in 0..ns {
                level_acc +=
                    self.grid.space_weight(node) * self.values[base + node] * other.values[base + node];
            }
            acc += tw * level_acc;
        }
        Ok(acc)
    }

    pub fn norm_l2(&self) -> f64 {
        self.inner(self).expect("same grid").max(0.0).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

/// Tensor restriction of a grid to the nodes inside an axis-aligned box.
///
/// Sample order is level-major like [`ScalarField`]: time slowest, then the
/// spatial axes row-major. Quadrature weights are composite trapezoid over
/// the included nodes per axis; an axis degenerate to a single node gets unit
/// weight so inner products stay well defined.
#[derive(Debug, Clone)]
pub struct BlockGrid {
    grid: SharedGrid,
    axis_ids: Vec<Vec<usize>>,
    time_ids: Vec<usize>,
    axis_weights: Vec<Vec<f64>>,
    time_weights: Vec<f64>,
}

fn ids_in_interval(coords: &[f64], lo: f64, hi: f64) -> Vec<usize> {
    let eps = 1e-12 * (1.0 + hi.abs());
    coords
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= lo - eps && c <= hi + eps)
        .map(|(i, _)| i)
        .collect()
}

impl BlockGrid {
    /// Restrict `grid` to the closed box. Errors when the box contains no
    /// node along some axis.
    pub fn from_box(grid: &SharedGrid, b: &SpaceTimeBox) -> Result<Self> {
        if b.dim() != grid.dim() {
            return Err(Error::DimensionMismatch(format!(
                "box dimension {} vs grid dimension {}",
                b.dim(),
                grid.dim()
            )));
        }
        let mut axis_ids = Vec::with_capacity(grid.dim());
        let mut axis_weights = Vec::with_capacity(grid.dim());
        for a in 0..grid.dim() {
            let ids = ids_in_interval(grid.axis_coords(a), b.spatial[a].lo, b.spatial[a].hi);
            if ids.is_empty() {
                return Err(Error::DegenerateInput(format!(
                    "box contains no grid nodes along spatial axis {a}"
                )));
            }
            let coords: Vec<f64> = ids.iter().map(|&i| grid.axis_coord(a, i)).collect();
            axis_weights.push(trapezoid_weights(&coords));
            axis_ids.push(ids);
        }
        let time_ids = ids_in_interval(grid.time_coords(), b.time.lo, b.time.hi);
        if time_ids.is_empty() {
            return Err(Error::DegenerateInput(
                "box contains no grid nodes along the time axis".into(),
            ));
        }
        let tcoords: Vec<f64> = time_ids.iter().map(|&j| grid.time_coord(j)).collect();
        let time_weights = trapezoid_weights(&tcoords);
        Ok(Self {
            grid: grid.clone(),
            axis_ids,
            time_ids,
            axis_weights,
            time_weights,
        })
    }

    pub fn grid(&self) -> &SharedGrid {
        &self.grid
    }

    pub fn space_count(&self) -> usize {
        self.axis_ids.iter().map(Vec::len).product()
    }

    pub fn time_count(&self) -> usize {
        self.time_ids.len()
    }

    pub fn len(&self) -> usize {
        self.space_count() * self.time_count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn axis_ids(&self, axis: usize) -> &[usize] {
        &self.axis_ids[axis]
    }

    pub fn time_ids(&self) -> &[usize] {
        &self.time_ids
    }

    /// Parent-grid flattened spatial node ids, in block order.
    pub fn space_ids(&self) -> Vec<usize> {
        let dim = self.grid.dim();
        let mut ids = Vec::with_capacity(self.space_count());
        let mut idx = vec![0usize; dim];
        let counts: Vec<usize> = self.axis_ids.iter().map(Vec::len).collect();
        loop {
            let parent: Vec<usize> = (0..dim).map(|a| self.axis_ids[a][idx[a]]).collect();
            ids.push(self.grid.flatten(&parent));
            // Row-major increment, last axis fastest.
            let mut a = dim;
            loop {
                if a == 0 {
                    return ids;
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] < counts[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
    }

    /// Quadrature weights per block sample, level-major.
    pub fn point_weights(&self) -> Vec<f64> {
        let mut space_w = Vec::with_capacity(self.space_count());
        let dim = self.grid.dim();
        let counts: Vec<usize> = self.axis_ids.iter().map(Vec::len).collect();
        let mut idx = vec![0usize; dim];
        'outer: loop {
            let w: f64 = (0..dim).map(|a| self.axis_weights[a][idx[a]]).product();
            space_w.push(w);
            let mut a = dim;
            loop {
                if a == 0 {
                    break 'outer;
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] < counts[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        let mut out = Vec::with_capacity(self.len());
        for &tw in &self.time_weights {
            out.extend(space_w.iter().map(|&sw| sw * tw));
        }
        out
    }

    /// Pull the block samples out of a full-grid field.
    pub fn extract(&self, field: &ScalarField) -> Vec<f64> {
        let space_ids = self.space_ids();
        let ns = self.grid.space_nodes();
        let mut out = Vec::with_capacity(self.len());
        for &level in &self.time_ids {
            let base = level * ns;
            out.extend(space_ids.iter().map(|&n| field.values()[base + n]));
        }
        out
    }

    /// Zero-extend block samples to a full-grid field.
    pub fn scatter(&self, block_values: &[f64]) -> Result<ScalarField> {
        if block_values.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "block has {} samples, got {}",
                self.len(),
                block_values.len()
            )));
        }
        let space_ids = self.space_ids();
        let ns = self.grid.space_nodes();
        let mut field = ScalarField::zeros(&self.grid);
        for (pos_t, &level) in self.time_ids.iter().enumerate() {
            let base = level * ns;
            let row = &block_values[pos_t * space_ids.len()..(pos_t + 1) * space_ids.len()];
            for (v, &n) in row.iter().zip(&space_ids) {
                field.values_mut()[base + n] = *v;
            }
        }
        Ok(field)
    }

    /// Multilinear interpolation of block samples at a space-time point.
    /// Coordinates outside the node hull are clamped to it.
    pub fn interpolate(&self, block_values: &[f64], x: &[f64], t: f64) -> f64 {
        debug_assert_eq!(block_values.len(), self.len());
        let dim = self.grid.dim();
        // Per-axis bracketing: (lower position, fraction toward upper).
        let mut lo_pos = vec![0usize; dim + 1];
        let mut frac = vec![0.0f64; dim + 1];
        for a in 0..dim {
            let coords: Vec<f64> = self.axis_ids[a]
                .iter()
                .map(|&i| self.grid.axis_coord(a, i))
                .collect();
            let (p, f) = bracket(&coords, x[a]);
            lo_pos[a] = p;
            frac[a] = f;
        }
        let tcoords: Vec<f64> = self.time_ids.iter().map(|&j| self.grid.time_coord(j)).collect();
        let (pt, ft) = bracket(&tcoords, t);
        lo_pos[dim] = pt;
        frac[dim] = ft;

        let counts: Vec<usize> = self.axis_ids.iter().map(Vec::len).collect();
        let space_count = self.space_count();
        let mut acc = 0.0;
        // Corners of the (dim+1)-cube; axis weights (1-f) for the low corner.
        for corner in 0..(1usize << (dim + 1)) {
            let mut w = 1.0;
            let mut space_flat = 0usize;
            for a in 0..dim {
                let up = (corner >> a) & 1;
                let pos = (lo_pos[a] + up).min(counts[a] - 1);
                w *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
                space_flat = space_flat * counts[a] + pos;
            }
            let up_t = (corner >> dim) & 1;
            let pos_t = (lo_pos[dim] + up_t).min(self.time_ids.len() - 1);
            w *= if up_t == 1 { frac[dim] } else { 1.0 - frac[dim] };
            if w != 0.0 {
                acc += w * block_values[pos_t * space_count + space_flat];
            }
        }
        acc
    }
}

/// Bracketing position and fraction for linear interpolation on ascending
/// coords; clamps outside the hull.
fn bracket(coords: &[f64], v: f64) -> (usize, f64) {
    let n = coords.len();
    if n == 1 || v <= coords[0] {
        return (0, 0.0);
    }
    if v >= coords[n - 1] {
        return (n - 2, 1.0);
    }
    let mut lo = 0;
    let mut hi = n - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if coords[mid] <= v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let f = (v - coords[lo]) / (coords[hi] - coords[lo]);
    (lo, f)
}

/// Columns of equal length sharing one quadrature weight vector.
#[derive(Debug, Clone)]
pub struct Quasimatrix {
    weights: Arc<Vec<f64>>,
    columns: Vec<Vec<f64>>,
}

impl Quasimatrix {
    pub fn new(weights: Vec<f64>) -> Self {
        Self {
            weights: Arc::new(weights),
            columns: Vec::new(),
        }
    }

    pub fn with_columns(weights: Arc<Vec<f64>>, columns: Vec<Vec<f64>>) -> Result<Self> {
        for c in &columns {
            if c.len() != weights.len() {
                return Err(Error::DimensionMismatch(format!(
                    "column length {} vs weight length {}",
                    c.len(),
                    weights.len()
                )));
            }
        }
        Ok(Self { weights, columns })
    }

    pub fn weights(&self) -> &Arc<Vec<f64>> {
        &self.weights
    }

    pub fn rows(&self) -> usize {
        self.weights.len()
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn col(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn col_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.columns[i]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn take_columns(self) -> Vec<Vec<f64>> {
        self.columns
    }

    pub fn push(&mut self, col: Vec<f64>) -> Result<()> {
        if col.len() != self.weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "column length {} vs weight length {}",
                col.len(),
                self.weights.len()
            )));
        }
        self.columns.push(col);
        Ok(())
    }

    /// Weighted inner product of two stored columns.
    pub fn inner(&self, i: usize, j: usize) -> f64 {
        weighted_dot(&self.columns[i], &self.columns[j], &self.weights)
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.inner(i, i).max(0.0).sqrt()
    }
}

/// Quadrature-weighted dot product.
pub fn weighted_dot(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(w)
        .map(|((&x, &y), &wi)| wi * x * y)
        .sum()
}
