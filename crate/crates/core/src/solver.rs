//! Reference parabolic solvers: Crank–Nicolson time stepping for
//! `u_t − ∇·(A∇u) = f` with zero Dirichlet data and zero initial state,
//! plus the exact discrete adjoint.
//!
//! The forward map is linear in the forcing; [`Propagator`] assembles the
//! per-step operators once so that many forcings can be pushed through
//! cheaply. The adjoint is the transpose of the assembled forward map under
//! the grid quadrature inner product, not a separately discretized backward
//! equation, so the duality identity holds to round-off.
//!
//! Spatial dimension 1 uses a cached tridiagonal factorization per step;
//! dimension 2 supports diagonal coefficient matrices via a five-point
//! stencil and a Jacobi-preconditioned conjugate-gradient solve.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{ScalarField, SharedGrid};

type Profile1D = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type DiagProfile2D = Arc<dyn Fn(&[f64], f64) -> [f64; 2] + Send + Sync>;

enum CoefficientKind {
    /// `c · I` for a positive constant `c`.
    Scaled(f64),
    /// Scalar profile `a(x, t)` in one dimension.
    Profile1D(Profile1D),
    /// Diagonal matrix `diag(a1, a2)(x, t)` in two dimensions.
    Diagonal2D(DiagProfile2D),
}

/// Uniformly elliptic diffusion coefficient with its ellipticity bounds.
pub struct Coefficient {
    dim: usize,
    lower: f64,
    upper: f64,
    time_dependent: bool,
    kind: CoefficientKind,
}

impl Coefficient {
    /// The unit coefficient `A ≡ I`.
    pub fn heat(dim: usize) -> Result<Self> {
        Self::scaled(dim, 1.0)
    }

    /// Constant isotropic coefficient `A ≡ c·I`.
    pub fn scaled(dim: usize, c: f64) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(Error::DimensionMismatch(format!(
                "coefficients support dimension 1 or 2, got {dim}"
            )));
        }
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "coefficient scale must be positive and finite, got {c}"
            )));
        }
        Ok(Self {
            dim,
            lower: c,
            upper: c,
            time_dependent: false,
            kind: CoefficientKind::Scaled(c),
        })
    }

    /// Scalar coefficient profile in one dimension with stated bounds.
    pub fn profile_1d(
        lower: f64,
        upper: f64,
        time_dependent: bool,
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(0.0 < lower && lower <= upper) || !upper.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ellipticity bounds must satisfy 0 < lower <= upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self {
            dim: 1,
            lower,
            upper,
            time_dependent,
            kind: CoefficientKind::Profile1D(Arc::new(f)),
        })
    }

    /// Diagonal coefficient in two dimensions with stated bounds. Fully
    /// anisotropic (off-diagonal) matrices are outside the stencil this
    /// solver assembles and are rejected at construction by omission.
    pub fn diagonal_2d(
        lower: f64,
        upper: f64,
        time_dependent: bool,
        f: impl Fn(&[f64], f64) -> [f64; 2] + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(0.0 < lower && lower <= upper) || !upper.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ellipticity bounds must satisfy 0 < lower <= upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self {
            dim: 2,
            lower,
            upper,
            time_dependent,
            kind: CoefficientKind::Diagonal2D(Arc::new(f)),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Lower ellipticity bound.
    pub fn lower(&self) -> f64 {
        self.lower
    }

    /// Upper ellipticity bound.
    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn is_time_dependent(&self) -> bool {
        self.time_dependent
    }

    fn sample_1d(&self, x: f64, t: f64) -> f64 {
        match &self.kind {
            CoefficientKind::Scaled(c) => *c,
            CoefficientKind::Profile1D(f) => f(x, t),
            CoefficientKind::Diagonal2D(_) => unreachable!("dimension checked at construction"),
        }
    }

    fn sample_diag(&self, x: &[f64], t: f64) -> [f64; 2] {
        match &self.kind {
            CoefficientKind::Scaled(c) => [*c, *c],
            CoefficientKind::Diagonal2D(f) => f(x, t),
            CoefficientKind::Profile1D(_) => unreachable!("dimension checked at construction"),
        }
    }

    /// Spot-check the stated ellipticity bounds on grid nodes, face
    /// midpoints, and a handful of time levels.
    pub fn validate_on(&self, grid: &SharedGrid) -> Result<()> {
        if grid.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "coefficient dimension {} vs grid dimension {}",
                self.dim,
                grid.dim()
            )));
        }
        let slack = 1e-10 * (1.0 + self.upper);
        let times: Vec<f64> = (0..=4)
            .map(|j| grid.horizon() * j as f64 / 4.0)
            .collect();
        let h = grid.h();
        let check = |v: f64| -> Result<()> {
            if !v.is_finite() {
                return Err(Error::NonFinite("coefficient sample".into()));
            }
            if v < self.lower - slack || v > self.upper + slack {
                return Err(Error::DegenerateInput(format!(
                    "coefficient sample {v} outside stated bounds [{}, {}]",
                    self.lower, self.upper
                )));
            }
            Ok(())
        };
        for &t in &times {
            match self.dim {
                1 => {
                    for i in 0..grid.intervals() {
                        let xm = grid.axis_coord(0, i) + 0.5 * h;
                        check(self.sample_1d(xm, t))?;
                        check(self.sample_1d(grid.axis_coord(0, i), t))?;
                    }
                }
                _ => {
                    for i in 0..=grid.intervals() {
                        for j in 0..=grid.intervals() {
                            let x = [grid.axis_coord(0, i), grid.axis_coord(1, j)];
                            let [a1, a2] = self.sample_diag(&x, t);
                            check(a1)?;
                            check(a2)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// LU factors of a symmetric positive-definite tridiagonal matrix.
struct TridiagFactor {
    pivots: Vec<f64>,
    multipliers: Vec<f64>,
    upper: Vec<f64>,
}

impl TridiagFactor {
    fn factor(sub: &[f64], diag: &[f64], sup: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut pivots = vec![0.0; n];
        let mut multipliers = vec![0.0; n];
        pivots[0] = diag[0];
        for i in 1..n {
            if pivots[i - 1] <= f64::MIN_POSITIVE {
                return Err(Error::NumericalBreakdown(
                    "nonpositive pivot in tridiagonal factorization".into(),
                ));
            }
            multipliers[i] = sub[i] / pivots[i - 1];
            pivots[i] = diag[i] - multipliers[i] * sup[i - 1];
        }
        if pivots[n - 1] <= f64::MIN_POSITIVE {
            return Err(Error::NumericalBreakdown(
                "nonpositive pivot in tridiagonal factorization".into(),
            ));
        }
        Ok(Self {
            pivots,
            multipliers,
            upper: sup.to_vec(),
        })
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = x.len();
        for i in 1..n {
            x[i] -= self.multipliers[i] * x[i - 1];
        }
        x[n - 1] /= self.pivots[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = (x[i] - self.upper[i] * x[i + 1]) / self.pivots[i];
        }
    }
}

/// Interior stencil of `∇·(A∇·)` at one time level, coefficients divided
/// by the mesh-width square.
enum Stencil {
    /// `flux_minus[i]`, `flux_plus[i]` for interior node `i`.
    One {
        flux_minus: Vec<f64>,
        flux_plus: Vec<f64>,
    },
    /// Face conductances: `x_faces[(i, j)]` sits between interior columns
    /// `i-1` and `i` at row `j` (0 and `ni` touch the boundary), and
    /// symmetrically for `y_faces`.
    Two {
        x_faces: Vec<f64>,
        y_faces: Vec<f64>,
        ni: usize,
    },
}

struct LevelOperator {
    stencil: Stencil,
    /// Factorization of `I − (τ/2)·L` at this level (1D only).
    factor: Option<TridiagFactor>,
}

/// Assembled Crank–Nicolson time stepper for one coefficient/grid pair.
pub struct Propagator {
    grid: SharedGrid,
    levels: Vec<LevelOperator>,
    time_dependent: bool,
    interior_per_axis: usize,
    cg_tolerance: f64,
}

/// Relative residual target for the 2D conjugate-gradient solve; tight so
/// the transpose identity survives to the duality tolerance.
const CG_RELATIVE_TOLERANCE: f64 = 1e-13;

impl Propagator {
    pub fn new(coeff: &Coefficient, grid: &SharedGrid) -> Result<Self> {
        coeff.validate_on(grid)?;
        let tau = grid.tau();
        let level_count = if coeff.is_time_dependent() {
            grid.time_levels()
        } else {
            1
        };
        let mut levels = Vec::with_capacity(level_count);
        for l in 0..level_count {
            let t = grid.time_coord(l);
            let stencil = build_stencil(coeff, grid, t);
            let factor = match &stencil {
                Stencil::One {
                    flux_minus,
                    flux_plus,
                } => {
                    let ni = flux_minus.len();
                    let mut sub = vec![0.0; ni];
                    let mut diag = vec![0.0; ni];
                    let mut sup = vec![0.0; ni];
                    for i in 0..ni {
                        sub[i] = -0.5 * tau * flux_minus[i];
                        diag[i] = 1.0 + 0.5 * tau * (flux_minus[i] + flux_plus[i]);
                        sup[i] = -0.5 * tau * flux_plus[i];
                    }
                    Some(TridiagFactor::factor(&sub, &diag, &sup)?)
                }
                Stencil::Two { .. } => None,
            };
            levels.push(LevelOperator { stencil, factor });
        }
        Ok(Self {
            grid: grid.clone(),
            levels,
            time_dependent: coeff.is_time_dependent(),
            interior_per_axis: grid.axis_nodes() - 2,
            cg_tolerance: CG_RELATIVE_TOLERANCE,
        })
    }

    pub fn grid(&self) -> &SharedGrid {
        &self.grid
    }

    fn level_op(&self, l: usize) -> &LevelOperator {
        if self.time_dependent {
            &self.levels[l]
        } else {
            &self.levels[0]
        }
    }

    fn interior_len(&self) -> usize {
        self.interior_per_axis.pow(self.grid.dim() as u32)
    }

    /// Interior index -> flattened grid node.
    fn interior_to_node(&self, idx: usize) -> usize {
        let nodes = self.grid.axis_nodes();
        match self.grid.dim() {
            1 => idx + 1,
            _ => {
                let ni = self.interior_per_axis;
                let (i, j) = (idx / ni, idx % ni);
                (i + 1) * nodes + (j + 1)
            }
        }
    }

    fn gather_interior(&self, field: &ScalarField, level: usize, out: &mut [f64]) {
        let base = level * self.grid.space_nodes();
        for idx in 0..out.len() {
            out[idx] = field.values()[base + self.interior_to_node(idx)];
        }
    }

    fn scatter_interior(&self, values: &[f64], level: usize, field: &mut ScalarField) {
        let base = level * self.grid.space_nodes();
        for (idx, &v) in values.iter().enumerate() {
            field.values_mut()[base + self.interior_to_node(idx)] = v;
        }
    }

    fn apply_stencil(&self, l: usize, u: &[f64], out: &mut [f64]) {
        match &self.level_op(l).stencil {
            Stencil::One {
                flux_minus,
                flux_plus,
            } => {
                let ni = u.len();
                for i in 0..ni {
                    let left = if i > 0 { u[i - 1] } else { 0.0 };
                    let right = if i + 1 < ni { u[i + 1] } else { 0.0 };
                    out[i] = flux_minus[i] * (left - u[i]) + flux_plus[i] * (right - u[i]);
                }
            }
            Stencil::Two {
                x_faces,
                y_faces,
                ni,
            } => {
                let ni = *ni;
                for i in 0..ni {
                    for j in 0..ni {
                        let c = u[i * ni + j];
                        let west = if i > 0 { u[(i - 1) * ni + j] } else { 0.0 };
                        let east = if i + 1 < ni { u[(i + 1) * ni + j] } else { 0.0 };
                        let south = if j > 0 { u[i * ni + j - 1] } else { 0.0 };
                        let north = if j + 1 < ni { u[i * ni + j + 1] } else { 0.0 };
                        out[i * ni + j] = x_faces[i * ni + j] * (west - c)
                            + x_faces[(i + 1) * ni + j] * (east - c)
                            + y_faces[i * (ni + 1) + j] * (south - c)
                            + y_faces[i * (ni + 1) + j + 1] * (north - c);
                    }
                }
            }
        }
    }

    /// Solve `(I − (τ/2)L_l) x = rhs`; `x` carries the warm start.
    fn solve_implicit(&self, l: usize, rhs: &mut Vec<f64>, x: &mut Vec<f64>) -> Result<()> {
        let op = self.level_op(l);
        match &op.factor {
            Some(f) => {
                f.solve_in_place(rhs);
                std::mem::swap(rhs, x);
                Ok(())
            }
            None => self.conjugate_gradient(l, rhs, x),
        }
    }

    fn apply_implicit_matrix(&self, l: usize, v: &[f64], out: &mut [f64]) {
        let tau = self.grid.tau();
        self.apply_stencil(l, v, out);
        for (o, &vi) in out.iter_mut().zip(v) {
            *o = vi - 0.5 * tau * *o;
        }
    }

    fn conjugate_gradient(&self, l: usize, rhs: &Vec<f64>, x: &mut Vec<f64>) -> Result<()> {
        let n = rhs.len();
        let tau = self.grid.tau();
        // Jacobi preconditioner from the stencil diagonal.
        let mut inv_diag = vec![0.0; n];
        match &self.level_op(l).stencil {
            Stencil::Two {
                x_faces,
                y_faces,
                ni,
            } => {
                let ni = *ni;
                for i in 0..ni {
                    for j in 0..ni {
                        let s = x_faces[i * ni + j]
                            + x_faces[(i + 1) * ni + j]
                            + y_faces[i * (ni + 1) + j]
                            + y_faces[i * (ni + 1) + j + 1];
                        inv_diag[i * ni + j] = 1.0 / (1.0 + 0.5 * tau * s);
                    }
                }
            }
            Stencil::One { .. } => unreachable!("1D path uses the direct factorization"),
        }
        let norm_b = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm_b == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(());
        }
        let target = self.cg_tolerance * norm_b;
        let mut r = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        self.apply_implicit_matrix(l, x, &mut tmp);
        for i in 0..n {
            r[i] = rhs[i] - tmp[i];
        }
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, d)| ri * d).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let max_iter = 20 * n + 50;
        for _ in 0..max_iter {
            let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rnorm <= target {
                return Ok(());
            }
            self.apply_implicit_matrix(l, &p, &mut tmp);
            let pap: f64 = p.iter().zip(&tmp).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                return Err(Error::NumericalBreakdown(
                    "conjugate gradient lost positive definiteness".into(),
                ));
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * tmp[i];
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= 1e-10 * norm_b {
            Ok(())
        } else {
            Err(Error::NumericalBreakdown(format!(
                "conjugate gradient stalled at relative residual {:e}",
                rnorm / norm_b
            )))
        }
    }

    /// March the Crank–Nicolson recurrence from the zero initial state.
    pub fn solve_forward(&self, f: &ScalarField) -> Result<ScalarField> {
        self.check_field(f)?;
        let steps = self.grid.steps();
        let tau = self.grid.tau();
        let n = self.interior_len();
        let mut u = ScalarField::zeros(&self.grid);
        let mut u_int = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let mut lu = vec![0.0; n];
        let mut f_lo = vec![0.0; n];
        let mut f_hi = vec![0.0; n];
        self.gather_interior(f, 0, &mut f_hi);
        for m in 0..steps {
            std::mem::swap(&mut f_lo, &mut f_hi);
            self.gather_interior(f, m + 1, &mut f_hi);
            self.apply_stencil(m.min(self.last_level()), &u_int, &mut lu);
            for i in 0..n {
                rhs[i] = u_int[i] + 0.5 * tau * (lu[i] + f_lo[i] + f_hi[i]);
            }
            self.solve_step(m + 1, &mut rhs, &mut u_int)?;
            self.scatter_interior(&u_int, m + 1, &mut u);
        }
        u.check_finite("forward solution")?;
        Ok(u)
    }

    fn last_level(&self) -> usize {
        if self.time_dependent {
            self.grid.time_levels() - 1
        } else {
            0
        }
    }

    fn solve_step(&self, level: usize, rhs: &mut Vec<f64>, x: &mut Vec<f64>) -> Result<()> {
        let l = level.min(self.last_level());
        self.solve_implicit(l, rhs, x)
    }

    /// Apply the quadrature adjoint of [`Self::solve_forward`]: the exact
    /// transpose of the assembled forward map, conjugated by the space-time
    /// quadrature weights.
    pub fn solve_adjoint(&self, g: &ScalarField) -> Result<ScalarField> {
        self.check_field(g)?;
        let steps = self.grid.steps();
        let tau = self.grid.tau();
        let n = self.interior_len();
        let mut out = ScalarField::zeros(&self.grid);
        // Weighted data, interior only.
        let mut weighted = vec![vec![0.0; n]; steps + 1];
        for (level, row) in weighted.iter_mut().enumerate() {
            self.gather_interior(g, level, row);
            let tw = self.grid.time_weight(level);
            for (idx, v) in row.iter_mut().enumerate() {
                *v *= tw * self.grid.space_weight(self.interior_to_node(idx));
            }
        }
        let mut nu_next = vec![0.0; n];
        let mut nu = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut phi = vec![0.0; n];
        for level in (1..=steps).rev() {
            // nu_level = B_level^{-1} (g_level + C_level nu_{level+1}).
            self.apply_stencil(level.min(self.last_level()), &nu_next, &mut tmp);
            for i in 0..n {
                rhs[i] = weighted[level][i] + nu_next[i] + 0.5 * tau * tmp[i];
            }
            self.solve_step(level, &mut rhs, &mut nu)?;
            for i in 0..n {
                phi[i] = 0.5 * tau * (nu[i] + nu_next[i]);
            }
            self.unscale_and_store(&phi, level, &mut out);
            std::mem::swap(&mut nu, &mut nu_next);
        }
        for i in 0..n {
            phi[i] = 0.5 * tau * nu_next[i];
        }
        self.unscale_and_store(&phi, 0, &mut out);
        out.check_finite("adjoint solution")?;
        Ok(out)
    }

    fn unscale_and_store(&self, phi: &[f64], level: usize, out: &mut ScalarField) {
        let tw = self.grid.time_weight(level);
        let base = level * self.grid.space_nodes();
        for (idx, &v) in phi.iter().enumerate() {
            let node = self.interior_to_node(idx);
            out.values_mut()[base + node] = v / (tw * self.grid.space_weight(node));
        }
    }

    /// Response to a unit impulse applied at one interior node at time
    /// level `level`, marched with a Rannacher start: four backward-Euler
    /// half-steps (two per level, reusing the `I − (τ/2)L` factors) carry
    /// the spike over the first two levels after the source, then the
    /// trapezoidal recurrence takes over with zero forcing. The backward
    /// steps crush the mid-frequency transients that the trapezoidal rule
    /// barely damps, while keeping the march second-order accurate.
    fn impulse_response(&self, node: usize, level: usize) -> Result<ScalarField> {
        let n = self.interior_len();
        let steps = self.grid.steps();
        let tau = self.grid.tau();
        let interior_idx = (0..n)
            .find(|&idx| self.interior_to_node(idx) == node)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("node {node} is not an interior node"))
            })?;
        let mut u = ScalarField::zeros(&self.grid);
        let mut rhs = vec![0.0; n];
        let mut u_int = vec![0.0; n];
        let mut lu = vec![0.0; n];
        // A unit impulse at the source time enters the first step whole:
        // its time integral against one step is 1, leaving 1/(spatial weight).
        rhs[interior_idx] = 1.0 / self.grid.space_weight(node);
        self.solve_step(level + 1, &mut rhs, &mut u_int)?;
        rhs.copy_from_slice(&u_int);
        self.solve_step(level + 1, &mut rhs, &mut u_int)?;
        self.scatter_interior(&u_int, level + 1, &mut u);
        let mut resume = level + 1;
        if level + 2 <= steps {
            rhs.copy_from_slice(&u_int);
            self.solve_step(level + 2, &mut rhs, &mut u_int)?;
            rhs.copy_from_slice(&u_int);
            self.solve_step(level + 2, &mut rhs, &mut u_int)?;
            self.scatter_interior(&u_int, level + 2, &mut u);
            resume = level + 2;
        }
        for m in resume..steps {
            self.apply_stencil(m.min(self.last_level()), &u_int, &mut lu);
            for i in 0..n {
                rhs[i] = u_int[i] + 0.5 * tau * lu[i];
            }
            self.solve_step(m + 1, &mut rhs, &mut u_int)?;
            self.scatter_interior(&u_int, m + 1, &mut u);
        }
        u.check_finite("impulse response")?;
        Ok(u)
    }

    fn check_field(&self, f: &ScalarField) -> Result<()> {
        if !Arc::ptr_eq(f.grid(), &self.grid) && f.grid().points() != self.grid.points() {
            return Err(Error::DimensionMismatch(
                "field grid does not match the propagator grid".into(),
            ));
        }
        f.check_finite("solver input")
    }
}

fn build_stencil(coeff: &Coefficient, grid: &SharedGrid, t: f64) -> Stencil {
    let h = grid.h();
    let inv_h2 = 1.0 / (h * h);
    let ni = grid.axis_nodes() - 2;
    match grid.dim() {
        1 => {
            let mut flux_minus = vec![0.0; ni];
            let mut flux_plus = vec![0.0; ni];
            for i in 0..ni {
                let x = grid.axis_coord(0, i + 1);
                flux_minus[i] = coeff.sample_1d(x - 0.5 * h, t) * inv_h2;
                flux_plus[i] = coeff.sample_1d(x + 0.5 * h, t) * inv_h2;
            }
            Stencil::One {
                flux_minus,
                flux_plus,
            }
        }
        _ => {
            // Face between interior columns i-1 and i (x) or rows j-1 and j (y);
            // indices 0 and ni are faces against the Dirichlet boundary.
            let mut x_faces = vec![0.0; (ni + 1) * ni];
            let mut y_faces = vec![0.0; ni * (ni + 1)];
            for i in 0..=ni {
                for j in 0..ni {
                    let xm = [
                        grid.axis_coord(0, i + 1) - 0.5 * h,
                        grid.axis_coord(1, j + 1),
                    ];
                    x_faces[i * ni + j] = coeff.sample_diag(&xm, t)[0] * inv_h2;
                }
            }
            for i in 0..ni {
                for j in 0..=ni {
                    let ym = [
                        grid.axis_coord(0, i + 1),
                        grid.axis_coord(1, j + 1) - 0.5 * h,
                    ];
                    y_faces[i * (ni + 1) + j] = coeff.sample_diag(&ym, t)[1] * inv_h2;
                }
            }
            Stencil::Two {
                x_faces,
                y_faces,
                ni,
            }
        }
    }
}

/// The forcing-to-solution map probed during learning, with its adjoint.
///
/// [`Propagator`] is the built-in implementation. Implementing this trait is
/// the hook for driving the same learning pipeline from another pair source
/// (a surrogate operator, a test stub, recorded responses).
pub trait ForwardMap: Sync {
    /// Discretization shared by inputs and outputs.
    fn grid(&self) -> &SharedGrid;

    /// Solution of the forward problem for the given forcing.
    fn forward(&self, forcing: &ScalarField) -> Result<ScalarField>;

    /// Adjoint of [`Self::forward`] under the space-time quadrature.
    fn adjoint(&self, data: &ScalarField) -> Result<ScalarField>;
}

impl ForwardMap for Propagator {
    fn grid(&self) -> &SharedGrid {
        Propagator::grid(self)
    }

    fn forward(&self, forcing: &ScalarField) -> Result<ScalarField> {
        self.solve_forward(forcing)
    }

    fn adjoint(&self, data: &ScalarField) -> Result<ScalarField> {
        self.solve_adjoint(data)
    }
}

/// One forward solve without keeping the propagator.
pub fn solve_forward(coeff: &Coefficient, f: &ScalarField, grid: &SharedGrid) -> Result<ScalarField> {
    Propagator::new(coeff, grid)?.solve_forward(f)
}

/// One adjoint solve without keeping the propagator.
pub fn solve_adjoint(coeff: &Coefficient, g: &ScalarField, grid: &SharedGrid) -> Result<ScalarField> {
    Propagator::new(coeff, grid)?.solve_adjoint(g)
}

/// Unit-impulse forcing at one space-time node: a Kronecker spike scaled by
/// the reciprocal quadrature weight.
pub fn delta_forcing(grid: &SharedGrid, node: usize, level: usize) -> ScalarField {
    let mut f = ScalarField::zeros(grid);
    let w = grid.point_weight(node, level);
    f.set(node, level, 1.0 / w);
    f
}

/// One column of the discrete kernel: response to a unit impulse at
/// `(node, level)`, with entries at times `t ≤ s` exactly zero.
///
/// Feeding [`delta_forcing`] straight into the trapezoidal stepper leaves
/// slowly damped mid-frequency transients that pollute the column for many
/// steps, so every column instead marches from the source time with a
/// Rannacher start (see [`Propagator`] internals): the result is the
/// second-order-accurate discrete kernel, free of step-response ringing.
pub fn greens_column(prop: &Propagator, node: usize, level: usize) -> Result<ScalarField> {
    let grid = prop.grid();
    if grid.on_boundary(node) {
        // Dirichlet data annihilates boundary impulses.
        return Ok(ScalarField::zeros(grid));
    }
    if level >= grid.steps() {
        // Everything is at or before the source time.
        return Ok(ScalarField::zeros(grid));
    }
    // The march starts at the source level, so earlier levels stay zero.
    prop.impulse_response(node, level)
}
